use std::collections::BTreeMap;

use super::ViTConfig;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{PatchGeometry, PositionTable, PATCH_DIM};

pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T: Real = f32> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    /// `[dim × 3·dim]`, columns laid out as q | k | v.
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub attn_out_w: Tensor<T>,
    pub attn_out_b: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub mlp_fc1_w: Tensor<T>,
    pub mlp_fc1_b: Tensor<T>,
    pub mlp_fc2_w: Tensor<T>,
    pub mlp_fc2_b: Tensor<T>,
}

/// Every learnable tensor of the model. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub cls: Tensor<T>,
    pub pos: PositionTable<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_g: Tensor<T>,
    pub norm_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

/// Expected `(name, shape)` list for a config and token geometry, in the
/// canonical parameter order.
pub fn parameter_shapes(cfg: &ViTConfig, geometry: PatchGeometry) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let h = cfg.hidden();
    let mut out = vec![
        ("proj.w".to_string(), vec![PATCH_DIM, d]),
        ("proj.b".to_string(), vec![d]),
        ("cls".to_string(), vec![1, d]),
        ("pos.cls".to_string(), vec![1, d]),
        (
            "pos.patch".to_string(),
            vec![geometry.depth, geometry.grid_h, geometry.grid_w, d],
        ),
    ];
    for i in 0..cfg.depth {
        let p = |s: &str| format!("blk{i}.{s}");
        out.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.qkv.w"), vec![d, 3 * d]),
            (p("attn.qkv.b"), vec![3 * d]),
            (p("attn.out.w"), vec![d, d]),
            (p("attn.out.b"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.fc1.w"), vec![d, h]),
            (p("mlp.fc1.b"), vec![h]),
            (p("mlp.fc2.w"), vec![h, d]),
            (p("mlp.fc2.b"), vec![d]),
        ]);
    }
    out.extend([
        ("norm.g".to_string(), vec![d]),
        ("norm.b".to_string(), vec![d]),
        ("head.w".to_string(), vec![d, 1]),
        ("head.b".to_string(), vec![1]),
    ]);
    out
}

impl<T: Real> ModelParams<T> {
    /// Fresh parameters: truncated-normal (std 0.02) weights and embeddings,
    /// zero biases, unit layer-norm gains.
    pub fn init(cfg: &ViTConfig, geometry: PatchGeometry, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mut named = BTreeMap::new();
        for (name, shape) in parameter_shapes(cfg, geometry) {
            let t = if name.ends_with(".g") {
                Tensor::full(&shape, T::one())
            } else if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                Tensor::from_fn(&shape, |_| T::of(rng.truncated_normal(INIT_STD)))
            };
            named.insert(name, t);
        }
        Self::from_named(named, cfg)
    }

    /// Builds parameters from a name → tensor map, checking every shape.
    pub fn from_named(mut named: BTreeMap<String, Tensor<T>>, cfg: &ViTConfig) -> Result<Self> {
        cfg.validate()?;
        let pos = named
            .get("pos.patch")
            .ok_or_else(|| Error::MissingTensor("pos.patch".into()))?;
        if pos.rank() != 4 {
            return Err(Error::TensorShape {
                name: "pos.patch".into(),
                expected: vec![0, 0, 0, cfg.dim],
                found: pos.shape().to_vec(),
            });
        }
        let geometry = PatchGeometry::new(pos.shape()[0], pos.shape()[1], pos.shape()[2])?;
        for (name, shape) in parameter_shapes(cfg, geometry) {
            let t = named.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        let mut take = |name: &str| named.remove(name).expect("checked above");
        let proj_w = take("proj.w");
        let proj_b = take("proj.b");
        let cls = take("cls");
        let pos = PositionTable {
            class_pe: take("pos.cls"),
            patch_pe: take("pos.patch"),
        };
        let blocks = (0..cfg.depth)
            .map(|i| {
                let mut t = |s: &str| take(&format!("blk{i}.{s}"));
                BlockParams {
                    ln1_g: t("ln1.g"),
                    ln1_b: t("ln1.b"),
                    qkv_w: t("attn.qkv.w"),
                    qkv_b: t("attn.qkv.b"),
                    attn_out_w: t("attn.out.w"),
                    attn_out_b: t("attn.out.b"),
                    ln2_g: t("ln2.g"),
                    ln2_b: t("ln2.b"),
                    mlp_fc1_w: t("mlp.fc1.w"),
                    mlp_fc1_b: t("mlp.fc1.b"),
                    mlp_fc2_w: t("mlp.fc2.w"),
                    mlp_fc2_b: t("mlp.fc2.b"),
                }
            })
            .collect();
        Ok(ModelParams {
            proj_w,
            proj_b,
            cls,
            pos,
            blocks,
            norm_g: take("norm.g"),
            norm_b: take("norm.b"),
            head_w: take("head.w"),
            head_b: take("head.b"),
        })
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.pos.geometry()
    }

    /// Checks every tensor against the shapes `cfg` implies. Head count is
    /// invisible in the shapes, so only divisibility is checked for it.
    pub fn check_config(&self, cfg: &ViTConfig) -> Result<()> {
        cfg.validate()?;
        if self.blocks.len() != cfg.depth {
            return Err(Error::invalid(format!(
                "model has {} blocks, config says {}",
                self.blocks.len(),
                cfg.depth
            )));
        }
        for ((name, t), (_, shape)) in self.named().into_iter().zip(parameter_shapes(cfg, self.geometry())) {
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("proj.w".into(), &self.proj_w),
            ("proj.b".into(), &self.proj_b),
            ("cls".into(), &self.cls),
            ("pos.cls".into(), &self.pos.class_pe),
            ("pos.patch".into(), &self.pos.patch_pe),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blk{i}.{s}");
            out.extend([
                (p("ln1.g"), &b.ln1_g),
                (p("ln1.b"), &b.ln1_b),
                (p("attn.qkv.w"), &b.qkv_w),
                (p("attn.qkv.b"), &b.qkv_b),
                (p("attn.out.w"), &b.attn_out_w),
                (p("attn.out.b"), &b.attn_out_b),
                (p("ln2.g"), &b.ln2_g),
                (p("ln2.b"), &b.ln2_b),
                (p("mlp.fc1.w"), &b.mlp_fc1_w),
                (p("mlp.fc1.b"), &b.mlp_fc1_b),
                (p("mlp.fc2.w"), &b.mlp_fc2_w),
                (p("mlp.fc2.b"), &b.mlp_fc2_b),
            ]);
        }
        out.extend([
            ("norm.g".into(), &self.norm_g),
            ("norm.b".into(), &self.norm_b),
            ("head.w".into(), &self.head_w),
            ("head.b".into(), &self.head_b),
        ]);
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.cls,
            &mut self.pos.class_pe,
            &mut self.pos.patch_pe,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.qkv_w,
                &mut b.qkv_b,
                &mut b.attn_out_w,
                &mut b.attn_out_b,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.mlp_fc1_w,
                &mut b.mlp_fc1_b,
                &mut b.mlp_fc2_w,
                &mut b.mlp_fc2_b,
            ]);
        }
        out.extend([
            &mut self.norm_g,
            &mut self.norm_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor<T>> {
        self.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let cast = |t: &Tensor<T>| t.cast::<U>();
        ModelParams {
            proj_w: cast(&self.proj_w),
            proj_b: cast(&self.proj_b),
            cls: cast(&self.cls),
            pos: PositionTable {
                class_pe: cast(&self.pos.class_pe),
                patch_pe: cast(&self.pos.patch_pe),
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_g: cast(&b.ln1_g),
                    ln1_b: cast(&b.ln1_b),
                    qkv_w: cast(&b.qkv_w),
                    qkv_b: cast(&b.qkv_b),
                    attn_out_w: cast(&b.attn_out_w),
                    attn_out_b: cast(&b.attn_out_b),
                    ln2_g: cast(&b.ln2_g),
                    ln2_b: cast(&b.ln2_b),
                    mlp_fc1_w: cast(&b.mlp_fc1_w),
                    mlp_fc1_b: cast(&b.mlp_fc1_b),
                    mlp_fc2_w: cast(&b.mlp_fc2_w),
                    mlp_fc2_b: cast(&b.mlp_fc2_b),
                })
                .collect(),
            norm_g: cast(&self.norm_g),
            norm_b: cast(&self.norm_b),
            head_w: cast(&self.head_w),
            head_b: cast(&self.head_b),
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &ModelParams<T>) -> Result<()> {
        let others: Vec<&Tensor<T>> = other.named().into_iter().map(|(_, t)| t).collect();
        let mine = self.tensors_mut();
        if mine.len() != others.len() {
            return Err(Error::invalid("parameter sets differ in depth"));
        }
        for (a, b) in mine.into_iter().zip(others) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Name of the first tensor holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named()
            .into_iter()
            .find(|(_, t)| !t.all_finite())
            .map(|(n, _)| n)
    }

    pub fn bits_equal(&self, other: &ModelParams<T>) -> bool {
        let a = self.named();
        let b = other.named();
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bits_equal(tb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ViTConfig, PatchGeometry) {
        (ViTConfig::new(8, 2, 2, 4).unwrap(), PatchGeometry::new(2, 2, 2).unwrap())
    }

    #[test]
    fn names_are_unique_and_match_shapes() {
        let (cfg, geo) = tiny();
        let p = ModelParams::<f32>::init(&cfg, geo, &mut SeededRng::new(1)).unwrap();
        let named = p.named();
        let shapes = parameter_shapes(&cfg, geo);
        assert_eq!(named.len(), shapes.len());
        let mut names: Vec<_> = named.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), shapes.len());
        for ((n, t), (sn, ss)) in named.iter().zip(&shapes) {
            assert_eq!(n, sn);
            assert_eq!(t.shape(), ss.as_slice());
        }
        assert_eq!(p.tensors_mut_len(), named.len());
    }

    impl<T: Real> ModelParams<T> {
        fn tensors_mut_len(&self) -> usize {
            self.clone().tensors_mut().len()
        }
    }

    #[test]
    fn named_roundtrip_and_missing_tensor() {
        let (cfg, geo) = tiny();
        let p = ModelParams::<f32>::init(&cfg, geo, &mut SeededRng::new(2)).unwrap();
        let mut named = p.to_named();
        assert!(ModelParams::from_named(named.clone(), &cfg).unwrap().bits_equal(&p));
        named.remove("blk1.mlp.fc2.b");
        let err = ModelParams::from_named(named, &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingTensor(ref n) if n == "blk1.mlp.fc2.b"));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let (cfg, geo) = tiny();
        let p = ModelParams::<f32>::init(&cfg, geo, &mut SeededRng::new(3)).unwrap();
        let mut named = p.to_named();
        named.insert("blk0.attn.qkv.w".into(), Tensor::zeros(&[8, 8]));
        let err = ModelParams::from_named(named, &cfg).unwrap_err().to_string();
        assert!(err.contains("blk0.attn.qkv.w"), "{err}");
    }

    #[test]
    fn init_is_deterministic() {
        let (cfg, geo) = tiny();
        let a = ModelParams::<f32>::init(&cfg, geo, &mut SeededRng::new(4)).unwrap();
        let b = ModelParams::<f32>::init(&cfg, geo, &mut SeededRng::new(4)).unwrap();
        assert!(a.bits_equal(&b));
        assert!(a.norm_g.data().iter().all(|&v| v == 1.0));
        assert!(a.proj_b.data().iter().all(|&v| v == 0.0));
    }
}
