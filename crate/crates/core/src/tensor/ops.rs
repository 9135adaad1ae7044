use super::{Real, Tensor};
use crate::error::{Error, Result};

const MR: usize = 4;
const NR: usize = 8;

/// B packed into column panels of width `NR`: panel `p` holds
/// `b[t][p·NR .. p·NR + NR]` for every `t`, zero-padded past `n`.
struct PackedB {
    panels: Vec<f64>,
    k: usize,
    n: usize,
}

impl PackedB {
    /// `get(t, j)` yields `b[t][j]`.
    fn pack(k: usize, n: usize, get: impl Fn(usize, usize) -> f64) -> Self {
        let np = n.div_ceil(NR);
        let mut panels = vec![0.0; np * k * NR];
        for p in 0..np {
            let panel = &mut panels[p * k * NR..(p + 1) * k * NR];
            for t in 0..k {
                for c in 0..NR.min(n - p * NR) {
                    panel[t * NR + c] = get(t, p * NR + c);
                }
            }
        }
        PackedB { panels, k, n }
    }
}

/// `c[m×n] = a[m×k] · b` with `a` row-major f64.
///
/// Each `MR × NR` output tile is accumulated in registers over the full
/// inner dimension, in increasing `t`, so every output element is the same
/// left-to-right f64 sum a naive triple loop would produce.
fn gemm_f64(a: &[f64], b: &PackedB, m: usize) -> Vec<f64> {
    let (k, n) = (b.k, b.n);
    debug_assert_eq!(a.len(), m * k);
    let mut c = vec![0.0; m * n];
    for (p, panel) in b.panels.chunks_exact(k * NR).enumerate() {
        let j0 = p * NR;
        let width = NR.min(n - j0);
        let mut i = 0;
        while i + MR <= m {
            let mut acc = [[0.0f64; NR]; MR];
            let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
            for (t, bv) in panel.chunks_exact(NR).enumerate() {
                for r in 0..MR {
                    let av = rows[r][t];
                    for col in 0..NR {
                        acc[r][col] += av * bv[col];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                c[(i + r) * n + j0..(i + r) * n + j0 + width].copy_from_slice(&acc_row[..width]);
            }
            i += MR;
        }
        while i < m {
            let mut acc = [0.0f64; NR];
            let row = &a[i * k..(i + 1) * k];
            for (t, bv) in panel.chunks_exact(NR).enumerate() {
                let av = row[t];
                for col in 0..NR {
                    acc[col] += av * bv[col];
                }
            }
            c[i * n + j0..i * n + j0 + width].copy_from_slice(&acc[..width]);
            i += 1;
        }
    }
    c
}

fn widen<T: Real>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.wide()).collect()
}

/// Widened transpose of a row-major `rows × cols` buffer.
fn widen_transposed<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for (c, v) in x[r * cols..(r + 1) * cols].iter().enumerate() {
            out[c * rows + r] = v.wide();
        }
    }
    out
}

fn narrow<T: Real>(c: Vec<f64>) -> Vec<T> {
    c.into_iter().map(T::of).collect()
}

fn matrix_dims<T: Real>(t: &Tensor<T>, op: &'static str, other: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: other.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Matrix product `a · b`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "matmul", b)?;
    let (k2, n) = matrix_dims(b, "matmul", a)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let bd = b.data();
    let packed = PackedB::pack(k, n, |t, j| bd[t * n + j].wide());
    let c = gemm_f64(&widen(a.data()), &packed, m);
    Tensor::new(&[m, n], narrow(c))
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = matrix_dims(a, "matmul_tn", b)?;
    let (k2, n) = matrix_dims(b, "matmul_tn", a)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let bd = b.data();
    let packed = PackedB::pack(k, n, |t, j| bd[t * n + j].wide());
    let c = gemm_f64(&widen_transposed(a.data(), k, m), &packed, m);
    Tensor::new(&[m, n], narrow(c))
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "matmul_nt", b)?;
    let (n, k2) = matrix_dims(b, "matmul_nt", a)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let bd = b.data();
    let packed = PackedB::pack(k, n, |t, j| bd[j * k + t].wide());
    let c = gemm_f64(&widen(a.data()), &packed, m);
    Tensor::new(&[m, n], narrow(c))
}

/// Numerically stable softmax over one row, in place.
fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.wide()));
    let mut sum = 0.0;
    let mut buf = Vec::with_capacity(row.len());
    for v in row.iter() {
        let e = (v.wide() - max).exp();
        sum += e;
        buf.push(e);
    }
    for (v, e) in row.iter_mut().zip(buf) {
        *v = T::of(e / sum);
    }
}

/// Softmax over the last dimension; rejects NaN and infinite input.
pub fn softmax_lastdim<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.all_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = x.clone();
    softmax_rows_in_place(out.data_mut(), x.last_dim());
    Ok(out)
}

/// Row-wise softmax over a flat buffer of `width`-sized rows.
pub fn softmax_rows_in_place<T: Real>(data: &mut [T], width: usize) {
    for row in data.chunks_exact_mut(width) {
        softmax_row(row);
    }
}

/// Per-row statistics kept by layer norm for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormStats<T: Real> {
    /// Normalized input before the affine transform.
    pub xhat: Tensor<T>,
    /// `1 / sqrt(var + eps)` per row.
    pub rstd: Vec<f64>,
}

pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_stats<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormStats<T>)> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if eps <= 0.0 {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    let rows = x.rows();
    let mut y = Vec::with_capacity(x.numel());
    let mut xhat = Vec::with_capacity(x.numel());
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().map(|v| v.wide()).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|v| {
                let c = v.wide() - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            let h = (v.wide() - mean) * rstd;
            xhat.push(T::of(h));
            y.push(T::of(h * g.wide() + b.wide()));
        }
        rstds.push(rstd);
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        LayerNormStats {
            xhat: Tensor::new(x.shape(), xhat)?,
            rstd: rstds,
        },
    ))
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `tanh` through a single `exp`; several times cheaper than libm's `tanh`
/// and within a few ulp of it.
#[inline]
fn fast_tanh(z: f64) -> f64 {
    if z.abs() > 20.0 {
        return z.signum();
    }
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)))
}

/// Derivative of the tanh-approximation GELU.
#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let th = fast_tanh(inner);
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::of(gelu_scalar(v.wide())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn naive(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a.data()[i * k + t] as f64 * b.data()[t * n + j] as f64;
                }
            }
        }
        c
    }

    fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| rng.normal() as f32)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let i2 = Tensor::<f32>::eye(2);
        let b = Tensor::new(&[2, 2], vec![3.0f32, 4.0, 5.0, 6.0]).unwrap();
        assert!(matmul(&i2, &b).unwrap().bits_equal(&b));
        let a = Tensor::new(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let c = Tensor::new(&[2, 1], vec![3.0f32, 4.0]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(7);
        let a = random(&[7, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for (got, want) in c.data().iter().zip(naive(&a, &b)) {
            assert!((*got as f64 - want).abs() <= 1e-6 * want.abs().max(1e-6));
        }
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let mut rng = SeededRng::new(11);
        let a = random(&[9, 6], &mut rng);
        let b = random(&[9, 4], &mut rng);
        let tn = matmul_tn(&a, &b).unwrap();
        let explicit = matmul(&a.transpose().unwrap(), &b).unwrap();
        assert!(tn.bits_equal(&explicit));
        let c = random(&[4, 6], &mut rng);
        let nt = matmul_nt(&a, &c).unwrap();
        let explicit = matmul(&a, &c.transpose().unwrap()).unwrap();
        assert!(nt.bits_equal(&explicit));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn identity_is_exact_on_both_sides() {
        let mut rng = SeededRng::new(3);
        let a = random(&[6, 6], &mut rng);
        let i = Tensor::eye(6);
        assert!(matmul(&i, &a).unwrap().bits_equal(&a));
        assert!(matmul(&a, &i).unwrap().bits_equal(&a));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_lastdim(&Tensor::new(&[2], vec![0.0f32, 0.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_lastdim(&Tensor::new(&[2], vec![1000.0f32, 0.0]).unwrap()).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-7 && s.data()[1] >= 0.0 && s.data()[1] < 1e-7);
        let s = softmax_lastdim(&Tensor::new(&[3], vec![1.0f64, 2.0, 3.0]).unwrap()).unwrap();
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-7);
        }
        let nan = Tensor::new(&[2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_lastdim(&nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::<f32>::full(&[3], 1.0);
        let zero = Tensor::<f32>::zeros(&[3]);
        let y = layer_norm(&Tensor::full(&[1, 3], 5.0f32), &one, &zero, 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let one = Tensor::<f32>::full(&[2], 1.0);
        let zero = Tensor::<f32>::zeros(&[2]);
        let y = layer_norm(&Tensor::new(&[1, 2], vec![1.0f32, -1.0]).unwrap(), &one, &zero, 1e-6).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut rng = SeededRng::new(19);
        let x = Tensor::<f32>::from_fn(&[4, 8], |_| (rng.normal() * 3.0 + 1.0) as f32);
        let y = layer_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), 1e-6).unwrap();
        for r in 0..4 {
            let row: Vec<f64> = y.row(r).iter().map(|&v| v as f64).collect();
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.8412).abs() < 1e-3);
        assert!((gelu_scalar(20.0) - 20.0).abs() < 1e-9);
        assert!(gelu_scalar(-20.0).abs() < 1e-9);
    }

    #[test]
    fn fast_tanh_tracks_libm() {
        for i in -400..=400 {
            let z = i as f64 * 0.07;
            assert!((fast_tanh(z) - z.tanh()).abs() < 1e-15, "z={z}");
        }
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -1.0, -0.2, 0.0, 0.5, 1.7, 4.0] {
            let h = 1e-5;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8, "x={x}");
        }
    }
}
