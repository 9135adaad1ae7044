use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use volformer_core::cohort::TrainConfig;
use volformer_core::encoder::ViTConfig;
use volformer_core::synth::SynthConfig;

/// Synthetic data parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_pairs: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub delta: f64,
    pub noise_sd: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        DataConfig {
            n_pairs: s.n_pairs,
            depth: s.depth,
            height: s.height,
            width: s.width,
            delta: s.delta,
            noise_sd: s.noise_sd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    /// Patch grid of the 2D checkpoint (`[rows, cols]`), used when a
    /// synthetic checkpoint stands in for a real one.
    pub pretrained_grid: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        let v = ViTConfig::deit_tiny();
        ModelConfig {
            dim: v.dim,
            heads: v.heads,
            depth: v.depth,
            mlp_ratio: v.mlp_ratio,
            pretrained_grid: [14, 14],
        }
    }
}

impl ModelConfig {
    pub fn vit(&self) -> volformer_core::Result<ViTConfig> {
        ViTConfig::new(self.dim, self.heads, self.depth, self.mlp_ratio)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            warmup_epochs: t.warmup_epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Name given to the trained model in reports.
    pub model_name: String,
    /// Model the others are tested against.
    pub reference: String,
    /// Extra fold-score files (as written by `train`) to compare.
    pub compare: Vec<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            model_name: "volformer".into(),
            reference: "volformer".into(),
            compare: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Root of every artifact the commands write.
    pub out: PathBuf,
    /// Dataset manifest; defaults to the one `synth` writes.
    pub manifest: Option<PathBuf>,
    /// 2D checkpoint to import; a synthetic one is generated when absent.
    pub pretrained: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out: PathBuf::from("runs"),
            manifest: None,
            pretrained: None,
        }
    }
}

/// Full run configuration. Every section may be omitted; `seed` may not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("invalid config: {e}"))
    }

    pub fn validate(&self) -> Result<(), String> {
        self.synth().validate().map_err(|e| e.to_string())?;
        self.model.vit().map_err(|e| e.to_string())?;
        self.train_config().validate().map_err(|e| e.to_string())?;
        if self.model.pretrained_grid.iter().any(|&g| g < 2) {
            return Err("model.pretrained_grid entries must be at least 2".into());
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            n_pairs: d.n_pairs,
            depth: d.depth,
            height: d.height,
            width: d.width,
            delta: d.delta,
            noise_sd: d.noise_sd,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            warmup_epochs: t.warmup_epochs,
            seed: self.seed,
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths
            .manifest
            .clone()
            .unwrap_or_else(|| self.paths.out.join("dataset").join(volformer_core::synth::MANIFEST_FILE))
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.paths.out.join(stage)
    }

    /// Canonical JSON: struct fields in declaration order, no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

/// Manifest directory, against which volume paths resolve.
pub fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}
