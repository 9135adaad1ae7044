//! Synthetic matched cohorts with planted lesions.
//!
//! Each pair shares demographics up to small jitter. Both volumes get a
//! smooth random background plus Gaussian noise; the case volume also
//! carries an ellipsoidal region of raised intensity somewhere in the
//! central (joint) region.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_archive, volume_to_archive};
use crate::cohort::{save_manifest, Label, Sex, Subject};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::stats::ScoredCohort;
use crate::tensor::Tensor;
use crate::tokenizer::Volume;

/// File name of a dataset's manifest.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Mean background intensity.
pub const BACKGROUND_LEVEL: f64 = 0.35;
/// Amplitude of the smooth background field.
pub const BACKGROUND_AMPLITUDE: f64 = 0.08;
/// Nominal lesion semi-axes (slices, rows, columns).
pub const LESION_RADII: [f64; 3] = [1.5, 7.0, 7.0];

const ETHNICITIES: [(&str, f64); 4] = [("white", 0.70), ("black", 0.18), ("asian", 0.07), ("other", 0.05)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Intensity added inside the lesion.
    pub delta: f64,
    /// Standard deviation of the voxel noise.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_pairs: 200,
            depth: 8,
            height: 64,
            width: 64,
            delta: 0.4,
            noise_sd: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::invalid("n_pairs must be positive"));
        }
        if self.depth == 0 || self.height < 16 || self.width < 16 {
            return Err(Error::invalid(format!(
                "volume {}x{}x{} too small: need depth >= 1 and height, width >= 16",
                self.depth, self.height, self.width
            )));
        }
        if !(self.delta.is_finite() && self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::invalid("delta must be finite and noise_sd finite and >= 0"));
        }
        Ok(())
    }

    /// Lesion semi-axes scaled down for volumes too small for the nominal
    /// size.
    pub fn lesion_radii(&self) -> [f64; 3] {
        [
            LESION_RADII[0].min(self.depth as f64 / 2.0),
            LESION_RADII[1].min(self.height as f64 / 6.0),
            LESION_RADII[2].min(self.width as f64 / 6.0),
        ]
    }
}

/// Axis-aligned ellipsoid in voxel coordinates `(slice, row, column)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Lesion {
    pub fn contains(&self, d: usize, y: usize, x: usize) -> bool {
        let p = [d as f64, y as f64, x as f64];
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Voxel mask over a `depth × height × width` grid, row-major.
    pub fn mask(&self, depth: usize, height: usize, width: usize) -> Vec<bool> {
        let mut m = Vec::with_capacity(depth * height * width);
        for d in 0..depth {
            for y in 0..height {
                for x in 0..width {
                    m.push(self.contains(d, y, x));
                }
            }
        }
        m
    }
}

/// Parameters of one subject's smooth background field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Background {
    freq: [f64; 2],
    phase: [f64; 3],
    slice_tilt: f64,
}

impl Background {
    fn draw(rng: &mut SeededRng) -> Self {
        Background {
            freq: [rng.uniform_range(0.5, 1.5), rng.uniform_range(0.5, 1.5)],
            phase: [rng.uniform(), rng.uniform(), rng.uniform()],
            slice_tilt: rng.uniform_range(-0.02, 0.02),
        }
    }

    pub fn value(&self, cfg: &SynthConfig, d: usize, y: usize, x: usize) -> f64 {
        let tau = std::f64::consts::TAU;
        let u = y as f64 / cfg.height as f64;
        let v = x as f64 / cfg.width as f64;
        let w = d as f64 / cfg.depth.max(2) as f64;
        let field = (tau * (self.freq[0] * u + self.phase[0])).sin() * (tau * (self.freq[1] * v + self.phase[1])).cos();
        BACKGROUND_LEVEL
            + BACKGROUND_AMPLITUDE * 0.75 * field
            + BACKGROUND_AMPLITUDE * 0.25 * (tau * (w + self.phase[2])).sin()
            + self.slice_tilt * (w - 0.5)
    }
}

/// One generated subject: manifest record, volume, the pair's lesion
/// region (planted only in the case) and the background that was used.
#[derive(Clone, Debug)]
pub struct SynthSubject {
    pub subject: Subject,
    pub volume: Volume,
    pub region: Lesion,
    pub background: Background,
}

fn subject_id(i: usize) -> String {
    format!("s{i:04}")
}

/// Relative path of a subject's volume inside a dataset directory.
pub fn volume_path(id: &str) -> String {
    format!("volumes/{id}.nta")
}

fn draw_ethnicity(rng: &mut SeededRng) -> String {
    let mut u = rng.uniform();
    for (name, w) in ETHNICITIES {
        if u < w {
            return name.to_string();
        }
        u -= w;
    }
    ETHNICITIES[ETHNICITIES.len() - 1].0.to_string()
}

fn draw_region(cfg: &SynthConfig, rng: &mut SeededRng) -> Lesion {
    let radii = cfg.lesion_radii();
    let dims = [cfg.depth as f64, cfg.height as f64, cfg.width as f64];
    let mut center = [0.0; 3];
    for i in 0..3 {
        // depth: anywhere the lesion fits; in-plane: central 40% of the slice
        let (lo, hi) = if i == 0 {
            (radii[0], dims[0] - 1.0 - radii[0])
        } else {
            (0.3 * dims[i], 0.7 * dims[i] - 1.0)
        };
        center[i] = if hi > lo { rng.uniform_range(lo, hi) } else { (dims[i] - 1.0) / 2.0 };
    }
    Lesion { center, radii }
}

fn render(cfg: &SynthConfig, bg: &Background, lesion: Option<&Lesion>, rng: &mut SeededRng) -> Result<Volume> {
    let (d, h, w) = (cfg.depth, cfg.height, cfg.width);
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut v = bg.value(cfg, z, y, x) + cfg.noise_sd * rng.normal();
                if lesion.is_some_and(|l| l.contains(z, y, x)) {
                    v += cfg.delta;
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Volume::new(Tensor::new(&[d, h, w], data)?)
}

/// Generates `n_pairs` matched pairs, case first then control, with ids
/// `s0000, s0001, ...`. Deterministic in `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthSubject>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(2 * cfg.n_pairs);
    for pair in 0..cfg.n_pairs {
        let mut rng = SeededRng::derive(cfg.seed, pair as u64);
        let sex = if rng.uniform() < 0.6 { Sex::F } else { Sex::M };
        let ethnicity = draw_ethnicity(&mut rng);
        let age = (62.0 + 8.0 * rng.normal()).clamp(45.0, 79.0);
        let bmi = (29.0 + 4.0 * rng.normal()).clamp(19.0, 42.0);
        let region = draw_region(cfg, &mut rng);

        for (k, label) in [Label::Case, Label::Control].into_iter().enumerate() {
            let id = subject_id(2 * pair + k);
            // controls are jittered copies, always inside the calipers
            let (a, b) = if label == Label::Control {
                (age + rng.truncated_normal(1.5), bmi + rng.truncated_normal(1.0))
            } else {
                (age, bmi)
            };
            let background = Background::draw(&mut rng);
            let lesion = (label == Label::Case).then_some(region);
            let volume = render(cfg, &background, lesion.as_ref(), &mut rng)?;
            out.push(SynthSubject {
                subject: Subject {
                    id: id.clone(),
                    age: a,
                    sex,
                    ethnicity: ethnicity.clone(),
                    bmi: b,
                    label,
                    volume: volume_path(&id),
                    lesion,
                },
                volume,
                region,
                background,
            });
        }
    }
    Ok(out)
}

/// Writes `manifest.json` and one volume archive per subject under `dir`.
pub fn write_dataset(dir: impl AsRef<std::path::Path>, data: &[SynthSubject]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("volumes"))?;
    for s in data {
        save_archive(dir.join(&s.subject.volume), &volume_to_archive(&s.volume))?;
    }
    let subjects: Vec<Subject> = data.iter().map(|s| s.subject.clone()).collect();
    save_manifest(dir.join(MANIFEST_FILE), &subjects)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Number of voxels in a nominal lesion centred in the volume.
pub fn nominal_lesion_voxels(cfg: &SynthConfig) -> usize {
    let c = |n: usize| (n as f64 - 1.0) / 2.0;
    let l = Lesion {
        center: [c(cfg.depth), c(cfg.height), c(cfg.width)],
        radii: cfg.lesion_radii(),
    };
    l.mask(cfg.depth, cfg.height, cfg.width).iter().filter(|&&m| m).count()
}

/// AUC of the ideal detector that knows the lesion region and background
/// and thresholds the region's mean residual: the means differ by `delta`
/// and each has variance `noise_sd² / n`, so AUC = Φ(δ·√(n/2)/σ).
pub fn closed_form_detector_auc(cfg: &SynthConfig) -> f64 {
    let n = nominal_lesion_voxels(cfg) as f64;
    if cfg.noise_sd == 0.0 {
        return if cfg.delta > 0.0 { 1.0 } else { 0.5 };
    }
    normal_cdf(cfg.delta * (n / 2.0).sqrt() / cfg.noise_sd)
}

/// The ideal detector applied to generated data: each subject is scored
/// by its mean background-subtracted intensity over its pair's region.
pub fn region_mean_detector(cfg: &SynthConfig, data: &[SynthSubject]) -> Result<ScoredCohort> {
    let mut scores = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for s in data {
        let (mut sum, mut n) = (0.0, 0usize);
        for d in 0..cfg.depth {
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    if s.region.contains(d, y, x) {
                        sum += s.volume.get(d, y, x) as f64 - s.background.value(cfg, d, y, x);
                        n += 1;
                    }
                }
            }
        }
        scores.push(if n == 0 { 0.0 } else { sum / n as f64 });
        labels.push(s.subject.label.as_u8());
    }
    ScoredCohort::new(scores, labels)
}
