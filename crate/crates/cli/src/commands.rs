use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use volformer_core::checkpoint::{
    import_2d_vit, load_archive, model_from_archive, save_archive, synthetic_pretrained_2d, NamedTensors,
};
use volformer_core::cohort::{
    cross_validate_with, load_manifest, load_volume_pairs, match_case_controls, split_six_folds, FoldSplit, Label,
    MatchResult, Subject,
};
use volformer_core::rng::SeededRng;
use volformer_core::rollout::{crop_heatmap, export_heatmap, mass_fraction, volume_heatmap};
use volformer_core::stats::{build_report, welch_t_test, ModelFolds, ScoredCohort};
use volformer_core::synth::{generate, write_dataset};
use volformer_core::tokenizer::PatchGeometry;

use crate::config::{manifest_root, RunConfig};

pub const PRETRAINED_FILE: &str = "pretrained_2d.nta";

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<volformer_core::Error> for CliError {
    fn from(e: volformer_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CmdResult = Result<(), CliError>;

/// Provenance written next to every command's outputs.
#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a RunConfig,
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn require(path: &Path) -> CmdResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!("missing input {}", path.display())))
    }
}

fn stage(cfg: &RunConfig, name: &str) -> Result<PathBuf, CliError> {
    let dir = cfg.stage_dir(name);
    fs::create_dir_all(&dir)?;
    write_json(
        &dir.join("run.json"),
        &RunMeta {
            command: name,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config_sha256: cfg.hash(),
            config: cfg,
        },
    )?;
    Ok(dir)
}

#[derive(Serialize, Deserialize)]
struct Balance {
    age_p: f64,
    bmi_p: f64,
}

#[derive(Serialize, Deserialize)]
struct MatchFile {
    #[serde(flatten)]
    result: MatchResult,
    balance: Option<Balance>,
}

/// Held-out predictions of one fold.
#[derive(Serialize, Deserialize)]
pub struct FoldScores {
    pub fold: usize,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Everything `eval` needs from one trained model.
#[derive(Serialize, Deserialize)]
pub struct ScoresFile {
    pub model: String,
    pub folds: Vec<FoldScores>,
}

impl ScoresFile {
    fn to_model_folds(&self) -> Result<ModelFolds, CliError> {
        let folds = self
            .folds
            .iter()
            .map(|f| ScoredCohort::new(f.scores.clone(), f.labels.clone()))
            .collect::<volformer_core::Result<Vec<_>>>()?;
        Ok(ModelFolds {
            model: self.model.clone(),
            folds,
        })
    }
}

pub fn synth(cfg: &RunConfig, dry_run: bool) -> CmdResult {
    let sc = cfg.synth();
    sc.validate()?;
    let dir = cfg.stage_dir("dataset");
    if dry_run {
        println!("synth: {} pairs of {}x{}x{} into {}", sc.n_pairs, sc.depth, sc.height, sc.width, dir.display());
        return Ok(());
    }
    let data = generate(&sc)?;
    let dir = stage(cfg, "dataset")?;
    write_dataset(&dir, &data)?;
    println!("synth: wrote {} volumes to {}", data.len(), dir.display());
    Ok(())
}

fn balance(subjects: &[Subject], result: &MatchResult) -> Option<Balance> {
    let find = |id: &str| subjects.iter().find(|s| s.id == id);
    let mut cols: [Vec<f64>; 4] = Default::default();
    for p in &result.pairs {
        let (c, k) = (find(&p.case_id)?, find(&p.control_id)?);
        cols[0].push(c.age);
        cols[1].push(k.age);
        cols[2].push(c.bmi);
        cols[3].push(k.bmi);
    }
    Some(Balance {
        age_p: welch_t_test(&cols[0], &cols[1]).ok()?,
        bmi_p: welch_t_test(&cols[2], &cols[3]).ok()?,
    })
}

pub fn match_cmd(cfg: &RunConfig, dry_run: bool) -> CmdResult {
    let manifest = cfg.manifest_path();
    require(&manifest)?;
    if dry_run {
        println!("match: {}", manifest.display());
        return Ok(());
    }
    let subjects = load_manifest(&manifest)?;
    let result = match_case_controls(&subjects);
    let bal = balance(&subjects, &result);
    let dir = stage(cfg, "match")?;
    println!(
        "match: {} pairs, {} excluded{}",
        result.pairs.len(),
        result.excluded.len(),
        bal.as_ref()
            .map(|b| format!(" (age p = {:.3}, bmi p = {:.3})", b.age_p, b.bmi_p))
            .unwrap_or_default()
    );
    write_json(&dir.join("pairs.json"), &MatchFile { result, balance: bal })
}

fn load_pairs(cfg: &RunConfig) -> Result<MatchResult, CliError> {
    Ok(read_json::<MatchFile>(&cfg.stage_dir("match").join("pairs.json"))?.result)
}

pub fn split(cfg: &RunConfig, dry_run: bool) -> CmdResult {
    let pairs_path = cfg.stage_dir("match").join("pairs.json");
    require(&pairs_path)?;
    if dry_run {
        println!("split: {}", pairs_path.display());
        return Ok(());
    }
    let pairs = load_pairs(cfg)?;
    let s = split_six_folds(pairs.pairs.len(), cfg.seed)?;
    let dir = stage(cfg, "split")?;
    let sizes: Vec<usize> = s.folds.iter().map(Vec::len).collect();
    println!("split: fold sizes {sizes:?}");
    write_json(&dir.join("folds.json"), &s)
}

fn target_geometry(cfg: &RunConfig) -> PatchGeometry {
    PatchGeometry::for_volume(cfg.data.depth, cfg.data.height, cfg.data.width)
}

pub fn import(cfg: &RunConfig, dry_run: bool) -> CmdResult {
    let vit = cfg.model.vit()?;
    if let Some(p) = &cfg.paths.pretrained {
        require(p)?;
    }
    if dry_run {
        println!("import: into {}", cfg.stage_dir("import").display());
        return Ok(());
    }
    let source: NamedTensors = match &cfg.paths.pretrained {
        Some(p) => load_archive(p)?,
        None => {
            let [gh, gw] = cfg.model.pretrained_grid;
            synthetic_pretrained_2d(&vit, gh, gw, SeededRng::derive(cfg.seed, 0x2d).next_u64())?
        }
    };
    let (params, report) = import_2d_vit(&source, target_geometry(cfg), &vit, &mut SeededRng::new(cfg.seed))?;
    let dir = stage(cfg, "import")?;
    save_archive(dir.join(PRETRAINED_FILE), &source)?;
    save_archive(dir.join("model_3d.nta"), &params.to_named())?;
    write_json(&dir.join("import_report.json"), &report)?;
    println!(
        "import: {} copied, {} adapted ({} resized), {} reinitialized",
        report.copied.len(),
        report.adapted.len(),
        report.resized.len(),
        report.reinitialized.len()
    );
    Ok(())
}

fn train_inputs(cfg: &RunConfig) -> Result<[PathBuf; 4], CliError> {
    let paths = [
        cfg.manifest_path(),
        cfg.stage_dir("match").join("pairs.json"),
        cfg.stage_dir("split").join("folds.json"),
        cfg.stage_dir("import").join(PRETRAINED_FILE),
    ];
    for p in &paths {
        require(p)?;
    }
    Ok(paths)
}

pub fn train(cfg: &RunConfig, dry_run: bool) -> CmdResult {
    let vit = cfg.model.vit()?;
    let tc = cfg.train_config();
    tc.validate()?;
    let [manifest, _, folds_path, pretrained] = train_inputs(cfg)?;
    if dry_run {
        println!("train: {} epochs per fold into {}", tc.epochs, cfg.stage_dir("train").display());
        return Ok(());
    }
    let subjects = load_manifest(&manifest)?;
    let matched = load_pairs(cfg)?;
    let split: FoldSplit = read_json(&folds_path)?;
    let pairs = load_volume_pairs(manifest_root(&manifest), &subjects, &matched.pairs)?;
    let archive = load_archive(&pretrained)?;
    let outcomes = cross_validate_with(&archive, &pairs, &split, &vit, &tc, |fold, s| {
        eprintln!("fold {fold} epoch {:>3}  loss {:.4}", s.epoch + 1, s.mean_loss);
    })?;
    let dir = stage(cfg, "train")?;
    let mut scores = ScoresFile {
        model: cfg.eval.model_name.clone(),
        folds: Vec::new(),
    };
    let mut histories = Vec::new();
    for o in outcomes {
        save_archive(dir.join(format!("fold_{}.nta", o.fold)), &o.params.to_named())?;
        histories.push(o.history);
        scores.folds.push(FoldScores {
            fold: o.fold,
            ids: o.ids,
            scores: o.cohort.scores,
            labels: o.cohort.labels,
        });
    }
    write_json(&dir.join("scores.json"), &scores)?;
    write_json(&dir.join("history.json"), &histories)?;
    println!("train: wrote 6 fold models to {}", dir.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, dry_run: bool) -> CmdResult {
    let mut inputs = vec![cfg.stage_dir("train").join("scores.json")];
    inputs.extend(cfg.eval.compare.iter().cloned());
    for p in &inputs {
        require(p)?;
    }
    if dry_run {
        println!("eval: {} score files", inputs.len());
        return Ok(());
    }
    let models = inputs
        .iter()
        .map(|p| read_json::<ScoresFile>(p)?.to_model_folds())
        .collect::<Result<Vec<_>, _>>()?;
    let report = build_report(&models, &cfg.eval.reference)?;
    let dir = stage(cfg, "eval")?;
    write_json(&dir.join("report.json"), &report)?;
    let text = report.to_text();
    fs::write(dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct RolloutCase {
    id: String,
    fold: usize,
    probability: f64,
    /// Share of heatmap mass on lesion voxels.
    lesion_mass: Option<f64>,
    /// Share of voxels inside the lesion.
    lesion_fraction: Option<f64>,
}

#[derive(Serialize)]
struct RolloutSummary {
    cases: Vec<RolloutCase>,
    /// Fraction of cases with a known lesion whose heatmap mass on the
    /// lesion exceeds its volume share.
    localized: Option<f64>,
}

pub fn rollout(cfg: &RunConfig, dry_run: bool) -> CmdResult {
    let vit = cfg.model.vit()?;
    let [manifest, _, folds_path, _] = train_inputs(cfg)?;
    let train_dir = cfg.stage_dir("train");
    for f in 0..volformer_core::stats::FOLDS {
        require(&train_dir.join(format!("fold_{f}.nta")))?;
    }
    if dry_run {
        println!("rollout: into {}", cfg.stage_dir("rollout").display());
        return Ok(());
    }
    let subjects = load_manifest(&manifest)?;
    let matched = load_pairs(cfg)?;
    let split: FoldSplit = read_json(&folds_path)?;
    let root = manifest_root(&manifest);
    let dir = stage(cfg, "rollout")?;
    let mut cases = Vec::new();
    for (fold, members) in split.folds.iter().enumerate() {
        let params = model_from_archive(load_archive(train_dir.join(format!("fold_{fold}.nta")))?, &vit)?;
        let held: Vec<_> = members.iter().map(|&i| matched.pairs[i].clone()).collect();
        let loaded = load_volume_pairs(&root, &subjects, &held)?;
        for pair in loaded {
            let subject = subjects.iter().find(|s| s.id == pair.case_id && s.label == Label::Case);
            let (p, padded) = volume_heatmap(&pair.case, &params, &vit)?;
            let (d, h, w) = (pair.case.depth(), pair.case.height(), pair.case.width());
            let heat = crop_heatmap(&padded, h, w)?;
            export_heatmap(&heat, &dir, &pair.case_id)?;
            let (mut lesion_mass, mut lesion_fraction) = (None, None);
            if let Some(lesion) = subject.and_then(|s| s.lesion) {
                let mask = lesion.mask(d, h, w);
                lesion_mass = Some(mass_fraction(&heat, &mask)?);
                lesion_fraction = Some(mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64);
            }
            cases.push(RolloutCase {
                id: pair.case_id,
                fold,
                probability: p,
                lesion_mass,
                lesion_fraction,
            });
        }
    }
    let known: Vec<&RolloutCase> = cases.iter().filter(|c| c.lesion_mass.is_some()).collect();
    let localized = (!known.is_empty()).then(|| {
        known.iter().filter(|c| c.lesion_mass > c.lesion_fraction).count() as f64 / known.len() as f64
    });
    println!(
        "rollout: {} heatmaps{}",
        cases.len(),
        localized.map(|l| format!(", {:.1}% localized", 100.0 * l)).unwrap_or_default()
    );
    write_json(&dir.join("summary.json"), &RolloutSummary { cases, localized })
}
