//! Acceptance run: every criterion at its stated tolerance, one PASS/FAIL
//! line each. `VOLFORMER_ACCEPTANCE=1,4,7` restricts the run to a subset.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use volformer_core::checkpoint::{
    import_2d_vit, read_archive, synthetic_pretrained_2d, write_archive, NamedTensors, POS_GRID,
};
use volformer_core::cohort::{
    cross_validate_with, load_manifest, load_volume_pairs, match_case_controls, split_six_folds, FoldOutcome,
    TrainConfig, VolumePair,
};
use volformer_core::encoder::{forward, loss_and_grads, ModelParams, ViTConfig};
use volformer_core::rng::SeededRng;
use volformer_core::rollout::{attention_rollout, crop_heatmap, mass_fraction, volume_heatmap};
use volformer_core::stats::{paired_t_one_sided, roc_auc, summarize_folds, t_quantile};
use volformer_core::synth::{closed_form_detector_auc, generate, region_mean_detector, write_dataset, SynthConfig, MANIFEST_FILE};
use volformer_core::tensor::Tensor;
use volformer_core::tokenizer::{volume_patches, PatchGeometry, Volume};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, started: Instant, detail: String) -> Outcome {
    let took = started.elapsed();
    check(took < limit, format!("{detail}; {:.2?} (limit {:?})", took, limit))
}

fn random_volume(rng: &mut SeededRng, d: usize, h: usize, w: usize) -> Volume {
    Volume::new(Tensor::from_fn(&[d, h, w], |_| rng.uniform() as f32)).unwrap()
}

fn token_count_law() -> Outcome {
    let t0 = Instant::now();
    let v = Volume::zeros(36, 512, 512);
    let (patches, geo) = volume_patches::<f32>(&v).unwrap();
    if patches.rows() != 36_864 || geo.num_tokens() != 36_865 {
        return Err(format!("36x512x512 gave {} patches", patches.rows()));
    }
    let mut rng = SeededRng::new(1);
    for _ in 0..100 {
        let (d, h, w) = (1 + rng.below(6) as usize, 1 + rng.below(300) as usize, 1 + rng.below(300) as usize);
        let (p, _) = volume_patches::<f32>(&random_volume(&mut rng, d, h, w)).unwrap();
        // count patch origins by stepping over the slice
        let origins = (0..h).step_by(16).count() * (0..w).step_by(16).count() * d;
        if p.rows() != origins || p.last_dim() != 768 {
            return Err(format!("{d}x{h}x{w}: {} patches, expected {origins}", p.rows()));
        }
    }
    within(Duration::from_secs(10), t0, "36864 patches; 100 random geometries agree".into())
}

fn gradient_check() -> Outcome {
    let t0 = Instant::now();
    const EPS: f64 = 1e-3;
    let cfg = ViTConfig::new(8, 2, 2, 4).unwrap();
    let mut rng = SeededRng::new(2);
    let v = random_volume(&mut rng, 2, 32, 32);
    let mut p = ModelParams::<f64>::init(&cfg, v.geometry(), &mut rng).unwrap();
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += 0.2 * rng.normal());
    }
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for label in [0u8, 1] {
        let (_, g) = loss_and_grads(&v, label, &p, &cfg).unwrap();
        let grads: Vec<(String, Vec<f64>)> = g.named().into_iter().map(|(n, t)| (n, t.data().to_vec())).collect();
        for (idx, (name, ga)) in grads.iter().enumerate() {
            let mut fd = Vec::with_capacity(ga.len());
            for j in 0..ga.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[idx].data_mut()[j] += EPS;
                let mut minus = p.clone();
                minus.tensors_mut()[idx].data_mut()[j] -= EPS;
                let lp = loss_and_grads(&v, label, &plus, &cfg).unwrap().0;
                let lm = loss_and_grads(&v, label, &minus, &cfg).unwrap().0;
                fd.push((lp - lm) / (2.0 * EPS));
            }
            let diff = ga.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = ga.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
            let rel = diff / scale.max(1e-300);
            checked += ga.len();
            if rel > worst.0 {
                worst = (rel, format!("{name} (label {label})"));
            }
        }
    }
    let detail = format!("{checked} entries, worst relative error {:.2e} at {}", worst.0, worst.1);
    if worst.0 >= 1e-3 {
        return Err(detail);
    }
    within(Duration::from_secs(120), t0, detail)
}

fn two_d_recovery() -> Outcome {
    let t0 = Instant::now();
    let cfg = ViTConfig::deit_tiny();
    let src = synthetic_pretrained_2d(&cfg, 14, 14, 3).unwrap();
    let v = Volume::zeros(1, 224, 224);
    let (p, report) = import_2d_vit(&src, v.geometry(), &cfg, &mut SeededRng::new(4)).unwrap();
    if !p.pos.patch_pe.reshape(&[14, 14, 192]).unwrap().bits_equal(&src[POS_GRID]) || !report.resized.is_empty() {
        return Err("D=1 position grid differs from the source".into());
    }
    let tokens = v.geometry().num_tokens();
    if tokens != 14 * 14 + 1 {
        return Err(format!("{tokens} tokens at pretraining geometry"));
    }
    let target = PatchGeometry::for_volume(36, 512, 512);
    let (p36, _) = import_2d_vit(&src, target, &cfg, &mut SeededRng::new(4)).unwrap();
    let identical = (1..36).all(|d| p36.pos.slice(d) == p36.pos.slice(0));
    let bits = (1..36).all(|d| {
        p36.pos.slice(d).iter().zip(p36.pos.slice(0)).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    check(identical && bits, "D=1 grid bit-exact with 197 tokens; D=36 gives 36 identical slices".into())
        .and_then(|d| within(Duration::from_secs(5), t0, d))
}

fn checkpoint_round_trip() -> Outcome {
    let t0 = Instant::now();
    let mut rng = SeededRng::new(5);
    for i in 0..1000 {
        let named: NamedTensors = common::random_archive(&mut rng);
        let first = write_archive(named.iter().map(|(k, v)| (k.as_str(), v))).unwrap();
        // reverse insertion order must not change the bytes
        let second = write_archive(named.iter().rev().map(|(k, v)| (k.as_str(), v))).unwrap();
        if first != second {
            return Err(format!("archive {i}: canonical writes differ"));
        }
        let back = read_archive(&first).map_err(|e| format!("archive {i}: {e}"))?;
        if back.len() != named.len() || named.iter().any(|(k, v)| !back[k].bits_equal(v)) {
            return Err(format!("archive {i}: round trip is not bit-exact"));
        }
    }
    within(Duration::from_secs(30), t0, "1000 archives bit-exact, canonical bytes stable".into())
}

fn auc_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = SeededRng::new(6);
    let mut worst = 0.0f64;
    let mut with_ties = 0;
    for _ in 0..500 {
        let c = common::random_cohort(&mut rng, 200);
        let mut s = c.scores.clone();
        s.sort_by(f64::total_cmp);
        with_ties += s.windows(2).any(|w| w[0] == w[1]) as usize;
        worst = worst.max((roc_auc(&c).unwrap() - common::auc_concordance(&c)).abs());
    }
    check(
        worst <= 1e-12 && with_ties > 0,
        format!("500 cohorts ({with_ties} with ties), max |diff| {worst:.1e}"),
    )
    .and_then(|d| within(Duration::from_secs(30), t0, d))
}

fn statistics_oracles() -> Outcome {
    // high-precision t(0.975, 5)
    const T975_5: f64 = 2.570_581_835_636_314;
    let tq = t_quantile(0.975, 5.0);
    let mut rng = SeededRng::new(7);
    let mut worst = (tq - T975_5).abs();
    for _ in 0..200 {
        let v: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
        let s = summarize_folds(&v).unwrap();
        let mean = v.iter().sum::<f64>() / 6.0;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
        worst = worst.max((s.mean - mean).abs()).max((s.ci95 - T975_5 * sd / 6f64.sqrt()).abs());
        let b: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
        let t = paired_t_one_sided(&v, &b).unwrap();
        worst = worst.max((t.p - (1.0 - common::t5_cdf(t.t))).abs());
    }
    let d = paired_t_one_sided(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0; 6]).unwrap();
    let t_want = 3.5 / (3.5f64.sqrt() / 6f64.sqrt());
    worst = worst.max((d.t - t_want).abs()).max((d.p - (1.0 - common::t5_cdf(t_want))).abs());
    check(
        worst < 1e-6 && (tq - 2.5706).abs() < 5e-5 && (d.p - 0.0030).abs() < 5e-5,
        format!("t975,5 = {tq:.6}, p(d=1..6) = {:.5} (t = {:.3}), max error {worst:.1e}", d.p, d.t),
    )
}

fn rollout_invariants() -> Outcome {
    let t0 = Instant::now();
    let mut rng = SeededRng::new(8);
    let (mut row_err, mut oracle_err) = (0.0f64, 0.0f64);
    for _ in 0..8 {
        let t = 2 + rng.below(129) as usize;
        let stack = common::random_stack(&mut rng, 12, 3, t);
        let r = attention_rollout(&stack).unwrap();
        let want = common::rollout_direct(&stack);
        for i in 0..t {
            row_err = row_err.max((r.row(i).iter().sum::<f64>() - 1.0).abs());
            for j in 0..t {
                oracle_err = oracle_err.max((r.row(i)[j] - want[i][j]).abs());
            }
        }
    }
    // largest size explicitly
    let stack = common::random_stack(&mut rng, 12, 3, 130);
    let r = attention_rollout(&stack).unwrap();
    let want = common::rollout_direct(&stack);
    for i in 0..130 {
        row_err = row_err.max((r.row(i).iter().sum::<f64>() - 1.0).abs());
        for j in 0..130 {
            oracle_err = oracle_err.max((r.row(i)[j] - want[i][j]).abs());
        }
    }
    check(
        row_err < 1e-4 && oracle_err < 1e-6,
        format!("max row-sum error {row_err:.1e}, max oracle error {oracle_err:.1e}; {:.2?}", t0.elapsed()),
    )
}

/// The trained fold models and their data, shared by criteria 8 and 9.
struct EndToEnd {
    pairs: Vec<VolumePair>,
    lesions: Vec<Option<volformer_core::synth::Lesion>>,
    outcomes: Vec<FoldOutcome>,
    split: volformer_core::cohort::FoldSplit,
}

const TINY: ViTConfig = ViTConfig {
    dim: 64,
    heads: 2,
    depth: 4,
    mlp_ratio: 4,
};

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-4,
        epochs: 12,
        batch_size: 8,
        weight_decay: 0.05,
        warmup_epochs: 1,
        seed,
    }
}

/// synth → disk → manifest → match → split → import → six-fold CV.
fn end_to_end_run(delta: f64, seed: u64) -> Result<(EndToEnd, f64), String> {
    let sc = SynthConfig {
        n_pairs: 200,
        depth: 8,
        height: 64,
        width: 64,
        delta,
        noise_sd: 0.1,
        seed,
    };
    let data = generate(&sc).map_err(|e| e.to_string())?;
    let ceiling = closed_form_detector_auc(&sc);
    let empirical = roc_auc(&region_mean_detector(&sc, &data).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data).map_err(|e| e.to_string())?;
    let subjects = load_manifest(dir.path().join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    let matched = match_case_controls(&subjects);
    let pairs = load_volume_pairs(dir.path(), &subjects, &matched.pairs).map_err(|e| e.to_string())?;
    let split = split_six_folds(pairs.len(), seed).map_err(|e| e.to_string())?;
    let archive = synthetic_pretrained_2d(&TINY, 14, 14, seed ^ 0x5eed).map_err(|e| e.to_string())?;
    let label = if delta == 0.0 { "null" } else { "signal" };
    let outcomes = cross_validate_with(&archive, &pairs, &split, &TINY, &train_config(seed), |fold, s| {
        eprintln!("    [{label}] fold {fold} epoch {:>2} loss {:.4}", s.epoch + 1, s.mean_loss);
    })
    .map_err(|e| e.to_string())?;
    let lesions = pairs
        .iter()
        .map(|p| subjects.iter().find(|s| s.id == p.case_id).and_then(|s| s.lesion))
        .collect();
    for o in &outcomes {
        eprintln!("    [{label}] fold {} held-out AUC {:.3}", o.fold, roc_auc(&o.cohort).unwrap());
    }
    eprintln!("    [{label}] detector ceiling {ceiling:.4}, empirical ideal detector AUC {empirical:.4}");
    Ok((EndToEnd { pairs, lesions, outcomes, split }, ceiling))
}

fn mean_fold_auc(outcomes: &[FoldOutcome]) -> (f64, Vec<f64>) {
    let aucs: Vec<f64> = outcomes.iter().map(|o| roc_auc(&o.cohort).unwrap()).collect();
    (aucs.iter().sum::<f64>() / aucs.len() as f64, aucs)
}

fn synthetic_end_to_end(state: &mut Option<EndToEnd>) -> Outcome {
    let t0 = Instant::now();
    let (run, ceiling) = end_to_end_run(0.4, 2024)?;
    let (mean, aucs) = mean_fold_auc(&run.outcomes);
    let folds: Vec<String> = aucs.iter().map(|a| format!("{a:.3}")).collect();
    *state = Some(run);
    let (null_run, null_ceiling) = end_to_end_run(0.0, 2025)?;
    let (null_mean, _) = mean_fold_auc(&null_run.outcomes);
    let detail = format!(
        "mean fold AUC {mean:.3} [{}], ceiling {ceiling:.4}; null AUC {null_mean:.3} (ceiling {null_ceiling})",
        folds.join(", ")
    );
    check(mean >= 0.90 && ceiling > 0.99 && (0.40..=0.60).contains(&null_mean), detail)
        .and_then(|d| within(Duration::from_secs(30 * 60), t0, d))
}

fn rollout_localization(state: &mut Option<EndToEnd>) -> Outcome {
    if state.is_none() {
        *state = Some(end_to_end_run(0.4, 2024)?.0);
    }
    let run = state.as_ref().unwrap();
    let (mut hits, mut total) = (0, 0);
    let mut held_out = BTreeSet::new();
    for o in &run.outcomes {
        for &i in &run.split.folds[o.fold] {
            held_out.insert(i);
            let pair = &run.pairs[i];
            let lesion = run.lesions[i].ok_or_else(|| format!("case {} has no lesion record", pair.case_id))?;
            let v = &pair.case;
            let (_, padded) = volume_heatmap(v, &o.params, &TINY).map_err(|e| e.to_string())?;
            let heat = crop_heatmap(&padded, v.height(), v.width()).unwrap();
            let mask = lesion.mask(v.depth(), v.height(), v.width());
            let fraction = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
            let mass = mass_fraction(&heat, &mask).unwrap();
            hits += (mass > fraction) as usize;
            total += 1;
        }
    }
    let share = hits as f64 / total as f64;
    check(
        share >= 0.80 && held_out.len() == run.pairs.len(),
        format!("{hits}/{total} held-out cases ({:.1}%) put more heatmap mass on the lesion than its volume share", 100.0 * share),
    )
}

fn forward_scaling() -> Outcome {
    let mut rng = SeededRng::new(10);
    let p_geo = |d| PatchGeometry::for_volume(d, 128, 128);
    let mut median = |depth: usize| -> (usize, f64) {
        let v = random_volume(&mut rng, depth, 128, 128);
        let geo = p_geo(depth);
        let params = ModelParams::<f32>::init(&TINY, geo, &mut SeededRng::new(11)).unwrap();
        forward(&v, &params, &TINY).unwrap();
        let mut times: Vec<f64> = (0..5)
            .map(|_| {
                let t = Instant::now();
                forward(&v, &params, &TINY).unwrap();
                t.elapsed().as_secs_f64()
            })
            .collect();
        times.sort_by(f64::total_cmp);
        (geo.num_tokens(), times[2])
    };
    let (t_small, small) = median(16);
    let (t_large, large) = median(32);
    let ratio = large / small;
    check(
        t_small == 1025 && t_large == 2049 && (3.0..=5.0).contains(&ratio),
        format!("T={t_small}: {:.1} ms, T={t_large}: {:.1} ms, ratio {ratio:.2}", small * 1e3, large * 1e3),
    )
}

fn main() -> ExitCode {
    let selected: Option<BTreeSet<usize>> = std::env::var("VOLFORMER_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut state = None;
    let criteria: Vec<(usize, &str, Box<dyn FnMut(&mut Option<EndToEnd>) -> Outcome>)> = vec![
        (1, "token-count law", Box::new(|_| token_count_law())),
        (2, "gradient check", Box::new(|_| gradient_check())),
        (3, "2D recovery", Box::new(|_| two_d_recovery())),
        (4, "checkpoint round trip", Box::new(|_| checkpoint_round_trip())),
        (5, "AUC oracle", Box::new(|_| auc_oracle())),
        (6, "statistics oracles", Box::new(|_| statistics_oracles())),
        (7, "rollout invariants", Box::new(|_| rollout_invariants())),
        (8, "synthetic end-to-end", Box::new(synthetic_end_to_end)),
        (9, "rollout localization", Box::new(rollout_localization)),
        (10, "forward scaling", Box::new(|_| forward_scaling())),
    ];
    let mut failed = 0;
    for (id, name, mut run) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&mut state)))
            .unwrap_or_else(|_| Err("panicked".into()));
        let took = started.elapsed();
        match outcome {
            Ok(detail) => println!("PASS  [{id:>2}] {name}: {detail} ({took:.1?})"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  [{id:>2}] {name}: {detail} ({took:.1?})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
