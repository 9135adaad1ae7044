//! Independent reference computations shared by the property tests and
//! the acceptance run.
#![allow(dead_code)]

use volformer_core::checkpoint::NamedTensors;
use volformer_core::encoder::AttentionStack;
use volformer_core::rng::SeededRng;
use volformer_core::stats::ScoredCohort;
use volformer_core::tensor::Tensor;

/// AUC as the share of concordant case/control pairs, ties counted half.
pub fn auc_concordance(c: &ScoredCohort) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in c.labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in c.labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            den += 1.0;
            let (a, b) = (c.scores[i], c.scores[j]);
            num += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    num / den
}

/// Random cohort with both classes; scores on a coarse grid so ties occur.
pub fn random_cohort(rng: &mut SeededRng, max_n: usize) -> ScoredCohort {
    let n = 2 + rng.below(max_n as u64 - 1) as usize;
    let mut labels: Vec<u8> = (0..n).map(|_| (rng.uniform() < 0.5) as u8).collect();
    labels[0] = 1;
    labels[1] = 0;
    let levels = 1 + rng.below(40);
    let scores = labels
        .iter()
        .map(|&l| ((rng.uniform() + 0.3 * l as f64) * levels as f64).floor() / levels as f64)
        .collect();
    ScoredCohort::new(scores, labels).unwrap()
}

/// CDF of Student's t with 5 degrees of freedom in closed form.
pub fn t5_cdf(t: f64) -> f64 {
    let th = (t / 5f64.sqrt()).atan();
    let (s, c) = th.sin_cos();
    0.5 + (th + s * c * (1.0 + 2.0 / 3.0 * c * c)) / std::f64::consts::PI
}

/// Row-stochastic attention stack with random positive entries.
pub fn random_stack(rng: &mut SeededRng, layers: usize, heads: usize, t: usize) -> AttentionStack<f64> {
    let layers = (0..layers)
        .map(|_| {
            let mut data: Vec<f64> = (0..heads * t * t).map(|_| rng.uniform().powi(3) + 1e-9).collect();
            for row in data.chunks_mut(t) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor::new(&[heads, t, t], data).unwrap()
        })
        .collect();
    AttentionStack { layers }
}

/// Rollout by explicit loops: head mean, half identity, renormalize, then
/// left-multiply layer by layer.
pub fn rollout_direct(stack: &AttentionStack<f64>) -> Vec<Vec<f64>> {
    let (heads, t) = (stack.layers[0].shape()[0], stack.layers[0].shape()[1]);
    let mut r: Vec<Vec<f64>> = (0..t).map(|i| (0..t).map(|j| (i == j) as u8 as f64).collect()).collect();
    for layer in &stack.layers {
        let d = layer.data();
        let mut a = vec![vec![0.0; t]; t];
        for i in 0..t {
            for j in 0..t {
                let mean = (0..heads).map(|h| d[(h * t + i) * t + j]).sum::<f64>() / heads as f64;
                a[i][j] = 0.5 * mean + if i == j { 0.5 } else { 0.0 };
            }
            let s: f64 = a[i].iter().sum();
            a[i].iter_mut().for_each(|v| *v /= s);
        }
        let mut next = vec![vec![0.0; t]; t];
        for i in 0..t {
            for k in 0..t {
                for j in 0..t {
                    next[i][j] += a[i][k] * r[k][j];
                }
            }
        }
        r = next;
    }
    r
}

/// Archive with 1..=6 tensors of random rank, shape and finite values,
/// including subnormals and signed zeros.
pub fn random_archive(rng: &mut SeededRng) -> NamedTensors {
    let mut out = NamedTensors::new();
    let n = 1 + rng.below(6) as usize;
    while out.len() < n {
        let rank = 1 + rng.below(4) as usize;
        let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.below(5) as usize).collect();
        let t = Tensor::from_fn(&shape, |_| match rng.below(10) {
            0 => -0.0,
            1 => f32::from_bits(1 + rng.below(0x7f_ffff) as u32),
            2 => f32::MAX,
            _ => (rng.normal() * 10f64.powi(rng.below(8) as i32 - 4)) as f32,
        });
        out.insert(format!("t{}.{}", rng.below(1000), rng.below(3)), t);
    }
    out
}
