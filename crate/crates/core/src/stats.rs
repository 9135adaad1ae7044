//! Evaluation statistics: ROC AUC, operating-point sensitivity and
//! specificity, six-fold summaries with t-based confidence intervals, and
//! one-sided paired t-tests.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of cross-validation folds every summary expects.
pub const FOLDS: usize = 6;

/// Target used for both operating points in reports.
pub const OPERATING_POINT: f64 = 0.80;

/// Scores with binary labels (1 = case, 0 = control).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCohort {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredCohort {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let c = ScoredCohort { scores, labels };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() {
            return Err(Error::invalid(format!(
                "{} scores but {} labels",
                self.scores.len(),
                self.labels.len()
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid(format!("label must be 0 or 1, got {l}")));
        }
        if let Some(i) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn split(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate()?;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (&s, &l) in self.scores.iter().zip(&self.labels) {
            if l == 1 {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::invalid(format!(
                "ROC statistics need both classes ({} cases, {} controls)",
                pos.len(),
                neg.len()
            )));
        }
        pos.sort_by(f64::total_cmp);
        neg.sort_by(f64::total_cmp);
        Ok((pos, neg))
    }
}

/// Area under the ROC curve as the normalized Mann–Whitney statistic; tied
/// case/control pairs count one half.
pub fn roc_auc(c: &ScoredCohort) -> Result<f64> {
    let (pos, neg) = c.split()?;
    // Twice the U statistic, kept in integers so ties are exact.
    let mut twice_u: u128 = 0;
    let (mut below, mut equal_end) = (0usize, 0usize);
    for &s in &pos {
        while below < neg.len() && neg[below] < s {
            below += 1;
        }
        equal_end = equal_end.max(below);
        while equal_end < neg.len() && neg[equal_end] == s {
            equal_end += 1;
        }
        twice_u += 2 * below as u128 + (equal_end - below) as u128;
    }
    Ok(twice_u as f64 / (2.0 * pos.len() as f64 * neg.len() as f64))
}

/// Fraction of `sorted` values that are `>= threshold`.
fn frac_at_or_above(sorted: &[f64], threshold: f64) -> f64 {
    let idx = sorted.partition_point(|&v| v < threshold);
    (sorted.len() - idx) as f64 / sorted.len() as f64
}

/// Candidate thresholds: every distinct score plus `+inf` (nobody positive).
fn thresholds(pos: &[f64], neg: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = pos.iter().chain(neg).copied().collect();
    t.push(f64::INFINITY);
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

fn check_target(target: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::invalid(format!("operating-point target {target} outside [0, 1]")));
    }
    Ok(())
}

/// Sensitivity at the smallest threshold whose specificity reaches
/// `spec_target`. A subject is called positive when its score is at or
/// above the threshold.
pub fn sens_at_spec(c: &ScoredCohort, spec_target: f64) -> Result<f64> {
    check_target(spec_target)?;
    let (pos, neg) = c.split()?;
    let t = thresholds(&pos, &neg)
        .into_iter()
        .find(|&t| 1.0 - frac_at_or_above(&neg, t) >= spec_target)
        .unwrap_or(f64::INFINITY);
    Ok(frac_at_or_above(&pos, t))
}

/// Specificity at the largest threshold whose sensitivity reaches
/// `sens_target`.
pub fn spec_at_sens(c: &ScoredCohort, sens_target: f64) -> Result<f64> {
    check_target(sens_target)?;
    let (pos, neg) = c.split()?;
    let t = thresholds(&pos, &neg)
        .into_iter()
        .rev()
        .find(|&t| frac_at_or_above(&pos, t) >= sens_target)
        .unwrap_or(f64::NEG_INFINITY);
    Ok(1.0 - frac_at_or_above(&neg, t))
}

/// Per-fold values with their mean and 95% confidence half-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub folds: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let rough = v.iter().sum::<f64>() / n;
    // one refinement pass so constant inputs give their exact value
    let mean = rough + v.iter().map(|x| x - rough).sum::<f64>() / n;
    let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn check_six(v: &[f64], what: &str) -> Result<()> {
    if v.len() != FOLDS {
        return Err(Error::invalid(format!("{what}: expected {FOLDS} values, got {}", v.len())));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{what} value {i}")));
    }
    Ok(())
}

/// Mean and `t(0.975, 5) · sd / sqrt(6)` over six fold values.
pub fn summarize_folds(values: &[f64]) -> Result<MetricSummary> {
    check_six(values, "summarize_folds")?;
    let (mean, sd) = mean_sd(values);
    let ci95 = t_quantile(0.975, (FOLDS - 1) as f64) * sd / (FOLDS as f64).sqrt();
    Ok(MetricSummary {
        folds: values.to_vec(),
        mean,
        ci95,
    })
}

/// One-sided paired t-test of `mean(a - b) > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

/// Paired t-test over six folds with the alternative `mean(a - b) > 0`.
///
/// When the differences have zero variance the statistic is undefined; `t`
/// is then reported as `±inf` (or 0 when every difference is 0) and `p` as
/// 0, 1 or 0.5 accordingly.
pub fn paired_t_one_sided(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    check_six(a, "paired_t_one_sided a")?;
    check_six(b, "paired_t_one_sided b")?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = FOLDS - 1;
    let (mean, sd) = mean_sd(&d);
    if sd == 0.0 {
        let (t, p) = if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return Ok(PairedTest { t, df, p });
    }
    let t = mean / (sd / (FOLDS as f64).sqrt());
    Ok(PairedTest {
        t,
        df,
        p: 1.0 - t_cdf(t, df as f64),
    })
}

/// Two-sided Welch t-test p-value for a difference in means.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("welch_t_test needs at least two values per group"));
    }
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    Ok(2.0 * (1.0 - t_cdf(t.abs(), df)))
}

// ---------------------------------------------------------------------------
// Student t distribution

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + 7.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        for num in [num, -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))] {
            d = 1.0 + num * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + num / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// CDF of Student's t with `df` degrees of freedom.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = 0.5 * inc_beta(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Quantile of Student's t by bisection on [`t_cdf`].
pub fn t_quantile(p: f64, df: f64) -> f64 {
    let (mut lo, mut hi) = (-1e3, 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    SensAt80Spec,
    SpecAt80Sens,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Auc, Metric::SensAt80Spec, Metric::SpecAt80Sens];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Auc => "AUC",
            Metric::SensAt80Spec => "Sens@80%Spec",
            Metric::SpecAt80Sens => "Spec@80%Sens",
        }
    }

    pub fn evaluate(self, c: &ScoredCohort) -> Result<f64> {
        match self {
            Metric::Auc => roc_auc(c),
            Metric::SensAt80Spec => sens_at_spec(c, OPERATING_POINT),
            Metric::SpecAt80Sens => spec_at_sens(c, OPERATING_POINT),
        }
    }
}

/// Six validation folds scored by one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFolds {
    pub model: String,
    pub folds: Vec<ScoredCohort>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub metric: Metric,
    #[serde(flatten)]
    pub summary: MetricSummary,
    /// One-sided p-value of this model exceeding the reference.
    pub p_value: f64,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub reference: String,
    pub rows: Vec<ReportRow>,
}

/// Summarizes every model on every metric and tests each against
/// `reference`. All models must be scored on the same folds with the same
/// labels.
pub fn build_report(models: &[ModelFolds], reference: &str) -> Result<FoldReport> {
    let ref_model = models
        .iter()
        .find(|m| m.model == reference)
        .ok_or_else(|| Error::invalid(format!("reference model `{reference}` not among the inputs")))?;
    for m in models {
        if m.folds.len() != FOLDS {
            return Err(Error::invalid(format!("model `{}` has {} folds, expected {FOLDS}", m.model, m.folds.len())));
        }
        for (f, (a, b)) in m.folds.iter().zip(&ref_model.folds).enumerate() {
            if a.labels != b.labels {
                return Err(Error::invalid(format!(
                    "fold {f} of `{}` does not match the reference fold structure",
                    m.model
                )));
            }
        }
    }
    let per_metric = |m: &ModelFolds, metric: Metric| -> Result<Vec<f64>> {
        m.folds.iter().map(|c| metric.evaluate(c)).collect()
    };
    let mut rows = Vec::with_capacity(models.len() * Metric::ALL.len());
    for m in models {
        for metric in Metric::ALL {
            let values = per_metric(m, metric)?;
            let reference_values = per_metric(ref_model, metric)?;
            let test = paired_t_one_sided(&values, &reference_values)?;
            rows.push(ReportRow {
                model: m.model.clone(),
                metric,
                summary: summarize_folds(&values)?,
                p_value: test.p,
                t: test.t,
            });
        }
    }
    Ok(FoldReport {
        reference: reference.to_string(),
        rows,
    })
}

impl FoldReport {
    /// Aligned plain-text table, one line per model.
    pub fn to_text(&self) -> String {
        let mut models: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
        }
        let width = models.iter().map(|m| m.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}", "Model");
        for m in Metric::ALL {
            let _ = write!(out, "  {:<17}  {:>7}", m.label(), "p");
        }
        out.push('\n');
        for model in models {
            let _ = write!(out, "{model:<width$}");
            for metric in Metric::ALL {
                let row = self.rows.iter().find(|r| r.model == model && r.metric == metric);
                match row {
                    Some(r) if model == self.reference => {
                        let _ = write!(out, "  {:.3} ± {:.3}      {:>7}", r.summary.mean, r.summary.ci95, "ref");
                    }
                    Some(r) => {
                        let _ = write!(
                            out,
                            "  {:.3} ± {:.3}      {:>7.4}",
                            r.summary.mean, r.summary.ci95, r.p_value
                        );
                    }
                    None => {
                        let _ = write!(out, "  {:<17}  {:>7}", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(scores: &[f64], labels: &[u8]) -> ScoredCohort {
        ScoredCohort::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    /// Closed-form CDF of t with 5 degrees of freedom.
    fn t5_cdf(t: f64) -> f64 {
        let th = (t / 5f64.sqrt()).atan();
        let (s, c) = th.sin_cos();
        0.5 + (th + s * c * (1.0 + 2.0 / 3.0 * c * c)) / std::f64::consts::PI
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(roc_auc(&cohort(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(roc_auc(&cohort(&[0.1, 0.2, 0.9, 0.8], &[1, 1, 0, 0])).unwrap(), 0.0);
        assert_eq!(roc_auc(&cohort(&[0.5; 5], &[1, 0, 1, 0, 0])).unwrap(), 0.5);
    }

    #[test]
    fn auc_counts_ties_half() {
        // pairs: (0.5 vs 0.5) tie, (0.5 vs 0.2) win, (0.9 vs both) wins
        let c = cohort(&[0.5, 0.9, 0.5, 0.2], &[1, 1, 0, 0]);
        assert_eq!(roc_auc(&c).unwrap(), 3.5 / 4.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let c = cohort(&[0.1, 0.2], &[1, 1]);
        assert!(roc_auc(&c).is_err());
        assert!(sens_at_spec(&c, 0.8).is_err());
        assert!(spec_at_sens(&c, 0.8).is_err());
        assert!(ScoredCohort::new(vec![0.1], vec![1, 0]).is_err());
        assert!(ScoredCohort::new(vec![0.1], vec![2]).is_err());
    }

    #[test]
    fn operating_points_on_degenerate_scorers() {
        let perfect = cohort(&[0.9, 0.8, 0.7, 0.3, 0.2, 0.1], &[1, 1, 1, 0, 0, 0]);
        for target in [0.0, 0.5, 0.8, 1.0] {
            assert_eq!(sens_at_spec(&perfect, target).unwrap(), 1.0);
            assert_eq!(spec_at_sens(&perfect, target).unwrap(), 1.0);
        }
        let labels = [1u8, 0, 1, 0, 0, 1];
        let as_scores: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let c = cohort(&as_scores, &labels);
        assert_eq!(sens_at_spec(&c, 0.8).unwrap(), 1.0);
        assert_eq!(spec_at_sens(&c, 1.0).unwrap(), 1.0);

        let anti = cohort(&[0.1, 0.2, 0.3, 0.7, 0.8, 0.9], &[1, 1, 1, 0, 0, 0]);
        assert_eq!(spec_at_sens(&anti, 0.8).unwrap(), 0.0);
    }

    /// Exhaustive sweep over every threshold on a fine grid spanning the
    /// scores, independent of the candidate-threshold construction.
    fn sweep(c: &ScoredCohort) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        let mut t = -0.005;
        while t < 1.02 {
            let (mut tp, mut p, mut tn, mut n) = (0, 0, 0, 0);
            for (&s, &l) in c.scores.iter().zip(&c.labels) {
                if l == 1 {
                    p += 1;
                    tp += (s >= t) as usize;
                } else {
                    n += 1;
                    tn += (s < t) as usize;
                }
            }
            out.push((t, tp as f64 / p as f64, tn as f64 / n as f64));
            t += 0.005;
        }
        out
    }

    #[test]
    fn ten_point_cohort_matches_sweep() {
        let c = cohort(
            &[0.95, 0.85, 0.80, 0.70, 0.55, 0.60, 0.45, 0.40, 0.30, 0.10],
            &[1, 1, 0, 1, 1, 0, 0, 1, 0, 0],
        );
        let grid = sweep(&c);
        // smallest threshold reaching spec >= 0.8
        let want_sens = grid.iter().find(|g| g.2 >= 0.8).unwrap().1;
        // largest threshold reaching sens >= 0.8
        let want_spec = grid.iter().rev().find(|g| g.1 >= 0.8).unwrap().2;
        assert_eq!(sens_at_spec(&c, 0.8).unwrap(), want_sens);
        assert_eq!(spec_at_sens(&c, 0.8).unwrap(), want_spec);
        // hand check: spec 0.8 needs threshold above 0.60 -> cases >= 0.70: 3 of 5
        assert_eq!(want_sens, 0.6);
        // sens 0.8 needs threshold <= 0.55 -> controls below 0.55: 0.45, 0.30, 0.10
        assert_eq!(want_spec, 0.6);
    }

    #[test]
    fn summary_closed_forms() {
        let s = summarize_folds(&[0.7; 6]).unwrap();
        assert_eq!((s.mean, s.ci95), (0.7, 0.0));
        let s = summarize_folds(&[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let p: f64 = 1.0 / 6.0;
        let sd = (p * (1.0 - p) * 6.0 / 5.0).sqrt();
        assert!((s.mean - p).abs() < 1e-15);
        assert!((s.ci95 - 2.570_581_836 * sd / 6f64.sqrt()).abs() < 1e-8);
        assert!(summarize_folds(&[1.0; 5]).is_err());
        assert!(summarize_folds(&[1.0, 2.0, 3.0, 4.0, 5.0, f64::NAN]).is_err());
    }

    #[test]
    fn t_distribution_against_closed_form() {
        for i in -80..=80 {
            let t = i as f64 * 0.1;
            assert!((t_cdf(t, 5.0) - t5_cdf(t)).abs() < 1e-13, "t={t}");
        }
        assert!((t_quantile(0.975, 5.0) - 2.570_581_836).abs() < 1e-8);
        // df = 1 is Cauchy
        assert!((t_cdf(1.0, 1.0) - 0.75).abs() < 1e-13);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(10.0) - 362_880f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn paired_t_cases() {
        let a = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let same = paired_t_one_sided(&a, &a).unwrap();
        assert_eq!((same.t, same.p), (0.0, 0.5));
        let ones = paired_t_one_sided(&[2.0; 6], &[1.0; 6]).unwrap();
        assert_eq!(ones.p, 0.0);
        let neg = paired_t_one_sided(&[1.0; 6], &[2.0; 6]).unwrap();
        assert_eq!(neg.p, 1.0);

        let d = paired_t_one_sided(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0; 6]).unwrap();
        let sd = 3.5f64.sqrt();
        let t = 3.5 / (sd / 6f64.sqrt());
        assert!((d.t - t).abs() < 1e-12);
        assert!((d.p - (1.0 - t5_cdf(t))).abs() < 1e-12);
        assert!((d.p - 0.0030).abs() < 5e-5);
        assert!(paired_t_one_sided(&[1.0; 5], &[1.0; 5]).is_err());
    }

    #[test]
    fn welch_detects_shift() {
        let a: Vec<f64> = (0..50).map(|i| (i % 7) as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.01).collect();
        assert!(welch_t_test(&a, &b).unwrap() > 0.9);
        let c: Vec<f64> = a.iter().map(|x| x + 3.0).collect();
        assert!(welch_t_test(&a, &c).unwrap() < 1e-6);
    }

    fn folds(seed: u64, shift: f64) -> Vec<ScoredCohort> {
        let mut rng = crate::rng::SeededRng::new(seed);
        (0..FOLDS)
            .map(|_| {
                let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
                let scores = labels
                    .iter()
                    .map(|&l| (rng.uniform() + shift * l as f64).min(1.0))
                    .collect();
                ScoredCohort::new(scores, labels).unwrap()
            })
            .collect()
    }

    #[test]
    fn report_shape_and_self_comparison() {
        let models = vec![
            ModelFolds { model: "base".into(), folds: folds(1, 0.2) },
            ModelFolds { model: "better".into(), folds: folds(2, 0.6) },
        ];
        let r = build_report(&models, "base").unwrap();
        assert_eq!(r.rows.len(), 6);
        for row in r.rows.iter().filter(|r| r.model == "base") {
            assert_eq!(row.p_value, 0.5);
        }
        let json = serde_json::to_string(&r).unwrap();
        let back: FoldReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let text = r.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("ref"));

        let mut bad = models.clone();
        bad[1].folds[0].labels[0] ^= 1;
        assert!(build_report(&bad, "base").is_err());
        assert!(build_report(&models, "missing").is_err());
    }
}
