use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::synth::Lesion;

/// Maximum age difference (years) between matched subjects.
pub const AGE_CALIPER: f64 = 5.0;
/// Maximum BMI difference (kg/m²) between matched subjects.
pub const BMI_CALIPER: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Case,
    Control,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Case => 1,
            Label::Control => 0,
        }
    }
}

/// One manifest record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subject {
    pub id: String,
    pub age: f64,
    pub sex: Sex,
    pub ethnicity: String,
    pub bmi: f64,
    pub label: Label,
    /// Volume archive, relative to the manifest's directory.
    pub volume: String,
    /// Ground-truth lesion, known only for synthetic cases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion: Option<Lesion>,
}

impl Subject {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.age > 0.0 && self.bmi > 0.0) {
            return Err(crate::Error::invalid(format!(
                "subject {}: age and bmi must be positive (age {}, bmi {})",
                self.id, self.age, self.bmi
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub case_id: String,
    pub control_id: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    /// Ids left without a partner, in ascending order.
    pub excluded: Vec<String>,
}

fn sample_sd(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Standardized covariate distance used for matching.
///
/// A zero standard deviation (every subject shares the value) makes that
/// covariate drop out instead of dividing by zero.
pub fn match_distance(a: &Subject, b: &Subject, sd_age: f64, sd_bmi: f64) -> f64 {
    let term = |d: f64, sd: f64| if sd > 0.0 { d.abs() / sd } else { 0.0 };
    term(a.age - b.age, sd_age) + term(a.bmi - b.bmi, sd_bmi)
}

/// True when `control` may be paired with `case` at all.
pub fn admissible(case: &Subject, control: &Subject) -> bool {
    case.sex == control.sex
        && case.ethnicity == control.ethnicity
        && (case.age - control.age).abs() <= AGE_CALIPER
        && (case.bmi - control.bmi).abs() <= BMI_CALIPER
}

/// Greedy nearest-neighbour case-control matching.
///
/// Cases are visited in ascending id order; each takes the closest still
/// unmatched admissible control, ties going to the smaller control id.
/// Standard deviations are taken over the whole input cohort.
pub fn match_case_controls(subjects: &[Subject]) -> MatchResult {
    let sd_age = sample_sd(subjects.iter().map(|s| s.age));
    let sd_bmi = sample_sd(subjects.iter().map(|s| s.bmi));
    let mut cases: Vec<&Subject> = subjects.iter().filter(|s| s.label == Label::Case).collect();
    let mut controls: Vec<&Subject> = subjects.iter().filter(|s| s.label == Label::Control).collect();
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    controls.sort_by(|a, b| a.id.cmp(&b.id));

    let mut taken = vec![false; controls.len()];
    let mut result = MatchResult::default();
    let mut matched: BTreeSet<&str> = BTreeSet::new();
    for case in cases {
        let best = controls
            .iter()
            .enumerate()
            .filter(|(j, c)| !taken[*j] && admissible(case, c))
            .map(|(j, c)| (j, match_distance(case, c, sd_age, sd_bmi)))
            // on equal distance the earlier, smaller id stays
            .fold(None, |best: Option<(usize, f64)>, (j, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((j, d)),
            });
        if let Some((j, _)) = best {
            taken[j] = true;
            matched.insert(&case.id);
            matched.insert(&controls[j].id);
            result.pairs.push(MatchedPair {
                case_id: case.id.clone(),
                control_id: controls[j].id.clone(),
            });
        }
    }
    let mut excluded: Vec<String> = subjects
        .iter()
        .filter(|s| !matched.contains(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    excluded.sort();
    result.excluded = excluded;
    result
}
