use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::checkpoint::{load_archive, volume_from_archive};
use crate::error::{Error, Result};

use super::{MatchedPair, Subject, VolumePair};

/// Reads a manifest (a JSON list of subjects) and checks every record.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Subject>> {
    let subjects: Vec<Subject> = serde_json::from_slice(&fs::read(path)?)?;
    let mut ids = BTreeSet::new();
    for s in &subjects {
        s.validate()?;
        if !ids.insert(s.id.as_str()) {
            return Err(Error::invalid(format!("duplicate subject id `{}`", s.id)));
        }
    }
    Ok(subjects)
}

pub fn save_manifest(path: impl AsRef<Path>, subjects: &[Subject]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(subjects)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Loads the volumes of matched pairs; volume paths are resolved against
/// `root`.
pub fn load_volume_pairs(root: impl AsRef<Path>, subjects: &[Subject], pairs: &[MatchedPair]) -> Result<Vec<VolumePair>> {
    let by_id: BTreeMap<&str, &Subject> = subjects.iter().map(|s| (s.id.as_str(), s)).collect();
    let load = |id: &str| -> Result<crate::tokenizer::Volume> {
        let s = by_id
            .get(id)
            .ok_or_else(|| Error::invalid(format!("pair references unknown subject `{id}`")))?;
        volume_from_archive(&load_archive(root.as_ref().join(&s.volume))?)
    };
    let mut out: Vec<VolumePair> = Vec::with_capacity(pairs.len());
    for p in pairs {
        let pair = VolumePair {
            case_id: p.case_id.clone(),
            control_id: p.control_id.clone(),
            case: load(&p.case_id)?,
            control: load(&p.control_id)?,
        };
        if let Some(first) = out.first() {
            for v in [&pair.case, &pair.control] {
                if v.voxels().shape() != first.case.voxels().shape() {
                    return Err(Error::Shape {
                        op: "load_volume_pairs",
                        lhs: first.case.voxels().shape().to_vec(),
                        rhs: v.voxels().shape().to_vec(),
                    });
                }
            }
        }
        out.push(pair);
    }
    Ok(out)
}
