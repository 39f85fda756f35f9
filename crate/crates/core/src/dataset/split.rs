use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::manifest::DatasetManifest;
use super::sample::{Label, Provenance, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::seed;

/// Number of training samples for a class of size `n`.
///
/// `floor(ratio * n)` with a small tolerance so that exact products such as
/// `0.8 * 100` are not lost to rounding.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

fn root_of<'a>(rec: &'a SampleRecord, by_id: &HashMap<&'a str, &'a SampleRecord>) -> &'a str {
    let mut cur = rec;
    let mut hops = 0;
    while let Some(src) = cur.source_id.as_deref() {
        match by_id.get(src) {
            Some(parent) if hops < 64 => {
                cur = parent;
                hops += 1;
            }
            _ => return src,
        }
    }
    &cur.id
}

/// Stratified train/test split of the root samples; derived samples follow
/// the split of the sample they descend from.
pub fn split_dataset(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<DatasetManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    if let Some(s) = manifest.samples.iter().find(|s| s.split != Split::Unassigned) {
        return Err(Error::invalid(format!("sample `{}` already has a split", s.id)));
    }
    let is_root = |s: &SampleRecord| {
        s.source_id.is_none() || matches!(s.provenance, Provenance::Raw | Provenance::Preprocessed)
    };
    let mut assigned: HashMap<String, Split> = HashMap::new();
    for label in Label::ALL {
        let mut ids: Vec<&str> = manifest
            .samples
            .iter()
            .filter(|s| s.label == label && is_root(s))
            .map(|s| s.id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        if ids.len() < 2 {
            return Err(Error::invalid(format!(
                "class {label} has {} sample; at least 2 are needed to stratify",
                ids.len()
            )));
        }
        ids.sort_unstable();
        let mut rng = seed::stream(seed, &format!("split/{label}"));
        ids.shuffle(&mut rng);
        let n_train = train_count(ids.len(), ratio);
        for (i, id) in ids.iter().enumerate() {
            let split = if i < n_train { Split::Train } else { Split::Test };
            assigned.insert(id.to_string(), split);
        }
    }

    let by_id: HashMap<&str, &SampleRecord> = manifest.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut out = manifest.clone();
    for s in out.samples.iter_mut() {
        let split = match assigned.get(&s.id) {
            Some(sp) => *sp,
            None => {
                let orig = by_id[s.id.as_str()];
                let root = root_of(orig, &by_id);
                *assigned.get(root).ok_or_else(|| {
                    Error::invalid(format!("sample `{}` descends from unknown source `{root}`", s.id))
                })?
            }
        };
        s.split = split;
    }
    out.split_seed = Some(seed);
    Ok(out)
}
