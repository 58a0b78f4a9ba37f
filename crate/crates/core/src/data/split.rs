use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::interactions::{ColdStartSplit, InteractionSet, Partition};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

/// Item-level cold-start split.
///
/// Items are shuffled with the `split` sub-stream of `seed` and cut by item
/// count. Every record touching a valid or test item leaves the training
/// set and becomes ground truth for that partition.
pub fn cold_start_split(set: &InteractionSet, ratios: SplitRatios, seed: u64) -> Result<InteractionSet> {
    let SplitRatios { train, valid, test } = ratios;
    if [train, valid, test].iter().any(|r| r.is_nan() || *r < 0.0) || (train + valid + test - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "split ratios {train}/{valid}/{test} must be non-negative and sum to 1"
        )));
    }
    let n = set.num_items();
    if n < 10 {
        return Err(Error::Parameter(format!(
            "cold-start split needs at least 10 items, found {n}"
        )));
    }
    let n_train = (n as f64 * train).round() as usize;
    let n_valid = ((n as f64 * valid).round() as usize).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split"));

    let mut labels = vec![Partition::TestCold; n];
    for &item in &order[..n_train] {
        labels[item] = Partition::Train;
    }
    for &item in &order[n_train..n_train + n_valid] {
        labels[item] = Partition::ValidCold;
    }

    let mut split = ColdStartSplit {
        labels,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for &r in &set.records {
        match split.labels[r.item] {
            Partition::Train => split.train.push(r),
            Partition::ValidCold => split.valid.push(r),
            Partition::TestCold => split.test.push(r),
        }
    }
    let mut out = set.clone();
    out.split = Some(split);
    Ok(out)
}

/// Writes `train_items.txt`, `valid_items.txt`, `test_items.txt`.
pub fn write_split_files(set: &InteractionSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let split = set
        .split()
        .ok_or_else(|| Error::Protocol("interaction set has not been split".into()))?;
    for p in [Partition::Train, Partition::ValidCold, Partition::TestCold] {
        let mut body = String::new();
        for item in split.items(p) {
            body.push_str(set.items().name(item));
            body.push('\n');
        }
        let path = dir.join(format!("{}_items.txt", p.label()));
        fs::write(&path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
