use std::collections::HashSet;

use rand::Rng;

use super::interactions::{Interaction, InteractionSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub user: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Distinct items referenced by the batch, ascending.
    pub fn items(&self) -> Vec<usize> {
        let mut items: Vec<usize> = self.triplets.iter().flat_map(|t| [t.positive, t.negative]).collect();
        items.sort_unstable();
        items.dedup();
        items
    }
}

/// Uniform BPR triplet sampler over the training partition.
///
/// Positives are uniform over training records; negatives are uniform over
/// train items the user has not interacted with, by rejection.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    records: Vec<Interaction>,
    train_items: Vec<usize>,
    seen: HashSet<Interaction>,
    saturated: HashSet<usize>,
}

impl TripletSampler {
    pub fn new(set: &InteractionSet) -> Result<Self> {
        let records = set.train_records().to_vec();
        if records.is_empty() {
            return Err(Error::EmptyDataset("no training records to sample from".into()));
        }
        let train_items = set.train_items();
        let seen: HashSet<Interaction> = records.iter().copied().collect();
        let mut per_user = std::collections::HashMap::<usize, usize>::new();
        for r in &records {
            *per_user.entry(r.user).or_default() += 1;
        }
        let saturated: HashSet<usize> = per_user
            .into_iter()
            .filter(|&(_, n)| n >= train_items.len())
            .map(|(u, _)| u)
            .collect();
        for u in &saturated {
            log::warn!(
                "user {} interacted with every train item; skipped in sampling",
                set.users().name(*u)
            );
        }
        if records.iter().all(|r| saturated.contains(&r.user)) {
            return Err(Error::Data(
                "every training user interacted with every train item; no negatives exist".into(),
            ));
        }
        Ok(TripletSampler {
            records,
            train_items,
            seen,
            saturated,
        })
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    pub fn is_training_record(&self, user: usize, item: usize) -> bool {
        self.seen.contains(&Interaction { user, item })
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> TripletBatch {
        let mut triplets = Vec::with_capacity(batch_size);
        while triplets.len() < batch_size {
            let pos = self.records[rng.random_range(0..self.records.len())];
            if self.saturated.contains(&pos.user) {
                continue;
            }
            let negative = loop {
                let j = self.train_items[rng.random_range(0..self.train_items.len())];
                if !self.is_training_record(pos.user, j) {
                    break j;
                }
            };
            triplets.push(Triplet {
                user: pos.user,
                positive: pos.item,
                negative,
            });
        }
        TripletBatch { triplets }
    }
}

pub fn sample_triplets<R: Rng + ?Sized>(set: &InteractionSet, batch_size: usize, rng: &mut R) -> Result<TripletBatch> {
    Ok(TripletSampler::new(set)?.sample(batch_size, rng))
}
