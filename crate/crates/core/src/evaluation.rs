//! Full-ranking cold-start evaluation with Recall@K and NDCG@K.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::data::{Dataset, Partition};
use crate::training::Model;
use crate::{Error, Exec, Result};

pub const DEFAULT_KS: [usize; 2] = [10, 20];

/// `|top-K ∩ GT| / |GT|`.
pub fn recall_at_k(ranked: &[usize], ground_truth: &[usize], k: usize) -> Result<f64> {
    check_args(ground_truth, k)?;
    let gt: BTreeSet<usize> = ground_truth.iter().copied().collect();
    let hits = ranked.iter().take(k).filter(|i| gt.contains(i)).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Binary-relevance NDCG with log2 discount and IDCG truncated at
/// `min(K, |GT|)`.
pub fn ndcg_at_k(ranked: &[usize], ground_truth: &[usize], k: usize) -> Result<f64> {
    check_args(ground_truth, k)?;
    let gt: BTreeSet<usize> = ground_truth.iter().copied().collect();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| gt.contains(i))
        .map(|(p, _)| discount(p + 1))
        .sum();
    let idcg: f64 = (1..=k.min(gt.len())).map(discount).sum();
    Ok(dcg / idcg)
}

fn discount(position: usize) -> f64 {
    1.0 / ((position + 1) as f64).log2()
}

fn check_args(ground_truth: &[usize], k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::Parameter("cutoff K must be at least 1".into()));
    }
    if ground_truth.is_empty() {
        return Err(Error::Parameter("empty ground truth".into()));
    }
    Ok(())
}

/// Sorts `candidates` by score descending; ties go to the lower item index.
pub fn rank_by_scores(candidates: &[usize], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = candidates.iter().copied().zip(scores.iter().copied()).collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserRanking {
    pub user: usize,
    pub ranked: Vec<usize>,
    pub ground_truth: Vec<usize>,
    /// One value per cutoff, aligned with [`RankingResult::ks`].
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    /// The user has no training interaction, so their embedding is the
    /// initialization.
    pub untrained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub partition: Partition,
    pub ks: Vec<usize>,
    pub users: Vec<UserRanking>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub evaluated: usize,
    /// Users without ground truth in the partition.
    pub skipped: usize,
    pub untrained_users: usize,
    /// Candidates dropped for lacking every modality feature.
    pub excluded_items: Vec<usize>,
    pub num_candidates: usize,
    pub modalities: Vec<String>,
    /// Mean fusion weight per modality over the ranked candidates.
    pub mean_alpha: Option<Vec<f64>>,
}

impl RankingResult {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.ndcg[p])
    }

    /// Header plus one row: counts, Rec@K columns, NDCG@K columns, then the
    /// mean α per modality.
    pub fn to_tsv(&self) -> String {
        let mut header = vec![
            "partition".to_owned(),
            "candidates".into(),
            "evaluated".into(),
            "skipped".into(),
            "untrained".into(),
        ];
        header.extend(self.ks.iter().map(|k| format!("Rec@{k}")));
        header.extend(self.ks.iter().map(|k| format!("NDCG@{k}")));
        header.extend(self.modalities.iter().map(|m| format!("alpha_{m}")));
        let mut row = vec![
            self.partition.label().to_owned(),
            self.num_candidates.to_string(),
            self.evaluated.to_string(),
            self.skipped.to_string(),
            self.untrained_users.to_string(),
        ];
        row.extend(self.recall.iter().map(|v| format!("{v:.6}")));
        row.extend(self.ndcg.iter().map(|v| format!("{v:.6}")));
        match &self.mean_alpha {
            Some(a) => row.extend(a.iter().map(|v| format!("{v:.6}"))),
            None => row.extend(self.modalities.iter().map(|_| "-".to_owned())),
        }
        format!("{}\n{}\n", header.join("\t"), row.join("\t"))
    }

    /// Per-user metrics, for debugging.
    pub fn per_user_tsv(&self, dataset: &Dataset) -> String {
        let mut out = String::from("user\tground_truth\tuntrained");
        for k in &self.ks {
            let _ = write!(out, "\tRec@{k}");
        }
        for k in &self.ks {
            let _ = write!(out, "\tNDCG@{k}");
        }
        out.push('\n');
        for u in &self.users {
            let _ = write!(
                out,
                "{}\t{}\t{}",
                dataset.interactions.users().name(u.user),
                u.ground_truth.len(),
                u.untrained
            );
            for v in u.recall.iter().chain(&u.ndcg) {
                let _ = write!(out, "\t{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Candidate items of `partition` that can be encoded; featureless items are
/// returned separately.
fn candidates(dataset: &Dataset, partition: Partition) -> Result<(Vec<usize>, Vec<usize>)> {
    let items = dataset.partition_items(partition)?;
    if items.is_empty() {
        return Err(Error::Protocol(format!(
            "partition `{}` has no items",
            partition.label()
        )));
    }
    let (kept, excluded): (Vec<usize>, Vec<usize>) = items.into_iter().partition(|&i| dataset.has_features(i));
    for &i in &excluded {
        log::warn!(
            "cold item `{}` has no modality features, excluded from ranking",
            dataset.interactions.items().name(i)
        );
    }
    if kept.is_empty() {
        return Err(Error::Protocol(format!(
            "partition `{}` has no item with features",
            partition.label()
        )));
    }
    Ok((kept, excluded))
}

/// Every encodable item of `partition`, ranked for `user`.
pub fn rank_cold_items(model: &Model, dataset: &Dataset, user: usize, partition: Partition) -> Result<Vec<usize>> {
    if user >= model.num_users() {
        return Err(Error::Parameter(format!("user index {user} out of range")));
    }
    let (items, _) = candidates(dataset, partition)?;
    let e_u = model.user_embedding(user);
    let scores = items
        .iter()
        .map(|&i| {
            let e = model.embed_item(&dataset.item_features(i))?;
            crate::training::score(e_u, &e.e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_by_scores(&items, &scores))
}

pub fn evaluate(model: &Model, dataset: &Dataset, partition: Partition, ks: &[usize]) -> Result<RankingResult> {
    evaluate_with(Exec::default(), model, dataset, partition, ks)
}

/// Ranks all encodable cold items of `partition` for every user with ground
/// truth there and macro-averages the metrics.
pub fn evaluate_with(
    exec: Exec,
    model: &Model,
    dataset: &Dataset,
    partition: Partition,
    ks: &[usize],
) -> Result<RankingResult> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Parameter("cutoffs must be non-empty and at least 1".into()));
    }
    if partition == Partition::Train {
        return Err(Error::Protocol("evaluation runs on a cold partition".into()));
    }
    if model.num_users() != dataset.num_users() {
        return Err(Error::Mismatch(format!(
            "model has {} users, dataset {}",
            model.num_users(),
            dataset.num_users()
        )));
    }
    let (items, excluded_items) = candidates(dataset, partition)?;
    let split = dataset
        .interactions
        .split()
        .ok_or_else(|| Error::Protocol("dataset has not been split".into()))?;

    let embeddings = exec
        .map(&items, |&i| model.embed_item(&dataset.item_features(i)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut ground_truth: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for r in split.records(partition) {
        ground_truth.entry(r.user).or_default().push(r.item);
    }
    let trained: BTreeSet<usize> = split.records(Partition::Train).iter().map(|r| r.user).collect();
    let users: Vec<(usize, Vec<usize>)> = ground_truth.into_iter().collect();

    let rankings = exec
        .map(&users, |(user, gt)| -> Result<UserRanking> {
            let e_u = model.user_embedding(*user);
            let scores = embeddings
                .iter()
                .map(|e| crate::training::score(e_u, &e.e))
                .collect::<Result<Vec<_>>>()?;
            let ranked = rank_by_scores(&items, &scores);
            let recall = ks.iter().map(|&k| recall_at_k(&ranked, gt, k)).collect::<Result<_>>()?;
            let ndcg = ks.iter().map(|&k| ndcg_at_k(&ranked, gt, k)).collect::<Result<_>>()?;
            Ok(UserRanking {
                user: *user,
                ranked,
                ground_truth: gt.clone(),
                recall,
                ndcg,
                untrained: !trained.contains(user),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let n = rankings.len() as f64;
    let macro_avg = |f: fn(&UserRanking) -> &Vec<f64>| -> Vec<f64> {
        (0..ks.len())
            .map(|j| rankings.iter().map(|u| f(u)[j]).sum::<f64>() / n)
            .collect()
    };
    let recall = macro_avg(|u| &u.recall);
    let ndcg = macro_avg(|u| &u.ndcg);

    let mean_alpha = if model.has_alpha() {
        let mut acc = vec![0.0; model.modalities().len()];
        for e in &embeddings {
            for (a, v) in acc.iter_mut().zip(e.alpha.as_deref().unwrap_or(&[])) {
                *a += v;
            }
        }
        Some(acc.into_iter().map(|a| a / embeddings.len() as f64).collect())
    } else {
        None
    };

    let untrained_users = rankings.iter().filter(|u| u.untrained).count();
    if untrained_users > 0 {
        log::warn!(
            "{untrained_users} evaluated user(s) have no training interactions in partition `{}`",
            partition.label()
        );
    }
    Ok(RankingResult {
        partition,
        ks: ks.to_vec(),
        evaluated: rankings.len(),
        skipped: dataset.num_users() - rankings.len(),
        untrained_users,
        users: rankings,
        recall,
        ndcg,
        excluded_items,
        num_candidates: items.len(),
        modalities: model.modalities().iter().map(|m| m.name.clone()).collect(),
        mean_alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle_recall(ranked: &[usize], gt: &[usize], k: usize) -> f64 {
        let mut hits = 0;
        for g in gt {
            for r in &ranked[..k.min(ranked.len())] {
                if r == g {
                    hits += 1;
                }
            }
        }
        hits as f64 / gt.len() as f64
    }

    fn oracle_ndcg(ranked: &[usize], gt: &[usize], k: usize) -> f64 {
        let mut dcg = 0.0;
        for (p, r) in ranked.iter().enumerate() {
            if p < k && gt.contains(r) {
                dcg += 1.0 / (p as f64 + 2.0).log2();
            }
        }
        let mut idcg = 0.0;
        for p in 0..gt.len() {
            if p < k {
                idcg += 1.0 / (p as f64 + 2.0).log2();
            }
        }
        dcg / idcg
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
        let n = rng.random_range(1..=20);
        let mut ranked: Vec<usize> = (0..n).collect();
        ranked.shuffle(rng);
        let g = rng.random_range(1..=n.min(5));
        let mut pool: Vec<usize> = (0..n).collect();
        pool.shuffle(rng);
        (ranked, pool[..g].to_vec())
    }

    #[test]
    fn examples() {
        assert_eq!(recall_at_k(&[5, 1, 2], &[1, 9], 10).unwrap(), 0.5);
        assert_eq!(recall_at_k(&[1, 9, 2], &[1, 9], 2).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[3, 0], &[3], 1).unwrap(), 1.0);
        let v = ndcg_at_k(&[0, 3], &[3], 2).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.6309).abs() < 1e-4);
        assert!(matches!(recall_at_k(&[1], &[1], 0), Err(Error::Parameter(_))));
        assert!(matches!(ndcg_at_k(&[1], &[1], 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn matches_brute_force_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (ranked, gt) = random_instance(&mut rng);
            for k in [1, 5, 10, 20] {
                assert_eq!(recall_at_k(&ranked, &gt, k).unwrap(), oracle_recall(&ranked, &gt, k));
                assert_eq!(ndcg_at_k(&ranked, &gt, k).unwrap(), oracle_ndcg(&ranked, &gt, k));
            }
        }
    }

    #[test]
    fn ranking_order_and_ties() {
        assert_eq!(rank_by_scores(&[0, 1, 2], &[0.9, 0.1, 0.5]), vec![0, 2, 1]);
        assert_eq!(rank_by_scores(&[7, 3, 5], &[1.0, 1.0, 2.0]), vec![5, 3, 7]);
    }

    #[test]
    fn ranking_matches_naive_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = 30;
            let items: Vec<usize> = (0..n).map(|i| i * 3).collect();
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 4.0).collect();
            // Selection sort oracle: repeatedly take the best remaining.
            let mut left: Vec<(usize, f64)> = items.iter().copied().zip(scores.iter().copied()).collect();
            let mut oracle = Vec::new();
            while !left.is_empty() {
                let mut best = 0;
                for j in 1..left.len() {
                    if left[j].1 > left[best].1 || (left[j].1 == left[best].1 && left[j].0 < left[best].0) {
                        best = j;
                    }
                }
                oracle.push(left.remove(best).0);
            }
            assert_eq!(rank_by_scores(&items, &scores), oracle);
        }
    }

    use std::collections::HashSet;

    use crate::data::{generate_synthetic, InteractionSet, ModalityFeatureTable, SplitRatios, SyntheticSpec};
    use crate::training::{ModelConfig, Variant};

    fn split_synthetic(n_users: usize, n_items: usize, per_user: usize, seed: u64) -> Dataset {
        let spec = SyntheticSpec {
            n_users,
            n_items,
            dim: 8,
            interactions_per_user: per_user,
            seed,
            ..SyntheticSpec::default()
        };
        let (set, table) = generate_synthetic(&spec).unwrap();
        Dataset::new(&set, &table)
            .unwrap()
            .with_split(SplitRatios::default(), seed)
            .unwrap()
    }

    fn random_model(ds: &Dataset, seed: u64) -> Model {
        let c = ModelConfig {
            d: 8,
            init_std: 1.0,
            seed,
            variant: Variant::Full,
            ..ModelConfig::default()
        };
        Model::new(&c, ds.modalities(), ds.num_users()).unwrap()
    }

    #[test]
    fn single_relevant_candidate_scores_one() {
        let mut set = InteractionSet::new();
        let mut seen = HashSet::new();
        let mut table = ModalityFeatureTable::new();
        for i in 0..10 {
            set.insert("u0", &format!("i{i}"), &mut seen);
            table.insert("text", &format!("i{i}"), vec![i as f64, 1.0]).unwrap();
        }
        let ds = Dataset::new(&set, &table)
            .unwrap()
            .with_split(SplitRatios::default(), 0)
            .unwrap();
        let r = evaluate(&random_model(&ds, 1), &ds, Partition::TestCold, &[10]).unwrap();
        assert_eq!(r.num_candidates, 1);
        assert_eq!((r.recall, r.ndcg, r.evaluated), (vec![1.0], vec![1.0], 1));
    }

    #[test]
    fn untrained_model_matches_random_baseline() {
        let ds = split_synthetic(400, 1000, 5, 21);
        let r = evaluate(&random_model(&ds, 5), &ds, Partition::TestCold, &[10]).unwrap();
        let n = r.num_candidates as f64;
        let k = 10.0;
        // Hypergeometric variance of hits, scaled by 1/|GT|², per user.
        let var: f64 = r
            .users
            .iter()
            .map(|u| {
                let g = u.ground_truth.len() as f64;
                k * (g / n) * ((n - g) / n) * ((n - k) / (n - 1.0)) / (g * g)
            })
            .sum::<f64>()
            / (r.evaluated as f64).powi(2);
        let expected = k / n;
        let got = r.recall[0];
        assert!(
            (got - expected).abs() < 3.0 * var.sqrt(),
            "recall {got} vs {expected} ± {}",
            3.0 * var.sqrt()
        );
    }

    #[test]
    fn frozen_model_evaluation_is_deterministic() {
        let ds = split_synthetic(60, 120, 4, 8);
        let m = random_model(&ds, 2);
        let a = evaluate_with(Exec::Sequential, &m, &ds, Partition::ValidCold, &DEFAULT_KS).unwrap();
        let b = evaluate_with(Exec::Parallel, &m, &ds, Partition::ValidCold, &DEFAULT_KS).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, evaluate(&m, &ds, Partition::ValidCold, &DEFAULT_KS).unwrap());
        assert_eq!(a.evaluated + a.skipped, ds.num_users());
        for u in &a.users {
            let mut sorted = u.ranked.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, ds.partition_items(Partition::ValidCold).unwrap());
            assert_eq!(
                u.ranked,
                rank_cold_items(&m, &ds, u.user, Partition::ValidCold).unwrap()
            );
        }
    }

    #[test]
    fn partition_errors() {
        let ds = split_synthetic(20, 40, 3, 1);
        let m = random_model(&ds, 0);
        assert!(matches!(
            evaluate(&m, &ds, Partition::Train, &DEFAULT_KS),
            Err(Error::Protocol(_))
        ));
        let unsplit = Dataset::new(&ds.interactions.canonical(), &ds.feature_table()).unwrap();
        assert!(matches!(
            evaluate(&m, &unsplit, Partition::TestCold, &DEFAULT_KS),
            Err(Error::Protocol(_))
        ));
    }

    proptest! {
        #[test]
        fn candidate_order_is_irrelevant(scores in proptest::collection::vec(-5.0f64..5.0, 1..30), seed in 0u64..100) {
            let items: Vec<usize> = (0..scores.len()).map(|i| i * 7 + 1).collect();
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let p_items: Vec<usize> = idx.iter().map(|&j| items[j]).collect();
            let p_scores: Vec<f64> = idx.iter().map(|&j| scores[j]).collect();
            prop_assert_eq!(rank_by_scores(&items, &scores), rank_by_scores(&p_items, &p_scores));
        }

        #[test]
        fn metrics_monotone_in_k(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (ranked, gt) = random_instance(&mut rng);
            for k in 1..25 {
                prop_assert!(recall_at_k(&ranked, &gt, k + 1).unwrap() >= recall_at_k(&ranked, &gt, k).unwrap());
                let n = ndcg_at_k(&ranked, &gt, k).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
            }
        }

        #[test]
        fn ndcg_is_one_iff_ground_truth_leads(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (ranked, gt) = random_instance(&mut rng);
            let k = ranked.len();
            let leads = ranked[..gt.len()].iter().all(|r| gt.contains(r));
            let n = ndcg_at_k(&ranked, &gt, k).unwrap();
            prop_assert_eq!((n - 1.0).abs() < 1e-12, leads);
        }

        #[test]
        fn increasing_transform_keeps_ranking(scores in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
            let items: Vec<usize> = (0..scores.len()).collect();
            let moved: Vec<f64> = scores.iter().map(|s| if *s < 0.0 { s * 8.0 } else { s * 0.5 }).collect();
            prop_assert_eq!(rank_by_scores(&items, &scores), rank_by_scores(&items, &moved));
        }
    }
}
