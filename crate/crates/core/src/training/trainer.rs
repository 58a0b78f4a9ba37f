use std::fmt::Write as _;

use crate::data::{Dataset, Partition, TripletSampler};
use crate::evaluation::{evaluate_with, RankingResult, DEFAULT_KS};
use crate::numerics::ParamStore;
use crate::training::{Adam, LossBreakdown, Model, ModelConfig};
use crate::{rng, Error, Exec, Result};

/// One row of the epoch log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Component means over the epoch's batches.
    pub loss: LossBreakdown,
    pub valid_recall10: f64,
    pub valid_recall20: f64,
    pub valid_ndcg10: f64,
    pub valid_ndcg20: f64,
}

impl EpochLog {
    pub fn tsv_header(modalities: &[String]) -> String {
        let mut h = String::from(
            "epoch\tloss\tbpr\talign\tadapter\tfusion\tl2\tvalid_rec@10\tvalid_rec@20\tvalid_ndcg@10\tvalid_ndcg@20",
        );
        for m in modalities {
            let _ = write!(h, "\tmean_alpha_{m}");
        }
        h
    }

    pub fn tsv_row(&self, num_modalities: usize) -> String {
        let l = &self.loss;
        let mut row = format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch,
            l.total,
            l.bpr,
            l.align,
            l.adapter,
            l.fusion,
            l.l2,
            self.valid_recall10,
            self.valid_recall20,
            self.valid_ndcg10,
            self.valid_ndcg20
        );
        match &l.mean_alpha {
            Some(a) => a.iter().for_each(|v| {
                let _ = write!(row, "\t{v:.6}");
            }),
            None => (0..num_modalities).for_each(|_| row.push_str("\t-")),
        }
        row
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best-validation epoch.
    pub model: Model,
    /// Epoch the returned model comes from; 0 is the initialization.
    pub best_epoch: usize,
    pub best_valid_recall20: Option<f64>,
    pub log: Vec<EpochLog>,
    pub test: RankingResult,
    pub steps: u64,
}

impl TrainOutcome {
    pub fn log_tsv(&self) -> String {
        let names: Vec<String> = self.model.modalities().iter().map(|m| m.name.clone()).collect();
        let mut out = EpochLog::tsv_header(&names);
        out.push('\n');
        for e in &self.log {
            out.push_str(&e.tsv_row(names.len()));
            out.push('\n');
        }
        out
    }
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.total += b.total;
    acc.bpr += b.bpr;
    acc.bpr_sum += b.bpr_sum;
    acc.align += b.align;
    acc.adapter += b.adapter;
    acc.fusion += b.fusion;
    acc.l2 += b.l2;
    if let Some(a) = &b.mean_alpha {
        let sums = acc.mean_alpha.get_or_insert_with(|| vec![0.0; a.len()]);
        sums.iter_mut().zip(a).for_each(|(s, v)| *s += v);
    }
}

fn averaged(mut acc: LossBreakdown, n: usize) -> LossBreakdown {
    let n = n as f64;
    for v in [
        &mut acc.total,
        &mut acc.bpr,
        &mut acc.bpr_sum,
        &mut acc.align,
        &mut acc.adapter,
        &mut acc.fusion,
        &mut acc.l2,
    ] {
        *v /= n;
    }
    if let Some(a) = &mut acc.mean_alpha {
        a.iter_mut().for_each(|v| *v /= n);
    }
    acc
}

/// Trains on the split dataset's training records, selects the epoch with
/// the best valid Recall@20 (earliest on ties) and reports it on test.
///
/// Each epoch runs `⌈train_records / batch_size⌉` Adam steps. A non-finite
/// loss aborts with [`Error::Diverged`] carrying the last finite parameters.
pub fn train(config: &ModelConfig, dataset: &Dataset, exec: Exec) -> Result<TrainOutcome> {
    if dataset.interactions.split().is_none() {
        return Err(Error::Protocol("training requires a split dataset".into()));
    }
    let mut model = Model::new(config, dataset.modalities(), dataset.num_users())?;
    let config = model.config().clone();
    let sampler = TripletSampler::new(&dataset.interactions)?;
    let mut rng = rng::stream(config.seed, "sampling");
    let mut adam = Adam::new(
        &model.params,
        config.lr,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let batches = sampler.num_records().div_ceil(config.batch_size);

    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_valid_recall20: Option<f64> = None;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut acc = LossBreakdown::default();
        for _ in 0..batches {
            let batch = sampler.sample(config.batch_size, &mut rng);
            let diverged = |loss: f64, params: &ParamStore| Error::Diverged {
                epoch,
                loss,
                last_good: Box::new(params.clone()),
            };
            let (breakdown, grads) = match model.loss_and_gradients(dataset, &batch) {
                // Non-finite values reaching a softmax or KL.
                Err(Error::Domain(msg)) => {
                    log::error!("{msg}");
                    return Err(diverged(f64::NAN, &model.params));
                }
                other => other?,
            };
            if !breakdown.total.is_finite() {
                return Err(diverged(breakdown.total, &model.params));
            }
            match adam.step(&mut model.params, &grads) {
                Err(Error::NonFiniteGradient(block)) => {
                    log::error!("non-finite gradient in parameter block `{block}`");
                    return Err(diverged(breakdown.total, &model.params));
                }
                other => other?,
            }
            accumulate(&mut acc, &breakdown);
        }
        let valid = evaluate_with(exec, &model, dataset, Partition::ValidCold, &DEFAULT_KS)?;
        let entry = EpochLog {
            epoch,
            loss: averaged(acc, batches),
            valid_recall10: valid.recall[0],
            valid_recall20: valid.recall[1],
            valid_ndcg10: valid.ndcg[0],
            valid_ndcg20: valid.ndcg[1],
        };
        log::info!(
            "epoch {epoch}: loss {:.6} valid Rec@20 {:.4}",
            entry.loss.total,
            entry.valid_recall20
        );
        if best_valid_recall20.is_none_or(|b| entry.valid_recall20 > b) {
            best_valid_recall20 = Some(entry.valid_recall20);
            best_epoch = epoch;
            best = model.clone();
        }
        log.push(entry);
    }

    let test = evaluate_with(exec, &best, dataset, Partition::TestCold, &DEFAULT_KS)?;
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        best_valid_recall20,
        log,
        test,
        steps: adam.steps(),
    })
}
