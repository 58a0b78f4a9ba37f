//! Adaptive modality fusion.
//!
//! A gate over the concatenated adapted embeddings yields one weight per
//! modality, `α = softmax(G(z_1 ‖ … ‖ z_M))`, and the item embedding is
//! `e = Σ_m α_m z_m`. Absent modalities enter the concatenation as zero
//! vectors and are excluded from the softmax, so their weight is exactly 0.

use rand::Rng;

use crate::adapter::Affine;
use crate::numerics::{kl_to_uniform, mean_of, ParamStore, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionGate {
    pub gate: Affine,
    pub modalities: Vec<String>,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FusedVars {
    pub e: Var,
    pub alpha: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedItem {
    pub e: Vec<f64>,
    pub alpha: Vec<f64>,
    pub present: Vec<bool>,
}

fn present_indices<T>(z: &[Option<T>]) -> Result<Vec<usize>> {
    let present: Vec<usize> = (0..z.len()).filter(|&m| z[m].is_some()).collect();
    if present.is_empty() {
        return Err(Error::Domain("fusion with every modality absent".into()));
    }
    Ok(present)
}

fn constants(tape: &mut Tape, z: &[Option<Vec<f64>>]) -> Vec<Option<Var>> {
    z.iter().map(|v| v.as_ref().map(|v| tape.constant(v.clone()))).collect()
}

impl FusionGate {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamStore,
        modalities: &[String],
        dim: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let m = modalities.len();
        FusionGate {
            gate: Affine::init(params, "fusion.gate", m * dim, m, bias, std, rng),
            modalities: modalities.to_vec(),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, z: &[Option<Var>]) -> Result<FusedVars> {
        if z.len() != self.modalities.len() {
            return Err(Error::Shape(format!(
                "fusion gate over {} modalities given {}",
                self.modalities.len(),
                z.len()
            )));
        }
        let present = present_indices(z)?;
        let mut parts = Vec::with_capacity(z.len());
        for v in z {
            let part = match v {
                Some(v) => {
                    if tape.value(*v).len() != self.dim {
                        return Err(Error::Shape(format!(
                            "modality embedding of length {}, expected {}",
                            tape.value(*v).len(),
                            self.dim
                        )));
                    }
                    *v
                }
                None => tape.constant(vec![0.0; self.dim]),
            };
            parts.push(part);
        }
        let joined = tape.concat(&parts);
        let logits = self.gate.apply(tape, joined)?;
        let alpha = tape.masked_softmax(logits, &present)?;
        let e = tape.mix(alpha, z)?;
        Ok(FusedVars { e, alpha })
    }

    pub fn fuse(&self, params: &ParamStore, z: &[Option<Vec<f64>>]) -> Result<FusedItem> {
        let mut tape = Tape::new(params);
        let vars = constants(&mut tape, z);
        let out = self.forward(&mut tape, &vars)?;
        Ok(FusedItem {
            e: tape.value(out.e).to_vec(),
            alpha: tape.value(out.alpha).to_vec(),
            present: z.iter().map(Option::is_some).collect(),
        })
    }
}

/// Plain average over the present modalities.
pub fn fuse_uniform_on(tape: &mut Tape, z: &[Option<Var>]) -> Result<FusedVars> {
    let present = present_indices(z)?;
    let w = 1.0 / present.len() as f64;
    let weights = z.iter().map(|v| if v.is_some() { w } else { 0.0 }).collect();
    let alpha = tape.constant(weights);
    let e = tape.mix(alpha, z)?;
    Ok(FusedVars { e, alpha })
}

pub fn fuse_uniform(z: &[Option<Vec<f64>>]) -> Result<FusedItem> {
    let params = ParamStore::new();
    let mut tape = Tape::new(&params);
    let vars = constants(&mut tape, z);
    let out = fuse_uniform_on(&mut tape, &vars)?;
    Ok(FusedItem {
        e: tape.value(out.e).to_vec(),
        alpha: tape.value(out.alpha).to_vec(),
        present: z.iter().map(Option::is_some).collect(),
    })
}

/// `KL(mean_batch(α) ‖ uniform)`.
pub fn fusion_balance_loss(batch_alphas: &[Vec<f64>]) -> Result<f64> {
    if batch_alphas.is_empty() {
        return Err(Error::Parameter("fusion balance over an empty batch".into()));
    }
    kl_to_uniform(&mean_of(batch_alphas)?)
}

pub fn fusion_balance_loss_on(tape: &mut Tape, alphas: &[Var]) -> Result<Var> {
    let mean = tape.mean(alphas)?;
    Ok(tape.kl_to_uniform(mean))
}

/// `Σ_{m present} ‖e − z_m‖²`.
pub fn alignment_loss(e: &[f64], z: &[Option<Vec<f64>>]) -> Result<f64> {
    let mut total = 0.0;
    for v in z.iter().flatten() {
        if v.len() != e.len() {
            return Err(Error::Shape(format!(
                "alignment of length {} against {}",
                e.len(),
                v.len()
            )));
        }
        total += e.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total)
}

pub fn alignment_loss_on(tape: &mut Tape, e: Var, z: &[Option<Var>]) -> Result<Var> {
    let mut terms = Vec::new();
    for v in z.iter().flatten() {
        let diff = tape.sub(e, *v)?;
        terms.push(tape.sq_norm(diff));
    }
    if terms.is_empty() {
        return Err(Error::Domain("alignment with every modality absent".into()));
    }
    tape.sum(&terms)
}
