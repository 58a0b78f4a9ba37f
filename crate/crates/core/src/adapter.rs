//! Modality-specific mixture-of-experts adapters.
//!
//! An adapter maps a raw modality feature `h` to an adapted embedding
//! `z = Σ_{k∈T} ĝ_k · (W_k h + b_k)`, where the gate is a softmax over an
//! affine map of the same `h`, `T` holds the `top_k` largest gate logits, and
//! `ĝ` is the softmax restricted to `T`. The dense gate `g` (softmax over all
//! experts) feeds the load-balancing loss.
//!
//! Three routing layouts share [`route`]:
//!
//! - [`MoEAdapter`] per modality: dedicated gate and experts.
//! - joint router: one [`MoEAdapter`] over the concatenation of all
//!   modalities ([`adapt_joint_router`]).
//! - shared experts: per-modality gates over one common expert set
//!   ([`adapt_shared_experts`]).

use rand::Rng;

use crate::numerics::{kl_to_uniform, mean_of, top_k_indices, Matrix, ParamId, ParamStore, Tape, Var};
use crate::{Error, Result};

/// `W x + b` with parameters in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    /// Gaussian(0, `std`) weights and zero bias.
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.w"), Matrix::gaussian(out_dim, in_dim, std, rng));
        let bias = bias.then(|| params.add(format!("{name}.b"), Matrix::zeros(out_dim, 1)));
        Affine {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.value(x).len() != self.in_dim {
            return Err(Error::Shape(format!(
                "affine map expects input of length {}, got {}",
                self.in_dim,
                tape.value(x).len()
            )));
        }
        tape.affine(self.weight, self.bias, x)
    }
}

/// Tape handles produced by one routed forward pass.
#[derive(Debug, Clone)]
pub struct RoutedVars {
    pub z: Var,
    pub dense_gate: Var,
    pub sparse_gate: Var,
    pub selected: Vec<usize>,
}

/// Values of one routed forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterOutput {
    pub z: Vec<f64>,
    pub dense_gate: Vec<f64>,
    pub selected: Vec<usize>,
    pub sparse_gate: Vec<f64>,
}

impl AdapterOutput {
    fn read(tape: &Tape, vars: RoutedVars) -> Self {
        AdapterOutput {
            z: tape.value(vars.z).to_vec(),
            dense_gate: tape.value(vars.dense_gate).to_vec(),
            sparse_gate: tape.value(vars.sparse_gate).to_vec(),
            selected: vars.selected,
        }
    }
}

/// Sparse top-k routing of `h` through `experts` under `gate`. Only the
/// selected experts are evaluated; the selection is constant under
/// differentiation.
pub fn route(tape: &mut Tape, gate: &Affine, experts: &[Affine], top_k: usize, h: Var) -> Result<RoutedVars> {
    if gate.out_dim != experts.len() {
        return Err(Error::Shape(format!(
            "gate has {} outputs for {} experts",
            gate.out_dim,
            experts.len()
        )));
    }
    if top_k < 1 || top_k > experts.len() {
        return Err(Error::Parameter(format!(
            "top_k = {top_k} with {} experts",
            experts.len()
        )));
    }
    let logits = gate.apply(tape, h)?;
    let dense_gate = tape.softmax(logits)?;
    let selected = top_k_indices(tape.value(logits), top_k);
    let sparse_gate = tape.masked_softmax(logits, &selected)?;
    let mut outputs: Vec<Option<Var>> = vec![None; experts.len()];
    for &k in &selected {
        outputs[k] = Some(experts[k].apply(tape, h)?);
    }
    let z = tape.mix(sparse_gate, &outputs)?;
    Ok(RoutedVars {
        z,
        dense_gate,
        sparse_gate,
        selected,
    })
}

/// Dedicated gate and `K` affine experts for one input stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoEAdapter {
    pub name: String,
    pub top_k: usize,
    pub gate: Affine,
    pub experts: Vec<Affine>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub bias: bool,
}

impl MoEAdapter {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamStore,
        name: &str,
        shape: AdapterShape,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if shape.top_k < 1 || shape.top_k > shape.num_experts {
            return Err(Error::Parameter(format!(
                "top_k = {} must lie in 1..={}",
                shape.top_k, shape.num_experts
            )));
        }
        let gate = Affine::init(
            params,
            &format!("{name}.gate"),
            shape.in_dim,
            shape.num_experts,
            shape.bias,
            std,
            rng,
        );
        let experts = (0..shape.num_experts)
            .map(|k| {
                Affine::init(
                    params,
                    &format!("{name}.expert{k}"),
                    shape.in_dim,
                    shape.out_dim,
                    shape.bias,
                    std,
                    rng,
                )
            })
            .collect();
        Ok(MoEAdapter {
            name: name.to_owned(),
            top_k: shape.top_k,
            gate,
            experts,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn in_dim(&self) -> usize {
        self.gate.in_dim
    }

    pub fn forward(&self, tape: &mut Tape, h: Var) -> Result<RoutedVars> {
        route(tape, &self.gate, &self.experts, self.top_k, h)
    }

    /// Adapts one feature vector.
    pub fn adapt(&self, params: &ParamStore, h: &[f64]) -> Result<AdapterOutput> {
        let mut tape = Tape::new(params);
        let h = tape.constant(h.to_vec());
        let vars = self.forward(&mut tape, h)?;
        Ok(AdapterOutput::read(&tape, vars))
    }
}

/// Joint router: `shared` consumes the concatenation of every modality.
pub fn adapt_joint_router(shared: &MoEAdapter, params: &ParamStore, h_all: &[f64]) -> Result<AdapterOutput> {
    shared.adapt(params, h_all)
}

/// Per-modality `router` over a common expert set.
pub fn adapt_shared_experts(
    router: &Affine,
    shared_experts: &[Affine],
    top_k: usize,
    params: &ParamStore,
    h: &[f64],
) -> Result<AdapterOutput> {
    let mut tape = Tape::new(params);
    let h = tape.constant(h.to_vec());
    let vars = route(&mut tape, router, shared_experts, top_k, h)?;
    Ok(AdapterOutput::read(&tape, vars))
}

/// `Σ_m KL(mean_batch(g_m) ‖ uniform)` over per-modality batches of dense
/// gate distributions.
pub fn adapter_balance_loss(batch_dense_gates: &[Vec<Vec<f64>>]) -> Result<f64> {
    let mut total = 0.0;
    for (m, batch) in batch_dense_gates.iter().enumerate() {
        if batch.is_empty() {
            return Err(Error::Parameter(format!("empty gate batch for stream {m}")));
        }
        total += kl_to_uniform(&mean_of(batch)?)?;
    }
    Ok(total)
}

/// Tape version of [`adapter_balance_loss`]. Streams with no gates in this
/// batch (e.g. a modality absent from every item) contribute nothing.
pub fn adapter_balance_loss_on(tape: &mut Tape, gates: &[Vec<Var>]) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for stream in gates.iter().filter(|g| !g.is_empty()) {
        let mean = tape.mean(stream)?;
        terms.push(tape.kl_to_uniform(mean));
    }
    if terms.is_empty() {
        return Ok(None);
    }
    tape.sum(&terms).map(Some)
}
