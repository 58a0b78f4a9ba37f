//! Model assembly: user table, per-variant item encoder, and the composite
//! training objective.

use std::collections::BTreeMap;

use crate::adapter::{adapter_balance_loss_on, route, AdapterShape, Affine, MoEAdapter};
use crate::data::{Dataset, ModalitySpec, TripletBatch};
use crate::fusion::{alignment_loss_on, fuse_uniform_on, fusion_balance_loss_on, FusionGate};
use crate::numerics::{softplus, Gradients, Matrix, ParamId, ParamStore, Tape, Var};
use crate::training::config::{BprReduction, ModelConfig, Variant};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Adaptation {
    Experts(Vec<MoEAdapter>),
    Dense(Vec<Affine>),
    SharedExperts {
        routers: Vec<Affine>,
        experts: Vec<Affine>,
        top_k: usize,
    },
    Joint(MoEAdapter),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Fusion {
    Gate(FusionGate),
    Uniform,
    /// The joint router already yields one embedding.
    Passthrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    modalities: Vec<ModalitySpec>,
    num_users: usize,
    pub params: ParamStore,
    users: ParamId,
    adaptation: Adaptation,
    fusion: Fusion,
}

/// Tape handles for one encoded item.
#[derive(Debug, Clone)]
pub struct ItemEncoding {
    pub e: Var,
    /// Fusion weights over modalities; `None` for the joint router.
    pub alpha: Option<Var>,
    /// Adapted embeddings entering alignment (one per modality, or the
    /// single joint embedding).
    pub z: Vec<Option<Var>>,
    /// Dense gate per routing stream, `None` where the stream has no gate.
    pub gates: Vec<Option<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbedding {
    pub e: Vec<f64>,
    pub alpha: Option<Vec<f64>>,
}

/// Per-component values of one objective evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// BPR as reduced in the optimized objective (mean by default).
    pub bpr: f64,
    /// Literal sum of per-triplet BPR terms.
    pub bpr_sum: f64,
    /// Sum over unique batch items of the per-item alignment loss.
    pub align: f64,
    pub adapter: f64,
    pub fusion: f64,
    /// Σθ² over every trainable parameter.
    pub l2: f64,
    /// Mean fusion weight per modality over the batch items.
    pub mean_alpha: Option<Vec<f64>>,
}

/// BPR over `(s_ui, s_uj)` pairs: (sum, mean) of `−ln σ(s_ui − s_uj)`.
pub fn bpr_loss(triplet_scores: &[(f64, f64)]) -> (f64, f64) {
    let sum: f64 = triplet_scores.iter().map(|(p, n)| softplus(-(p - n))).sum();
    let mean = if triplet_scores.is_empty() {
        0.0
    } else {
        sum / triplet_scores.len() as f64
    };
    (sum, mean)
}

/// Dot-product relevance score.
pub fn score(e_u: &[f64], e_i: &[f64]) -> Result<f64> {
    crate::numerics::dot(e_u, e_i)
}

impl Model {
    pub fn new(config: &ModelConfig, modalities: &[ModalitySpec], num_users: usize) -> Result<Self> {
        let config = config.resolved()?;
        if modalities.is_empty() {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        let mut rng = rng::stream(config.seed, "init");
        let std = config.init_std;
        let bias = config.expert_bias;
        let d = config.d;
        let mut params = ParamStore::new();
        let users = params.add("users", Matrix::gaussian(num_users, d, std, &mut rng));

        let adapter_shape = |in_dim| AdapterShape {
            in_dim,
            out_dim: d,
            num_experts: config.num_experts,
            top_k: config.top_k,
            bias,
        };
        let adaptation = match config.variant {
            Variant::Full | Variant::NoAlign | Variant::NoMmf => Adaptation::Experts(
                modalities
                    .iter()
                    .map(|m| MoEAdapter::init(&mut params, &m.name, adapter_shape(m.dim), std, &mut rng))
                    .collect::<Result<_>>()?,
            ),
            Variant::NoMoe => Adaptation::Dense(
                modalities
                    .iter()
                    .map(|m| Affine::init(&mut params, &format!("{}.dense", m.name), m.dim, d, bias, std, &mut rng))
                    .collect(),
            ),
            Variant::ModSpecificRouter => {
                let in_dim = modalities[0].dim;
                if let Some(m) = modalities.iter().find(|m| m.dim != in_dim) {
                    return Err(Error::Config(format!(
                        "shared experts need equal feature dims, `{}` has {} vs {in_dim}",
                        m.name, m.dim
                    )));
                }
                let routers = modalities
                    .iter()
                    .map(|m| {
                        Affine::init(
                            &mut params,
                            &format!("{}.router", m.name),
                            in_dim,
                            config.num_experts,
                            bias,
                            std,
                            &mut rng,
                        )
                    })
                    .collect();
                let experts = (0..config.num_experts)
                    .map(|k| {
                        Affine::init(
                            &mut params,
                            &format!("shared.expert{k}"),
                            in_dim,
                            d,
                            bias,
                            std,
                            &mut rng,
                        )
                    })
                    .collect();
                Adaptation::SharedExperts {
                    routers,
                    experts,
                    top_k: config.top_k,
                }
            }
            Variant::JointRouter => {
                let in_dim = modalities.iter().map(|m| m.dim).sum();
                Adaptation::Joint(MoEAdapter::init(
                    &mut params,
                    "joint",
                    adapter_shape(in_dim),
                    std,
                    &mut rng,
                )?)
            }
        };
        let names: Vec<String> = modalities.iter().map(|m| m.name.clone()).collect();
        let fusion = match config.variant {
            Variant::NoMmf => Fusion::Uniform,
            Variant::JointRouter => Fusion::Passthrough,
            _ => Fusion::Gate(FusionGate::init(&mut params, &names, d, bias, std, &mut rng)),
        };
        Ok(Model {
            config,
            modalities: modalities.to_vec(),
            num_users,
            params,
            users,
            adaptation,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn modalities(&self) -> &[ModalitySpec] {
        &self.modalities
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn users_param(&self) -> ParamId {
        self.users
    }

    /// Whether the fused item embedding carries per-modality weights.
    pub fn has_alpha(&self) -> bool {
        !matches!(self.fusion, Fusion::Passthrough)
    }

    pub fn user_embedding(&self, user: usize) -> &[f64] {
        self.params.get(self.users).row(user)
    }

    /// Encodes one item from its per-modality features.
    pub fn encode_item(&self, tape: &mut Tape, features: &[Option<&[f64]>]) -> Result<ItemEncoding> {
        if features.len() != self.modalities.len() {
            return Err(Error::Shape(format!(
                "{} feature slots for {} modalities",
                features.len(),
                self.modalities.len()
            )));
        }
        if features.iter().all(Option::is_none) {
            return Err(Error::Data("item has no present modality".into()));
        }
        for (f, spec) in features.iter().zip(&self.modalities) {
            if let Some(f) = f {
                if f.len() != spec.dim {
                    return Err(Error::Shape(format!(
                        "`{}` feature of length {}, expected {}",
                        spec.name,
                        f.len(),
                        spec.dim
                    )));
                }
            }
        }
        let inputs: Vec<Option<Var>> = features.iter().map(|f| f.map(|f| tape.constant(f.to_vec()))).collect();

        let (z, gates) = match &self.adaptation {
            Adaptation::Experts(adapters) => {
                let mut z = Vec::new();
                let mut gates = Vec::new();
                for (a, h) in adapters.iter().zip(&inputs) {
                    match h {
                        Some(h) => {
                            let r = a.forward(tape, *h)?;
                            z.push(Some(r.z));
                            gates.push(Some(r.dense_gate));
                        }
                        None => {
                            z.push(None);
                            gates.push(None);
                        }
                    }
                }
                (z, gates)
            }
            Adaptation::Dense(maps) => {
                let z = maps
                    .iter()
                    .zip(&inputs)
                    .map(|(m, h)| h.map(|h| m.apply(tape, h)).transpose())
                    .collect::<Result<Vec<_>>>()?;
                let gates = vec![None; z.len()];
                (z, gates)
            }
            Adaptation::SharedExperts {
                routers,
                experts,
                top_k,
            } => {
                let mut z = Vec::new();
                let mut gates = Vec::new();
                for (router, h) in routers.iter().zip(&inputs) {
                    match h {
                        Some(h) => {
                            let r = route(tape, router, experts, *top_k, *h)?;
                            z.push(Some(r.z));
                            gates.push(Some(r.dense_gate));
                        }
                        None => {
                            z.push(None);
                            gates.push(None);
                        }
                    }
                }
                (z, gates)
            }
            Adaptation::Joint(adapter) => {
                let parts: Vec<Var> = inputs
                    .iter()
                    .zip(&self.modalities)
                    .map(|(h, spec)| h.unwrap_or_else(|| tape.constant(vec![0.0; spec.dim])))
                    .collect();
                let joined = tape.concat(&parts);
                let r = adapter.forward(tape, joined)?;
                (vec![Some(r.z)], vec![Some(r.dense_gate)])
            }
        };

        let (e, alpha) = match &self.fusion {
            Fusion::Gate(gate) => {
                let f = gate.forward(tape, &z)?;
                (f.e, Some(f.alpha))
            }
            Fusion::Uniform => {
                let f = fuse_uniform_on(tape, &z)?;
                (f.e, Some(f.alpha))
            }
            Fusion::Passthrough => (z[0].expect("joint encoder yields one embedding"), None),
        };
        Ok(ItemEncoding { e, alpha, z, gates })
    }

    /// Item embedding and fusion weights under `self.params`.
    pub fn embed_item(&self, features: &[Option<&[f64]>]) -> Result<ItemEmbedding> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_item(&mut tape, features)?;
        Ok(ItemEmbedding {
            e: tape.value(enc.e).to_vec(),
            alpha: enc.alpha.map(|a| tape.value(a).to_vec()),
        })
    }

    /// Records the full objective for `batch` on `tape`. The tape's parameter
    /// store must share this model's layout.
    pub fn objective(&self, tape: &mut Tape, dataset: &Dataset, batch: &TripletBatch) -> Result<(Var, LossBreakdown)> {
        if batch.is_empty() {
            return Err(Error::Parameter("objective over an empty batch".into()));
        }
        if dataset.modalities() != self.modalities.as_slice() {
            return Err(Error::Shape("dataset modalities differ from the model's".into()));
        }
        let items = batch.items();
        let mut encoded: BTreeMap<usize, ItemEncoding> = BTreeMap::new();
        for &item in &items {
            let enc = self
                .encode_item(tape, &dataset.item_features(item))
                .map_err(|e| match e {
                    Error::Data(_) => Error::Data(format!(
                        "item `{}` in batch has no present modality",
                        dataset.interactions.items().name(item)
                    )),
                    other => other,
                })?;
            encoded.insert(item, enc);
        }
        let mut user_rows: BTreeMap<usize, Var> = BTreeMap::new();
        let b = batch.len() as f64;
        let bpr_weight = match self.config.bpr_reduction {
            BprReduction::Mean => 1.0 / b,
            BprReduction::Sum => 1.0,
        };
        let mut bpr_terms = Vec::with_capacity(batch.len());
        for t in &batch.triplets {
            let eu = match user_rows.get(&t.user) {
                Some(v) => *v,
                None => {
                    let v = tape.param_row(self.users, t.user)?;
                    user_rows.insert(t.user, v);
                    v
                }
            };
            let s_pos = tape.dot(eu, encoded[&t.positive].e)?;
            let s_neg = tape.dot(eu, encoded[&t.negative].e)?;
            let diff = tape.sub(s_pos, s_neg)?;
            bpr_terms.push((bpr_weight, tape.neg_log_sigmoid(diff)));
        }
        let bpr = tape.lin_comb(&bpr_terms)?;

        let mut align_terms = Vec::with_capacity(items.len());
        for enc in encoded.values() {
            align_terms.push(alignment_loss_on(tape, enc.e, &enc.z)?);
        }
        let align = tape.sum(&align_terms)?;

        let streams = encoded.values().next().map_or(0, |e| e.gates.len());
        let gate_batches: Vec<Vec<Var>> = (0..streams)
            .map(|s| encoded.values().filter_map(|e| e.gates[s]).collect())
            .collect();
        let adapter = adapter_balance_loss_on(tape, &gate_batches)?;

        let alphas: Vec<Var> = encoded.values().filter_map(|e| e.alpha).collect();
        let fusion = if alphas.is_empty() {
            None
        } else {
            Some(fusion_balance_loss_on(tape, &alphas)?)
        };
        let mean_alpha = if alphas.is_empty() {
            None
        } else {
            let m = tape.mean(&alphas)?;
            Some(tape.value(m).to_vec())
        };

        let norms: Vec<Var> = self.params_ids().map(|id| tape.param_sq_norm(id)).collect();
        let l2 = tape.sum(&norms)?;

        let c = &self.config;
        let mut terms = vec![(1.0, bpr), (c.lambda1, align), (c.lambda4, l2)];
        if let Some(a) = adapter {
            terms.push((c.lambda2, a));
        }
        if let Some(f) = fusion {
            terms.push((c.lambda3, f));
        }
        let total = tape.lin_comb(&terms)?;

        let bpr_value = tape.scalar(bpr);
        let breakdown = LossBreakdown {
            total: tape.scalar(total),
            bpr: bpr_value,
            bpr_sum: bpr_value / bpr_weight,
            align: tape.scalar(align),
            adapter: adapter.map_or(0.0, |a| tape.scalar(a)),
            fusion: fusion.map_or(0.0, |f| tape.scalar(f)),
            l2: tape.scalar(l2),
            mean_alpha,
        };
        Ok((total, breakdown))
    }

    fn params_ids(&self) -> impl Iterator<Item = ParamId> {
        self.params.ids()
    }

    /// Objective value under an arbitrary parameter store of this layout.
    pub fn loss_with(&self, params: &ParamStore, dataset: &Dataset, batch: &TripletBatch) -> Result<LossBreakdown> {
        let mut tape = Tape::new(params);
        self.objective(&mut tape, dataset, batch).map(|(_, b)| b)
    }

    pub fn loss_and_gradients_with(
        &self,
        params: &ParamStore,
        dataset: &Dataset,
        batch: &TripletBatch,
    ) -> Result<(LossBreakdown, Gradients)> {
        let mut tape = Tape::new(params);
        let (total, breakdown) = self.objective(&mut tape, dataset, batch)?;
        let grads = tape.backward(total)?;
        Ok((breakdown, grads))
    }

    pub fn total_loss(&self, dataset: &Dataset, batch: &TripletBatch) -> Result<LossBreakdown> {
        self.loss_with(&self.params, dataset, batch)
    }

    pub fn loss_and_gradients(&self, dataset: &Dataset, batch: &TripletBatch) -> Result<(LossBreakdown, Gradients)> {
        self.loss_and_gradients_with(&self.params, dataset, batch)
    }
}
