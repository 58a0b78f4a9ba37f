//! Reverse-mode gradient tape over the fixed set of primitives the model
//! needs.
//!
//! Parameters live in a [`ParamStore`] that the tape borrows immutably.
//! Each primitive appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in strict reverse order and accumulates parameter
//! gradients additively into a [`Gradients`] buffer shaped like the store.

use super::{kl_to_uniform_unchecked, masked_softmax, sigmoid, softplus, Matrix, LOG_CLAMP};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Matrix,
}

/// Ordered, named collection of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a block. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter block `{name}`");
        self.blocks.push(ParamBlock { name, value });
        ParamId(self.blocks.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.blocks[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.blocks[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.blocks[id.0].name
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    /// Σθ² over every block.
    pub fn sq_norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.value.sq_norm()).sum()
    }
}

/// Gradient buffer shaped like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    blocks: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Gradients {
            blocks: params
                .blocks
                .iter()
                .map(|b| Matrix::zeros(b.value.rows(), b.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.blocks[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.blocks[id.0]
    }

    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Matrix] {
        &mut self.blocks
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Row {
        param: ParamId,
        row: usize,
    },
    Affine {
        weight: ParamId,
        bias: Option<ParamId>,
        input: Var,
    },
    Concat(Vec<Var>),
    MaskedSoftmax {
        input: Var,
        selected: Vec<usize>,
    },
    Mix {
        weights: Var,
        inputs: Vec<Option<Var>>,
    },
    Dot(Var, Var),
    LinComb(Vec<(f64, Var)>),
    SqNorm(Var),
    Mean(Vec<Var>),
    KlUniform(Var),
    NegLogSigmoid(Var),
    ParamSqNorm(ParamId),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    /// One row of a parameter matrix (embedding lookup).
    pub fn param_row(&mut self, param: ParamId, row: usize) -> Result<Var> {
        let m = self.params.get(param);
        if row >= m.rows() {
            return Err(Error::Shape(format!(
                "row {row} out of range for `{}` with {} rows",
                self.params.name(param),
                m.rows()
            )));
        }
        let value = m.row(row).to_vec();
        Ok(self.push(value, Op::Row { param, row }))
    }

    /// `W x + b` with `W` of shape (out, in) and `b` of shape (out, 1).
    pub fn affine(&mut self, weight: ParamId, bias: Option<ParamId>, input: Var) -> Result<Var> {
        let w = self.params.get(weight);
        let mut y = w.matvec(self.value(input))?;
        if let Some(b) = bias {
            let b = self.params.get(b);
            if b.len() != y.len() {
                return Err(Error::Shape(format!(
                    "bias of length {} for affine output of length {}",
                    b.len(),
                    y.len()
                )));
            }
            y.iter_mut().zip(b.as_slice()).for_each(|(v, bb)| *v += bb);
        }
        Ok(self.push(y, Op::Affine { weight, bias, input }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let value = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let all: Vec<usize> = (0..self.value(input).len()).collect();
        self.masked_softmax(input, &all)
    }

    /// Softmax over `selected` positions, exact zeros elsewhere. The selection
    /// is a constant for differentiation.
    pub fn masked_softmax(&mut self, input: Var, selected: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if selected.is_empty() {
            return Err(Error::Dimension("softmax over an empty selection".into()));
        }
        if let Some(&bad) = selected.iter().find(|&&i| i >= x.len()) {
            return Err(Error::Shape(format!(
                "selected index {bad} out of range for length {}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("softmax input contains a non-finite value".into()));
        }
        let value = masked_softmax(x, selected);
        Ok(self.push(
            value,
            Op::MaskedSoftmax {
                input,
                selected: selected.to_vec(),
            },
        ))
    }

    /// `Σ_k weights[k] · inputs[k]`; `None` inputs must carry zero weight.
    pub fn mix(&mut self, weights: Var, inputs: &[Option<Var>]) -> Result<Var> {
        let w = self.value(weights);
        if w.len() != inputs.len() {
            return Err(Error::Shape(format!(
                "{} mixture weights for {} inputs",
                w.len(),
                inputs.len()
            )));
        }
        let mut out: Option<Vec<f64>> = None;
        for (k, input) in inputs.iter().enumerate() {
            match input {
                Some(x) => {
                    let x = self.value(*x);
                    let acc = out.get_or_insert_with(|| vec![0.0; x.len()]);
                    if acc.len() != x.len() {
                        return Err(Error::Shape(format!(
                            "mixture inputs of lengths {} and {}",
                            acc.len(),
                            x.len()
                        )));
                    }
                    acc.iter_mut().zip(x).for_each(|(a, v)| *a += w[k] * v);
                }
                None if w[k] != 0.0 => {
                    return Err(Error::Domain(format!("mixture weight {} on a missing input {k}", w[k])));
                }
                None => {}
            }
        }
        let value = out.ok_or_else(|| Error::Domain("mixture with no inputs".into()))?;
        Ok(self.push(
            value,
            Op::Mix {
                weights,
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = super::dot(self.value(a), self.value(b))?;
        Ok(self.push(vec![v], Op::Dot(a, b)))
    }

    /// `Σ c_i · x_i` over equal-length nodes.
    pub fn lin_comb(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let (_, first) = terms
            .first()
            .ok_or_else(|| Error::Dimension("empty linear combination".into()))?;
        let mut acc = vec![0.0; self.value(*first).len()];
        for (c, x) in terms {
            let x = self.value(*x);
            if x.len() != acc.len() {
                return Err(Error::Shape(format!(
                    "linear combination of lengths {} and {}",
                    acc.len(),
                    x.len()
                )));
            }
            acc.iter_mut().zip(x).for_each(|(a, v)| *a += c * v);
        }
        Ok(self.push(acc, Op::LinComb(terms.to_vec())))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lin_comb(&[(1.0, a), (-1.0, b)])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let terms: Vec<(f64, Var)> = xs.iter().map(|x| (1.0, *x)).collect();
        self.lin_comb(&terms)
    }

    pub fn sq_norm(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x * x).sum();
        self.push(vec![v], Op::SqNorm(a))
    }

    /// Elementwise mean over a batch of equal-length nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Parameter("mean over an empty batch".into()));
        }
        let values: Vec<Vec<f64>> = xs.iter().map(|x| self.value(*x).to_vec()).collect();
        let value = super::mean_of(&values)?;
        Ok(self.push(value, Op::Mean(xs.to_vec())))
    }

    /// `KL(p ‖ uniform)`, log argument clamped at [`LOG_CLAMP`].
    pub fn kl_to_uniform(&mut self, p: Var) -> Var {
        let v = kl_to_uniform_unchecked(self.value(p));
        self.push(vec![v], Op::KlUniform(p))
    }

    /// Elementwise `-ln σ(x) = ln(1 + e^{-x})`.
    pub fn neg_log_sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| softplus(-v)).collect();
        self.push(value, Op::NegLogSigmoid(x))
    }

    pub fn param_sq_norm(&mut self, param: ParamId) -> Var {
        let v = self.params.get(param).sq_norm();
        self.push(vec![v], Op::ParamSqNorm(param))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward from a node of length {}, expected a scalar",
                self.value(loss).len()
            )));
        }
        let mut grads = Gradients::zeros_like(self.params);
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        fn accumulate(adj: &mut [Option<Vec<f64>>], target: Var, len: usize, f: impl Fn(usize) -> f64) {
            let slot = adj[target.0].get_or_insert_with(|| vec![0.0; len]);
            slot.iter_mut().enumerate().for_each(|(i, a)| *a += f(i));
        }

        for idx in (0..=loss.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Row { param, row } => {
                    let g = grads.get_mut(*param).row_mut(*row);
                    g.iter_mut().zip(&dy).for_each(|(a, d)| *a += d);
                }
                Op::Affine { weight, bias, input } => {
                    let x = self.value(*input);
                    let w = self.params.get(*weight);
                    let gw = grads.get_mut(*weight);
                    for (r, d) in dy.iter().enumerate() {
                        if *d != 0.0 {
                            gw.row_mut(r).iter_mut().zip(x).for_each(|(a, xv)| *a += d * xv);
                        }
                    }
                    if let Some(b) = bias {
                        let gb = grads.get_mut(*b).as_mut_slice();
                        gb.iter_mut().zip(&dy).for_each(|(a, d)| *a += d);
                    }
                    accumulate(&mut adj, *input, x.len(), |c| {
                        dy.iter().enumerate().map(|(r, d)| d * w.get(r, c)).sum()
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        accumulate(&mut adj, *p, len, |i| dy[offset + i]);
                        offset += len;
                    }
                }
                Op::MaskedSoftmax { input, selected } => {
                    let y = &node.value;
                    let inner: f64 = selected.iter().map(|&i| y[i] * dy[i]).sum();
                    let len = y.len();
                    let mut dx = vec![0.0; len];
                    for &i in selected {
                        dx[i] = y[i] * (dy[i] - inner);
                    }
                    accumulate(&mut adj, *input, len, |i| dx[i]);
                }
                Op::Mix { weights, inputs } => {
                    let w = self.value(*weights).to_vec();
                    let dw: Vec<f64> = inputs
                        .iter()
                        .map(|x| match x {
                            Some(x) => super::dot_unchecked(self.value(*x), &dy),
                            None => 0.0,
                        })
                        .collect();
                    accumulate(&mut adj, *weights, w.len(), |k| dw[k]);
                    for (k, x) in inputs.iter().enumerate() {
                        if let Some(x) = x {
                            accumulate(&mut adj, *x, dy.len(), |i| w[k] * dy[i]);
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let d = dy[0];
                    accumulate(&mut adj, *a, va.len(), |i| d * vb[i]);
                    accumulate(&mut adj, *b, vb.len(), |i| d * va[i]);
                }
                Op::LinComb(terms) => {
                    for (c, x) in terms {
                        accumulate(&mut adj, *x, dy.len(), |i| c * dy[i]);
                    }
                }
                Op::Mean(xs) => {
                    let c = 1.0 / xs.len() as f64;
                    for x in xs {
                        accumulate(&mut adj, *x, dy.len(), |i| c * dy[i]);
                    }
                }
                Op::SqNorm(a) => {
                    let va = self.value(*a);
                    let d = dy[0];
                    accumulate(&mut adj, *a, va.len(), |i| 2.0 * d * va[i]);
                }
                Op::KlUniform(p) => {
                    let vp = self.value(*p);
                    let n = vp.len() as f64;
                    let d = dy[0];
                    accumulate(&mut adj, *p, vp.len(), |i| {
                        let pi = vp[i];
                        if pi > LOG_CLAMP {
                            d * ((pi * n).ln() + 1.0)
                        } else {
                            d * (LOG_CLAMP * n).ln()
                        }
                    });
                }
                Op::NegLogSigmoid(x) => {
                    let vx = self.value(*x);
                    accumulate(&mut adj, *x, vx.len(), |i| -dy[i] * sigmoid(-vx[i]));
                }
                Op::ParamSqNorm(param) => {
                    let d = dy[0];
                    let value = self.params.get(*param).as_slice();
                    let g = grads.get_mut(*param).as_mut_slice();
                    g.iter_mut().zip(value).for_each(|(a, v)| *a += 2.0 * d * v);
                }
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::gradcheck::finite_difference_check;

    fn store_with(blocks: &[(&str, Matrix)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = blocks.iter().map(|(n, m)| s.add(*n, m.clone())).collect();
        (s, ids)
    }

    #[test]
    fn bilinear_gradient() {
        let (store, ids) = store_with(&[
            ("p", Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap()),
            ("q", Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap()),
            ("unused", Matrix::from_vec(2, 2, vec![5.0; 4]).unwrap()),
        ]);
        let mut tape = Tape::new(&store);
        let p = tape.param_row(ids[0], 0).unwrap();
        let q = tape.param_row(ids[1], 0).unwrap();
        let loss = tape.dot(p, q).unwrap();
        assert_eq!(tape.scalar(loss), 11.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ids[0]).as_slice(), &[3.0, 4.0]);
        assert_eq!(g.get(ids[1]).as_slice(), &[1.0, 2.0]);
        assert!(g.get(ids[2]).as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reused_parameter_accumulates() {
        let (store, ids) = store_with(&[("p", Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap())]);
        let mut tape = Tape::new(&store);
        let a = tape.param_row(ids[0], 0).unwrap();
        let b = tape.param_row(ids[0], 0).unwrap();
        let loss = tape.dot(a, b).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ids[0]).as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_from_vector_is_usage_error() {
        let (store, ids) = store_with(&[("p", Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap())]);
        let mut tape = Tape::new(&store);
        let a = tape.param_row(ids[0], 0).unwrap();
        assert!(matches!(tape.backward(a), Err(Error::Usage(_))));
    }

    #[test]
    fn mix_rejects_weight_on_missing_input() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let w = tape.constant(vec![0.5, 0.5]);
        let x = tape.constant(vec![1.0]);
        assert!(tape.mix(w, &[Some(x), None]).is_err());
        let w = tape.constant(vec![1.0, 0.0]);
        let y = tape.mix(w, &[Some(x), None]).unwrap();
        assert_eq!(tape.value(y), &[1.0]);
    }

    /// Softmax → KL composite on a random 8-dim input, through an affine map
    /// so the input is a parameter.
    fn softmax_kl_loss(store: &ParamStore, w: ParamId, b: ParamId, x: &[f64]) -> (f64, Gradients) {
        let mut tape = Tape::new(store);
        let x = tape.constant(x.to_vec());
        let logits = tape.affine(w, Some(b), x).unwrap();
        let p = tape.softmax(logits).unwrap();
        let sel = tape.masked_softmax(logits, &[1, 4, 6]).unwrap();
        let kl = tape.kl_to_uniform(p);
        let sq = tape.sq_norm(sel);
        let nls = tape.neg_log_sigmoid(logits);
        let nls_sum = tape.dot(nls, p).unwrap();
        let loss = tape.lin_comb(&[(1.0, kl), (0.3, sq), (0.2, nls_sum)]).unwrap();
        let g = tape.backward(loss).unwrap();
        (tape.scalar(loss), g)
    }

    #[test]
    fn softmax_kl_composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::gaussian(8, 8, 0.7, &mut rng));
        let b = store.add("b", Matrix::gaussian(8, 1, 0.7, &mut rng));
        let x: Vec<f64> = Matrix::gaussian(1, 8, 1.0, &mut rng).as_slice().to_vec();
        let (_, analytic) = softmax_kl_loss(&store, w, b, &x);
        let err = finite_difference_check(|p: &ParamStore| softmax_kl_loss(p, w, b, &x).0, &store, &analytic, 1e-5);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn concat_mean_mix_param_norm_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::gaussian(3, 4, 1.0, &mut rng));
        let g = store.add("g", Matrix::gaussian(2, 8, 1.0, &mut rng));
        let loss_fn = |p: &ParamStore| {
            let mut t = Tape::new(p);
            let r0 = t.param_row(a, 0).unwrap();
            let r1 = t.param_row(a, 1).unwrap();
            let r2 = t.param_row(a, 2).unwrap();
            let cat = t.concat(&[r0, r1]);
            let logits = t.affine(g, None, cat).unwrap();
            let alpha = t.softmax(logits).unwrap();
            let e = t.mix(alpha, &[Some(r0), Some(r2)]).unwrap();
            let m = t.mean(&[e, r1, r2]).unwrap();
            let d = t.sub(e, r1).unwrap();
            let sq = t.sq_norm(d);
            let n = t.param_sq_norm(a);
            let mm = t.sq_norm(m);
            let loss = t.sum(&[sq, n, mm]).unwrap();
            let grads = t.backward(loss).unwrap();
            (t.scalar(loss), grads)
        };
        let (_, analytic) = loss_fn(&store);
        let err = finite_difference_check(|p: &ParamStore| loss_fn(p).0, &store, &analytic, 1e-5);
        assert!(err < 1e-4, "max relative error {err}");
    }
}
