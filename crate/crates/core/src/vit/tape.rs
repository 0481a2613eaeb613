//! Matrix-level tape for reverse-mode differentiation of the encoder.
//!
//! Every node stores its forward value and the operation that produced it.
//! Leaves borrow their values (parameters, inputs) so recording a forward
//! pass does not copy the weights.

use std::borrow::Cow;
use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use super::ops::{
    gelu, gelu_grad, layer_norm_backward, normalize_rows, softmax_rows, softmax_rows_backward, LayerNormCache,
};
use super::params::ParamKey;
use super::VitError;

pub type NodeId = usize;

/// What a leaf node stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    /// The token sequence `z₀` fed to the encoder.
    Tokens,
    /// Raw flattened patches, when the embedding is recorded too.
    Patches,
    Param(ParamKey),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Source),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulTransposed(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast a `1 × C` row over every row.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Gelu(NodeId),
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node<'a> {
    op: Op,
    value: Cow<'a, Array2<f64>>,
    norm: Option<LayerNormCache>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    output: Option<NodeId>,
    tokens: Option<NodeId>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn output(&self) -> Option<&Array2<f64>> {
        self.output.map(|id| self.value(id))
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    /// Marks the node holding `z₀` so its gradient is reported even when it
    /// is computed from patches.
    pub fn set_tokens(&mut self, id: NodeId) {
        self.tokens = Some(id);
    }

    fn push(&mut self, op: Op, value: Cow<'a, Array2<f64>>) -> NodeId {
        self.nodes.push(Node { op, value, norm: None });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, source: Source, value: &'a Array2<f64>) -> NodeId {
        self.push(Op::Leaf(source), Cow::Borrowed(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), Cow::Owned(v))
    }

    pub fn matmul_transposed(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulTransposed(a, b), Cow::Owned(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), Cow::Owned(v))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let v = self.value(x) + self.value(row);
        self.push(Op::AddRow(x, row), Cow::Owned(v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x) * c;
        self.push(Op::Scale(x, c), Cow::Owned(v))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows(self.value(x).view());
        self.push(Op::SoftmaxRows(x), Cow::Owned(v))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let cache = normalize_rows(self.value(x).view(), eps);
        let v = &cache.normalized * self.value(gamma) + self.value(beta);
        let id = self.push(Op::LayerNorm { x, gamma, beta, eps }, Cow::Owned(v));
        self.nodes[id].norm = Some(cache);
        id
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(gelu);
        self.push(Op::Gelu(x), Cow::Owned(v))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols { x, start, len }, Cow::Owned(v))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("parts share a row count");
        self.push(Op::ConcatCols(parts), Cow::Owned(v))
    }

    fn evaluate(&self, op: &Op, values: &[Array2<f64>]) -> Array2<f64> {
        match op {
            Op::Leaf(_) => unreachable!("leaves are not re-evaluated"),
            Op::MatMul(a, b) => values[*a].dot(&values[*b]),
            Op::MatMulTransposed(a, b) => values[*a].dot(&values[*b].t()),
            Op::Add(a, b) => &values[*a] + &values[*b],
            Op::AddRow(x, r) => &values[*x] + &values[*r],
            Op::Scale(x, c) => &values[*x] * *c,
            Op::SoftmaxRows(x) => softmax_rows(values[*x].view()),
            Op::LayerNorm { x, gamma, beta, eps } => {
                normalize_rows(values[*x].view(), *eps).normalized * &values[*gamma] + &values[*beta]
            }
            Op::Gelu(x) => values[*x].mapv(gelu),
            Op::SliceCols { x, start, len } => values[*x].slice(s![.., *start..*start + *len]).to_owned(),
            Op::ConcatCols(parts) => {
                let views: Vec<_> = parts.iter().map(|&p| values[p].view()).collect();
                ndarray::concatenate(Axis(1), &views).expect("parts share a row count")
            }
        }
    }

    /// Recompute every non-leaf node from the recorded leaves and return the
    /// output. Matches the recorded output bit for bit.
    pub fn replay(&self) -> Result<Array2<f64>, VitError> {
        let out = self.output.ok_or(VitError::TapeMismatch("tape has no output".into()))?;
        let mut values: Vec<Array2<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf(_) => node.value.as_ref().clone(),
                ref op => self.evaluate(op, &values),
            };
            values.push(v);
        }
        Ok(values.swap_remove(out))
    }

    /// Propagate `d_out` back to every leaf.
    pub fn backward(&self, d_out: &Array2<f64>) -> Result<Gradients, VitError> {
        let out = self.output.ok_or(VitError::TapeMismatch("tape has no output".into()))?;
        if d_out.dim() != self.value(out).dim() {
            return Err(VitError::TapeMismatch(format!(
                "output gradient is {:?}, output is {:?}",
                d_out.dim(),
                self.value(out).dim()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[out] = Some(d_out.clone());

        fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
            match &mut grads[id] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        }

        let mut tokens_grad = None;
        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            if Some(id) == self.tokens {
                tokens_grad = Some(g.clone());
            }
            match &self.nodes[id].op {
                Op::Leaf(_) => grads[id] = Some(g),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulTransposed(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(x, r) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *x, g);
                    accumulate(&mut grads, *r, dr);
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, g * *c),
                Op::SoftmaxRows(x) => {
                    let dx = softmax_rows_backward(self.value(id).view(), g.view());
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gamma, beta, .. } => {
                    let cache = self.nodes[id].norm.as_ref().expect("layer-norm nodes keep their cache");
                    let lg = layer_norm_backward(cache, self.value(*gamma).view(), g.view());
                    accumulate(&mut grads, *x, lg.dx);
                    accumulate(&mut grads, *gamma, lg.dgamma);
                    accumulate(&mut grads, *beta, lg.dbeta);
                }
                Op::Gelu(x) => {
                    let dx = &g * &self.value(*x).mapv(gelu_grad);
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start, len } => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut grads, p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
            }
        }

        let mut by_source: BTreeMap<Source, Array2<f64>> = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(src) = node.op {
                let g = grads[id].take().unwrap_or_else(|| Array2::zeros(node.value.raw_dim()));
                match by_source.get_mut(&src) {
                    Some(acc) => *acc += &g,
                    None => {
                        by_source.insert(src, g);
                    }
                }
            }
        }
        if let (None, Some(t)) = (&tokens_grad, self.tokens) {
            tokens_grad = Some(Array2::zeros(self.value(t).raw_dim()));
        }
        Ok(Gradients { by_source, tokens: tokens_grad })
    }
}

/// Gradients of a scalar probe with respect to every leaf of a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    by_source: BTreeMap<Source, Array2<f64>>,
    tokens: Option<Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, source: Source) -> Option<&Array2<f64>> {
        self.by_source.get(&source)
    }

    pub fn param(&self, key: ParamKey) -> Option<&Array2<f64>> {
        self.get(Source::Param(key))
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Array2<f64>> {
        self.by_source.get_mut(&Source::Param(key))
    }

    /// Gradient at `z₀`.
    pub fn tokens(&self) -> Option<&Array2<f64>> {
        self.tokens.as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Source, &Array2<f64>)> {
        self.by_source.iter()
    }

    pub fn max_abs(&self) -> f64 {
        self.by_source
            .values()
            .chain(self.tokens.iter())
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_gradients_by_hand() {
        let a = array![[1.0, 2.0]];
        let b = array![[3.0], [4.0]];
        let mut tape = Tape::new();
        let ia = tape.leaf(Source::Tokens, &a);
        let ib = tape.leaf(Source::Patches, &b);
        let y = tape.matmul(ia, ib);
        tape.set_output(y);
        assert_eq!(tape.value(y), &array![[11.0]]);
        let g = tape.backward(&array![[1.0]]).unwrap();
        assert_eq!(g.get(Source::Tokens).unwrap(), &array![[3.0, 4.0]]);
        assert_eq!(g.get(Source::Patches).unwrap(), &array![[1.0], [2.0]]);
    }

    #[test]
    fn shared_leaf_accumulates() {
        let x = array![[2.0, -1.0]];
        let mut tape = Tape::new();
        let ix = tape.leaf(Source::Tokens, &x);
        let y = tape.add(ix, ix);
        let y = tape.scale(y, 3.0);
        tape.set_output(y);
        let g = tape.backward(&array![[1.0, 1.0]]).unwrap();
        assert_eq!(g.get(Source::Tokens).unwrap(), &array![[6.0, 6.0]]);
    }

    #[test]
    fn mismatched_output_gradient() {
        let x = array![[1.0]];
        let mut tape = Tape::new();
        assert!(matches!(tape.backward(&x), Err(VitError::TapeMismatch(_))));
        let ix = tape.leaf(Source::Tokens, &x);
        tape.set_output(ix);
        assert!(matches!(tape.backward(&array![[1.0, 2.0]]), Err(VitError::TapeMismatch(_))));
    }
}
