//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] borrows the [`ParamStore`] for the duration of one forward
//! (and optional backward) pass. Operations append nodes to the tape; each
//! node carries its value and, when gradients are enabled, a closure that
//! routes the incoming gradient to its parents. Parameter nodes read their
//! value straight from the store, so no weights are copied per pass.
//!
//! Every operation that reduces over the batch axis loops sample-by-sample,
//! which keeps eval-mode outputs bit-identical regardless of how inputs are
//! batched.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Ix2, Ix3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::store::{ParamId, ParamStore, TensorD};
use crate::error::{Result, WxError};

/// Handle to one node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

pub(crate) type BackFn = Box<dyn Fn(&Graph<'_>, &TensorD, &mut GradBuffer)>;

enum Value {
    Owned(TensorD),
    ParamRef(ParamId),
}

struct Node {
    value: Value,
    backward: Option<BackFn>,
}

/// Per-node gradient accumulator used during the backward sweep.
pub struct GradBuffer {
    slots: Vec<Option<TensorD>>,
}

impl GradBuffer {
    pub fn add(&mut self, node: NodeId, grad: TensorD) {
        match &mut self.slots[node.0] {
            Some(existing) => *existing += &grad,
            slot => *slot = Some(grad),
        }
    }

    fn take(&mut self, node: NodeId) -> Option<TensorD> {
        self.slots[node.0].take()
    }
}

/// Gradients of a scalar loss with respect to store parameters.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<usize, TensorD>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&TensorD> {
        self.by_param.get(&id.0)
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

pub struct Graph<'a> {
    pub(crate) store: &'a mut ParamStore,
    nodes: Vec<Node>,
    grad_enabled: bool,
    training: bool,
    rng: ChaCha8Rng,
    param_nodes: HashMap<usize, NodeId>,
    /// Attention probability tensors captured when [`Self::capture_attention`]
    /// is on; one `(heads, M, M)` entry per attention call per sample batch.
    pub(crate) captured_attention: Vec<TensorD>,
    pub(crate) capture_attention: bool,
}

impl<'a> Graph<'a> {
    /// A fresh tape. `training` switches batch-norm/dropout behaviour; `grad`
    /// controls whether backward closures are recorded; `seed` drives dropout
    /// masks.
    pub fn new(store: &'a mut ParamStore, training: bool, grad: bool, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            grad_enabled: grad,
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            param_nodes: HashMap::new(),
            captured_attention: Vec::new(),
            capture_attention: false,
        }
    }

    /// Inference configuration: eval mode, no gradient recording.
    pub fn eval(store: &'a mut ParamStore) -> Self {
        Self::new(store, false, false, 0)
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn set_capture_attention(&mut self, on: bool) {
        self.capture_attention = on;
    }

    pub fn value(&self, id: NodeId) -> &TensorD {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::ParamRef(pid) => self.store.get(*pid),
        }
    }

    /// Value of a zero-dimensional node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert!(v.ndim() == 0, "scalar() on shape {:?}", v.shape());
        v.sum()
    }

    pub(crate) fn push(&mut self, value: TensorD, backward: Option<BackFn>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: Value::Owned(value),
            backward: if self.grad_enabled { backward } else { None },
        });
        id
    }

    /// Constant input; gradients stop here.
    pub fn input(&mut self, value: TensorD) -> NodeId {
        self.push(value, None)
    }

    /// Parameter leaf. Repeated calls for the same id share one node so
    /// fan-out accumulates correctly.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id.0) {
            return node;
        }
        let node = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: Value::ParamRef(id),
            backward: None,
        });
        self.param_nodes.insert(id.0, node);
        node
    }

    pub(crate) fn next_uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Backward sweep from a scalar loss; returns parameter gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert!(
            self.grad_enabled,
            "backward called on a graph built without gradients"
        );
        assert!(
            self.value(loss).ndim() == 0,
            "backward requires a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut buf = GradBuffer {
            slots: vec![None; self.nodes.len()],
        };
        buf.add(loss, TensorD::ones(IxDyn(&[])));
        let mut grads = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = buf.take(NodeId(i)) else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                back(self, &g, &mut buf);
            }
            if let Value::ParamRef(pid) = node.value {
                match grads.by_param.get_mut(&pid.0) {
                    Some(existing) => *existing += &g,
                    None => {
                        grads.by_param.insert(pid.0, g);
                    }
                }
            }
        }
        grads
    }

    // ---- elementwise and broadcasting ----

    /// Elementwise sum with trailing-dimension broadcasting on either side.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a) + self.value(b);
        let (sa, sb) = (
            self.value(a).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        self.push(
            out,
            Some(Box::new(move |_, g, buf| {
                buf.add(a, reduce_to(g, &sa));
                buf.add(b, reduce_to(g, &sb));
            })),
        )
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).mapv(|v| v * c);
        self.push(
            out,
            Some(Box::new(move |_, g, buf| buf.add(x, g.mapv(|v| v * c)))),
        )
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: NodeId, w: TensorD) -> NodeId {
        assert_eq!(self.value(x).shape(), w.shape(), "mul_const shape");
        let out = self.value(x) * &w;
        self.push(out, Some(Box::new(move |_, g, buf| buf.add(x, g * &w))))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(
            out,
            Some(Box::new(move |graph, g, buf| {
                let mut dx = g.clone();
                dx.zip_mut_with(graph.value(x), |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                buf.add(x, dx);
            })),
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(stable_sigmoid);
        let saved = y.clone();
        self.push(
            y,
            Some(Box::new(move |_, g, buf| {
                let dx = g * &saved.mapv(|s| s * (1.0 - s));
                buf.add(x, dx);
            })),
        )
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate}");
        if !self.training || rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let shape = self.value(x).raw_dim();
        let mut mask = TensorD::zeros(shape);
        for m in mask.iter_mut() {
            if self.next_uniform() < keep {
                *m = 1.0 / keep;
            }
        }
        let out = self.value(x) * &mask;
        self.push(out, Some(Box::new(move |_, g, buf| buf.add(x, g * &mask))))
    }

    // ---- matrix products ----

    /// Plain 2-D matrix product `a · b`.
    pub fn matmul2d(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = view2(self.value(a)).dot(&view2(self.value(b)));
        self.push(
            out.into_dyn(),
            Some(Box::new(move |graph, g, buf| {
                let g2 = view2(g);
                let av = view2(graph.value(a));
                let bv = view2(graph.value(b));
                buf.add(a, g2.dot(&bv.t()).into_dyn());
                buf.add(b, av.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// Batched token projection: `(B, M, p) · (p, q) → (B, M, q)`,
    /// sample-by-sample.
    pub fn tokens_linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let x3 = view3(self.value(x));
        let w2 = view2(self.value(w));
        let (bsz, m, p) = x3.dim();
        assert_eq!(p, w2.dim().0, "tokens_linear inner dimension");
        let q = w2.dim().1;
        let mut out = Array3::zeros((bsz, m, q));
        for b in 0..bsz {
            out.slice_mut(ndarray::s![b, .., ..])
                .assign(&x3.slice(ndarray::s![b, .., ..]).dot(&w2));
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |graph, g, buf| {
                let g3 = view3(g);
                let x3 = view3(graph.value(x));
                let w2 = view2(graph.value(w));
                let mut dx = Array3::zeros(x3.dim());
                let mut dw = Array2::zeros(w2.dim());
                for b in 0..x3.dim().0 {
                    let gb = g3.slice(ndarray::s![b, .., ..]);
                    dx.slice_mut(ndarray::s![b, .., ..])
                        .assign(&gb.dot(&w2.t()));
                    dw += &x3.slice(ndarray::s![b, .., ..]).t().dot(&gb);
                }
                buf.add(x, dx.into_dyn());
                buf.add(w, dw.into_dyn());
            })),
        )
    }

    // ---- normalization ----

    /// Layer normalization over the last dimension with learnable scale and
    /// shift vectors.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("layer_norm input");
        assert_eq!(self.value(gamma).shape(), [d], "layer_norm gamma");
        assert_eq!(self.value(beta).shape(), [d], "layer_norm beta");
        let out = {
            let gammav = self.value(gamma);
            let betav = self.value(beta);
            let mut out = xv.clone();
            for mut row in out.rows_mut() {
                let (mean, inv_std) = row_stats(row.as_slice().unwrap(), eps);
                for (i, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * inv_std * gammav[[i]] + betav[[i]];
                }
            }
            out
        };
        self.push(
            out,
            Some(Box::new(move |graph, g, buf| {
                let xv = graph.value(x);
                let gammav = graph.value(gamma);
                let d = *xv.shape().last().unwrap();
                let mut dx = TensorD::zeros(xv.raw_dim());
                let mut dgamma = Array1::<f64>::zeros(d);
                let mut dbeta = Array1::<f64>::zeros(d);
                for ((xrow, grow), mut dxrow) in
                    xv.rows().into_iter().zip(g.rows()).zip(dx.rows_mut())
                {
                    let (mean, inv_std) = row_stats(xrow.as_slice().unwrap(), eps);
                    let n = d as f64;
                    let mut sum_gg = 0.0;
                    let mut sum_ggx = 0.0;
                    for i in 0..d {
                        let xhat = (xrow[i] - mean) * inv_std;
                        let gg = grow[i] * gammav[[i]];
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                        dgamma[i] += grow[i] * xhat;
                        dbeta[i] += grow[i];
                    }
                    for i in 0..d {
                        let xhat = (xrow[i] - mean) * inv_std;
                        let gg = grow[i] * gammav[[i]];
                        dxrow[i] = inv_std * (gg - sum_gg / n - xhat * sum_ggx / n);
                    }
                }
                buf.add(x, dx);
                buf.add(gamma, dgamma.into_dyn());
                buf.add(beta, dbeta.into_dyn());
            })),
        )
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let xv = self.value(x);
        let old: Vec<usize> = xv.shape().to_vec();
        assert_eq!(
            xv.len(),
            shape.iter().product::<usize>(),
            "reshape {old:?} -> {shape:?}"
        );
        let out = xv
            .to_shape(IxDyn(shape))
            .expect("contiguous reshape")
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |_, g, buf| {
                let back = g.to_shape(IxDyn(&old)).expect("reshape back").to_owned();
                buf.add(x, back);
            })),
        )
    }

    /// Mean over the token axis: `(B, M, d) → (B, d)`.
    pub fn mean_tokens(&mut self, x: NodeId) -> NodeId {
        let x3 = view3(self.value(x));
        let (bsz, m, d) = x3.dim();
        let mut out = Array2::zeros((bsz, d));
        for b in 0..bsz {
            out.row_mut(b)
                .assign(&x3.slice(ndarray::s![b, .., ..]).mean_axis(Axis(0)).unwrap());
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_, g, buf| {
                let g2 = view2(g);
                let mut dx = Array3::zeros((bsz, m, d));
                for b in 0..bsz {
                    let row = g2.row(b).mapv(|v| v / m as f64);
                    for t in 0..m {
                        dx.slice_mut(ndarray::s![b, t, ..]).assign(&row);
                    }
                }
                buf.add(x, dx.into_dyn());
            })),
        )
    }

    /// Stacks two `(B, d)` tensors into `(B, 2, d)`.
    pub fn stack_pair(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = view2(self.value(a));
        let bv = view2(self.value(b));
        assert_eq!(av.dim(), bv.dim(), "stack_pair shapes");
        let (bsz, d) = av.dim();
        let mut out = Array3::zeros((bsz, 2, d));
        out.slice_mut(ndarray::s![.., 0, ..]).assign(&av);
        out.slice_mut(ndarray::s![.., 1, ..]).assign(&bv);
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_, g, buf| {
                let g3 = view3(g);
                buf.add(a, g3.slice(ndarray::s![.., 0, ..]).to_owned().into_dyn());
                buf.add(b, g3.slice(ndarray::s![.., 1, ..]).to_owned().into_dyn());
            })),
        )
    }

    /// Concatenates `(B, Mᵢ, d)` tensors along the token axis.
    pub fn concat_tokens(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_tokens needs inputs");
        let views: Vec<ArrayView3<f64>> = parts.iter().map(|&p| view3(self.value(p))).collect();
        let out = ndarray::concatenate(
            Axis(1),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat_tokens shapes");
        let spans: Vec<(NodeId, usize, usize)> = {
            let mut offset = 0;
            parts
                .iter()
                .zip(&views)
                .map(|(&p, v)| {
                    let len = v.dim().1;
                    let span = (p, offset, len);
                    offset += len;
                    span
                })
                .collect()
        };
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_, g, buf| {
                let g3 = view3(g);
                for &(p, offset, len) in &spans {
                    buf.add(
                        p,
                        g3.slice(ndarray::s![.., offset..offset + len, ..])
                            .to_owned()
                            .into_dyn(),
                    );
                }
            })),
        )
    }

    /// Takes tokens `[start, start+len)` from a `(B, M, d)` sequence.
    pub fn slice_tokens(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let x3 = view3(self.value(x));
        let (bsz, m, d) = x3.dim();
        assert!(start + len <= m, "slice_tokens {start}+{len} > {m}");
        let out = x3
            .slice(ndarray::s![.., start..start + len, ..])
            .to_owned();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_, g, buf| {
                let mut dx = Array3::zeros((bsz, m, d));
                dx.slice_mut(ndarray::s![.., start..start + len, ..])
                    .assign(&view3(g));
                buf.add(x, dx.into_dyn());
            })),
        )
    }

    /// Batched embedding lookup: rows of `table` selected by `indices`
    /// (shape `(B, n)`), producing `(B, n, d)`.
    pub fn gather_rows(&mut self, table: NodeId, indices: Array2<usize>) -> NodeId {
        let tv = view2(self.value(table));
        let (rows, d) = tv.dim();
        let (bsz, n) = indices.dim();
        let mut out = Array3::zeros((bsz, n, d));
        for b in 0..bsz {
            for i in 0..n {
                let r = indices[[b, i]];
                assert!(r < rows, "gather_rows index {r} out of {rows}");
                out.slice_mut(ndarray::s![b, i, ..]).assign(&tv.row(r));
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_, g, buf| {
                let g3 = view3(g);
                let mut dt = Array2::zeros((rows, d));
                for b in 0..bsz {
                    for i in 0..n {
                        let mut row = dt.row_mut(indices[[b, i]]);
                        row += &g3.slice(ndarray::s![b, i, ..]);
                    }
                }
                buf.add(table, dt.into_dyn());
            })),
        )
    }

    // ---- reductions and losses ----

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let shape: Vec<usize> = self.value(x).shape().to_vec();
        let total = self.value(x).sum();
        self.push(
            TensorD::from_elem(IxDyn(&[]), total),
            Some(Box::new(move |_, g, buf| {
                let gs = g.sum();
                buf.add(x, TensorD::from_elem(IxDyn(&shape), gs));
            })),
        )
    }

    /// Numerically stable binary cross-entropy on logits, averaged over the
    /// elements selected by `mask` (all of them when `mask` is `None`).
    ///
    /// Per element the loss is `softplus(x) − x·y`; the gradient is exactly
    /// `σ(x) − y` scaled by the averaging weight.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: &TensorD,
        mask: Option<&TensorD>,
    ) -> NodeId {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape(), "bce targets shape");
        assert!(
            targets.iter().all(|&t| t == 0.0 || t == 1.0),
            "bce targets must be 0/1"
        );
        let weights = match mask {
            Some(m) => {
                assert_eq!(x.shape(), m.shape(), "bce mask shape");
                m.clone()
            }
            None => TensorD::ones(x.raw_dim()),
        };
        let denom = weights.sum();
        let total = if denom == 0.0 {
            0.0
        } else {
            let mut acc = 0.0;
            for ((&xv, &yv), &wv) in x.iter().zip(targets.iter()).zip(weights.iter()) {
                acc += (softplus(xv) - xv * yv) * wv;
            }
            acc / denom
        };
        let targets = targets.clone();
        self.push(
            TensorD::from_elem(IxDyn(&[]), total),
            Some(Box::new(move |graph, g, buf| {
                if denom == 0.0 {
                    return;
                }
                let gs = g.sum() / denom;
                let x = graph.value(logits);
                let mut dx = TensorD::zeros(x.raw_dim());
                for ((dv, (&xv, &yv)), &wv) in dx
                    .iter_mut()
                    .zip(x.iter().zip(targets.iter()))
                    .zip(weights.iter())
                {
                    *dv = (stable_sigmoid(xv) - yv) * wv * gs;
                }
                buf.add(logits, dx);
            })),
        )
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function without overflow.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sums `g` down to `shape` (inverse of broadcasting).
fn reduce_to(g: &TensorD, shape: &[usize]) -> TensorD {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &dim) in shape.iter().enumerate() {
        if dim == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn view2(t: &TensorD) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-D tensor")
}

pub(crate) fn view3(t: &TensorD) -> ArrayView3<'_, f64> {
    t.view()
        .into_dimensionality::<Ix3>()
        .expect("expected a 3-D tensor")
}

/// Returns an error if any entry is NaN or infinite.
pub(crate) fn ensure_finite(site: &str, t: &TensorD) -> Result<()> {
    if t.iter().any(|v| !v.is_finite()) {
        return Err(WxError::Numerical(format!("non-finite values in {site}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::gradcheck;
    use ndarray::{arr1, arr2};

    #[test]
    fn sigmoid_values() {
        assert_eq!(stable_sigmoid(0.0), 0.5);
        // At +30 the gap to 1 (≈9.4e-14) is still representable in f64.
        assert!(stable_sigmoid(30.0) < 1.0);
        assert!((stable_sigmoid(30.0) - 1.0).abs() < 1e-9);
        assert!(stable_sigmoid(-30.0) > 0.0);
        assert!(stable_sigmoid(-745.0) >= 0.0); // deep underflow, no NaN
        assert!(stable_sigmoid(745.0) <= 1.0); // deep saturation, no NaN
    }

    #[test]
    fn bce_scalar_cases() {
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store, false, true, 0);

        // Single logit 0, target 1: loss = ln 2.
        let x = g.input(arr1(&[0.0]).into_dyn());
        let loss = g.bce_with_logits(x, &arr1(&[1.0]).into_dyn(), None);
        assert!((g.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-9);

        // Saturated correct logit: loss effectively zero.
        let x = g.input(arr1(&[50.0]).into_dyn());
        let loss = g.bce_with_logits(x, &arr1(&[1.0]).into_dyn(), None);
        assert!(g.scalar(loss) <= 1e-9);

        // Two classes: mean of softplus(-1) and softplus(-2).
        let x = g.input(arr1(&[1.0, -2.0]).into_dyn());
        let loss = g.bce_with_logits(x, &arr1(&[1.0, 0.0]).into_dyn(), None);
        let expected = (softplus(-1.0) + softplus(-2.0)) / 2.0;
        assert!((g.scalar(loss) - expected).abs() < 1e-12);
        assert!((g.scalar(loss) - 0.2201).abs() < 5e-5);
    }

    #[test]
    fn bce_rejects_soft_targets() {
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store, false, true, 0);
        let x = g.input(arr1(&[0.0]).into_dyn());
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            g.bce_with_logits(x, &arr1(&[0.5]).into_dyn(), None)
        }));
        assert!(result.is_err());
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_target() {
        let mut store = ParamStore::new();
        let logits = arr1(&[1.5, -0.25, 3.0, 0.0]).into_dyn();
        let targets = arr1(&[1.0, 0.0, 0.0, 1.0]).into_dyn();
        let p = store.add("logits", logits.clone(), true);
        let mut g = Graph::new(&mut store, false, true, 0);
        let x = g.param(p);
        // Single element average: scale by 4 to isolate the identity.
        let loss = g.bce_with_logits(x, &targets, None);
        let loss = g.scale(loss, 4.0);
        let grads = g.backward(loss);
        let dx = grads.get(p).unwrap();
        for i in 0..4 {
            let expected = stable_sigmoid(logits[[i]]) - targets[[i]];
            assert!(
                (dx[[i]] - expected).abs() <= 1e-10,
                "index {i}: {} vs {expected}",
                dx[[i]]
            );
        }
    }

    #[test]
    fn bce_mask_selects_elements() {
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store, false, true, 0);
        let x = g.input(arr1(&[0.0, 77.0]).into_dyn());
        let targets = arr1(&[1.0, 0.0]).into_dyn();
        let mask = arr1(&[1.0, 0.0]).into_dyn();
        let loss = g.bce_with_logits(x, &targets, Some(&mask));
        // Only the first element counts: ln 2.
        assert!((g.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);

        let zero_mask = arr1(&[0.0, 0.0]).into_dyn();
        let loss = g.bce_with_logits(x, &targets, Some(&zero_mask));
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn add_broadcasts_and_reduces() {
        let mut store = ParamStore::new();
        let bias = store.add("b", arr1(&[1.0, 2.0]).into_dyn(), true);
        let mut g = Graph::new(&mut store, false, true, 0);
        let x = g.input(arr2(&[[0.0, 0.0], [10.0, 10.0]]).into_dyn());
        let b = g.param(bias);
        let y = g.add(x, b);
        assert_eq!(g.value(y), &arr2(&[[1.0, 2.0], [11.0, 12.0]]).into_dyn());
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        // Bias gradient sums over the broadcast axis.
        assert_eq!(grads.get(bias).unwrap(), &arr1(&[2.0, 2.0]).into_dyn());
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_train() {
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store, false, true, 1);
        let x = g.input(arr1(&[1.0, 2.0, 3.0]).into_dyn());
        let y = g.dropout(x, 0.5);
        assert_eq!(x, y);

        let run = |seed: u64| {
            let mut store = ParamStore::new();
            let mut g = Graph::new(&mut store, true, true, seed);
            let x = g.input(TensorD::ones(IxDyn(&[100])));
            let y = g.dropout(x, 0.4);
            g.value(y).clone()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        // Surviving entries are scaled by 1/keep.
        let out = run(7);
        assert!(out.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-12));
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let mut store = ParamStore::new();
        let p = store.add("w", arr1(&[1.0]).into_dyn(), true);
        let mut g = Graph::new(&mut store, false, false, 0);
        let x = g.param(p);
        let y = g.relu(x);
        assert!(!g.grad_enabled());
        assert_eq!(g.value(y)[[0]], 1.0);
        assert!(g.nodes[y.0].backward.is_none());
    }

    #[test]
    fn param_fanout_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("w", arr1(&[3.0]).into_dyn(), true);
        let mut g = Graph::new(&mut store, false, true, 0);
        let a = g.param(p);
        let b = g.param(p);
        assert_eq!(a, b);
        let y = g.add(a, b); // y = 2w
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert_eq!(grads.get(p).unwrap()[[0]], 2.0);
    }

    #[test]
    fn gradcheck_dense_ops() {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            arr2(&[[0.3, -0.2], [0.5, 0.9], [-0.4, 0.1]]).into_dyn(),
            true,
        );
        let b = store.add("b", arr1(&[0.05, -0.3]).into_dyn(), true);
        let x = Array3::from_shape_fn((2, 4, 3), |(i, j, k)| {
            ((i * 12 + j * 3 + k) as f64 * 0.37).sin()
        })
        .into_dyn();
        gradcheck(
            &mut store,
            |g| {
                let xv = g.input(x.clone());
                let wv = g.param(w);
                let bv = g.param(b);
                let h = g.tokens_linear(xv, wv);
                let h = g.add(h, bv);
                let h = g.relu(h);
                let h = g.sigmoid(h);
                g.sum_all(h)
            },
            1e-6,
        );
    }

    #[test]
    fn gradcheck_layer_norm() {
        let mut store = ParamStore::new();
        let x = store.add(
            "x",
            Array3::from_shape_fn((2, 3, 4), |(i, j, k)| ((i + j * 2 + k * 5) as f64 * 0.21).cos())
                .into_dyn(),
            true,
        );
        let gamma = store.add("gamma", arr1(&[1.1, 0.9, 1.3, 0.7]).into_dyn(), true);
        let beta = store.add("beta", arr1(&[0.1, -0.2, 0.0, 0.4]).into_dyn(), true);
        let weights = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| {
            ((i * 12 + j * 4 + k) as f64 * 0.11).sin() + 0.2
        })
        .into_dyn();
        gradcheck(
            &mut store,
            |g| {
                let xv = g.param(x);
                let gv = g.param(gamma);
                let bv = g.param(beta);
                let y = g.layer_norm(xv, gv, bv, 1e-5);
                let y = g.mul_const(y, weights.clone());
                g.sum_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn gradcheck_shape_ops() {
        let mut store = ParamStore::new();
        let a = store.add(
            "a",
            Array2::from_shape_fn((2, 5), |(i, j)| (i as f64 - j as f64) * 0.3).into_dyn(),
            true,
        );
        let b = store.add(
            "b",
            Array2::from_shape_fn((2, 5), |(i, j)| (i * j) as f64 * 0.2 - 0.5).into_dyn(),
            true,
        );
        let table = store.add(
            "table",
            Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64 * 0.17).sin()).into_dyn(),
            true,
        );
        let idx = Array2::from_shape_vec((2, 3), vec![0, 2, 2, 3, 1, 0]).unwrap();
        gradcheck(
            &mut store,
            |g| {
                let av = g.param(a);
                let bv = g.param(b);
                let tv = g.param(table);
                let pair = g.stack_pair(av, bv); // (2, 2, 5)
                let gathered = g.gather_rows(tv, idx.clone()); // (2, 3, 5)
                let seq = g.concat_tokens(&[pair, gathered]); // (2, 5, 5)
                let mid = g.slice_tokens(seq, 1, 3);
                let pooled = g.mean_tokens(mid); // (2, 5)
                let flat = g.reshape(pooled, &[10]);
                let loss = g.bce_with_logits(
                    flat,
                    &TensorD::from_elem(IxDyn(&[10]), 1.0),
                    None,
                );
                g.scale(loss, 3.0)
            },
            1e-6,
        );
    }

    #[test]
    fn gradcheck_matmul_and_bce_mask() {
        let mut store = ParamStore::new();
        let a = store.add(
            "a",
            Array2::from_shape_fn((3, 4), |(i, j)| ((i + j) as f64 * 0.31).sin()).into_dyn(),
            true,
        );
        let b = store.add(
            "b",
            Array2::from_shape_fn((4, 2), |(i, j)| ((i as f64) - (j as f64) * 0.7) * 0.25)
                .into_dyn(),
            true,
        );
        let targets = Array2::from_shape_fn((3, 2), |(i, j)| ((i + j) % 2) as f64).into_dyn();
        let mask = Array2::from_shape_fn((3, 2), |(i, _)| if i == 1 { 0.0 } else { 1.0 }).into_dyn();
        gradcheck(
            &mut store,
            |g| {
                let av = g.param(a);
                let bv = g.param(b);
                let y = g.matmul2d(av, bv);
                g.bce_with_logits(y, &targets, Some(&mask))
            },
            1e-6,
        );
    }
}
