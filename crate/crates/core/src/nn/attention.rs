//! Scaled dot-product multi-head self-attention as one fused tape
//! operation.
//!
//! The fused form keeps the `M×M` probability matrices internal: they are
//! retained for backward only when gradients are enabled, dropped otherwise,
//! which is what makes long-sequence inference affordable.

use ndarray::{Array2, Array3, Axis};

use super::graph::{ensure_finite, view3, BackFn, Graph, NodeId};
use crate::error::Result;

/// Row-wise softmax of `scores`, numerically stabilized by the row maximum.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Attention probabilities for one head: `softmax(q·kᵀ/√d_h)` with
/// `q, k: (M, d_h)`. The result is row-stochastic.
pub fn head_weights(
    q: &ndarray::ArrayView2<'_, f64>,
    k: &ndarray::ArrayView2<'_, f64>,
) -> Array2<f64> {
    let d_h = q.dim().1 as f64;
    let scores = q.dot(&k.t()) / d_h.sqrt();
    softmax_rows(&scores)
}

impl Graph<'_> {
    /// Multi-head scaled dot-product attention over already-projected
    /// queries, keys, and values, each `(B, M, d)`. Heads are contiguous
    /// `d/heads`-wide column slices; their outputs are concatenated back in
    /// head order (the output projection is the caller's).
    ///
    /// Returns an error if any input contains NaN/Inf, so upstream numerical
    /// failures surface here instead of propagating through softmax.
    pub fn multi_head_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    ) -> Result<NodeId> {
        ensure_finite("attention query", self.value(q))?;
        ensure_finite("attention key", self.value(k))?;
        ensure_finite("attention value", self.value(v))?;
        let (bsz, m, d) = view3(self.value(q)).dim();
        assert_eq!(view3(self.value(k)).dim(), (bsz, m, d), "attention key shape");
        assert_eq!(view3(self.value(v)).dim(), (bsz, m, d), "attention value shape");
        assert!(heads >= 1 && d % heads == 0, "d={d} not divisible by heads={heads}");
        let d_h = d / heads;

        let mut out = Array3::zeros((bsz, m, d));
        // probs[b] is (heads, M, M); only retained when needed.
        let mut saved_probs: Vec<Array3<f64>> = Vec::new();
        let keep_probs = self.grad_enabled() || self.capture_attention;
        {
            let qv = view3(self.value(q));
            let kv = view3(self.value(k));
            let vv = view3(self.value(v));
            for b in 0..bsz {
                let mut probs_b = if keep_probs {
                    Array3::zeros((heads, m, m))
                } else {
                    Array3::zeros((0, 0, 0))
                };
                for head in 0..heads {
                    let cols = head * d_h..(head + 1) * d_h;
                    let qh = qv.slice(ndarray::s![b, .., cols.clone()]);
                    let kh = kv.slice(ndarray::s![b, .., cols.clone()]);
                    let vh = vv.slice(ndarray::s![b, .., cols.clone()]);
                    let p = head_weights(&qh, &kh);
                    out.slice_mut(ndarray::s![b, .., cols]).assign(&p.dot(&vh));
                    if keep_probs {
                        probs_b.index_axis_mut(Axis(0), head).assign(&p);
                    }
                }
                if keep_probs {
                    saved_probs.push(probs_b);
                }
            }
        }
        if self.capture_attention {
            for probs_b in &saved_probs {
                self.captured_attention.push(probs_b.clone().into_dyn());
            }
        }

        let back: Option<BackFn> = Some(Box::new(move |graph, g, buf| {
            let g3 = view3(g);
            let qv = view3(graph.value(q));
            let kv = view3(graph.value(k));
            let vv = view3(graph.value(v));
            let scale = 1.0 / (d_h as f64).sqrt();
            let mut dq = Array3::zeros((bsz, m, d));
            let mut dk = Array3::zeros((bsz, m, d));
            let mut dv = Array3::zeros((bsz, m, d));
            // Indexing five arrays in lockstep; a range loop reads clearest.
            #[allow(clippy::needless_range_loop)]
            for b in 0..bsz {
                for head in 0..heads {
                    let cols = head * d_h..(head + 1) * d_h;
                    let p = saved_probs[b].index_axis(Axis(0), head);
                    let go = g3.slice(ndarray::s![b, .., cols.clone()]);
                    let qh = qv.slice(ndarray::s![b, .., cols.clone()]);
                    let kh = kv.slice(ndarray::s![b, .., cols.clone()]);
                    let vh = vv.slice(ndarray::s![b, .., cols.clone()]);
                    // d value: Pᵀ · dOut.
                    let dvh = p.t().dot(&go);
                    // Softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P)).
                    let dp = go.dot(&vh.t());
                    let mut ds = Array2::zeros((m, m));
                    for r in 0..m {
                        let dot = dp.row(r).dot(&p.row(r));
                        for cidx in 0..m {
                            ds[[r, cidx]] = p[[r, cidx]] * (dp[[r, cidx]] - dot);
                        }
                    }
                    let dqh = ds.dot(&kh).mapv(|x| x * scale);
                    let dkh = ds.t().dot(&qh).mapv(|x| x * scale);
                    dq.slice_mut(ndarray::s![b, .., cols.clone()]).assign(&dqh);
                    dk.slice_mut(ndarray::s![b, .., cols.clone()]).assign(&dkh);
                    dv.slice_mut(ndarray::s![b, .., cols]).assign(&dvh);
                }
            }
            buf.add(q, dq.into_dyn());
            buf.add(k, dk.into_dyn());
            buf.add(v, dv.into_dyn());
        }));
        Ok(self.push(out.into_dyn(), back))
    }
}
