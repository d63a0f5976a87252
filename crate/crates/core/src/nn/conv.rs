//! Convolutional primitives: 2-D convolution (im2col + matmul), max pooling,
//! batch normalization, the feature-map-to-token layout change, and the
//! small 1-D fusion convolution.
//!
//! Batch axes are always looped sample-by-sample so eval-mode outputs do not
//! depend on batch composition.

use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4, Axis, Ix4};

use super::graph::{BackFn, Graph, NodeId};
use super::store::{ParamId, TensorD};

fn view4(t: &TensorD) -> ArrayView4<'_, f64> {
    t.view()
        .into_dimensionality::<Ix4>()
        .expect("expected a 4-D tensor")
}

/// Output spatial extent of a convolution/pool along one axis.
fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds one `(C, H, W)` sample into `(ho·wo, C·kh·kw)` patch rows.
fn im2col(
    x: ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((ho * wo, c * kh * kw));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            for ci in 0..c {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, ci * kh * kw + ky * kw + kx]] =
                            x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds `(ho·wo, C·kh·kw)` patch-row gradients back
/// onto a `(C, H, W)` image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut out = Array3::zeros((c, h, w));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            for ci in 0..c {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[[ci, iy as usize, ix as usize]] +=
                            cols[[row, ci * kh * kw + ky * kw + kx]];
                    }
                }
            }
        }
    }
    out
}

impl Graph<'_> {
    /// 2-D convolution without bias: `(B, C, H, W) ⋆ (K, C, kh, kw)` at the
    /// given stride and symmetric zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let x4 = view4(self.value(x));
        let w4 = view4(self.value(w));
        let (bsz, c, h, wd) = x4.dim();
        let (k, wc, kh, kw) = w4.dim();
        assert_eq!(c, wc, "conv2d channel mismatch");
        let ho = out_extent(h, kh, stride, pad);
        let wo = out_extent(wd, kw, stride, pad);
        let wmat = w4.to_shape((k, c * kh * kw)).expect("kernel reshape");
        let mut out = Array4::zeros((bsz, k, ho, wo));
        let mut saved_cols = Vec::new();
        for b in 0..bsz {
            let cols = im2col(x4.index_axis(Axis(0), b), kh, kw, stride, pad, ho, wo);
            let o = wmat.dot(&cols.t()); // (k, ho·wo)
            out.index_axis_mut(Axis(0), b).assign(
                &o.to_shape((k, ho, wo)).expect("conv output reshape"),
            );
            if self.grad_enabled() {
                saved_cols.push(cols);
            }
        }
        let back: Option<BackFn> = Some(Box::new(move |graph, g, buf| {
            let g4 = view4(g);
            let w4 = view4(graph.value(w));
            let wmat = w4.to_shape((k, c * kh * kw)).expect("kernel reshape");
            let mut dw = Array2::zeros((k, c * kh * kw));
            let mut dx = Array4::zeros((bsz, c, h, wd));
            // Indexing several arrays in lockstep; a range loop reads clearest.
            #[allow(clippy::needless_range_loop)]
            for b in 0..bsz {
                let gmat = g4
                    .index_axis(Axis(0), b)
                    .to_shape((k, ho * wo))
                    .expect("grad reshape")
                    .to_owned();
                dw += &gmat.dot(&saved_cols[b]);
                let dcols = wmat.t().dot(&gmat); // (c·kh·kw, ho·wo)
                let dcols_t = dcols.t().to_owned();
                dx.index_axis_mut(Axis(0), b).assign(&col2im(
                    &dcols_t, c, h, wd, kh, kw, stride, pad, ho, wo,
                ));
            }
            buf.add(x, dx.into_dyn());
            buf.add(
                w,
                dw.into_shape_with_order((k, c, kh, kw))
                    .expect("kernel grad reshape")
                    .into_dyn(),
            );
        }));
        self.push(out.into_dyn(), back)
    }

    /// Max pooling with symmetric zero-free padding (padded cells never win).
    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize, pad: usize) -> NodeId {
        let x4 = view4(self.value(x));
        let (bsz, c, h, w) = x4.dim();
        let ho = out_extent(h, kernel, stride, pad);
        let wo = out_extent(w, kernel, stride, pad);
        let mut out = Array4::zeros((bsz, c, ho, wo));
        // Flat (iy·w + ix) winner per output cell.
        let mut argmax = Array4::<usize>::zeros((bsz, c, ho, wo));
        for b in 0..bsz {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0;
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = x4[[b, ci, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_at = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        out[[b, ci, oy, ox]] = best;
                        argmax[[b, ci, oy, ox]] = best_at;
                    }
                }
            }
        }
        let back: Option<BackFn> = Some(Box::new(move |_, g, buf| {
            let g4 = view4(g);
            let mut dx = Array4::zeros((bsz, c, h, w));
            for b in 0..bsz {
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let at = argmax[[b, ci, oy, ox]];
                            dx[[b, ci, at / w, at % w]] += g4[[b, ci, oy, ox]];
                        }
                    }
                }
            }
            buf.add(x, dx.into_dyn());
        }));
        self.push(out.into_dyn(), back)
    }

    /// Batch normalization over `(B, H, W)` per channel.
    ///
    /// Training mode normalizes by batch statistics and folds them into the
    /// running estimates (momentum-weighted, unbiased variance); eval mode
    /// normalizes each sample independently by the running estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        eps: f64,
    ) -> NodeId {
        let (bsz, c, h, w) = view4(self.value(x)).dim();
        assert_eq!(self.value(gamma).shape(), &[c], "batch_norm gamma");
        assert_eq!(self.value(beta).shape(), &[c], "batch_norm beta");
        let n = (bsz * h * w) as f64;

        let (mean, var) = if self.training() {
            let (mean, var) = {
                let x4 = view4(self.value(x));
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let lane = x4.slice(ndarray::s![.., ci, .., ..]);
                    let m = lane.sum() / n;
                    let v = lane.iter().map(|&a| (a - m) * (a - m)).sum::<f64>() / n;
                    mean[ci] = m;
                    var[ci] = v;
                }
                (mean, var)
            };
            // Fold batch statistics into the running estimates.
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            {
                let rm = self.store.get_mut(running_mean);
                for ci in 0..c {
                    rm[[ci]] = (1.0 - momentum) * rm[[ci]] + momentum * mean[ci];
                }
            }
            {
                let rv = self.store.get_mut(running_var);
                for ci in 0..c {
                    rv[[ci]] = (1.0 - momentum) * rv[[ci]] + momentum * var[ci] * unbias;
                }
            }
            (mean, var)
        } else {
            let rm = self.store.get(running_mean);
            let rv = self.store.get(running_var);
            (
                (0..c).map(|ci| rm[[ci]]).collect(),
                (0..c).map(|ci| rv[[ci]]).collect(),
            )
        };

        let mut out = Array4::zeros((bsz, c, h, w));
        {
            let x4 = view4(self.value(x));
            let gv = self.value(gamma);
            let bv = self.value(beta);
            for ci in 0..c {
                let inv_std = 1.0 / (var[ci] + eps).sqrt();
                let (m, ga, be) = (mean[ci], gv[[ci]], bv[[ci]]);
                let lane = x4.slice(ndarray::s![.., ci, .., ..]);
                let mut olane = out.slice_mut(ndarray::s![.., ci, .., ..]);
                ndarray::Zip::from(&mut olane)
                    .and(&lane)
                    .for_each(|o, &xv| *o = (xv - m) * inv_std * ga + be);
            }
        }

        let batch_stats = self.training();
        let back: Option<BackFn> = Some(Box::new(move |graph, g, buf| {
            let g4 = view4(g);
            let x4 = view4(graph.value(x));
            let gv = graph.value(gamma);
            let mut dx = Array4::zeros((bsz, c, h, w));
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ci in 0..c {
                let inv_std = 1.0 / (var[ci] + eps).sqrt();
                let m = mean[ci];
                let glane = g4.slice(ndarray::s![.., ci, .., ..]);
                let xlane = x4.slice(ndarray::s![.., ci, .., ..]);
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                ndarray::Zip::from(&glane).and(&xlane).for_each(|&gg, &xx| {
                    let xhat = (xx - m) * inv_std;
                    sum_g += gg;
                    sum_gx += gg * xhat;
                });
                dgamma[ci] = sum_gx;
                dbeta[ci] = sum_g;
                let scale = gv[[ci]] * inv_std;
                let mut dlane = dx.slice_mut(ndarray::s![.., ci, .., ..]);
                if batch_stats {
                    ndarray::Zip::from(&mut dlane)
                        .and(&glane)
                        .and(&xlane)
                        .for_each(|d, &gg, &xx| {
                            let xhat = (xx - m) * inv_std;
                            *d = scale * (gg - sum_g / n - xhat * sum_gx / n);
                        });
                } else {
                    ndarray::Zip::from(&mut dlane)
                        .and(&glane)
                        .for_each(|d, &gg| *d = scale * gg);
                }
            }
            buf.add(x, dx.into_dyn());
            buf.add(gamma, Array2::from_shape_vec((1, c), dgamma).unwrap()
                .remove_axis(Axis(0))
                .into_dyn());
            buf.add(beta, Array2::from_shape_vec((1, c), dbeta).unwrap()
                .remove_axis(Axis(0))
                .into_dyn());
        }));
        self.push(out.into_dyn(), back)
    }

    /// Lays a `(B, C, H, W)` feature map out as `(B, H·W, C)` tokens in
    /// row-major spatial order.
    pub fn nchw_to_tokens(&mut self, x: NodeId) -> NodeId {
        let x4 = view4(self.value(x));
        let (bsz, c, h, w) = x4.dim();
        let mut out = Array3::zeros((bsz, h * w, c));
        for b in 0..bsz {
            for y in 0..h {
                for xx in 0..w {
                    for ci in 0..c {
                        out[[b, y * w + xx, ci]] = x4[[b, ci, y, xx]];
                    }
                }
            }
        }
        let back: Option<BackFn> = Some(Box::new(move |_, g, buf| {
            let g3 = super::graph::view3(g);
            let mut dx = Array4::zeros((bsz, c, h, w));
            for b in 0..bsz {
                for y in 0..h {
                    for xx in 0..w {
                        for ci in 0..c {
                            dx[[b, ci, y, xx]] = g3[[b, y * w + xx, ci]];
                        }
                    }
                }
            }
            buf.add(x, dx.into_dyn());
        }));
        self.push(out.into_dyn(), back)
    }

    /// 1-D fusion convolution: input `(B, 2, d)`, one output channel, kernel
    /// width 3, same padding, producing `(B, d)`.
    pub fn conv1d_fuse(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> NodeId {
        let x3 = super::graph::view3(self.value(x));
        let (bsz, cin, d) = x3.dim();
        assert_eq!(cin, 2, "conv1d_fuse expects two input channels");
        assert_eq!(self.value(w).shape(), [1, 2, 3], "conv1d_fuse kernel");
        assert_eq!(self.value(bias).shape(), [1], "conv1d_fuse bias");
        let mut out = Array2::zeros((bsz, d));
        {
            let wv = self.value(w);
            let bv = self.value(bias)[[0]];
            for b in 0..bsz {
                for j in 0..d {
                    let mut acc = bv;
                    for ci in 0..2 {
                        for t in 0..3 {
                            let pos = j as isize + t as isize - 1;
                            if pos >= 0 && (pos as usize) < d {
                                acc += wv[[0, ci, t]] * x3[[b, ci, pos as usize]];
                            }
                        }
                    }
                    out[[b, j]] = acc;
                }
            }
        }
        let back: Option<BackFn> = Some(Box::new(move |graph, g, buf| {
            let g2 = super::graph::view2(g);
            let x3 = super::graph::view3(graph.value(x));
            let wv = graph.value(w);
            let mut dx = Array3::zeros((bsz, 2, d));
            let mut dw = TensorD::zeros(ndarray::IxDyn(&[1, 2, 3]));
            let mut db = 0.0;
            for b in 0..bsz {
                for j in 0..d {
                    let gv = g2[[b, j]];
                    db += gv;
                    for ci in 0..2 {
                        for t in 0..3 {
                            let pos = j as isize + t as isize - 1;
                            if pos >= 0 && (pos as usize) < d {
                                dw[[0, ci, t]] += gv * x3[[b, ci, pos as usize]];
                                dx[[b, ci, pos as usize]] += gv * wv[[0, ci, t]];
                            }
                        }
                    }
                }
            }
            buf.add(x, dx.into_dyn());
            buf.add(w, dw);
            buf.add(bias, TensorD::from_elem(ndarray::IxDyn(&[1]), db));
        }));
        self.push(out.into_dyn(), back)
    }
}
