//! Forward and backward kernels for convolution, ReLU, 2×2 max-pooling
//! with recorded indices, index-driven unpooling, and per-pixel softmax.
//!
//! Every backward pass is the exact adjoint of its forward pass. Parallel
//! kernels split work across independent output planes and keep the
//! per-element summation order fixed, so results never depend on the
//! thread count.

use crate::error::{contract, Result};
use crate::par;
use crate::tensor::{pad2d, Dims, Tensor4};

/// Weights `(c_out, c_in, k, k)` and per-output-channel bias of a stride-1,
/// zero-padded, dimension-preserving cross-correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor4,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(weights: Tensor4, bias: Vec<f64>) -> Result<Self> {
        let d = weights.dims();
        contract!(d.h == d.w, "conv kernel must be square, got {}x{}", d.h, d.w);
        contract!(d.h % 2 == 1, "conv kernel size must be odd, got {}", d.h);
        contract!(
            bias.len() == d.n,
            "bias length {} does not match c_out {}",
            bias.len(),
            d.n
        );
        Ok(Self { weights, bias })
    }

    pub fn c_out(&self) -> usize {
        self.weights.dims().n
    }

    pub fn c_in(&self) -> usize {
        self.weights.dims().c
    }

    pub fn kernel(&self) -> usize {
        self.weights.dims().h
    }

    pub fn pad(&self) -> usize {
        (self.kernel() - 1) / 2
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Forward state retained for [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvCache {
    padded_input: Tensor4,
    input_dims: Dims,
}

impl ConvCache {
    pub fn input_dims(&self) -> Dims {
        self.input_dims
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub weights: Tensor4,
    pub bias: Vec<f64>,
}

pub fn conv2d_forward(x: &Tensor4, p: &ConvParams) -> Result<(Tensor4, ConvCache)> {
    let xd = x.dims();
    contract!(
        xd.c == p.c_in(),
        "conv input channel axis: got {} channels, kernel expects {}",
        xd.c,
        p.c_in()
    );
    let k = p.kernel();
    let xp = pad2d(x, p.pad());
    let pd = xp.dims();
    let out_dims = Dims::new(xd.n, p.c_out(), xd.h, xd.w);
    let mut out = vec![0.0; out_dims.len()];
    let c_out = p.c_out();
    let wdata = p.weights.data();

    par::for_each_chunk(&mut out, out_dims.plane(), |plane_idx, plane| {
        let (n, o) = (plane_idx / c_out, plane_idx % c_out);
        let item = xp.item(n);
        // Accumulation order per output element: c_in, then kernel rows,
        // then kernel cols, then bias.
        for ci in 0..xd.c {
            let src = &item[ci * pd.plane()..(ci + 1) * pd.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdata[((o * xd.c + ci) * k + ky) * k + kx];
                    for y in 0..xd.h {
                        let row = &src[(y + ky) * pd.w + kx..(y + ky) * pd.w + kx + xd.w];
                        let dst = &mut plane[y * xd.w..(y + 1) * xd.w];
                        for (d, s) in dst.iter_mut().zip(row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
        let b = p.bias[o];
        plane.iter_mut().for_each(|v| *v += b);
    });

    Ok((
        Tensor4::from_raw(out_dims, out),
        ConvCache {
            padded_input: xp,
            input_dims: xd,
        },
    ))
}

pub fn conv2d_backward(grad_y: &Tensor4, cache: &ConvCache, p: &ConvParams) -> Result<ConvGrads> {
    let xd = cache.input_dims;
    let gd = grad_y.dims();
    let expected = Dims::new(xd.n, p.c_out(), xd.h, xd.w);
    contract!(
        gd == expected,
        "conv upstream gradient has dims {gd}, forward output was {expected}"
    );
    contract!(
        xd.c == p.c_in(),
        "conv cache has {} input channels, kernel expects {}",
        xd.c,
        p.c_in()
    );
    let k = p.kernel();
    let pad = p.pad();
    let xp = &cache.padded_input;
    let pd = xp.dims();
    let c_out = p.c_out();
    let plane = gd.plane();

    let grad_b: Vec<f64> = (0..c_out)
        .map(|o| {
            (0..gd.n)
                .map(|n| grad_y.item(n)[o * plane..(o + 1) * plane].iter().sum::<f64>())
                .sum()
        })
        .collect();

    // Weight gradient: one chunk per output channel, batch summed in order.
    let mut grad_w = vec![0.0; p.weights.len()];
    par::for_each_chunk(&mut grad_w, xd.c * k * k, |o, gw| {
        for n in 0..gd.n {
            let gy = &grad_y.item(n)[o * plane..(o + 1) * plane];
            let item = xp.item(n);
            for ci in 0..xd.c {
                let src = &item[ci * pd.plane()..(ci + 1) * pd.plane()];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for y in 0..xd.h {
                            let row = &src[(y + ky) * pd.w + kx..(y + ky) * pd.w + kx + xd.w];
                            let g = &gy[y * xd.w..(y + 1) * xd.w];
                            for (a, b) in g.iter().zip(row) {
                                acc += a * b;
                            }
                        }
                        gw[(ci * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });

    // Input gradient: scatter into a padded plane per (n, c_in), then crop.
    let wdata = p.weights.data();
    let mut grad_xp = vec![0.0; pd.len()];
    par::for_each_chunk(&mut grad_xp, pd.plane(), |plane_idx, gxp| {
        let (n, ci) = (plane_idx / xd.c, plane_idx % xd.c);
        let gy_item = grad_y.item(n);
        for o in 0..c_out {
            let gy = &gy_item[o * plane..(o + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdata[((o * xd.c + ci) * k + ky) * k + kx];
                    for y in 0..xd.h {
                        let dst = &mut gxp[(y + ky) * pd.w + kx..(y + ky) * pd.w + kx + xd.w];
                        let g = &gy[y * xd.w..(y + 1) * xd.w];
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    });
    let grad_x = crate::tensor::crop2d(&Tensor4::from_raw(pd, grad_xp), pad)?;

    Ok(ConvGrads {
        input: grad_x,
        weights: Tensor4::from_raw(p.weights.dims(), grad_w),
        bias: grad_b,
    })
}

/// Forward input retained for [`relu_backward`].
#[derive(Debug, Clone)]
pub struct ReluCache {
    input: Tensor4,
}

pub fn relu_forward(x: &Tensor4) -> (Tensor4, ReluCache) {
    (
        x.map(|v| v.max(0.0)),
        ReluCache { input: x.clone() },
    )
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(grad_y: &Tensor4, cache: &ReluCache) -> Result<Tensor4> {
    contract!(
        grad_y.dims() == cache.input.dims(),
        "relu upstream gradient has dims {}, forward input was {}",
        grad_y.dims(),
        cache.input.dims()
    );
    let data = grad_y
        .data()
        .iter()
        .zip(cache.input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor4::from_raw(grad_y.dims(), data))
}

/// Window-local argmax positions recorded by [`maxpool2x2_forward`].
///
/// Each entry is the row-major offset inside its 2×2 window:
/// `0` top-left, `1` top-right, `2` bottom-left, `3` bottom-right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    dims: Dims,
    data: Vec<u8>,
}

impl PoolIndices {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        contract!(
            data.len() == dims.len(),
            "pool index length {} does not match dims {dims}",
            data.len()
        );
        contract!(data.iter().all(|&i| i < 4), "pool indices must lie in 0..4");
        Ok(Self { dims, data })
    }

    /// Dims of the pooled (half-resolution) tensor.
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Dims of the full-resolution tensor the indices refer to.
    pub fn full_dims(&self) -> Dims {
        Dims::new(self.dims.n, self.dims.c, self.dims.h * 2, self.dims.w * 2)
    }
}

pub fn maxpool2x2_forward(x: &Tensor4) -> Result<(Tensor4, PoolIndices)> {
    let d = x.dims();
    contract!(
        d.h.is_multiple_of(2) && d.w.is_multiple_of(2),
        "max-pool needs even spatial dims, got height {} width {}",
        d.h,
        d.w
    );
    let od = Dims::new(d.n, d.c, d.h / 2, d.w / 2);
    let mut values = vec![0.0; od.len()];
    let mut indices = vec![0u8; od.len()];
    let src = x.data();
    for plane in 0..d.n * d.c {
        let sp = &src[plane * d.plane()..(plane + 1) * d.plane()];
        let base = plane * od.plane();
        for y in 0..od.h {
            for xx in 0..od.w {
                let top = 2 * y * d.w + 2 * xx;
                let window = [sp[top], sp[top + 1], sp[top + d.w], sp[top + d.w + 1]];
                let mut best = 0u8;
                for (i, &v) in window.iter().enumerate().skip(1) {
                    if v > window[best as usize] {
                        best = i as u8;
                    }
                }
                values[base + y * od.w + xx] = window[best as usize];
                indices[base + y * od.w + xx] = best;
            }
        }
    }
    Ok((
        Tensor4::from_raw(od, values),
        PoolIndices {
            dims: od,
            data: indices,
        },
    ))
}

/// Places each value at its recorded window position in a zero tensor of
/// doubled spatial size.
fn scatter_to_windows(values: &Tensor4, idx: &PoolIndices) -> Tensor4 {
    let od = idx.dims;
    let fd = idx.full_dims();
    let mut out = vec![0.0; fd.len()];
    for plane in 0..od.n * od.c {
        let dst = &mut out[plane * fd.plane()..(plane + 1) * fd.plane()];
        for y in 0..od.h {
            for x in 0..od.w {
                let i = plane * od.plane() + y * od.w + x;
                let pos = idx.data[i] as usize;
                dst[(2 * y + pos / 2) * fd.w + 2 * x + pos % 2] = values.data()[i];
            }
        }
    }
    Tensor4::from_raw(fd, out)
}

/// Reads, for each window, the full-resolution entry at its recorded index.
fn gather_from_windows(full: &Tensor4, idx: &PoolIndices) -> Tensor4 {
    let od = idx.dims;
    let fd = idx.full_dims();
    let src = full.data();
    let mut out = vec![0.0; od.len()];
    for plane in 0..od.n * od.c {
        let sp = &src[plane * fd.plane()..(plane + 1) * fd.plane()];
        for y in 0..od.h {
            for x in 0..od.w {
                let i = plane * od.plane() + y * od.w + x;
                let pos = idx.data[i] as usize;
                out[i] = sp[(2 * y + pos / 2) * fd.w + 2 * x + pos % 2];
            }
        }
    }
    Tensor4::from_raw(od, out)
}

pub fn maxpool2x2_backward(grad_y: &Tensor4, idx: &PoolIndices) -> Result<Tensor4> {
    contract!(
        grad_y.dims() == idx.dims,
        "max-pool upstream gradient has dims {}, indices have {}",
        grad_y.dims(),
        idx.dims
    );
    Ok(scatter_to_windows(grad_y, idx))
}

pub fn unpool2x2_forward(y: &Tensor4, idx: &PoolIndices) -> Result<Tensor4> {
    contract!(
        y.dims() == idx.dims,
        "unpool input has dims {}, indices have {}",
        y.dims(),
        idx.dims
    );
    Ok(scatter_to_windows(y, idx))
}

pub fn unpool2x2_backward(grad_y: &Tensor4, idx: &PoolIndices) -> Result<Tensor4> {
    contract!(
        grad_y.dims() == idx.full_dims(),
        "unpool upstream gradient has dims {}, expected {}",
        grad_y.dims(),
        idx.full_dims()
    );
    Ok(gather_from_windows(grad_y, idx))
}

/// Forward output retained for [`softmax_backward`].
#[derive(Debug, Clone)]
pub struct SoftmaxCache {
    probs: Tensor4,
}

/// Per-pixel softmax across the channel axis, stabilized by subtracting the
/// pixel's maximum logit.
pub fn softmax2_forward(logits: &Tensor4) -> (Tensor4, SoftmaxCache) {
    let d = logits.dims();
    let plane = d.plane();
    let mut out = vec![0.0; d.len()];
    for n in 0..d.n {
        let src = logits.item(n);
        let dst = &mut out[n * d.item()..(n + 1) * d.item()];
        for p in 0..plane {
            let m = (0..d.c).map(|c| src[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..d.c {
                let e = (src[c * plane + p] - m).exp();
                dst[c * plane + p] = e;
                total += e;
            }
            for c in 0..d.c {
                dst[c * plane + p] /= total;
            }
        }
    }
    let probs = Tensor4::from_raw(d, out);
    (
        probs.clone(),
        SoftmaxCache { probs },
    )
}

/// Gradient with respect to the logits: `p_c (g_c − Σ_k p_k g_k)`.
pub fn softmax_backward(grad_probs: &Tensor4, cache: &SoftmaxCache) -> Result<Tensor4> {
    let d = cache.probs.dims();
    contract!(
        grad_probs.dims() == d,
        "softmax upstream gradient has dims {}, forward output was {d}",
        grad_probs.dims()
    );
    let plane = d.plane();
    let mut out = vec![0.0; d.len()];
    for n in 0..d.n {
        let p = cache.probs.item(n);
        let g = grad_probs.item(n);
        let dst = &mut out[n * d.item()..(n + 1) * d.item()];
        for px in 0..plane {
            let dot: f64 = (0..d.c).map(|c| p[c * plane + px] * g[c * plane + px]).sum();
            for c in 0..d.c {
                let i = c * plane + px;
                dst[i] = p[i] * (g[i] - dot);
            }
        }
    }
    Ok(Tensor4::from_raw(d, out))
}
