//! Finite-difference verification of every backward pass.
//!
//! Each check builds a scalar loss `L = Σ r ⊙ f(x)` (or the softmax + MSE
//! loss for the output head), compares the analytic gradient against the
//! central difference `(L(θ + h) − L(θ − h)) / 2h` entry by entry, and
//! reports the worst relative error.

use crate::error::Result;
use crate::layers::{
    conv2d_backward, conv2d_forward, maxpool2x2_backward, maxpool2x2_forward, relu_backward,
    relu_forward, softmax2_forward, softmax_backward, unpool2x2_backward, unpool2x2_forward,
    ConvParams, PoolIndices,
};
use crate::model::{build_network, DecoderOrder, Network, NetworkConfig};
use crate::tensor::{sample_gaussian, Dims, Rng, Tensor4};
use crate::training::{mse_loss, LossNorm};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// Deliberate corruption of analytic gradients, for testing the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Perturb {
    #[default]
    None,
    /// Scales every convolution weight gradient by 1.01.
    Weights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub max_rel_error: f64,
    pub entries: usize,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checks: Vec<LayerCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(LayerCheck::passed)
    }

    pub fn first_failure(&self) -> Option<&LayerCheck> {
        self.checks.iter().find(|c| !c.passed())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn dot(a: &Tensor4, b: &Tensor4) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error between `analytic[i]` and the central difference
/// of `loss` with respect to `values[i]`.
fn compare(
    values: &mut [f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
) -> (f64, usize) {
    let mut worst = 0.0f64;
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + STEP;
        let plus = loss(values);
        values[i] = orig - STEP;
        let minus = loss(values);
        values[i] = orig;
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * STEP)));
    }
    (worst, values.len())
}

fn merge(parts: &[(f64, usize)]) -> (f64, usize) {
    parts
        .iter()
        .fold((0.0, 0), |(e, n), &(pe, pn)| (e.max(pe), n + pn))
}

fn check_conv(rng: &mut Rng, perturb: Perturb) -> Result<LayerCheck> {
    let x = sample_gaussian(rng, Dims::new(1, 2, 5, 5), 1.0)?;
    let w = sample_gaussian(rng, Dims::new(3, 2, 3, 3), 0.5)?;
    let bias: Vec<f64> = (0..3).map(|_| rng.normal(0.5)).collect();
    let p = ConvParams::new(w, bias)?;
    let (y, cache) = conv2d_forward(&x, &p)?;
    let r = sample_gaussian(rng, y.dims(), 1.0)?;
    let mut g = conv2d_backward(&r, &cache, &p)?;
    if perturb == Perturb::Weights {
        g.weights = g.weights.map(|v| v * 1.01);
    }

    let eval = |x: &Tensor4, p: &ConvParams| dot(&conv2d_forward(x, p).unwrap().0, &r);
    let mut xv = x.data().to_vec();
    let dx = compare(&mut xv, g.input.data(), |v| {
        eval(&Tensor4::from_raw(x.dims(), v.to_vec()), &p)
    });
    let mut wv = p.weights.data().to_vec();
    let dw = compare(&mut wv, g.weights.data(), |v| {
        let mut q = p.clone();
        q.weights.data_mut().copy_from_slice(v);
        eval(&x, &q)
    });
    let mut bv = p.bias.clone();
    let db = compare(&mut bv, &g.bias, |v| {
        let mut q = p.clone();
        q.bias = v.to_vec();
        eval(&x, &q)
    });
    let (e, n) = merge(&[dx, dw, db]);
    Ok(LayerCheck {
        layer: "conv2d",
        max_rel_error: e,
        entries: n,
    })
}

fn check_relu(rng: &mut Rng) -> Result<LayerCheck> {
    // Keep every input away from the kink at 0.
    let x = sample_gaussian(rng, Dims::new(1, 2, 4, 4), 1.0)?
        .map(|v| if v.abs() < 1e-3 { v.signum() * 1e-2 } else { v });
    let (y, cache) = relu_forward(&x);
    let r = sample_gaussian(rng, y.dims(), 1.0)?;
    let g = relu_backward(&r, &cache)?;
    let mut xv = x.data().to_vec();
    let (e, n) = compare(&mut xv, g.data(), |v| {
        dot(&relu_forward(&Tensor4::from_raw(x.dims(), v.to_vec())).0, &r)
    });
    Ok(LayerCheck {
        layer: "relu",
        max_rel_error: e,
        entries: n,
    })
}

fn check_maxpool(rng: &mut Rng) -> Result<LayerCheck> {
    // Distinct values spaced 0.1 apart so no perturbation flips an argmax.
    let dims = Dims::new(1, 2, 4, 6);
    let data = rng
        .permutation(dims.len())
        .into_iter()
        .map(|i| i as f64 * 0.1 - 1.0)
        .collect();
    let x = Tensor4::from_raw(dims, data);
    let (y, idx) = maxpool2x2_forward(&x)?;
    let r = sample_gaussian(rng, y.dims(), 1.0)?;
    let g = maxpool2x2_backward(&r, &idx)?;
    let mut xv = x.data().to_vec();
    let (e, n) = compare(&mut xv, g.data(), |v| {
        dot(&maxpool2x2_forward(&Tensor4::from_raw(dims, v.to_vec())).unwrap().0, &r)
    });
    Ok(LayerCheck {
        layer: "maxpool2x2",
        max_rel_error: e,
        entries: n,
    })
}

fn check_unpool(rng: &mut Rng) -> Result<LayerCheck> {
    let dims = Dims::new(1, 2, 3, 4);
    let idx = PoolIndices::new(
        dims,
        (0..dims.len()).map(|_| rng.uniform(0.0, 4.0) as u8).collect(),
    )?;
    let y = sample_gaussian(rng, dims, 1.0)?;
    let r = sample_gaussian(rng, idx.full_dims(), 1.0)?;
    let g = unpool2x2_backward(&r, &idx)?;
    let mut yv = y.data().to_vec();
    let (e, n) = compare(&mut yv, g.data(), |v| {
        dot(&unpool2x2_forward(&Tensor4::from_raw(dims, v.to_vec()), &idx).unwrap(), &r)
    });
    Ok(LayerCheck {
        layer: "unpool2x2",
        max_rel_error: e,
        entries: n,
    })
}

fn one_hot_target(rng: &mut Rng, n: usize, h: usize, w: usize) -> Result<Tensor4> {
    let mut t = Tensor4::zeros(Dims::new(n, 2, h, w))?;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let lane = usize::from(rng.uniform(0.0, 1.0) < 0.3);
                t.set(b, lane, y, x, 1.0);
            }
        }
    }
    Ok(t)
}

fn check_softmax_mse(rng: &mut Rng) -> Result<LayerCheck> {
    let logits = sample_gaussian(rng, Dims::new(2, 2, 3, 3), 2.0)?;
    let target = one_hot_target(rng, 2, 3, 3)?;
    let (probs, cache) = softmax2_forward(&logits);
    let (_, dl) = mse_loss(&probs, &target, LossNorm::PerImage)?;
    let g = softmax_backward(&dl, &cache)?;
    let mut lv = logits.data().to_vec();
    let (e, n) = compare(&mut lv, g.data(), |v| {
        let p = softmax2_forward(&Tensor4::from_raw(logits.dims(), v.to_vec())).0;
        mse_loss(&p, &target, LossNorm::PerImage).unwrap().0
    });
    Ok(LayerCheck {
        layer: "softmax_mse",
        max_rel_error: e,
        entries: n,
    })
}

/// End-to-end check of a network: every parameter against the loss
/// `mse(forward(x), target)`.
pub fn check_network(
    net: &mut Network,
    x: &Tensor4,
    target: &Tensor4,
    perturb: Perturb,
) -> Result<LayerCheck> {
    let (probs, cache) = net.forward(x)?;
    let (_, dl) = mse_loss(&probs, target, LossNorm::PerImage)?;
    let mut grads = net.backward(&cache, &dl)?;
    if perturb == Perturb::Weights {
        for g in &mut grads.params {
            g.weights = g.weights.map(|v| v * 1.01);
        }
    }
    let loss = |net: &Network| {
        let p = net.probabilities(x).unwrap();
        mse_loss(&p, target, LossNorm::PerImage).unwrap().0
    };

    let mut worst = 0.0f64;
    let mut entries = 0;
    let layer_ids: Vec<usize> = net.conv_layers().map(|(i, _)| i).collect();
    for (k, g) in grads.params.iter().enumerate() {
        assert_eq!(g.layer_index, layer_ids[k]);
        for (role, analytic) in [(0, g.weights.data()), (1, &g.bias[..])] {
            for (i, &a) in analytic.iter().enumerate() {
                let mut eval_at = |delta: f64| {
                    let (_, p) = net.conv_layers_mut().nth(k).unwrap();
                    let slot = if role == 0 {
                        &mut p.weights.data_mut()[i]
                    } else {
                        &mut p.bias[i]
                    };
                    let orig = *slot;
                    *slot = orig + delta;
                    let l = loss(net);
                    let (_, p) = net.conv_layers_mut().nth(k).unwrap();
                    if role == 0 {
                        p.weights.data_mut()[i] = orig;
                    } else {
                        p.bias[i] = orig;
                    }
                    l
                };
                let numeric = (eval_at(STEP) - eval_at(-STEP)) / (2.0 * STEP);
                worst = worst.max(relative_error(a, numeric));
                entries += 1;
            }
        }
    }
    Ok(LayerCheck {
        layer: "network",
        max_rel_error: worst,
        entries,
    })
}

/// Two-block network on `2 × 3 × 8 × 16` inputs.
pub fn composed_network_case(seed: u64) -> Result<(Network, Tensor4, Tensor4)> {
    let cfg = NetworkConfig {
        input_dims: (3, 8, 16),
        encoder_filters: vec![4, 6],
        kernel_size: 3,
        num_classes: 2,
        decoder_order: DecoderOrder::Paper,
    };
    let mut rng = Rng::new(seed);
    let mut net = build_network(&cfg, &mut rng)?;
    // Nonzero biases so the bias gradients are exercised away from zero.
    for (_, p) in net.conv_layers_mut() {
        for b in &mut p.bias {
            *b = rng.normal(0.1);
        }
    }
    let x = sample_gaussian(&mut rng, net.input_dims(2), 1.0)?;
    let target = one_hot_target(&mut rng, 2, 8, 16)?;
    Ok((net, x, target))
}

pub const SUITE_SEED: u64 = 2024;

/// Runs every check, one entry per layer kind plus the composed network.
pub fn run_suite(perturb: Perturb) -> Result<GradReport> {
    let mut rng = Rng::new(SUITE_SEED);
    let mut checks = vec![
        check_conv(&mut rng, perturb)?,
        check_relu(&mut rng)?,
        check_maxpool(&mut rng)?,
        check_unpool(&mut rng)?,
        check_softmax_mse(&mut rng)?,
    ];
    let (mut net, x, target) = composed_network_case(SUITE_SEED)?;
    checks.push(check_network(&mut net, &x, &target, perturb)?);
    Ok(GradReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_covers_every_kind() {
        let report = run_suite(Perturb::None).unwrap();
        for c in &report.checks {
            eprintln!("{:12} {:.3e} over {}", c.layer, c.max_rel_error, c.entries);
        }
        assert!(report.passed());
        let names: Vec<_> = report.checks.iter().map(|c| c.layer).collect();
        assert_eq!(
            names,
            ["conv2d", "relu", "maxpool2x2", "unpool2x2", "softmax_mse", "network"]
        );
    }

    #[test]
    fn perturbed_weights_are_caught() {
        let report = run_suite(Perturb::Weights).unwrap();
        assert!(!report.passed());
        assert_eq!(report.first_failure().unwrap().layer, "conv2d");
    }

    #[test]
    fn conv_gradients_meet_tight_tolerance() {
        let c = check_conv(&mut Rng::new(5), Perturb::None).unwrap();
        assert!(c.max_rel_error < 1e-6, "{}", c.max_rel_error);
        let u = check_unpool(&mut Rng::new(6)).unwrap();
        assert!(u.max_rel_error < 1e-6, "{}", u.max_rel_error);
        let r = check_relu(&mut Rng::new(7)).unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }
}
