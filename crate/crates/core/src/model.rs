//! Encoder/decoder network assembly, Xavier initialization, and the full
//! forward/backward passes.
//!
//! Encoder block `d` is `conv → relu → maxpool`; decoder block `d` unpools
//! with the indices recorded by encoder block `D − 1 − d`, so the deepest
//! pool is undone first. A final convolution maps to class logits and a
//! per-pixel softmax turns them into probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, maxpool2x2_backward, maxpool2x2_forward, relu_backward,
    relu_forward, softmax2_forward, softmax_backward, unpool2x2_backward, unpool2x2_forward,
    ConvCache, ConvParams, PoolIndices, ReluCache, SoftmaxCache,
};
use crate::tensor::{argmax_channel, sample_gaussian, ClassMap, Dims, Rng, Tensor4};

/// Order of the activation and convolution inside a decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderOrder {
    /// `unpool → relu → conv`.
    #[default]
    Paper,
    /// `unpool → conv → relu`, as in the usual SegNet decoder.
    Conventional,
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    /// `(channels, height, width)` of one input image.
    pub input_dims: (usize, usize, usize),
    /// Output channels of each encoder block, shallowest first.
    pub encoder_filters: Vec<usize>,
    pub kernel_size: usize,
    pub num_classes: usize,
    pub decoder_order: DecoderOrder,
}

impl NetworkConfig {
    /// Three encoder blocks of 8/16/32 filters on a `3 × h × w` input.
    pub fn segnet_lite(h: usize, w: usize) -> Self {
        Self {
            input_dims: (3, h, w),
            encoder_filters: vec![8, 16, 32],
            kernel_size: 3,
            num_classes: 2,
            decoder_order: DecoderOrder::Paper,
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_filters.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_dims;
        if self.encoder_filters.is_empty() {
            return Err(Error::Config("encoder_filters must not be empty".into()));
        }
        if self.encoder_filters.contains(&0) {
            return Err(Error::Config("encoder filter counts must be positive".into()));
        }
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input dims must be positive, got {c}x{h}x{w}"
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        let factor = 1usize
            .checked_shl(self.depth() as u32)
            .ok_or_else(|| Error::Config("too many encoder blocks".into()))?;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "input height and width must be divisible by 2^{} = {factor} \
                 for {} encoder blocks, got {h}x{w}",
                self.depth(),
                self.depth()
            )));
        }
        Ok(())
    }

    /// Trainable parameter count implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        conv_shapes(self)
            .iter()
            .map(|&(co, ci)| co * ci * self.kernel_size * self.kernel_size + co)
            .sum()
    }
}

/// `(c_out, c_in)` of every convolution in layer order.
fn conv_shapes(cfg: &NetworkConfig) -> Vec<(usize, usize)> {
    let f = &cfg.encoder_filters;
    let mut shapes = Vec::with_capacity(2 * f.len() + 1);
    let mut c_prev = cfg.input_dims.0;
    for &c in f {
        shapes.push((c, c_prev));
        c_prev = c;
    }
    for e in (0..f.len()).rev() {
        let out = if e == 0 { f[0] } else { f[e - 1] };
        shapes.push((out, f[e]));
    }
    shapes.push((cfg.num_classes, f[0]));
    shapes
}

/// One entry of the layer stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvParams),
    Relu,
    /// Max-pool of encoder block `depth`.
    MaxPool { depth: usize },
    /// Unpool consuming the indices of encoder block `depth`.
    Unpool { depth: usize },
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Unpool { .. } => "unpool",
            Layer::Softmax => "softmax",
        }
    }
}

/// Instantiated network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<Layer>,
    revision: u64,
}

/// Standard deviation of Xavier initialization for a given fan-in:
/// the weights are drawn with variance `1 / fan_in`.
pub fn xavier_sigma(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Rounds a parameter to the single-precision grid used on disk.
#[inline]
pub(crate) fn to_storage(v: f64) -> f64 {
    v as f32 as f64
}

/// Zero-mean Gaussian kernel bank with variance `1 / (k·k·c_in)`.
pub fn xavier_conv(rng: &mut Rng, c_out: usize, c_in: usize, k: usize) -> Result<ConvParams> {
    let sigma = xavier_sigma(k * k * c_in);
    let w = sample_gaussian(rng, Dims::new(c_out, c_in, k, k), sigma)?.map(to_storage);
    ConvParams::new(w, vec![0.0; c_out])
}

/// Builds the network with Xavier-initialized weights and zero biases.
pub fn build_network(cfg: &NetworkConfig, rng: &mut Rng) -> Result<Network> {
    cfg.validate()?;
    let k = cfg.kernel_size;
    let convs = conv_shapes(cfg)
        .into_iter()
        .map(|(co, ci)| xavier_conv(rng, co, ci, k))
        .collect::<Result<Vec<_>>>()?;
    Network::assemble(cfg.clone(), convs)
}

impl Network {
    /// A network with every parameter zero, ready to receive loaded weights.
    pub fn zeroed(cfg: &NetworkConfig) -> Result<Network> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let convs = conv_shapes(cfg)
            .into_iter()
            .map(|(co, ci)| ConvParams::new(Tensor4::zeros(Dims::new(co, ci, k, k))?, vec![0.0; co]))
            .collect::<Result<Vec<_>>>()?;
        Network::assemble(cfg.clone(), convs)
    }

    fn assemble(config: NetworkConfig, convs: Vec<ConvParams>) -> Result<Network> {
        let depth = config.depth();
        let mut convs = convs.into_iter();
        let mut next = || convs.next().expect("conv count matches conv_shapes");
        let mut layers = Vec::with_capacity(6 * depth + 2);
        for d in 0..depth {
            layers.push(Layer::Conv(next()));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool { depth: d });
        }
        for e in (0..depth).rev() {
            layers.push(Layer::Unpool { depth: e });
            match config.decoder_order {
                DecoderOrder::Paper => {
                    layers.push(Layer::Relu);
                    layers.push(Layer::Conv(next()));
                }
                DecoderOrder::Conventional => {
                    layers.push(Layer::Conv(next()));
                    layers.push(Layer::Relu);
                }
            }
        }
        layers.push(Layer::Conv(next()));
        layers.push(Layer::Softmax);
        let net = Network {
            config,
            layers,
            revision: 0,
        };
        net.check_mirror_pairing()?;
        Ok(net)
    }

    /// Decoder block `d` must unpool with encoder block `D − 1 − d`.
    fn check_mirror_pairing(&self) -> Result<()> {
        let depth = self.config.depth();
        let pools: Vec<usize> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::MaxPool { depth } => Some(*depth),
                _ => None,
            })
            .collect();
        let unpools: Vec<usize> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Unpool { depth } => Some(*depth),
                _ => None,
            })
            .collect();
        let want_pools: Vec<usize> = (0..depth).collect();
        let want_unpools: Vec<usize> = (0..depth).rev().collect();
        contract!(
            pools == want_pools && unpools == want_unpools,
            "decoder unpool order {unpools:?} does not mirror encoder pools {pools:?}"
        );
        Ok(())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Incremented whenever parameters are mutated.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// `(layer_index, params)` for every convolution, in layer order.
    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &ConvParams)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Conv(p) => Some((i, p)),
            _ => None,
        })
    }

    /// Mutable access to every convolution. Invalidates outstanding caches.
    pub fn conv_layers_mut(&mut self) -> impl Iterator<Item = (usize, &mut ConvParams)> {
        self.revision += 1;
        self.layers.iter_mut().enumerate().filter_map(|(i, l)| match l {
            Layer::Conv(p) => Some((i, p)),
            _ => None,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.conv_layers().map(|(_, p)| p.param_count()).sum()
    }

    /// Dims of a batch of `n` inputs.
    pub fn input_dims(&self, n: usize) -> Dims {
        let (c, h, w) = self.config.input_dims;
        Dims::new(n, c, h, w)
    }

    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, ForwardCache)> {
        let xd = x.dims();
        let want = self.input_dims(xd.n);
        contract!(
            xd == want,
            "network input has dims {xd}, expected ?x{}x{}x{}",
            want.c,
            want.h,
            want.w
        );
        let depth = self.config.depth();
        let mut pools: Vec<Option<PoolIndices>> = vec![None; depth];
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, entry) = match layer {
                Layer::Conv(p) => {
                    let (y, c) = conv2d_forward(&cur, p)?;
                    (y, LayerCache::Conv(c))
                }
                Layer::Relu => {
                    let (y, c) = relu_forward(&cur);
                    (y, LayerCache::Relu(c))
                }
                Layer::MaxPool { depth } => {
                    let (y, idx) = maxpool2x2_forward(&cur)?;
                    pools[*depth] = Some(idx);
                    (y, LayerCache::MaxPool { depth: *depth })
                }
                Layer::Unpool { depth } => {
                    let idx = pools[*depth].as_ref().ok_or_else(|| {
                        Error::Contract(format!("unpool reached before encoder pool {depth}"))
                    })?;
                    (unpool2x2_forward(&cur, idx)?, LayerCache::Unpool { depth: *depth })
                }
                Layer::Softmax => {
                    let (y, c) = softmax2_forward(&cur);
                    (y, LayerCache::Softmax(c))
                }
            };
            entries.push(entry);
            cur = next;
        }
        let pools = pools
            .into_iter()
            .map(|p| p.expect("every encoder pool ran"))
            .collect();
        Ok((
            cur,
            ForwardCache {
                entries,
                pools,
                revision: self.revision,
                batch: xd.n,
            },
        ))
    }

    /// Class probabilities only, discarding the backward cache.
    pub fn probabilities(&self, x: &Tensor4) -> Result<Tensor4> {
        Ok(self.forward(x)?.0)
    }

    /// Arg-max class per pixel.
    pub fn predict(&self, x: &Tensor4) -> Result<ClassMap> {
        Ok(argmax_channel(&self.probabilities(x)?))
    }

    /// Gradients of `Σ grad_probs ⊙ probs` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, grad_probs: &Tensor4) -> Result<Gradients> {
        contract!(
            cache.revision == self.revision,
            "forward cache is stale: taken at parameter revision {}, network is at {}",
            cache.revision,
            self.revision
        );
        contract!(
            cache.entries.len() == self.layers.len(),
            "forward cache has {} entries for a {}-layer network",
            cache.entries.len(),
            self.layers.len()
        );
        let (_, h, w) = self.config.input_dims;
        let want = Dims::new(cache.batch, self.config.num_classes, h, w);
        contract!(
            grad_probs.dims() == want,
            "gradient of probabilities has dims {}, expected {want}",
            grad_probs.dims()
        );

        let mut grads = Vec::new();
        let mut g = grad_probs.clone();
        for (i, (layer, entry)) in self.layers.iter().zip(&cache.entries).enumerate().rev() {
            g = match (layer, entry) {
                (Layer::Conv(p), LayerCache::Conv(c)) => {
                    let cg = conv2d_backward(&g, c, p)?;
                    grads.push(ParamGrads {
                        layer_index: i,
                        weights: cg.weights,
                        bias: cg.bias,
                    });
                    cg.input
                }
                (Layer::Relu, LayerCache::Relu(c)) => relu_backward(&g, c)?,
                (Layer::MaxPool { depth }, LayerCache::MaxPool { depth: d }) if depth == d => {
                    maxpool2x2_backward(&g, &cache.pools[*depth])?
                }
                (Layer::Unpool { depth }, LayerCache::Unpool { depth: d }) if depth == d => {
                    unpool2x2_backward(&g, &cache.pools[*depth])?
                }
                (Layer::Softmax, LayerCache::Softmax(c)) => softmax_backward(&g, c)?,
                (layer, _) => {
                    return Err(Error::Contract(format!(
                        "forward cache entry {i} does not belong to a {} layer",
                        layer.kind()
                    )))
                }
            };
        }
        grads.reverse();
        Ok(Gradients {
            params: grads,
            input: g,
        })
    }
}

/// Per-layer forward state.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv(ConvCache),
    Relu(ReluCache),
    MaxPool { depth: usize },
    Unpool { depth: usize },
    Softmax(SoftmaxCache),
}

/// Everything [`Network::backward`] needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    entries: Vec<LayerCache>,
    pools: Vec<PoolIndices>,
    revision: u64,
    batch: usize,
}

impl ForwardCache {
    pub fn entries(&self) -> &[LayerCache] {
        &self.entries
    }

    /// Indices recorded by each encoder pool, shallowest first.
    pub fn pool_indices(&self) -> &[PoolIndices] {
        &self.pools
    }
}

/// Gradient of one convolution's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layer_index: usize,
    pub weights: Tensor4,
    pub bias: Vec<f64>,
}

/// Parameter gradients in layer order, plus the gradient at the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<ParamGrads>,
    pub input: Tensor4,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(h: usize, w: usize, filters: Vec<usize>) -> NetworkConfig {
        NetworkConfig {
            input_dims: (1, h, w),
            encoder_filters: filters,
            kernel_size: 3,
            num_classes: 2,
            decoder_order: DecoderOrder::Paper,
        }
    }

    #[test]
    fn xavier_sigma_examples() {
        assert!((xavier_sigma(3 * 3 * 8) - 0.117_851_130_197_757_9).abs() < 1e-12);
        assert_eq!(xavier_sigma(1), 1.0);
    }

    #[test]
    fn xavier_bank_variance() {
        let p = xavier_conv(&mut Rng::new(21), 128, 64, 3).unwrap();
        let n = p.weights.len() as f64;
        let mean = p.weights.sum() / n;
        let var = p.weights.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 1.0 / 576.0;
        assert!((var - target).abs() <= 0.05 * target, "{var} vs {target}");
        assert!(p.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn config_errors() {
        let err = build_network(&tiny(12, 16, vec![4, 4, 4]), &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("2^3 = 8"), "{err}");
        assert!(tiny(8, 8, vec![]).validate().is_err());
        let mut c = tiny(8, 8, vec![2]);
        c.kernel_size = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn segnet_lite_parameter_count() {
        // enc 224 + 1168 + 4640, dec 4624 + 1160 + 584, head 146
        let cfg = NetworkConfig::segnet_lite(160, 320);
        assert_eq!(cfg.parameter_count(), 12_546);
        let net = Network::zeroed(&cfg).unwrap();
        assert_eq!(net.parameter_count(), 12_546);
    }

    #[test]
    fn layer_layout_and_mirroring() {
        let net = Network::zeroed(&tiny(8, 8, vec![2, 3])).unwrap();
        let kinds: Vec<_> = net.layers().iter().map(Layer::kind).collect();
        assert_eq!(
            kinds,
            [
                "conv", "relu", "maxpool", "conv", "relu", "maxpool", "unpool", "relu", "conv",
                "unpool", "relu", "conv", "conv", "softmax"
            ]
        );
        assert_eq!(net.layers()[6], Layer::Unpool { depth: 1 });
        assert_eq!(net.layers()[9], Layer::Unpool { depth: 0 });

        let mut cfg = tiny(8, 8, vec![2, 3]);
        cfg.decoder_order = DecoderOrder::Conventional;
        let net = Network::zeroed(&cfg).unwrap();
        assert_eq!(net.layers()[7].kind(), "conv");
        assert_eq!(net.layers()[8].kind(), "relu");
    }

    #[test]
    fn forward_shapes_and_softmax() {
        let mut cfg = NetworkConfig::segnet_lite(32, 64);
        cfg.encoder_filters = vec![8, 16];
        let net = build_network(&cfg, &mut Rng::new(4)).unwrap();
        let x = sample_gaussian(&mut Rng::new(5), net.input_dims(1), 1.0).unwrap();
        let (p, cache) = net.forward(&x).unwrap();
        assert_eq!(p.dims(), Dims::new(1, 2, 32, 64));
        for y in 0..32 {
            for xx in 0..64 {
                assert!((p.get(0, 0, y, xx) + p.get(0, 1, y, xx) - 1.0).abs() < 1e-12);
            }
        }
        let pools = cache.pool_indices();
        assert_eq!(pools[0].dims(), Dims::new(1, 8, 16, 32));
        assert_eq!(pools[1].dims(), Dims::new(1, 16, 8, 16));
    }

    #[test]
    fn zero_input_gives_half() {
        let net = build_network(&NetworkConfig::segnet_lite(16, 32), &mut Rng::new(1)).unwrap();
        let x = Tensor4::zeros(net.input_dims(2)).unwrap();
        let p = net.probabilities(&x).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_rejects_wrong_dims() {
        let net = Network::zeroed(&tiny(8, 8, vec![2])).unwrap();
        let x = Tensor4::zeros(Dims::new(1, 1, 8, 4)).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_zero_grad_and_shapes() {
        let net = build_network(&tiny(8, 8, vec![2, 3]), &mut Rng::new(2)).unwrap();
        let x = sample_gaussian(&mut Rng::new(3), net.input_dims(2), 1.0).unwrap();
        let (p, cache) = net.forward(&x).unwrap();
        let g = net
            .backward(&cache, &Tensor4::zeros(p.dims()).unwrap())
            .unwrap();
        assert_eq!(g.params.len(), net.conv_layers().count());
        for (pg, (i, params)) in g.params.iter().zip(net.conv_layers()) {
            assert_eq!(pg.layer_index, i);
            assert_eq!(pg.weights.dims(), params.weights.dims());
            assert_eq!(pg.bias.len(), params.bias.len());
            assert!(pg.weights.data().iter().all(|&v| v == 0.0));
            assert!(pg.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_rejects_stale_or_foreign_cache() {
        let cfg = tiny(8, 8, vec![2]);
        let mut net = build_network(&cfg, &mut Rng::new(2)).unwrap();
        let x = sample_gaussian(&mut Rng::new(3), net.input_dims(1), 1.0).unwrap();
        let (p, cache) = net.forward(&x).unwrap();
        let g = Tensor4::zeros(p.dims()).unwrap();
        net.conv_layers_mut().for_each(|_| {});
        assert!(matches!(net.backward(&cache, &g), Err(Error::Contract(_))));

        let other = build_network(&tiny(8, 8, vec![2, 2]), &mut Rng::new(2)).unwrap();
        let (_, foreign) = other.forward(&x).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        assert!(net.backward(&cache, &g).is_ok());
        assert!(matches!(net.backward(&foreign, &g), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = build_network(&NetworkConfig::segnet_lite(16, 32), &mut Rng::new(9)).unwrap();
        let x = sample_gaussian(&mut Rng::new(10), net.input_dims(3), 1.0).unwrap();
        assert_eq!(net.probabilities(&x).unwrap(), net.probabilities(&x).unwrap());
    }
}
