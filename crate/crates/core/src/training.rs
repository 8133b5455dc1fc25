//! Mean-squared-error loss, plain SGD, and the epoch/batch training loop
//! with per-epoch learning-curve records.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{batch_iterator, stack_samples, Sample};
use crate::error::{contract, Error, Result};
use crate::model::{to_storage, Gradients, Network};
use crate::par;
use crate::tensor::{argmax_channel, Tensor4};

/// Normalization of the squared-error sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossNorm {
    /// Divide by the number of images only.
    #[default]
    PerImage,
    /// Divide by the number of images and by the pixel-channel count.
    PerPixel,
}

/// Squared error summed over every pixel-channel position and divided by
/// the batch size (and, with [`LossNorm::PerPixel`], by the positions per
/// image). Returns the loss and its gradient with respect to `pred`.
pub fn mse_loss(pred: &Tensor4, target: &Tensor4, norm: LossNorm) -> Result<(f64, Tensor4)> {
    let d = pred.dims();
    contract!(
        target.dims() == d,
        "loss target has dims {}, prediction has {d}",
        target.dims()
    );
    let denom = match norm {
        LossNorm::PerImage => d.n as f64,
        LossNorm::PerPixel => (d.n * d.item()) as f64,
    };
    let mut per_image = Vec::with_capacity(d.n);
    for n in 0..d.n {
        let s: f64 = pred
            .item(n)
            .iter()
            .zip(target.item(n))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        per_image.push(s);
    }
    let loss = per_image.iter().sum::<f64>() / denom;
    let scale = 2.0 / denom;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| scale * (p - t))
        .collect();
    Ok((loss, Tensor4::from_raw(d, grad)))
}

/// `p ← p − lr · ∂L/∂p` for every parameter, stored at single precision.
pub fn sgd_step(net: &mut Network, grads: &Gradients, learning_rate: f64) -> Result<()> {
    contract!(
        learning_rate >= 0.0 && learning_rate.is_finite(),
        "learning rate must be finite and non-negative, got {learning_rate}"
    );
    let expected: Vec<_> = net
        .conv_layers()
        .map(|(i, p)| (i, p.weights.dims(), p.bias.len()))
        .collect();
    let got: Vec<_> = grads
        .params
        .iter()
        .map(|g| (g.layer_index, g.weights.dims(), g.bias.len()))
        .collect();
    contract!(
        expected == got,
        "gradient set {got:?} does not match network parameters {expected:?}"
    );
    for ((_, p), g) in net.conv_layers_mut().zip(&grads.params) {
        for (w, gw) in p.weights.data_mut().iter_mut().zip(g.weights.data()) {
            *w = to_storage(*w - learning_rate * gw);
        }
        for (b, gb) in p.bias.iter_mut().zip(&g.bias) {
            *b = to_storage(*b - learning_rate * gb);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_norm: LossNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 20,
            learning_rate: 0.1,
            seed: 0,
            loss_norm: LossNorm::PerImage,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One learning-curve row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub mean_loss: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6}",
            self.epoch, self.train_accuracy, self.val_accuracy, self.mean_loss
        )
    }
}

pub const CURVES_HEADER: &str = "epoch,train_acc,val_acc,mean_loss";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurves {
    pub records: Vec<EpochRecord>,
}

impl LearningCurves {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CURVES_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Writes curve rows as they are produced, flushing after each epoch.
pub struct CurveLog {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl CurveLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        log.write_line(CURVES_HEADER)?;
        Ok(log)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<()> {
        self.write_line(&record.csv_line())
    }
}

/// Aggregate result of [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub pixel_accuracy: f64,
    pub mean_loss: f64,
    pub correct_pixels: u64,
    pub total_pixels: u64,
}

/// Pixel accuracy of arg-max predictions and the mean per-batch loss over
/// `samples`, processed in order in batches of `batch_size`.
pub fn evaluate(
    net: &Network,
    samples: &[Sample],
    batch_size: usize,
    norm: LossNorm,
) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let chunks: Vec<&[Sample]> = samples.chunks(batch_size).collect();
    let per_batch = par::map_indices(chunks.len(), |i| -> Result<(f64, u64, u64)> {
        let (images, masks) = stack_samples(chunks[i])?;
        let probs = net.probabilities(&images)?;
        let (loss, _) = mse_loss(&probs, &masks, norm)?;
        let pred = argmax_channel(&probs);
        let truth = argmax_channel(&masks);
        let correct = pred
            .data
            .iter()
            .zip(&truth.data)
            .filter(|(a, b)| a == b)
            .count() as u64;
        Ok((loss, correct, pred.data.len() as u64))
    });
    let mut loss_sum = 0.0;
    let (mut correct, mut total) = (0u64, 0u64);
    for r in per_batch {
        let (l, c, t) = r?;
        loss_sum += l;
        correct += c;
        total += t;
    }
    Ok(EvalSummary {
        pixel_accuracy: correct as f64 / total as f64,
        mean_loss: loss_sum / chunks.len() as f64,
        correct_pixels: correct,
        total_pixels: total,
    })
}

/// Forward, loss, backward, and update on one batch. Returns the batch loss.
pub fn train_step(
    net: &mut Network,
    images: &Tensor4,
    masks: &Tensor4,
    learning_rate: f64,
    norm: LossNorm,
) -> Result<f64> {
    let (probs, cache) = net.forward(images)?;
    let (loss, grad) = mse_loss(&probs, masks, norm)?;
    let grads = net.backward(&cache, &grad)?;
    sgd_step(net, &grads, learning_rate)?;
    Ok(loss)
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch SGD, calling `on_epoch`
/// after each epoch's evaluation.
pub fn train_with_observer(
    net: &mut Network,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<LearningCurves> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let want = net.input_dims(1);
    for s in train_set.iter().chain(val_set) {
        if s.image.dims() != want {
            return Err(Error::Config(format!(
                "sample {} has dims {}, network expects {want}",
                s.source_id,
                s.image.dims()
            )));
        }
    }

    let mut curves = LearningCurves::default();
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in batch_iterator(train_set, cfg.batch_size, cfg.seed, epoch as u64) {
            let (images, masks) = batch?;
            loss_sum += train_step(net, &images, &masks, cfg.learning_rate, cfg.loss_norm)?;
            batches += 1;
        }
        let train_eval = evaluate(net, train_set, cfg.batch_size, cfg.loss_norm)?;
        let val_eval = evaluate(net, val_set, cfg.batch_size, cfg.loss_norm)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_accuracy: train_eval.pixel_accuracy,
            val_accuracy: val_eval.pixel_accuracy,
            mean_loss: loss_sum / batches as f64,
        };
        on_epoch(&record)?;
        curves.records.push(record);
    }
    Ok(curves)
}

pub fn train(
    net: &mut Network,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<LearningCurves> {
    train_with_observer(net, train_set, val_set, cfg, |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_lane, one_hot_encode, BinaryMask};
    use crate::model::{build_network, NetworkConfig};
    use crate::tensor::{sample_gaussian, Dims, Rng};

    fn t(dims: Dims, data: &[f64]) -> Tensor4 {
        Tensor4::from_vec(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let x = sample_gaussian(&mut Rng::new(1), Dims::new(2, 2, 3, 3), 1.0).unwrap();
        assert_eq!(mse_loss(&x, &x, LossNorm::PerImage).unwrap().0, 0.0);

        let pred = t(Dims::new(1, 1, 1, 3), &[1., 0., 1.]);
        let target = Tensor4::zeros(pred.dims()).unwrap();
        let (loss, grad) = mse_loss(&pred, &target, LossNorm::PerImage).unwrap();
        assert_eq!(loss, 2.0);
        assert_eq!(grad.data(), &[2., 0., 2.]);

        // per-image squared sums 2 and 4
        let pred = t(Dims::new(2, 1, 1, 2), &[1., 1., 2., 0.]);
        let target = Tensor4::zeros(pred.dims()).unwrap();
        assert_eq!(mse_loss(&pred, &target, LossNorm::PerImage).unwrap().0, 3.0);
        assert_eq!(mse_loss(&pred, &target, LossNorm::PerPixel).unwrap().0, 1.5);

        let other = Tensor4::zeros(Dims::new(2, 1, 2, 1)).unwrap();
        assert!(mse_loss(&pred, &other, LossNorm::PerImage).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let pred = sample_gaussian(&mut rng, Dims::new(2, 2, 3, 4), 1.0).unwrap();
        let target = sample_gaussian(&mut rng, pred.dims(), 1.0).unwrap();
        for norm in [LossNorm::PerImage, LossNorm::PerPixel] {
            let (_, grad) = mse_loss(&pred, &target, norm).unwrap();
            for i in 0..pred.len() {
                let h = 1e-5;
                let mut plus = pred.clone();
                plus.data_mut()[i] += h;
                let mut minus = pred.clone();
                minus.data_mut()[i] -= h;
                let fd = (mse_loss(&plus, &target, norm).unwrap().0
                    - mse_loss(&minus, &target, norm).unwrap().0)
                    / (2.0 * h);
                let a = grad.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-6, "index {i}: {a} vs {fd}");
            }
        }
    }

    fn tiny_net(seed: u64) -> Network {
        let mut cfg = NetworkConfig::segnet_lite(8, 8);
        cfg.encoder_filters = vec![2];
        build_network(&cfg, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn sgd_examples() {
        let mut net = tiny_net(1);
        let x = sample_gaussian(&mut Rng::new(2), net.input_dims(1), 1.0).unwrap();
        let (p, cache) = net.forward(&x).unwrap();
        let target = Tensor4::zeros(p.dims()).unwrap();
        let (_, g) = mse_loss(&p, &target, LossNorm::PerImage).unwrap();
        let grads = net.backward(&cache, &g).unwrap();

        let before = net.clone();
        sgd_step(&mut net, &grads, 0.0).unwrap();
        for ((_, a), (_, b)) in net.conv_layers().zip(before.conv_layers()) {
            assert_eq!(a, b);
        }

        let mut twin = before.clone();
        let mut net = before.clone();
        sgd_step(&mut net, &grads, 0.05).unwrap();
        sgd_step(&mut twin, &grads, 0.05).unwrap();
        assert_eq!(net, twin);

        let mut wrong = grads.clone();
        wrong.params.pop();
        assert!(sgd_step(&mut net, &wrong, 0.1).is_err());
    }

    #[test]
    fn sgd_scalar_arithmetic() {
        let mut net = tiny_net(3);
        net.conv_layers_mut().next().unwrap().1.bias[0] = 1.0;
        let (p, cache) = net.forward(&Tensor4::zeros(net.input_dims(1)).unwrap()).unwrap();
        let mut grads = net.backward(&cache, &Tensor4::zeros(p.dims()).unwrap()).unwrap();
        grads.params[0].bias[0] = 0.5;
        sgd_step(&mut net, &grads, 0.1).unwrap();
        let b = net.conv_layers().next().unwrap().1.bias[0];
        assert_eq!(b, 0.95f32 as f64);
        assert!((b - 0.95).abs() < 1e-7);
    }

    fn lane_set(n: usize, seed: u64, h: usize, w: usize) -> Vec<Sample> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| generate_synthetic_lane(&mut rng, (h, w)).unwrap()).collect()
    }

    #[test]
    fn one_epoch_one_record_and_determinism() {
        let data = lane_set(3, 5, 16, 32);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.05,
            seed: 9,
            loss_norm: LossNorm::PerImage,
        };
        let net_cfg = NetworkConfig::segnet_lite(16, 32);
        let mut a = build_network(&net_cfg, &mut Rng::new(1)).unwrap();
        let mut b = a.clone();
        let ca = train(&mut a, &data, &data[..1], &cfg).unwrap();
        let cb = train(&mut b, &data, &data[..1], &cfg).unwrap();
        assert_eq!(ca.records.len(), 1);
        assert_eq!(ca.to_csv(), cb.to_csv());
        assert_eq!(a, b);
        let r = ca.records[0];
        assert!((0.0..=1.0).contains(&r.train_accuracy));
        assert!((0.0..=1.0).contains(&r.val_accuracy));
    }

    #[test]
    fn train_rejects_bad_input() {
        let data = lane_set(2, 5, 16, 32);
        let mut net = build_network(&NetworkConfig::segnet_lite(16, 32), &mut Rng::new(1)).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut net, &[], &data, &cfg), Err(Error::Config(_))));
        assert!(matches!(train(&mut net, &data, &[], &cfg), Err(Error::Config(_))));
        let bad = TrainConfig { epochs: 0, ..cfg.clone() };
        assert!(matches!(train(&mut net, &data, &data, &bad), Err(Error::Config(_))));
        let other = lane_set(1, 5, 32, 32);
        assert!(matches!(train(&mut net, &other, &data, &cfg), Err(Error::Config(_))));
        assert!(matches!(
            evaluate(&net, &[], 1, LossNorm::PerImage),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn evaluate_counts_background_predictor() {
        // Final conv with zero weights and a large background bias.
        let mut cfg = NetworkConfig::segnet_lite(4, 4);
        cfg.encoder_filters = vec![1];
        let mut net = build_network(&cfg, &mut Rng::new(1)).unwrap();
        {
            let (_, head) = net.conv_layers_mut().last().unwrap();
            head.weights.data_mut().iter_mut().for_each(|w| *w = 0.0);
            head.bias = vec![5.0, -5.0];
        }
        let mut mask = BinaryMask::zeros(4, 4);
        for i in [0usize, 5, 10, 15] {
            mask.data[i] = 1;
        }
        let sample = Sample {
            image: Tensor4::zeros(net.input_dims(1)).unwrap(),
            mask: one_hot_encode(&mask).unwrap(),
            source_id: "quarter".into(),
        };
        let s = evaluate(&net, &[sample], 1, LossNorm::PerImage).unwrap();
        assert_eq!(s.pixel_accuracy, 0.75);
        assert_eq!((s.correct_pixels, s.total_pixels), (12, 16));
    }
}
