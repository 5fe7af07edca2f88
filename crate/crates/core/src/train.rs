//! Adam, patch batching and the joint pretraining loop.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::degrade::{DegradationKind, DegradedPair, CHANNELS, MIN_SIDE};
use crate::error::{Error, Result};
use crate::metrics::{degraded_baseline, evaluate, MetricReport};
use crate::model::RestorationModel;
use crate::rng::{rng_from, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moment buffers are sized on the first step
/// and must match the parameter shapes from then on.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Moment buffers, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    pub fn restore_state(&mut self, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>, steps: u64) -> Result<()> {
        if first.len() != second.len()
            || first.iter().zip(&second).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::InvalidArgument("moment buffers disagree in shape".into()));
        }
        self.first = first;
        self.second = second;
        self.steps = steps;
        Ok(())
    }

    /// One update of `params` from their accumulated gradients, which are
    /// zeroed afterwards.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len()
            || params.iter().zip(&self.first).any(|(p, m)| p.len() != m.len())
        {
            return Err(Error::InvalidArgument(
                "parameter layout changed between optimizer steps".into(),
            ));
        }
        self.steps += 1;
        let OptimizerConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
            let (values, grads) = p.values_and_grad_mut();
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                grads[i] = 0.0;
            }
        }
        Ok(())
    }

    /// Updates every model parameter. Fails if no gradients were collected
    /// since the previous step.
    pub fn step(&mut self, model: &mut RestorationModel) -> Result<()> {
        if !model.has_grads() {
            return Err(Error::MissingGradient(
                model.named_params().next().map(|(n, _)| n).unwrap_or_default(),
            ));
        }
        self.update(model.params_mut())?;
        model.mark_grads_consumed();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Side of the square training patches.
    pub crop: usize,
    /// Random horizontal and vertical flips.
    pub flips: bool,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            crop: 32,
            flips: true,
            seed: 0,
            optimizer: OptimizerConfig::default().with_lr(5e-4),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if self.crop < MIN_SIDE {
            return Err(Error::Config(format!("train.crop must be at least {MIN_SIDE}")));
        }
        self.optimizer.validate()
    }
}

/// Splits off the last `fraction` of each kind (at least one pair) as a
/// held-out evaluation set. Returns `(train, heldout)`.
pub fn split_heldout(pairs: &[DegradedPair], fraction: f64) -> Result<(Vec<DegradedPair>, Vec<DegradedPair>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("held-out fraction must lie in (0, 1), got {fraction}")));
    }
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for kind in DegradationKind::ALL {
        let of_kind: Vec<&DegradedPair> = pairs.iter().filter(|p| p.kind == kind).collect();
        if of_kind.is_empty() {
            continue;
        }
        let held = ((of_kind.len() as f64 * fraction).ceil() as usize).clamp(1, of_kind.len());
        let cut = of_kind.len() - held;
        train.extend(of_kind[..cut].iter().map(|&p| p.clone()));
        heldout.extend(of_kind[cut..].iter().map(|&p| p.clone()));
    }
    Ok((train, heldout))
}

/// Copies a `size×size` window at (`top`, `left`) of a `C×H×W` image,
/// optionally mirrored.
pub fn crop_patch(img: &Tensor, top: usize, left: usize, size: usize, hflip: bool, vflip: bool) -> Result<Tensor> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "crop",
                reason: format!("expected C×H×W, got {:?}", img.shape()),
            })
        }
    };
    if top + size > h || left + size > w {
        return Err(Error::InvalidArgument(format!(
            "crop {size}x{size} at ({top}, {left}) exceeds {h}x{w} image"
        )));
    }
    let src = img.values();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            let sy = top + if vflip { size - 1 - y } else { y };
            for x in 0..size {
                let sx = left + if hflip { size - 1 - x } else { x };
                out.push(src[ch * h * w + sy * w + sx]);
            }
        }
    }
    Tensor::new(&[c, size, size], out)
}

/// An `N×3×crop×crop` batch of degraded/clean patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub degraded: Tensor,
    pub clean: Tensor,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.degraded.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Random crops (and flips) of `pairs`, the same window applied to
    /// degraded and clean image.
    pub fn sample(pairs: &[&DegradedPair], crop: usize, flips: bool, rng: &mut Rng) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("cannot build an empty batch".into()));
        }
        let mut degraded = Vec::with_capacity(pairs.len());
        let mut clean = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let (h, w) = (pair.clean.shape()[1], pair.clean.shape()[2]);
            if crop > h || crop > w {
                return Err(Error::Config(format!("crop {crop} exceeds {h}x{w} corpus image")));
            }
            let top = rng.random_range(0..=h - crop);
            let left = rng.random_range(0..=w - crop);
            let (hf, vf) = if flips {
                (rng.random_bool(0.5), rng.random_bool(0.5))
            } else {
                (false, false)
            };
            degraded.push(crop_patch(&pair.degraded, top, left, crop, hf, vf)?);
            clean.push(crop_patch(&pair.clean, top, left, crop, hf, vf)?);
        }
        Ok(Self {
            degraded: Tensor::stack(&degraded.iter().collect::<Vec<_>>())?,
            clean: Tensor::stack(&clean.iter().collect::<Vec<_>>())?,
        })
    }

    /// Whole images, uncropped.
    pub fn whole(pairs: &[&DegradedPair]) -> Result<Self> {
        Ok(Self {
            degraded: Tensor::stack(&pairs.iter().map(|p| &p.degraded).collect::<Vec<_>>())?,
            clean: Tensor::stack(&pairs.iter().map(|p| &p.clean).collect::<Vec<_>>())?,
        })
    }
}

/// One supervised step: L1 between restored patches and clean patches.
pub fn train_step(model: &mut RestorationModel, batch: &PatchBatch, opt: &mut Adam) -> Result<f64> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true)?;
    let x = g.constant(&batch.degraded)?;
    let y = g.constant(&batch.clean)?;
    let restored = model.forward(&mut g, &params, x)?;
    let loss = g.l1_loss(restored, y)?;
    let value = g.item(loss)?;
    g.backward(loss)?;
    model.collect_grads(&g, &params)?;
    opt.step(model)?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch; absent for the untrained model.
    pub loss: Option<f64>,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RestorationModel,
    /// Metrics of the degraded inputs (the identity restoration).
    pub input_baseline: MetricReport,
    /// Epoch 0 is the model as passed in.
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_report(&self) -> &MetricReport {
        &self.history.last().expect("history holds epoch 0").report
    }
}

/// Trains on a mixture of every kind present in `train`. Batches are drawn
/// from one shuffled pass over all pairs per epoch, so kinds are mixed in
/// proportion to their counts.
pub fn fit(
    mut model: RestorationModel,
    train: &[DegradedPair],
    heldout: &[DegradedPair],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut opt = Adam::new(cfg.optimizer)?;
    let input_baseline = degraded_baseline(heldout, "INPUT")?;
    let first = EpochRecord {
        epoch: 0,
        loss: None,
        report: evaluate(&model, heldout, "epoch 0")?,
    };
    observer(&first);
    let mut history = vec![first];
    let mut step_losses = Vec::new();

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = rng_from(cfg.seed, &[0x7EA1, epoch as u64]);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for idx in order.chunks(cfg.batch_size) {
            let pairs: Vec<&DegradedPair> = idx.iter().map(|&i| &train[i]).collect();
            let batch = PatchBatch::sample(&pairs, cfg.crop, cfg.flips, &mut rng)?;
            let step = step_losses.len();
            let loss = train_step(&mut model, &batch, &mut opt).map_err(|e| diverged(e, step))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss became {loss}"),
                });
            }
            step_losses.push(loss);
            total += loss;
            count += 1;
        }
        let record = EpochRecord {
            epoch,
            loss: Some(total / count as f64),
            report: evaluate(&model, heldout, &format!("epoch {epoch}"))?,
        };
        observer(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        model,
        input_baseline,
        history,
        step_losses,
    })
}

pub(crate) fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Joint training of the all-in-one model on every degradation kind.
pub fn pretrain(
    model: RestorationModel,
    train: &[DegradedPair],
    heldout: &[DegradedPair],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    for kind in DegradationKind::ALL {
        if !train.iter().any(|p| p.kind == kind) {
            return Err(Error::InvalidArgument(format!(
                "pretraining corpus has no {kind} pairs"
            )));
        }
    }
    if train.iter().any(|p| p.clean.shape().first() != Some(&CHANNELS)) {
        return Err(Error::InvalidArgument("corpus images must have 3 channels".into()));
    }
    fit(model, train, heldout, cfg, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{build_corpus, CorpusConfig, DegradationParams};
    use crate::model::ModelConfig;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps) ≈ lr
        let mut p = Tensor::scalar(0.5).with_grad();
        let mut opt = Adam::new(OptimizerConfig::default().with_lr(0.1)).unwrap();
        p.accumulate_grad(&[1.0]).unwrap();
        opt.update([&mut p]).unwrap();
        let expected = 0.5 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.values()[0] - expected).abs() < 1e-15);
        assert_eq!(p.grad(), &[0.0]);

        // constant gradient keeps the bias-corrected step at ≈ lr
        p.accumulate_grad(&[1.0]).unwrap();
        opt.update([&mut p]).unwrap();
        assert!((p.values()[0] - (expected - 0.1)).abs() < 1e-6);
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap().with_grad();
        let before = p.clone();
        let mut opt = Adam::new(OptimizerConfig::default()).unwrap();
        for _ in 0..3 {
            opt.update([&mut p]).unwrap();
        }
        assert_eq!(p.values(), before.values());
    }

    #[test]
    fn adam_rejects_missing_gradients() {
        let mut model = RestorationModel::new(ModelConfig::default()).unwrap();
        let mut opt = Adam::new(OptimizerConfig::default()).unwrap();
        assert!(matches!(opt.step(&mut model), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn optimizer_config_validation() {
        assert!(Adam::new(OptimizerConfig { beta1: 1.0, ..Default::default() }).is_err());
        assert!(Adam::new(OptimizerConfig::default().with_lr(0.0)).is_err());
    }

    #[test]
    fn crop_and_flip_pixels() {
        let img = Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = crop_patch(&img, 0, 1, 2, false, false).unwrap();
        assert_eq!(c.values(), &[2.0, 3.0, 5.0, 6.0]);
        let c = crop_patch(&img, 0, 1, 2, true, false).unwrap();
        assert_eq!(c.values(), &[3.0, 2.0, 6.0, 5.0]);
        let c = crop_patch(&img, 0, 1, 2, false, true).unwrap();
        assert_eq!(c.values(), &[5.0, 6.0, 2.0, 3.0]);
        assert!(crop_patch(&img, 1, 0, 2, false, false).is_err());
    }

    #[test]
    fn batch_crops_align_degraded_and_clean() {
        let cfg = CorpusConfig {
            per_kind: 2,
            height: 24,
            width: 24,
            seed: 1,
        };
        let params = DegradationParams {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let corpus = build_corpus(&cfg, &params).unwrap();
        // zero-sigma noise pairs have degraded == clean, so aligned crops match
        let noise: Vec<&DegradedPair> = corpus.iter().filter(|p| p.kind == DegradationKind::Noise).collect();
        let mut rng = rng_from(3, &[]);
        let b = PatchBatch::sample(&noise, 16, true, &mut rng).unwrap();
        assert_eq!(b.degraded.shape(), &[2, 3, 16, 16]);
        assert_eq!(b.degraded, b.clean);
    }

    #[test]
    fn heldout_split_takes_tail_of_each_kind() {
        let cfg = CorpusConfig {
            per_kind: 10,
            height: 16,
            width: 16,
            seed: 1,
        };
        let corpus = build_corpus(&cfg, &DegradationParams::default()).unwrap();
        let (train, held) = split_heldout(&corpus, 0.1).unwrap();
        assert_eq!(train.len(), 27);
        assert_eq!(held.len(), 3);
        for h in &held {
            assert_eq!(h.index % 10, 9);
            assert!(train.iter().all(|t| t.index != h.index));
        }
    }

    #[test]
    fn pretrain_needs_every_kind() {
        let cfg = CorpusConfig {
            per_kind: 3,
            height: 16,
            width: 16,
            seed: 1,
        };
        let corpus = build_corpus(&cfg, &DegradationParams::default()).unwrap();
        let no_rain: Vec<DegradedPair> =
            corpus.iter().filter(|p| p.kind != DegradationKind::Rain).cloned().collect();
        let model = RestorationModel::new(ModelConfig { width: 8, depth: 2, seed: 0 }).unwrap();
        let err = pretrain(model, &no_rain, &no_rain, &TrainConfig::default(), &mut |_| {});
        assert!(err.is_err());
    }
}
