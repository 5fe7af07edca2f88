//! Forgetting one degradation kind.
//!
//! The corpus is split by label into a forget set (the chosen kind) and a
//! retain set (everything else). Each optimizer step then minimizes a
//! single weighted sum over one forget batch and one retain batch:
//!
//! ```text
//! total = −w_ins · L(N(x_f), y_f)      instance term, ascends the error on forget pairs
//!         + w_adv · L(N(x_f), y'_f)    adversarial term, y' = clamp(y_f + U(−0.5, 0.5), 0, 1)
//!         + w_retain · L(N(x_r), y_r)  anchor on retained kinds
//! ```
//!
//! with `L` the L1 loss (or MSE when configured). The adversarial targets
//! `y'` are redrawn every step.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::degrade::{make_adversarial_target, DegradationKind, DegradedPair};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{ModelConfig, RestorationModel};
use crate::rng::{derive_seed, rng_from};
use crate::train::{diverged, fit, Adam, EpochRecord, OptimizerConfig, PatchBatch, TrainConfig, TrainOutcome};

/// Disjoint, exhaustive split of a corpus into forget and retain pairs.
#[derive(Debug, Clone)]
pub struct DatasetPartition {
    forget: Vec<DegradedPair>,
    retain: Vec<DegradedPair>,
    forget_kind: DegradationKind,
    n_kinds: usize,
}

impl DatasetPartition {
    pub fn forget(&self) -> &[DegradedPair] {
        &self.forget
    }

    pub fn retain(&self) -> &[DegradedPair] {
        &self.retain
    }

    pub fn forget_kind(&self) -> DegradationKind {
        self.forget_kind
    }

    /// Number of distinct kinds in the partitioned corpus.
    pub fn n_kinds(&self) -> usize {
        self.n_kinds
    }

    pub fn retained_kinds(&self) -> Vec<DegradationKind> {
        let kinds: BTreeSet<_> = self.retain.iter().map(|p| p.kind).collect();
        kinds.into_iter().collect()
    }
}

/// Splits `corpus` by label: every `forget_kind` pair goes to the forget
/// set, every other pair to the retain set.
pub fn partition(corpus: &[DegradedPair], forget_kind: DegradationKind) -> Result<DatasetPartition> {
    let (forget, retain): (Vec<_>, Vec<_>) = corpus
        .iter()
        .cloned()
        .partition(|p| p.kind == forget_kind);
    if forget.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "corpus contains no {forget_kind} pairs to forget"
        )));
    }
    if retain.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "corpus contains only {forget_kind} pairs; nothing would be retained"
        )));
    }
    let n_kinds = corpus.iter().map(|p| p.kind).collect::<BTreeSet<_>>().len();
    Ok(DatasetPartition {
        forget,
        retain,
        forget_kind,
        n_kinds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    /// Mean squared error. Known to collapse the model when used for the
    /// forgetting terms.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub w_adv: f64,
    pub w_ins: f64,
    pub w_retain: f64,
    /// Share of the retain set sampled afresh each epoch.
    pub retain_fraction: f64,
    pub epochs: usize,
    pub enable_ins: bool,
    pub enable_adv: bool,
    pub loss_kind: LossKind,
    pub seed: u64,
    pub batch_size: usize,
    pub crop: usize,
    pub flips: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            w_adv: 1.0,
            w_ins: 1.0,
            w_retain: 1.0,
            retain_fraction: 0.25,
            epochs: 2,
            enable_ins: true,
            enable_adv: true,
            loss_kind: LossKind::L1,
            seed: 0,
            batch_size: 8,
            crop: 32,
            flips: true,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.enable_ins && !self.enable_adv {
            return Err(Error::Config(
                "at least one of unlearn.enable_ins and unlearn.enable_adv must be set".into(),
            ));
        }
        for (name, w) in [("w_adv", self.w_adv), ("w_ins", self.w_ins), ("w_retain", self.w_retain)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("unlearn.{name} must be non-negative, got {w}")));
            }
        }
        if !(self.retain_fraction > 0.0 && self.retain_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "unlearn.retain_fraction must lie in (0, 1], got {}",
                self.retain_fraction
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("unlearn.epochs and unlearn.batch_size must be positive".into()));
        }
        if self.crop < crate::degrade::MIN_SIDE {
            return Err(Error::Config(format!(
                "unlearn.crop must be at least {}",
                crate::degrade::MIN_SIDE
            )));
        }
        self.optimizer.validate()
    }
}

/// Forget-set patches with their adversarial targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgetBatch {
    pub degraded: Tensor,
    pub clean: Tensor,
    pub adversarial: Tensor,
}

impl ForgetBatch {
    /// Attaches freshly drawn adversarial targets to `patches`.
    pub fn new(patches: PatchBatch, seed: u64) -> Result<Self> {
        let adversarial = make_adversarial_target(&patches.clean, seed)?;
        Self::with_targets(patches, adversarial)
    }

    pub fn with_targets(patches: PatchBatch, adversarial: Tensor) -> Result<Self> {
        if adversarial.shape() != patches.clean.shape() {
            return Err(Error::ShapeMismatch {
                op: "ForgetBatch",
                left: patches.clean.shape().to_vec(),
                right: adversarial.shape().to_vec(),
            });
        }
        Ok(Self {
            degraded: patches.degraded,
            clean: patches.clean,
            adversarial,
        })
    }
}

/// Component values of one objective evaluation. `instance` already
/// carries its minus sign and is 0 when disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub instance: f64,
    pub adversarial: f64,
    pub retain: f64,
    pub total: f64,
}

/// Restored outputs and targets entering the objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs {
    pub forget_restored: Var,
    pub forget_clean: Var,
    pub adversarial: Var,
    pub retain: Option<(Var, Var)>,
}

fn loss(g: &mut Graph, kind: LossKind, pred: Var, target: Var) -> Result<Var> {
    match kind {
        LossKind::L1 => g.l1_loss(pred, target),
        LossKind::L2 => g.mse_loss(pred, target),
    }
}

/// Records the combined unlearning objective on `g` and returns the total
/// together with its components.
pub fn objective(g: &mut Graph, inputs: &ObjectiveInputs, cfg: &UnlearnConfig) -> Result<(Var, StepLosses)> {
    let mut terms: Vec<Var> = Vec::with_capacity(3);
    let mut values = StepLosses {
        instance: 0.0,
        adversarial: 0.0,
        retain: 0.0,
        total: 0.0,
    };
    if cfg.enable_ins {
        let l = loss(g, cfg.loss_kind, inputs.forget_restored, inputs.forget_clean)?;
        let neg = g.neg(l)?;
        values.instance = g.item(neg)?;
        terms.push(g.scale(neg, cfg.w_ins)?);
    }
    if cfg.enable_adv {
        let l = loss(g, cfg.loss_kind, inputs.forget_restored, inputs.adversarial)?;
        values.adversarial = g.item(l)?;
        terms.push(g.scale(l, cfg.w_adv)?);
    }
    if let Some((restored, clean)) = inputs.retain {
        let l = loss(g, cfg.loss_kind, restored, clean)?;
        values.retain = g.item(l)?;
        terms.push(g.scale(l, cfg.w_retain)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    values.total = g.item(total)?;
    Ok((total, values))
}

/// One combined update: forward both batches through shared parameters,
/// one backward over the summed objective, one Adam step.
pub fn unlearn_step(
    model: &mut RestorationModel,
    forget: &ForgetBatch,
    retain: Option<&PatchBatch>,
    cfg: &UnlearnConfig,
    opt: &mut Adam,
) -> Result<StepLosses> {
    cfg.validate()?;
    if forget.degraded.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::InvalidArgument("forget batch is empty".into()));
    }
    let mut g = Graph::new();
    let params = model.bind(&mut g, true)?;
    let xf = g.constant(&forget.degraded)?;
    let yf = g.constant(&forget.clean)?;
    let adv = g.constant(&forget.adversarial)?;
    let forget_restored = model.forward(&mut g, &params, xf)?;
    let retain = match retain {
        Some(batch) if cfg.w_retain > 0.0 => {
            let xr = g.constant(&batch.degraded)?;
            let yr = g.constant(&batch.clean)?;
            Some((model.forward(&mut g, &params, xr)?, yr))
        }
        _ => None,
    };
    let inputs = ObjectiveInputs {
        forget_restored,
        forget_clean: yf,
        adversarial: adv,
        retain,
    };
    let (total, losses) = objective(&mut g, &inputs, cfg)?;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite { op: "unlearning objective" });
    }
    g.backward(total)?;
    model.collect_grads(&g, &params)?;
    opt.step(model)?;
    Ok(losses)
}

/// Held-out metrics after a fraction of the unlearning schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    /// Epochs completed, in quarter-epoch increments.
    pub epoch: f64,
    pub step: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub model: RestorationModel,
    pub before: MetricReport,
    /// Evaluations at every quarter epoch; the last one is the final model.
    pub history: Vec<ProgressRecord>,
    pub steps: Vec<StepLosses>,
}

impl UnlearnOutcome {
    pub fn after(&self) -> &MetricReport {
        self.history.last().map_or(&self.before, |r| &r.report)
    }
}

/// Runs the full unlearning schedule: `cfg.epochs` passes over the forget
/// set, each step paired with a batch from this epoch's retain subsample.
pub fn unlearn(
    mut model: RestorationModel,
    part: &DatasetPartition,
    heldout: &[DegradedPair],
    cfg: &UnlearnConfig,
    observer: &mut dyn FnMut(&ProgressRecord),
) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    let mut opt = Adam::new(cfg.optimizer)?;
    let before = evaluate(&model, heldout, "BEFORE")?;
    let forget_steps = part.forget.len().div_ceil(cfg.batch_size);
    let quarters: Vec<usize> = (1..=4).map(|q| (q * forget_steps).div_ceil(4)).collect();
    let retain_take = ((part.retain.len() as f64 * cfg.retain_fraction).round() as usize)
        .clamp(1, part.retain.len());

    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut forget_order: Vec<usize> = (0..part.forget.len()).collect();
    let mut retain_order: Vec<usize> = (0..part.retain.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = rng_from(cfg.seed, &[0x0F09, epoch as u64]);
        forget_order.shuffle(&mut rng);
        retain_order.shuffle(&mut rng);
        let retain_pool = &retain_order[..retain_take];
        let mut retain_cursor = 0;

        for (i, chunk) in forget_order.chunks(cfg.batch_size).enumerate() {
            let step = steps.len();
            let pairs: Vec<&DegradedPair> = chunk.iter().map(|&j| &part.forget[j]).collect();
            let patches = PatchBatch::sample(&pairs, cfg.crop, cfg.flips, &mut rng)?;
            let forget = ForgetBatch::new(patches, derive_seed(cfg.seed, &[0xAD7, step as u64]))?;

            let retain_pairs: Vec<&DegradedPair> = (0..cfg.batch_size.min(retain_pool.len()))
                .map(|k| &part.retain[retain_pool[(retain_cursor + k) % retain_pool.len()]])
                .collect();
            retain_cursor = (retain_cursor + retain_pairs.len()) % retain_pool.len();
            let retain = PatchBatch::sample(&retain_pairs, cfg.crop, cfg.flips, &mut rng)?;

            let losses = unlearn_step(&mut model, &forget, Some(&retain), cfg, &mut opt)
                .map_err(|e| diverged(e, step))?;
            steps.push(losses);

            if let Some(q) = quarters.iter().rposition(|&s| s == i + 1) {
                let fraction = epoch as f64 + (q + 1) as f64 / 4.0;
                let record = ProgressRecord {
                    epoch: fraction,
                    step: steps.len(),
                    report: evaluate(&model, heldout, &format!("epoch {fraction:.2}"))?,
                };
                observer(&record);
                history.push(record);
            }
        }
    }
    Ok(UnlearnOutcome {
        model,
        before,
        history,
        steps,
    })
}

/// Baseline that never saw the forgotten kind: a fresh model trained on
/// the retain set alone.
pub fn retrain(
    config: ModelConfig,
    part: &DatasetPartition,
    heldout: &[DegradedPair],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    fit(RestorationModel::new(config)?, &part.retain, heldout, cfg, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{build_corpus, CorpusConfig, DegradationParams};

    fn corpus(per_kind: usize) -> Vec<DegradedPair> {
        let cfg = CorpusConfig {
            per_kind,
            height: 16,
            width: 16,
            seed: 5,
        };
        build_corpus(&cfg, &DegradationParams::default()).unwrap()
    }

    #[test]
    fn partition_counts() {
        let c = corpus(10);
        let p = partition(&c, DegradationKind::Haze).unwrap();
        assert_eq!(p.forget().len(), 10);
        assert_eq!(p.retain().len(), 20);
        assert_eq!(p.n_kinds(), 3);
    }

    #[test]
    fn partition_is_exact_and_disjoint() {
        let c = corpus(4);
        let p = partition(&c, DegradationKind::Rain).unwrap();
        let f: BTreeSet<usize> = p.forget().iter().map(|x| x.index).collect();
        let r: BTreeSet<usize> = p.retain().iter().map(|x| x.index).collect();
        let all: BTreeSet<usize> = c.iter().map(|x| x.index).collect();
        assert_eq!(f.union(&r).cloned().collect::<BTreeSet<_>>(), all);
        assert!(f.is_disjoint(&r));
    }

    #[test]
    fn forgetting_noise_retains_haze_and_rain() {
        let c = corpus(3);
        let p = partition(&c, DegradationKind::Noise).unwrap();
        assert_eq!(
            p.retained_kinds(),
            vec![DegradationKind::Haze, DegradationKind::Rain]
        );
        assert!(p.forget().iter().all(|x| x.kind == DegradationKind::Noise));
    }

    #[test]
    fn partition_rejects_absent_kind() {
        let c: Vec<DegradedPair> = corpus(2)
            .into_iter()
            .filter(|p| p.kind != DegradationKind::Haze)
            .collect();
        assert!(partition(&c, DegradationKind::Haze).is_err());
    }

    #[test]
    fn config_needs_a_forgetting_term() {
        let cfg = UnlearnConfig {
            enable_ins: false,
            enable_adv: false,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(UnlearnConfig::default().validate().is_ok());
    }

    fn two_pixel(values: &[f64]) -> Tensor {
        Tensor::new(&[1, 1, 1, 2], values.to_vec()).unwrap()
    }

    #[test]
    fn objective_matches_hand_computation() {
        // R_i = [0.6, 0.2], y_i = [0.5, 0.4], p = [0.3, -0.45] → y' = [0.8, 0.0]
        // R_k = [0.9, 0.1], y_k = [1.0, 0.3]
        // −L1(R_i, y_i) = −(0.1 + 0.2)/2 = −0.15
        //  L1(R_i, y')  =  (0.2 + 0.2)/2 =  0.2
        //  L1(R_k, y_k) =  (0.1 + 0.2)/2 =  0.15
        // weights (ins 1, adv 1.5, retain 0.5): −0.15 + 0.3 + 0.075 = 0.225
        let adv = crate::degrade::adversarial_from_perturbation(
            &two_pixel(&[0.5, 0.4]),
            &[0.3, -0.45],
        )
        .unwrap();
        assert_eq!(adv.values(), &[0.8, 0.0]);
        let mut g = Graph::new();
        let inputs = ObjectiveInputs {
            forget_restored: g.input(&two_pixel(&[0.6, 0.2])).unwrap(),
            forget_clean: g.constant(&two_pixel(&[0.5, 0.4])).unwrap(),
            adversarial: g.constant(&adv).unwrap(),
            retain: Some((
                g.input(&two_pixel(&[0.9, 0.1])).unwrap(),
                g.constant(&two_pixel(&[1.0, 0.3])).unwrap(),
            )),
        };
        let cfg = UnlearnConfig {
            w_adv: 1.5,
            w_retain: 0.5,
            ..Default::default()
        };
        let (_, l) = objective(&mut g, &inputs, &cfg).unwrap();
        assert!((l.instance + 0.15).abs() < 1e-12);
        assert!((l.adversarial - 0.2).abs() < 1e-12);
        assert!((l.retain - 0.15).abs() < 1e-12);
        assert!((l.total - 0.225).abs() < 1e-12);
    }

    #[test]
    fn instance_term_is_negated_l1() {
        let mut g = Graph::new();
        let r = g.input(&two_pixel(&[0.7, 0.1])).unwrap();
        let y = g.constant(&two_pixel(&[0.2, 0.4])).unwrap();
        let adv = g.constant(&two_pixel(&[0.0, 0.0])).unwrap();
        let l1 = g.l1_loss(r, y).unwrap();
        let l1 = g.item(l1).unwrap();
        let cfg = UnlearnConfig {
            enable_adv: false,
            ..Default::default()
        };
        let inputs = ObjectiveInputs {
            forget_restored: r,
            forget_clean: y,
            adversarial: adv,
            retain: None,
        };
        let (_, l) = objective(&mut g, &inputs, &cfg).unwrap();
        assert_eq!(l.instance, -l1);
        assert_eq!(l.total, -l1);
    }

    #[test]
    fn identity_model_on_clean_forget_pair() {
        let mut model = RestorationModel::new(ModelConfig {
            width: 8,
            depth: 2,
            seed: 1,
        })
        .unwrap();
        let c = corpus(1);
        let clean = &c[0].clean;
        let patches = PatchBatch {
            degraded: Tensor::stack(&[clean]).unwrap(),
            clean: Tensor::stack(&[clean]).unwrap(),
        };
        let forget = ForgetBatch::new(patches, 9).unwrap();
        let expected_adv: f64 = forget
            .clean
            .values()
            .iter()
            .zip(forget.adversarial.values())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / forget.clean.len() as f64;
        let mut opt = Adam::new(OptimizerConfig::default()).unwrap();
        let l = unlearn_step(&mut model, &forget, None, &UnlearnConfig::default(), &mut opt).unwrap();
        assert_eq!(l.instance, 0.0);
        assert!(l.instance.is_sign_negative(), "instance term should be −0.0");
        assert!((l.adversarial - expected_adv).abs() < 1e-12);
        assert!(l.adversarial > 0.0);
    }

    #[test]
    fn adversarial_targets_change_between_steps() {
        let c = corpus(1);
        let pairs = [&c[0]];
        let mut rng = rng_from(0, &[]);
        let patches = PatchBatch::sample(&pairs, 16, false, &mut rng).unwrap();
        let a = ForgetBatch::new(patches.clone(), derive_seed(0, &[0xAD7, 0])).unwrap();
        let b = ForgetBatch::new(patches, derive_seed(0, &[0xAD7, 1])).unwrap();
        assert_ne!(a.adversarial, b.adversarial);
    }
}
