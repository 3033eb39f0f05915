//! Mini-batch training with SGD or AdamW, learning-rate schedules, early
//! stopping and validation-AUROC model selection.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::auroc;
use crate::model::{HeadKind, LossBreakdown, LossWeights, Model, ModelSpec, RecMetric, DEFAULT_HIDDEN};
use crate::preprocess::{Resample, ScalingMethod, DEFAULT_SMOTE_K};

pub const ADAMW_WEIGHT_DECAY: f64 = 0.01;
pub const ADAMW_EPS: f64 = 1e-8;
pub const MIN_LR: f64 = 1e-6;

/// Accepts `"yes"`/`"no"` as well as JSON booleans; writes `"yes"`/`"no"`.
mod yes_no {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(if *v { "yes" } else { "no" })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            B(bool),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::B(b) => Ok(b),
            Raw::S(s) => match s.to_ascii_lowercase().as_str() {
                "yes" | "true" => Ok(true),
                "no" | "false" => Ok(false),
                other => Err(D::Error::custom(format!("expected yes/no, got {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[serde(alias = "AdamW")]
    Adamw,
    #[serde(alias = "SGD")]
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Step,
    Reduce,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OversampleMethod {
    Smote,
    RandomOver,
    RandomUnder,
}

/// Full hyperparameter record. Field names follow the tuning table; fields
/// missing from a JSON file take the reference values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(with = "yes_no")]
    pub use_scheduler: bool,
    pub scheduler: SchedulerKind,
    pub gamma: f64,
    pub step_size: usize,
    pub patience: usize,
    pub num_epochs: usize,
    pub seed: u64,
    pub random_state: u64,
    #[serde(with = "yes_no")]
    pub use_feature_scaling: bool,
    pub scaling_method: ScalingMethod,
    pub corr_thr: f64,
    #[serde(with = "yes_no")]
    pub drop_correlated: bool,
    #[serde(with = "yes_no")]
    pub minority_oversample: bool,
    pub oversample_method: OversampleMethod,
    pub smote_k: usize,
    pub model: HeadKind,
    pub hidden: usize,
    pub loss_weights: LossWeights,
    pub rec_metric: RecMetric,
    #[serde(with = "yes_no")]
    pub renormalize_after_sum: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        reference_best_config()
    }
}

/// The best configuration found by the original hyperparameter search
/// (WavLM projected into the ImageBind space).
pub fn reference_best_config() -> TrainConfig {
    TrainConfig {
        batch_size: 128,
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.3674643450313223,
        momentum: 0.8075456327084843,
        beta1: 0.9084719350261068,
        beta2: 0.9940871758715644,
        use_scheduler: false,
        scheduler: SchedulerKind::Reduce,
        gamma: 0.6033860204614545,
        step_size: 17,
        patience: 5,
        num_epochs: 86,
        seed: 191,
        random_state: 621,
        use_feature_scaling: true,
        scaling_method: ScalingMethod::Minmax,
        corr_thr: 0.85,
        drop_correlated: true,
        minority_oversample: false,
        oversample_method: OversampleMethod::Smote,
        smote_k: DEFAULT_SMOTE_K,
        model: HeadKind::Ann,
        hidden: DEFAULT_HIDDEN,
        loss_weights: LossWeights {
            pred: 87.0,
            cos: 68.0,
            rec: 48.0,
        },
        rec_metric: RecMetric::Mse,
        renormalize_after_sum: false,
    }
}

pub const BATCH_SIZES: [usize; 4] = [128, 256, 512, 1024];
pub const CORR_THRESHOLDS: [f64; 4] = [0.8, 0.85, 0.9, 0.95];

impl TrainConfig {
    pub fn effective_scheduler(&self) -> SchedulerKind {
        if self.use_scheduler {
            self.scheduler
        } else {
            SchedulerKind::None
        }
    }

    pub fn scaling(&self) -> ScalingMethod {
        if self.use_feature_scaling {
            self.scaling_method
        } else {
            ScalingMethod::None
        }
    }

    pub fn corr_threshold(&self) -> Option<f64> {
        self.drop_correlated.then_some(self.corr_thr)
    }

    pub fn resample(&self) -> Resample {
        if !self.minority_oversample {
            return Resample::None;
        }
        match self.oversample_method {
            OversampleMethod::Smote => Resample::Smote { k: self.smote_k },
            OversampleMethod::RandomOver => Resample::RandomOver,
            OversampleMethod::RandomUnder => Resample::RandomUnder,
        }
    }

    /// Sanity checks needed for training to be well defined.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.num_epochs == 0 {
            return bad("num_epochs must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1]", self.momentum));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{n} {b} outside [0, 1)"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.step_size == 0 {
            return bad("step_size must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if !(self.corr_thr > 0.0 && self.corr_thr <= 1.0) {
            return bad(format!("corr_thr {} outside (0, 1]", self.corr_thr));
        }
        if self.hidden == 0 {
            return bad("hidden must be positive".into());
        }
        for (n, w) in [
            ("pred", self.loss_weights.pred),
            ("cos", self.loss_weights.cos),
            ("rec", self.loss_weights.rec),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return bad(format!("loss weight {n} = {w} must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Containment in the declared search space (see `hypertune`).
    pub fn validate_ranges(&self) -> Result<()> {
        self.validate()?;
        let check = |name: &str, ok: bool| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} outside the search space")))
            }
        };
        check("batch_size", BATCH_SIZES.contains(&self.batch_size))?;
        check("beta1", (0.9..=0.99).contains(&self.beta1))?;
        check("beta2", (0.99..=0.9999).contains(&self.beta2))?;
        check("corr_thr", CORR_THRESHOLDS.contains(&self.corr_thr))?;
        check("gamma", (0.5..=0.95).contains(&self.gamma))?;
        check("learning_rate", (0.05..=0.8).contains(&self.learning_rate))?;
        check("momentum", (0.1..=1.0).contains(&self.momentum))?;
        check("num_epochs", (2..=500).contains(&self.num_epochs))?;
        check("patience", (1..=5).contains(&self.patience))?;
        check("random_state", (100..=999).contains(&self.random_state))?;
        check("seed", (100..=999).contains(&self.seed))?;
        check("step_size", (1..=30).contains(&self.step_size))?;
        check("scheduler", self.scheduler != SchedulerKind::None)?;
        for w in [self.loss_weights.pred, self.loss_weights.cos, self.loss_weights.rec] {
            check("loss weight", (0.0..=100.0).contains(&w) && w.fract() == 0.0)?;
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let c: TrainConfig = serde_json::from_slice(bytes)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl OptimizerSettings {
    pub fn from_config(c: &TrainConfig) -> Self {
        OptimizerSettings {
            kind: c.optimizer,
            momentum: c.momentum,
            beta1: c.beta1,
            beta2: c.beta2,
            weight_decay: ADAMW_WEIGHT_DECAY,
            eps: ADAMW_EPS,
        }
    }
}

/// Optimizer state for a fixed list of parameter arrays.
#[derive(Debug, Clone)]
pub struct Optimizer {
    settings: OptimizerSettings,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(settings: OptimizerSettings, shapes: &[usize]) -> Self {
        let zeros = || shapes.iter().map(|&n| vec![0.0; n]).collect();
        Optimizer {
            settings,
            step: 0,
            first: zeros(),
            second: if settings.kind == OptimizerKind::Adamw { zeros() } else { Vec::new() },
        }
    }

    /// One update. SGD: `v = μv + g; θ -= lr·v`. AdamW: decoupled decay
    /// `θ -= lr·wd·θ`, then bias-corrected Adam moments.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        self.step += 1;
        let s = self.settings;
        match s.kind {
            OptimizerKind::Sgd => {
                for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = s.momentum * *vi + gi;
                        *pi -= lr * *vi;
                    }
                }
            }
            OptimizerKind::Adamw => {
                let bc1 = 1.0 - s.beta1.powi(self.step as i32);
                let bc2 = 1.0 - s.beta2.powi(self.step as i32);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((pi, gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *pi -= lr * s.weight_decay * *pi;
                        *mi = s.beta1 * *mi + (1.0 - s.beta1) * gi;
                        *vi = s.beta2 * *vi + (1.0 - s.beta2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *pi -= lr * mhat / (vhat.sqrt() + s.eps);
                    }
                }
            }
        }
    }
}

/// Learning rate per epoch.
#[derive(Debug, Clone)]
pub struct LrScheduler {
    kind: SchedulerKind,
    lr0: f64,
    gamma: f64,
    step_size: usize,
    patience: usize,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl LrScheduler {
    pub fn new(kind: SchedulerKind, lr0: f64, gamma: f64, step_size: usize, patience: usize) -> Self {
        LrScheduler {
            kind,
            lr0,
            gamma,
            step_size,
            patience,
            lr: lr0,
            best: f64::NEG_INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.effective_scheduler(), c.learning_rate, c.gamma, c.step_size, c.patience)
    }

    /// Rate used during 0-based `epoch`. Step schedules are `lr0·γ^⌊e/step⌋`.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        match self.kind {
            SchedulerKind::Step => self.lr0 * self.gamma.powi((epoch / self.step_size) as i32),
            _ => self.lr,
        }
    }

    /// Reports the validation metric at the end of an epoch.
    pub fn observe(&mut self, metric: Option<f64>) {
        if self.kind != SchedulerKind::Reduce {
            return;
        }
        let Some(m) = metric else { return };
        if m > self.best {
            self.best = m;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.gamma).max(MIN_LR);
                self.bad_epochs = 0;
            }
        }
    }
}

/// Row-aligned model inputs (one matrix per modality) and 0/1 labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<Array2<f64>>,
    pub y: Array1<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Array2<f64>>, y: Array1<f64>) -> Result<Self> {
        for x in &inputs {
            if x.nrows() != y.len() {
                return Err(Error::DimensionMismatch {
                    what: "dataset rows vs labels",
                    expected: y.len(),
                    actual: x.nrows(),
                });
            }
        }
        Ok(Dataset { inputs, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn views(&self) -> Vec<ArrayView2<'_, f64>> {
        self.inputs.iter().map(|x| x.view()).collect()
    }

    pub fn labels_u8(&self) -> Vec<u8> {
        self.y.iter().map(|&v| u8::from(v >= 0.5)).collect()
    }

    fn has_both_classes(&self) -> bool {
        let pos = self.y.iter().filter(|&&v| v >= 0.5).count();
        pos > 0 && pos < self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_auroc: Option<f64>,
    pub best_val_auroc: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "total", "bce", "cos", "rec", "val_auroc", "best_val_auroc", "lr"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train.total.to_string(),
                e.train.bce.to_string(),
                e.train.cos.to_string(),
                e.train.rec.to_string(),
                opt(e.val_auroc),
                opt(e.best_val_auroc),
                e.lr.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::invalid(e.to_string()))
    }
}

/// Model architecture for `dims` (one entry per input modality) under `config`.
pub fn spec_for(config: &TrainConfig, dims: &[usize], shared_dim: Option<usize>) -> Result<ModelSpec> {
    Ok(match (dims, shared_dim) {
        ([d], None) => ModelSpec::Classifier {
            head: config.model,
            input_dim: *d,
            hidden: config.hidden,
        },
        ([src, tgt], None) => ModelSpec::Fusion {
            head: config.model,
            d_src: *src,
            d_tgt: *tgt,
            hidden: config.hidden,
            renormalize_after_sum: config.renormalize_after_sum,
            weights: config.loss_weights,
            rec_metric: config.rec_metric,
        },
        (ds, Some(d_shared)) if ds.len() >= 2 => ModelSpec::Shared {
            head: config.model,
            dims: ds.to_vec(),
            d_shared,
            hidden: config.hidden,
            renormalize_after_sum: config.renormalize_after_sum,
            weights: config.loss_weights,
            rec_metric: config.rec_metric,
        },
        _ => return Err(Error::invalid(format!("no architecture for {} modalities", dims.len()))),
    })
}

fn validation_auroc(model: &Model, val: &Dataset, exec: Exec) -> Result<Option<f64>> {
    if val.is_empty() || !val.has_both_classes() {
        return Ok(None);
    }
    let probs = model.predict(&val.views(), exec)?;
    if probs.iter().any(|p| !p.is_finite()) {
        return Ok(None);
    }
    Ok(Some(auroc(probs.as_slice().expect("contiguous"), &val.labels_u8())?))
}

/// Trains from a fresh initialization (`config.seed`), shuffling mini-batches
/// with `config.random_state`. Returns the parameters of the epoch with the
/// highest validation AUROC (the final epoch when validation is unusable).
pub fn train(spec: &ModelSpec, train: &Dataset, val: &Dataset, config: &TrainConfig, exec: Exec) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut model = Model::init(spec, config.seed)?;
    let shapes: Vec<usize> = model.arrays().iter().map(|a| a.len()).collect();
    let mut opt = Optimizer::new(OptimizerSettings::from_config(config), &shapes);
    let mut sched = LrScheduler::from_config(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.random_state);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let horizon = 2 * config.patience;

    for epoch in 0..config.num_epochs {
        let lr = sched.lr_for_epoch(epoch);
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let xs: Vec<Array2<f64>> = train.inputs.iter().map(|x| x.select(Axis(0), batch)).collect();
            let views: Vec<ArrayView2<f64>> = xs.iter().map(|x| x.view()).collect();
            let y: Array1<f64> = batch.iter().map(|&i| train.y[i]).collect();
            let (loss, grad) = model.loss_and_grad(&views, y.view(), exec)?;
            if !loss.total.is_finite() || !grad.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let w = batch.len() as f64;
            sums.total += loss.total * w;
            sums.bce += loss.bce * w;
            sums.cos += loss.cos * w;
            sums.rec += loss.rec * w;
            sums.degenerate_cos += loss.degenerate_cos;
            opt.step(model.arrays_mut(), grad.arrays(), lr);
        }
        let n = train.len() as f64;
        let train_loss = LossBreakdown {
            total: sums.total / n,
            bce: sums.bce / n,
            cos: sums.cos / n,
            rec: sums.rec / n,
            degenerate_cos: sums.degenerate_cos,
        };
        let val_auroc = validation_auroc(&model, val, exec)?;
        if let Some(a) = val_auroc {
            if best.as_ref().is_none_or(|(b, _, _)| a > *b) {
                best = Some((a, epoch, model.clone()));
            }
        }
        sched.observe(val_auroc);
        epochs.push(EpochRecord {
            epoch,
            train: train_loss,
            val_auroc,
            best_val_auroc: best.as_ref().map(|b| b.0),
            lr,
        });
        if let Some((_, be, _)) = &best {
            if epoch - be >= horizon {
                stopped_early = epoch + 1 < config.num_epochs;
                break;
            }
        }
    }
    let last = epochs.len() - 1;
    let (best_val_auroc, best_epoch, model) = match best {
        Some((a, e, m)) => (Some(a), e, m),
        None => (None, last, model),
    };
    Ok((
        model,
        TrainHistory {
            epochs,
            best_epoch,
            best_val_auroc,
            stopped_early,
        },
    ))
}

/// Convenience for single-view labels.
pub fn labels_to_f64(labels: ArrayView1<u8>) -> Array1<f64> {
    labels.mapv(f64::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::gaussian;

    fn sgd(momentum: f64) -> OptimizerSettings {
        OptimizerSettings {
            kind: OptimizerKind::Sgd,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: ADAMW_WEIGHT_DECAY,
            eps: ADAMW_EPS,
        }
    }

    #[test]
    fn sgd_on_quadratic_matches_recurrence() {
        // f(θ) = (θ - 3)^2 / 2, gradient θ - 3: error shrinks by (1 - lr) per step.
        let mut theta = [0.0];
        let mut opt = Optimizer::new(sgd(0.0), &[1]);
        let mut steps = 0;
        while (theta[0] - 3.0f64).abs() > 1e-6 {
            let g = [theta[0] - 3.0];
            opt.step(vec![&mut theta[..]], vec![&g[..]], 0.1);
            steps += 1;
            let closed_form = 3.0 - 3.0 * 0.9f64.powi(steps);
            assert!((theta[0] - closed_form).abs() < 1e-12);
        }
        assert!(steps <= 200, "{steps}");
    }

    #[test]
    fn both_optimizers_descend_monotonically() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adamw] {
            let mut s = sgd(0.0);
            s.kind = kind;
            s.weight_decay = 0.0;
            let mut theta = [2.0, -1.5];
            let mut opt = Optimizer::new(s, &[2]);
            let loss = |t: &[f64; 2]| 0.5 * (t[0] * t[0] + 4.0 * t[1] * t[1]);
            let mut prev = loss(&theta);
            for _ in 0..100 {
                let g = [theta[0], 4.0 * theta[1]];
                opt.step(vec![&mut theta[..]], vec![&g[..]], 1e-2);
                let l = loss(&theta);
                assert!(l <= prev, "{kind:?}");
                prev = l;
            }
        }
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        let s = OptimizerSettings {
            kind: OptimizerKind::Adamw,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
        };
        let mut theta = [1.0];
        let mut opt = Optimizer::new(s, &[1]);
        opt.step(vec![&mut theta[..]], vec![&[0.5][..]], 0.1);
        // Decay: 1 - 0.1*0.01 = 0.999; bias-corrected step is lr * g/|g| ≈ 0.1.
        let expected = 0.999 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn step_schedule_is_exact() {
        let c = reference_best_config();
        let s = LrScheduler::new(SchedulerKind::Step, c.learning_rate, c.gamma, c.step_size, c.patience);
        assert_eq!(s.lr_for_epoch(16), c.learning_rate);
        assert_eq!(s.lr_for_epoch(17), c.learning_rate * c.gamma);
        assert!((s.lr_for_epoch(17) - 0.3675 * 0.6034).abs() < 1e-4);
        for e in 0..100 {
            assert_eq!(s.lr_for_epoch(e), c.learning_rate * c.gamma.powi((e / 17) as i32));
        }
    }

    #[test]
    fn reduce_schedule_never_increases() {
        let mut s = LrScheduler::new(SchedulerKind::Reduce, 0.1, 0.5, 1, 2);
        let mut prev = s.lr_for_epoch(0);
        for (e, m) in [0.5, 0.6, 0.6, 0.55, 0.7, 0.1, 0.1, 0.1, 0.1].iter().enumerate() {
            s.observe(Some(*m));
            let lr = s.lr_for_epoch(e + 1);
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(prev < 0.1);
        let mut floor = LrScheduler::new(SchedulerKind::Reduce, 1e-6, 0.5, 1, 1);
        floor.observe(Some(0.5));
        floor.observe(Some(0.5));
        assert_eq!(floor.lr_for_epoch(2), MIN_LR);
    }

    #[test]
    fn reference_config_values() {
        let c = reference_best_config();
        assert_eq!(c.loss_weights.cos, 68.0);
        assert_eq!(c.loss_weights.pred, 87.0);
        assert_eq!(c.loss_weights.rec, 48.0);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.effective_scheduler(), SchedulerKind::None);
        c.validate_ranges().unwrap();
        let json = serde_json::to_vec(&c).unwrap();
        assert_eq!(TrainConfig::from_json(&json).unwrap(), c);
        let text = String::from_utf8(json).unwrap();
        assert!(text.contains("\"drop_correlated\":\"yes\""));
    }

    #[test]
    fn config_accepts_table_spellings() {
        let mut v = serde_json::to_value(reference_best_config()).unwrap();
        v["optimizer"] = "SGD".into();
        v["model"] = "ANN".into();
        v["scaling_method"] = "MinMaxScaler".into();
        v["use_scheduler"] = true.into();
        let c: TrainConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(c.model, HeadKind::Ann);
        assert!(c.use_scheduler);
        v["bogus"] = 1.into();
        assert!(serde_json::from_value::<TrainConfig>(v).is_err());
        let mut bad = reference_best_config();
        bad.num_epochs = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn partial_config_falls_back_to_reference() {
        let c = TrainConfig::from_json(br#"{"learning_rate": 0.01, "use_scheduler": "yes"}"#).unwrap();
        assert_eq!(c.learning_rate, 0.01);
        assert!(c.use_scheduler);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.loss_weights, reference_best_config().loss_weights);
    }

    fn toy(n: usize, seed: u64, shift: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = gaussian(n, 5, &mut rng);
        let y: Array1<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        for (mut r, &t) in x.outer_iter_mut().zip(&y) {
            r[0] += shift * t;
        }
        Dataset::new(vec![x], y).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            learning_rate: 0.05,
            num_epochs: 30,
            patience: 3,
            ..reference_best_config()
        }
    }

    #[test]
    fn training_learns_and_is_deterministic() {
        let (tr, va) = (toy(200, 1, 3.0), toy(80, 2, 3.0));
        let c = small_config();
        let spec = spec_for(&c, &[5], None).unwrap();
        let (m1, h1) = train(&spec, &tr, &va, &c, Exec::Parallel).unwrap();
        let (m2, h2) = train(&spec, &tr, &va, &c, Exec::Sequential).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
        assert!(h1.best_val_auroc.unwrap() > 0.9);
        let mut prev = 0.0;
        for e in &h1.epochs {
            let b = e.best_val_auroc.unwrap();
            assert!(b >= prev);
            prev = b;
        }
        assert_eq!(h1.best_val_auroc, h1.epochs.iter().filter_map(|e| e.val_auroc).reduce(f64::max));
        let csv = String::from_utf8(h1.to_csv().unwrap()).unwrap();
        assert_eq!(csv.lines().count(), h1.epochs.len() + 1);
    }

    #[test]
    fn early_stopping_horizon() {
        // No signal: validation AUROC plateaus and training stops well before the cap.
        let (tr, va) = (toy(200, 3, 0.0), toy(80, 4, 0.0));
        let c = TrainConfig {
            num_epochs: 200,
            patience: 2,
            ..small_config()
        };
        let spec = spec_for(&c, &[5], None).unwrap();
        let (_, h) = train(&spec, &tr, &va, &c, Exec::Parallel).unwrap();
        let last = h.epochs.last().unwrap().epoch;
        assert!(h.stopped_early);
        assert_eq!(last - h.best_epoch, 4);
    }

    #[test]
    fn divergence_is_reported() {
        // Huge inputs and step sizes overflow the weights to opposite-signed
        // infinities, whose products then sum to NaN.
        let (mut tr, va) = (toy(64, 5, 1.0), toy(32, 6, 1.0));
        tr.inputs[0].mapv_inplace(|v| v * 1e200);
        let mut c = small_config();
        c.learning_rate = 1e300;
        c.momentum = 0.0;
        c.model = HeadKind::Shallow;
        let spec = spec_for(&c, &[5], None).unwrap();
        match train(&spec, &tr, &va, &c, Exec::Sequential) {
            Err(Error::NonFiniteLoss { epoch, .. }) => assert!(epoch < c.num_epochs),
            other => panic!("expected a numerical failure, got {other:?}"),
        }
    }
}
