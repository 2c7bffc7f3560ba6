//! Optimization harness: stable binary cross-entropy, cosine learning-rate
//! decay, an adaptive optimizer with decoupled weight decay, and an epoch
//! loop over a manifest that honors the freeze policy.
//!
//! Everything here is single-threaded and seeded, so a run in deterministic
//! mode reproduces its loss curve bit-for-bit.

use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_batch, DatasetManifest};
use crate::decoder::logits_to_mask;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, confusion, AggregationMode, ConfusionCounts, MetricsReport};
use crate::model::{CheckpointMeta, Model};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Seed the shuffle order from `seed` (reproducible) instead of OS
    /// entropy.
    pub deterministic: bool,
    /// Evaluate every this many epochs (and always after the last); 0
    /// disables evaluation.
    pub eval_every: usize,
    /// Linear ramp to `lr_max` over this many leading steps; 0 disables it.
    pub warmup_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 2,
            lr_max: 2e-4,
            lr_min: 0.0,
            weight_decay: 1e-4,
            seed: 0,
            deterministic: true,
            eval_every: 10,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::parameter("epochs must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::parameter("batch size must be positive".to_string()));
        }
        if !self.lr_max.is_finite() || !self.lr_min.is_finite() || self.lr_min > self.lr_max {
            return Err(Error::parameter(format!(
                "learning-rate range [{}, {}] is invalid",
                self.lr_min, self.lr_max
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::parameter(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::parameter(
            "schedule must span at least one step".to_string(),
        ));
    }
    if step > total {
        return Err(Error::parameter(format!(
            "step {step} exceeds schedule total {total}"
        )));
    }
    if !lr_max.is_finite() || !lr_min.is_finite() || lr_min > lr_max {
        return Err(Error::parameter(format!(
            "learning-rate range [{lr_min}, {lr_max}] is invalid"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// Position in the learning-rate schedule. The rate is stepped per
/// optimizer step, with an optional linear warmup before the cosine arc.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: u64,
    pub total: u64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup: u64,
    /// Rate used by the most recent step.
    pub rate: f64,
}

impl ScheduleState {
    pub fn new(total: u64, lr_max: f64, lr_min: f64, warmup: u64) -> Result<ScheduleState> {
        cosine_lr(0, total, lr_max, lr_min)?;
        if warmup >= total {
            return Err(Error::parameter(format!(
                "warmup of {warmup} steps swallows the whole {total}-step schedule"
            )));
        }
        Ok(ScheduleState {
            step: 0,
            total,
            lr_max,
            lr_min,
            warmup,
            rate: lr_max,
        })
    }

    pub fn rate_at(&self, step: u64) -> Result<f64> {
        if self.warmup > 0 && step < self.warmup {
            return Ok(self.lr_max * (step + 1) as f64 / self.warmup as f64);
        }
        cosine_lr(
            step - self.warmup,
            self.total - self.warmup,
            self.lr_max,
            self.lr_min,
        )
    }

    /// Rate for the current step; advances the counter.
    pub fn advance(&mut self) -> Result<f64> {
        let rate = self.rate_at(self.step)?;
        self.rate = rate;
        self.step += 1;
        Ok(rate)
    }
}

/// Mean binary cross-entropy between logits and a binary target of the same
/// shape, evaluated in the stable `max(z,0) - z·y + ln(1 + e^{-|z|})` form.
pub fn bce_loss<S: Scalar>(logits: &ArrayD<S>, targets: &ArrayD<S>) -> Result<f64> {
    let tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let loss = bce_loss_on_tape(&tape, z, targets)?;
    Ok(Scalar::to_f64(*tape.value(loss).iter().next().unwrap()))
}

/// Taped form of [`bce_loss`] for training graphs.
pub fn bce_loss_on_tape<S: Scalar>(
    tape: &Tape<S>,
    logits: Var,
    targets: &ArrayD<S>,
) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape != targets.shape() {
        return Err(Error::shape(format!(
            "logits {shape:?} and targets {:?} disagree",
            targets.shape()
        )));
    }
    debug_assert!(
        targets.iter().all(|&y| y == S::zero() || y == S::one()),
        "targets must be binary"
    );
    Ok(tape.bce_with_logits(logits, targets))
}

/// Adaptive moment optimizer with decoupled weight decay. Moment buffers
/// are kept per parameter name; parameters without a gradient in a step are
/// left untouched.
pub struct AdamW<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: IndexMap<String, ArrayD<S>>,
    v: IndexMap<String, ArrayD<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(weight_decay: f64) -> AdamW<S> {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update at rate `lr` to every trainable parameter that has
    /// a gradient. Frozen parameters are never touched, even if a gradient
    /// is supplied.
    pub fn step(
        &mut self,
        store: &mut crate::nn::ParamStore<S>,
        grads: &IndexMap<String, ArrayD<S>>,
        lr: f64,
    ) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::parameter(format!("invalid learning rate {lr}")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let param = store.get_mut(name);
            if !param.trainable {
                continue;
            }
            if grad.shape() != param.value.shape() {
                return Err(Error::shape(format!(
                    "gradient for {name} has shape {:?}, parameter is {:?}",
                    grad.shape(),
                    param.value.shape()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let b1 = S::from_f64(self.beta1);
            let b2 = S::from_f64(self.beta2);
            let lr_s = S::from_f64(lr);
            let eps = S::from_f64(self.eps);
            let wd = S::from_f64(self.weight_decay);
            let ibc1 = S::from_f64(1.0 / bc1);
            let ibc2 = S::from_f64(1.0 / bc2);
            for ((p, g), (mi, vi)) in param
                .value
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (S::one() - b1) * *g;
                *vi = b2 * *vi + (S::one() - b2) * *g * *g;
                let m_hat = *mi * ibc1;
                let v_hat = *vi * ibc2;
                *p = *p - lr_s * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }
}

/// Loss and learning rate of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub lr: f64,
}

/// One optimizer step: forward, loss, backward, update. Only trainable
/// parameters move; a non-finite loss aborts with the step diagnostics.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    optimizer: &mut AdamW<S>,
    schedule: &mut ScheduleState,
    images: &ArrayD<S>,
    targets: &ArrayD<S>,
) -> Result<StepOutcome> {
    let lr = schedule.advance()?;
    let tape = Tape::new();
    let (fwd, logits) = model.forward(&tape, images)?;
    let loss_var = bce_loss_on_tape(&tape, logits, targets)?;
    let loss = Scalar::to_f64(*tape.value(loss_var).iter().next().unwrap());
    if !loss.is_finite() {
        return Err(Error::train(format!(
            "loss {loss} at step {} (lr {lr}) is not finite",
            schedule.step
        )));
    }
    let grads = tape.backward(loss_var);
    let touched = fwd.touched();
    drop(fwd);
    let mut named = IndexMap::new();
    for (name, var) in touched {
        if model.store.get(&name).trainable {
            if let Some(g) = grads.get(var) {
                named.insert(name, g.clone());
            }
        }
    }
    optimizer.step(&mut model.store, &named, lr)?;
    Ok(StepOutcome { loss, lr })
}

/// Confusion counts and aggregate metrics over a manifest.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// Per-patch counts keyed by `scene@row,col`.
    pub per_image: Vec<(String, ConfusionCounts)>,
    pub micro: MetricsReport,
    pub macro_: MetricsReport,
}

/// Run the model over a manifest and score masks at the 0.5 probability
/// threshold.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<EvalOutcome> {
    manifest.validate()?;
    if batch_size == 0 {
        return Err(Error::parameter("batch size must be positive".to_string()));
    }
    let mut per_image = Vec::with_capacity(manifest.records.len());
    for chunk in manifest.records.chunks(batch_size) {
        let (images, targets) = load_batch::<S>(chunk)?;
        let logits = model.predict_logits(&images)?;
        let masks = logits_to_mask(&logits, 0.5);
        for (bi, record) in chunk.iter().enumerate() {
            let n = record.size;
            let pred =
                ArrayD::from_shape_fn(ndarray::IxDyn(&[n, n]), |ix| masks[[bi, 0, ix[0], ix[1]]]);
            let gt = ArrayD::from_shape_fn(ndarray::IxDyn(&[n, n]), |ix| {
                u8::from(targets[[bi, 0, ix[0], ix[1]]] == S::one())
            });
            per_image.push((record.key(), confusion(&pred, &gt)?));
        }
    }
    let counts: Vec<ConfusionCounts> = per_image.iter().map(|(_, c)| *c).collect();
    Ok(EvalOutcome {
        micro: aggregate(&counts, AggregationMode::Micro)?,
        macro_: aggregate(&counts, AggregationMode::Macro)?,
        per_image,
    })
}

/// Metrics snapshot taken during training.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub micro: MetricsReport,
    pub macro_: MetricsReport,
}

/// What [`fit`] produced. The curves are what the CSV reports serialize;
/// wall-clock time is informational and deliberately kept out of them.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean loss per epoch, in epoch order.
    pub epoch_loss: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub steps: u64,
    pub wall_clock_seconds: f64,
    /// Snapshot with the best micro Jaccard seen (final parameters when
    /// evaluation is disabled).
    pub best_checkpoint: PathBuf,
    pub best_metric: Option<f64>,
}

impl TrainReport {
    /// Loss curve as CSV, one row per epoch.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (i, loss) in self.epoch_loss.iter().enumerate() {
            out.push_str(&format!("{},{loss}\n", i + 1));
        }
        out
    }

    /// Evaluation history as CSV: one micro and one macro row per snapshot.
    pub fn eval_csv(&self) -> String {
        let mut out = format!("epoch,scope,{}\n", MetricsReport::CSV_HEADER);
        for point in &self.evals {
            out.push_str(&format!("{},micro,{}\n", point.epoch, point.micro.csv_row()));
            out.push_str(&format!(
                "{},macro,{}\n",
                point.epoch,
                point.macro_.csv_row()
            ));
        }
        out
    }
}

/// Train over `train` for `cfg.epochs`, evaluating on `eval` every
/// `cfg.eval_every` epochs, keeping the best-metric checkpoint under
/// `out_dir`.
pub fn fit<S: Scalar>(
    model: &mut Model<S>,
    train: &DatasetManifest,
    eval: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    train.validate()?;
    eval.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();

    let n = train.records.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let mut schedule = ScheduleState::new(total_steps, cfg.lr_max, cfg.lr_min, cfg.warmup_steps)?;
    let mut optimizer = AdamW::new(cfg.weight_decay);
    let shuffle_seed = if cfg.deterministic {
        cfg.seed
    } else {
        rand::random()
    };
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(shuffle_seed);

    let checkpoint_path = out_dir.join("best.ckpt");
    let mut best_metric: Option<f64> = None;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut evals = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let records: Vec<_> = chunk.iter().map(|&i| train.records[i].clone()).collect();
            let (images, targets) = load_batch::<S>(&records)?;
            let outcome = train_step(model, &mut optimizer, &mut schedule, &images, &targets)?;
            sum += outcome.loss;
        }
        epoch_loss.push(sum / batches_per_epoch as f64);

        let last = epoch + 1 == cfg.epochs;
        if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) {
            let outcome = evaluate(model, eval, cfg.batch_size)?;
            let score = outcome.micro.jaccard;
            evals.push(EvalPoint {
                epoch: epoch + 1,
                micro: outcome.micro,
                macro_: outcome.macro_,
            });
            if best_metric.is_none_or(|b| score > b) {
                best_metric = Some(score);
                model.save_checkpoint(
                    &checkpoint_path,
                    CheckpointMeta {
                        step: schedule.step,
                        metric: Some(score),
                    },
                )?;
            }
        }
    }
    if best_metric.is_none() {
        model.save_checkpoint(
            &checkpoint_path,
            CheckpointMeta {
                step: schedule.step,
                metric: None,
            },
        )?;
    }

    Ok(TrainReport {
        epoch_loss,
        evals,
        steps: schedule.step,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        best_checkpoint: checkpoint_path,
        best_metric,
    })
}
