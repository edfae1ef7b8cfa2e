//! Training harness: per-item loss/gradient evaluation, the deterministic
//! training loop, and evaluation metrics.
//!
//! Determinism contract: a run is a pure function of `(task, model spec,
//! settings, seed)`. Batch items are processed on `settings.threads` worker
//! threads but their gradients are always merged in item-index order, so the
//! thread count never changes a single bit of the result. Wall-clock times
//! are recorded next to — never inside — the deterministic step records.

pub mod gradcheck;
pub mod optim;
pub mod tasks;

use std::collections::VecDeque;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundParams, Model, ModelKind, ModelSpec};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

use optim::{Optimizer, OptimizerKind, Schedule};
use tasks::{generate, Sample, TaskSpec, EVAL_SALT, TRAIN_SALT};

/// Early-stopping rule: every `every` updates, evaluate on the held-out
/// split and stop once `accuracy` is reached.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub accuracy: f64,
    pub every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    /// Worker threads for batch-item forward/backward; resolve from the
    /// environment with [`threads_from_env`].
    pub threads: usize,
    /// Held-out evaluation set size.
    pub eval_samples: usize,
    /// Off by default.
    pub early_stop: Option<EarlyStop>,
    /// Average the final n parameter snapshots into the returned model;
    /// 0 disables averaging (the default).
    pub average_last: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 8,
            label_smoothing: 0.1,
            optimizer: OptimizerKind::adam_default(),
            schedule: Schedule::InverseSqrtWarmup { peak_lr: 3e-3, warmup: 40 },
            threads: 1,
            eval_samples: 32,
            early_stop: None,
            average_last: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be positive".into()));
        }
        if let Some(es) = &self.early_stop {
            if es.every == 0 || !(0.0..=1.0).contains(&es.accuracy) {
                return Err(Error::Config(format!("invalid early stop {:?}", es)));
            }
        }
        self.optimizer.validate()?;
        self.schedule.validate()
    }
}

/// One deterministic step record. `loss`/`accuracy` are measured on the
/// step's batch *before* its update; `lr` is the rate used by that update
/// (0 for the step-0 probe, which never updates).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Teacher-forced token accuracy (seq2seq) or class accuracy.
    pub accuracy: f64,
    /// Greedy-decode exact-match rate; seq2seq only.
    pub exact_match: Option<f64>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRun {
    pub records: Vec<StepRecord>,
    /// Milliseconds since run start, one entry per record. Kept separate
    /// from [`records`](Self::records) so those stay bitwise-reproducible.
    pub wall_ms: Vec<f64>,
    pub eval: EvalReport,
    /// JSON snapshot of `(task, model spec, settings, seed)`; enough to
    /// reproduce the run bit for bit.
    pub config_snapshot: String,
}

impl TrainRun {
    /// Deterministic line-delimited step log (one JSON object per record).
    pub fn steps_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("step record serializes"));
            out.push('\n');
        }
        out
    }

    /// Wall-clock log, serialized apart from the deterministic records.
    pub fn timing_jsonl(&self) -> String {
        let mut out = String::new();
        for (r, ms) in self.records.iter().zip(&self.wall_ms) {
            out.push_str(
                &serde_json::to_string(&serde_json::json!({ "step": r.step, "wall_ms": ms }))
                    .expect("timing record serializes"),
            );
            out.push('\n');
        }
        out
    }
}

/// Reads `EATN_THREADS`; unset means 1 (fully deterministic default).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("EATN_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(Error::Config(format!("EATN_THREADS unreadable: {}", e))),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "EATN_THREADS must be a positive integer, got {:?}",
                s
            ))),
        },
    }
}

/// Loss, correctness counts, and parameter gradients for one sample.
struct ItemOut<S> {
    loss: f64,
    correct: usize,
    total: usize,
    grads: Vec<Option<Vec<S>>>,
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the forward pass for any sample kind; returns the logits variable
/// and the loss targets.
pub(crate) fn sample_logits<S: Scalar>(
    model: &Model<S>,
    tape: &mut Tape<S>,
    bound: &BoundParams,
    sample: &Sample<S>,
) -> Result<(Var, Vec<usize>)> {
    Ok(match sample {
        Sample::Seq2Seq { src, tgt } => {
            (model.forward_seq2seq(tape, bound, src, tgt)?.logits, tgt.clone())
        }
        Sample::Classify { tokens, label } => {
            (model.forward_classifier(tape, bound, tokens)?.logits, vec![*label])
        }
        Sample::Image { pixels, label } => {
            (model.forward_image(tape, bound, pixels)?.logits, vec![*label])
        }
    })
}

fn item_loss_and_grads<S: Scalar>(
    model: &Model<S>,
    sample: &Sample<S>,
    label_smoothing: f64,
) -> Result<ItemOut<S>> {
    let mut tape: Tape<S> = Tape::new();
    let (bound, named) = model.bind(&mut tape);
    let (logits, targets) = sample_logits(model, &mut tape, &bound, sample)?;
    let loss = tape.cross_entropy_ls(logits, &targets, label_smoothing, None)?;
    tape.backward(loss)?;

    let lv = tape.value(logits);
    let v = lv.shape()[1];
    let correct = targets
        .iter()
        .enumerate()
        .filter(|(i, &t)| argmax(&lv.data()[i * v..(i + 1) * v]) == t)
        .count();
    let grads = named.iter().map(|(_, var)| tape.grad(*var).map(|g| g.to_vec())).collect();
    Ok(ItemOut {
        loss: tape.value(loss).data()[0].to_f64(),
        correct,
        total: targets.len(),
        grads,
    })
}

/// Mean loss/accuracy and mean parameter gradients over a batch.
pub struct BatchOut<S> {
    pub loss: f64,
    pub accuracy: f64,
    pub grads: Vec<Option<Vec<S>>>,
}

/// Evaluates every item (on up to `threads` workers) and reduces in item
/// index order, so the result is independent of the thread count.
pub fn batch_loss_and_grads<S: Scalar>(
    model: &Model<S>,
    items: &[&Sample<S>],
    label_smoothing: f64,
    threads: usize,
) -> Result<BatchOut<S>> {
    if items.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let threads = threads.clamp(1, items.len());
    let chunk = items.len().div_ceil(threads);
    let mut results: Vec<Option<Result<ItemOut<S>>>> = (0..items.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, item) in results.iter_mut().zip(items) {
            *slot = Some(item_loss_and_grads(model, item, label_smoothing));
        }
    } else {
        std::thread::scope(|scope| {
            for (slots, chunk_items) in results.chunks_mut(chunk).zip(items.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, item) in slots.iter_mut().zip(chunk_items) {
                        *slot = Some(item_loss_and_grads(model, item, label_smoothing));
                    }
                });
            }
        });
    }

    let n = items.len();
    let inv_n = S::from_f64(1.0 / n as f64);
    let mut loss = 0.0;
    let mut correct = 0;
    let mut total = 0;
    let mut grads: Vec<Option<Vec<S>>> = Vec::new();
    for slot in results {
        let item = slot.expect("every slot visited")?;
        loss += item.loss;
        correct += item.correct;
        total += item.total;
        if grads.is_empty() {
            grads = item.grads.iter().map(|g| g.as_ref().map(|v| vec![S::zero(); v.len()])).collect();
        }
        for (acc, g) in grads.iter_mut().zip(&item.grads) {
            if let Some(g) = g {
                let acc = acc.get_or_insert_with(|| vec![S::zero(); g.len()]);
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += *x;
                }
            }
        }
    }
    for g in grads.iter_mut().flatten() {
        for x in g.iter_mut() {
            *x *= inv_n;
        }
    }
    Ok(BatchOut { loss: loss / n as f64, accuracy: correct as f64 / total as f64, grads })
}

/// Teacher-forced/class accuracy on a held-out set, plus greedy exact match
/// for seq2seq models.
pub fn evaluate<S: Scalar>(model: &Model<S>, samples: &[Sample<S>]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let mut correct = 0;
    let mut total = 0;
    let mut exact = 0;
    let seq2seq = model.spec.kind == ModelKind::Seq2Seq;
    for s in samples {
        let mut tape: Tape<S> = Tape::new();
        let (bound, _) = model.bind(&mut tape);
        match s {
            Sample::Seq2Seq { src, tgt } => {
                let out = model.forward_seq2seq(&mut tape, &bound, src, tgt)?;
                let lv = tape.value(out.logits);
                let v = lv.shape()[1];
                for (i, &t) in tgt.iter().enumerate() {
                    if argmax(&lv.data()[i * v..(i + 1) * v]) == t {
                        correct += 1;
                    }
                    total += 1;
                }
                if model.greedy_decode(src, tgt.len())? == *tgt {
                    exact += 1;
                }
            }
            Sample::Classify { tokens, label } => {
                let out = model.forward_classifier(&mut tape, &bound, tokens)?;
                let lv = tape.value(out.logits);
                if argmax(lv.data()) == *label {
                    correct += 1;
                }
                total += 1;
            }
            Sample::Image { pixels, label } => {
                let out = model.forward_image(&mut tape, &bound, pixels)?;
                let lv = tape.value(out.logits);
                if argmax(lv.data()) == *label {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / total as f64,
        exact_match: seq2seq.then(|| exact as f64 / samples.len() as f64),
        n_samples: samples.len(),
    })
}

#[derive(Serialize)]
struct Snapshot<'a> {
    task: &'a TaskSpec,
    model: &'a ModelSpec,
    settings: &'a TrainSettings,
    seed: u64,
}

/// Runs the training loop. Returns the trained model and its run log.
///
/// Step `t` (1-based) draws a batch, records the pre-update loss/accuracy,
/// then applies one optimizer update at `schedule.lr(t)`. Step 0 is a probe:
/// it records the initial loss and never updates, so `steps = 0` still logs
/// one record.
pub fn run_training<S: Scalar>(
    task: &TaskSpec,
    spec: &ModelSpec,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(Model<S>, TrainRun)> {
    settings.validate()?;
    task.validate()?;
    task.check_model(spec)?;

    let mut model: Model<S> = Model::init(spec.clone(), seed)?;
    let train_pool: Vec<Sample<S>> = generate(task, TRAIN_SALT)?;
    let eval_spec = TaskSpec { n_samples: settings.eval_samples, ..*task };
    let eval_pool: Vec<Sample<S>> = generate(&eval_spec, EVAL_SALT)?;

    let mut sizes = Vec::new();
    model.visit_tensors(&mut |_, t| sizes.push(t.data().len()));
    let mut opt: Optimizer<S> = Optimizer::new(settings.optimizer, &sizes)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB47C_11ED);

    let config_snapshot =
        serde_json::to_string(&Snapshot { task, model: spec, settings, seed })
            .expect("config snapshot serializes");

    let start = Instant::now();
    let mut records = Vec::with_capacity(settings.steps + 1);
    let mut wall_ms = Vec::with_capacity(settings.steps + 1);
    let mut recent: VecDeque<Vec<S>> = VecDeque::new();

    for t in 0..=settings.steps {
        let batch: Vec<&Sample<S>> = (0..settings.batch_size)
            .map(|_| &train_pool[batch_rng.gen_range(0..train_pool.len())])
            .collect();
        let out = batch_loss_and_grads(&model, &batch, settings.label_smoothing, settings.threads)?;
        if !out.loss.is_finite() {
            return Err(Error::Divergence(format!(
                "loss {} at step {} (of {})",
                out.loss, t, settings.steps
            )));
        }
        let lr = if t == 0 { 0.0 } else { settings.schedule.lr(t) };
        records.push(StepRecord { step: t as u64, loss: out.loss, accuracy: out.accuracy, lr });
        wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
        if t == 0 {
            continue;
        }

        opt.begin_step();
        let mut idx = 0;
        let mut update_err = None;
        model.visit_tensors_mut(&mut |_, tensor| {
            let r = opt.update(idx, tensor.data_mut(), out.grads[idx].as_deref(), lr);
            if let (Err(e), None) = (r, update_err.as_ref()) {
                update_err = Some(e);
            }
            idx += 1;
        });
        if let Some(e) = update_err {
            return Err(e);
        }

        if settings.average_last > 0 {
            let mut flat = Vec::new();
            model.visit_tensors(&mut |_, t| flat.extend_from_slice(t.data()));
            if recent.len() == settings.average_last {
                recent.pop_front();
            }
            recent.push_back(flat);
        }

        if let Some(es) = &settings.early_stop {
            if t % es.every == 0 && evaluate(&model, &eval_pool)?.accuracy >= es.accuracy {
                break;
            }
        }
    }

    if settings.average_last > 0 && !recent.is_empty() {
        let inv = S::from_f64(1.0 / recent.len() as f64);
        let mut mean = vec![S::zero(); recent[0].len()];
        for snap in &recent {
            for (m, x) in mean.iter_mut().zip(snap) {
                *m += *x * inv;
            }
        }
        let mut offset = 0;
        model.visit_tensors_mut(&mut |_, tensor| {
            let d = tensor.data_mut();
            d.copy_from_slice(&mean[offset..offset + d.len()]);
            offset += d.len();
        });
    }

    let eval = evaluate(&model, &eval_pool)?;
    Ok((model, TrainRun { records, wall_ms, eval, config_snapshot }))
}
