//! Finite-difference gradient checking — the oracle that gates every
//! architecture before it is trusted.
//!
//! For each parameter tensor, analytic gradients (reverse mode, averaged
//! over a small batch) are compared against central differences of the same
//! batch loss. Convolution kernels are checked at *every* coordinate (their
//! tap masks make individual coordinates special); other tensors are probed
//! at `min_coords` evenly spaced coordinates.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::scalar::Scalar;
use crate::tape::Tape;

use super::tasks::{generate, Sample, TaskSpec};
use super::{batch_loss_and_grads, sample_logits};

/// Salt for gradient-check probe batches.
const GRADCHECK_SALT: u64 = 0x6763;

#[derive(Clone, Debug)]
pub struct GradCheckSettings {
    /// Maximum allowed relative error per coordinate.
    pub tolerance: f64,
    /// Central-difference step.
    pub fd_eps: f64,
    /// Minimum probed coordinates per tensor (all coordinates when the
    /// tensor is at most this large, and always all of a conv kernel).
    pub min_coords: usize,
    /// Label smoothing for the probe loss (exercises the smoothed-CE
    /// backward path).
    pub label_smoothing: f64,
    /// When both |fd| and |analytic| fall below this, the coordinate is
    /// recorded as skipped instead of scored.
    pub skip_denom: f64,
    /// Negative-control hook: corrupt the analytic gradient of the named
    /// tensor so the check must fail there. Test use only.
    pub sabotage: Option<String>,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            fd_eps: 1e-5,
            min_coords: 32,
            label_smoothing: 0.1,
            skip_denom: 1e-6,
            sabotage: None,
        }
    }
}

/// Per-tensor comparison summary.
#[derive(Clone, Debug)]
pub struct TensorReport {
    pub name: String,
    /// Probed coordinate count.
    pub checked: usize,
    /// Coordinates below the scoring threshold on both sides.
    pub skipped: usize,
    /// Coordinates where finite difference and analytic gradient are both
    /// exactly zero (disabled conv taps land here).
    pub both_zero: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub worst_fd: f64,
    pub worst_analytic: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorReport>,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &TensorReport> {
        self.tensors.iter().filter(move |t| t.max_rel_err > self.tolerance)
    }

    /// Converts a failed report into an error naming every offending tensor
    /// and its worst coordinate.
    pub fn assert_pass(&self) -> Result<()> {
        if self.passed {
            return Ok(());
        }
        let mut msg = String::from("gradient check failed:");
        for t in self.failures() {
            msg.push_str(&format!(
                " [{} coord {}: rel err {:.3e}, fd {:.6e} vs analytic {:.6e}]",
                t.name, t.worst_coord, t.max_rel_err, t.worst_fd, t.worst_analytic
            ));
        }
        Err(Error::Contract(msg))
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorReport> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{:<40} checked {:>4}  max rel err {:>9.3e} at {:>4}  (skipped {}, zero {})",
                t.name, t.checked, t.max_rel_err, t.worst_coord, t.skipped, t.both_zero
            )?;
        }
        write!(
            f,
            "gradient check {}: max rel err {:.3e} (tolerance {:.1e})",
            if self.passed { "PASSED" } else { "FAILED" },
            self.max_rel_err,
            self.tolerance
        )
    }
}

/// Mean probe loss over the batch; forward passes only.
fn mean_loss<S: Scalar>(model: &Model<S>, samples: &[Sample<S>], label_smoothing: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut tape: Tape<S> = Tape::new();
        let (bound, _) = model.bind(&mut tape);
        let (logits, targets) = sample_logits(model, &mut tape, &bound, s)?;
        let loss = tape.cross_entropy_ls(logits, &targets, label_smoothing, None)?;
        total += tape.value(loss).data()[0].to_f64();
    }
    Ok(total / samples.len() as f64)
}

/// Adds `delta` to one coordinate of the tensor at traversal position
/// `target`.
fn perturb<S: Scalar>(model: &mut Model<S>, target: usize, coord: usize, delta: S) {
    let mut idx = 0;
    model.visit_tensors_mut(&mut |_, t| {
        if idx == target {
            t.data_mut()[coord] += delta;
        }
        idx += 1;
    });
}

fn coords_for(name: &str, numel: usize, min_coords: usize) -> Vec<usize> {
    if numel <= min_coords || name.ends_with("conv.kernel") {
        (0..numel).collect()
    } else {
        // Evenly spaced and strictly increasing because numel > min_coords.
        (0..min_coords).map(|k| k * numel / min_coords).collect()
    }
}

/// Compares analytic gradients against central differences on `samples`.
///
/// The model is perturbed in place during probing but restored exactly
/// (every +eps is followed by the matching -eps on the same coordinate).
pub fn grad_check<S: Scalar>(
    model: &mut Model<S>,
    samples: &[Sample<S>],
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    if samples.is_empty() {
        return Err(Error::Contract("gradient check needs at least one sample".into()));
    }
    let refs: Vec<&Sample<S>> = samples.iter().collect();
    let analytic = batch_loss_and_grads(model, &refs, settings.label_smoothing, 1)?.grads;

    let mut meta = Vec::new();
    model.visit_tensors(&mut |name, t| meta.push((name.to_string(), t.data().len())));

    let eps = settings.fd_eps;
    let mut tensors = Vec::with_capacity(meta.len());
    let mut max_rel_err = 0.0f64;
    for (ti, (name, numel)) in meta.iter().enumerate() {
        let sabotaged = settings.sabotage.as_deref() == Some(name.as_str());
        let mut rep = TensorReport {
            name: name.clone(),
            checked: 0,
            skipped: 0,
            both_zero: 0,
            max_rel_err: 0.0,
            worst_coord: 0,
            worst_fd: 0.0,
            worst_analytic: 0.0,
        };
        for coord in coords_for(name, *numel, settings.min_coords) {
            perturb(model, ti, coord, S::from_f64(eps));
            let plus = mean_loss(model, samples, settings.label_smoothing)?;
            perturb(model, ti, coord, S::from_f64(-2.0 * eps));
            let minus = mean_loss(model, samples, settings.label_smoothing)?;
            perturb(model, ti, coord, S::from_f64(eps));
            let fd = (plus - minus) / (2.0 * eps);
            let mut g = analytic[ti].as_ref().map_or(0.0, |v| v[coord].to_f64());
            if sabotaged {
                g += 1.0f64.max(10.0 * g.abs());
            }
            rep.checked += 1;
            if fd == 0.0 && g == 0.0 {
                rep.both_zero += 1;
                continue;
            }
            let denom = fd.abs().max(g.abs());
            if denom < settings.skip_denom {
                rep.skipped += 1;
                continue;
            }
            let rel = (fd - g).abs() / denom;
            if rel > rep.max_rel_err {
                rep.max_rel_err = rel;
                rep.worst_coord = coord;
                rep.worst_fd = fd;
                rep.worst_analytic = g;
            }
        }
        max_rel_err = max_rel_err.max(rep.max_rel_err);
        tensors.push(rep);
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: settings.tolerance,
        max_rel_err,
        passed: max_rel_err <= settings.tolerance,
    })
}

/// Builds the model for `(spec, seed)`, samples a probe batch from `task`,
/// and runs [`grad_check`].
pub fn grad_check_model<S: Scalar>(
    spec: &ModelSpec,
    task: &TaskSpec,
    n_samples: usize,
    seed: u64,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    task.check_model(spec)?;
    let mut model: Model<S> = Model::init(spec.clone(), seed)?;
    let probe_spec = TaskSpec { n_samples: n_samples.max(1), ..*task };
    let samples: Vec<Sample<S>> = generate(&probe_spec, GRADCHECK_SALT)?;
    grad_check(&mut model, &samples, settings)
}

/// Picks a uniform random coordinate subset; exposed for tests that want a
/// randomized (rather than evenly spaced) probe.
pub fn random_coords(numel: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = (0..numel).collect();
    for i in (1..coords.len()).rev() {
        coords.swap(i, rng.gen_range(0..=i));
    }
    coords.truncate(count.min(numel));
    coords.sort_unstable();
    coords
}
