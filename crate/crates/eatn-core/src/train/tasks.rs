//! Toy task generators. Every dataset is a pure function of
//! `(TaskSpec, salt)`: the same spec and salt always produce the same
//! samples, so training and evaluation splits are reproducible everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Salt for the training pool.
pub const TRAIN_SALT: u64 = 0x7472;
/// Salt for the held-out evaluation set.
pub const EVAL_SALT: u64 = 0x6576;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Target equals the source sequence.
    Copy,
    /// Target is the reversed source sequence.
    Reverse,
    /// Binary classification: parity of the number of 1-tokens.
    ParityClassify,
    /// Tiny grayscale images of bars (horizontal / vertical / diagonal).
    SyntheticShapesImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Token vocabulary (sequence tasks).
    pub vocab: usize,
    /// Sequence length (sequence tasks).
    pub seq_len: usize,
    /// Square grid side (image task).
    pub grid: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => {
                if self.vocab < 2 || self.seq_len == 0 {
                    return Err(Error::Config(
                        "sequence tasks need vocab >= 2 and seq_len >= 1".into(),
                    ));
                }
            }
            TaskKind::ParityClassify => {
                if self.vocab < 2 || self.seq_len == 0 {
                    return Err(Error::Config(
                        "parity_classify needs vocab >= 2 and seq_len >= 1".into(),
                    ));
                }
            }
            TaskKind::SyntheticShapesImage => {
                if self.grid < 3 {
                    return Err(Error::Config("synthetic_shapes_image needs grid >= 3".into()));
                }
            }
        }
        Ok(())
    }

    /// Number of output classes for classification tasks.
    pub fn n_classes(&self) -> usize {
        match self.kind {
            TaskKind::ParityClassify => 2,
            TaskKind::SyntheticShapesImage => 3,
            _ => 0,
        }
    }

    /// Checks that a model spec can consume this task's samples.
    pub fn check_model(&self, m: &ModelSpec) -> Result<()> {
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => {
                if m.kind != ModelKind::Seq2Seq {
                    return Err(Error::Config(format!(
                        "{:?} task needs a seq2seq model, got {:?}",
                        self.kind, m.kind
                    )));
                }
                if m.src_vocab < self.vocab || m.tgt_vocab < self.vocab {
                    return Err(Error::Config(format!(
                        "model vocab ({}, {}) smaller than task vocab {}",
                        m.src_vocab, m.tgt_vocab, self.vocab
                    )));
                }
                if m.max_len < self.seq_len {
                    return Err(Error::Config(format!(
                        "model max_len {} < task seq_len {}",
                        m.max_len, self.seq_len
                    )));
                }
            }
            TaskKind::ParityClassify => {
                if m.kind != ModelKind::EncoderClassifier {
                    return Err(Error::Config(format!(
                        "parity_classify needs an encoder classifier, got {:?}",
                        m.kind
                    )));
                }
                if m.src_vocab < self.vocab {
                    return Err(Error::Config(format!(
                        "model vocab {} smaller than task vocab {}",
                        m.src_vocab, self.vocab
                    )));
                }
                if m.n_classes != 2 {
                    return Err(Error::Config(format!(
                        "parity_classify needs 2 classes, model has {}",
                        m.n_classes
                    )));
                }
                if m.max_len < self.seq_len {
                    return Err(Error::Config(format!(
                        "model max_len {} < task seq_len {}",
                        m.max_len, self.seq_len
                    )));
                }
            }
            TaskKind::SyntheticShapesImage => {
                if m.kind != ModelKind::ImageClassifier {
                    return Err(Error::Config(format!(
                        "synthetic_shapes_image needs an image classifier, got {:?}",
                        m.kind
                    )));
                }
                let img = m
                    .image
                    .ok_or_else(|| Error::Config("model has no image shape".into()))?;
                if img.height != self.grid || img.width != self.grid || img.channels != 1 {
                    return Err(Error::Config(format!(
                        "task grid {0}x{0}x1 vs model image {1}x{2}x{3}",
                        self.grid, img.height, img.width, img.channels
                    )));
                }
                if m.n_classes != 3 {
                    return Err(Error::Config(format!(
                        "synthetic_shapes_image needs 3 classes, model has {}",
                        m.n_classes
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Sample<S: Scalar = f64> {
    Seq2Seq { src: Vec<usize>, tgt: Vec<usize> },
    Classify { tokens: Vec<usize>, label: usize },
    Image { pixels: Tensor<S>, label: usize },
}

/// Generates the dataset for `(spec, salt)`; see [`TRAIN_SALT`] /
/// [`EVAL_SALT`].
pub fn generate<S: Scalar>(spec: &TaskSpec, salt: u64) -> Result<Vec<Sample<S>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9).wrapping_add(salt));
    let mut out = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        out.push(match spec.kind {
            TaskKind::Copy => {
                let src: Vec<usize> =
                    (0..spec.seq_len).map(|_| rng.gen_range(0..spec.vocab)).collect();
                Sample::Seq2Seq { tgt: src.clone(), src }
            }
            TaskKind::Reverse => {
                let src: Vec<usize> =
                    (0..spec.seq_len).map(|_| rng.gen_range(0..spec.vocab)).collect();
                let tgt: Vec<usize> = src.iter().rev().copied().collect();
                Sample::Seq2Seq { src, tgt }
            }
            TaskKind::ParityClassify => {
                let tokens: Vec<usize> = (0..spec.seq_len).map(|_| rng.gen_range(0..2)).collect();
                let label = tokens.iter().sum::<usize>() % 2;
                Sample::Classify { tokens, label }
            }
            TaskKind::SyntheticShapesImage => {
                let g = spec.grid;
                let label = rng.gen_range(0..3);
                let pos = rng.gen_range(0..g);
                let mut pixels = vec![0.0f64; g * g];
                match label {
                    0 => {
                        for x in 0..g {
                            pixels[pos * g + x] = 1.0; // horizontal bar
                        }
                    }
                    1 => {
                        for y in 0..g {
                            pixels[y * g + pos] = 1.0; // vertical bar
                        }
                    }
                    _ => {
                        for y in 0..g {
                            pixels[y * g + y] = 1.0; // main diagonal
                        }
                    }
                }
                for v in pixels.iter_mut() {
                    *v += rng.gen_range(-0.05..0.05);
                }
                let pixels = Tensor::new(
                    vec![g, g, 1],
                    pixels.into_iter().map(S::from_f64).collect(),
                )?;
                Sample::Image { pixels, label }
            }
        });
    }
    Ok(out)
}
