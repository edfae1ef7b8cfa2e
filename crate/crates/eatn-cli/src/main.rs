//! `eatn` — train, evaluate, check, and inspect evolving-attention models.
//!
//! Every run is a pure function of its JSON configuration (or named preset)
//! and the single seed inside it; command-line flags are overrides with exact
//! config-file equivalents, and the effective configuration is echoed into
//! the output directory. Exit codes: 0 success (and a passing gradcheck),
//! 1 failed gradcheck, 2 configuration or input error, 3 numerical
//! divergence, 4 I/O error or corrupt file.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eatn_core::config::RunConfig;
use eatn_core::error::{Error, Result};
use eatn_core::io::{
    export_attention, load_checkpoint, save_checkpoint, trace_entries, write_attention_files,
    write_heatmap, Stage,
};
use eatn_core::model::{Model, ModelKind};
use eatn_core::train::gradcheck::{grad_check_model, GradCheckSettings};
use eatn_core::train::tasks::{generate, Sample, TaskSpec, EVAL_SALT};
use eatn_core::train::{evaluate, run_training, threads_from_env};
use eatn_core::Tape;

#[derive(Parser)]
#[command(name = "eatn", version, about = "Evolving-attention transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes checkpoint, logs, and the effective config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on freshly generated held-out data.
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Export attention maps (.atnm) and optional heatmaps (.pgm).
    ExportAttn(ExportAttnArgs),
    /// Print parameter and FLOP accounting, vanilla vs evolving attention.
    Costs(CostsArgs),
}

/// Where the run configuration comes from: a JSON file or a named preset.
#[derive(Args)]
struct ConfigSource {
    /// JSON run-configuration file.
    #[arg(long, value_name = "FILE", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: lite or base.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<RunConfig> {
        match (&self.config, &self.preset) {
            (Some(path), None) => RunConfig::from_json(&fs::read_to_string(path)?),
            (None, Some(name)) => RunConfig::preset(name),
            _ => Err(Error::Config("pass exactly one of --config FILE or --preset NAME".into())),
        }
    }
}

/// Ablation overrides, applied to every attention site. Each has a
/// config-file equivalent under `model.ea_*`; flags win over the file.
#[derive(Args, Clone, Copy)]
struct Overrides {
    /// Override the attention-map skip weight α (all sites).
    #[arg(long)]
    alpha: Option<f64>,
    /// Override the convolution blend weight β (all sites).
    #[arg(long)]
    beta: Option<f64>,
    /// Override the convolution kernel size (1, 3, or 5; all sites).
    #[arg(long)]
    kernel: Option<usize>,
    /// Disable the attention convolution everywhere.
    #[arg(long)]
    no_conv: bool,
    /// Disable the attention-map skip connection everywhere.
    #[arg(long)]
    no_skip: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        for ea in [
            &mut cfg.model.ea_encoder,
            &mut cfg.model.ea_decoder_self,
            &mut cfg.model.ea_encoder_decoder,
        ] {
            if let Some(a) = self.alpha {
                ea.alpha = a;
            }
            if let Some(b) = self.beta {
                ea.beta = b;
            }
            if let Some(k) = self.kernel {
                ea.kernel_size = k;
            }
            if self.no_conv {
                ea.conv_enabled = false;
            }
            if self.no_skip {
                ea.skip_enabled = false;
            }
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory for config.json, model.eatn, steps.jsonl,
    /// timing.jsonl, and metrics.json.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Held-out sample count (default: the config's eval_samples).
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[command(flatten)]
    overrides: Overrides,
    /// Number of probe samples in the check batch.
    #[arg(long, default_value_t = 2)]
    samples: usize,
    /// Maximum allowed relative error per coordinate.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Negative-control hook: corrupt the named tensor's analytic gradient
    /// so the check must fail and name it.
    #[arg(long, value_name = "TENSOR")]
    sabotage: Option<String>,
}

#[derive(Args)]
struct ExportAttnArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Checkpoint whose attention maps to export.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Comma-separated trace indices to export (default: all). Decoder
    /// blocks contribute two consecutive indices: self then cross.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    /// Comma-separated stages: pre_conv, post_conv, post_softmax
    /// (default: all three).
    #[arg(long, value_delimiter = ',')]
    stages: Vec<String>,
    /// Also render one PGM heatmap per exported map and head.
    #[arg(long)]
    heatmaps: bool,
    /// Index of the held-out sample to feed through the model.
    #[arg(long, default_value_t = 0)]
    sample: usize,
}

#[derive(Args)]
struct CostsArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[command(flatten)]
    overrides: Overrides,
    /// Sequence length for FLOP accounting (default: the task's;
    /// image models always use their pixel count).
    #[arg(long)]
    seq_len: Option<usize>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::ExportAttn(a) => cmd_export_attn(a),
        Cmd::Costs(a) => cmd_costs(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) => 2,
        Error::Divergence(_) => 3,
        Error::Corrupt(_) | Error::Io(_) => 4,
        Error::Dimension(_) | Error::Contract(_) => 1,
    }
}

fn cmd_train(a: TrainArgs) -> Result<u8> {
    let mut cfg = a.source.load()?;
    a.overrides.apply(&mut cfg);
    cfg.train.threads = threads_from_env()?;
    cfg.validate()?;

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.json"), cfg.to_json_pretty())?;

    let (model, run) = run_training::<f64>(&cfg.task, &cfg.model, &cfg.train, cfg.seed)?;

    save_checkpoint(&model, &a.out.join("model.eatn"))?;
    fs::write(a.out.join("steps.jsonl"), run.steps_jsonl())?;
    fs::write(a.out.join("timing.jsonl"), run.timing_jsonl())?;
    let last = run.records.last().expect("at least the step-0 record");
    let metrics = serde_json::json!({
        "steps_run": last.step,
        "final_loss": last.loss,
        "final_batch_accuracy": last.accuracy,
        "eval": run.eval,
    });
    fs::write(
        a.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).expect("metrics serialize"),
    )?;

    println!(
        "trained {} steps: loss {:.6}, batch accuracy {:.4}, eval accuracy {:.4}{}",
        last.step,
        last.loss,
        last.accuracy,
        run.eval.accuracy,
        match run.eval.exact_match {
            Some(em) => format!(", exact match {:.4}", em),
            None => String::new(),
        }
    );
    println!("wrote {}", a.out.join("model.eatn").display());
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> Result<u8> {
    let cfg = a.source.load()?;
    cfg.validate()?;
    let model: Model<f64> = load_checkpoint(&cfg.model, &a.checkpoint)?;

    let n_samples = a.samples.unwrap_or(cfg.train.eval_samples);
    let eval_spec = TaskSpec { n_samples, ..cfg.task };
    let pool: Vec<Sample<f64>> = generate(&eval_spec, EVAL_SALT)?;
    let report = evaluate(&model, &pool)?;

    println!("{}", serde_json::to_string(&report).expect("eval report serializes"));
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<u8> {
    let mut cfg = a.source.load()?;
    a.overrides.apply(&mut cfg);
    cfg.validate()?;

    let settings = GradCheckSettings {
        tolerance: a.tolerance,
        label_smoothing: cfg.train.label_smoothing,
        sabotage: a.sabotage,
        ..GradCheckSettings::default()
    };
    let report = grad_check_model::<f64>(&cfg.model, &cfg.task, a.samples, cfg.seed, &settings)?;
    println!("{}", report);
    Ok(if report.passed { 0 } else { 1 })
}

fn cmd_export_attn(a: ExportAttnArgs) -> Result<u8> {
    let cfg = a.source.load()?;
    cfg.validate()?;
    let model: Model<f64> = load_checkpoint(&cfg.model, &a.checkpoint)?;

    // The input is sample `a.sample` of the held-out stream, so exports line
    // up with what `eval` saw.
    let probe_spec = TaskSpec { n_samples: a.sample + 1, ..cfg.task };
    let pool: Vec<Sample<f64>> = generate(&probe_spec, EVAL_SALT)?;
    let sample = pool.last().expect("n_samples >= 1");

    let mut tape: Tape<f64> = Tape::new();
    let (bound, _) = model.bind(&mut tape);
    let fwd = match sample {
        Sample::Seq2Seq { src, tgt } => model.forward_seq2seq(&mut tape, &bound, src, tgt)?,
        Sample::Classify { tokens, .. } => model.forward_classifier(&mut tape, &bound, tokens)?,
        Sample::Image { pixels, .. } => model.forward_image(&mut tape, &bound, pixels)?,
    };

    let entries = trace_entries(&tape, &fwd.trace);
    let stages = if a.stages.is_empty() {
        Stage::ALL.to_vec()
    } else {
        a.stages.iter().map(|s| Stage::from_tag(s)).collect::<Result<Vec<_>>>()?
    };
    let maps: Vec<_> = export_attention(&entries, None, None)?
        .into_iter()
        .filter(|m| {
            (a.layers.is_empty() || a.layers.contains(&(m.layer as usize)))
                && stages.contains(&m.stage)
        })
        .collect();
    if maps.is_empty() {
        return Err(Error::Input(format!(
            "no attention maps match --layers {:?} --stages {:?} (trace has {} sites)",
            a.layers,
            a.stages,
            entries.len()
        )));
    }

    for path in write_attention_files(&maps, &a.out)? {
        println!("wrote {}", path.display());
    }
    if a.heatmaps {
        for m in &maps {
            for head in 0..m.k_heads as usize {
                println!("wrote {}", write_heatmap(m, head, &a.out)?.display());
            }
        }
    }
    Ok(0)
}

fn cmd_costs(a: CostsArgs) -> Result<u8> {
    let mut cfg = a.source.load()?;
    a.overrides.apply(&mut cfg);
    cfg.validate()?;

    let seq_len = match cfg.model.kind {
        ModelKind::ImageClassifier => 0, // count_costs substitutes the pixel count
        _ => a.seq_len.unwrap_or(cfg.task.seq_len),
    };
    let report = eatn_core::costs::count_costs(&cfg.model, seq_len)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("cost report serializes"));
    } else {
        println!("{}", report);
    }
    Ok(0)
}
