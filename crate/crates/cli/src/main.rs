use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, bail};
use clap::{Args, Parser, Subcommand};
use melflow::dsp::wav;
use melflow::harness::pipeline::{self, Init, SampleInput};
use melflow::harness::{EvalMode, ExperimentRecord, RunConfig, Scenario, TrainConfig, TrainMode, write_report};
use melflow::sampler::{CfgSign, OdeMethod, SamplerConfig};
use melflow::tasks::{Alignment, TaskTag};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Masked-condition flow-matching pre-training and fine-tuning for Mel
/// spectrograms.
///
/// Outputs default to directories under $MELFLOW_RUN_ROOT (or ./runs).
#[derive(Parser, Debug)]
#[command(name = "melflow", version)]
struct Cli {
    /// Run configuration (TOML). Built-in defaults apply when omitted;
    /// command-line flags override either.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic training and held-out corpora.
    MakeData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked-condition pre-training.
    Pretrain {
        #[command(flatten)]
        io: RunIo,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Task fine-tuning from a checkpoint or from scratch.
    Finetune {
        #[command(flatten)]
        io: RunIo,
        /// Task to train on; repeat (or comma-separate) for multitask mixing.
        #[arg(long = "task", required = true, value_delimiter = ',')]
        tasks: Vec<TaskTag>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Generate features and waveforms for one input.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "enhance")]
        task: TaskTag,
        /// Noisy speech or mixture (16-bit PCM mono WAV).
        #[arg(long, required_unless_present = "alignment")]
        input: Option<PathBuf>,
        /// Phone alignment for synthesis.
        #[arg(long)]
        alignment: Option<PathBuf>,
        /// Number of sources to separate.
        #[arg(long, default_value_t = 2)]
        sources: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Score a checkpoint on the held-out corpus.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "enhance")]
        scenario: Scenario,
        /// model, topline or identity.
        #[arg(long, default_value = "model")]
        mode: EvalMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Experiment record to attach the report to.
        #[arg(long)]
        record: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Tables and plots over finished runs.
    Report {
        /// `record.json` files or run directories containing one.
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train, fine-tune and evaluate for each p_cond value.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.8,0.9,1.0")]
        values: Vec<f64>,
        #[arg(long, default_value = "enhance")]
        scenario: Scenario,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pre-training schedule overrides.
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
}

#[derive(Args, Debug)]
struct RunIo {
    /// Data directory written by `make-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start from these weights with a fresh schedule.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue a run from this checkpoint at its saved step.
    #[arg(long)]
    resume: Option<PathBuf>,
}

impl RunIo {
    fn init(&self) -> Init {
        match (&self.init, &self.resume) {
            (Some(p), _) => Init::Checkpoint(p.clone()),
            (None, Some(p)) => Init::Resume(p.clone()),
            (None, None) => Init::Scratch,
        }
    }
}

/// Overrides for the training schedule.
#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    final_lr: Option<f64>,
    #[arg(long)]
    batch_seconds: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    train_seed: Option<u64>,
    /// pretrain, finetune, lora or multitask.
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    p_cond: Option<f64>,
    #[arg(long)]
    drop_prob: Option<f64>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    sigma_min: Option<f64>,
}

impl TrainArgs {
    fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(total_steps, warmup_steps, peak_lr, final_lr, batch_seconds, grad_clip, mode, drop_prob, lora_rank, checkpoint_every, sigma_min);
        if let Some(s) = self.train_seed {
            c.seed = s;
        }
        if let Some(p) = self.p_cond {
            c.mask_policy.p_cond = p;
        }
        if self.max_frames.is_some() {
            c.max_frames = self.max_frames;
        }
    }
}

/// Overrides for the ODE sampler.
#[derive(Args, Debug)]
struct SamplerArgs {
    /// euler or midpoint.
    #[arg(long)]
    method: Option<OdeMethod>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    cfg_alpha: Option<f64>,
    /// subtract or add.
    #[arg(long)]
    cfg_sign: Option<CfgSign>,
}

impl SamplerArgs {
    fn apply(&self, c: &mut SamplerConfig) {
        if let Some(m) = self.method {
            c.method = m;
        }
        if let Some(h) = self.step_size {
            c.step_size = h;
        }
        if let Some(a) = self.cfg_alpha {
            c.cfg_alpha = a;
        }
        if let Some(s) = self.cfg_sign {
            c.cfg_sign = s;
        }
    }
}

fn or_run_root(p: &Option<PathBuf>, default: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| pipeline::run_root().join(default))
}

fn load_config(path: Option<&Path>) -> melflow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::read(p),
        None => Ok(RunConfig::default()),
    }
}

fn record_path(p: &Path) -> PathBuf {
    if p.is_dir() { p.join("record.json") } else { p.to_path_buf() }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::MakeData { out } => {
            let dir = or_run_root(&out, "data");
            let (n_train, n_eval) = pipeline::make_data(&cfg, &dir)?;
            println!("{}: {n_train} training and {n_eval} held-out utterances", dir.display());
        }
        Command::Pretrain { io, train } => {
            train.apply(&mut cfg.train);
            cfg.validate()?;
            let out = or_run_root(&io.out, "pretrain");
            let record = pipeline::run_pretrain(&cfg, &or_run_root(&io.data, "data"), &out, &io.init())?;
            print_run(&out, &record);
        }
        Command::Finetune { io, tasks, train } => {
            train.apply(&mut cfg.finetune);
            cfg.validate()?;
            let out = or_run_root(&io.out, "finetune");
            let record = pipeline::run_finetune(&cfg, &or_run_root(&io.data, "data"), &out, &tasks, &io.init())?;
            print_run(&out, &record);
        }
        Command::Sample {
            checkpoint,
            task,
            input,
            alignment,
            sources,
            seed,
            out,
            sampler,
        } => {
            sampler.apply(&mut cfg.sampler);
            let input = match (task, &input, &alignment) {
                (TaskTag::Synth, _, Some(a)) => SampleInput::Synth(Alignment::read(a)?),
                (TaskTag::Synth, _, None) => bail!(melflow::Error::Config("synthesis needs --alignment".into())),
                (TaskTag::Enhance, Some(w), _) => SampleInput::Enhance(wav::read(w)?),
                (TaskTag::Separate, Some(w), _) => SampleInput::Separate(wav::read(w)?, sources),
                (_, None, _) => bail!(melflow::Error::Config("this task needs --input".into())),
            };
            let out = or_run_root(&out, "samples");
            for p in pipeline::run_sample(&checkpoint, &input, &cfg.sampler, seed, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            scenario,
            mode,
            seed,
            out,
            record,
            sampler,
        } => {
            sampler.apply(&mut cfg.sampler);
            let report = pipeline::run_evaluate(&cfg, &checkpoint, &or_run_root(&data, "data"), scenario, mode, seed)?;
            let out = out.unwrap_or_else(|| pipeline::run_root().join("eval").join(scenario.name()));
            let record = record.map(|r| record_path(&r));
            pipeline::store_report(&report, &out, record.as_deref())?;
            print!("{}", report.summary_table());
            if report.failures() > 0 {
                eprintln!("{} utterance(s) failed; see {}", report.failures(), out.display());
            }
        }
        Command::Report { records, out } => {
            let records = records
                .iter()
                .map(|p| {
                    let p = record_path(p);
                    ExperimentRecord::read(&p).with_context(|| format!("reading {}", p.display()))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let out = or_run_root(&out, "report");
            for p in write_report(&out, &records)? {
                println!("{}", p.display());
            }
        }
        Command::Sweep {
            data,
            out,
            values,
            scenario,
            seed,
            train,
            sampler,
        } => {
            train.apply(&mut cfg.train);
            sampler.apply(&mut cfg.sampler);
            let out = or_run_root(&out, "sweep");
            let records = pipeline::run_sweep(&cfg, &or_run_root(&data, "data"), &out, &values, scenario, seed)?;
            print!("{}", melflow::harness::report::summary_table(&records));
        }
    }
    Ok(())
}

fn print_run(dir: &Path, record: &ExperimentRecord) {
    let loss = record.final_loss().map_or("-".into(), |l| format!("{l:.6}"));
    println!(
        "{}: {} steps, final loss {loss}, {:.1} s",
        dir.display(),
        record.loss_curve.last().map_or(0, |e| e.step),
        record.wall_clock_s
    );
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<melflow::Error>()) {
        Some(melflow::Error::Config(_)) => EXIT_CONFIG,
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, matching the config-error code.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
