//! `xder`: run, compare and analyze continual-learning experiments.

mod analyze;
mod compare;
mod config;
mod error;
mod run;

use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xder::analysis::{DataSplit, RetrainMode};
use xder::stream::{generate_blob_stream, write_dataset};

use crate::analyze::{cmd_analyze, Probe, ProbeArgs};
use crate::config::{Settings, KEYS, STREAM_KEYS};
use crate::error::CliError;
use crate::run::{cmd_run, output_root, RunDir};

#[derive(Parser)]
#[command(name = "xder", version, about = "Class-incremental continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration and write its run directory.
    ///
    /// Settings come from `--config FILE` (`key = value` lines) and are
    /// overridden by `--<key> <value>` flags. Keys: method, seed, tasks,
    /// classes_per_task, per_class, dim, separation, noise_std, test_fraction,
    /// stream_seed, dataset, epochs, batch_size, buffer_batch_size, capacity,
    /// lr, momentum, weight_decay, lr_milestones, prealloc, hidden, alpha,
    /// beta, lambda, eta, margin, tau, gamma, weak_noise, strong_noise,
    /// strong_mask, strong_jitter, fuse_draws, log_every.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
        /// Output root; defaults to $XDER_OUT, then `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        settings: Vec<String>,
    },
    /// Per-method FAA, FF and ECE over finished runs, as CSV.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a post-hoc probe on a finished run.
    Analyze {
        #[arg(value_enum)]
        probe: Probe,
        run: PathBuf,
        /// Noise scales for the flatness probe.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long)]
        samples: Option<usize>,
        /// Data split for the flatness and Fisher probes.
        #[arg(long, default_value = "train")]
        split: DataSplit,
        /// Checkpoint to probe; the last one by default.
        #[arg(long)]
        task: Option<usize>,
        /// Retraining target for the offline probe; all three by default.
        #[arg(long)]
        mode: Option<RetrainMode>,
        #[arg(long)]
        retrain_epochs: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        /// Pre-allocated future heads for the prealloc probe.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a blob stream as a dataset file.
    GenerateStream {
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        settings: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("xder: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Run { mut config, mut force, mut out, mut settings } => {
            // runner flags may also follow the settings
            force |= take_switch(&mut settings, "--force");
            config = take_value(&mut settings, "--config")?.map(PathBuf::from).or(config);
            out = take_value(&mut settings, "--out")?.map(PathBuf::from).or(out);
            let mut s = Settings::default();
            if let Some(p) = &config {
                s.merge_file(p)?;
            }
            s.merge_flags(&settings)?;
            let dir = cmd_run(&s, &output_root(out.as_deref()), force)?;
            println!("{}", dir.display());
        }
        Cmd::Compare { runs, output } => {
            let table = compare::cmd_compare(&runs)?;
            match output {
                Some(p) => std::fs::write(&p, table).map_err(|e| CliError::io(&p.display().to_string(), e))?,
                None => print!("{table}"),
            }
        }
        Cmd::Analyze { probe, run, alphas, samples, split, task, mode, retrain_epochs, shots, values, seed } => {
            let d = ProbeArgs::default();
            let args = ProbeArgs {
                alphas: alphas.unwrap_or(d.alphas),
                samples: samples.unwrap_or(d.samples),
                split,
                task,
                mode,
                retrain_epochs: retrain_epochs.unwrap_or(d.retrain_epochs),
                shots: shots.unwrap_or(d.shots),
                values,
                seed,
            };
            let run = RunDir::open(&run)?;
            for p in cmd_analyze(&run, probe, &args)? {
                println!("{}", p.display());
            }
        }
        Cmd::GenerateStream { output, mut settings } => {
            let output = take_value(&mut settings, "--output")?
                .map(PathBuf::from)
                .or(output)
                .ok_or_else(|| CliError::Config("generate-stream needs --output FILE".into()))?;
            let mut s = Settings::default();
            s.merge_flags(&settings)?;
            for k in KEYS.iter().filter(|k| s.get(k).is_some()) {
                if !STREAM_KEYS.contains(k) {
                    return Err(CliError::Config(format!("`{k}` does not apply to generate-stream")));
                }
            }
            let config::StreamSource::Blobs(spec) = s.stream_spec()? else {
                unreachable!("dataset is not a stream key")
            };
            let stream = generate_blob_stream(&spec).map_err(|e| CliError::Config(e.to_string()))?;
            let f = std::fs::File::create(&output).map_err(|e| CliError::io(&output.display().to_string(), e))?;
            write_dataset(&stream.to_dataset(), BufWriter::new(f))?;
            println!("{}", output.display());
        }
    }
    Ok(())
}

fn take_switch(args: &mut Vec<String>, flag: &str) -> bool {
    let before = args.len();
    args.retain(|a| a != flag);
    args.len() != before
}

fn take_value(args: &mut Vec<String>, flag: &str) -> Result<Option<String>, CliError> {
    let Some(i) = args.iter().position(|a| a == flag) else {
        return Ok(None);
    };
    if i + 1 >= args.len() {
        return Err(CliError::Config(format!("`{flag}` needs a value")));
    }
    let v = args.remove(i + 1);
    args.remove(i);
    Ok(Some(v))
}
