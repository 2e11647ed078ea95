//! Post-hoc probes on a finished run. Reports go to `<run>/analysis/` as CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::ValueEnum;
use xder::analysis::{
    cicl_loss, fisher_trace, flatness, offline_buffer_retrain, preallocation_sweep, task_sets, transfer_curves, auc_t,
    DataSplit, RetrainConfig, RetrainMode, DEFAULT_ALPHA_GRID, DEFAULT_NOISE_SAMPLES,
};
use xder::metrics::{avg_logit_profile, error_head_histogram};
use xder::model::argmax;
use xder::stream::{to_batch, Example};

use crate::error::CliError;
use crate::run::RunDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Probe {
    Flatness,
    Fisher,
    Offline,
    Transfer,
    Bias,
    Prealloc,
}

#[derive(Debug, Clone)]
pub struct ProbeArgs {
    pub alphas: Vec<f64>,
    pub samples: usize,
    pub split: DataSplit,
    pub task: Option<usize>,
    pub mode: Option<RetrainMode>,
    pub retrain_epochs: usize,
    pub shots: Vec<usize>,
    pub values: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for ProbeArgs {
    fn default() -> Self {
        Self {
            alphas: DEFAULT_ALPHA_GRID.to_vec(),
            samples: DEFAULT_NOISE_SAMPLES,
            split: DataSplit::Train,
            task: None,
            mode: None,
            retrain_epochs: RetrainConfig::default().epochs,
            shots: vec![1, 2, 5, 10, 20, 50],
            values: None,
            seed: 0,
        }
    }
}

fn write(run: &RunDir, name: &str, text: &str) -> Result<PathBuf, CliError> {
    let dir = run.path.join("analysis");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| CliError::io(&p.display().to_string(), e))?;
    Ok(p)
}

fn last_task(run: &RunDir, task: Option<usize>) -> Result<usize, CliError> {
    let n = run.checkpoint_count();
    if n == 0 {
        return Err(CliError::Missing(format!("no checkpoints in {}", run.path.display())));
    }
    match task {
        Some(t) if t >= n => Err(CliError::Missing(format!("checkpoint for task {t} in {}", run.path.display()))),
        Some(t) => Ok(t),
        None => Ok(n - 1),
    }
}

/// Runs one probe and returns the report files it wrote.
pub fn cmd_analyze(run: &RunDir, probe: Probe, args: &ProbeArgs) -> Result<Vec<PathBuf>, CliError> {
    match probe {
        Probe::Flatness => {
            let t = last_task(run, args.task)?;
            let model = run.checkpoint(t)?;
            let stream = run.stream()?;
            let sets = task_sets(&stream, args.split);
            let sets = &sets[..=t.min(sets.len() - 1)];
            let base = cicl_loss(&model, sets)?;
            let r = flatness(&model, sets, &args.alphas, args.samples, args.seed)?;
            let mut s = String::from("alpha,loss,base_loss,samples\n");
            for (a, l) in r.alphas.iter().zip(&r.losses) {
                writeln!(s, "{a},{l},{base},{}", r.samples).unwrap();
            }
            Ok(vec![write(run, "flatness.csv", &s)?])
        }
        Probe::Fisher => {
            let stream = run.stream()?;
            let sets = task_sets(&stream, args.split);
            let mut s = String::from("after_task,fisher_trace\n");
            for t in 0..run.checkpoint_count() {
                let model = run.checkpoint(t)?;
                let upto = if run.checkpoint_count() == 1 { sets.len() - 1 } else { t };
                writeln!(s, "{t},{}", fisher_trace(&model, &sets[..=upto])?).unwrap();
            }
            if run.checkpoint_count() == 0 {
                return Err(CliError::Missing(format!("no checkpoints in {}", run.path.display())));
            }
            Ok(vec![write(run, "fisher.csv", &s)?])
        }
        Probe::Offline => {
            let buffer = run.buffer()?;
            let stream = run.stream()?;
            let cfg = RetrainConfig { epochs: args.retrain_epochs, seed: args.seed, ..RetrainConfig::default() };
            let modes = args.mode.map(|m| vec![m]).unwrap_or_else(|| RetrainMode::ALL.to_vec());
            let mut s = String::from("mode,accuracy\n");
            for m in modes {
                writeln!(s, "{m},{}", offline_buffer_retrain(&buffer, &stream, m, &cfg)?).unwrap();
            }
            Ok(vec![write(run, "offline.csv", &s)?])
        }
        Probe::Transfer => {
            let stream = run.stream()?;
            let n = run.checkpoint_count();
            if n < stream.num_tasks() {
                return Err(CliError::Missing(format!(
                    "per-task checkpoints in {} (found {n} of {})",
                    run.path.display(),
                    stream.num_tasks()
                )));
            }
            let mut curves = String::from("source,target,shots,accuracy\n");
            let mut aucs = String::from("source,auc\n");
            for t in 0..stream.num_tasks().saturating_sub(1) {
                let c = transfer_curves(&run.checkpoint(t)?, &stream, t, &args.shots, args.seed)?;
                for curve in &c {
                    for (k, a) in curve.shots.iter().zip(&curve.accuracies) {
                        writeln!(curves, "{},{},{k},{a}", curve.source, curve.target).unwrap();
                    }
                }
                writeln!(aucs, "{t},{}", auc_t(&c)?).unwrap();
            }
            Ok(vec![write(run, "transfer.csv", &curves)?, write(run, "transfer_auc.csv", &aucs)?])
        }
        Probe::Bias => {
            let stream = run.stream()?;
            let y = stream.classes_per_task();
            let n = run.checkpoint_count();
            let mut hist = String::from("after_task,head,share\n");
            for c in 1..n {
                let old: Vec<Example> = stream.tasks()[..c].iter().flat_map(|t| t.test.iter().cloned()).collect();
                // heads after `c` are not candidates for the histogram
                let (x, labels) = to_batch(&old, stream.feature_dim());
                let logits = run.checkpoint(c)?.forward(&x)?;
                let p: Vec<usize> = logits.iter_rows().map(|r| argmax(&r[..(c + 1) * y])).collect();
                if let Some(h) = error_head_histogram(&p, &labels, c, y)? {
                    for (head, share) in h.iter().enumerate() {
                        writeln!(hist, "{c},{head},{share}").unwrap();
                    }
                }
            }
            let model = run.checkpoint(last_task(run, None)?)?;
            let test: Vec<Example> = stream.tasks().iter().flat_map(|t| t.test.iter().cloned()).collect();
            let (x, labels) = to_batch(&test, stream.feature_dim());
            let logits = model.forward(&x)?;
            let mut prof = String::from("task");
            for k in 0..logits.cols() {
                write!(prof, ",logit_{k}").unwrap();
            }
            prof.push('\n');
            for t in 0..stream.num_tasks() {
                let v = avg_logit_profile(&logits, &labels, |l| l / y == t)?;
                write!(prof, "{t}").unwrap();
                for x in v {
                    write!(prof, ",{x}").unwrap();
                }
                prof.push('\n');
            }
            Ok(vec![write(run, "bias_histogram.csv", &hist)?, write(run, "logit_profile.csv", &prof)?])
        }
        Probe::Prealloc => {
            let stream = run.stream()?;
            let values = args.values.clone().unwrap_or_else(|| (0..stream.num_tasks()).collect());
            let mut s = String::from("future_heads,faa\n");
            for (t, f) in preallocation_sweep(&stream, &values, &run.spec.train)? {
                writeln!(s, "{t},{f}").unwrap();
            }
            Ok(vec![write(run, "prealloc.csv", &s)?])
        }
    }
}
