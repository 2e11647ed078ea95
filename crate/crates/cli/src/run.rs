//! Run directories: layout, manifest and artifacts.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xder::buffer::RehearsalBuffer;
use xder::metrics::{ece, faa, ff, ss_metrics, AccuracyMatrix, CalibrationInput, MetricRecord, SuperclassMap, DEFAULT_ECE_BINS};
use xder::model::Mlp;
use xder::stream::{to_batch, TaskStream};
use xder::trainer::{evaluate, run_sequence, RunResult};

use crate::config::{RunSpec, Settings, StreamSource};
use crate::error::CliError;

pub const SCHEMA: &str = "xder-run/1";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.txt";
pub const MATRIX: &str = "matrix.csv";
pub const LOSSES: &str = "losses.jsonl";
pub const METRICS: &str = "metrics.jsonl";
pub const BUFFER: &str = "buffer.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamInfo {
    pub kind: String,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub run_id: String,
    pub status: Status,
    pub method: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub stream: StreamInfo,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: Option<u64>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub error: Option<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// First 12 hex digits of the SHA-256 of the config echo.
pub fn run_id(echo: &str) -> String {
    Sha256::digest(echo.as_bytes()).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

pub fn checkpoint_name(task: usize) -> String {
    format!("checkpoints/task_{task}.ckpt")
}

pub fn output_root(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os("XDER_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out")),
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(&path.display().to_string(), e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::io(&path.display().to_string(), e))?);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| CliError::io(&path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| CliError::io(&path.display().to_string(), e))
}

/// Trains one configuration and writes its run directory.
pub fn cmd_run(settings: &Settings, root: &Path, force: bool) -> Result<PathBuf, CliError> {
    let spec = settings.build()?;
    let stream = spec.stream.load()?;
    let echo = spec.echo();
    let id = run_id(&echo);
    let dir = root.join(format!("{}-s{}-{id}", spec.train.method, spec.train.seed));
    if dir.exists() {
        if !force {
            return Err(CliError::Config(format!("{} already exists; pass --force to overwrite", dir.display())));
        }
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
    }
    fs::create_dir_all(dir.join("checkpoints")).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
    fs::write(dir.join(CONFIG), &echo).map_err(|e| CliError::io(CONFIG, e))?;

    let mut manifest = Manifest {
        schema: SCHEMA.into(),
        run_id: id.clone(),
        status: Status::Running,
        method: spec.train.method.to_string(),
        seed: spec.train.seed,
        config: spec.resolved().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        stream: StreamInfo {
            kind: match spec.stream {
                StreamSource::Blobs(_) => "blobs".into(),
                StreamSource::File { .. } => "file".into(),
            },
            tasks: stream.num_tasks(),
            classes_per_task: stream.classes_per_task(),
            dim: stream.feature_dim(),
            fingerprint: stream.fingerprint(),
        },
        started_at: now(),
        finished_at: None,
        artifacts: vec![CONFIG.into()],
        error: None,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;

    match run_sequence(&stream, &spec.train) {
        Ok(result) => {
            manifest.artifacts.extend(write_artifacts(&dir, &id, &stream, &result)?);
            manifest.status = Status::Complete;
            manifest.finished_at = Some(now());
            write_json(&dir.join(MANIFEST), &manifest)?;
            Ok(dir)
        }
        Err(e) => {
            manifest.status = Status::Failed;
            manifest.finished_at = Some(now());
            manifest.error = Some(e.to_string());
            write_json(&dir.join(MANIFEST), &manifest)?;
            Err(e.into())
        }
    }
}

fn write_artifacts(dir: &Path, id: &str, stream: &TaskStream, r: &RunResult) -> Result<Vec<String>, CliError> {
    let mut written = Vec::new();
    fs::write(dir.join(MATRIX), r.matrix.to_csv()).map_err(|e| CliError::io(MATRIX, e))?;
    written.push(MATRIX.to_string());
    write_jsonl(&dir.join(LOSSES), &r.trace)?;
    written.push(LOSSES.to_string());
    if let Some(b) = &r.buffer {
        let f = File::create(dir.join(BUFFER)).map_err(|e| CliError::io(BUFFER, e))?;
        b.write_to(BufWriter::new(f))?;
        written.push(BUFFER.to_string());
    }
    for (t, m) in r.checkpoints.iter().enumerate() {
        let name = checkpoint_name(t);
        let f = File::create(dir.join(&name)).map_err(|e| CliError::io(&name, e))?;
        m.write_checkpoint(BufWriter::new(f))?;
        written.push(name);
    }
    write_jsonl(&dir.join(METRICS), &run_metrics(id, stream, r)?)?;
    written.push(METRICS.to_string());
    Ok(written)
}

fn record(run_id: &str, metric: &str, value: Option<f64>, scope: &str) -> MetricRecord {
    MetricRecord { run_id: run_id.into(), metric: metric.into(), value, scope: scope.into() }
}

/// Summary metrics of the final model: FAA, FF, ECE, superclass metrics and
/// the final accuracy of every task.
pub fn run_metrics(id: &str, stream: &TaskStream, r: &RunResult) -> Result<Vec<MetricRecord>, CliError> {
    let model = r.final_model();
    let test: Vec<_> = stream.tasks().iter().flat_map(|t| t.test.iter().cloned()).collect();
    let (x, y) = to_batch(&test, stream.feature_dim());
    let logits = model.forward(&x)?;
    let mut out = vec![
        record(id, "faa", Some(faa(&r.matrix)?), "final"),
        record(id, "ff", ff(&r.matrix).ok(), "final"),
        record(id, "ece", Some(ece(&CalibrationInput::from_logits(&logits, &y, DEFAULT_ECE_BINS))?), "final"),
    ];
    if stream.num_classes().is_multiple_of(2) {
        let s = ss_metrics(&logits, &y, &SuperclassMap::consecutive_pairs(stream.num_classes()))?;
        out.push(record(id, "ss_err", Some(s.ss_err), "final"));
        out.push(record(id, "ss_nll", Some(s.ss_nll), "final"));
    }
    for t in stream.tasks() {
        out.push(record(id, "accuracy", Some(evaluate(model, &t.test)?), &format!("task_{}", t.id)));
    }
    Ok(out)
}

/// A completed run loaded back from disk.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: Manifest,
    pub spec: RunSpec,
}

impl RunDir {
    pub fn open(path: &Path) -> Result<Self, CliError> {
        let mpath = path.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|_| CliError::Missing(format!("{} not found", mpath.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{} does not match schema {SCHEMA}: {e}", mpath.display())))?;
        if manifest.schema != SCHEMA {
            return Err(CliError::Config(format!("{} has schema {:?}, expected {SCHEMA}", mpath.display(), manifest.schema)));
        }
        if manifest.status != Status::Complete {
            return Err(CliError::Missing(format!("run {} is incomplete (status {:?})", path.display(), manifest.status)));
        }
        let mut settings = Settings::default();
        for (k, v) in &manifest.config {
            settings.set(k, v)?;
        }
        let spec = settings.build()?;
        Ok(Self { path: path.to_path_buf(), manifest, spec })
    }

    fn artifact(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path.join(name);
        if !p.exists() {
            return Err(CliError::Missing(format!("{} not found", p.display())));
        }
        Ok(p)
    }

    pub fn stream(&self) -> Result<TaskStream, CliError> {
        let s = self.spec.stream.load()?;
        if s.fingerprint() != self.manifest.stream.fingerprint {
            return Err(CliError::Runtime(format!("stream of {} no longer matches its manifest", self.path.display())));
        }
        Ok(s)
    }

    pub fn matrix(&self) -> Result<AccuracyMatrix, CliError> {
        let p = self.artifact(MATRIX)?;
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(MATRIX, e))?;
        Ok(AccuracyMatrix::from_csv(&text)?)
    }

    pub fn metrics(&self) -> Result<Vec<MetricRecord>, CliError> {
        let p = self.artifact(METRICS)?;
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(METRICS, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))))
            .collect()
    }

    pub fn checkpoint(&self, task: usize) -> Result<Mlp, CliError> {
        let p = self.artifact(&checkpoint_name(task))?;
        let f = File::open(&p).map_err(|e| CliError::io(&p.display().to_string(), e))?;
        Ok(Mlp::read_checkpoint(BufReader::new(f))?)
    }

    /// Number of per-task checkpoints saved.
    pub fn checkpoint_count(&self) -> usize {
        self.manifest.artifacts.iter().filter(|a| a.starts_with("checkpoints/")).count()
    }

    pub fn buffer(&self) -> Result<RehearsalBuffer, CliError> {
        let p = self.artifact(BUFFER)?;
        let f = File::open(&p).map_err(|e| CliError::io(BUFFER, e))?;
        Ok(RehearsalBuffer::read_from(BufReader::new(f))?)
    }
}
