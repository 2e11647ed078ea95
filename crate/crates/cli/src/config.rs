//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use xder::stream::{generate_blob_stream, load_dataset, AugmentationPolicy, BlobStreamSpec, TaskStream};
use xder::trainer::{Method, Prealloc, TrainConfig};

use crate::error::CliError;

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "method",
    "seed",
    "tasks",
    "classes_per_task",
    "per_class",
    "dim",
    "separation",
    "noise_std",
    "test_fraction",
    "stream_seed",
    "dataset",
    "epochs",
    "batch_size",
    "buffer_batch_size",
    "capacity",
    "lr",
    "momentum",
    "weight_decay",
    "lr_milestones",
    "prealloc",
    "hidden",
    "alpha",
    "beta",
    "lambda",
    "eta",
    "margin",
    "tau",
    "gamma",
    "weak_noise",
    "strong_noise",
    "strong_mask",
    "strong_jitter",
    "fuse_draws",
    "log_every",
];

/// Keys that shape the stream; `generate-stream` accepts only these.
pub const STREAM_KEYS: &[&str] =
    &["tasks", "classes_per_task", "per_class", "dim", "separation", "noise_std", "test_fraction", "stream_seed"];

/// Raw settings in the order they were given; later values win.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key, value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// Consumes `--key value` pairs.
    pub fn merge_flags(&mut self, args: &[String]) -> Result<(), CliError> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| CliError::Config(format!("expected `--key value`, found `{flag}`")))?;
            if let Some((k, v)) = key.split_once('=') {
                self.set(k, v)?;
                continue;
            }
            if !KEYS.contains(&key.replace('-', "_").as_str()) {
                return Err(CliError::Config(format!("unknown config key `{key}`")));
            }
            let value = it.next().ok_or_else(|| CliError::Config(format!("`--{key}` needs a value")))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::Config(format!("bad value for `{key}` ({v:?}): {e}"))))
            .transpose()
    }

    fn list(&self, key: &str) -> Result<Option<Vec<usize>>, CliError> {
        self.get(key)
            .map(|v| parse_list(v).map_err(|e| CliError::Config(format!("bad value for `{key}` ({v:?}): {e}"))))
            .transpose()
    }

    pub fn stream_spec(&self) -> Result<StreamSource, CliError> {
        let mut spec = BlobStreamSpec::new(5, 2, 300, 8, 2.0, 0);
        set_opt(&mut spec.num_tasks, self.parse("tasks")?);
        set_opt(&mut spec.classes_per_task, self.parse("classes_per_task")?);
        set_opt(&mut spec.per_class, self.parse("per_class")?);
        set_opt(&mut spec.dim, self.parse("dim")?);
        set_opt(&mut spec.separation, self.parse("separation")?);
        set_opt(&mut spec.noise_std, self.parse("noise_std")?);
        set_opt(&mut spec.test_fraction, self.parse("test_fraction")?);
        set_opt(&mut spec.seed, self.parse("stream_seed")?);
        Ok(match self.get("dataset") {
            Some(p) if !p.is_empty() => StreamSource::File {
                path: PathBuf::from(p),
                tasks: spec.num_tasks,
                classes_per_task: spec.classes_per_task,
                split_seed: spec.seed,
            },
            _ => StreamSource::Blobs(spec),
        })
    }

    pub fn build(&self) -> Result<RunSpec, CliError> {
        let method: Method = self.parse("method")?.unwrap_or(Method::Xder);
        let mut c = TrainConfig::new(method);
        set_opt(&mut c.seed, self.parse("seed")?);
        set_opt(&mut c.epochs, self.parse("epochs")?);
        set_opt(&mut c.batch_size, self.parse("batch_size")?);
        set_opt(&mut c.buffer_batch_size, self.parse("buffer_batch_size")?);
        set_opt(&mut c.capacity, self.parse("capacity")?);
        set_opt(&mut c.lr, self.parse("lr")?);
        set_opt(&mut c.momentum, self.parse("momentum")?);
        set_opt(&mut c.weight_decay, self.parse("weight_decay")?);
        set_opt(&mut c.lr_milestones, self.list("lr_milestones")?);
        set_opt(&mut c.prealloc, self.parse::<Prealloc>("prealloc")?);
        set_opt(&mut c.hidden, self.list("hidden")?);
        let w = &mut c.weights;
        set_opt(&mut w.alpha, self.parse("alpha")?);
        set_opt(&mut w.beta, self.parse("beta")?);
        set_opt(&mut w.lambda, self.parse("lambda")?);
        set_opt(&mut w.eta, self.parse("eta")?);
        set_opt(&mut w.margin, self.parse("margin")?);
        set_opt(&mut w.tau, self.parse("tau")?);
        set_opt(&mut w.gamma, self.parse("gamma")?);
        if let Some(v) = self.parse("weak_noise")? {
            c.augment.weak = AugmentationPolicy::weak(v);
        }
        let s = c.augment.strong;
        c.augment.strong = AugmentationPolicy::strong(
            self.parse("strong_noise")?.unwrap_or(s.noise_scale),
            self.parse("strong_mask")?.unwrap_or(s.mask_fraction),
            self.parse("strong_jitter")?.unwrap_or(s.scale_jitter),
        );
        set_opt(&mut c.fuse_draws, self.parse("fuse_draws")?);
        set_opt(&mut c.log_every, self.parse("log_every")?);
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let stream = self.stream_spec()?;
        if let StreamSource::Blobs(spec) = &stream {
            if spec.num_tasks == 0 || spec.classes_per_task == 0 || spec.per_class == 0 || spec.dim == 0 {
                return Err(CliError::Config("tasks, classes_per_task, per_class and dim must be positive".into()));
            }
        }
        Ok(RunSpec { train: c, stream })
    }
}

fn set_opt<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

pub fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamSource {
    Blobs(BlobStreamSpec),
    File {
        path: PathBuf,
        tasks: usize,
        classes_per_task: usize,
        split_seed: u64,
    },
}

impl StreamSource {
    pub fn load(&self) -> Result<TaskStream, CliError> {
        match self {
            StreamSource::Blobs(spec) => generate_blob_stream(spec).map_err(|e| CliError::Config(e.to_string())),
            StreamSource::File { path, tasks, classes_per_task, split_seed } => {
                if !path.exists() {
                    return Err(CliError::Missing(format!("dataset file {}", path.display())));
                }
                load_dataset(path, *tasks, *classes_per_task, *split_seed).map_err(|e| CliError::Config(e.to_string()))
            }
        }
    }
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub train: TrainConfig,
    pub stream: StreamSource,
}

impl RunSpec {
    /// Every key with its resolved value, in `KEYS` order.
    pub fn resolved(&self) -> Vec<(&'static str, String)> {
        let c = &self.train;
        let w = &c.weights;
        let (tasks, cpt, stream_seed) = match &self.stream {
            StreamSource::Blobs(s) => (s.num_tasks, s.classes_per_task, s.seed),
            StreamSource::File { tasks, classes_per_task, split_seed, .. } => (*tasks, *classes_per_task, *split_seed),
        };
        let mut out = vec![
            ("method", c.method.to_string()),
            ("seed", c.seed.to_string()),
            ("tasks", tasks.to_string()),
            ("classes_per_task", cpt.to_string()),
        ];
        match &self.stream {
            StreamSource::Blobs(s) => out.extend([
                ("per_class", s.per_class.to_string()),
                ("dim", s.dim.to_string()),
                ("separation", s.separation.to_string()),
                ("noise_std", s.noise_std.to_string()),
                ("test_fraction", s.test_fraction.to_string()),
                ("stream_seed", stream_seed.to_string()),
            ]),
            StreamSource::File { path, .. } => out.extend([
                ("stream_seed", stream_seed.to_string()),
                ("dataset", path.display().to_string()),
            ]),
        }
        out.extend([
            ("epochs", c.epochs.to_string()),
            ("batch_size", c.batch_size.to_string()),
            ("buffer_batch_size", c.buffer_batch_size.to_string()),
            ("capacity", c.capacity.to_string()),
            ("lr", c.lr.to_string()),
            ("momentum", c.momentum.to_string()),
            ("weight_decay", c.weight_decay.to_string()),
            ("lr_milestones", join(&c.lr_milestones)),
            ("prealloc", c.prealloc.to_string()),
            ("hidden", join(&c.hidden)),
            ("alpha", w.alpha.to_string()),
            ("beta", w.beta.to_string()),
            ("lambda", w.lambda.to_string()),
            ("eta", w.eta.to_string()),
            ("margin", w.margin.to_string()),
            ("tau", w.tau.to_string()),
            ("gamma", w.gamma.to_string()),
            ("weak_noise", c.augment.weak.noise_scale.to_string()),
            ("strong_noise", c.augment.strong.noise_scale.to_string()),
            ("strong_mask", c.augment.strong.mask_fraction.to_string()),
            ("strong_jitter", c.augment.strong.scale_jitter.to_string()),
            ("fuse_draws", c.fuse_draws.to_string()),
            ("log_every", c.log_every.to_string()),
        ]);
        out
    }

    /// Canonical config text; parsing it back yields the same run.
    pub fn echo(&self) -> String {
        self.resolved().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
