//! Run configuration: flat `key = value` text with `#` comments and dotted
//! keys. Unknown keys are rejected; [`RunConfig::dump`] writes every key back
//! in a fixed order and parses to the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::bounds::MetaBound;
use crate::envs::{EnvKind, EnvironmentSpec};
use crate::metatrain::TrainConfig;
use crate::stochnet::HyperKlMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{key}`")]
    UnknownKey { key: String },
    #[error("key `{key}` given twice (line {line})")]
    Duplicate { key: String, line: usize },
    #[error("key `{key}` is ambiguous; use one of {candidates}")]
    Ambiguous { key: String, candidates: String },
    #[error("bad value {value:?} for `{key}`: {msg}")]
    BadValue { key: String, value: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ConfigError {
    fn bad(key: &str, value: &str, msg: impl ToString) -> Self {
        Self::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            msg: msg.to_string(),
        }
    }
}

/// Every accepted key, in dump order.
pub const KEYS: &[&str] = &[
    "run_name",
    "out_dir",
    "seed",
    "env.kind",
    "env.n_train_tasks",
    "env.n_test_tasks",
    "env.samples_per_task",
    "env.test_samples_per_task",
    "env.prior_fraction",
    "env.idx_images",
    "env.idx_labels",
    "env.glyph_count",
    "env.glyph_side",
    "env.blob_dim",
    "env.blob_classes",
    "env.blob_separation",
    "env.blob_rotation",
    "train.objective",
    "train.lambda",
    "train.lambda_form",
    "train.delta",
    "train.kappa_p",
    "train.kappa_q",
    "train.hyper_kl",
    "train.lr",
    "train.meta_batch_tasks",
    "train.data_batch",
    "train.epochs",
    "train.prior_epochs",
    "train.mc_train_samples",
    "train.mc_eval_samples",
    "train.trace_mc_samples",
    "train.p_min",
    "train.hidden",
    "eval.epochs",
    "report.objectives",
    "report.task_counts",
    "report.seeds",
];

/// Settings of the `report` sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportConfig {
    pub objectives: Vec<MetaBound>,
    pub task_counts: Vec<usize>,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_name: String,
    pub out_dir: PathBuf,
    pub env: EnvironmentSpec,
    /// `train.seed` always equals `env.seed`; both come from the `seed` key.
    pub train: TrainConfig,
    /// Test-task adaptation epochs; `None` reuses `train.epochs`.
    pub eval_epochs: Option<usize>,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            out_dir: PathBuf::from("runs"),
            env: EnvironmentSpec::default(),
            train: TrainConfig::default(),
            eval_epochs: None,
            report: ReportConfig {
                objectives: vec![
                    MetaBound::Classic,
                    MetaBound::Lambda {
                        lambda: 1.0,
                        proof_form: false,
                    },
                    MetaBound::Quad,
                    MetaBound::Varia,
                ],
                task_counts: vec![2, 4, 8],
                seeds: 5,
            },
        }
    }
}

/// Parses `key = value` lines into a map, keeping line numbers for errors.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let k = k.trim();
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(ConfigError::Duplicate {
                key: k.to_string(),
                line: i + 1,
            });
        }
    }
    Ok(out)
}

/// Resolves an override key: exact match, else the unique key whose part
/// after the section prefix matches (`objective` -> `train.objective`).
pub fn resolve_key(key: &str) -> Result<&'static str, ConfigError> {
    if let Some(k) = KEYS.iter().find(|k| **k == key) {
        return Ok(k);
    }
    let hits: Vec<&'static str> = KEYS
        .iter()
        .copied()
        .filter(|k| k.split_once('.').is_some_and(|(_, tail)| tail == key))
        .collect();
    match hits.as_slice() {
        [one] => Ok(one),
        [] => Err(ConfigError::UnknownKey { key: key.to_string() }),
        many => Err(ConfigError::Ambiguous {
            key: key.to_string(),
            candidates: many.join(", "),
        }),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| ConfigError::bad(key, v, e))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Builds a configuration from defaults plus the given entries. Keys must
    /// be fully qualified.
    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        let mut lambda = 1.0;
        let mut proof_form = false;
        let mut objective = c.train.objective.name().to_string();
        let mut report_objectives: Option<String> = None;
        for (key, v) in entries {
            let v = v.as_str();
            match key.as_str() {
                "run_name" => {
                    if v.is_empty() || v.contains(['/', '\\']) {
                        return Err(ConfigError::bad(key, v, "must be a non-empty name without path separators"));
                    }
                    c.run_name = v.to_string();
                }
                "out_dir" => c.out_dir = PathBuf::from(v),
                "seed" => {
                    c.env.seed = num(key, v)?;
                    c.train.seed = c.env.seed;
                }
                "env.kind" => c.env.kind = v.parse::<EnvKind>().map_err(|e| ConfigError::bad(key, v, e))?,
                "env.n_train_tasks" => c.env.n_train_tasks = num(key, v)?,
                "env.n_test_tasks" => c.env.n_test_tasks = num(key, v)?,
                "env.samples_per_task" => c.env.samples_per_task = num(key, v)?,
                "env.test_samples_per_task" => c.env.test_samples_per_task = num(key, v)?,
                "env.prior_fraction" => c.env.prior_fraction = num(key, v)?,
                "env.idx_images" => c.env.idx_images = opt_path(v),
                "env.idx_labels" => c.env.idx_labels = opt_path(v),
                "env.glyph_count" => c.env.glyph_count = num(key, v)?,
                "env.glyph_side" => c.env.glyph_side = num(key, v)?,
                "env.blob_dim" => c.env.blob_dim = num(key, v)?,
                "env.blob_classes" => c.env.blob_classes = num(key, v)?,
                "env.blob_separation" => c.env.blob_separation = num(key, v)?,
                "env.blob_rotation" => c.env.blob_rotation = num(key, v)?,
                "train.objective" => objective = v.to_string(),
                "train.lambda" => lambda = num(key, v)?,
                "train.lambda_form" => {
                    proof_form = match v {
                        "squared" => false,
                        "proof" => true,
                        _ => return Err(ConfigError::bad(key, v, "expected squared|proof")),
                    }
                }
                "train.delta" => c.train.delta = num(key, v)?,
                "train.kappa_p" => c.train.kappa_p = num(key, v)?,
                "train.kappa_q" => c.train.kappa_q = num(key, v)?,
                "train.hyper_kl" => c.train.hyper_kl = v.parse::<HyperKlMode>().map_err(|e| ConfigError::bad(key, v, e))?,
                "train.lr" => c.train.lr = num(key, v)?,
                "train.meta_batch_tasks" => c.train.meta_batch_tasks = num(key, v)?,
                "train.data_batch" => c.train.data_batch = num(key, v)?,
                "train.epochs" => c.train.epochs = num(key, v)?,
                "train.prior_epochs" => c.train.prior_epochs = num(key, v)?,
                "train.mc_train_samples" => c.train.mc_train_samples = num(key, v)?,
                "train.mc_eval_samples" => c.train.mc_eval_samples = num(key, v)?,
                "train.trace_mc_samples" => c.train.trace_mc_samples = num(key, v)?,
                "train.p_min" => c.train.p_min = num(key, v)?,
                "train.hidden" => c.train.hidden = list(key, v)?,
                "eval.epochs" => c.eval_epochs = if v.is_empty() { None } else { Some(num(key, v)?) },
                "report.objectives" => report_objectives = Some(v.to_string()),
                "report.task_counts" => c.report.task_counts = list(key, v)?,
                "report.seeds" => c.report.seeds = num(key, v)?,
                other => return Err(ConfigError::UnknownKey { key: other.to_string() }),
            }
        }
        let parse_bound = |key: &str, name: &str| -> Result<MetaBound, ConfigError> {
            let b = MetaBound::parse(name, lambda).map_err(|e| ConfigError::bad(key, name, e))?;
            Ok(match b {
                MetaBound::Lambda { lambda, .. } => MetaBound::Lambda { lambda, proof_form },
                MetaBound::DdPrior => {
                    return Err(ConfigError::bad(
                        key,
                        name,
                        "ddprior is selected by env.prior_fraction > 0, not as an objective",
                    ))
                }
                other => other,
            })
        };
        c.train.objective = parse_bound("train.objective", &objective)?;
        let report_objectives = match report_objectives {
            Some(v) => v,
            None => join(&c.report.objectives.iter().map(MetaBound::name).collect::<Vec<_>>()),
        };
        c.report.objectives = report_objectives
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| parse_bound("report.objectives", s))
            .collect::<Result<_, _>>()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.env.n_train_tasks < 2 {
            return Err(ConfigError::Invalid("env.n_train_tasks must be >= 2".into()));
        }
        if self.report.objectives.is_empty() {
            return Err(ConfigError::Invalid("report.objectives must list at least one objective".into()));
        }
        if self.report.task_counts.iter().any(|&n| n < 2) {
            return Err(ConfigError::Invalid("report.task_counts entries must be >= 2".into()));
        }
        if self.report.seeds < 2 {
            return Err(ConfigError::Invalid("report.seeds must be >= 2 for a confidence interval".into()));
        }
        Ok(())
    }

    /// Reads `path`, then applies `overrides` (keys resolved with
    /// [`resolve_key`]) on top of the file's entries.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries = parse_entries(&text)?;
        for k in entries.keys() {
            if !KEYS.contains(&k.as_str()) {
                return Err(ConfigError::UnknownKey { key: k.clone() });
            }
        }
        for (k, v) in overrides {
            entries.insert(resolve_key(k)?.to_string(), v.clone());
        }
        Self::from_entries(&entries)
    }

    /// The adaptation settings used on test tasks.
    pub fn eval_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.eval_epochs.unwrap_or(self.train.epochs),
            ..self.train.clone()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_name)
    }

    /// `random` or `data_dependent`, from the prior fraction.
    pub fn prior_mode(&self) -> &'static str {
        if self.env.prior_fraction > 0.0 {
            "data_dependent"
        } else {
            "random"
        }
    }

    /// Every key with its resolved value, in [`KEYS`] order.
    pub fn dump(&self) -> String {
        let (lambda, form) = match self.train.objective {
            MetaBound::Lambda { lambda, proof_form } => (lambda, if proof_form { "proof" } else { "squared" }),
            _ => match self.report.objectives.iter().find_map(|b| match b {
                MetaBound::Lambda { lambda, proof_form } => Some((*lambda, *proof_form)),
                _ => None,
            }) {
                Some((l, p)) => (l, if p { "proof" } else { "squared" }),
                None => (1.0, "squared"),
            },
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let e = &self.env;
        let t = &self.train;
        let values: Vec<String> = vec![
            self.run_name.clone(),
            self.out_dir.display().to_string(),
            e.seed.to_string(),
            e.kind.to_string(),
            e.n_train_tasks.to_string(),
            e.n_test_tasks.to_string(),
            e.samples_per_task.to_string(),
            e.test_samples_per_task.to_string(),
            e.prior_fraction.to_string(),
            path(&e.idx_images),
            path(&e.idx_labels),
            e.glyph_count.to_string(),
            e.glyph_side.to_string(),
            e.blob_dim.to_string(),
            e.blob_classes.to_string(),
            e.blob_separation.to_string(),
            e.blob_rotation.to_string(),
            t.objective.name().to_string(),
            lambda.to_string(),
            form.to_string(),
            t.delta.to_string(),
            t.kappa_p.to_string(),
            t.kappa_q.to_string(),
            t.hyper_kl.to_string(),
            t.lr.to_string(),
            t.meta_batch_tasks.to_string(),
            t.data_batch.to_string(),
            t.epochs.to_string(),
            t.prior_epochs.to_string(),
            t.mc_train_samples.to_string(),
            t.mc_eval_samples.to_string(),
            t.trace_mc_samples.to_string(),
            t.p_min.to_string(),
            join(&t.hidden),
            self.eval_epochs.map(|v| v.to_string()).unwrap_or_default(),
            join(&self.report.objectives.iter().map(MetaBound::name).collect::<Vec<_>>()),
            join(&self.report.task_counts),
            self.report.seeds.to_string(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_dump() {
        let c = RunConfig::default();
        let back = RunConfig::from_entries(&parse_entries(&c.dump()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn custom_values_round_trip() {
        let text = "\
# a comment
seed = 7
env.kind = gaussian_blobs   # trailing comment
env.prior_fraction = 0.3
train.objective = lambda
train.lambda = 0.7
train.lambda_form = proof
train.lr = 0.01
train.hidden = 32, 16
train.hyper_kl = dimensional
eval.epochs = 3
report.objectives = varia,lambda
";
        let c = RunConfig::from_entries(&parse_entries(text).unwrap()).unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.env.seed, 7);
        assert_eq!(
            c.train.objective,
            MetaBound::Lambda {
                lambda: 0.7,
                proof_form: true
            }
        );
        assert_eq!(c.train.hidden, vec![32, 16]);
        assert_eq!(c.eval_train_config().epochs, 3);
        assert_eq!(c.prior_mode(), "data_dependent");
        let back = RunConfig::from_entries(&parse_entries(&c.dump()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        let err = RunConfig::from_entries(&parse_entries("train.speed = 3").unwrap()).unwrap_err();
        assert!(err.to_string().contains("train.speed"), "{err}");
        assert!(matches!(parse_entries("seed = 1\nseed = 2"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(parse_entries("just words"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn bad_values_name_the_key() {
        for (text, key) in [
            ("train.lr = fast", "train.lr"),
            ("train.objective = best", "train.objective"),
            ("train.objective = ddprior", "train.objective"),
            ("env.kind = mnist", "env.kind"),
            ("train.lambda_form = cubic", "train.lambda_form"),
        ] {
            let err = RunConfig::from_entries(&parse_entries(text).unwrap()).unwrap_err();
            assert!(err.to_string().contains(key), "{text}: {err}");
        }
        assert!(matches!(
            RunConfig::from_entries(&parse_entries("train.delta = 2").unwrap()),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn override_keys_resolve_by_suffix() {
        assert_eq!(resolve_key("objective").unwrap(), "train.objective");
        assert_eq!(resolve_key("env.kind").unwrap(), "env.kind");
        assert_eq!(resolve_key("seed").unwrap(), "seed");
        assert!(matches!(resolve_key("epochs"), Err(ConfigError::Ambiguous { .. })));
        assert!(matches!(resolve_key("nope"), Err(ConfigError::UnknownKey { .. })));
    }

    #[test]
    fn load_applies_overrides_after_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "train.objective = classic\ntrain.epochs = 4\n").unwrap();
        let c = RunConfig::load(&path, &[("objective".into(), "varia".into())]).unwrap();
        assert_eq!(c.train.objective, MetaBound::Varia);
        assert_eq!(c.train.epochs, 4);
        assert!(c.dump().contains("train.objective = varia\n"));
        let missing = RunConfig::load(&dir.path().join("absent.conf"), &[]).unwrap_err();
        assert!(missing.to_string().contains("absent.conf"));
    }
}
