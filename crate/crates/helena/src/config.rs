//! Run configuration: a flat `key=value` file merged with command-line
//! overrides into one validated record, plus the run-manifest rendering
//! that makes every run reproducible from its outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::chansim::PilotPattern;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config key {key}: {message}")]
    Value { key: String, message: String },
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("duplicate config key {0}")]
    DuplicateKey(String),
    #[error("{field} is required {context}")]
    Missing {
        field: &'static str,
        context: &'static str,
    },
}

/// Which estimators an evaluation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMethod {
    Model,
    Ls,
    Both,
}

impl EvalMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Model => "model",
            Self::Ls => "ls",
            Self::Both => "both",
        }
    }
}

impl FromStr for EvalMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "model" => Ok(Self::Model),
            "ls" => Ok(Self::Ls),
            "both" => Ok(Self::Both),
            other => Err(format!("{other} is not one of model, ls, both")),
        }
    }
}

/// Everything a command run needs, resolved from defaults, then the config
/// file, then command-line flags (later sources win).
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub samples: usize,
    pub runs: usize,
    pub method: EvalMethod,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pilots: PilotPattern,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            samples: 2200,
            runs: 100,
            method: EvalMethod::Both,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pilots: PilotPattern::default(),
            dataset: None,
            checkpoint: None,
            out: None,
        }
    }
}

/// Command-line values that take precedence over the config file. `None`
/// leaves the file (or default) value in place.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub samples: Option<usize>,
    pub runs: Option<usize>,
    pub method: Option<EvalMethod>,
    pub max_epochs: Option<usize>,
    pub no_se: bool,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Splits flat `key=value` text into an ordered map. Blank lines and lines
/// starting with `#` are skipped; keys may not repeat.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
            line: i + 1,
            message: "expected key=value".into(),
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Parse {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(ConfigError::DuplicateKey(key));
        }
    }
    Ok(map)
}

fn parse_value<T>(key: &str, value: &str, expected: &str) -> Result<T, ConfigError>
where
    T: FromStr,
{
    value.parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        message: format!("{value} is not {expected}"),
    })
}

/// A `a,b` pair of unsigned integers.
fn parse_pair(key: &str, value: &str) -> Result<(usize, usize), ConfigError> {
    let err = || ConfigError::Value {
        key: key.to_string(),
        message: format!("{value} is not a pair like 12,2"),
    };
    let (a, b) = value.split_once(',').ok_or_else(err)?;
    Ok((
        a.trim().parse().map_err(|_| err())?,
        b.trim().parse().map_err(|_| err())?,
    ))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(|v| {
            v.trim().parse().map_err(|_| ConfigError::Value {
                key: key.to_string(),
                message: format!("{value} is not a comma-separated list of indices"),
            })
        })
        .collect()
}

impl RunConfig {
    /// Applies config-file keys over the defaults, then the command-line
    /// overrides on top.
    pub fn resolve(
        file: &BTreeMap<String, String>,
        overrides: &Overrides,
    ) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (key, value) in file {
            cfg.apply(key, value)?;
        }
        let o = overrides;
        if let Some(v) = o.seed {
            cfg.seed = v;
        }
        if let Some(v) = o.threads {
            cfg.threads = v;
        }
        if let Some(v) = o.samples {
            cfg.samples = v;
        }
        if let Some(v) = o.runs {
            cfg.runs = v;
        }
        if let Some(v) = o.method {
            cfg.method = v;
        }
        if let Some(v) = o.max_epochs {
            cfg.train.max_epochs = v;
        }
        if o.no_se {
            cfg.model.use_se = false;
        }
        if let Some(v) = &o.dataset {
            cfg.dataset = Some(v.clone());
        }
        if let Some(v) = &o.checkpoint {
            cfg.checkpoint = Some(v.clone());
        }
        if let Some(v) = &o.out {
            cfg.out = Some(v.clone());
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse_value(key, value, "an unsigned integer")?,
            "threads" => self.threads = parse_value(key, value, "an unsigned integer")?,
            "samples" => self.samples = parse_value(key, value, "an unsigned integer")?,
            "runs" => self.runs = parse_value(key, value, "an unsigned integer")?,
            "method" => {
                self.method = value.parse().map_err(|message| ConfigError::Value {
                    key: key.to_string(),
                    message,
                })?;
            }
            "n_s" => self.model.n_s = parse_value(key, value, "an unsigned integer")?,
            "n_d" => self.model.n_d = parse_value(key, value, "an unsigned integer")?,
            "kernel1" => self.model.kernel1 = parse_pair(key, value)?,
            "kernel2" => self.model.kernel2 = parse_pair(key, value)?,
            "c1" => self.model.c1 = parse_value(key, value, "an unsigned integer")?,
            "c" => self.model.c = parse_value(key, value, "an unsigned integer")?,
            "p" => self.model.p = parse_value(key, value, "an unsigned integer")?,
            "d" => self.model.d = parse_value(key, value, "an unsigned integer")?,
            "h" => self.model.h = parse_value(key, value, "an unsigned integer")?,
            "r" => self.model.r = parse_value(key, value, "an unsigned integer")?,
            "dropout_rate" => self.model.dropout_rate = parse_value(key, value, "a number")?,
            "use_se" => self.model.use_se = parse_value(key, value, "true or false")?,
            "pilot_symbols" => self.pilots.symbol_indices = parse_list(key, value)?,
            "pilot_stride" => {
                self.pilots.subcarrier_stride = parse_value(key, value, "an unsigned integer")?
            }
            "pilot_offset" => {
                self.pilots.subcarrier_offset = parse_value(key, value, "an unsigned integer")?
            }
            "batch_size" => self.train.batch_size = parse_value(key, value, "an unsigned integer")?,
            "lr0" => self.train.lr0 = parse_value(key, value, "a number")?,
            "lr_factor" => self.train.lr_factor = parse_value(key, value, "a number")?,
            "lr_patience_epochs" => {
                self.train.lr_patience_epochs = parse_value(key, value, "an unsigned integer")?
            }
            "lr_min" => self.train.lr_min = parse_value(key, value, "a number")?,
            "early_stop_patience" => {
                self.train.early_stop_patience = parse_value(key, value, "an unsigned integer")?
            }
            "max_epochs" => self.train.max_epochs = parse_value(key, value, "an unsigned integer")?,
            "train_ratio" => self.train.train_ratio = parse_value(key, value, "a number")?,
            "val_ratio" => self.train.val_ratio = parse_value(key, value, "a number")?,
            "test_ratio" => self.train.test_ratio = parse_value(key, value, "a number")?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn require_dataset(&self) -> Result<&PathBuf, ConfigError> {
        self.dataset.as_ref().ok_or(ConfigError::Missing {
            field: "dataset",
            context: "(--dataset or a dataset= config line)",
        })
    }

    pub fn require_checkpoint(&self) -> Result<&PathBuf, ConfigError> {
        self.checkpoint.as_ref().ok_or(ConfigError::Missing {
            field: "checkpoint",
            context: "(--checkpoint or a checkpoint= config line)",
        })
    }

    pub fn require_out(&self) -> Result<&PathBuf, ConfigError> {
        self.out.as_ref().ok_or(ConfigError::Missing {
            field: "out",
            context: "(--out or an out= config line)",
        })
    }

    /// The resolved configuration as sorted `key=value` text. Rendered
    /// values parse back to the same configuration, and the text contains
    /// nothing run-dependent, so identical runs write identical manifests.
    pub fn manifest(&self, command: &str) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: ManifestValue| {
            out.push_str(&format!("{k}={v}\n"));
        };
        use ManifestValue as V;
        push("command", V::Str(command.to_string()));
        push("seed", V::U64(self.seed));
        push("threads", V::U64(self.threads as u64));
        push("samples", V::U64(self.samples as u64));
        push("runs", V::U64(self.runs as u64));
        push("method", V::Str(self.method.name().to_string()));
        push("n_s", V::U64(self.model.n_s as u64));
        push("n_d", V::U64(self.model.n_d as u64));
        push(
            "kernel1",
            V::Str(format!("{},{}", self.model.kernel1.0, self.model.kernel1.1)),
        );
        push(
            "kernel2",
            V::Str(format!("{},{}", self.model.kernel2.0, self.model.kernel2.1)),
        );
        push("c1", V::U64(self.model.c1 as u64));
        push("c", V::U64(self.model.c as u64));
        push("p", V::U64(self.model.p as u64));
        push("d", V::U64(self.model.d as u64));
        push("h", V::U64(self.model.h as u64));
        push("r", V::U64(self.model.r as u64));
        push("dropout_rate", V::F64(self.model.dropout_rate));
        push("use_se", V::Str(self.model.use_se.to_string()));
        push(
            "pilot_symbols",
            V::Str(
                self.pilots
                    .symbol_indices
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        );
        push("pilot_stride", V::U64(self.pilots.subcarrier_stride as u64));
        push("pilot_offset", V::U64(self.pilots.subcarrier_offset as u64));
        push("batch_size", V::U64(self.train.batch_size as u64));
        push("lr0", V::F64(self.train.lr0));
        push("lr_factor", V::F64(self.train.lr_factor));
        push(
            "lr_patience_epochs",
            V::U64(self.train.lr_patience_epochs as u64),
        );
        push("lr_min", V::F64(self.train.lr_min));
        push(
            "early_stop_patience",
            V::U64(self.train.early_stop_patience as u64),
        );
        push("max_epochs", V::U64(self.train.max_epochs as u64));
        push("train_ratio", V::F64(self.train.train_ratio));
        push("val_ratio", V::F64(self.train.val_ratio));
        push("test_ratio", V::F64(self.train.test_ratio));
        for (key, path) in [
            ("dataset", &self.dataset),
            ("checkpoint", &self.checkpoint),
            ("out", &self.out),
        ] {
            if let Some(p) = path {
                push(key, V::Str(p.display().to_string()));
            }
        }
        out
    }
}

enum ManifestValue {
    Str(String),
    U64(u64),
    F64(f64),
}

impl fmt::Display for ManifestValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Str(s) => write!(f, "{s}"),
            Self::U64(v) => write!(f, "{v}"),
            Self::F64(v) => write!(f, "{v}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_parsing_skips_comments_and_blanks() {
        let text = "# a comment\n\nseed = 7\nn_s=36\n";
        let map = parse_key_values(text).unwrap();
        assert_eq!(map["seed"], "7");
        assert_eq!(map["n_s"], "36");
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn malformed_lines_are_rejected_with_their_number() {
        match parse_key_values("seed=1\nnot a pair\n") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            parse_key_values("seed=1\nseed=2\n"),
            Err(ConfigError::DuplicateKey(k)) if k == "seed"
        ));
        assert!(matches!(
            parse_key_values("=1\n"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_key() {
        let map = parse_key_values("volume=11\n").unwrap();
        assert!(matches!(
            RunConfig::resolve(&map, &Overrides::default()),
            Err(ConfigError::UnknownKey(k)) if k == "volume"
        ));
        let map = parse_key_values("batch_size=sixty\n").unwrap();
        assert!(matches!(
            RunConfig::resolve(&map, &Overrides::default()),
            Err(ConfigError::Value { key, .. }) if key == "batch_size"
        ));
        let map = parse_key_values("kernel1=12x2\n").unwrap();
        assert!(matches!(
            RunConfig::resolve(&map, &Overrides::default()),
            Err(ConfigError::Value { key, .. }) if key == "kernel1"
        ));
    }

    #[test]
    fn flags_override_file_values_which_override_defaults() {
        let map = parse_key_values("seed=5\nbatch_size=16\nuse_se=false\nmethod=ls\n").unwrap();
        let overrides = Overrides {
            seed: Some(9),
            out: Some(PathBuf::from("x.bin")),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(&map, &overrides).unwrap();
        assert_eq!(cfg.seed, 9, "flag beats file");
        assert_eq!(cfg.train.seed, 9, "training seed follows the run seed");
        assert_eq!(cfg.train.batch_size, 16, "file beats default");
        assert_eq!(cfg.train.lr0, 0.01, "default survives");
        assert!(!cfg.model.use_se);
        assert_eq!(cfg.method, EvalMethod::Ls);
        assert_eq!(cfg.out.as_deref(), Some(std::path::Path::new("x.bin")));
    }

    #[test]
    fn no_se_flag_disables_the_gate() {
        let cfg = RunConfig::resolve(
            &BTreeMap::new(),
            &Overrides {
                no_se: true,
                ..Overrides::default()
            },
        )
        .unwrap();
        assert!(!cfg.model.use_se);
    }

    #[test]
    fn pilot_and_kernel_keys_parse_structured_values() {
        let map = parse_key_values("kernel1=4,3\npilot_symbols=0,5,9\npilot_stride=2\n").unwrap();
        let cfg = RunConfig::resolve(&map, &Overrides::default()).unwrap();
        assert_eq!(cfg.model.kernel1, (4, 3));
        assert_eq!(cfg.pilots.symbol_indices, vec![0, 5, 9]);
        assert_eq!(cfg.pilots.subcarrier_stride, 2);
    }

    #[test]
    fn manifest_round_trips_through_the_parser() {
        let map = parse_key_values("seed=5\nbatch_size=16\nd=32\ndataset=ds.bin\n").unwrap();
        let cfg = RunConfig::resolve(&map, &Overrides::default()).unwrap();
        let manifest = cfg.manifest("train");

        // Re-parsing the manifest (minus the command line) reproduces the
        // exact same resolved configuration.
        let stripped: String = manifest
            .lines()
            .filter(|l| !l.starts_with("command="))
            .map(|l| format!("{l}\n"))
            .collect();
        let reparsed =
            RunConfig::resolve(&parse_key_values(&stripped).unwrap(), &Overrides::default())
                .unwrap();
        assert_eq!(reparsed, cfg);
        assert!(manifest.starts_with("command=train\n"));
        assert_eq!(cfg.manifest("train"), manifest, "rendering is stable");
    }

    #[test]
    fn missing_required_paths_name_the_field() {
        let cfg = RunConfig::default();
        assert!(matches!(
            cfg.require_dataset(),
            Err(ConfigError::Missing {
                field: "dataset",
                ..
            })
        ));
        assert!(matches!(
            cfg.require_checkpoint(),
            Err(ConfigError::Missing {
                field: "checkpoint",
                ..
            })
        ));
        assert!(matches!(
            cfg.require_out(),
            Err(ConfigError::Missing { field: "out", .. })
        ));
    }
}
