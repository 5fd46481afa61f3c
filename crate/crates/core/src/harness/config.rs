//! Run configuration files.
//!
//! The format is flat `key = value` text. `#` starts a comment, blank lines are ignored, every key
//! may appear at most once and unknown keys are errors. Archetypes are written as label lists with
//! a bias, separated by `;`: `archetypes = 0,1,2,3@1.0 ; 4,5,6@1.0`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::data::ArchetypeSpec;
use crate::federation::{ForkPolicy, MergePolicy, SigmaScope};
use crate::learner::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {second}: duplicate key `{key}` (first set on line {first})")]
    DuplicateKey {
        key: String,
        first: usize,
        second: usize,
    },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("line {line}: invalid value for `{key}`: {reason}")]
    InvalidValue {
        line: usize,
        key: &'static str,
        reason: String,
    },
    #[error("{}`{key}` violates a constraint: {reason}", line_prefix(*.line))]
    Constraint {
        line: Option<usize>,
        key: &'static str,
        reason: String,
    },
}

fn line_prefix(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    FedAvg,
    FedFmc,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedFmc => "fedfmc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Gaussian blobs generated from the master seed.
    Synthetic {
        num_classes: usize,
        feature_dim: usize,
        per_class: usize,
        separation: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub dataset: DatasetSource,
    /// Examples per class held out for the balanced test set before partitioning.
    pub test_per_class: usize,
    pub archetypes: Vec<ArchetypeSpec>,
    pub devices_per_archetype: usize,
    pub samples_per_device: usize,
    pub validation_fraction: f64,
    pub rounds: usize,
    pub participants_per_round: usize,
    pub hidden_layers: Vec<usize>,
    /// `ewc_lambda` is unused here; the merge phase derives it.
    pub train: TrainConfig,
    pub fork: ForkPolicy,
    pub merge: MergePolicy,
    pub master_seed: u64,
}

impl RunConfig {
    pub fn num_devices(&self) -> usize {
        self.devices_per_archetype * self.archetypes.len()
    }

    /// Checks the cross-field constraints. Parsing already enforces per-field ranges.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_at(&BTreeMap::new())
    }

    fn validate_at(&self, lines: &BTreeMap<&'static str, usize>) -> Result<(), ConfigError> {
        let fail = |key: &'static str, reason: String| ConfigError::Constraint {
            line: lines.get(key).copied(),
            key,
            reason,
        };
        let n = self.num_devices();
        if self.participants_per_round == 0 || self.participants_per_round > n {
            return Err(fail(
                "participants_per_round",
                format!(
                    "K = {} must be in [1, N] with N = {n} devices",
                    self.participants_per_round
                ),
            ));
        }
        if self.archetypes.is_empty() {
            return Err(fail(
                "archetypes",
                "at least one archetype is required".into(),
            ));
        }
        for (key, v) in [
            ("devices_per_archetype", self.devices_per_archetype),
            ("samples_per_device", self.samples_per_device),
            ("rounds", self.rounds),
            ("test_per_class", self.test_per_class),
        ] {
            if v == 0 {
                return Err(fail(key, "must be >= 1".into()));
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(fail("validation_fraction", "must be in (0, 1)".into()));
        }
        if let DatasetSource::Synthetic { num_classes, .. } = self.dataset {
            if let Some(bad) = self
                .archetypes
                .iter()
                .flat_map(|a| a.labels().iter())
                .find(|&&l| l >= num_classes)
            {
                return Err(fail(
                    "archetypes",
                    format!("label {bad} outside the {num_classes} synthetic classes"),
                ));
            }
        }
        self.train
            .validate()
            .map_err(|e| fail("learning_rate", e.to_string()))?;
        self.fork
            .validate()
            .map_err(|e| fail("h_f", e.to_string()))?;
        self.merge
            .validate()
            .map_err(|e| fail("participation_fraction", e.to_string()))?;
        Ok(())
    }

    /// Every key with its effective value, in the file format. Parsing the result gives back an
    /// equal config.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("algorithm", self.algorithm.as_str().into());
        match &self.dataset {
            DatasetSource::Synthetic {
                num_classes,
                feature_dim,
                per_class,
                separation,
            } => {
                kv("dataset", "synthetic".into());
                kv("num_classes", num_classes.to_string());
                kv("feature_dim", feature_dim.to_string());
                kv("per_class", per_class.to_string());
                kv("separation", fmt_f64(*separation));
            }
            DatasetSource::Idx { images, labels } => {
                kv("dataset", "idx".into());
                kv("data_path", images.display().to_string());
                kv("labels_path", labels.display().to_string());
            }
            DatasetSource::Csv { path } => {
                kv("dataset", "csv".into());
                kv("data_path", path.display().to_string());
            }
        }
        kv("test_per_class", self.test_per_class.to_string());
        let arch: Vec<String> = self
            .archetypes
            .iter()
            .map(|a| {
                let labels: Vec<String> = a.labels().iter().map(|l| l.to_string()).collect();
                format!("{}@{}", labels.join(","), fmt_f64(a.bias()))
            })
            .collect();
        kv("archetypes", arch.join(" ; "));
        kv(
            "devices_per_archetype",
            self.devices_per_archetype.to_string(),
        );
        kv("samples_per_device", self.samples_per_device.to_string());
        kv("validation_fraction", fmt_f64(self.validation_fraction));
        kv("rounds", self.rounds.to_string());
        kv(
            "participants_per_round",
            self.participants_per_round.to_string(),
        );
        let hidden: Vec<String> = self.hidden_layers.iter().map(|h| h.to_string()).collect();
        kv(
            "hidden_layers",
            if hidden.is_empty() {
                "none".into()
            } else {
                hidden.join(",")
            },
        );
        kv("local_epochs", self.train.local_epochs.to_string());
        kv("learning_rate", fmt_f64(self.train.learning_rate));
        kv("batch_size", self.train.batch_size.to_string());
        kv("h_f", fmt_f64(self.fork.h_f));
        kv("warmup_rounds", self.fork.warmup_rounds.to_string());
        kv("cooldown_from_end", self.fork.cooldown_from_end.to_string());
        kv("min_gap", self.fork.min_gap.to_string());
        kv(
            "coalesce_new_groups",
            self.fork.coalesce_new_groups.to_string(),
        );
        kv(
            "sigma_scope",
            match self.fork.sigma_scope {
                SigmaScope::Group => "group",
                SigmaScope::Network => "network",
            }
            .into(),
        );
        kv(
            "max_rounds_per_group",
            self.merge.max_rounds_per_group.to_string(),
        );
        kv("window", self.merge.window.to_string());
        kv("accuracy_gap", fmt_f64(self.merge.accuracy_gap));
        kv(
            "participation_fraction",
            fmt_f64(self.merge.participation_fraction),
        );
        kv("ewc_enabled", self.merge.ewc_enabled.to_string());
        kv("master_seed", self.master_seed.to_string());
        s
    }
}

// `{:?}` prints the shortest string that parses back to the same f64
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

const KEYS: &[&str] = &[
    "algorithm",
    "dataset",
    "data_path",
    "labels_path",
    "num_classes",
    "feature_dim",
    "per_class",
    "separation",
    "test_per_class",
    "archetypes",
    "devices_per_archetype",
    "samples_per_device",
    "validation_fraction",
    "rounds",
    "participants_per_round",
    "hidden_layers",
    "local_epochs",
    "learning_rate",
    "batch_size",
    "h_f",
    "warmup_rounds",
    "cooldown_from_end",
    "min_gap",
    "coalesce_new_groups",
    "sigma_scope",
    "max_rounds_per_group",
    "window",
    "accuracy_gap",
    "participation_fraction",
    "ewc_enabled",
    "master_seed",
];

/// Default values for optional keys.
pub mod defaults {
    pub const NUM_CLASSES: usize = 3;
    pub const FEATURE_DIM: usize = 10;
    pub const PER_CLASS: usize = 1000;
    pub const SEPARATION: f64 = 2.5;
    pub const TEST_PER_CLASS: usize = 200;
    pub const DEVICES_PER_ARCHETYPE: usize = 4;
    pub const SAMPLES_PER_DEVICE: usize = 150;
    pub const VALIDATION_FRACTION: f64 = 0.2;
    pub const HIDDEN_LAYERS: &[usize] = &[16];
    pub const LOCAL_EPOCHS: usize = 2;
    pub const LEARNING_RATE: f64 = 0.05;
    pub const BATCH_SIZE: usize = 10;
    pub const MASTER_SEED: u64 = 0;
}

struct Entries<'a> {
    map: BTreeMap<&'static str, (usize, &'a str)>,
}

impl<'a> Entries<'a> {
    fn parse(text: &'a str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: content.to_string(),
                });
            };
            let k = k.trim();
            let Some(&key) = KEYS.iter().find(|&&known| known == k) else {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: k.to_string(),
                });
            };
            if let Some(&(first, _)) = map.get(key) {
                return Err(ConfigError::DuplicateKey {
                    key: key.to_string(),
                    first,
                    second: line,
                });
            }
            map.insert(key, (line, v.trim()));
        }
        Ok(Self { map })
    }

    fn raw(&self, key: &'static str) -> Option<(usize, &'a str)> {
        self.map.get(key).copied()
    }

    fn required(&self, key: &'static str) -> Result<(usize, &'a str), ConfigError> {
        self.raw(key).ok_or(ConfigError::Missing(key))
    }

    fn get<T: FromStr>(&self, key: &'static str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some((line, v)) => parse_value(line, key, v),
        }
    }

    fn get_required<T: FromStr>(&self, key: &'static str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let (line, v) = self.required(key)?;
        parse_value(line, key, v)
    }

    fn lines(&self) -> BTreeMap<&'static str, usize> {
        self.map.iter().map(|(&k, &(l, _))| (k, l)).collect()
    }
}

fn parse_value<T: FromStr>(line: usize, key: &'static str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        line,
        key,
        reason: format!("`{v}`: {e}"),
    })
}

fn parse_archetypes(line: usize, v: &str) -> Result<Vec<ArchetypeSpec>, ConfigError> {
    let bad = |reason: String| ConfigError::InvalidValue {
        line,
        key: "archetypes",
        reason,
    };
    v.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (labels, bias) = item.split_once('@').unwrap_or((item, "1.0"));
            let bias: f64 = bias
                .trim()
                .parse()
                .map_err(|e| bad(format!("bias in `{item}`: {e}")))?;
            let labels = labels
                .split(',')
                .map(|l| l.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("labels in `{item}`: {e}")))?;
            ArchetypeSpec::new(labels, bias).map_err(|e| bad(format!("`{item}`: {e}")))
        })
        .collect()
}

fn parse_hidden(line: usize, v: &str) -> Result<Vec<usize>, ConfigError> {
    if v.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    let dims = v
        .split(',')
        .map(|s| parse_value::<usize>(line, "hidden_layers", s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    if dims.contains(&0) {
        return Err(ConfigError::InvalidValue {
            line,
            key: "hidden_layers",
            reason: "layer widths must be >= 1".into(),
        });
    }
    Ok(dims)
}

/// Parses config text. `base_dir` resolves relative dataset paths.
pub fn parse_config_str(text: &str, base_dir: Option<&Path>) -> Result<RunConfig, ConfigError> {
    let e = Entries::parse(text)?;
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        match base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p,
        }
    };

    let (line, alg) = e.required("algorithm")?;
    let algorithm = match alg {
        "fedavg" => Algorithm::FedAvg,
        "fedfmc" => Algorithm::FedFmc,
        other => {
            return Err(ConfigError::InvalidValue {
                line,
                key: "algorithm",
                reason: format!("`{other}` is not one of fedavg, fedfmc"),
            })
        }
    };

    let (line, kind) = e.required("dataset")?;
    let dataset = match kind {
        "synthetic" => {
            let separation: f64 = e.get("separation", defaults::SEPARATION)?;
            if !(separation.is_finite() && separation > 0.0) {
                return Err(ConfigError::InvalidValue {
                    line: e.raw("separation").map_or(line, |r| r.0),
                    key: "separation",
                    reason: "must be finite and > 0".into(),
                });
            }
            DatasetSource::Synthetic {
                num_classes: e.get("num_classes", defaults::NUM_CLASSES)?,
                feature_dim: e.get("feature_dim", defaults::FEATURE_DIM)?,
                per_class: e.get("per_class", defaults::PER_CLASS)?,
                separation,
            }
        }
        "idx" => DatasetSource::Idx {
            images: resolve(e.required("data_path")?.1),
            labels: resolve(e.required("labels_path")?.1),
        },
        "csv" => DatasetSource::Csv {
            path: resolve(e.required("data_path")?.1),
        },
        other => {
            return Err(ConfigError::InvalidValue {
                line,
                key: "dataset",
                reason: format!("`{other}` is not one of synthetic, idx, csv"),
            })
        }
    };

    let (line, arch) = e.required("archetypes")?;
    let archetypes = parse_archetypes(line, arch)?;
    let hidden_layers = match e.raw("hidden_layers") {
        Some((line, v)) => parse_hidden(line, v)?,
        None => defaults::HIDDEN_LAYERS.to_vec(),
    };

    let fork_defaults = ForkPolicy::default();
    let sigma_scope = match e.raw("sigma_scope") {
        None => fork_defaults.sigma_scope,
        Some((_, "group")) => SigmaScope::Group,
        Some((_, "network")) => SigmaScope::Network,
        Some((line, other)) => {
            return Err(ConfigError::InvalidValue {
                line,
                key: "sigma_scope",
                reason: format!("`{other}` is not one of group, network"),
            })
        }
    };
    let merge_defaults = MergePolicy::default();

    let cfg = RunConfig {
        algorithm,
        dataset,
        test_per_class: e.get("test_per_class", defaults::TEST_PER_CLASS)?,
        archetypes,
        devices_per_archetype: e.get("devices_per_archetype", defaults::DEVICES_PER_ARCHETYPE)?,
        samples_per_device: e.get("samples_per_device", defaults::SAMPLES_PER_DEVICE)?,
        validation_fraction: e.get("validation_fraction", defaults::VALIDATION_FRACTION)?,
        rounds: e.get_required("rounds")?,
        participants_per_round: e.get_required("participants_per_round")?,
        hidden_layers,
        train: TrainConfig {
            learning_rate: e.get("learning_rate", defaults::LEARNING_RATE)?,
            local_epochs: e.get("local_epochs", defaults::LOCAL_EPOCHS)?,
            batch_size: e.get("batch_size", defaults::BATCH_SIZE)?,
            ewc_lambda: 0.0,
        },
        fork: ForkPolicy {
            h_f: e.get("h_f", fork_defaults.h_f)?,
            warmup_rounds: e.get("warmup_rounds", fork_defaults.warmup_rounds)?,
            cooldown_from_end: e.get("cooldown_from_end", fork_defaults.cooldown_from_end)?,
            min_gap: e.get("min_gap", fork_defaults.min_gap)?,
            coalesce_new_groups: e.get("coalesce_new_groups", fork_defaults.coalesce_new_groups)?,
            sigma_scope,
        },
        merge: MergePolicy {
            max_rounds_per_group: e
                .get("max_rounds_per_group", merge_defaults.max_rounds_per_group)?,
            window: e.get("window", merge_defaults.window)?,
            accuracy_gap: e.get("accuracy_gap", merge_defaults.accuracy_gap)?,
            participation_fraction: e.get(
                "participation_fraction",
                merge_defaults.participation_fraction,
            )?,
            ewc_enabled: e.get("ewc_enabled", merge_defaults.ewc_enabled)?,
        },
        master_seed: e.get("master_seed", defaults::MASTER_SEED)?,
    };
    cfg.validate_at(&e.lines())?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text, path.parent())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "algorithm = fedfmc\ndataset = synthetic\narchetypes = 0@1.0;1@1.0;2@1.0\nrounds = 25\nparticipants_per_round = 6\n";

    #[test]
    fn comments_and_blank_lines() {
        let text = format!("# header\n\n{MINIMAL}  # trailing\n");
        assert!(parse_config_str(&text, None).is_ok());
    }

    #[test]
    fn syntax_error_has_line() {
        let err = parse_config_str("algorithm = fedavg\nrounds 25\n", None).unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }), "{err}");
    }

    #[test]
    fn bad_enum_value() {
        let text = MINIMAL.replace("fedfmc", "fedprox");
        let err = parse_config_str(&text, None).unwrap_err();
        assert!(matches!(
            err,
            ConfigError::InvalidValue {
                line: 1,
                key: "algorithm",
                ..
            }
        ));
    }

    #[test]
    fn archetype_bias_defaults_to_one() {
        let a = parse_archetypes(1, "0,1 ; 2@0.5").unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].bias(), 1.0);
        assert_eq!(a[1].bias(), 0.5);
        assert!(parse_archetypes(1, "0,x@1").is_err());
        assert!(parse_archetypes(1, "0@1.5").is_err());
    }

    #[test]
    fn label_beyond_synthetic_classes() {
        let text = MINIMAL.replace("2@1.0", "3@1.0");
        let err = parse_config_str(&text, None).unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Constraint {
                key: "archetypes",
                ..
            }
        ));
    }
}
