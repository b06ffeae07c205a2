//! Experiment configuration: `key = value` files, overrides, grids and fingerprints.

use crate::data::DEFAULT_BATCH_SIZE;
use crate::error::{Error, IoContext, Result};
use crate::experiment::{trial_seeds, TrialSpec};
use crate::loss::{PenaltyKind, DEFAULT_SMOOTHING};
use crate::nn::ArchId;
use crate::train::{ModeKind, StopRule, TrainMode};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Every accepted key, in canonical order.
pub const KEYS: [&str; 16] = [
    "arch",
    "mode",
    "lambda",
    "epsilon",
    "penalty",
    "epochs",
    "stop_rule",
    "batch_size",
    "precision",
    "base_seed",
    "repetitions",
    "data_dir",
    "out_dir",
    "train_subset",
    "smoothing",
    "exclude_failed",
];

/// Keys that may hold a comma-separated list and so span a grid.
pub const GRID_KEYS: [&str; 5] = ["arch", "mode", "lambda", "epsilon", "penalty"];

const REQUIRED: [&str; 2] = ["arch", "mode"];

fn default_value(key: &str) -> Option<&'static str> {
    Some(match key {
        "lambda" => "0",
        "epsilon" => "0.3",
        "penalty" => "exact_l11",
        "epochs" => "100",
        "stop_rule" => "on",
        "batch_size" => "128",
        "precision" => "64",
        "base_seed" => "0",
        "repetitions" => "1",
        "data_dir" => "data/mnist",
        "out_dir" => "runs",
        "train_subset" => "all",
        "smoothing" => "0.1",
        "exclude_failed" => "false",
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub arch: ArchId,
    pub mode: ModeKind,
    pub lambda: f64,
    pub epsilon: f64,
    pub penalty: PenaltyKind,
    pub epochs: usize,
    pub stop_rule: bool,
    pub batch_size: usize,
    pub precision: u32,
    pub base_seed: u64,
    pub repetitions: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub train_subset: Option<usize>,
    pub smoothing: f64,
    pub exclude_failed: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            arch: ArchId::C,
            mode: ModeKind::Plain,
            lambda: 0.0,
            epsilon: 0.3,
            penalty: PenaltyKind::ExactL11,
            epochs: 100,
            stop_rule: true,
            batch_size: DEFAULT_BATCH_SIZE,
            precision: 64,
            base_seed: 0,
            repetitions: 1,
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs"),
            train_subset: None,
            smoothing: DEFAULT_SMOOTHING,
            exclude_failed: false,
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key} = {value}: {why}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, v, "expected on/off")),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| bad(key, v, e))
}

impl ExperimentConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "arch" => {
                self.arch = v.parse().map_err(|e| bad(key, v, e))?;
                if self.arch == ArchId::Custom {
                    return Err(bad(key, v, "expected A, B or C"));
                }
            }
            "mode" => self.mode = v.parse().map_err(|e| bad(key, v, e))?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "epsilon" => self.epsilon = parse_num(key, v)?,
            "penalty" => self.penalty = v.parse().map_err(|e| bad(key, v, e))?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "stop_rule" => self.stop_rule = parse_bool(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "precision" => self.precision = parse_num(key, v)?,
            "base_seed" => self.base_seed = parse_num(key, v)?,
            "repetitions" => self.repetitions = parse_num(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "train_subset" => {
                self.train_subset = match v {
                    "all" => None,
                    n => Some(parse_num(key, n)?),
                }
            }
            "smoothing" => self.smoothing = parse_num(key, v)?,
            "exclude_failed" => self.exclude_failed = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<()> {
        if self.precision != 64 {
            return Err(Error::Config(format!(
                "precision = {}: only 64-bit arithmetic is implemented",
                self.precision
            )));
        }
        if !self.mode.is_penalised() && self.lambda != 0.0 {
            return Err(Error::Config(format!(
                "mode = {} does not use a penalty but lambda = {}",
                self.mode, self.lambda
            )));
        }
        if self.batch_size == 0 || self.repetitions == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size, repetitions and epochs must be ≥ 1".into(),
            ));
        }
        if self.train_subset == Some(0) {
            return Err(Error::Config("train_subset must be ≥ 1 or 'all'".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!(
                "smoothing = {} must lie in [0, 1)",
                self.smoothing
            )));
        }
        self.trial_spec()
            .map(|_| ())
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn trial_spec(&self) -> Result<TrialSpec> {
        Ok(TrialSpec {
            arch: self.arch,
            mode: TrainMode::new(self.mode, self.lambda, self.epsilon, self.penalty)?,
            stop: StopRule::new(self.epochs, self.stop_rule)?,
            batch_size: self.batch_size,
            smoothing: self.smoothing,
            train_subset: self.train_subset,
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        trial_seeds(self.base_seed, self.repetitions)
    }

    /// Every key with its value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|&k| {
                let v = match k {
                    "arch" => self.arch.to_string(),
                    "mode" => self.mode.to_string(),
                    "lambda" => self.lambda.to_string(),
                    "epsilon" => self.epsilon.to_string(),
                    "penalty" => self.penalty.to_string(),
                    "epochs" => self.epochs.to_string(),
                    "stop_rule" => if self.stop_rule { "on" } else { "off" }.to_string(),
                    "batch_size" => self.batch_size.to_string(),
                    "precision" => self.precision.to_string(),
                    "base_seed" => self.base_seed.to_string(),
                    "repetitions" => self.repetitions.to_string(),
                    "data_dir" => self.data_dir.display().to_string(),
                    "out_dir" => self.out_dir.display().to_string(),
                    "train_subset" => self
                        .train_subset
                        .map_or("all".to_string(), |n| n.to_string()),
                    "smoothing" => self.smoothing.to_string(),
                    "exclude_failed" => self.exclude_failed.to_string(),
                    _ => unreachable!(),
                };
                (k, v)
            })
            .collect()
    }

    /// SHA-256 over the code version and every key that influences results
    /// (the data and output locations do not).
    pub fn fingerprint(&self) -> String {
        let mut text = format!("version = {CODE_VERSION}\n");
        for (k, v) in self.entries() {
            if k != "data_dir" && k != "out_dir" {
                text.push_str(&format!("{k} = {v}\n"));
            }
        }
        crate::data::sha256_hex(text.as_bytes())
    }
}

/// Unresolved `key = value` pairs; values of grid keys may be comma lists.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", no + 1)))?;
            let k = k.trim();
            if raw.values.contains_key(k) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {k:?}",
                    no + 1
                )));
            }
            raw.set(k, v.trim())?;
        }
        Ok(raw)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    /// Sets (or overrides) one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        if value.contains(',') && !GRID_KEYS.contains(&key) {
            return Err(Error::Config(format!("{key} does not accept a list")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `other` on top of `self`; its values win.
    pub fn merge(&mut self, other: &RawConfig) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Cartesian product over the list-valued grid keys, in the order of
    /// [`GRID_KEYS`] with the last key varying fastest. Each cell is validated.
    pub fn expand(&self) -> Result<Vec<ExperimentConfig>> {
        for key in REQUIRED {
            if !self.values.contains_key(key) {
                return Err(Error::Config(format!("missing required key {key:?}")));
            }
        }
        let mut base = ExperimentConfig::default();
        for key in KEYS {
            if GRID_KEYS.contains(&key) {
                continue;
            }
            let v = self
                .get(key)
                .or_else(|| default_value(key))
                .expect("every optional key has a default");
            base.set(key, v)?;
        }
        let mut cells = vec![base];
        for key in GRID_KEYS {
            let v = self
                .get(key)
                .or_else(|| default_value(key))
                .expect("required keys checked");
            let items: Vec<&str> = v.split(',').map(str::trim).collect();
            if items.iter().any(|s| s.is_empty()) {
                return Err(bad(key, v, "empty list item"));
            }
            let mut next = Vec::with_capacity(cells.len() * items.len());
            for cell in &cells {
                for item in &items {
                    let mut c = cell.clone();
                    c.set(key, item)?;
                    next.push(c);
                }
            }
            cells = next;
        }
        for c in &cells {
            c.validate()?;
        }
        Ok(cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win() {
        let mut raw =
            RawConfig::parse("arch = C\nmode = gp_only\nlambda = 10 # from file\n").unwrap();
        let mut flags = RawConfig::default();
        flags.set("lambda", "50").unwrap();
        raw.merge(&flags);
        let cells = raw.expand().unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].lambda, 50.0);
    }

    #[test]
    fn zero_lambda_with_gp_only_is_rejected() {
        let raw = RawConfig::parse("arch = C\nmode = gp_only\nlambda = 0\n").unwrap();
        let err = raw.expand().unwrap_err().to_string();
        assert!(err.contains("λ > 0"), "{err}");
    }

    #[test]
    fn lambda_with_an_unpenalised_mode_conflicts() {
        let raw = RawConfig::parse("arch = C\nmode = adv_train\nlambda = 10\n").unwrap();
        assert!(raw.expand().is_err());
    }

    #[test]
    fn epsilon_list_expands_to_four_runs() {
        let raw =
            RawConfig::parse("arch = C\nmode = adv_train\nepsilon = 0.05,0.1,0.2,0.3\n").unwrap();
        let cells = raw.expand().unwrap();
        assert_eq!(
            cells.iter().map(|c| c.epsilon).collect::<Vec<_>>(),
            vec![0.05, 0.1, 0.2, 0.3]
        );
    }

    #[test]
    fn grid_is_the_full_cartesian_product() {
        let raw = RawConfig::parse("arch = A,C\nmode = gp_only\nlambda = 50,50,1\n").unwrap();
        let cells = raw.expand().unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0].arch, ArchId::A);
        assert_eq!(cells[1].lambda, 50.0);
        assert_eq!(cells[3].arch, ArchId::C);
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert!(RawConfig::parse("arch = C\nlearning_rate = 1\n").is_err());
        assert!(RawConfig::parse("arch = C\narch = A\n").is_err());
        assert!(RawConfig::parse("just text\n").is_err());
        assert!(RawConfig::parse("epochs = 1,2\n").is_err());
        assert!(RawConfig::parse("mode = plain\n")
            .unwrap()
            .expand()
            .is_err());
        assert!(RawConfig::parse("arch = D\nmode = plain\n")
            .unwrap()
            .expand()
            .is_err());
        assert!(RawConfig::parse("arch = C\nmode = fancy\n")
            .unwrap()
            .expand()
            .is_err());
        assert!(RawConfig::parse("arch = C\nmode = plain\nprecision = 32\n")
            .unwrap()
            .expand()
            .is_err());
        assert!(
            RawConfig::parse("arch = C\nmode = plain\nstop_rule = maybe\n")
                .unwrap()
                .expand()
                .is_err()
        );
    }

    #[test]
    fn defaults_are_recorded_and_round_trip() {
        let cells = RawConfig::parse("arch = B\nmode = plain\n")
            .unwrap()
            .expand()
            .unwrap();
        let c = &cells[0];
        let entries = c.entries();
        assert_eq!(entries.len(), KEYS.len());
        let text: String = entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        let back = RawConfig::parse(&text).unwrap().expand().unwrap();
        assert_eq!(&back[0], c);
        assert_eq!(back[0].fingerprint(), c.fingerprint());
    }

    #[test]
    fn fingerprint_ignores_locations_only() {
        let c = RawConfig::parse("arch = C\nmode = plain\n")
            .unwrap()
            .expand()
            .unwrap()
            .remove(0);
        let mut moved = c.clone();
        moved.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(moved.fingerprint(), c.fingerprint());
        let mut other = c.clone();
        other.base_seed = 1;
        assert_ne!(other.fingerprint(), c.fingerprint());
        assert_eq!(c.seeds(), vec![0]);
    }
}
