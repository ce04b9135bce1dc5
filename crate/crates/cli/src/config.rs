//! Flat `key = value` run configuration. Every key has a default; a config
//! file overrides defaults and command-line flags override the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use saliencydecor::evaluation::{default_grid, parse_grid};
use saliencydecor::model::Architecture;
use saliencydecor::saliency::ReplacementPolicy;
use saliencydecor::training::{TrainConfig, TrainMode};

use crate::CliError;

/// Known keys, their defaults and what they mean.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("mode", "saliency_decor", "saliency_decor | sgt | baseline | decorr_only"),
    ("alpha", "0.1", "consistency weight"),
    ("lambda", "0.01", "decorrelation weight (comma list for sweep)"),
    ("rho", "0.25", "training mask ratio (comma list for sweep)"),
    ("group-size", "64", "whitening group size"),
    ("eps", "1e-5", "eigenvalue floor inside the inverse square root"),
    ("ema-decay", "0.99", "decay of the running whitening statistics"),
    ("lr", "0.01", "initial learning rate (cosine annealed)"),
    ("momentum", "0.9", "SGD momentum"),
    ("epochs", "5", "training epochs"),
    ("batch-size", "128", "minibatch size"),
    ("seed", "0", "initialization, shuffling and masking seed"),
    ("policy", "uniform_random_in_range", "training replacement policy"),
    ("decorr-detach", "false", "hold whitening statistics constant in the decorrelation gradient"),
    ("arch", "auto", "cnn | mlp:<hidden> | auto (cnn for images of at least 11x11)"),
    ("features", "128", "encoder output width"),
    ("dataset", "", "mnist | synthetic:planted_patch | synthetic:gaussian_blobs[:<corr>]"),
    ("data-dir", "", "MNIST directory (falls back to SALIENCYDECOR_DATA_DIR)"),
    ("train-samples", "all", "cap on training samples"),
    ("test-samples", "all", "cap on test samples"),
    ("synthetic-samples", "2000", "synthetic dataset size"),
    ("synthetic-dims", "64", "synthetic feature count"),
    ("data-seed", "0", "synthetic dataset seed"),
    ("grid", "", "masking fractions in percent (default 0,4,...,100)"),
    ("eval-policy", "per_feature_mean", "evaluation replacement policy"),
    ("eval-seed", "0", "evaluation replacement seed"),
    ("gradient-samples", "500", "test samples used for gradient statistics"),
    ("checkpoint", "", "checkpoint path(s), comma separated"),
    ("samples", "", "test sample indices to explain, comma separated"),
];

/// Environment variable consulted when `data-dir` is empty.
pub const DATA_DIR_ENV: &str = "SALIENCYDECOR_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| CliError::config(key, format!("'{}' is not a valid value", s.trim())))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.trim()
        .parse::<T>()
        .map_err(|_| CliError::config(key, format!("'{v}' is not a valid value")))
}

fn parse_limit(key: &str, v: &str) -> Result<Option<usize>, CliError> {
    if v == "all" {
        Ok(None)
    } else {
        parse_one(key, v).map(Some)
    }
}

fn check(key: &str, v: &str) -> Result<(), CliError> {
    let core = |r: saliencydecor::Result<()>| r.map_err(|e| CliError::config(key, e.to_string()));
    match key {
        "mode" => core(TrainMode::parse(v).map(drop)),
        "alpha" | "eps" | "ema-decay" | "lr" | "momentum" => parse_one::<f64>(key, v).map(drop),
        "lambda" | "rho" => {
            if parse_list::<f64>(key, v)?.is_empty() {
                return Err(CliError::config(key, "needs at least one value"));
            }
            Ok(())
        }
        "group-size" | "epochs" | "batch-size" | "features" | "synthetic-samples" | "synthetic-dims"
        | "gradient-samples" => parse_one::<usize>(key, v).map(drop),
        "seed" | "data-seed" | "eval-seed" => parse_one::<u64>(key, v).map(drop),
        "policy" | "eval-policy" => core(ReplacementPolicy::parse(v).map(drop)),
        "decorr-detach" => parse_one::<bool>(key, v).map(drop),
        "arch" if v == "auto" => Ok(()),
        "arch" => core(Architecture::parse(v).map(drop)),
        "train-samples" | "test-samples" => parse_limit(key, v).map(drop),
        "grid" if v.is_empty() => Ok(()),
        "grid" => core(parse_grid(v).map(drop)),
        "samples" => parse_list::<usize>(key, v).map(drop),
        "dataset" | "data-dir" | "checkpoint" => Ok(()),
        _ => Err(CliError::config(key, "unknown key")),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, d, _)| (*k, d.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        check(key, value)?;
        let (k, _, _) = KEYS.iter().find(|(k, _, _)| *k == key).expect("checked above");
        self.values.insert(k, value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unknown key {key}"))
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<(), CliError> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::config(
                    line,
                    format!("line {} of {} is not 'key = value'", no + 1, origin.display()),
                ));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("config", format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text, path)
    }

    /// One `key = value` line per key, in the fixed key order.
    pub fn render(&self) -> String {
        let mut out = String::from("# resolved saliencydecor run configuration\n");
        for (k, _, _) in KEYS {
            writeln!(out, "{k} = {}", self.get(k)).expect("writing to a string");
        }
        out
    }

    /// Fills `data-dir` from the environment when it is empty.
    pub fn resolve_data_dir(&mut self) {
        if self.get("data-dir").is_empty() {
            if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
                self.values.insert("data-dir", dir);
            }
        }
    }

    pub fn f64(&self, key: &str) -> f64 {
        parse_one(key, self.get(key)).expect("validated on set")
    }

    pub fn usize(&self, key: &str) -> usize {
        parse_one(key, self.get(key)).expect("validated on set")
    }

    pub fn u64(&self, key: &str) -> u64 {
        parse_one(key, self.get(key)).expect("validated on set")
    }

    pub fn list_f64(&self, key: &str) -> Vec<f64> {
        parse_list(key, self.get(key)).expect("validated on set")
    }

    pub fn list_usize(&self, key: &str) -> Vec<usize> {
        parse_list(key, self.get(key)).expect("validated on set")
    }

    pub fn limit(&self, key: &str) -> Option<usize> {
        parse_limit(key, self.get(key)).expect("validated on set")
    }

    pub fn dataset(&self) -> Option<&str> {
        Some(self.get("dataset")).filter(|s| !s.is_empty())
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        Some(self.get("data-dir")).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    pub fn checkpoints(&self) -> Vec<PathBuf> {
        self.get("checkpoint")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect()
    }

    pub fn grid(&self) -> Vec<f64> {
        match self.get("grid") {
            "" => default_grid(),
            g => parse_grid(g).expect("validated on set"),
        }
    }

    pub fn policy(&self, key: &str) -> ReplacementPolicy {
        ReplacementPolicy::parse(self.get(key)).expect("validated on set")
    }

    /// `None` means pick by input shape.
    pub fn arch(&self) -> Option<Architecture> {
        match self.get("arch") {
            "auto" => None,
            a => Some(Architecture::parse(a).expect("validated on set")),
        }
    }

    /// Training settings for one `(rho, lambda)` pair.
    pub fn train_config(&self, arch: Architecture, rho: f64, lambda: f64) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            mode: TrainMode::parse(self.get("mode")).expect("validated on set"),
            alpha: self.f64("alpha"),
            lambda,
            rho,
            group_size: self.usize("group-size"),
            eps: self.f64("eps"),
            ema_decay: self.f64("ema-decay"),
            lr: self.f64("lr"),
            momentum: self.f64("momentum"),
            epochs: self.usize("epochs"),
            batch_size: self.usize("batch-size"),
            seed: self.u64("seed"),
            policy: self.policy("policy"),
            decorr_detach: self.get("decorr-detach") == "true",
            arch,
            features: self.usize("features"),
        };
        let cfg = cfg.effective().map_err(|e| CliError::new(2, e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nalpha = 0.5\n\nrho=0.5 # trailing\n", Path::new("f")).unwrap();
        cfg.set("rho", "0.75").unwrap();
        assert_eq!(cfg.f64("alpha"), 0.5);
        assert_eq!(cfg.list_f64("rho"), vec![0.75]);
        assert_eq!(cfg.f64("lr"), 0.01);
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("rho", "0.25,0.5").unwrap();
        cfg.set("dataset", "synthetic:planted_patch").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.render(), Path::new("echo")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("alpha", "lots").unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("'alpha'"));
        assert!(cfg.set("colour", "red").unwrap_err().message.contains("'colour'"));
        assert!(cfg.apply_text("just words", Path::new("f")).is_err());
        cfg.set("rho", "1.5").unwrap();
        let err = cfg.train_config(Architecture::Cnn, 1.5, 0.01).unwrap_err();
        assert!(err.message.contains("'rho'"), "{}", err.message);
    }
}
