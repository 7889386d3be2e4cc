//! Flat `key = value` run configuration with strict keys.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::FilterConfig;
use crate::error::{Error, Result};
use crate::hypergraph::HyperedgeType;
use crate::model::ModelConfig;
use crate::synth::SynthSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub filter: FilterConfig,
    pub split: (f64, f64, f64),
    pub synth: SynthSpec,
    /// Exclude other observed training activities of a context at
    /// evaluation time.
    pub exclude_train: bool,
    /// Directory holding `last.ckpt` and `best.ckpt` to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        Self {
            model: ModelConfig::default(),
            train: TrainConfig {
                seed: synth.seed,
                ..TrainConfig::default()
            },
            filter: FilterConfig::default(),
            split: (0.8, 0.1, 0.1),
            synth,
            exclude_train: false,
            resume: None,
        }
    }
}

/// Every recognised key.
pub const KEYS: &[&str] = &[
    "d",
    "layers",
    "enabled_types",
    "fusion",
    "conv",
    "lr",
    "lr_decay",
    "lr_decay_every",
    "lr_milestones",
    "epochs",
    "patience",
    "batch_size",
    "negatives_per_positive",
    "lambda",
    "gamma",
    "seed",
    "eval_k",
    "l2_scope",
    "min_locations_per_user",
    "min_activities_per_user",
    "min_activity_frequency",
    "split",
    "synth_users",
    "synth_locations",
    "synth_times",
    "synth_activities",
    "synth_clusters",
    "synth_records_per_user",
    "synth_noise",
    "exclude_train",
    "resume",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "d" => self.model.d = num(key, v)?,
            "layers" => self.model.layers = num(key, v)?,
            "enabled_types" => {
                let set: BTreeSet<HyperedgeType> = v
                    .split(',')
                    .map(str::parse)
                    .collect::<Result<_>>()?;
                self.model.enabled_types = set;
            }
            "fusion" => self.model.fusion = v.parse()?,
            "conv" => self.model.conv = v.parse()?,
            "lr" => self.train.lr = num(key, v)?,
            "lr_decay" => self.train.lr_decay = num(key, v)?,
            "lr_decay_every" => self.train.lr_decay_every = num(key, v)?,
            "lr_milestones" => {
                self.train.lr_milestones = match v {
                    "" | "none" => None,
                    _ => Some(list(key, v)?),
                }
            }
            "epochs" => self.train.epochs = num(key, v)?,
            "patience" => self.train.patience = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "negatives_per_positive" => self.train.negatives_per_positive = num(key, v)?,
            "lambda" => self.train.lambda = num(key, v)?,
            "gamma" => self.train.gamma = num(key, v)?,
            "seed" => {
                let s = num(key, v)?;
                self.train.seed = s;
                self.synth.seed = s;
            }
            "eval_k" => self.train.eval_k = num(key, v)?,
            "l2_scope" => self.train.l2_scope = v.parse()?,
            "min_locations_per_user" => self.filter.min_locations_per_user = num(key, v)?,
            "min_activities_per_user" => self.filter.min_activities_per_user = num(key, v)?,
            "min_activity_frequency" => self.filter.min_activity_frequency = num(key, v)?,
            "split" => {
                let r: Vec<f64> = list(key, v)?;
                let [a, b, c] = r[..] else {
                    return Err(Error::Config("`split` needs three ratios".into()));
                };
                self.split = (a, b, c);
            }
            "synth_users" => self.synth.n_users = num(key, v)?,
            "synth_locations" => self.synth.n_locations = num(key, v)?,
            "synth_times" => self.synth.n_times = num(key, v)?,
            "synth_activities" => self.synth.n_activities = num(key, v)?,
            "synth_clusters" => {
                let k: Vec<usize> = list(key, v)?;
                let [a, b, c] = k[..] else {
                    return Err(Error::Config("`synth_clusters` needs three counts".into()));
                };
                self.synth.clusters = [a, b, c];
            }
            "synth_records_per_user" => self.synth.records_per_user = num(key, v)?,
            "synth_noise" => self.synth.noise_rate = num(key, v)?,
            "exclude_train" => self.exclude_train = num(key, v)?,
            "resume" => {
                self.resume = match v {
                    "" | "none" => None,
                    _ => Some(PathBuf::from(v)),
                }
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides such as those given with `--set`.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    /// Resolved configuration in the same format [`RunConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let f = &self.filter;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("d", m.d.to_string());
        kv("layers", m.layers.to_string());
        kv("enabled_types", join(&m.enabled_types));
        kv("fusion", m.fusion.to_string());
        kv("conv", m.conv.to_string());
        kv("lr", t.lr.to_string());
        kv("lr_decay", t.lr_decay.to_string());
        kv("lr_decay_every", t.lr_decay_every.to_string());
        kv(
            "lr_milestones",
            t.lr_milestones.as_ref().map_or_else(|| "none".into(), join),
        );
        kv("epochs", t.epochs.to_string());
        kv("patience", t.patience.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("negatives_per_positive", t.negatives_per_positive.to_string());
        kv("lambda", t.lambda.to_string());
        kv("gamma", t.gamma.to_string());
        kv("seed", t.seed.to_string());
        kv("eval_k", t.eval_k.to_string());
        kv("l2_scope", t.l2_scope.to_string());
        kv("min_locations_per_user", f.min_locations_per_user.to_string());
        kv("min_activities_per_user", f.min_activities_per_user.to_string());
        kv("min_activity_frequency", f.min_activity_frequency.to_string());
        kv("split", join([self.split.0, self.split.1, self.split.2]));
        kv("synth_users", s.n_users.to_string());
        kv("synth_locations", s.n_locations.to_string());
        kv("synth_times", s.n_times.to_string());
        kv("synth_activities", s.n_activities.to_string());
        kv("synth_clusters", join(s.clusters));
        kv("synth_records_per_user", s.records_per_user.to_string());
        kv("synth_noise", s.noise_rate.to_string());
        kv("exclude_train", self.exclude_train.to_string());
        kv(
            "resume",
            self.resume
                .as_ref()
                .map_or_else(|| "none".into(), |p| p.display().to_string()),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Fusion;

    #[test]
    fn defaults_follow_reported_settings() {
        let c = RunConfig::default();
        assert_eq!(c.model.d, 120);
        assert_eq!(c.model.layers, 1);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.batch_size, 2048);
        assert_eq!(c.train.lambda, 3e-5);
        assert_eq!(c.train.gamma, 3e-3);
        assert_eq!(c.train.lr_decay, 0.1);
        assert_eq!(c.train.lr_decay_every, 20);
        assert_eq!(c.train.patience, 20);
        assert_eq!(c.train.epochs, 500);
        assert_eq!(c.train.eval_k, 10);
        assert_eq!(c.model.enabled_types.len(), 8);
    }

    #[test]
    fn text_round_trip_and_keys() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["gamma=0", "enabled_types=L,T,A,U", "fusion=mean", "lr_milestones=50,100"])
            .unwrap();
        assert_eq!(c.train.gamma, 0.0);
        assert_eq!(c.model.enabled_types.len(), 4);
        assert_eq!(c.model.fusion, Fusion::Mean);
        let text = c.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, KEYS);
    }

    #[test]
    fn strictness() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("gama", "1"), Err(Error::Config(_))));
        assert!(c.set("d", "x").is_err());
        assert!(c.set("enabled_types", "L,Q").is_err());
        assert!(c.apply_overrides(&["novalue"]).is_err());
        assert!(RunConfig::parse("d = 6\n# comment\n\nlayers = 2 # trailing\n").is_ok());
        let err = RunConfig::parse("d = 6\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }
}
