//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an
//! empty file is a valid config; `none` clears optional values. The resolved
//! config is written to every output directory and its SHA-256 identifies
//! the run.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use wordorder::agent::Init;
use wordorder::corpus::{CorpusOptions, TargetPolicy};
use wordorder::evolution::LineageConfig;
use wordorder::grammar::LanguageSpec;
use wordorder::training::{Grid, TrainConfig};

use crate::CliError;

pub const FAMILIES: [&str; 8] = [
    "forward-iconic",
    "backward-iconic",
    "non-iconic",
    "free",
    "local",
    "long-distance",
    "local-control",
    "long-distance-control",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub language: String,
    /// Phrase markers; ignored by the element-marked families.
    pub markers: bool,
    /// Explicit non-iconic order such as `3-1-2-5-4`.
    pub order: Option<Vec<u8>>,
    /// Seeds the non-iconic order (when `order` is unset) and control subsets.
    pub language_seed: u64,
    pub min_segments: Option<usize>,
    pub max_segments: Option<usize>,
    pub corpus: CorpusOptions,
    pub train: TrainConfig,
    pub grid: Grid,
    pub lineage: LineageConfig,
    pub parents: usize,
    pub lineage_seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            language: "forward-iconic".into(),
            markers: false,
            order: None,
            language_seed: 0,
            min_segments: None,
            max_segments: None,
            corpus: CorpusOptions::default(),
            train: TrainConfig::default(),
            grid: Grid::default(),
            lineage: LineageConfig::default(),
            parents: 1,
            lineage_seeds: 1,
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> CliError {
    CliError::Config(format!("{key}: {why} (got {value:?})"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| bad(key, v, "expected a number"))
}

fn opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>, CliError> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn flag(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    let items: Vec<T> = v
        .split(',')
        .map(|s| num(key, s.trim()))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(bad(key, v, "expected a comma-separated list"));
    }
    Ok(items)
}

fn show<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".into(), T::to_string)
}

fn join<T: std::fmt::Display>(v: &[T], sep: &str) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key. A `-markers`/`+markers` suffix on `language` also sets
    /// `markers`.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let t = &mut self.train;
        match key {
            "language" => {
                let (family, markers) = match v.strip_suffix("-markers").or_else(|| v.strip_suffix("+markers")) {
                    Some(f) => (f, true),
                    None => (v, self.markers),
                };
                if !FAMILIES.contains(&family) {
                    return Err(bad(key, v, &format!("expected one of {}", FAMILIES.join(", "))));
                }
                self.language = family.into();
                self.markers = markers;
            }
            "markers" => self.markers = flag(key, v)?,
            "order" => {
                self.order = if v == "none" {
                    None
                } else {
                    Some(v.split('-').map(|p| num(key, p)).collect::<Result<_, _>>()?)
                }
            }
            "language_seed" => self.language_seed = num(key, v)?,
            "min_segments" => self.min_segments = opt(key, v)?,
            "max_segments" => self.max_segments = opt(key, v)?,
            "corpus_seed" => self.corpus.seed = num(key, v)?,
            "trajectory_limit" => self.corpus.trajectory_limit = opt(key, v)?,
            "permutation_closed" => self.corpus.permutation_closed = flag(key, v)?,
            "hidden" => t.hidden = num(key, v)?,
            "attention" => t.attention = flag(key, v)?,
            "batch" => t.batch_size = num(key, v)?,
            "max_epochs" => t.max_epochs = num(key, v)?,
            "min_epochs" => t.min_epochs = num(key, v)?,
            "patience" => t.patience = opt(key, v)?,
            "targets" => t.targets = v.parse::<TargetPolicy>().map_err(|e| bad(key, v, &e.to_string()))?,
            "lr" => t.optimizer.lr = num(key, v)?,
            "beta1" => t.optimizer.beta1 = num(key, v)?,
            "beta2" => t.optimizer.beta2 = num(key, v)?,
            "eps" => t.optimizer.eps = num(key, v)?,
            "clip_norm" => t.clip_norm = opt(key, v)?,
            "max_len" => t.max_len = num(key, v)?,
            "eval_limit" => t.eval_limit = opt(key, v)?,
            "stop_at" => t.stop_at = opt(key, v)?,
            "init" => t.init = v.parse::<Init>().map_err(|_| bad(key, v, "expected uniform or fan-in"))?,
            "seed" => t.seed = num(key, v)?,
            "grid_hidden" => self.grid.hidden = list(key, v)?,
            "grid_batch" => self.grid.batch = list(key, v)?,
            "grid_seeds" => self.grid.seeds = list(key, v)?,
            "generations" => self.lineage.generations = num(key, v)?,
            "parents" => self.parents = num(key, v)?,
            "lineage_seeds" => self.lineage_seeds = num(key, v)?,
            "samples" => self.lineage.samples_per_trajectory = num(key, v)?,
            "eval_samples" => self.lineage.eval_samples = opt(key, v)?,
            "lineage_seed" => self.lineage.seed = num(key, v)?,
            "metric_samples" => self.lineage.metric_samples = num(key, v)?,
            "metric_limit" => self.lineage.metric_limit = opt(key, v)?,
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let l = &self.lineage;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("language", self.language.clone());
        kv("markers", self.markers.to_string());
        kv("order", self.order.as_ref().map_or_else(|| "none".into(), |o| join(o, "-")));
        kv("language_seed", self.language_seed.to_string());
        kv("min_segments", show(&self.min_segments));
        kv("max_segments", show(&self.max_segments));
        kv("corpus_seed", self.corpus.seed.to_string());
        kv("trajectory_limit", show(&self.corpus.trajectory_limit));
        kv("permutation_closed", self.corpus.permutation_closed.to_string());
        kv("hidden", t.hidden.to_string());
        kv("attention", t.attention.to_string());
        kv("batch", t.batch_size.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("min_epochs", t.min_epochs.to_string());
        kv("patience", show(&t.patience));
        kv("targets", t.targets.to_string());
        kv("lr", t.optimizer.lr.to_string());
        kv("beta1", t.optimizer.beta1.to_string());
        kv("beta2", t.optimizer.beta2.to_string());
        kv("eps", t.optimizer.eps.to_string());
        kv("clip_norm", show(&t.clip_norm));
        kv("max_len", t.max_len.to_string());
        kv("eval_limit", show(&t.eval_limit));
        kv("stop_at", show(&t.stop_at));
        kv("init", t.init.to_string());
        kv("seed", t.seed.to_string());
        kv("grid_hidden", join(&self.grid.hidden, ","));
        kv("grid_batch", join(&self.grid.batch, ","));
        kv("grid_seeds", join(&self.grid.seeds, ","));
        kv("generations", l.generations.to_string());
        kv("parents", self.parents.to_string());
        kv("lineage_seeds", self.lineage_seeds.to_string());
        kv("samples", l.samples_per_trajectory.to_string());
        kv("eval_samples", show(&l.eval_samples));
        kv("lineage_seed", l.seed.to_string());
        kv("metric_samples", l.metric_samples.to_string());
        kv("metric_limit", show(&l.metric_limit));
        s
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn language_spec(&self) -> Result<LanguageSpec, CliError> {
        let m = self.markers;
        let spec = match self.language.as_str() {
            "forward-iconic" => LanguageSpec::forward_iconic(m),
            "backward-iconic" => LanguageSpec::backward_iconic(m),
            "non-iconic" => match &self.order {
                Some(o) => LanguageSpec::non_iconic(o.clone(), m).map_err(|e| CliError::Config(format!("order: {e}")))?,
                None => LanguageSpec::sample_noniconic(self.language_seed, m),
            },
            "free" => LanguageSpec::free_order(m),
            "local" => LanguageSpec::local_language(),
            "long-distance" => LanguageSpec::long_distance_language(),
            "local-control" => LanguageSpec::sample_control(&LanguageSpec::local_language(), self.language_seed)?,
            "long-distance-control" => {
                LanguageSpec::sample_control(&LanguageSpec::long_distance_language(), self.language_seed)?
            }
            other => return Err(bad("language", other, "unknown family")),
        };
        let (lo, hi) = (
            self.min_segments.unwrap_or(spec.min_segments),
            self.max_segments.unwrap_or(spec.max_segments),
        );
        let spec = spec.with_segment_range(lo, hi);
        spec.validate().map_err(|e| CliError::Config(format!("segments: {e}")))?;
        Ok(spec)
    }

    pub fn lineage_config(&self) -> LineageConfig {
        LineageConfig {
            train: self.train.clone(),
            ..self.lineage.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.language_spec()?;
        self.train.validate()?;
        self.lineage_config().validate()?;
        if self.parents == 0 {
            return Err(CliError::Config("parents: must be positive".into()));
        }
        if self.lineage_seeds == 0 {
            return Err(CliError::Config("lineage_seeds: must be positive".into()));
        }
        if self.grid.hidden.contains(&0) || self.grid.batch.contains(&0) {
            return Err(CliError::Config("grid_hidden, grid_batch: must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("language", "free-markers").unwrap();
        cfg.set("trajectory_limit", "300").unwrap();
        cfg.set("lr", "0.01").unwrap();
        cfg.set("targets", "balanced:3").unwrap();
        cfg.set("order", "3-1-2-5-4").unwrap();
        cfg.set("grid_seeds", "4, 5").unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert!(cfg.markers);
        assert_eq!(cfg.language, "free");
    }

    #[test]
    fn errors_name_the_key() {
        let e = ExperimentConfig::parse("hidden = many").unwrap_err().to_string();
        assert!(e.contains("hidden"), "{e}");
        let e = ExperimentConfig::parse("colour = red").unwrap_err().to_string();
        assert!(e.contains("colour"), "{e}");
        let mut cfg = ExperimentConfig::default();
        cfg.set("batch", "0").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("batch"));
        cfg = ExperimentConfig::default();
        cfg.set("language", "non-iconic").unwrap();
        cfg.set("order", "1-1-2-3-4").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("order"));
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = ExperimentConfig::parse("# nothing\n\nseed = 3 # trailing\n").unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.language_spec().unwrap().name, "forward-iconic");
    }
}
