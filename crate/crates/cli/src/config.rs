//! Run configuration: one JSON document, validated before any work.

use std::path::{Path, PathBuf};

use rtrv_core::baselines::ClusterKind;
use rtrv_core::index::Metric;
use rtrv_core::inspect::ExportFormat;
use rtrv_core::io::Split;
use rtrv_core::model::ModelConfig;
use rtrv_core::synth::SynthSpec;
use rtrv_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Parent of the run directory; relative paths resolve against the
    /// config file's directory.
    #[serde(default = "default_run_root")]
    pub run_root: PathBuf,
    pub io: IoConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineConfig>,
    #[serde(default)]
    pub inspect: InspectConfig,
}

fn default_run_root() -> PathBuf {
    PathBuf::from("runs")
}

/// Either the three data files or a synthetic corpus generated in memory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contexts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Empty means every level 1..=D.
    #[serde(default)]
    pub levels: Vec<usize>,
    #[serde(default = "default_ks")]
    pub k: Vec<usize>,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default = "default_split")]
    pub split: Split,
    /// Timed passes over the queries per level; 0 skips latency.
    #[serde(default = "default_latency_reps")]
    pub latency_reps: usize,
}

fn default_ks() -> Vec<usize> {
    vec![1, 10, 100]
}
fn default_metric() -> Metric {
    Metric::Ntvd
}
fn default_split() -> Split {
    Split::Test
}
fn default_latency_reps() -> usize {
    3
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { levels: Vec::new(), k: default_ks(), metric: default_metric(), split: default_split(), latency_reps: default_latency_reps() }
    }
}

impl EvalConfig {
    pub fn max_k(&self) -> usize {
        self.k.iter().copied().max().unwrap_or(1)
    }

    pub fn levels_for(&self, depth: usize) -> Vec<usize> {
        if self.levels.is_empty() { (1..=depth).collect() } else { self.levels.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    HierKmeans,
    HierGmm,
    NoTree,
    CosineAdapter,
}

impl BaselineKind {
    pub fn cluster_kind(self) -> Option<ClusterKind> {
        match self {
            BaselineKind::HierKmeans => Some(ClusterKind::Kmeans),
            BaselineKind::HierGmm => Some(ClusterKind::Gmm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Tree depth for clustering baselines; defaults to `model.depth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    /// Nested-prefix levels for the cosine adapter; 0 trains full width only.
    #[serde(default)]
    pub nested_depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InspectMode {
    AllPairs,
    AncestorDescendant,
    Lca,
    Keywords,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectConfig {
    #[serde(default = "default_modes")]
    pub modes: Vec<InspectMode>,
    /// Keywords per node.
    #[serde(default = "default_top_k")]
    pub k: usize,
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_format")]
    pub format: ExportFormat,
}

fn default_modes() -> Vec<InspectMode> {
    vec![InspectMode::AllPairs, InspectMode::AncestorDescendant, InspectMode::Lca, InspectMode::Keywords]
}
fn default_top_k() -> usize {
    5
}
fn default_sample_size() -> usize {
    100_000
}
fn default_format() -> ExportFormat {
    ExportFormat::Json
}

impl Default for InspectConfig {
    fn default() -> Self {
        Self { modes: default_modes(), k: default_top_k(), sample_size: default_sample_size(), seed: 0, format: default_format() }
    }
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub level: Option<usize>,
    pub k: Option<usize>,
}

fn invalid(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::ConfigInvalid(format!("{path}: {msg}"))
}

impl RunConfig {
    /// Parses JSON, reporting the offending path on schema errors.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(if path.is_empty() { "." } else { &path }, e.into_inner())
        })
    }

    /// Reads `path`, applies overrides, resolves relative paths and validates.
    pub fn load(path: &Path, overrides: Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply(overrides);
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(level) = o.level {
            self.eval.levels = vec![level];
        }
        if let Some(k) = o.k {
            self.eval.k = vec![k];
        }
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run_root);
        for p in [&mut self.io.queries, &mut self.io.contexts, &mut self.io.pairs, &mut self.io.context_manifest].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid("name", "must be a non-empty single path component"));
        }
        let files = [&self.io.queries, &self.io.contexts, &self.io.pairs];
        match (&self.io.synth, files.iter().all(|f| f.is_some()), files.iter().any(|f| f.is_some())) {
            (Some(spec), _, false) => spec.validate().map_err(|e| invalid("io.synth", e))?,
            (None, true, _) => {}
            (Some(_), _, true) => return Err(invalid("io", "give either synth or data files, not both")),
            (None, false, _) => return Err(invalid("io", "queries, contexts and pairs are all required")),
        }
        if self.model.depth == 0 {
            return Err(invalid("model.depth", "must be at least 1"));
        }
        self.train.validate().map_err(|e| invalid("train", e))?;
        if self.eval.k.is_empty() || self.eval.k.contains(&0) {
            return Err(invalid("eval.k", "needs at least one positive k"));
        }
        if let Some(&h) = self.eval.levels.iter().find(|&&h| h == 0 || h > self.model.depth) {
            return Err(invalid("eval.levels", format!("level {h} outside 1..={}", self.model.depth)));
        }
        if self.eval.latency_reps != 0 && self.eval.latency_reps < 3 {
            return Err(invalid("eval.latency_reps", "use 0 or at least 3"));
        }
        if self.inspect.k == 0 {
            return Err(invalid("inspect.k", "must be positive"));
        }
        if let Some(b) = &self.baseline {
            if b.depth == Some(0) {
                return Err(invalid("baseline.depth", "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run_root.join(&self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "t",
        "io": {"synth": {"clusters": 2, "dim": 4, "per_cluster": 10, "sigma_q": 0.1, "separation": 5.0, "seed": 0}},
        "model": {"depth": 2, "dim": 4, "split": {"kind": "linear"}, "propagation": {"kind": "product"}, "score_dropout": 0.0}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.eval.k, vec![1, 10, 100]);
        assert_eq!(c.eval.levels_for(2), vec![1, 2]);
        assert_eq!(c.train.batch_size, 64);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let bad = MINIMAL.replace("\"seed\": 0}", "\"seed\": 0, \"bogus\": 1}");
        let err = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("io.synth") && err.contains("bogus"), "{err}");
        let bad = MINIMAL.replace("\"name\": \"t\",", "\"name\": \"t\", \"extra\": true,");
        assert!(RunConfig::parse(&bad).unwrap_err().to_string().contains("extra"));
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.apply(Overrides { level: Some(3), ..Default::default() });
        assert!(c.validate().unwrap_err().to_string().contains("eval.levels"));
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.io.queries = Some("q.rtrv".into());
        assert!(c.validate().is_err());
    }
}
