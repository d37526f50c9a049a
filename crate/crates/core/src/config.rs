//! Declarative run configuration, read from TOML.
//!
//! Relative paths are resolved against the directory of the config file.
//! The top-level `seed` is copied into every seeded component (synthesis,
//! HNSW construction, latency query selection).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chunking::{ChunkingConfig, Strategy, STANDARD_SIZES};
use crate::corpus::{load_beir_corpus_split, synthesize_corpus, Corpus, SynthConfig};
use crate::embedding::{EmbedderSpec, EmbeddingCache};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::latency::LatencyProtocol;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSource {
    /// Directory in BEIR layout.
    #[serde(default)]
    pub beir: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

fn default_split() -> String {
    "test".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(t) => vec![t.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_sizes() -> Vec<usize> {
    STANDARD_SIZES.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            strategies: default_strategies(),
            sizes: default_sizes(),
        }
    }
}

fn default_seed() -> u64 {
    42
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_chunking() -> ChunkingConfig {
    ChunkingConfig::new(Strategy::Fixed, 32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Embedding cache directory; no disk cache when unset.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub jobs: usize,
    /// Reporting only, copied into latency tables.
    #[serde(default)]
    pub cost_per_million_tokens: Option<f64>,
    pub corpus: CorpusSource,
    pub embedder: OneOrMany<EmbedderSpec>,
    #[serde(default = "default_chunking")]
    pub chunking: ChunkingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub latency: LatencyProtocol,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = self.cache_dir.as_mut() {
            resolve(base, p);
        }
        resolve(base, &mut self.output_dir);
        if let Some(p) = self.corpus.beir.as_mut() {
            resolve(base, p);
        }
        if let Some(s) = self.corpus.synth.as_mut() {
            for p in s.source_texts.values_mut() {
                resolve(base, p);
            }
            if let Some(p) = s.templates_file.as_mut() {
                resolve(base, p);
            }
        }
    }

    pub fn propagate_seed(&mut self) {
        if let Some(s) = self.corpus.synth.as_mut() {
            s.seed = self.seed;
        }
        self.eval.hnsw.seed = self.seed;
        self.latency.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.corpus.beir, &self.corpus.synth) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("corpus: set either beir or synth, not both".into()))
            }
            (None, None) => return Err(Error::Config("corpus: set beir or synth".into())),
            _ => {}
        }
        let specs = self.embedders();
        if specs.is_empty() {
            return Err(Error::Config("at least one embedder is required".into()));
        }
        for s in &specs {
            s.validate()?;
        }
        self.chunking.validate()?;
        self.eval.validate()?;
        if self.latency.n_runs == 0 {
            return Err(Error::Config("latency.n_runs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn embedders(&self) -> Vec<EmbedderSpec> {
        self.embedder.to_vec()
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match (&self.corpus.beir, &self.corpus.synth) {
            (Some(root), _) => load_beir_corpus_split(root, &self.corpus.split),
            (None, Some(synth)) => synthesize_corpus(synth),
            (None, None) => Err(Error::Config("no corpus source".into())),
        }
    }

    pub fn open_cache(&self) -> Result<Option<EmbeddingCache>> {
        self.cache_dir.as_ref().map(EmbeddingCache::open).transpose()
    }

    /// Fully-resolved config, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
