//! Declarative run configuration: TOML file plus command-line overrides.
//! The digest of the resolved configuration gates every pipeline stage.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use phqeval::corpus::{ColumnMap, CorpusFormat};
use phqeval::curation::PairingPolicy;
use phqeval::gateway::{EmbeddingSource, GenParams, ModelConfig, RetryPolicy};
use phqeval::metrics::AbsentPolicy;
use phqeval::subtask::ExtractionScheme;
use phqeval::util::sha256_hex;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    pub corpus: CorpusSection,
    /// Keyword lexicon file; the built-in stem list when absent.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    /// Prompt asset directory; the bundled assets when absent.
    #[serde(default)]
    pub assets_dir: Option<PathBuf>,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub models: Vec<ModelSection>,
    #[serde(default)]
    pub embedding: Option<EmbeddingSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSection {
    pub path: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    pub confidence_threshold: f64,
    pub per_class_count: usize,
    pub seed: u64,
    #[serde(default)]
    pub columns: Option<ColumnsSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnsSection {
    pub id: String,
    pub text: String,
    pub label: String,
    pub confidence: String,
    pub subtasks: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    /// Cache directory shared across runs; `<run-dir>/cache` when absent.
    #[serde(default)]
    pub cache_root: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_retry_attempts")]
    pub retry_attempts: u32,
    #[serde(default = "default_retry_backoff_ms")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            cache_root: None,
            parallelism: default_parallelism(),
            retry_attempts: default_retry_attempts(),
            retry_backoff_ms: default_retry_backoff_ms(),
            request_timeout_secs: default_timeout_secs(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_z_threshold")]
    pub z_threshold: f64,
    #[serde(default = "default_pairing")]
    pub pairing: String,
    /// Admit all-correct-collection responses into the SFT dataset.
    #[serde(default)]
    pub include_easy_in_sft: bool,
    /// F1 treatment of absent labels: exclude (default) or count_as_wrong.
    #[serde(default = "default_absent_policy")]
    pub absent_policy: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            scheme: default_scheme(),
            z_threshold: default_z_threshold(),
            pairing: default_pairing(),
            include_easy_in_sft: false,
            absent_policy: default_absent_policy(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub name: String,
    pub endpoint: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub stop: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingSection {
    #[serde(default)]
    pub url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub precomputed: Option<PathBuf>,
}

fn default_delimiter() -> String {
    ",".into()
}
fn default_parallelism() -> usize {
    4
}
fn default_retry_attempts() -> u32 {
    3
}
fn default_retry_backoff_ms() -> u64 {
    500
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_scheme() -> String {
    "sr".into()
}
fn default_z_threshold() -> f64 {
    2.5
}
fn default_pairing() -> String {
    "cross_product".into()
}
fn default_absent_policy() -> String {
    "exclude".into()
}
fn default_max_tokens() -> u32 {
    2048
}

/// Command-line overrides folded into the file configuration before the
/// digest is taken.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scheme: Option<String>,
    pub models: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub pairing: Option<String>,
    pub z_threshold: Option<f64>,
}

impl Config {
    /// Loads the file, resolves relative paths against its directory,
    /// applies overrides, and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut config: Config = toml::from_str(&text)
            .with_context(|| format!("cannot parse config file {}", path.display()))?;

        let base = path.parent().unwrap_or(Path::new("."));
        config.corpus.path = resolve(base, &config.corpus.path);
        config.lexicon = config.lexicon.map(|p| resolve(base, &p));
        config.assets_dir = config.assets_dir.map(|p| resolve(base, &p));
        config.run.cache_root = config.run.cache_root.map(|p| resolve(base, &p));
        if let Some(embedding) = &mut config.embedding {
            embedding.precomputed = embedding.precomputed.take().map(|p| resolve(base, &p));
        }

        if let Some(scheme) = &overrides.scheme {
            config.eval.scheme = scheme.clone();
        }
        if let Some(pairing) = &overrides.pairing {
            config.eval.pairing = pairing.clone();
        }
        if let Some(z) = overrides.z_threshold {
            config.eval.z_threshold = z;
        }
        if let Some(seed) = overrides.seed {
            config.corpus.seed = seed;
        }
        if let Some(names) = &overrides.models {
            for name in names {
                if !config.models.iter().any(|m| &m.name == name) {
                    bail!("--models names unknown model '{name}'");
                }
            }
            config.models.retain(|m| names.contains(&m.name));
        }

        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            bail!("config must declare at least one model");
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.models.len() {
            bail!("model names must be unique");
        }
        if self.corpus.per_class_count == 0 {
            bail!("corpus.per_class_count must be >= 1");
        }
        if self.corpus.delimiter.len() != 1 {
            bail!("corpus.delimiter must be a single byte");
        }
        self.scheme()?;
        self.pairing()?;
        self.absent_policy()?;
        if let Some(embedding) = &self.embedding {
            let endpoint = embedding.url.is_some();
            let precomputed = embedding.precomputed.is_some();
            if endpoint == precomputed {
                bail!("embedding config needs exactly one of url or precomputed");
            }
            if endpoint && embedding.model.is_none() {
                bail!("embedding.model is required with embedding.url");
            }
        }
        Ok(())
    }

    /// Digest of the resolved configuration; identical configurations give
    /// identical run ids and stage gates.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        sha256_hex(canonical.as_bytes())
    }

    pub fn scheme(&self) -> Result<ExtractionScheme> {
        ExtractionScheme::parse(&self.eval.scheme)
            .with_context(|| format!("invalid scheme '{}', expected ir or sr", self.eval.scheme))
    }

    pub fn pairing(&self) -> Result<PairingPolicy> {
        PairingPolicy::parse(&self.eval.pairing).with_context(|| {
            format!(
                "invalid pairing '{}', expected cross_product or one_per_sample",
                self.eval.pairing
            )
        })
    }

    pub fn absent_policy(&self) -> Result<AbsentPolicy> {
        AbsentPolicy::parse(&self.eval.absent_policy).with_context(|| {
            format!(
                "invalid absent_policy '{}', expected exclude or count_as_wrong",
                self.eval.absent_policy
            )
        })
    }

    pub fn corpus_format(&self) -> CorpusFormat {
        let columns = match &self.corpus.columns {
            None => ColumnMap::default(),
            Some(columns) => ColumnMap {
                id: columns.id.clone(),
                text: columns.text.clone(),
                label: columns.label.clone(),
                confidence: columns.confidence.clone(),
                subtasks: columns.subtasks.clone(),
            },
        };
        CorpusFormat {
            delimiter: self.corpus.delimiter.as_bytes()[0],
            columns,
        }
    }

    pub fn model_configs(&self) -> Vec<ModelConfig> {
        self.models
            .iter()
            .map(|m| ModelConfig {
                name: m.name.clone(),
                endpoint: m.endpoint.clone(),
                api_key_env: m.api_key_env.clone(),
                params: GenParams {
                    temperature: m.temperature,
                    max_tokens: m.max_tokens,
                    stop: m.stop.clone(),
                },
            })
            .collect()
    }

    pub fn model_names(&self) -> Vec<String> {
        self.models.iter().map(|m| m.name.clone()).collect()
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.run.retry_attempts,
            initial_backoff_ms: self.run.retry_backoff_ms,
        }
    }

    pub fn embedding_source(&self) -> Option<EmbeddingSource> {
        let embedding = self.embedding.as_ref()?;
        if let Some(path) = &embedding.precomputed {
            return Some(EmbeddingSource::Precomputed { path: path.clone() });
        }
        Some(EmbeddingSource::Endpoint {
            url: embedding.url.clone()?,
            model: embedding.model.clone()?,
            api_key_env: embedding.api_key_env.clone(),
        })
    }

    pub fn cache_root(&self, run_dir: &Path) -> PathBuf {
        self.run
            .cache_root
            .clone()
            .unwrap_or_else(|| run_dir.join("cache"))
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
