//! TOML configuration file and its merge with command-line flags.
//!
//! Every key is optional. Flags win over file values, which win over
//! built-in defaults. API keys are never read from this file; only the
//! names of the environment variables that hold them.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use spark_core::evaluation::{EvalConfig, DEFAULT_KS};
use spark_core::filtering::DEFAULT_FRACTION;
use spark_core::http::{
    ENV_EMBED_KEY, ENV_EMBED_MODEL, ENV_EMBED_URL, ENV_LLM_KEY, ENV_LLM_MODEL, ENV_LLM_URL,
};
use spark_core::{FilterPolicy, Granularity, Normalizer, NgramHashEmbedder, PromptSettings, RunMode, DEFAULT_EPSILON};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub embedder: Option<String>,
    pub dim: Option<usize>,
    pub chunk_len: Option<usize>,
    pub client: Option<String>,
    pub fixtures: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub temperature: Option<f64>,
    pub policy: Option<String>,
    pub fraction: Option<f64>,
    pub epsilon: Option<f64>,
    pub normalizer: Option<String>,
    pub trim: Option<bool>,
    pub r: Option<usize>,
    pub k: Option<Vec<usize>>,
    pub granularity: Option<Vec<String>>,
    pub mode: Option<String>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub output: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub language: Option<String>,
    #[serde(default)]
    pub env: EnvNames,
}

/// Names of the environment variables holding endpoints, keys and models.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvNames {
    pub llm_url: String,
    pub llm_key: String,
    pub llm_model: String,
    pub embed_url: String,
    pub embed_key: String,
    pub embed_model: String,
}

impl Default for EnvNames {
    fn default() -> Self {
        EnvNames {
            llm_url: ENV_LLM_URL.into(),
            llm_key: ENV_LLM_KEY.into(),
            llm_model: ENV_LLM_MODEL.into(),
            embed_url: ENV_EMBED_URL.into(),
            embed_key: ENV_EMBED_KEY.into(),
            embed_model: ENV_EMBED_MODEL.into(),
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Overlays the values set in `flags`.
    pub fn overlay(mut self, flags: FileConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if flags.$f.is_some() { self.$f = flags.$f; } )* };
        }
        take!(
            corpus, index, embedder, dim, chunk_len, client, fixtures, record, temperature, policy,
            fraction, epsilon, normalizer, trim, r, k, granularity, mode, seed, parallelism, output,
            csv, language
        );
        self
    }

    pub fn require_corpus(&self) -> Result<&Path, CliError> {
        let p = self
            .corpus
            .as_deref()
            .ok_or_else(|| CliError::Usage("no corpus given (--corpus or `corpus` in config)".into()))?;
        if !p.exists() {
            return Err(CliError::Usage(format!("corpus {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn require_index(&self) -> Result<&Path, CliError> {
        let p = self
            .index
            .as_deref()
            .ok_or_else(|| CliError::Usage("no index given (--index or `index` in config)".into()))?;
        if !p.exists() {
            return Err(CliError::Usage(format!("index {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.dim.unwrap_or(NgramHashEmbedder::DEFAULT_DIMENSION)
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len.unwrap_or(NgramHashEmbedder::DEFAULT_CHUNK_LEN)
    }

    pub fn policy(&self) -> Result<FilterPolicy, CliError> {
        let name = self.policy.as_deref().unwrap_or("all");
        FilterPolicy::from_name(name, self.fraction.unwrap_or(DEFAULT_FRACTION)).map_err(usage)
    }

    pub fn mode(&self) -> Result<RunMode, CliError> {
        self.mode.as_deref().unwrap_or("default").parse().map_err(usage)
    }

    pub fn normalizer(&self) -> Result<Normalizer, CliError> {
        self.normalizer.as_deref().unwrap_or("max").parse().map_err(usage)
    }

    pub fn granularities(&self) -> Result<Vec<Granularity>, CliError> {
        match &self.granularity {
            None => Ok(Granularity::ALL.to_vec()),
            Some(names) => names.iter().map(|n| n.parse().map_err(usage)).collect(),
        }
    }

    pub fn settings(&self) -> PromptSettings {
        let mut s = PromptSettings::default();
        if let Some(lang) = &self.language {
            s.programming_language = lang.clone();
        }
        s
    }

    /// Evaluation settings, validated.
    pub fn eval_config(&self) -> Result<EvalConfig, CliError> {
        let cfg = EvalConfig {
            mode: self.mode()?,
            policy: self.policy()?,
            epsilon: self.epsilon.unwrap_or(DEFAULT_EPSILON),
            normalizer: self.normalizer()?,
            trim: self.trim.unwrap_or(false),
            r: self.r.unwrap_or(1),
            ks: self.k.clone().unwrap_or_else(|| DEFAULT_KS.to_vec()),
            granularities: self.granularities()?,
            seed: self.seed.unwrap_or(0),
            parallelism: self.parallelism,
            settings: self.settings(),
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

fn usage(e: spark_core::Error) -> CliError {
    CliError::Usage(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_file() {
        let text = r#"
            corpus = "c.jsonl"
            index = "c.idx"
            embedder = "ngram"
            dim = 512
            client = "replay"
            fixtures = "fx.json"
            policy = "closest-preceding"
            fraction = 0.2
            epsilon = 0.1
            normalizer = "align"
            trim = true
            r = 2
            k = [1, 5]
            granularity = ["line", "block"]
            mode = "directive"
            seed = 9
            parallelism = 2
            output = "report.json"
            csv = "report.csv"

            [env]
            llm_url = "MY_URL"
        "#;
        let cfg: FileConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.env.llm_url, "MY_URL");
        assert_eq!(cfg.env.llm_key, ENV_LLM_KEY);
        let eval = cfg.eval_config().unwrap();
        assert_eq!(eval.policy, FilterPolicy::ClosestTimePreceding { fraction: 0.2 });
        assert_eq!(eval.mode, RunMode::Directive);
        assert_eq!(eval.ks, vec![1, 5]);
        assert_eq!(eval.granularities, vec![Granularity::Line, Granularity::Block]);
        assert_eq!(eval.normalizer, Normalizer::Align);
    }

    #[test]
    fn secrets_are_not_accepted() {
        assert!(toml::from_str::<FileConfig>("api_key = \"sk-123\"").is_err());
        assert!(toml::from_str::<FileConfig>("[env]\nllm_key_value = \"x\"").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file = FileConfig { epsilon: Some(0.1), seed: Some(1), ..FileConfig::default() };
        let flags = FileConfig { epsilon: Some(0.0), ..FileConfig::default() };
        let merged = file.overlay(flags);
        assert_eq!(merged.epsilon, Some(0.0));
        assert_eq!(merged.seed, Some(1));
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let bad = FileConfig { policy: Some("newest".into()), ..FileConfig::default() };
        assert!(matches!(bad.eval_config(), Err(CliError::Usage(_))));
        let bad = FileConfig { k: Some(vec![0]), ..FileConfig::default() };
        assert!(matches!(bad.eval_config(), Err(CliError::Usage(_))));
    }
}
