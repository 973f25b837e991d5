//! Flat `key = value` configuration.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::qa::{DEFAULT_ENTRY_BYTES, DEFAULT_QA_LIMIT_BYTES};
use crate::text::DEFAULT_EMBED_SEED;

/// Overrides every pseudorandom seed when set.
pub const SEED_ENV: &str = "PERCACHE_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub tau_query: f64,
    pub tau_scheduler: f64,
    pub prediction_stride: usize,
    pub retrieval_k: usize,
    pub k_refresh: usize,
    pub k_boundary: usize,
    pub qkv_limit_bytes: u64,
    pub qa_limit_bytes: u64,
    pub alpha_fusion: f64,
    pub backend: String,
    pub chunk_words: usize,
    pub t_batch: u64,
    pub t_quiet: u64,
    pub buffer_size: usize,
    pub abstract_cap_bytes: usize,

    pub script: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub system_prompt: String,
    pub kb_kind: String,
    pub embedder: String,
    pub slice_store: String,
    pub scheduler: bool,
    pub qkv_to_qa: bool,
    pub qa_to_qkv: bool,
    pub conversion_batch: usize,
    pub caching: bool,
    pub max_decode_tokens: usize,
    pub model_layers: usize,
    pub model_heads: usize,
    pub model_head_dim: usize,
    pub model_seed: u64,
    pub embed_seed: u64,
    pub embed_dim: usize,
    pub flops_per_ms: f64,
    pub cost_scale: f64,
    pub discard_at_system_node: bool,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub qa_entry_bytes: u64,
    pub fallback_response: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            tau_query: 0.85,
            tau_scheduler: 0.88,
            prediction_stride: 5,
            retrieval_k: 3,
            k_refresh: 3,
            k_boundary: 4,
            qkv_limit_bytes: 1 << 30,
            qa_limit_bytes: DEFAULT_QA_LIMIT_BYTES,
            alpha_fusion: 0.5,
            backend: "toy".into(),
            chunk_words: 100,
            t_batch: 600,
            t_quiet: 300,
            buffer_size: 20,
            abstract_cap_bytes: 4096,
            script: None,
            templates: None,
            vocab: None,
            system_prompt: "You are a personal assistant. Answer using the notes below.".into(),
            kb_kind: "personal emails".into(),
            embedder: "hash".into(),
            slice_store: "memory".into(),
            scheduler: true,
            qkv_to_qa: true,
            qa_to_qkv: true,
            conversion_batch: 8,
            caching: true,
            max_decode_tokens: 16,
            model_layers: 2,
            model_heads: 2,
            model_head_dim: 16,
            model_seed: 7,
            embed_seed: DEFAULT_EMBED_SEED,
            embed_dim: 256,
            flops_per_ms: 1.0e6,
            cost_scale: 1.0,
            discard_at_system_node: false,
            bm25_k1: 1.2,
            bm25_b: 0.75,
            qa_entry_bytes: DEFAULT_ENTRY_BYTES,
            fallback_response: String::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.replace('_', "").parse().map_err(|_| format!("`{v}` is not a valid value for {key}"))
}

fn parse_seed(v: &str) -> std::result::Result<u64, String> {
    let v = v.replace('_', "");
    match v.strip_prefix("0x").or_else(|| v.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => v.parse(),
    }
    .map_err(|_| format!("`{v}` is not a valid seed"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean for {key}")),
    }
}

fn unit(key: &str, x: f64) -> std::result::Result<f64, String> {
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{key} must lie in [0, 1]"))
    }
}

fn positive<T: PartialOrd + Default>(key: &str, x: T) -> std::result::Result<T, String> {
    if x > T::default() {
        Ok(x)
    } else {
        Err(format!("{key} must be positive"))
    }
}

impl Config {
    /// Sets one key; `base` resolves relative paths.
    pub fn set_in(&mut self, key: &str, value: &str, base: Option<&Path>) -> std::result::Result<(), String> {
        let v = value.trim();
        let path = |v: &str| -> Option<PathBuf> {
            if v.is_empty() {
                return None;
            }
            let p = PathBuf::from(v);
            Some(match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            })
        };
        match key {
            "tau_query" => self.tau_query = unit(key, parse_num(key, v)?)?,
            "tau_scheduler" => self.tau_scheduler = unit(key, parse_num(key, v)?)?,
            "prediction_stride" => self.prediction_stride = positive(key, parse_num(key, v)?)?,
            "retrieval_k" => self.retrieval_k = positive(key, parse_num(key, v)?)?,
            "k_refresh" => self.k_refresh = positive(key, parse_num(key, v)?)?,
            "k_boundary" => self.k_boundary = parse_num(key, v)?,
            "qkv_limit_bytes" => self.qkv_limit_bytes = parse_num(key, v)?,
            "qa_limit_bytes" => self.qa_limit_bytes = parse_num(key, v)?,
            "alpha_fusion" => self.alpha_fusion = unit(key, parse_num(key, v)?)?,
            "backend" => self.backend = v.to_string(),
            "chunk_words" => self.chunk_words = positive(key, parse_num(key, v)?)?,
            "t_batch" => self.t_batch = parse_num(key, v)?,
            "t_quiet" => self.t_quiet = parse_num(key, v)?,
            "buffer_size" => self.buffer_size = positive(key, parse_num(key, v)?)?,
            "abstract_cap_bytes" => self.abstract_cap_bytes = positive(key, parse_num(key, v)?)?,
            "script" => self.script = path(v),
            "templates" => self.templates = path(v),
            "vocab" => self.vocab = path(v),
            "system_prompt" => self.system_prompt = v.to_string(),
            "kb_kind" => self.kb_kind = v.to_string(),
            "embedder" => self.embedder = v.to_string(),
            "slice_store" => self.slice_store = v.to_string(),
            "scheduler" => self.scheduler = parse_bool(key, v)?,
            "qkv_to_qa" => self.qkv_to_qa = parse_bool(key, v)?,
            "qa_to_qkv" => self.qa_to_qkv = parse_bool(key, v)?,
            "conversion_batch" => self.conversion_batch = parse_num(key, v)?,
            "caching" => self.caching = parse_bool(key, v)?,
            "max_decode_tokens" => self.max_decode_tokens = positive(key, parse_num(key, v)?)?,
            "model_layers" => self.model_layers = positive(key, parse_num(key, v)?)?,
            "model_heads" => self.model_heads = positive(key, parse_num(key, v)?)?,
            "model_head_dim" => self.model_head_dim = positive(key, parse_num(key, v)?)?,
            "model_seed" => self.model_seed = parse_seed(v)?,
            "embed_seed" => self.embed_seed = parse_seed(v)?,
            "embed_dim" => self.embed_dim = positive(key, parse_num(key, v)?)?,
            "flops_per_ms" => self.flops_per_ms = positive(key, parse_num(key, v)?)?,
            "cost_scale" => self.cost_scale = parse_num::<f64>(key, v).and_then(|x| if x >= 0.0 { Ok(x) } else { Err("cost_scale must be >= 0".into()) })?,
            "discard_at_system_node" => self.discard_at_system_node = parse_bool(key, v)?,
            "bm25_k1" => self.bm25_k1 = parse_num(key, v)?,
            "bm25_b" => self.bm25_b = unit(key, parse_num(key, v)?)?,
            "qa_entry_bytes" => self.qa_entry_bytes = positive(key, parse_num(key, v)?)?,
            "fallback_response" => self.fallback_response = v.to_string(),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        self.set_in(key, value, None)
    }

    pub fn parse_in(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                reason: "expected key = value".into(),
            })?;
            cfg.set_in(k.trim(), v, base)
                .map_err(|reason| Error::Config { line: i + 1, reason })?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_in(text, None)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_in(&text, path.parent())
    }

    /// Applies `PERCACHE_SEED` to the model and embedding seeds.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = parse_seed(v.trim()).map_err(|reason| Error::Config { line: 0, reason })?;
            self.model_seed = seed;
            self.embed_seed = seed;
        }
        Ok(())
    }
}
