//! Named factories for the pluggable parts: backends, embedders and slice stores.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use crate::bank::{DirStore, MemoryStore, SliceStore, SLICES_DIR};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{LlmBackend, Script, ScriptedBackend, ToyBackend, ToyModelConfig};
use crate::text::{Embedder, HashEmbedder, Tokenizer};

/// What a factory may draw on.
pub struct BuildContext<'a> {
    pub config: &'a Config,
    pub tokenizer: Arc<Tokenizer>,
    pub bank_dir: Option<PathBuf>,
}

type Factory<T> = Box<dyn Fn(&BuildContext) -> Result<Box<T>> + Send + Sync>;

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            factories: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&BuildContext) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, ctx: &BuildContext) -> Result<Box<T>> {
        let f = self.factories.get(name).ok_or_else(|| Error::UnknownComponent {
            kind: self.kind,
            name: name.to_string(),
        })?;
        f(ctx)
    }
}

fn toy(ctx: &BuildContext) -> Result<ToyBackend> {
    let c = ctx.config;
    let cfg = ToyModelConfig {
        layers: c.model_layers,
        heads: c.model_heads,
        head_dim: c.model_head_dim,
        vocab_size: ctx.tokenizer.vocab().len(),
        seed: c.model_seed,
    };
    ToyBackend::new(cfg, ctx.tokenizer.clone(), c.max_decode_tokens)
}

pub fn backends() -> Registry<dyn LlmBackend> {
    let mut r: Registry<dyn LlmBackend> = Registry::new("backend");
    r.register("toy", |ctx| Ok(Box::new(toy(ctx)?)));
    r.register("scripted", |ctx| {
        let script = match &ctx.config.script {
            Some(p) => Script::load(p)?,
            None => Script::default(),
        };
        Ok(Box::new(ScriptedBackend::new(toy(ctx)?, script)))
    });
    r
}

pub fn embedders() -> Registry<dyn Embedder> {
    let mut r: Registry<dyn Embedder> = Registry::new("embedder");
    r.register("hash", |ctx| Ok(Box::new(HashEmbedder::new(ctx.config.embed_dim, ctx.config.embed_seed))));
    r
}

pub fn slice_stores() -> Registry<dyn SliceStore> {
    let mut r: Registry<dyn SliceStore> = Registry::new("slice store");
    r.register("memory", |_| Ok(Box::new(MemoryStore::new())));
    r.register("dir", |ctx| {
        let dir = ctx.bank_dir.as_ref().ok_or_else(|| Error::UnknownComponent {
            kind: "slice store",
            name: "dir (no bank directory given)".into(),
        })?;
        Ok(Box::new(DirStore::open(&dir.join(SLICES_DIR))?))
    });
    r
}
