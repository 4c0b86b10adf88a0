//! Flat `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file,
//! `TACGAN_<KEY>` environment variables, `--set key=value` and dedicated
//! flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::text_encoder::{load_precomputed_table, EncoderBackend};
use crate::training::AdamConfig;

pub const ENV_PREFIX: &str = "TACGAN_";

const MODEL_KEYS: [&str; 11] = [
    "text_dim",
    "latent_dim",
    "noise_dim",
    "gen_filters",
    "disc_filters",
    "disc_map_size",
    "disc_channels",
    "fusion_channels",
    "resolution",
    "n_classes",
    "aux_dim",
];

const RUN_KEYS: [&str; 15] = [
    "preset",
    "dataset_root",
    "encoder",
    "encoder_seed",
    "embedding_table",
    "seed",
    "batch_size",
    "epochs",
    "steps",
    "checkpoint_dir",
    "checkpoint_every",
    "log_path",
    "learning_rate",
    "beta1",
    "beta2",
];

/// Keys that select the text encoder; stored in checkpoints.
pub const ENCODER_KEYS: [&str; 3] = ["encoder", "encoder_seed", "embedding_table"];

fn known(key: &str) -> bool {
    MODEL_KEYS.contains(&key) || RUN_KEYS.contains(&key) || key == "epsilon"
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin} line {}: expected key = value", n + 1)))?;
        let key = k.trim().to_string();
        if !known(&key) {
            return Err(Error::Config(format!("{origin} line {}: unknown key {key:?}", n + 1)));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// The merged key/value layers before interpretation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigLayers {
    pub values: BTreeMap<String, String>,
    /// Keys set by something other than the built-in defaults.
    pub explicit: BTreeSet<String>,
}

impl ConfigLayers {
    pub fn gather(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &[(String, String)],
    ) -> Result<Self> {
        let mut layers = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            layers.apply(parse_config_text(&text, &path.display().to_string())?);
        }
        let mut from_env = BTreeMap::new();
        for (name, value) in env {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                if !known(&key) {
                    return Err(Error::Config(format!("environment variable {name} names no config key")));
                }
                from_env.insert(key, value);
            }
        }
        layers.apply(from_env);
        let mut from_flags = BTreeMap::new();
        for (k, v) in flags {
            if !known(k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            from_flags.insert(k.clone(), v.clone());
        }
        layers.apply(from_flags);
        Ok(layers)
    }

    fn apply(&mut self, layer: BTreeMap<String, String>) {
        for (k, v) in layer {
            self.explicit.insert(k.clone());
            self.values.insert(k, v);
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderChoice {
    Hash { seed: u64 },
    Table { path: PathBuf },
}

impl EncoderChoice {
    pub fn from_values(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        match get("encoder").as_deref().unwrap_or("hash") {
            "hash" => {
                let seed = get("encoder_seed")
                    .map(|s| s.parse().map_err(|_| Error::Config(format!("encoder_seed: cannot parse {s:?}"))))
                    .transpose()?
                    .unwrap_or(0);
                Ok(EncoderChoice::Hash { seed })
            }
            "table" => {
                let path = get("embedding_table")
                    .ok_or_else(|| Error::Config("encoder = table needs embedding_table".into()))?;
                Ok(EncoderChoice::Table { path: path.into() })
            }
            other => Err(Error::Config(format!("encoder must be hash or table, got {other:?}"))),
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        match self {
            EncoderChoice::Hash { seed } => vec![
                ("encoder".into(), "hash".into()),
                ("encoder_seed".into(), seed.to_string()),
            ],
            EncoderChoice::Table { path } => vec![
                ("encoder".into(), "table".into()),
                ("embedding_table".into(), path.display().to_string()),
            ],
        }
    }

    /// Builds the backend and checks it produces `text_dim` dimensions.
    pub fn build(&self, text_dim: usize) -> Result<EncoderBackend> {
        let backend = match self {
            EncoderChoice::Hash { seed } => EncoderBackend::hashing(*seed, text_dim),
            EncoderChoice::Table { path } => {
                if !path.exists() {
                    return Err(Error::Config(format!("embedding table {} does not exist", path.display())));
                }
                load_precomputed_table(path)?
            }
        };
        if backend.dim() != text_dim {
            return Err(Error::Config(format!(
                "encoder produces {} dimensions but text_dim is {text_dim}",
                backend.dim()
            )));
        }
        Ok(backend)
    }
}

/// Interpreted configuration for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Model hyper-parameters; `n_classes` is only a default until a
    /// dataset fixes it.
    pub model: ModelConfig,
    pub n_classes: Option<usize>,
    pub dataset_root: Option<PathBuf>,
    pub encoder: EncoderChoice,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: u64,
    pub steps: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub log_path: Option<PathBuf>,
    pub adam: AdamConfig,
}

impl RunConfig {
    pub fn from_layers(layers: &ConfigLayers) -> Result<Self> {
        let mut model = match layers.get("preset").unwrap_or("full") {
            "full" => ModelConfig::default(),
            "desk" => ModelConfig::desk(2),
            "tiny" => ModelConfig::tiny(2),
            other => return Err(Error::Config(format!("preset must be full, desk or tiny, got {other:?}"))),
        };
        let fields: [(&str, &mut usize); 10] = [
            ("text_dim", &mut model.text_dim),
            ("latent_dim", &mut model.latent_dim),
            ("noise_dim", &mut model.noise_dim),
            ("gen_filters", &mut model.gen_filters),
            ("disc_filters", &mut model.disc_filters),
            ("disc_map_size", &mut model.disc_map_size),
            ("disc_channels", &mut model.disc_channels),
            ("fusion_channels", &mut model.fusion_channels),
            ("resolution", &mut model.resolution),
            ("aux_dim", &mut model.aux_dim),
        ];
        for (key, slot) in fields {
            if let Some(v) = layers.parse(key)? {
                *slot = v;
            }
        }
        let n_classes: Option<usize> = layers.parse("n_classes")?;
        if let Some(n) = n_classes {
            model.n_classes = n;
        }
        model.validate()?;

        let adam_default = AdamConfig::default();
        let adam = AdamConfig {
            learning_rate: layers.parse("learning_rate")?.unwrap_or(adam_default.learning_rate),
            beta1: layers.parse("beta1")?.unwrap_or(adam_default.beta1),
            beta2: layers.parse("beta2")?.unwrap_or(adam_default.beta2),
            epsilon: layers.parse("epsilon")?.unwrap_or(adam_default.epsilon),
        };
        if !(adam.learning_rate >= 0.0) || !(0.0..1.0).contains(&adam.beta1) || !(0.0..1.0).contains(&adam.beta2) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }

        let cfg = Self {
            model,
            n_classes,
            dataset_root: layers.get("dataset_root").map(PathBuf::from),
            encoder: EncoderChoice::from_values(|k| layers.get(k).map(str::to_string))?,
            seed: layers.parse("seed")?.unwrap_or(0),
            batch_size: layers.parse("batch_size")?.unwrap_or(crate::training::DEFAULT_BATCH_SIZE),
            epochs: layers.parse("epochs")?.unwrap_or(100),
            steps: layers.parse("steps")?,
            checkpoint_dir: layers.get("checkpoint_dir").map(PathBuf::from),
            checkpoint_every: layers.parse("checkpoint_every")?.unwrap_or(500),
            log_path: layers.get("log_path").map(PathBuf::from),
            adam,
        };
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if cfg.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(cfg)
    }

    /// Total steps: `steps` when set, else `epochs` passes over `n_instances`.
    pub fn total_steps(&self, n_instances: usize) -> u64 {
        self.steps
            .unwrap_or_else(|| (self.epochs * n_instances as u64).div_ceil(self.batch_size as u64))
    }
}
