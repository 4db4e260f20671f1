//! Experiment file schema (TOML).
//!
//! ```toml
//! model = "cnn"
//!
//! [data]
//! train_images = "data/train-images-idx3-ubyte"
//! train_labels = "data/train-labels-idx1-ubyte"
//! test_images = "data/t10k-images-idx3-ubyte"
//! test_labels = "data/t10k-labels-idx1-ubyte"
//! # train_limit = 20000   # keep only the first N training images
//! # test_limit = 2000     # smoke runs only
//!
//! [federation]
//! k = 5
//! e = 40
//! b = 16
//! lr = 0.05
//! target_accuracy = 0.95
//! max_rounds = 12
//! seeds = [1, 2, 3, 4, 5]
//!
//! [partition]
//! scheme = "iid"            # or "label-pairs" with pairs = [[0, 1], [2, 3], ...]
//!
//! [transport]
//! kind = "sim"              # [transport.link] overrides the default link model
//! # kind = "tcp"; listen = "127.0.0.1:7070"; connect = "127.0.0.1:7070"
//!
//! [output]
//! dir = "out/iid-e40"
//! host_wall_clock = false
//! ```
//!
//! `FEDPI_OUTPUT_DIR` overrides `output.dir`; nothing else is read from the
//! environment.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use fedpi_core::data::{load_mnist, Dataset, PartitionScheme};
use fedpi_core::fedavg::FedConfig;
use fedpi_core::models::ModelKind;
use fedpi_core::transport::LinkModel;
use serde::Deserialize;

pub const OUTPUT_ENV: &str = "FEDPI_OUTPUT_DIR";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_model")]
    pub model: ModelKind,
    pub data: DataConfig,
    pub federation: FederationConfig,
    #[serde(default = "default_partition")]
    pub partition: PartitionScheme,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_model() -> ModelKind {
    ModelKind::Cnn
}

fn default_partition() -> PartitionScheme {
    PartitionScheme::Iid
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub k: usize,
    pub e: usize,
    pub b: usize,
    pub lr: f32,
    pub target_accuracy: f64,
    pub max_rounds: u32,
    pub seeds: Vec<u64>,
    #[serde(default = "yes")]
    pub stop_at_target: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TransportConfig {
    Sim {
        #[serde(default)]
        link: LinkModel,
    },
    Tcp {
        /// Server bind address.
        listen: Option<String>,
        /// Address workers dial.
        connect: Option<String>,
        #[serde(default = "default_accept_s")]
        accept_timeout_s: u64,
        #[serde(default = "default_round_s")]
        round_timeout_s: u64,
    },
}

fn default_accept_s() -> u64 {
    120
}

fn default_round_s() -> u64 {
    600
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig::Sim {
            link: LinkModel::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    /// Fill `wall_ms` in run reports; makes them differ between invocations.
    #[serde(default)]
    pub host_wall_clock: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_out(),
            host_wall_clock: false,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; relative data paths resolve against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.train_images,
            &mut cfg.data.train_labels,
            &mut cfg.data.test_images,
            &mut cfg.data.test_labels,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Ok(dir) = std::env::var(OUTPUT_ENV) {
            cfg.output.dir = PathBuf::from(dir);
        } else if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.fed_config().validate().context("federation")?;
        if self.federation.target_accuracy <= 0.0 {
            bail!("federation.target_accuracy must be greater than 0");
        }
        for (field, p) in [
            ("data.train_images", &self.data.train_images),
            ("data.train_labels", &self.data.train_labels),
            ("data.test_images", &self.data.test_images),
            ("data.test_labels", &self.data.test_labels),
        ] {
            if !p.is_file() {
                bail!("{field}: no such file {}", p.display());
            }
        }
        for (field, limit) in [
            ("data.train_limit", self.data.train_limit),
            ("data.test_limit", self.data.test_limit),
        ] {
            if limit == Some(0) {
                bail!("{field} must be at least 1");
            }
        }
        match &self.transport {
            TransportConfig::Sim { link } => link.validate().context("transport.link")?,
            TransportConfig::Tcp {
                listen, connect, ..
            } => {
                if listen.is_none() && connect.is_none() {
                    bail!("transport: tcp needs `listen` (server) or `connect` (workers)");
                }
            }
        }
        Ok(())
    }

    pub fn fed_config(&self) -> FedConfig {
        let f = &self.federation;
        FedConfig {
            model: self.model,
            k: f.k,
            e: f.e,
            b: f.b,
            lr: f.lr,
            target_accuracy: f.target_accuracy,
            max_rounds: f.max_rounds,
            seeds: f.seeds.clone(),
            partition: self.partition.clone(),
            stop_at_target: f.stop_at_target,
        }
    }

    pub fn load_train(&self) -> Result<Arc<Dataset>> {
        let ds = load_mnist(&self.data.train_images, &self.data.train_labels)?;
        Ok(Arc::new(match self.data.train_limit {
            Some(n) => ds.head(n)?,
            None => ds,
        }))
    }

    pub fn load_test(&self) -> Result<Arc<Dataset>> {
        let ds = load_mnist(&self.data.test_images, &self.data.test_labels)?;
        Ok(Arc::new(match self.data.test_limit {
            Some(n) => ds.head(n)?,
            None => ds,
        }))
    }
}
