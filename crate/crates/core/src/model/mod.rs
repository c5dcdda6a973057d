//! Window encoder, GRU context model, prediction heads, projector and the
//! downstream classifier, plus the twin-branch container used in
//! pre-training.

mod encoder;
mod gru;
mod heads;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use encoder::{Encoder, EncoderCache, EncoderConfig};
pub use gru::{Gru, GruCache};
pub use heads::{ClassifierCache, LinearClassifier, PredictionHeads, Projector, ProjectorCache};
pub use layers::{Mode, Module, Param, ParamKind};

use crate::error::{CapcError, Result};
use crate::scalar::Scalar;
use crate::seed;

/// Pre-training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Hybrid cross-view + temporal prediction loss over two branches.
    Capc,
    /// Temporal prediction on a single un-augmented branch.
    CpcOnly,
    /// Cross-view loss on projected window embeddings, no context model.
    BtOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Capc => "capc",
            Method::CpcOnly => "cpc-only",
            Method::BtOnly => "bt-only",
        }
    }

    pub fn twin(self) -> bool {
        self != Method::CpcOnly
    }

    pub fn predictive(self) -> bool {
        self != Method::BtOnly
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CapcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "capc" => Ok(Method::Capc),
            "cpc-only" => Ok(Method::CpcOnly),
            "bt-only" => Ok(Method::BtOnly),
            other => Err(CapcError::invalid(format!(
                "unknown method `{other}` (expected capc, cpc-only or bt-only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub hidden_dim: usize,
    pub proj_dim: usize,
    pub horizon: usize,
    pub method: Method,
}

/// One branch of the twin network.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch<F> {
    pub encoder: Encoder<F>,
    pub context: Option<Gru<F>>,
    pub projector: Option<Projector<F>>,
}

impl<F: Scalar> Branch<F> {
    fn new(config: &ModelConfig, rng: &mut seed::Rng) -> Result<Self> {
        let d = config.encoder.embed_dim;
        Ok(Self {
            encoder: Encoder::new(config.encoder, rng)?,
            context: config
                .method
                .predictive()
                .then(|| Gru::new(d, config.hidden_dim, rng)),
            projector: (config.method == Method::BtOnly)
                .then(|| Projector::new(d, config.proj_dim, rng)),
        })
    }
}

impl<F: Scalar> Module<F> for Branch<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.encoder.visit(&layers::join(prefix, "encoder"), f);
        if let Some(g) = &self.context {
            g.visit(&layers::join(prefix, "context"), f);
        }
        if let Some(p) = &self.projector {
            p.visit(&layers::join(prefix, "projector"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.encoder.visit_mut(&layers::join(prefix, "encoder"), f);
        if let Some(g) = &mut self.context {
            g.visit_mut(&layers::join(prefix, "context"), f);
        }
        if let Some(p) = &mut self.projector {
            p.visit_mut(&layers::join(prefix, "projector"), f);
        }
    }
}

/// Branches A and B (independent parameters) and the shared heads.
#[derive(Debug, Clone, PartialEq)]
pub struct CapcModel<F> {
    pub config: ModelConfig,
    pub branch_a: Branch<F>,
    pub branch_b: Option<Branch<F>>,
    pub heads: Option<PredictionHeads<F>>,
}

impl<F: Scalar> CapcModel<F> {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        if config.hidden_dim == 0 || config.proj_dim == 0 {
            return Err(CapcError::invalid("hidden and projection widths must be positive"));
        }
        if config.method.predictive() && config.horizon == 0 {
            return Err(CapcError::invalid("prediction horizon must be >= 1"));
        }
        let mut rng = seed::rng(init_seed, &[0x1417]);
        let branch_a = Branch::new(&config, &mut rng)?;
        let branch_b = if config.method.twin() {
            Some(Branch::new(&config, &mut rng)?)
        } else {
            None
        };
        let heads = config.method.predictive().then(|| {
            PredictionHeads::new(
                config.horizon,
                config.hidden_dim,
                config.encoder.embed_dim,
                &mut rng,
            )
        });
        Ok(Self {
            config,
            branch_a,
            branch_b,
            heads,
        })
    }

    /// The downstream encoder.
    pub fn encoder(&self) -> &Encoder<F> {
        &self.branch_a.encoder
    }
}

impl<F: Scalar> Module<F> for CapcModel<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.branch_a.visit(&layers::join(prefix, "a"), f);
        if let Some(b) = &self.branch_b {
            b.visit(&layers::join(prefix, "b"), f);
        }
        if let Some(h) = &self.heads {
            h.visit(&layers::join(prefix, "heads"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.branch_a.visit_mut(&layers::join(prefix, "a"), f);
        if let Some(b) = &mut self.branch_b {
            b.visit_mut(&layers::join(prefix, "b"), f);
        }
        if let Some(h) = &mut self.heads {
            h.visit_mut(&layers::join(prefix, "heads"), f);
        }
    }
}
