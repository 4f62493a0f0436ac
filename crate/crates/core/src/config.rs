use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{KeciError, Result};

/// How relation predictions are supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RelationLossMode {
    /// Cross-entropy of the softmax distribution against one gold class.
    #[default]
    SoftmaxCe,
    /// Per-type sigmoid with binary cross-entropy against multi-hot targets.
    SigmoidBce,
}

/// Model variant. Everything except `Full` removes part of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Initial predictions only; no knowledge graph is built.
    SentContextOnly,
    /// Span states skip the bidirectional GCN and node states skip the
    /// relational GCN.
    FlatAttention,
    NoBigcn,
    NoRgcn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::SentContextOnly,
        Variant::FlatAttention,
        Variant::NoBigcn,
        Variant::NoRgcn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SentContextOnly => "sent_context_only",
            Variant::FlatAttention => "flat_attention",
            Variant::NoBigcn => "no_bigcn",
            Variant::NoRgcn => "no_rgcn",
        }
    }

    pub fn uses_kg(self) -> bool {
        self != Variant::SentContextOnly
    }

    pub fn uses_bigcn(self) -> bool {
        matches!(self, Variant::Full | Variant::NoRgcn)
    }

    pub fn uses_rgcn(self) -> bool {
        matches!(self, Variant::Full | Variant::NoBigcn)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = KeciError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                KeciError::Argument(format!(
                    "unknown variant `{s}` (expected one of {})",
                    Variant::ALL.map(Variant::name).join(", ")
                ))
            })
    }
}

/// Hyperparameters. Missing JSON fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Span and node hidden size.
    pub d: usize,
    pub d_tok: usize,
    pub d_len: usize,
    /// Dimension of pretrained KB entity embeddings.
    pub d_kb: usize,
    pub max_span_len: usize,
    /// Spans kept after pruning, as a fraction of the token count.
    pub prune_ratio: f64,
    pub gcn_layers: usize,
    pub rgcn_layers: usize,
    pub final_loss_weight: f64,
    pub relation_loss_mode: RelationLossMode,
    /// Learning rate of embedding tables.
    pub lr_lower: f64,
    /// Learning rate of every other parameter.
    pub lr_upper: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Training tokens rarer than this map to the unknown token.
    pub min_token_count: usize,
    pub position_encoding: bool,
    /// When false, relation probabilities enter the span GCN as constants.
    pub relation_grad_through_edges: bool,
    /// Share per-relation GCN matrices through this many basis matrices.
    pub bigcn_num_bases: Option<usize>,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
    pub freeze_token_embeddings: bool,
    /// Optional text embedding file used to initialise token rows.
    pub embedding_file: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_tok: 32,
            d_len: 8,
            d_kb: 16,
            max_span_len: 20,
            prune_ratio: 0.5,
            gcn_layers: 2,
            rgcn_layers: 2,
            final_loss_weight: 2.0,
            relation_loss_mode: RelationLossMode::SoftmaxCe,
            lr_lower: 5e-5,
            lr_upper: 2e-4,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            min_token_count: 2,
            position_encoding: false,
            relation_grad_through_edges: true,
            bigcn_num_bases: None,
            grad_clip: None,
            freeze_token_embeddings: false,
            embedding_file: None,
        }
    }
}

impl ModelConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KeciError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| KeciError::Parse {
            source_name: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KeciError::Validation(format!("config: {m}")));
        if [
            self.d,
            self.d_tok,
            self.d_len,
            self.d_kb,
            self.max_span_len,
            self.batch_size,
        ]
        .contains(&0)
        {
            return bad("dimensions, max_span_len and batch_size must be >= 1");
        }
        if !(self.prune_ratio > 0.0 && self.prune_ratio <= 1.0) {
            return bad("prune_ratio must lie in (0, 1]");
        }
        if self.final_loss_weight <= 0.0 || !self.final_loss_weight.is_finite() {
            return bad("final_loss_weight must be positive");
        }
        if !(self.lr_lower > 0.0 && self.lr_upper > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.bigcn_num_bases == Some(0) {
            return bad("bigcn_num_bases must be >= 1");
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        assert_eq!(c.max_span_len, 20);
        assert_eq!(c.prune_ratio, 0.5);
        assert_eq!((c.lr_lower, c.lr_upper), (5e-5, 2e-4));
        assert_eq!((c.batch_size, c.epochs), (32, 50));
        assert_eq!(c.final_loss_weight, 2.0);
        assert_eq!(c.relation_loss_mode, RelationLossMode::SoftmaxCe);
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ModelConfig =
            serde_json::from_str(r#"{"d": 8, "relation_loss_mode": "sigmoid_bce"}"#).unwrap();
        assert_eq!(c.d, 8);
        assert_eq!(c.relation_loss_mode, RelationLossMode::SigmoidBce);
        assert_eq!(c.gcn_layers, 2);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"dd": 8}"#).is_err());
    }

    #[test]
    fn rejects_bad_ratio() {
        let c = ModelConfig {
            prune_ratio: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }
}
