//! Model, loss and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How class rows of the text embedding are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    /// Causal transformer over `[contexts..., class token]`, final-position pooling.
    Transformer,
    /// Class token plus the mean prompt context; for precomputed embedding tables.
    Additive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Snippet embedding width `C`.
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    /// Feed-forward hidden width as a multiple of the model width.
    pub ffn_ratio: usize,
    pub positional_encoding: bool,

    /// Number of learnable prompt context tokens.
    pub context_len: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_max_len: usize,
    pub text_mode: TextMode,
    pub finetune_text_encoder: bool,

    pub num_queries: usize,
    pub decoder_layers: usize,
    pub theta_bin: f64,
    /// Disabling this passes every snippet through the foreground gate.
    pub representation_masking: bool,

    pub localizer_kernel: usize,
    pub alpha_init: f64,
    pub tau_init: f64,

    pub consistency_dim: usize,
    pub consistency_topk: usize,
    pub theta_c: f64,
    pub theta_m: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            heads: 4,
            encoder_layers: 2,
            ffn_ratio: 2,
            positional_encoding: false,
            context_len: 50,
            text_layers: 2,
            text_heads: 4,
            text_max_len: 77,
            text_mode: TextMode::Transformer,
            finetune_text_encoder: true,
            num_queries: 20,
            decoder_layers: 2,
            theta_bin: 0.5,
            representation_masking: true,
            localizer_kernel: 3,
            alpha_init: 1e-3,
            tau_init: 0.07,
            consistency_dim: 64,
            consistency_topk: 10,
            theta_c: 0.5,
            theta_m: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.ffn_ratio == 0 || self.text_heads == 0 || self.consistency_dim == 0 {
            return bad("ffn_ratio, text_heads and consistency_dim must be at least 1".into());
        }
        if self.num_queries == 0 {
            return bad("num_queries must be at least 1".into());
        }
        if self.context_len + 1 > self.text_max_len {
            return bad(format!(
                "context length {} plus the class token exceeds the text encoder maximum of {}",
                self.context_len, self.text_max_len
            ));
        }
        if self.localizer_kernel.is_multiple_of(2) {
            return bad(format!("localizer_kernel must be odd, got {}", self.localizer_kernel));
        }
        if self.consistency_topk == 0 {
            return bad("consistency_topk must be at least 1".into());
        }
        for (name, v) in [
            ("theta_bin", self.theta_bin),
            ("theta_c", self.theta_c),
            ("theta_m", self.theta_m),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} = {v} must lie in (0, 1)"));
            }
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) || !self.alpha_init.is_finite() {
            return bad("tau_init must be positive and alpha_init finite".into());
        }
        Ok(())
    }
}

/// Switches for the four training objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub class: bool,
    pub mask: bool,
    pub completeness: bool,
    pub consistency: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            class: true,
            mask: true,
            completeness: true,
            consistency: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub seed: u64,
    /// Snippets per video after rescaling.
    pub t_len: usize,
    pub losses: LossToggles,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 15,
            batch_size: 16,
            clip_norm: 1.0,
            weight_decay: 0.0,
            seed: 0,
            t_len: 100,
            losses: LossToggles::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.t_len == 0 {
            return Err(Error::Config("batch_size and t_len must be at least 1".into()));
        }
        if !(self.clip_norm >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("clip_norm and weight_decay must be non-negative".into()));
        }
        self.model.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn context_overflow_rejected() {
        let m = ModelConfig {
            context_len: 77,
            ..ModelConfig::default()
        };
        assert!(matches!(m.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"lr": 0.01, "model": {"num_queries": 4}}"#).unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.model.num_queries, 4);
        assert_eq!(c.model.embed_dim, 64);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
    }
}
