//! Minimal pre-norm decoder transformer with per-head weight decomposition.
//!
//! The same weights run in causal (autoregressive) or full-attention
//! (masked-diffusion) mode; every component's residual-stream write is
//! exposed through [`ForwardTrace`], and slot inputs can be intervened on.

mod checkpoint;
mod decode;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use decode::{decode_ar, decode_mdm, decode_mdm_forced, MaskState, UnmaskEvent};
pub use forward::{
    forward, intervene_forward, ForwardTrace, Intervention, InterventionMap,
};
pub(crate) use forward::{run, EdgeOverrideMap, RunSpec, TapedRun};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{MASK_TOKEN, PAD_TOKEN};

/// Epsilon inside every RMS normalization.
pub const RMS_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Causal,
    Full,
}

impl AttentionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionMode::Causal => "causal",
            AttentionMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(AttentionMode::Causal),
            "full" => Ok(AttentionMode::Full),
            _ => Err(Error::Format(format!("unknown attention mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub attention_mode: AttentionMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_head,
            self.d_mlp,
            self.vocab_size,
            self.max_positions,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidParameter(
                "all model dimensions must be >= 1".into(),
            ));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidParameter(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.vocab_size <= MASK_TOKEN.max(PAD_TOKEN) {
            return Err(Error::InvalidParameter(format!(
                "vocab_size {} leaves no room for reserved ids",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w_q: Tensor, // [d_model, d_head]
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor, // [d_head, d_model]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub attn_gain: Tensor, // [d_model]
    pub mlp_gain: Tensor,  // [d_model]
    pub w_in: Tensor,      // [d_model, d_mlp]
    pub w_out: Tensor,     // [d_mlp, d_model]
}

/// Full parameter set shared by the causal and masked-diffusion modes.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub tok_emb: Tensor, // [vocab, d_model]
    pub pos_emb: Tensor, // [max_positions, d_model]
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor, // [d_model]
    pub unembed: Tensor,    // [d_model, vocab]
}

impl Weights {
    /// Gaussian init; residual write projections get the usual depth-scaled
    /// standard deviation so untrained forward passes stay well-conditioned.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0f32, 0.02).expect("std > 0");
        let resid = Normal::new(0.0f32, 0.02 / (2.0 * config.n_layers as f32).sqrt())
            .expect("std > 0");
        let mut fill = |rows: usize, cols: usize, dist: &Normal<f32>, rng: &mut ChaCha8Rng| {
            let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            Tensor::matrix(rows, cols, data).expect("shape consistent")
        };
        let tok_emb = fill(config.vocab_size, config.d_model, &base, &mut rng);
        let pos_emb = fill(config.max_positions, config.d_model, &base, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut heads = Vec::with_capacity(config.n_heads);
            for _ in 0..config.n_heads {
                heads.push(HeadWeights {
                    w_q: fill(config.d_model, config.d_head, &base, &mut rng),
                    w_k: fill(config.d_model, config.d_head, &base, &mut rng),
                    w_v: fill(config.d_model, config.d_head, &base, &mut rng),
                    w_o: fill(config.d_head, config.d_model, &resid, &mut rng),
                });
            }
            layers.push(LayerWeights {
                heads,
                attn_gain: Tensor::vector(vec![1.0; config.d_model]),
                mlp_gain: Tensor::vector(vec![1.0; config.d_model]),
                w_in: fill(config.d_model, config.d_mlp, &base, &mut rng),
                w_out: fill(config.d_mlp, config.d_model, &resid, &mut rng),
            });
        }
        let final_gain = Tensor::vector(vec![1.0; config.d_model]);
        let unembed = fill(config.d_model, config.vocab_size, &base, &mut rng);
        Ok(Weights {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_gain,
            unembed,
        })
    }

    /// All-zero parameters (useful as a degenerate fixture).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let z = |r, c| Tensor::zeros(r, c);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                heads: (0..config.n_heads)
                    .map(|_| HeadWeights {
                        w_q: z(config.d_model, config.d_head),
                        w_k: z(config.d_model, config.d_head),
                        w_v: z(config.d_model, config.d_head),
                        w_o: z(config.d_head, config.d_model),
                    })
                    .collect(),
                attn_gain: Tensor::vector(vec![0.0; config.d_model]),
                mlp_gain: Tensor::vector(vec![0.0; config.d_model]),
                w_in: z(config.d_model, config.d_mlp),
                w_out: z(config.d_mlp, config.d_model),
            })
            .collect();
        Ok(Weights {
            tok_emb: z(config.vocab_size, config.d_model),
            pos_emb: z(config.max_positions, config.d_model),
            layers,
            final_gain: Tensor::vector(vec![0.0; config.d_model]),
            unembed: z(config.d_model, config.vocab_size),
            config,
        })
    }

    /// Canonical (name, tensor) listing; checkpoint order and optimizer state
    /// both follow it.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.w_q"), &head.w_q));
                out.push((format!("layer{l}.head{h}.w_k"), &head.w_k));
                out.push((format!("layer{l}.head{h}.w_v"), &head.w_v));
                out.push((format!("layer{l}.head{h}.w_o"), &head.w_o));
            }
            out.push((format!("layer{l}.attn_gain"), &layer.attn_gain));
            out.push((format!("layer{l}.mlp_gain"), &layer.mlp_gain));
            out.push((format!("layer{l}.w_in"), &layer.w_in));
            out.push((format!("layer{l}.w_out"), &layer.w_out));
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("layer{l}.head{h}.w_q"), &mut head.w_q));
                out.push((format!("layer{l}.head{h}.w_k"), &mut head.w_k));
                out.push((format!("layer{l}.head{h}.w_v"), &mut head.w_v));
                out.push((format!("layer{l}.head{h}.w_o"), &mut head.w_o));
            }
            out.push((format!("layer{l}.attn_gain"), &mut layer.attn_gain));
            out.push((format!("layer{l}.mlp_gain"), &mut layer.mlp_gain));
            out.push((format!("layer{l}.w_in"), &mut layer.w_in));
            out.push((format!("layer{l}.w_out"), &mut layer.w_out));
        }
        out.push(("final_gain".into(), &mut self.final_gain));
        out.push(("unembed".into(), &mut self.unembed));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Same weights with a different attention mode tag.
    pub fn with_mode(mut self, mode: AttentionMode) -> Self {
        self.config.attention_mode = mode;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_mlp: 32,
            vocab_size: 23,
            max_positions: 12,
            attention_mode: mode,
        }
    }

    #[test]
    fn config_rejects_bad_dims() {
        let mut c = tiny_config(AttentionMode::Causal);
        c.d_model = 17;
        assert!(c.validate().is_err());
        let mut c = tiny_config(AttentionMode::Causal);
        c.n_heads = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let c = tiny_config(AttentionMode::Causal);
        let a = Weights::init(c.clone(), 7).unwrap();
        let b = Weights::init(c.clone(), 7).unwrap();
        assert_eq!(a, b);
        let d = Weights::init(c, 8).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn tensor_listing_covers_every_parameter() {
        let c = tiny_config(AttentionMode::Causal);
        let w = Weights::init(c.clone(), 0).unwrap();
        let expected = c.vocab_size * c.d_model
            + c.max_positions * c.d_model
            + c.n_layers
                * (c.n_heads * 4 * c.d_model * c.d_head
                    + 2 * c.d_model
                    + 2 * c.d_model * c.d_mlp)
            + c.d_model
            + c.d_model * c.vocab_size;
        assert_eq!(w.n_params(), expected);
    }
}
