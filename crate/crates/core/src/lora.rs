//! Low-rank adaptation of frozen weight matrices.
//!
//! A base matrix `W0` stays frozen; training touches only a rank-`r` delta
//! held as two small factors. With activations as row vectors, a linear
//! layer computes `y = x * W0`, and the adapted layer computes
//!
//! ```text
//! y = x * W0 + (alpha / r) * ((drop(x) * A') * B')
//! ```
//!
//! where `A'` is `[d_in x r]` (Gaussian init, variance `1/r`) and `B'` is
//! `[r x d_out]` (zero init). Zero `B'` makes a freshly attached adapter an
//! exact no-op, and merging collapses the delta back into a single matrix.

use crate::numerics::{gemm, Scalar, Tensor};
use crate::rng::rng_from_seed;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("rank {r} too large for a {d_in}x{d_out} base (must be <= {max})")]
    RankTooLarge {
        r: usize,
        d_in: usize,
        d_out: usize,
        max: usize,
    },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("scale alpha/r = {0} must be finite and positive")]
    BadScale(f64),
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropout(f64),
}

/// Attention projections an adapter can target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttnProj {
    Query,
    Key,
    Value,
    Output,
}

/// Adapter hyperparameters. Defaults follow common practice: rank 64 with
/// `alpha` twice the rank, 0.5 adapter dropout, query/value targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub r: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub targets: BTreeSet<AttnProj>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 64,
            lora_alpha: 128.0,
            lora_dropout: 0.5,
            targets: [AttnProj::Query, AttnProj::Value].into_iter().collect(),
        }
    }
}

impl LoraConfig {
    pub fn with_rank(r: usize) -> Self {
        Self {
            r,
            lora_alpha: 2.0 * r as f64,
            ..Self::default()
        }
    }

    pub fn scale(&self) -> f64 {
        self.lora_alpha / self.r as f64
    }

    pub fn validate(&self) -> Result<(), LoraError> {
        if self.r == 0 {
            return Err(LoraError::ZeroRank);
        }
        let s = self.scale();
        if !(s.is_finite() && s > 0.0) {
            return Err(LoraError::BadScale(s));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(LoraError::BadDropout(self.lora_dropout));
        }
        Ok(())
    }
}

/// Trainable low-rank delta attached to one frozen base matrix.
#[derive(Debug, Clone)]
pub struct LoraAdapter<S: Scalar> {
    /// `[d_in x r]`, the transpose of the classic down-projection; Gaussian
    /// init with variance `1/r`.
    pub a_t: Tensor<S>,
    /// `[r x d_out]`, the transpose of the classic up-projection; zero init
    /// so the adapter starts as an exact identity on the base.
    pub b_t: Tensor<S>,
    pub scale: f64,
    pub dropout: f64,
    pub r: usize,
}

impl<S: Scalar> LoraAdapter<S> {
    /// Creates an adapter for a `[d_in x d_out]` base matrix. The rank must
    /// stay well under the base dimensions: `r <= min(d_in, d_out) / 2`.
    pub fn attach(base: &Tensor<S>, cfg: &LoraConfig, seed: u64) -> Result<Self, LoraError> {
        cfg.validate()?;
        let (d_in, d_out) = (base.shape()[0], base.shape()[1]);
        let max = d_in.min(d_out) / 2;
        if cfg.r > max {
            return Err(LoraError::RankTooLarge {
                r: cfg.r,
                d_in,
                d_out,
                max,
            });
        }
        let mut rng = rng_from_seed(seed);
        let std = (1.0 / cfg.r as f64).sqrt();
        let a_t = Tensor::randn(vec![d_in, cfg.r], std, &mut rng).with_grad();
        let b_t = Tensor::zeros(vec![cfg.r, d_out]).with_grad();
        Ok(Self {
            a_t,
            b_t,
            scale: cfg.scale(),
            dropout: cfg.lora_dropout,
            r: cfg.r,
        })
    }

    /// Collapses the adapter into its base: `W0 + scale * (A' * B')`.
    /// Dropout never participates; the merged matrix is inference-ready.
    pub fn merge(&self, base: &Tensor<S>) -> Tensor<S> {
        let (d_in, r) = (self.a_t.shape()[0], self.a_t.shape()[1]);
        let d_out = self.b_t.shape()[1];
        debug_assert_eq!(base.shape(), [d_in, d_out]);
        let mut merged = base.data().to_vec();
        gemm(
            false,
            false,
            d_in,
            r,
            d_out,
            S::from_f64(self.scale),
            self.a_t.data(),
            self.b_t.data(),
            S::one(),
            &mut merged,
        );
        Tensor::matrix(d_in, d_out, merged).expect("merge preserves base shape")
    }

    /// Trainable parameters in this adapter: `d_in*r + r*d_out`.
    pub fn param_count(&self) -> usize {
        self.a_t.numel() + self.b_t.numel()
    }
}
