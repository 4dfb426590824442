//! Classification-mode detector: description-free input (BOS + short
//! instruction + payload), one forward pass, and a linear head mapping the
//! pooled feature to two label probabilities.

use crate::datapipe::Label;
use crate::model::{ForwardCtx, Model, ModelError, Result};
use crate::numerics::{Graph, Scalar, Var};
use crate::tokenizer::{self, TokenId, PAD};
use serde::{Deserialize, Serialize};

/// Default instruction — kept short (≤ 16 bytes) because the description
/// section is deleted entirely in this mode.
pub const DEFAULT_CLS_INSTRUCTION: &[u8] = b"classify: ";

/// A rendered classification input: token ids plus the mask separating
/// real tokens from padding. Contains no description section by
/// construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClsInput {
    pub instruction: Vec<u8>,
    pub payload: Vec<u8>,
    pub tokens: Vec<TokenId>,
    pub pad_mask: Vec<bool>,
}

impl ClsInput {
    /// Number of real (non-pad) tokens.
    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    /// Right-pads with PAD up to `len` for batch alignment.
    pub fn pad_to(&mut self, len: usize) -> Result<()> {
        if len < self.tokens.len() {
            return Err(ModelError::Overlength {
                len: self.tokens.len(),
                max: len,
            });
        }
        self.tokens.resize(len, PAD);
        self.pad_mask.resize(len, false);
        Ok(())
    }
}

/// Builds `BOS + instruction + payload` with an all-real pad mask.
/// An empty instruction is allowed: the input is then BOS + payload.
pub fn build_cls_input(instruction: &[u8], payload: &[u8], max_len: usize) -> Result<ClsInput> {
    let mut text = Vec::with_capacity(instruction.len() + payload.len());
    text.extend_from_slice(instruction);
    text.extend_from_slice(payload);
    let tokens = tokenizer::encode(&text, true, false);
    if tokens.len() > max_len {
        return Err(ModelError::Overlength {
            len: tokens.len(),
            max: max_len,
        });
    }
    let pad_mask = vec![true; tokens.len()];
    Ok(ClsInput {
        instruction: instruction.to_vec(),
        payload: payload.to_vec(),
        tokens,
        pad_mask,
    })
}

/// A label decision with its probability pair `[p_cover, p_stego]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub probs: [f64; 2],
}

/// Argmax with ties resolved to cover (index 0): stego wins only when its
/// logit is strictly larger.
pub fn label_from_logits(cover_logit: f64, stego_logit: f64) -> Label {
    if stego_logit > cover_logit {
        Label::Stego
    } else {
        Label::Cover
    }
}

/// One forward pass, softmax over the two logits, argmax with tie → cover.
pub fn predict<S: Scalar>(model: &Model<S>, input: &ClsInput) -> Result<Prediction> {
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::eval();
    let logits =
        model.forward_sequence_classification(&mut g, &input.tokens, &input.pad_mask, &mut ctx)?;
    let value = g.value(logits);
    let l0 = value.data()[0].as_f64();
    let l1 = value.data()[1].as_f64();
    let m = l0.max(l1);
    let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
    let z = e0 + e1;
    Ok(Prediction {
        label: label_from_logits(l0, l1),
        probs: [e0 / z, e1 / z],
    })
}

/// Two-way cross-entropy of the model's logits against `label`.
pub fn cls_loss<S: Scalar>(
    model: &Model<S>,
    g: &mut Graph<S>,
    ctx: &mut ForwardCtx,
    input: &ClsInput,
    label: Label,
) -> Result<Var> {
    let logits = model.forward_sequence_classification(g, &input.tokens, &input.pad_mask, ctx)?;
    Ok(g.cross_entropy_mean(logits, &[label.index()], &[S::one()])?)
}
