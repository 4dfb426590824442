//! Reversible byte-level tokenizer shared by both detector modes.
//!
//! Every byte value is its own token; three specials (PAD, BOS, EOS) sit
//! above the byte range. No learned vocabulary means no training artifact
//! to version and an exact round-trip law to test against.

use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
pub const VOCAB_SIZE: usize = 259;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("token id {0} outside vocabulary (size {VOCAB_SIZE})")]
    UnknownId(TokenId),
}

/// Encodes raw bytes; each byte maps to its own id, with optional BOS/EOS
/// sentinels. Specials can never appear inside the payload range.
pub fn encode(text: &[u8], add_bos: bool, add_eos: bool) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(text.len() + 2);
    if add_bos {
        ids.push(BOS);
    }
    ids.extend(text.iter().map(|&b| TokenId::from(b)));
    if add_eos {
        ids.push(EOS);
    }
    ids
}

/// Decodes ids back to bytes. Special tokens are dropped; ids outside the
/// vocabulary are an error.
pub fn decode(ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < 256 {
            out.push(id as u8);
        } else if id as usize >= VOCAB_SIZE {
            return Err(TokenizerError::UnknownId(id));
        }
        // PAD/BOS/EOS: dropped
    }
    Ok(out)
}
