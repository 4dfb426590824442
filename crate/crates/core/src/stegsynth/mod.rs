//! Ground-truth corpus factory. A seeded order-k byte Markov model trained
//! on a bundled text corpus generates covers; a per-context Huffman coder
//! embeds payload bits to produce stegos, with a candidate-pool dial that
//! trades embedding capacity against statistical detectability.

pub mod huffman;

pub use huffman::{Code, HuffmanCodebook, PoolDial};

use crate::datapipe::{Label, LabeledExample};
use crate::rng::{derive_seed, rng_from_seed};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("empty probability distribution")]
    EmptyDistribution,
    #[error("candidate pool {pool} exceeds the distribution support {support}")]
    PoolTooLarge { pool: usize, support: usize },
    #[error("requested {length} bytes but the model order is {order}")]
    TextTooShort { length: usize, order: usize },
    #[error("training corpus too small: {have} bytes, need at least {need}")]
    CorpusTooSmall { have: usize, need: usize },
    #[error("byte {at} continues an unknown context (text not from this model?)")]
    UnknownContext { at: usize },
    #[error("byte {at} is outside the candidate pool (dial or model mismatch)")]
    TokenOutsidePool { at: usize },
    #[error("text ends after {got} extracted bits, {needed} were requested")]
    NotEnoughBits { needed: usize, got: usize },
    #[error("degenerate code of length {len}")]
    CodeTooLong { len: usize },
    #[error("could not embed any bits in {attempts} attempts (text too short or model too deterministic)")]
    NoCapacity { attempts: usize },
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_SMOOTHING: f64 = 0.1;

/// Order-k byte-level Markov model with add-λ smoothing over observed
/// continuations. The transition table is pruned to a closed chain so
/// generation never reaches an unknown context.
#[derive(Debug)]
pub struct MarkovLM {
    order: usize,
    smoothing: f64,
    /// context → continuations sorted by (probability desc, byte asc);
    /// each distribution sums to 1 within 1e-9.
    table: BTreeMap<Box<[u8]>, Vec<(u8, f64)>>,
    /// Start contexts with cumulative frequency weights for seeding a walk.
    start_keys: Vec<Box<[u8]>>,
    start_cum: Vec<f64>,
    /// Byte marginal implied by the (pruned) continuation counts.
    marginal: Vec<f64>,
}

impl MarkovLM {
    /// Counts (k+1)-grams of `corpus` (newlines normalized to spaces),
    /// prunes continuations that would step outside the known context set,
    /// and normalizes with add-λ smoothing.
    pub fn train(corpus: &str, order: usize, smoothing: f64) -> Result<Self> {
        assert!(order >= 1, "order must be at least 1");
        assert!(smoothing >= 0.0, "smoothing must be non-negative");
        let bytes: Vec<u8> = corpus
            .bytes()
            .map(|b| if b == b'\n' { b' ' } else { b })
            .collect();
        if bytes.len() < order + 1 {
            return Err(SynthError::CorpusTooSmall {
                have: bytes.len(),
                need: order + 1,
            });
        }

        let mut counts: HashMap<&[u8], HashMap<u8, u64>> = HashMap::new();
        for w in bytes.windows(order + 1) {
            *counts
                .entry(&w[..order])
                .or_default()
                .entry(w[order])
                .or_insert(0) += 1;
        }

        // Prune to a closed chain: drop continuations whose successor
        // context is unknown, then drop emptied contexts, to fixpoint.
        let mut table: HashMap<Vec<u8>, Vec<(u8, u64)>> = counts
            .into_iter()
            .map(|(ctx, cont)| {
                let mut v: Vec<(u8, u64)> = cont.into_iter().collect();
                v.sort_unstable_by_key(|&(b, _)| b);
                (ctx.to_vec(), v)
            })
            .collect();
        loop {
            let keys: std::collections::HashSet<Vec<u8>> = table.keys().cloned().collect();
            let mut changed = false;
            for (ctx, cont) in table.iter_mut() {
                let before = cont.len();
                cont.retain(|&(b, _)| {
                    let mut next = ctx[1..].to_vec();
                    next.push(b);
                    keys.contains(&next)
                });
                changed |= cont.len() != before;
            }
            let before = table.len();
            table.retain(|_, cont| !cont.is_empty());
            changed |= table.len() != before;
            if !changed {
                break;
            }
        }
        if table.is_empty() {
            return Err(SynthError::CorpusTooSmall {
                have: bytes.len(),
                need: order + 1,
            });
        }

        let mut marginal = vec![0.0f64; 256];
        let mut grand_total = 0.0f64;
        let mut start_keys = Vec::with_capacity(table.len());
        let mut start_cum = Vec::with_capacity(table.len());
        let mut acc = 0.0f64;
        let mut normalized: BTreeMap<Box<[u8]>, Vec<(u8, f64)>> = BTreeMap::new();
        let ordered: BTreeMap<Vec<u8>, Vec<(u8, u64)>> = table.into_iter().collect();
        for (ctx, cont) in ordered {
            let total: u64 = cont.iter().map(|&(_, c)| c).sum();
            let m = cont.len() as f64;
            let denom = total as f64 + smoothing * m;
            let mut probs: Vec<(u8, f64)> = cont
                .iter()
                .map(|&(b, c)| (b, (c as f64 + smoothing) / denom))
                .collect();
            let sum: f64 = probs.iter().map(|&(_, p)| p).sum();
            for p in &mut probs {
                p.1 /= sum;
            }
            probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for &(b, c) in &cont {
                marginal[b as usize] += c as f64;
                grand_total += c as f64;
            }
            acc += total as f64;
            start_keys.push(ctx.clone().into_boxed_slice());
            start_cum.push(acc);
            normalized.insert(ctx.into_boxed_slice(), probs);
        }
        for m in &mut marginal {
            *m /= grand_total;
        }
        for c in &mut start_cum {
            *c /= acc;
        }
        Ok(Self {
            order,
            smoothing,
            table: normalized,
            start_keys,
            start_cum,
            marginal,
        })
    }

    /// The shared model over the bundled seed corpus (order 3, add-0.1).
    pub fn bundled() -> &'static MarkovLM {
        static LM: OnceLock<MarkovLM> = OnceLock::new();
        LM.get_or_init(|| {
            MarkovLM::train(
                include_str!("../../data/seed_corpus.txt"),
                DEFAULT_ORDER,
                DEFAULT_SMOOTHING,
            )
            .expect("bundled corpus trains")
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// Conditional distribution at `ctx`, sorted by (prob desc, byte asc).
    pub fn conditional(&self, ctx: &[u8]) -> Option<&[(u8, f64)]> {
        self.table.get(ctx).map(|v| v.as_slice())
    }

    pub fn contexts(&self) -> impl Iterator<Item = (&[u8], &[(u8, f64)])> {
        self.table.iter().map(|(k, v)| (k.as_ref(), v.as_slice()))
    }

    /// Byte marginal implied by the pruned continuation counts.
    pub fn marginal(&self) -> &[f64] {
        &self.marginal
    }

    fn sample_start(&self, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let u: f64 = rng.gen_range(0.0..1.0);
        let i = self.start_cum.partition_point(|&c| c < u);
        self.start_keys[i.min(self.start_keys.len() - 1)].to_vec()
    }

    fn sample_next(&self, ctx: &[u8], rng: &mut ChaCha8Rng) -> Result<u8> {
        let dist = self
            .conditional(ctx)
            .ok_or(SynthError::UnknownContext { at: 0 })?;
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        for &(b, p) in dist {
            acc += p;
            if u < acc {
                return Ok(b);
            }
        }
        Ok(dist.last().expect("nonempty distribution").0)
    }
}

/// `length` bytes from the model: a frequency-weighted start context
/// followed by conditional sampling. Deterministic given the seed.
pub fn sample_cover(lm: &MarkovLM, length: usize, seed: u64) -> Result<String> {
    if length < lm.order() {
        return Err(SynthError::TextTooShort {
            length,
            order: lm.order(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let mut out = lm.sample_start(&mut rng);
    while out.len() < length {
        let next = lm.sample_next(&out[out.len() - lm.order()..], &mut rng)?;
        out.push(next);
    }
    Ok(String::from_utf8(out).expect("corpus is ASCII"))
}

/// One synthesized stego text with its embedding bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StegoRecord {
    pub text: String,
    pub bits_embedded: usize,
    pub token_count: usize,
    /// Embedding rate: bits per emitted token (byte).
    pub bpw: f64,
}

/// Generates `length` bytes, steering each step's token choice by the
/// payload bits through a per-context Huffman codebook restricted to the
/// dial's candidate pool. Once the bits run out (the last code is
/// flush-padded with zeros) the walk continues as plain sampling.
pub fn embed(
    lm: &MarkovLM,
    bits: &[bool],
    length: usize,
    dial: PoolDial,
    seed: u64,
) -> Result<StegoRecord> {
    if length < lm.order() {
        return Err(SynthError::TextTooShort {
            length,
            order: lm.order(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let mut out = lm.sample_start(&mut rng);
    let mut pos = 0usize;
    while out.len() < length {
        let ctx_start = out.len() - lm.order();
        let next = if pos < bits.len() {
            let dist = lm
                .conditional(&out[ctx_start..])
                .ok_or(SynthError::UnknownContext { at: out.len() })?;
            let pool = dial.pool_for_support(dist.len());
            let book = HuffmanCodebook::build_pool(dist, pool)?;
            let (token, used) = book.decode_padded(&bits[pos..]);
            pos += used;
            token
        } else {
            lm.sample_next(&out[ctx_start..], &mut rng)?
        };
        out.push(next);
    }
    Ok(StegoRecord {
        text: String::from_utf8(out).expect("corpus is ASCII"),
        bits_embedded: pos,
        token_count: length,
        bpw: pos as f64 / length as f64,
    })
}

/// Inverts [`embed`]: replays the codebook construction along `text` and
/// concatenates the code of each emitted token until `bit_count` bits are
/// recovered. Requires the same model and dial that produced the text.
pub fn extract(lm: &MarkovLM, text: &str, bit_count: usize, dial: PoolDial) -> Result<Vec<bool>> {
    let bytes = text.as_bytes();
    let k = lm.order();
    if bytes.len() < k {
        return Err(SynthError::TextTooShort {
            length: bytes.len(),
            order: k,
        });
    }
    let mut acc: Vec<bool> = Vec::with_capacity(bit_count);
    let mut i = k;
    while acc.len() < bit_count {
        if i >= bytes.len() {
            return Err(SynthError::NotEnoughBits {
                needed: bit_count,
                got: acc.len(),
            });
        }
        let dist = lm
            .conditional(&bytes[i - k..i])
            .ok_or(SynthError::UnknownContext { at: i })?;
        let pool = dial.pool_for_support(dist.len());
        let book = HuffmanCodebook::build_pool(dist, pool)?;
        let code = book
            .code_for(bytes[i])
            .ok_or(SynthError::TokenOutsidePool { at: i })?;
        for j in 0..code.len as usize {
            acc.push(code.bit(j));
        }
        i += 1;
    }
    acc.truncate(bit_count);
    Ok(acc)
}

/// Everything needed to synthesize one labeled corpus deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_covers: usize,
    pub n_stegos: usize,
    /// Text length range in bytes, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    pub dial: PoolDial,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_covers: 1000,
            n_stegos: 1000,
            min_len: 48,
            max_len: 96,
            dial: PoolDial::Exp(1),
            seed: 0,
        }
    }
}

pub const COVER_SOURCE: &str = "markov3";

/// Synthesizes `(covers, stegos)`. Covers carry bpw 0; every stego embeds
/// at least one bit (payload bits are drawn long enough to steer the whole
/// text). Byte-identical across reruns with the same spec.
pub fn synthesize(lm: &MarkovLM, spec: &SynthSpec) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    assert!(spec.min_len >= lm.order() && spec.min_len <= spec.max_len);
    let stego_source = format!("hc-{}", spec.dial.tag());
    let mut covers = Vec::with_capacity(spec.n_covers);
    for i in 0..spec.n_covers as u64 {
        let mut rng = rng_from_seed(derive_seed(spec.seed, "cover-len", i));
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let text = sample_cover(lm, len, derive_seed(spec.seed, "cover", i))?;
        covers.push(LabeledExample {
            text,
            label: Label::Cover,
            source: COVER_SOURCE.to_owned(),
            bpw: 0.0,
        });
    }
    let mut stegos = Vec::with_capacity(spec.n_stegos);
    for i in 0..spec.n_stegos as u64 {
        let mut record = None;
        for attempt in 0..8u64 {
            let salt = i + attempt * 0x0100_0000_0000;
            let mut rng = rng_from_seed(derive_seed(spec.seed, "stego-len", salt));
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let mut bits_rng = rng_from_seed(derive_seed(spec.seed, "payload", salt));
            let bits: Vec<bool> = (0..len * 8).map(|_| bits_rng.gen()).collect();
            let r = embed(lm, &bits, len, spec.dial, derive_seed(spec.seed, "stego", salt))?;
            if r.bits_embedded > 0 {
                record = Some(r);
                break;
            }
        }
        let r = record.ok_or(SynthError::NoCapacity { attempts: 8 })?;
        stegos.push(LabeledExample {
            text: r.text,
            label: Label::Stego,
            source: stego_source.clone(),
            bpw: r.bpw,
        });
    }
    Ok((covers, stegos))
}
