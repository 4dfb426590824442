//! Per-context Huffman codebooks over the top candidates of a conditional
//! distribution. The codebook is rebuilt at every generation step; embedding
//! walks the code tree with payload bits, extraction inverts token → code.

use super::SynthError;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

/// Concealment dial: how many of the most probable candidates stay in the
/// embedding pool. `Exp(h)` keeps the top `2^h`; `Full` keeps the whole
/// support. Smaller pools distort the sampled statistics more and are
/// easier to detect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolDial {
    Full,
    Exp(u32),
}

impl PoolDial {
    /// Effective pool size at a context with the given support.
    pub fn pool_for_support(self, support: usize) -> usize {
        match self {
            PoolDial::Full => support,
            PoolDial::Exp(h) => (1usize << h).min(support),
        }
    }

    /// Short tag for corpus provenance, e.g. `pool2` or `full`.
    pub fn tag(self) -> String {
        match self {
            PoolDial::Full => "full".to_owned(),
            PoolDial::Exp(h) => format!("pool{}", 1u64 << h),
        }
    }
}

impl fmt::Display for PoolDial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolDial::Full => f.write_str("full"),
            PoolDial::Exp(h) => write!(f, "{h}"),
        }
    }
}

impl FromStr for PoolDial {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(PoolDial::Full);
        }
        s.parse::<u32>()
            .map(PoolDial::Exp)
            .map_err(|_| format!("bad dial '{s}': expected 'full' or a pool exponent"))
    }
}

/// One prefix-free code: `len` bits, most-significant first in `bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Code {
    pub bits: u64,
    pub len: u8,
}

impl Code {
    pub fn bit(&self, j: usize) -> bool {
        debug_assert!(j < self.len as usize);
        (self.bits >> (self.len as usize - 1 - j)) & 1 == 1
    }
}

/// Prefix-free code over the top candidates of one conditional
/// distribution, complete over its candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct HuffmanCodebook {
    /// (token, code), in (probability desc, token asc) candidate order.
    codes: Vec<(u8, Code)>,
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem {
    weight: f64,
    seq: u64,
    node: usize,
}

impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.weight
            .total_cmp(&other.weight)
            .then(self.seq.cmp(&other.seq))
    }
}

enum Node {
    Leaf(usize),
    Internal(usize, usize),
}

impl HuffmanCodebook {
    /// Standard Huffman construction over the top-`2^h` candidates by
    /// probability (token id breaks ties), re-normalized. `Full` uses the
    /// whole support. A pool larger than the support is a contract error.
    pub fn build(dist: &[(u8, f64)], dial: PoolDial) -> Result<Self, SynthError> {
        if dist.is_empty() {
            return Err(SynthError::EmptyDistribution);
        }
        if let PoolDial::Exp(h) = dial {
            let pool = 1usize << h;
            if pool > dist.len() {
                return Err(SynthError::PoolTooLarge {
                    pool,
                    support: dist.len(),
                });
            }
        }
        Self::build_pool(dist, dial.pool_for_support(dist.len()))
    }

    /// Construction with an already-clamped pool size (1 ≤ pool ≤ support).
    pub(crate) fn build_pool(dist: &[(u8, f64)], pool: usize) -> Result<Self, SynthError> {
        debug_assert!(pool >= 1 && pool <= dist.len());
        let mut candidates: Vec<(u8, f64)> = dist.to_vec();
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        candidates.truncate(pool);
        let total: f64 = candidates.iter().map(|c| c.1).sum();
        if total <= 0.0 {
            return Err(SynthError::EmptyDistribution);
        }

        if pool == 1 {
            // Degenerate single-candidate pool: zero-bit code.
            return Ok(Self {
                codes: vec![(candidates[0].0, Code { bits: 0, len: 0 })],
            });
        }

        let mut nodes: Vec<Node> = (0..pool).map(Node::Leaf).collect();
        let mut heap: BinaryHeap<Reverse<HeapItem>> = candidates
            .iter()
            .enumerate()
            .map(|(i, &(_, p))| {
                Reverse(HeapItem {
                    weight: p / total,
                    seq: i as u64,
                    node: i,
                })
            })
            .collect();
        let mut seq = pool as u64;
        while heap.len() > 1 {
            let a = heap.pop().expect("len > 1").0;
            let b = heap.pop().expect("len > 1").0;
            let node = nodes.len();
            nodes.push(Node::Internal(a.node, b.node));
            heap.push(Reverse(HeapItem {
                weight: a.weight + b.weight,
                seq,
                node,
            }));
            seq += 1;
        }
        let root = heap.pop().expect("single root").0.node;

        let mut codes = vec![Code { bits: 0, len: 0 }; pool];
        let mut stack = vec![(root, 0u64, 0u8)];
        while let Some((n, bits, len)) = stack.pop() {
            match nodes[n] {
                Node::Leaf(i) => {
                    if len == 0 {
                        return Err(SynthError::CodeTooLong { len: 0 });
                    }
                    codes[i] = Code { bits, len };
                }
                Node::Internal(l, r) => {
                    if len >= 64 {
                        return Err(SynthError::CodeTooLong {
                            len: len as usize + 1,
                        });
                    }
                    stack.push((l, bits << 1, len + 1));
                    stack.push((r, (bits << 1) | 1, len + 1));
                }
            }
        }
        Ok(Self {
            codes: candidates
                .iter()
                .zip(codes)
                .map(|(&(t, _), c)| (t, c))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Candidate tokens with their codes, most probable first.
    pub fn codes(&self) -> &[(u8, Code)] {
        &self.codes
    }

    pub fn code_for(&self, token: u8) -> Option<Code> {
        self.codes
            .iter()
            .find(|&&(t, _)| t == token)
            .map(|&(_, c)| c)
    }

    /// Walks the code tree along `bits`, treating missing bits as 0
    /// (flush padding). Returns the decoded token and how many real bits
    /// were consumed. Completeness guarantees exactly one match.
    pub fn decode_padded(&self, bits: &[bool]) -> (u8, usize) {
        for &(token, code) in &self.codes {
            let len = code.len as usize;
            let matches = (0..len).all(|j| {
                let b = bits.get(j).copied().unwrap_or(false);
                b == code.bit(j)
            });
            if matches {
                return (token, len.min(bits.len()));
            }
        }
        unreachable!("complete prefix-free code always matches a 0-padded stream");
    }

    /// No code is a prefix of another.
    pub fn is_prefix_free(&self) -> bool {
        for (i, &(_, a)) in self.codes.iter().enumerate() {
            for &(_, b) in &self.codes[i + 1..] {
                let n = a.len.min(b.len) as usize;
                if n == 0 {
                    return self.codes.len() == 1;
                }
                if (0..n).all(|j| a.bit(j) == b.bit(j)) {
                    return false;
                }
            }
        }
        true
    }

    /// Kraft sum Σ 2^(−len) as an exact rational scaled by 2^max_len,
    /// returned as (numerator, max_len). Completeness means the numerator
    /// equals 2^max_len.
    pub fn kraft_scaled(&self) -> (u128, u32) {
        let max_len = self.codes.iter().map(|&(_, c)| c.len as u32).max().unwrap_or(0);
        assert!(max_len <= 120, "pathological code length {max_len}");
        let num = self
            .codes
            .iter()
            .map(|&(_, c)| 1u128 << (max_len - c.len as u32))
            .sum();
        (num, max_len)
    }
}
