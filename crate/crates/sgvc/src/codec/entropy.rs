//! Entropy coding of integer symbols under Gaussian models.
//!
//! Symbols are coded with a byte-oriented rANS coder over 16-bit probability
//! tables. Each table covers a window around the rounded mean; integers
//! outside the window go through an escape slot followed by 32 raw bits, so
//! any i32 round-trips exactly. Table construction is deterministic from
//! (mu, sigma), which is all the decoder has, so encoder and decoder always
//! agree.

use crate::codec::rate::{window_prob, SIGMA_FLOOR};
use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
const PROB_TOTAL: u32 = 1 << PROB_BITS;
const RANS_L: u64 = 1 << 23;
/// Window half-width cap; outliers beyond it use the escape path.
const MAX_HALF_WIDTH: i64 = 1024;

/// Quantized distribution over a contiguous integer window plus one escape
/// slot at the end.
#[derive(Debug, Clone)]
pub struct SymbolTable {
    pub min_v: i64,
    /// counts per window value, then the escape count; sums to 2^16
    pub counts: Vec<u32>,
    /// cumulative counts, len = counts.len() + 1
    pub cdf: Vec<u32>,
}

impl SymbolTable {
    /// Builds the table for a Gaussian with the given parameters.
    pub fn gaussian(mu: f64, sigma: f64) -> SymbolTable {
        let sigma = sigma.max(SIGMA_FLOOR);
        let center = mu.round() as i64;
        let half = ((5.0 * sigma).ceil() as i64 + 1).clamp(2, MAX_HALF_WIDTH);
        let min_v = center - half;
        let span = (2 * half + 1) as usize;
        let mut counts: Vec<u64> = Vec::with_capacity(span + 1);
        for i in 0..span {
            let v = (min_v + i as i64) as f64;
            let p = window_prob(v, mu, sigma).max(0.0);
            counts.push(((p * PROB_TOTAL as f64).round() as u64).max(1));
        }
        counts.push(1); // escape
        let mut total: u64 = counts.iter().sum();
        if total > PROB_TOTAL as u64 {
            // shave the excess off the largest buckets, largest first
            let mut order: Vec<usize> = (0..span).collect();
            order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
            let mut excess = total - PROB_TOTAL as u64;
            for idx in order {
                if excess == 0 {
                    break;
                }
                let take = excess.min(counts[idx] - 1);
                counts[idx] -= take;
                excess -= take;
            }
            total = PROB_TOTAL as u64;
            debug_assert_eq!(counts.iter().sum::<u64>(), total);
        } else if total < PROB_TOTAL as u64 {
            // give the remainder to the most likely bucket
            let idx = (0..span)
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            counts[idx] += PROB_TOTAL as u64 - total;
        }
        let counts: Vec<u32> = counts.into_iter().map(|c| c as u32).collect();
        let mut cdf = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for c in &counts {
            acc += c;
            cdf.push(acc);
        }
        SymbolTable { min_v, counts, cdf }
    }

    fn span(&self) -> usize {
        self.counts.len() - 1
    }

    /// (cumulative, frequency, escaped?) for a value.
    fn lookup(&self, v: i64) -> (u32, u32, bool) {
        let off = v - self.min_v;
        if off < 0 || off as usize >= self.span() {
            let e = self.span();
            (self.cdf[e], self.counts[e], true)
        } else {
            let i = off as usize;
            (self.cdf[i], self.counts[i], false)
        }
    }

    /// Index of the slot containing cumulative value `cum`.
    fn find(&self, cum: u32) -> usize {
        // binary search over the cdf
        let mut lo = 0usize;
        let mut hi = self.counts.len();
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if self.cdf[mid] <= cum {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

fn zigzag(v: i64) -> u32 {
    let v = v as i32;
    ((v << 1) ^ (v >> 31)) as u32
}

fn unzigzag(u: u32) -> i64 {
    (((u >> 1) as i32) ^ -((u & 1) as i32)) as i64
}

/// Collects (cumulative, frequency) pairs in decode order.
#[derive(Default)]
pub struct OpSink {
    ops: Vec<(u32, u32)>,
}

impl OpSink {
    pub fn new() -> Self {
        OpSink { ops: Vec::new() }
    }

    pub fn push_symbol(&mut self, table: &SymbolTable, v: i64) {
        let (cum, freq, escaped) = table.lookup(v);
        self.ops.push((cum, freq));
        if escaped {
            let z = zigzag(v);
            self.ops.push((z >> 16, 1));
            self.ops.push((z & 0xFFFF, 1));
        }
    }

    /// rANS-encodes all pushed ops. Symbols are folded in reverse so the
    /// decoder reads them forward.
    pub fn encode(self) -> Vec<u8> {
        if self.ops.is_empty() {
            return Vec::new();
        }
        let mut out: Vec<u8> = Vec::new();
        let mut state: u64 = RANS_L;
        for &(cum, freq) in self.ops.iter().rev() {
            debug_assert!(freq > 0);
            let x_max = ((RANS_L >> PROB_BITS) << 8) * freq as u64;
            while state >= x_max {
                out.push((state & 0xFF) as u8);
                state >>= 8;
            }
            state = ((state / freq as u64) << PROB_BITS) + (state % freq as u64) + cum as u64;
        }
        for shift in [0, 8, 16, 24] {
            out.push(((state >> shift) & 0xFF) as u8);
        }
        out.reverse();
        out
    }
}

/// Streaming rANS decoder over a byte slice.
pub struct RansDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    state: u64,
}

impl<'a> RansDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Ok(RansDecoder {
                bytes,
                pos: 0,
                state: RANS_L,
            });
        }
        if bytes.len() < 4 {
            return Err(Error::container("entropy payload shorter than coder state"));
        }
        let state = ((bytes[0] as u64) << 24)
            | ((bytes[1] as u64) << 16)
            | ((bytes[2] as u64) << 8)
            | bytes[3] as u64;
        Ok(RansDecoder {
            bytes,
            pos: 4,
            state,
        })
    }

    fn pull(&mut self, cum: u32, freq: u32) -> Result<u32> {
        let mask = (PROB_TOTAL - 1) as u64;
        let slot = (self.state & mask) as u32;
        self.state = freq as u64 * (self.state >> PROB_BITS) + (self.state & mask) - cum as u64;
        while self.state < RANS_L {
            if self.pos >= self.bytes.len() {
                return Err(Error::container("entropy payload exhausted mid-stream"));
            }
            self.state = (self.state << 8) | self.bytes[self.pos] as u64;
            self.pos += 1;
        }
        Ok(slot)
    }

    fn peek_slot(&self) -> u32 {
        (self.state & (PROB_TOTAL - 1) as u64) as u32
    }

    pub fn decode_symbol(&mut self, table: &SymbolTable) -> Result<i64> {
        let slot = self.peek_slot();
        let idx = table.find(slot);
        let cum = table.cdf[idx];
        let freq = table.counts[idx];
        self.pull(cum, freq)?;
        if idx == table.span() {
            // escape: two raw 16-bit halves
            let hi = self.pull_raw()?;
            let lo = self.pull_raw()?;
            Ok(unzigzag((hi << 16) | lo))
        } else {
            Ok(table.min_v + idx as i64)
        }
    }

    fn pull_raw(&mut self) -> Result<u32> {
        let slot = self.peek_slot();
        self.pull(slot, 1)?;
        Ok(slot)
    }

    /// True when the stream has been fully consumed and the coder is back in
    /// its initial state.
    pub fn finished(&self) -> bool {
        self.pos == self.bytes.len() && self.state == RANS_L
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn table_counts_sum_to_total() {
        for (mu, sigma) in [(0.0, 1.0), (3.7, 0.2), (-100.5, 25.0), (0.0, 500.0)] {
            let t = SymbolTable::gaussian(mu, sigma);
            let total: u64 = t.counts.iter().map(|c| *c as u64).sum();
            assert_eq!(total, PROB_TOTAL as u64, "mu={mu} sigma={sigma}");
            assert!(t.counts.iter().all(|c| *c >= 1));
        }
    }

    #[test]
    fn empty_stream_roundtrips() {
        let sink = OpSink::new();
        let bytes = sink.encode();
        assert!(bytes.is_empty());
        let dec = RansDecoder::new(&bytes).unwrap();
        assert!(dec.finished());
    }

    #[test]
    fn gaussian_symbols_roundtrip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for trial in 0..50 {
            let mu = rng.gen_range(-8.0..8.0);
            let sigma = rng.gen_range(0.05..10.0f64);
            let table = SymbolTable::gaussian(mu, sigma);
            let normal = Normal::new(mu, sigma).unwrap();
            let symbols: Vec<i64> = (0..500)
                .map(|_| normal.sample(&mut rng).round() as i64)
                .collect();
            let mut sink = OpSink::new();
            for &s in &symbols {
                sink.push_symbol(&table, s);
            }
            let bytes = sink.encode();
            let mut dec = RansDecoder::new(&bytes).unwrap();
            for &s in &symbols {
                assert_eq!(dec.decode_symbol(&table).unwrap(), s, "trial {trial}");
            }
            assert!(dec.finished());
        }
    }

    #[test]
    fn extreme_outliers_use_escape_and_roundtrip() {
        let table = SymbolTable::gaussian(0.0, 0.5);
        let symbols: Vec<i64> = vec![0, 1, -2, 1_000_000, -2_000_000, i32::MAX as i64, i32::MIN as i64, 3];
        let mut sink = OpSink::new();
        for &s in &symbols {
            sink.push_symbol(&table, s);
        }
        let bytes = sink.encode();
        let mut dec = RansDecoder::new(&bytes).unwrap();
        for &s in &symbols {
            assert_eq!(dec.decode_symbol(&table).unwrap(), s);
        }
        assert!(dec.finished());
    }

    #[test]
    fn payload_tracks_information_content() {
        // symbols drawn from the model they are coded with
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mu = 0.0;
        let sigma = 2.0;
        let table = SymbolTable::gaussian(mu, sigma);
        let normal = Normal::new(mu, sigma).unwrap();
        let symbols: Vec<i64> = (0..5000)
            .map(|_| normal.sample(&mut rng).round() as i64)
            .collect();
        let est_bits: f64 = symbols
            .iter()
            .map(|&s| crate::codec::rate::symbol_bits(s as f64, mu, sigma))
            .sum();
        let mut sink = OpSink::new();
        for &s in &symbols {
            sink.push_symbol(&table, s);
        }
        let bytes = sink.encode();
        let actual_bits = (bytes.len() * 8) as f64;
        assert!(
            actual_bits <= est_bits * 1.02 + 256.0,
            "actual {actual_bits} vs estimate {est_bits}"
        );
    }

    #[test]
    fn all_zero_symbols_with_tight_model_cost_almost_nothing() {
        let table = SymbolTable::gaussian(0.0, SIGMA_FLOOR);
        let mut sink = OpSink::new();
        for _ in 0..1000 {
            sink.push_symbol(&table, 0);
        }
        let bytes = sink.encode();
        assert!(bytes.len() <= 16, "{} bytes", bytes.len());
        let mut dec = RansDecoder::new(&bytes).unwrap();
        for _ in 0..1000 {
            assert_eq!(dec.decode_symbol(&table).unwrap(), 0);
        }
    }
}
