//! Range coding of quantization indices.
//!
//! Probabilities are 16-bit fixed point; the coder keeps a 32-bit state and
//! renormalizes a byte at a time without carry propagation, so the output
//! depends only on integer arithmetic.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::entropy_model::PmfTable;
use crate::error::{NtcError, Result};
use crate::training::NtcModel;

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

/// Largest number of symbols a table may have.
pub const MAX_SUPPORT: usize = 1 << 15;

const TOP: u32 = 1 << 24;
const BOTTOM: u32 = 1 << 16;

/// Integer frequencies of consecutive symbols `lo, lo + 1, ...`, each at
/// least 1 and summing to `PROB_TOTAL`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointPmf {
    lo: i64,
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl FixedPointPmf {
    /// Checked constructor from explicit frequencies.
    pub fn from_frequencies(lo: i64, freqs: Vec<u32>) -> Result<Self> {
        if freqs.is_empty() || freqs.contains(&0) {
            return Err(NtcError::InvalidArgument("frequencies must be positive".into()));
        }
        let total: u64 = freqs.iter().map(|&f| f as u64).sum();
        if total != PROB_TOTAL as u64 {
            return Err(NtcError::InvalidArgument(format!(
                "frequencies sum to {total}, expected {PROB_TOTAL}"
            )));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut c = 0;
        cum.push(0);
        for &f in &freqs {
            c += f;
            cum.push(c);
        }
        Ok(FixedPointPmf { lo, freqs, cum })
    }

    pub fn from_table(table: &PmfTable) -> Result<Self> {
        quantize_pmf(table.lo, &table.probs)
    }

    pub fn lo(&self) -> i64 {
        self.lo
    }

    pub fn hi(&self) -> i64 {
        self.lo + self.freqs.len() as i64 - 1
    }

    pub fn frequencies(&self) -> &[u32] {
        &self.freqs
    }

    pub fn clamp_symbol(&self, k: i64) -> i64 {
        k.clamp(self.lo, self.hi())
    }

    fn index(&self, symbol: i64) -> Result<usize> {
        if symbol < self.lo || symbol > self.hi() {
            return Err(NtcError::SymbolOutOfSupport {
                symbol,
                lo: self.lo,
                hi: self.hi(),
            });
        }
        Ok((symbol - self.lo) as usize)
    }

    /// Ideal code length `-log2(freq / 2^16)` of `symbol`.
    pub fn bits(&self, symbol: i64) -> Result<f64> {
        let i = self.index(symbol)?;
        Ok(PROB_BITS as f64 - (self.freqs[i] as f64).log2())
    }

    /// Index of the symbol whose cumulative interval contains `target`.
    fn lookup(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

/// Largest-remainder apportionment of `probs` to `PROB_TOTAL` counts, after
/// which every zero count is raised to 1 by taking from the largest count.
pub fn quantize_pmf(lo: i64, probs: &[f64]) -> Result<FixedPointPmf> {
    let n = probs.len();
    if n == 0 {
        return Err(NtcError::InvalidArgument("empty pmf".into()));
    }
    if n > MAX_SUPPORT {
        return Err(NtcError::SupportOverflow {
            size: n,
            limit: MAX_SUPPORT,
        });
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(NtcError::domain("quantize_pmf", "probabilities must be finite and non-negative"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(NtcError::domain("quantize_pmf", format!("probabilities sum to {sum}")));
    }
    let total = PROB_TOTAL as f64;
    let mut counts = Vec::with_capacity(n);
    let mut remainders = Vec::with_capacity(n);
    for &p in probs {
        let q = p / sum * total;
        let f = q.floor();
        counts.push(f as u32);
        remainders.push(q - f);
    }
    let assigned: u32 = counts.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| remainders[b].total_cmp(&remainders[a]).then(a.cmp(&b)));
    for &i in order.iter().take((PROB_TOTAL - assigned.min(PROB_TOTAL)) as usize) {
        counts[i] += 1;
    }
    for i in 0..n {
        if counts[i] == 0 {
            let donor = (0..n)
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .expect("non-empty");
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }
    FixedPointPmf::from_frequencies(lo, counts)
}

/// Coded bytes; the bit length is always a whole number of bytes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bitstream {
    pub bytes: Vec<u8>,
}

impl Bitstream {
    pub fn bit_len(&self) -> usize {
        8 * self.bytes.len()
    }
}

pub struct Encoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Encoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn encode(&mut self, symbol: i64, pmf: &FixedPointPmf) -> Result<()> {
        let i = pmf.index(symbol)?;
        let r = self.range >> PROB_BITS;
        self.low = self.low.wrapping_add(pmf.cum[i] * r);
        self.range = pmf.freqs[i] * r;
        self.normalize();
        Ok(())
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOTTOM {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOTTOM - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn finish(mut self) -> Bitstream {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        Bitstream { bytes: self.out }
    }
}

pub struct Decoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = Decoder {
            low: 0,
            range: u32::MAX,
            code: 0,
            bytes,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, pmf: &FixedPointPmf) -> Result<i64> {
        let r = self.range >> PROB_BITS;
        let target = self.code.wrapping_sub(self.low) / r;
        if target >= PROB_TOTAL {
            return Err(NtcError::CorruptStream("code value outside the coding interval".into()));
        }
        let i = pmf.lookup(target);
        self.low = self.low.wrapping_add(pmf.cum[i] * r);
        self.range = pmf.freqs[i] * r;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOTTOM {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOTTOM - 1);
            }
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(pmf.lo + i as i64)
    }

    /// True when no more than the final flush bytes were read past the end.
    pub fn consumed_exactly(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn range_encode(symbols: &[i64], pmfs: &[&FixedPointPmf]) -> Result<Bitstream> {
    if symbols.len() != pmfs.len() {
        return Err(NtcError::dim("range_encode", "one pmf per symbol"));
    }
    let mut enc = Encoder::new();
    for (&s, p) in symbols.iter().zip(pmfs) {
        enc.encode(s, p)?;
    }
    Ok(enc.finish())
}

pub fn range_decode(stream: &Bitstream, pmfs: &[&FixedPointPmf]) -> Result<Vec<i64>> {
    let mut dec = Decoder::new(&stream.bytes);
    let out = pmfs.iter().map(|p| dec.decode(p)).collect::<Result<Vec<_>>>()?;
    if !dec.consumed_exactly() {
        return Err(NtcError::CorruptStream("stream length does not match symbol count".into()));
    }
    Ok(out)
}

/// Sum of ideal code lengths in bits.
pub fn ideal_bits(symbols: &[i64], pmfs: &[&FixedPointPmf]) -> Result<f64> {
    symbols.iter().zip(pmfs).map(|(&s, p)| p.bits(s)).sum()
}

pub const BITSTREAM_MAGIC: &[u8; 4] = b"NTCB";
pub const BITSTREAM_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 8 + 4;

fn hash_u64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Identifier of a model's exact parameters.
pub fn model_hash(model: &NtcModel) -> Result<u64> {
    Ok(hash_u64(&model.to_bytes()?))
}

fn symbols_checksum(symbols: &[i64]) -> u64 {
    let bytes: Vec<u8> = symbols.iter().flat_map(|s| s.to_le_bytes()).collect();
    hash_u64(&bytes)
}

/// Model-side coding state: fixed-point tables at the model offset.
pub struct CodingTables {
    pub pmfs: Vec<FixedPointPmf>,
}

impl CodingTables {
    pub fn new(model: &NtcModel) -> Result<Self> {
        let pmfs = model
            .pmf_tables(&model.offset)?
            .iter()
            .map(FixedPointPmf::from_table)
            .collect::<Result<Vec<_>>>()?;
        Ok(CodingTables { pmfs })
    }

    /// Indices of `x` clamped to the table supports.
    pub fn indices(&self, model: &NtcModel, x: &Tensor) -> Result<Vec<i64>> {
        let m = self.pmfs.len();
        let k = model.encode_indices(x, &model.offset, model.lambda)?;
        Ok(k.iter()
            .enumerate()
            .map(|(i, &v)| self.pmfs[i % m].clamp_symbol(v))
            .collect())
    }

    fn per_symbol(&self, count: usize) -> Vec<&FixedPointPmf> {
        (0..count).map(|i| &self.pmfs[i % self.pmfs.len()]).collect()
    }
}

/// Compresses a batch of vectors `x` (`[B x N]`) into a self-describing
/// byte string: magic `NTCB`, version `u8`, model hash `u64`, vector count
/// `u32`, the range-coded indices, and a trailing `u64` checksum of the
/// indices.
pub fn compress(model: &NtcModel, x: &Tensor) -> Result<Vec<u8>> {
    let tables = CodingTables::new(model)?;
    compress_with(model, &tables, x)
}

pub fn compress_with(model: &NtcModel, tables: &CodingTables, x: &Tensor) -> Result<Vec<u8>> {
    if x.shape().len() != 2 || x.cols() != model.source_dim() {
        return Err(NtcError::dim("compress", format!("input {:?}", x.shape())));
    }
    let count = u32::try_from(x.rows()).map_err(|_| NtcError::InvalidArgument("too many vectors".into()))?;
    let k = tables.indices(model, x)?;
    let stream = range_encode(&k, &tables.per_symbol(k.len()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + stream.bytes.len() + 8);
    out.extend_from_slice(BITSTREAM_MAGIC);
    out.push(BITSTREAM_VERSION);
    out.extend_from_slice(&model_hash(model)?.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&stream.bytes);
    out.extend_from_slice(&symbols_checksum(&k).to_le_bytes());
    Ok(out)
}

/// Decoded indices and reconstructions of a [`compress`] output.
pub fn decompress(model: &NtcModel, bytes: &[u8]) -> Result<Tensor> {
    let tables = CodingTables::new(model)?;
    decompress_with(model, &tables, bytes)
}

pub fn decompress_with(model: &NtcModel, tables: &CodingTables, bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN + 8 || &bytes[..4] != BITSTREAM_MAGIC {
        return Err(NtcError::CorruptStream("missing NTCB header".into()));
    }
    if bytes[4] != BITSTREAM_VERSION {
        return Err(NtcError::CorruptStream(format!("unsupported version {}", bytes[4])));
    }
    let hash = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
    if hash != model_hash(model)? {
        return Err(NtcError::CorruptStream("stream was written with a different model".into()));
    }
    let count = u32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[HEADER_LEN..bytes.len() - 8];
    let checksum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let m = model.latent_dim();
    let stream = Bitstream {
        bytes: payload.to_vec(),
    };
    let k = range_decode(&stream, &tables.per_symbol(count * m))?;
    if symbols_checksum(&k) != checksum {
        return Err(NtcError::CorruptStream("checksum mismatch".into()));
    }
    model.decode_indices(&k, &model.offset, model.lambda)
}

/// Payload bits per vector of a [`compress`] output, excluding header and
/// checksum.
pub fn payload_bits_per_vector(bytes: &[u8]) -> Result<f64> {
    if bytes.len() < HEADER_LEN + 8 {
        return Err(NtcError::CorruptStream("truncated".into()));
    }
    let count = u32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes")) as f64;
    Ok(8.0 * (bytes.len() - HEADER_LEN - 8) as f64 / count.max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_four_symbols() {
        let p = quantize_pmf(-2, &[0.25; 4]).unwrap();
        assert_eq!(p.frequencies(), &[16384; 4]);
        assert_eq!(p.hi(), 1);
    }

    #[test]
    fn floor_of_one() {
        let p = quantize_pmf(0, &[0.999999, 0.000001]).unwrap();
        assert_eq!(p.frequencies(), &[65535, 1]);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(quantize_pmf(0, &[]).is_err());
        assert!(quantize_pmf(0, &[0.5, 0.4]).is_err());
        assert!(matches!(
            quantize_pmf(0, &vec![1.0 / 40000.0; 40000]),
            Err(NtcError::SupportOverflow { .. })
        ));
        assert!(FixedPointPmf::from_frequencies(0, vec![65535, 0, 1]).is_err());
    }

    #[test]
    fn empty_sequence_flushes_at_most_eight_bytes() {
        let s = range_encode(&[], &[]).unwrap();
        assert!(s.bytes.len() <= 8);
        assert!(range_decode(&s, &[]).unwrap().is_empty());
    }

    #[test]
    fn out_of_support_symbol_is_an_error() {
        let p = quantize_pmf(0, &[0.5, 0.5]).unwrap();
        assert!(matches!(
            range_encode(&[2], &[&p]),
            Err(NtcError::SymbolOutOfSupport { symbol: 2, lo: 0, hi: 1 })
        ));
    }

    #[test]
    fn one_count_symbols_round_trip() {
        let p = FixedPointPmf::from_frequencies(0, vec![1, 65533, 1, 1]).unwrap();
        let symbols = vec![0, 3, 2, 0, 0, 1, 3, 3, 2, 1, 0];
        let pm: Vec<&FixedPointPmf> = vec![&p; symbols.len()];
        let s = range_encode(&symbols, &pm).unwrap();
        assert_eq!(range_decode(&s, &pm).unwrap(), symbols);
    }

    proptest! {
        #[test]
        fn round_trip(
            weights in proptest::collection::vec(0.0f64..1.0, 1..40),
            picks in proptest::collection::vec(any::<u16>(), 0..300),
            lo in -50i64..50,
        ) {
            let sum: f64 = weights.iter().sum();
            prop_assume!(sum > 0.0);
            let probs: Vec<f64> = weights.iter().map(|w| w / sum).collect();
            let p = quantize_pmf(lo, &probs).unwrap();
            prop_assert_eq!(p.frequencies().iter().sum::<u32>(), PROB_TOTAL);
            let symbols: Vec<i64> = picks.iter().map(|&v| lo + (v as i64 % probs.len() as i64)).collect();
            let pm = vec![&p; symbols.len()];
            let s = range_encode(&symbols, &pm).unwrap();
            prop_assert_eq!(range_decode(&s, &pm).unwrap(), symbols.clone());
            let ideal = ideal_bits(&symbols, &pm).unwrap();
            prop_assert!(s.bit_len() as f64 >= ideal);
        }
    }
}
