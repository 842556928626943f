//! Carry-propagating range coder with a 64-bit state and 16-bit frequencies.
//!
//! The algorithm is byte-wise LZMA-style renormalization generalized to a
//! 64-bit low/range pair: the encoder stages one cache byte plus a run of
//! pending 0xFF bytes so that a carry out of the low register can still
//! propagate into logically emitted bytes. Streams start with a single zero
//! byte (the initial cache) and end with a fixed 9-byte flush; an empty
//! symbol sequence therefore codes to exactly 9 bytes.
//!
//! Output is byte-identical to the pure-Python reference coder shipped with
//! the companion package; the `golden` test pins that equivalence.

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;
const TOP: u64 = 1 << 56;
const CACHE_THRESHOLD: u64 = 0xFF << 56;
const FLUSH_BYTES: usize = 9;

#[derive(Debug, PartialEq, Eq)]
pub enum CoderError {
    /// Symbol interval is empty or outside the 16-bit total.
    InvalidInterval,
    /// Table is structurally unusable (zero-width bin reached while decoding).
    InvalidTable,
    /// Coded stream ended before all symbols were recovered.
    Exhausted { position: usize },
}

pub struct Encoder {
    low: u64,
    carry: bool,
    range: u64,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder {
            low: 0,
            carry: false,
            range: u64::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.carry || self.low < CACHE_THRESHOLD {
            let carry_byte = self.carry as u8;
            let mut b = self.cache;
            for _ in 0..self.cache_size {
                self.out.push(b.wrapping_add(carry_byte));
                b = 0xFF;
            }
            self.cache_size = 0;
            self.cache = ((self.low >> 56) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low <<= 8;
        self.carry = false;
    }

    /// Narrow the interval to [cum_lo, cum_hi) / 2^16 of the current range.
    pub fn encode(&mut self, cum_lo: u32, cum_hi: u32) -> Result<(), CoderError> {
        if cum_lo >= cum_hi || cum_hi > FREQ_TOTAL {
            return Err(CoderError::InvalidInterval);
        }
        let r = self.range >> FREQ_BITS;
        let (low, overflow) = self.low.overflowing_add(r * cum_lo as u64);
        self.low = low;
        if overflow {
            self.carry = true;
        }
        self.range = r * (cum_hi - cum_lo) as u64;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..FLUSH_BYTES {
            self.shift_low();
        }
        self.out
    }
}

pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u64,
    code: u64,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, CoderError> {
        let mut dec = Decoder {
            data,
            pos: 0,
            range: u64::MAX,
            code: 0,
        };
        for _ in 0..FLUSH_BYTES {
            let b = dec.next_byte()?;
            dec.code = (dec.code << 8) | b as u64;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8, CoderError> {
        if self.pos >= self.data.len() {
            return Err(CoderError::Exhausted { position: self.pos });
        }
        let b = self.data[self.pos];
        self.pos += 1;
        Ok(b)
    }

    /// Decode one symbol index against a strictly increasing CDF
    /// (cdf[0] == 0, cdf[last] == 2^16).
    pub fn decode(&mut self, cdf: &[u32]) -> Result<usize, CoderError> {
        let r = self.range >> FREQ_BITS;
        let mut f = self.code / r;
        if f >= FREQ_TOTAL as u64 {
            f = FREQ_TOTAL as u64 - 1; // only reachable on corrupt input
        }
        let idx = cdf.partition_point(|&c| (c as u64) <= f);
        if idx == 0 || idx >= cdf.len() {
            return Err(CoderError::InvalidTable);
        }
        let sym = idx - 1;
        let width = cdf[sym + 1].saturating_sub(cdf[sym]);
        if width == 0 {
            return Err(CoderError::InvalidTable);
        }
        self.code -= r * cdf[sym] as u64;
        self.range = r * width as u64;
        while self.range < TOP {
            let b = self.next_byte()?;
            self.code = (self.code << 8) | b as u64;
            self.range <<= 8;
        }
        Ok(sym)
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Encode symbol indices, one (cum_lo, cum_hi) interval per symbol.
pub fn encode_intervals(intervals: &[(u32, u32)]) -> Result<Vec<u8>, CoderError> {
    let mut enc = Encoder::new();
    for &(lo, hi) in intervals {
        enc.encode(lo, hi)?;
    }
    Ok(enc.finish())
}

pub mod ffi;

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_cdf(bins: u32) -> Vec<u32> {
        let step = FREQ_TOTAL / bins;
        let mut cdf: Vec<u32> = (0..bins).map(|i| i * step).collect();
        cdf.push(FREQ_TOTAL);
        cdf
    }

    #[test]
    fn empty_stream_is_nine_zero_bytes() {
        let enc = Encoder::new();
        assert_eq!(enc.finish(), vec![0u8; 9]);
    }

    #[test]
    fn binary_roundtrip() {
        let cdf = uniform_cdf(2);
        let symbols: Vec<usize> = (0..64).map(|i| (i * 7 + i / 3) % 2).collect();
        let mut enc = Encoder::new();
        for &s in &symbols {
            enc.encode(cdf[s], cdf[s + 1]).unwrap();
        }
        let data = enc.finish();
        let mut dec = Decoder::new(&data).unwrap();
        for &s in &symbols {
            assert_eq!(dec.decode(&cdf).unwrap(), s);
        }
    }

    #[test]
    fn truncated_stream_errors() {
        let cdf = uniform_cdf(4);
        let mut enc = Encoder::new();
        for s in 0..1000usize {
            enc.encode(cdf[s % 4], cdf[s % 4 + 1]).unwrap();
        }
        let data = enc.finish();
        let cut = &data[..data.len() / 2];
        let mut dec = Decoder::new(cut).unwrap();
        let mut failed = false;
        for _ in 0..1000 {
            match dec.decode(&cdf) {
                Ok(_) => {}
                Err(CoderError::Exhausted { .. }) => {
                    failed = true;
                    break;
                }
                Err(e) => panic!("unexpected error {e:?}"),
            }
        }
        assert!(failed, "truncated stream decoded fully");
    }
}
