//! Natural-order Walsh-Hadamard matrices and the binary pulse patterns derived
//! from them.
//!
//! Every transmitted sequence is a row of `2^k` return-to-zero bits. A Walsh row
//! maps `+1 -> 1` and `-1 -> 0`; its inverse pattern is the bitwise complement,
//! so one row yields two transmitted sequences. Random patterns follow the same
//! pair layout so that both estimators consume an identical ensemble shape.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Largest supported order exponent. A dense `2^16 x 2^16` matrix of `i8`
/// already occupies 4 GiB.
pub const MAX_ORDER: u32 = 16;

/// Dense Sylvester-ordered Hadamard matrix with `+1/-1` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HadamardMatrix {
    order: u32,
    size: usize,
    entries: Vec<i8>,
}

impl HadamardMatrix {
    /// Builds `H_{2^k}` by repeated doubling from `H_2 = [[1, 1], [1, -1]]`.
    pub fn new(k: u32) -> Result<Self> {
        check_order(k)?;
        let mut size = 2usize;
        let mut entries: Vec<i8> = vec![1, 1, 1, -1];
        for _ in 1..k {
            let next = size * 2;
            let mut grown = vec![0i8; next * next];
            for r in 0..size {
                let src = &entries[r * size..(r + 1) * size];
                let top = r * next;
                let bottom = (r + size) * next;
                grown[top..top + size].copy_from_slice(src);
                grown[top + size..top + next].copy_from_slice(src);
                grown[bottom..bottom + size].copy_from_slice(src);
                for (dst, &v) in grown[bottom + size..bottom + next].iter_mut().zip(src) {
                    *dst = -v;
                }
            }
            entries = grown;
            size = next;
        }
        Ok(Self {
            order: k,
            size,
            entries,
        })
    }

    pub fn order_exponent(&self) -> u32 {
        self.order
    }

    /// Matrix dimension `2^k`.
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.entries[row * self.size + col]
    }

    pub fn row(&self, row: usize) -> &[i8] {
        &self.entries[row * self.size..(row + 1) * self.size]
    }

    /// Dense product `H x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.size {
            return Err(Error::Shape(format!(
                "vector of length {} against a {}x{} Hadamard matrix",
                x.len(),
                self.size,
                self.size
            )));
        }
        Ok((0..self.size)
            .map(|r| self.row(r).iter().zip(x).map(|(&h, &v)| f64::from(h) * v).sum())
            .collect())
    }
}

/// Convenience wrapper around [`HadamardMatrix::new`].
pub fn hadamard_matrix(k: u32) -> Result<HadamardMatrix> {
    HadamardMatrix::new(k)
}

fn check_order(k: u32) -> Result<()> {
    if (1..=MAX_ORDER).contains(&k) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            what: "order exponent k",
            value: f64::from(k),
            range: format!("[1, {MAX_ORDER}]"),
        })
    }
}

/// One transmitted pattern together with its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPatternPair {
    pub row_index: usize,
    pub bits: Vec<u8>,
    pub inverse_bits: Vec<u8>,
    /// Bit period in seconds.
    pub bit_duration: f64,
    /// Fraction of each bit period occupied by the optical pulse.
    pub duty_cycle: f64,
}

impl BinaryPatternPair {
    fn from_bits(row_index: usize, bits: Vec<u8>, bit_duration: f64, duty_cycle: f64) -> Self {
        let inverse_bits = bits.iter().map(|&b| 1 - b).collect();
        Self {
            row_index,
            bits,
            inverse_bits,
            bit_duration,
            duty_cycle,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Total sequence duration `T = 2^k * bit_duration`.
    pub fn sequence_duration(&self) -> f64 {
        self.bits.len() as f64 * self.bit_duration
    }

    /// Optical pulse width inside one bit.
    pub fn pulse_width(&self) -> f64 {
        self.duty_cycle * self.bit_duration
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Pre-known pulse-on time of a pattern and of its inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePair {
    /// Seconds of light in the direct pattern.
    pub r: f64,
    /// Seconds of light in the inverse pattern.
    pub r_inverse: f64,
}

fn check_timing(bit_duration: f64, duty_cycle: f64) -> Result<()> {
    if !(bit_duration > 0.0 && bit_duration.is_finite()) {
        return Err(Error::invalid("bit_duration", "must be positive"));
    }
    if !(duty_cycle > 0.0 && duty_cycle <= 1.0) {
        return Err(Error::OutOfRange {
            what: "duty_cycle",
            value: duty_cycle,
            range: "(0, 1]".into(),
        });
    }
    Ok(())
}

/// All `2^k` Walsh rows as pattern pairs, row `i` of `H` mapping to pair `i`.
pub fn walsh_pattern_pairs(k: u32, bit_duration: f64, duty_cycle: f64) -> Result<Vec<BinaryPatternPair>> {
    check_timing(bit_duration, duty_cycle)?;
    let h = HadamardMatrix::new(k)?;
    Ok((0..h.size())
        .map(|i| {
            let bits = h.row(i).iter().map(|&v| u8::from(v > 0)).collect();
            BinaryPatternPair::from_bits(i, bits, bit_duration, duty_cycle)
        })
        .collect())
}

/// `count` pairs of independent fair-coin bit rows. Output depends only on
/// `(k, count, seed)`.
pub fn random_pattern_pairs(
    k: u32,
    count: usize,
    seed: u64,
    bit_duration: f64,
    duty_cycle: f64,
) -> Result<Vec<BinaryPatternPair>> {
    check_order(k)?;
    check_timing(bit_duration, duty_cycle)?;
    if count == 0 {
        return Err(Error::invalid("count", "at least one random pattern is required"));
    }
    let len = 1usize << k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|i| {
            let bits = (0..len).map(|_| u8::from(rng.random::<bool>())).collect();
            BinaryPatternPair::from_bits(i, bits, bit_duration, duty_cycle)
        })
        .collect())
}

/// Reference integrals of a pattern pair under return-to-zero encoding.
pub fn reference_pair(pattern: &BinaryPatternPair) -> ReferencePair {
    let ones = pattern.ones();
    let zeros = pattern.len() - ones;
    let pulse = pattern.pulse_width();
    ReferencePair {
        r: ones as f64 * pulse,
        r_inverse: zeros as f64 * pulse,
    }
}

/// Pattern table in text form: a `k=.. dt_ns=.. duty=..` header then one
/// `0`/`1` row per line.
pub fn patterns_to_text(patterns: &[BinaryPatternPair]) -> String {
    let mut out = String::new();
    let Some(first) = patterns.first() else {
        return out;
    };
    let k = first.len().trailing_zeros();
    let dt_ns = (first.bit_duration * 1e15).round() / 1e6;
    let _ = writeln!(out, "k={k} dt_ns={dt_ns} duty={}", first.duty_cycle);
    for p in patterns {
        out.extend(p.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }));
        out.push('\n');
    }
    out
}

/// Inverse of [`patterns_to_text`].
pub fn patterns_from_text(text: &str) -> Result<Vec<BinaryPatternPair>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::PatternParse {
        line: 1,
        reason: "empty input".into(),
    })?;
    let mut k = None;
    let mut dt_ns = None;
    let mut duty = None;
    for field in header.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| Error::PatternParse {
            line: 1,
            reason: format!("malformed header field `{field}`"),
        })?;
        let bad = |_| Error::PatternParse {
            line: 1,
            reason: format!("bad value for `{key}`"),
        };
        match key {
            "k" => k = Some(value.parse::<u32>().map_err(|e| bad(e.to_string()))?),
            "dt_ns" => dt_ns = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "duty" => duty = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            _ => {
                return Err(Error::PatternParse {
                    line: 1,
                    reason: format!("unknown header key `{key}`"),
                })
            }
        }
    }
    let missing = |what: &str| Error::PatternParse {
        line: 1,
        reason: format!("header lacks `{what}`"),
    };
    let k = k.ok_or_else(|| missing("k"))?;
    let bit_duration = dt_ns.ok_or_else(|| missing("dt_ns"))? / 1e9;
    let duty = duty.ok_or_else(|| missing("duty"))?;
    check_order(k)?;
    check_timing(bit_duration, duty)?;
    let len = 1usize << k;

    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bits = line
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(Error::PatternParse {
                    line: idx + 1,
                    reason: format!("unexpected character `{other}`"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        if bits.len() != len {
            return Err(Error::PatternParse {
                line: idx + 1,
                reason: format!("row has {} bits, expected {len}", bits.len()),
            });
        }
        out.push(BinaryPatternPair::from_bits(out.len(), bits, bit_duration, duty));
    }
    Ok(out)
}
