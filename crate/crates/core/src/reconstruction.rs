//! Temporal image recovery from bucket records.
//!
//! Two estimators are provided. The differential ghost-imaging estimator
//! correlates buckets with the transmitted patterns over the ensemble of
//! direct and inverse patterns; it serves both Walsh (WHGI) and random (RSGI)
//! pattern sets. The inverse Walsh-Hadamard transform of the differential
//! buckets `D_i - D_inv_i` (IWHT) is the closed form of the same estimator for
//! Walsh pairs.

use std::collections::BTreeMap;

use crate::acquisition::{AcquisitionPlan, AcquisitionRecord, ShiftAcquisition};
use crate::error::{Error, Result};
use crate::fiber::TemporalImage;
use crate::patterns::{reference_pair, BinaryPatternPair, HadamardMatrix, ReferencePair};

/// Minimum samples accepted by [`snr_estimate`].
pub const MIN_SNR_SAMPLES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Whgi,
    Iwht,
    Rsgi,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Whgi => "whgi",
            Method::Iwht => "iwht",
            Method::Rsgi => "rsgi",
        }
    }

    pub fn uses_random_patterns(self) -> bool {
        matches!(self, Method::Rsgi)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "whgi" => Ok(Method::Whgi),
            "iwht" => Ok(Method::Iwht),
            "rsgi" => Ok(Method::Rsgi),
            other => Err(Error::invalid("method", format!("unknown method `{other}`"))),
        }
    }
}

/// Delay grid and index a reconstruction is placed on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub delay_start: f64,
    pub delay_step: f64,
    pub group_index: f64,
}

impl Frame {
    pub fn for_acquisition(plan: &AcquisitionPlan, group_index: f64, section: usize, shift: usize) -> Self {
        let grid = plan.bit_grid(section, shift);
        Self {
            delay_start: grid.start,
            delay_step: grid.step,
            group_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    /// Reconstructed `gamma * S` samples.
    pub image: TemporalImage,
    /// `false` where the estimator had no pattern energy at that bit.
    pub valid: Vec<bool>,
    pub method: Method,
    /// Transmitted sequences consumed per bit-grid image.
    pub iterations_used: usize,
    pub section: usize,
    /// `None` once shifts have been interleaved.
    pub shift: Option<usize>,
    /// Pixel indices where a new section starts after stitching.
    pub seams: Vec<usize>,
}

/// Running sums of the ensemble averages used by the DGI estimator. Members
/// can be pushed one at a time, so an image is available at any point of
/// the acquisition.
#[derive(Debug, Clone)]
pub struct DgiAccumulator {
    members: usize,
    sum_d: f64,
    sum_r: f64,
    sum_i: Vec<f64>,
    sum_di: Vec<f64>,
    sum_ri: Vec<f64>,
}

impl DgiAccumulator {
    pub fn new(bits: usize) -> Self {
        Self {
            members: 0,
            sum_d: 0.0,
            sum_r: 0.0,
            sum_i: vec![0.0; bits],
            sum_di: vec![0.0; bits],
            sum_ri: vec![0.0; bits],
        }
    }

    pub fn members(&self) -> usize {
        self.members
    }

    /// Adds one transmitted sequence with its bucket `d` and reference `r`.
    pub fn push(&mut self, bits: &[u8], d: f64, r: f64) -> Result<()> {
        if bits.len() != self.sum_i.len() {
            return Err(Error::Shape(format!(
                "ensemble member has {} bits, expected {}",
                bits.len(),
                self.sum_i.len()
            )));
        }
        self.members += 1;
        self.sum_d += d;
        self.sum_r += r;
        for (j, _) in bits.iter().enumerate().filter(|(_, &b)| b == 1) {
            self.sum_i[j] += 1.0;
            self.sum_di[j] += d;
            self.sum_ri[j] += r;
        }
        Ok(())
    }

    /// `<D>/<R> + (<D I> - <D>/<R> <R I>) / <I>^2` per bit; bits never lit in
    /// the ensemble fall back to `<D>/<R>` and are marked invalid.
    pub fn estimate(&self) -> Result<(Vec<f64>, Vec<bool>)> {
        if self.members == 0 {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        let n = self.members as f64;
        let mean_d = self.sum_d / n;
        let mean_r = self.sum_r / n;
        if mean_r == 0.0 {
            return Err(Error::invalid("references", "ensemble carries no light"));
        }
        let ratio = mean_d / mean_r;
        let mut values = Vec::with_capacity(self.sum_i.len());
        let mut valid = Vec::with_capacity(self.sum_i.len());
        for j in 0..self.sum_i.len() {
            let mean_i = self.sum_i[j] / n;
            if mean_i == 0.0 {
                values.push(ratio);
                valid.push(false);
                continue;
            }
            let mean_di = self.sum_di[j] / n;
            let mean_ri = self.sum_ri[j] / n;
            values.push(ratio + (mean_di - ratio * mean_ri) / (mean_i * mean_i));
            valid.push(true);
        }
        Ok((values, valid))
    }
}

fn check_single_acquisition(records: &[AcquisitionRecord]) -> Result<&AcquisitionRecord> {
    let first = records.first().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    if records
        .iter()
        .any(|r| r.section != first.section || r.shift != first.shift || r.frequency_mhz != first.frequency_mhz)
    {
        return Err(Error::Shape("records mix sections, shifts or frequencies".into()));
    }
    Ok(first)
}

/// Differential ghost-imaging reconstruction over the ensemble of every
/// pattern and its inverse. References are expressed in units of one
/// effective pulse so that they share the per-bit scale of the buckets.
pub fn dgi_reconstruct(
    records: &[AcquisitionRecord],
    patterns: &[BinaryPatternPair],
    refs: &[ReferencePair],
    frame: Frame,
    method: Method,
) -> Result<ReconstructionResult> {
    let first = check_single_acquisition(records)?;
    if patterns.len() != refs.len() {
        return Err(Error::Shape(format!(
            "{} patterns but {} references",
            patterns.len(),
            refs.len()
        )));
    }
    let by_row: BTreeMap<usize, usize> = patterns.iter().enumerate().map(|(i, p)| (p.row_index, i)).collect();
    let bits = patterns.first().map(BinaryPatternPair::len).unwrap_or(0);
    let mut acc = DgiAccumulator::new(bits);
    for rec in records {
        let &idx = by_row
            .get(&rec.row_index)
            .ok_or_else(|| Error::Shape(format!("no pattern for row {}", rec.row_index)))?;
        let p = &patterns[idx];
        let pulse = p.pulse_width();
        acc.push(&p.bits, rec.d, refs[idx].r / pulse)?;
        acc.push(&p.inverse_bits, rec.d_inverse, refs[idx].r_inverse / pulse)?;
    }
    let (values, valid) = acc.estimate()?;
    Ok(ReconstructionResult {
        image: TemporalImage {
            values,
            delay_start: frame.delay_start,
            delay_step: frame.delay_step,
            frequency_mhz: first.frequency_mhz,
            group_index: frame.group_index,
        },
        valid,
        method,
        iterations_used: acc.members(),
        section: first.section,
        shift: Some(first.shift),
        seams: Vec::new(),
    })
}

/// In-place unnormalised natural-order Walsh-Hadamard transform, `x <- H x`.
/// `k * 2^k` additions with a fixed evaluation order.
pub fn fwht_in_place(x: &mut [f64]) -> Result<()> {
    let n = x.len();
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::Shape(format!("length {n} is not a power of two >= 2")));
    }
    let mut h = 1;
    while h < n {
        for block in x.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*a, *b);
                *a = u + v;
                *b = u - v;
            }
        }
        h *= 2;
    }
    Ok(())
}

/// `(1 / 2^k) H d` through the fast butterfly.
pub fn iwht(differentials: &[f64]) -> Result<Vec<f64>> {
    let mut out = differentials.to_vec();
    fwht_in_place(&mut out)?;
    let scale = 1.0 / out.len() as f64;
    for v in &mut out {
        *v *= scale;
    }
    Ok(out)
}

/// `(1 / 2^k) H d` as an explicit dense matrix product.
pub fn iwht_dense(differentials: &[f64], k: u32) -> Result<Vec<f64>> {
    let h = HadamardMatrix::new(k)?;
    let mut out = h.apply(differentials)?;
    let scale = 1.0 / h.size() as f64;
    for v in &mut out {
        *v *= scale;
    }
    Ok(out)
}

/// IWHT of the differential buckets, ordered by Walsh row index. `dense`
/// selects the explicit matrix product instead of the butterfly.
pub fn iwht_reconstruct(
    records: &[AcquisitionRecord],
    k: u32,
    frame: Frame,
    dense: bool,
) -> Result<ReconstructionResult> {
    let first = check_single_acquisition(records)?;
    let n = 1usize << k;
    if records.len() != n {
        return Err(Error::Shape(format!("{} records for a 2^{k} transform", records.len())));
    }
    let mut diffs = vec![f64::NAN; n];
    for r in records {
        if r.row_index >= n || !diffs[r.row_index].is_nan() {
            return Err(Error::Shape(format!(
                "row {} missing, repeated or out of range",
                r.row_index
            )));
        }
        diffs[r.row_index] = r.d - r.d_inverse;
    }
    let values = if dense { iwht_dense(&diffs, k)? } else { iwht(&diffs)? };
    Ok(ReconstructionResult {
        valid: vec![true; values.len()],
        image: TemporalImage {
            values,
            delay_start: frame.delay_start,
            delay_step: frame.delay_step,
            frequency_mhz: first.frequency_mhz,
            group_index: frame.group_index,
        },
        method: Method::Iwht,
        iterations_used: 2 * n,
        section: first.section,
        shift: Some(first.shift),
        seams: Vec::new(),
    })
}

/// Merges per-shift images into one grid of spacing `step / shifts`. Output
/// pixel `p` comes from shift `p % shifts`, bit `p / shifts`.
pub fn interleave(mut results: Vec<ReconstructionResult>, shifts: usize) -> Result<ReconstructionResult> {
    if shifts == 0 || results.len() != shifts {
        return Err(Error::Alignment(format!(
            "expected {shifts} shifted images, got {}",
            results.len()
        )));
    }
    results.sort_by_key(|r| r.shift);
    let first = &results[0];
    let len = first.image.len();
    let step = first.image.delay_step;
    let base = first.image.delay_start;
    for (q, r) in results.iter().enumerate() {
        if r.shift != Some(q) {
            return Err(Error::Alignment(format!("shift {q} missing or duplicated")));
        }
        if r.section != first.section
            || r.image.len() != len
            || r.image.frequency_mhz != first.image.frequency_mhz
            || r.image.delay_step != step
        {
            return Err(Error::Alignment(format!(
                "shift {q} does not share section, length, frequency or step"
            )));
        }
        let expected = base + q as f64 * step / shifts as f64;
        if (r.image.delay_start - expected).abs() > 1e-6 * step {
            return Err(Error::Alignment(format!(
                "shift {q} starts at {} s, expected {expected} s",
                r.image.delay_start
            )));
        }
    }
    let mut values = Vec::with_capacity(len * shifts);
    let mut valid = Vec::with_capacity(len * shifts);
    for j in 0..len {
        for r in &results {
            values.push(r.image.values[j]);
            valid.push(r.valid[j]);
        }
    }
    let first = &results[0];
    Ok(ReconstructionResult {
        image: TemporalImage {
            values,
            delay_start: base,
            delay_step: step / shifts as f64,
            frequency_mhz: first.image.frequency_mhz,
            group_index: first.image.group_index,
        },
        valid,
        method: first.method,
        iterations_used: first.iterations_used,
        section: first.section,
        shift: None,
        seams: Vec::new(),
    })
}

/// Concatenates section images in section order. Pixels of a later section
/// that repeat delays already covered by the previous one are dropped.
pub fn stitch_sections(mut results: Vec<ReconstructionResult>) -> Result<ReconstructionResult> {
    if results.is_empty() {
        return Err(Error::MissingSections(vec![0]));
    }
    results.sort_by_key(|r| r.section);
    let last = results.last().map(|r| r.section).unwrap_or(0);
    let present: Vec<usize> = results.iter().map(|r| r.section).collect();
    let missing: Vec<usize> = (0..=last).filter(|m| !present.contains(m)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingSections(missing));
    }
    if present.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Alignment("duplicated section".into()));
    }
    let first = &results[0];
    let step = first.image.delay_step;
    let mut out = first.clone();
    out.seams.clear();
    for r in &results[1..] {
        if r.image.delay_step != step || r.image.frequency_mhz != out.image.frequency_mhz {
            return Err(Error::Alignment(format!("section {} uses a different grid", r.section)));
        }
        let next_delay = out.image.delay(out.image.len());
        let offset = (next_delay - r.image.delay_start) / step;
        let skip = offset.round();
        if (offset - skip).abs() > 1e-6 || skip < 0.0 {
            return Err(Error::Alignment(format!(
                "section {} starts off-grid or leaves a gap",
                r.section
            )));
        }
        let skip = skip as usize;
        if skip >= r.image.len() {
            return Err(Error::Alignment(format!(
                "section {} lies inside its predecessor",
                r.section
            )));
        }
        out.seams.push(out.image.len());
        out.image.values.extend_from_slice(&r.image.values[skip..]);
        out.valid.extend_from_slice(&r.valid[skip..]);
    }
    out.section = 0;
    Ok(out)
}

/// Mean over standard deviation on a region expected to be flat;
/// `+inf` when the region has no spread.
pub fn snr_estimate(image: &TemporalImage, region: std::ops::Range<usize>) -> Result<f64> {
    let end = region.end.min(image.len());
    let start = region.start.min(end);
    let slice = &image.values[start..end];
    if slice.len() < MIN_SNR_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_SNR_SAMPLES,
            got: slice.len(),
        });
    }
    let n = slice.len() as f64;
    let mean = slice.iter().sum::<f64>() / n;
    let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(mean / var.sqrt())
}

/// Least-squares scalar `s` minimising `|a - s b|`.
pub fn fit_scale(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let bb: f64 = b.iter().map(|y| y * y).sum();
    if bb == 0.0 {
        1.0
    } else {
        ab / bb
    }
}

/// `max |a - s b| / max |a|` after one least-squares scale `s`.
pub fn relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    let s = fit_scale(a, b);
    let peak = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dev = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - s * y).abs()));
    if peak == 0.0 {
        dev
    } else {
        dev / peak
    }
}

/// Reconstructs one `(section, shift)` acquisition with `method`.
pub fn reconstruct_acquisition(
    plan: &AcquisitionPlan,
    group_index: f64,
    acq: &ShiftAcquisition,
    patterns: &[BinaryPatternPair],
    method: Method,
) -> Result<ReconstructionResult> {
    let frame = Frame::for_acquisition(plan, group_index, acq.section, acq.shift);
    match method {
        Method::Iwht => iwht_reconstruct(&acq.records, plan.k, frame, false),
        Method::Whgi | Method::Rsgi => {
            let refs: Vec<ReferencePair> = patterns.iter().map(reference_pair).collect();
            dgi_reconstruct(&acq.records, patterns, &refs, frame, method)
        }
    }
}

/// Full image for one frequency: reconstruct each shift, interleave per
/// section, stitch the sections.
pub fn reconstruct_sectioned(
    plan: &AcquisitionPlan,
    group_index: f64,
    acquisitions: &[Vec<ShiftAcquisition>],
    patterns: &[BinaryPatternPair],
    method: Method,
) -> Result<ReconstructionResult> {
    let sections = acquisitions
        .iter()
        .map(|shifts| {
            let per_shift = shifts
                .iter()
                .map(|a| reconstruct_acquisition(plan, group_index, a, patterns, method))
                .collect::<Result<Vec<_>>>()?;
            interleave(per_shift, plan.shifts)
        })
        .collect::<Result<Vec<_>>>()?;
    stitch_sections(sections)
}
