//! Bucket detection chain: optical integration of the fiber response against
//! each transmitted pattern, additive detector noise and digitizer
//! quantization, organised by fiber section and trigger shift.
//!
//! Section `m`, shift `q` samples bit `j` at delay
//! `m * stride + j * dt + q * dt / shifts`, where `stride` is the section
//! length in bits (the sequence length minus any overlap) times `dt`.

use std::io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fiber::{window_length, DelayGrid, FiberProfile, TemporalImage};
use crate::patterns::BinaryPatternPair;

pub const DEFAULT_RESOLUTION_BITS: u32 = 14;
pub const DEFAULT_SHIFTS: usize = 5;
pub const DEFAULT_SMALL_GAIN_THRESHOLD: f64 = 0.01;
/// Detector noise as a fraction of the mean bucket value.
pub const DEFAULT_RELATIVE_NOISE: f64 = 0.005;
/// Clipped fraction above which a warning is raised.
pub const CLIP_WARNING_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DigitizerConfig {
    pub resolution_bits: u32,
    /// Bipolar input range `[-full_scale, full_scale]`, in bucket units.
    pub full_scale: f64,
    /// Standard deviation of additive Gaussian noise before quantization.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DigitizerConfig {
    pub fn new(resolution_bits: u32, full_scale: f64, noise_sigma: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            resolution_bits,
            full_scale,
            noise_sigma,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(8..=24).contains(&self.resolution_bits) {
            return Err(Error::OutOfRange {
                what: "resolution_bits",
                value: f64::from(self.resolution_bits),
                range: "[8, 24]".into(),
            });
        }
        if !(self.full_scale > 0.0 && self.full_scale.is_finite()) {
            return Err(Error::invalid("full_scale", "must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma", "must be non-negative"));
        }
        Ok(())
    }

    /// Quantization step `2 * full_scale / 2^bits`.
    pub fn step(&self) -> f64 {
        2.0 * self.full_scale / (1u64 << self.resolution_bits) as f64
    }

    /// Round to the nearest level; out-of-range inputs are clipped to the
    /// rails and reported.
    pub fn quantize(&self, v: f64) -> (f64, bool) {
        if v > self.full_scale {
            (self.full_scale, true)
        } else if v < -self.full_scale {
            (-self.full_scale, true)
        } else {
            let step = self.step();
            ((v / step).round() * step, false)
        }
    }
}

/// Order in which direct and inverse patterns are transmitted; only the
/// order of noise draws depends on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransmissionOrder {
    /// Pattern `i`, then its inverse, then pattern `i + 1`.
    #[default]
    Interleaved,
    /// Every direct pattern first, then every inverse.
    Blocked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionPlan {
    pub k: u32,
    /// Bit period, seconds.
    pub bit_duration: f64,
    pub duty_cycle: f64,
    pub sections: usize,
    pub shifts: usize,
    /// Bits shared between consecutive sections.
    pub section_overlap: usize,
    pub frequencies: Vec<f64>,
    /// `None` acquires ideal noiseless, unquantized buckets.
    pub digitizer: Option<DigitizerConfig>,
    /// Detector responsivity times amplifier gain.
    pub gamma: f64,
    pub order: TransmissionOrder,
    pub small_gain_threshold: f64,
}

impl AcquisitionPlan {
    /// Single-section plan with the default 5 trigger shifts and an ideal
    /// detector.
    pub fn new(k: u32, bit_duration: f64, duty_cycle: f64) -> Self {
        Self {
            k,
            bit_duration,
            duty_cycle,
            sections: 1,
            shifts: DEFAULT_SHIFTS,
            section_overlap: 0,
            frequencies: Vec::new(),
            digitizer: None,
            gamma: 1.0,
            order: TransmissionOrder::Interleaved,
            small_gain_threshold: DEFAULT_SMALL_GAIN_THRESHOLD,
        }
    }

    pub fn with_sections(mut self, sections: usize) -> Self {
        self.sections = sections;
        self
    }

    pub fn with_shifts(mut self, shifts: usize) -> Self {
        self.shifts = shifts;
        self
    }

    pub fn with_frequencies(mut self, frequencies: Vec<f64>) -> Self {
        self.frequencies = frequencies;
        self
    }

    pub fn with_digitizer(mut self, digitizer: Option<DigitizerConfig>) -> Self {
        self.digitizer = digitizer;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=crate::patterns::MAX_ORDER).contains(&self.k) {
            return Err(Error::OutOfRange {
                what: "k",
                value: f64::from(self.k),
                range: format!("[1, {}]", crate::patterns::MAX_ORDER),
            });
        }
        if !(self.bit_duration > 0.0 && self.bit_duration.is_finite()) {
            return Err(Error::invalid("bit_duration", "must be positive"));
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle <= 1.0) {
            return Err(Error::OutOfRange {
                what: "duty_cycle",
                value: self.duty_cycle,
                range: "(0, 1]".into(),
            });
        }
        if self.sections == 0 {
            return Err(Error::invalid("sections", "must be at least 1"));
        }
        if self.shifts == 0 {
            return Err(Error::invalid("shifts", "must be at least 1"));
        }
        if self.section_overlap >= self.bits_per_sequence() {
            return Err(Error::invalid("section_overlap", "must be shorter than one sequence"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma", "must be positive"));
        }
        if let Some(d) = &self.digitizer {
            d.validate()?;
        }
        Ok(())
    }

    pub fn bits_per_sequence(&self) -> usize {
        1usize << self.k
    }

    /// Sequence duration `T = 2^k * dt`.
    pub fn sequence_duration(&self) -> f64 {
        self.bits_per_sequence() as f64 * self.bit_duration
    }

    /// Digitizer sampling rate `1 / T`, Hz.
    pub fn sample_rate(&self) -> f64 {
        1.0 / self.sequence_duration()
    }

    pub fn pulse_width(&self) -> f64 {
        self.duty_cycle * self.bit_duration
    }

    /// Read-out grid spacing after interleaving, seconds.
    pub fn readout_step(&self) -> f64 {
        self.bit_duration / self.shifts as f64
    }

    /// Sampling rate a single-pulse acquisition needs to reach the same
    /// read-out grid.
    pub fn conventional_sample_rate(&self) -> f64 {
        self.shifts as f64 / self.bit_duration
    }

    /// Two samples per effective pulse.
    pub fn nyquist_sample_rate(&self) -> f64 {
        2.0 / self.pulse_width()
    }

    /// Exact ratio `conventional_sample_rate / sample_rate = shifts * 2^k`.
    pub fn reduction_factor(&self) -> u64 {
        self.shifts as u64 * (1u64 << self.k)
    }

    /// Fiber length addressed by one bit period.
    pub fn bit_length_m(&self, group_index: f64) -> f64 {
        window_length(self.bit_duration, group_index)
    }

    fn stride_bits(&self) -> usize {
        self.bits_per_sequence() - self.section_overlap
    }

    /// Fiber length addressed by all sections together.
    pub fn coverage_m(&self, group_index: f64) -> f64 {
        let bits = self.sections * self.stride_bits() + self.section_overlap;
        bits as f64 * self.bit_length_m(group_index)
    }

    /// Smallest section count whose coverage reaches `fiber_length_m`.
    pub fn required_sections(&self, fiber_length_m: f64, group_index: f64) -> usize {
        let bit_m = self.bit_length_m(group_index);
        let extra_bits = (fiber_length_m / bit_m).ceil() as usize;
        let beyond_first = extra_bits.saturating_sub(self.bits_per_sequence());
        1 + beyond_first.div_ceil(self.stride_bits())
    }

    pub fn check_coverage(&self, fiber: &FiberProfile) -> Result<()> {
        let covered = self.coverage_m(fiber.group_index());
        if covered < fiber.total_length() {
            return Err(Error::Coverage {
                covered_m: covered,
                fiber_m: fiber.total_length(),
                required: self.required_sections(fiber.total_length(), fiber.group_index()),
            });
        }
        Ok(())
    }

    /// Delay of bit 0 of section `m` at shift 0.
    pub fn section_start_delay(&self, section: usize) -> f64 {
        (section * self.stride_bits()) as f64 * self.bit_duration
    }

    /// Per-bit sampling delays of section `m`, shift `q`.
    pub fn bit_grid(&self, section: usize, shift: usize) -> DelayGrid {
        let start = self.section_start_delay(section) + shift as f64 * self.readout_step();
        DelayGrid::new(start, self.bit_duration, self.bits_per_sequence())
    }

    /// Read-out grid of the stitched, interleaved image.
    pub fn readout_grid(&self) -> DelayGrid {
        let bits = self.sections * self.stride_bits() + self.section_overlap;
        DelayGrid::new(0.0, self.readout_step(), bits * self.shifts)
    }
}

/// Smallest `k` whose single sequence covers `fiber_length_m`.
pub fn required_order_single_section(fiber_length_m: f64, bit_duration: f64, group_index: f64) -> u32 {
    let bits = (fiber_length_m / window_length(bit_duration, group_index)).ceil() as u64;
    bits.max(2).next_power_of_two().trailing_zeros()
}

/// One bucket pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionRecord {
    pub row_index: usize,
    pub d: f64,
    pub d_inverse: f64,
    pub section: usize,
    pub shift: usize,
    pub frequency_mhz: f64,
}

/// All bucket pairs of one `(frequency, section, shift)` acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftAcquisition {
    pub frequency_mhz: f64,
    pub section: usize,
    pub shift: usize,
    pub records: Vec<AcquisitionRecord>,
    pub clip_count: usize,
    pub small_gain: f64,
}

/// `(D, D_inv) = gamma * (sum bits * s, sum inverse_bits * s)`.
pub fn integrate_pattern(pattern: &BinaryPatternPair, response: &TemporalImage, gamma: f64) -> Result<(f64, f64)> {
    integrate_samples(pattern, &response.values, gamma)
}

fn integrate_samples(pattern: &BinaryPatternPair, samples: &[f64], gamma: f64) -> Result<(f64, f64)> {
    if pattern.len() != samples.len() {
        return Err(Error::Shape(format!(
            "pattern has {} bits but the response has {} samples",
            pattern.len(),
            samples.len()
        )));
    }
    let mut d = 0.0;
    let mut d_inv = 0.0;
    for (&b, &s) in pattern.bits.iter().zip(samples) {
        if b == 1 {
            d += s;
        } else {
            d_inv += s;
        }
    }
    Ok((gamma * d, gamma * d_inv))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Private noise stream for one `(seed, frequency, section, shift)` tuple.
pub(crate) fn noise_stream(seed: u64, frequency_mhz: f64, section: u64, shift: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ frequency_mhz.to_bits());
    h = splitmix64(h ^ section);
    h = splitmix64(h ^ shift);
    ChaCha8Rng::seed_from_u64(h)
}

fn check_patterns(plan: &AcquisitionPlan, patterns: &[BinaryPatternPair]) -> Result<()> {
    if patterns.is_empty() {
        return Err(Error::invalid("patterns", "no patterns supplied"));
    }
    let n = plan.bits_per_sequence();
    if let Some(p) = patterns.iter().find(|p| p.len() != n) {
        return Err(Error::Shape(format!(
            "pattern {} has {} bits but the plan uses 2^{} = {n}",
            p.row_index,
            p.len(),
            plan.k
        )));
    }
    Ok(())
}

/// Acquires every pattern pair for one section and trigger shift.
pub fn acquire(
    plan: &AcquisitionPlan,
    fiber: &FiberProfile,
    patterns: &[BinaryPatternPair],
    frequency_mhz: f64,
    section: usize,
    shift: usize,
) -> Result<ShiftAcquisition> {
    plan.validate()?;
    check_patterns(plan, patterns)?;
    if shift >= plan.shifts {
        return Err(Error::invalid("shift", format!("{shift} is not below {}", plan.shifts)));
    }
    let window = window_length(plan.pulse_width(), fiber.group_index());
    let small_gain = fiber.small_gain_check(frequency_mhz, window);
    if small_gain > plan.small_gain_threshold {
        log::warn!(
            "relative power transfer {small_gain:.3e} at {frequency_mhz} MHz exceeds the small-gain threshold {}",
            plan.small_gain_threshold
        );
    }

    let response = fiber.conventional_trace(frequency_mhz, plan.pulse_width(), plan.bit_grid(section, shift))?;
    let clean = patterns
        .iter()
        .map(|p| integrate_samples(p, &response.values, plan.gamma))
        .collect::<Result<Vec<_>>>()?;

    let mut clip_count = 0;
    let buckets = match &plan.digitizer {
        None => clean,
        Some(dig) => {
            let mut rng = noise_stream(dig.seed, frequency_mhz, section as u64, shift as u64);
            let mut noisy = clean;
            let mut draw = |v: &mut f64, rng: &mut ChaCha8Rng| {
                let n: f64 = StandardNormal.sample(rng);
                let (q, clipped) = dig.quantize(*v + dig.noise_sigma * n);
                clip_count += usize::from(clipped);
                *v = q;
            };
            match plan.order {
                TransmissionOrder::Interleaved => {
                    for (d, d_inv) in noisy.iter_mut() {
                        draw(d, &mut rng);
                        draw(d_inv, &mut rng);
                    }
                }
                TransmissionOrder::Blocked => {
                    for (d, _) in noisy.iter_mut() {
                        draw(d, &mut rng);
                    }
                    for (_, d_inv) in noisy.iter_mut() {
                        draw(d_inv, &mut rng);
                    }
                }
            }
            noisy
        }
    };
    let total = 2 * patterns.len();
    if clip_count as f64 > CLIP_WARNING_FRACTION * total as f64 {
        log::warn!("{clip_count} of {total} buckets clipped at {frequency_mhz} MHz (section {section}, shift {shift})");
    }

    let records = patterns
        .iter()
        .zip(buckets)
        .map(|(p, (d, d_inverse))| AcquisitionRecord {
            row_index: p.row_index,
            d,
            d_inverse,
            section,
            shift,
            frequency_mhz,
        })
        .collect();
    Ok(ShiftAcquisition {
        frequency_mhz,
        section,
        shift,
        records,
        clip_count,
        small_gain,
    })
}

/// One acquisition per trigger shift `q = 0..shifts`.
pub fn acquire_interleaved(
    plan: &AcquisitionPlan,
    fiber: &FiberProfile,
    patterns: &[BinaryPatternPair],
    frequency_mhz: f64,
    section: usize,
) -> Result<Vec<ShiftAcquisition>> {
    (0..plan.shifts)
        .into_par_iter()
        .map(|q| acquire(plan, fiber, patterns, frequency_mhz, section, q))
        .collect()
}

/// Interleaved acquisitions for every section, after checking that the
/// sections together cover the fiber.
pub fn acquire_sectioned(
    plan: &AcquisitionPlan,
    fiber: &FiberProfile,
    patterns: &[BinaryPatternPair],
    frequency_mhz: f64,
) -> Result<Vec<Vec<ShiftAcquisition>>> {
    plan.validate()?;
    plan.check_coverage(fiber)?;
    (0..plan.sections)
        .into_par_iter()
        .map(|m| acquire_interleaved(plan, fiber, patterns, frequency_mhz, m))
        .collect()
}

/// Mean and maximum noiseless bucket value over every section and shift.
pub fn bucket_statistics(
    plan: &AcquisitionPlan,
    fiber: &FiberProfile,
    patterns: &[BinaryPatternPair],
    frequency_mhz: f64,
) -> Result<(f64, f64)> {
    let ideal = plan.clone().with_digitizer(None);
    let all = acquire_sectioned(&ideal, fiber, patterns, frequency_mhz)?;
    let values: Vec<f64> = all
        .iter()
        .flatten()
        .flat_map(|a| a.records.iter().flat_map(|r| [r.d, r.d_inverse]))
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let max = values.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    Ok((mean, max))
}

/// Frequency, among the segments' Brillouin frequencies, with the largest
/// mean bucket.
pub fn peak_response_frequency(
    plan: &AcquisitionPlan,
    fiber: &FiberProfile,
    patterns: &[BinaryPatternPair],
) -> Result<f64> {
    let mut best = (f64::NEG_INFINITY, fiber.segments()[0].bfs_mhz);
    for s in fiber.segments() {
        let (mean, _) = bucket_statistics(plan, fiber, patterns, s.bfs_mhz)?;
        if mean > best.0 {
            best = (mean, s.bfs_mhz);
        }
    }
    Ok(best.1)
}

/// Digitizer whose noise is `relative_noise` times the mean noiseless bucket
/// at `reference_mhz`, with a full scale leaving headroom above the largest
/// bucket.
pub fn calibrated_digitizer(
    plan: &AcquisitionPlan,
    fiber: &FiberProfile,
    patterns: &[BinaryPatternPair],
    reference_mhz: f64,
    relative_noise: f64,
    resolution_bits: u32,
    seed: u64,
) -> Result<DigitizerConfig> {
    let (mean, max) = bucket_statistics(plan, fiber, patterns, reference_mhz)?;
    let sigma = relative_noise * mean;
    let full_scale = (1.25 * max + 6.0 * sigma).max(f64::MIN_POSITIVE);
    DigitizerConfig::new(resolution_bits, full_scale, sigma, seed)
}

/// Single-pulse comparator on the stitched read-out grid: the noiseless
/// trace plus per-sample digitizer noise reduced by averaging `averages`
/// traces.
pub fn conventional_acquire(
    plan: &AcquisitionPlan,
    fiber: &FiberProfile,
    frequency_mhz: f64,
    averages: usize,
) -> Result<TemporalImage> {
    plan.validate()?;
    if averages == 0 {
        return Err(Error::invalid("averages", "must be at least 1"));
    }
    let mut trace = fiber.conventional_trace(frequency_mhz, plan.pulse_width(), plan.readout_grid())?;
    for v in &mut trace.values {
        *v *= plan.gamma;
    }
    if let Some(dig) = &plan.digitizer {
        let sigma = dig.noise_sigma / (averages as f64).sqrt();
        let mut rng = noise_stream(dig.seed, frequency_mhz, u64::MAX, u64::MAX);
        for v in &mut trace.values {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * n;
        }
    }
    Ok(trace)
}

/// Writes records as `freq_mhz,section,shift,row,D,D_inv` with 9
/// significant digits for the bucket values.
pub fn write_records_csv<W: io::Write>(out: W, records: &[AcquisitionRecord]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["freq_mhz", "section", "shift", "row", "D", "D_inv"])?;
    for r in records {
        w.write_record([
            r.frequency_mhz.to_string(),
            r.section.to_string(),
            r.shift.to_string(),
            r.row_index.to_string(),
            format!("{:.8e}", r.d),
            format!("{:.8e}", r.d_inverse),
        ])?;
    }
    w.flush()
}

pub fn read_records_csv<R: io::Read>(input: R) -> Result<Vec<AcquisitionRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Shape(format!("records header: {e}")))?
        .clone();
    let expected = ["freq_mhz", "section", "shift", "row", "D", "D_inv"];
    if headers.iter().ne(expected) {
        return Err(Error::Shape(format!("unexpected records header {headers:?}")));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Shape(format!("records line {}: {e}", line + 2)))?;
        let field = |i: usize| {
            rec.get(i)
                .ok_or_else(|| Error::Shape(format!("records line {}: missing column {i}", line + 2)))
        };
        let num = |i: usize| -> Result<f64> {
            field(i)?
                .parse::<f64>()
                .map_err(|e| Error::Shape(format!("records line {}: {e}", line + 2)))
        };
        let int = |i: usize| -> Result<usize> {
            field(i)?
                .parse::<usize>()
                .map_err(|e| Error::Shape(format!("records line {}: {e}", line + 2)))
        };
        out.push(AcquisitionRecord {
            frequency_mhz: num(0)?,
            section: int(1)?,
            shift: int(2)?,
            row_index: int(3)?,
            d: num(4)?,
            d_inverse: num(5)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fiber::FiberSegment;
    use crate::patterns::{random_pattern_pairs, walsh_pattern_pairs};

    fn short_plan() -> AcquisitionPlan {
        AcquisitionPlan::new(8, 50e-9, 0.5)
    }

    #[test]
    fn sample_rates_short_and_long() {
        let p = short_plan();
        assert!((p.sample_rate() - 78_125.0).abs() < 1e-6);
        assert!((p.conventional_sample_rate() - 100e6).abs() < 1e-3);
        assert_eq!(p.reduction_factor(), 1280);
        assert!((p.sample_rate() * p.sequence_duration() - 1.0).abs() <= f64::EPSILON);

        let long = AcquisitionPlan::new(7, 100e-9, 0.5);
        assert!((long.sequence_duration() - 12.8e-6).abs() < 1e-18);
        assert!((long.sample_rate() - 78_125.0).abs() < 1e-6);
    }

    #[test]
    fn readout_step_from_shifts() {
        let p = short_plan();
        assert!((p.readout_step() - 10e-9).abs() < 1e-21);
        let m = window_length(p.readout_step(), 1.4682);
        assert!((m - 1.02).abs() < 0.01);
        let long = AcquisitionPlan::new(7, 100e-9, 0.5);
        assert!((long.readout_step() - 20e-9).abs() < 1e-21);
    }

    #[test]
    fn long_fiber_coverage() {
        let fiber = FiberProfile::demo_long();
        let plan = AcquisitionPlan::new(7, 100e-9, 0.5).with_sections(40);
        let covered = plan.coverage_m(fiber.group_index());
        assert!((covered - 40.0 * 128.0 * 10.20952).abs() < 0.1, "{covered}");
        assert!(covered >= 51_000.0);
        plan.check_coverage(&fiber).unwrap();
        assert_eq!(plan.required_sections(fiber.total_length(), fiber.group_index()), 40);

        let short = plan.clone().with_sections(39);
        match short.check_coverage(&fiber) {
            Err(Error::Coverage { required, .. }) => assert_eq!(required, 40),
            other => panic!("expected coverage error, got {other:?}"),
        }
        assert_eq!(
            required_order_single_section(fiber.total_length(), 100e-9, fiber.group_index()),
            13
        );
    }

    #[test]
    fn integrate_pattern_identities() {
        let pairs = walsh_pattern_pairs(8, 50e-9, 0.5).unwrap();
        let zero = TemporalImage {
            values: vec![0.0; 256],
            delay_start: 0.0,
            delay_step: 50e-9,
            frequency_mhz: 10860.0,
            group_index: 1.4682,
        };
        assert_eq!(integrate_pattern(&pairs[7], &zero, 1.0).unwrap(), (0.0, 0.0));
        let flat = TemporalImage {
            values: vec![0.25; 256],
            ..zero.clone()
        };
        assert_eq!(
            integrate_pattern(&pairs[0], &flat, 2.0).unwrap(),
            (2.0 * 256.0 * 0.25, 0.0)
        );
        let short = TemporalImage {
            values: vec![1.0; 255],
            ..zero
        };
        assert!(matches!(
            integrate_pattern(&pairs[0], &short, 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn noiseless_complement_identity() {
        let fiber = FiberProfile::demo_short();
        let pairs = walsh_pattern_pairs(8, 50e-9, 0.5).unwrap();
        let acq = acquire(&short_plan(), &fiber, &pairs, 10860.0, 0, 2).unwrap();
        let total = acq.records[0].d + acq.records[0].d_inverse;
        for r in &acq.records {
            assert!(((r.d + r.d_inverse) - total).abs() <= 1e-12 * total);
        }
    }

    #[test]
    fn degenerate_digitizer_matches_ideal() {
        let fiber = FiberProfile::demo_short();
        let pairs = walsh_pattern_pairs(8, 50e-9, 0.5).unwrap();
        let ideal = acquire(&short_plan(), &fiber, &pairs, 10860.0, 0, 0).unwrap();
        let max = ideal.records.iter().map(|r| r.d.max(r.d_inverse)).fold(0.0, f64::max);
        let dig = DigitizerConfig::new(24, 100.0 * max, 0.0, 1).unwrap();
        let plan = short_plan().with_digitizer(Some(dig));
        let real = acquire(&plan, &fiber, &pairs, 10860.0, 0, 0).unwrap();
        assert_eq!(real.clip_count, 0);
        for (a, b) in ideal.records.iter().zip(&real.records) {
            assert!((a.d - b.d).abs() <= dig.step());
            assert!((a.d_inverse - b.d_inverse).abs() <= dig.step());
        }
    }

    #[test]
    fn quantizer_bounds_and_clipping() {
        let dig = DigitizerConfig::new(14, 2.0, 0.0, 0).unwrap();
        for i in 0..1000 {
            let v = -2.0 + 4.0 * i as f64 / 999.0;
            let (q, clipped) = dig.quantize(v);
            assert!(!clipped);
            assert!((q - v).abs() <= dig.full_scale / (1u64 << 14) as f64 + 1e-15);
        }
        assert_eq!(dig.quantize(2.5), (2.0, true));
        assert_eq!(dig.quantize(-9.0), (-2.0, true));
        assert!(DigitizerConfig::new(7, 1.0, 0.0, 0).is_err());
        assert!(DigitizerConfig::new(25, 1.0, 0.0, 0).is_err());
        assert!(DigitizerConfig::new(14, 0.0, 0.0, 0).is_err());
        assert!(DigitizerConfig::new(14, 1.0, -1.0, 0).is_err());
    }

    #[test]
    fn clipping_is_counted() {
        let fiber = FiberProfile::demo_short();
        let pairs = walsh_pattern_pairs(8, 50e-9, 0.5).unwrap();
        let ideal = acquire(&short_plan(), &fiber, &pairs, 10860.0, 0, 0).unwrap();
        let max = ideal.records.iter().map(|r| r.d).fold(0.0, f64::max);
        let dig = DigitizerConfig::new(14, 0.5 * max, 0.0, 1).unwrap();
        let plan = short_plan().with_digitizer(Some(dig));
        let acq = acquire(&plan, &fiber, &pairs, 10860.0, 0, 0).unwrap();
        assert!(acq.clip_count > 0);
        assert!(acq.records.iter().all(|r| r.d <= 0.5 * max));
    }

    #[test]
    fn noise_is_deterministic_per_stream() {
        let fiber = FiberProfile::demo_short();
        let pairs = walsh_pattern_pairs(6, 50e-9, 0.5).unwrap();
        let plan0 = AcquisitionPlan::new(6, 50e-9, 0.5).with_sections(5);
        let dig = calibrated_digitizer(&plan0, &fiber, &pairs, 10860.0, 0.005, 14, 42).unwrap();
        let plan = plan0.with_digitizer(Some(dig));
        let a = acquire_sectioned(&plan, &fiber, &pairs, 10860.0).unwrap();
        let b = acquire_sectioned(&plan, &fiber, &pairs, 10860.0).unwrap();
        assert_eq!(a, b);
        // distinct shifts draw distinct noise
        assert_ne!(a[0][0].records[3].d - a[0][1].records[3].d, 0.0);
    }

    #[test]
    fn blocked_order_changes_only_noise_assignment() {
        let fiber = FiberProfile::demo_short();
        let pairs = walsh_pattern_pairs(8, 50e-9, 0.5).unwrap();
        let dig = calibrated_digitizer(&short_plan(), &fiber, &pairs, 10860.0, 0.005, 14, 7).unwrap();
        let mut plan = short_plan().with_digitizer(Some(dig));
        let a = acquire(&plan, &fiber, &pairs, 10860.0, 0, 0).unwrap();
        plan.order = TransmissionOrder::Blocked;
        let b = acquire(&plan, &fiber, &pairs, 10860.0, 0, 0).unwrap();
        assert_eq!(a.records[0].d, b.records[0].d);
        assert_ne!(a.records[0].d_inverse, b.records[0].d_inverse);
    }

    #[test]
    fn shifts_offset_the_bit_grid() {
        let plan = short_plan();
        let g0 = plan.bit_grid(0, 0);
        let g3 = plan.bit_grid(2, 3);
        assert_eq!(g0.start, 0.0);
        assert!((g3.start - (2.0 * 256.0 * 50e-9 + 3.0 * 10e-9)).abs() < 1e-20);
        assert_eq!(g3.step, 50e-9);
    }

    #[test]
    fn single_shift_interleaved_equals_plain() {
        let fiber = FiberProfile::demo_short();
        let pairs = walsh_pattern_pairs(8, 50e-9, 0.5).unwrap();
        let plan = short_plan().with_shifts(1);
        let inter = acquire_interleaved(&plan, &fiber, &pairs, 10790.0, 0).unwrap();
        let plain = acquire(&plan, &fiber, &pairs, 10790.0, 0, 0).unwrap();
        assert_eq!(inter, vec![plain.clone()]);
        let sect = acquire_sectioned(&plan, &fiber, &pairs, 10790.0).unwrap();
        assert_eq!(sect, vec![vec![plain]]);
    }

    #[test]
    fn linear_in_gain() {
        let fiber = FiberProfile::demo_short();
        let scaled = fiber.scaled_gain(3.5).unwrap();
        let pairs = random_pattern_pairs(8, 16, 3, 50e-9, 0.5).unwrap();
        let a = acquire(&short_plan(), &fiber, &pairs, 10830.0, 0, 1).unwrap();
        let b = acquire(&short_plan(), &scaled, &pairs, 10830.0, 0, 1).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert!((3.5 * x.d - y.d).abs() <= 1e-12 * y.d.abs());
        }
    }

    #[test]
    fn pattern_length_must_match_plan() {
        let fiber = FiberProfile::demo_short();
        let pairs = walsh_pattern_pairs(7, 50e-9, 0.5).unwrap();
        assert!(matches!(
            acquire(&short_plan(), &fiber, &pairs, 10860.0, 0, 0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn default_demo_is_small_gain() {
        let fiber = FiberProfile::demo_short();
        let plan = short_plan();
        let w = window_length(plan.pulse_width(), fiber.group_index());
        assert!(fiber.small_gain_check(10860.0, w) < DEFAULT_SMALL_GAIN_THRESHOLD);
        let long = FiberProfile::demo_long();
        let w = window_length(100e-9 * 0.5, long.group_index());
        assert!(long.small_gain_check(10870.0, w) < DEFAULT_SMALL_GAIN_THRESHOLD);
    }

    #[test]
    fn conventional_comparator_has_reduced_noise() {
        let fiber = FiberProfile::builder(vec![FiberSegment::new(1000.0, 10860.0)])
            .attenuation_db_per_km(0.0)
            .build()
            .unwrap();
        let pairs = walsh_pattern_pairs(8, 50e-9, 0.5).unwrap();
        let dig = calibrated_digitizer(&short_plan(), &fiber, &pairs, 10860.0, 0.005, 14, 5).unwrap();
        let plan = short_plan().with_digitizer(Some(dig));
        let clean = conventional_acquire(&short_plan(), &fiber, 10860.0, 1).unwrap();
        let noisy = conventional_acquire(&plan, &fiber, 10860.0, 512).unwrap();
        let resid: Vec<f64> = noisy.values.iter().zip(&clean.values).map(|(a, b)| a - b).collect();
        let var = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
        let expected = dig.noise_sigma / 512f64.sqrt();
        assert!((var.sqrt() / expected - 1.0).abs() < 0.1);
    }

    #[test]
    fn records_csv_format() {
        let rec = AcquisitionRecord {
            row_index: 3,
            d: 1.234_567_891_23e-5,
            d_inverse: 0.0,
            section: 1,
            shift: 4,
            frequency_mhz: 10860.0,
        };
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &[rec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "freq_mhz,section,shift,row,D,D_inv\n10860,1,4,3,1.23456789e-5,0.00000000e0\n"
        );
        let back = read_records_csv(text.as_bytes()).unwrap();
        assert_eq!(back[0].row_index, 3);
        assert!((back[0].d - rec.d).abs() < 1e-13);
        assert!(read_records_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
