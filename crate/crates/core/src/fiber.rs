//! Distributed response of the fiber under test.
//!
//! The fiber is a chain of segments with piecewise-constant Brillouin
//! parameters. In Brillouin-gain mode the local response is the small-gain
//! power transfer between pump and counter-propagating probe; in backscatter
//! mode it is the power scattered back by the pump alone. Delays map to
//! positions through `z = c t / 2n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const DEFAULT_GROUP_INDEX: f64 = 1.4682;
pub const DEFAULT_LINEWIDTH_MHZ: f64 = 30.0;
pub const DEFAULT_ATTENUATION_DB_PER_KM: f64 = 0.2;
pub const DEFAULT_EFFECTIVE_AREA_M2: f64 = 80e-12;
pub const DEFAULT_GAIN_M_PER_W: f64 = 1.1e-11;
pub const DEFAULT_BACKSCATTER_PER_M: f64 = 1e-7;

/// Minimum Simpson sub-intervals per effective pulse window.
const SUBSAMPLES_PER_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResponseMode {
    #[default]
    BrillouinGain,
    Backscatter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberSegment {
    pub length_m: f64,
    pub bfs_mhz: f64,
    /// Peak Brillouin gain coefficient, m/W (relative units are fine).
    pub gain: f64,
    /// Full width at half maximum of the gain spectrum.
    #[serde(default = "default_linewidth")]
    pub linewidth_mhz: f64,
    /// Local backscatter coefficient, 1/m. Only used in backscatter mode.
    #[serde(default = "default_backscatter")]
    pub backscatter_per_m: f64,
}

fn default_linewidth() -> f64 {
    DEFAULT_LINEWIDTH_MHZ
}

fn default_backscatter() -> f64 {
    DEFAULT_BACKSCATTER_PER_M
}

fn default_group_index() -> f64 {
    DEFAULT_GROUP_INDEX
}

fn default_attenuation() -> f64 {
    DEFAULT_ATTENUATION_DB_PER_KM
}

fn default_effective_area() -> f64 {
    DEFAULT_EFFECTIVE_AREA_M2
}

impl FiberSegment {
    pub fn new(length_m: f64, bfs_mhz: f64) -> Self {
        Self {
            length_m,
            bfs_mhz,
            gain: DEFAULT_GAIN_M_PER_W,
            linewidth_mhz: DEFAULT_LINEWIDTH_MHZ,
            backscatter_per_m: DEFAULT_BACKSCATTER_PER_M,
        }
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn with_linewidth(mut self, linewidth_mhz: f64) -> Self {
        self.linewidth_mhz = linewidth_mhz;
        self
    }

    pub fn with_backscatter(mut self, backscatter_per_m: f64) -> Self {
        self.backscatter_per_m = backscatter_per_m;
        self
    }

    /// Unit-peak Lorentzian gain line evaluated at `nu_mhz`.
    pub fn line_shape(&self, nu_mhz: f64) -> f64 {
        let u = 2.0 * (nu_mhz - self.bfs_mhz) / self.linewidth_mhz;
        1.0 / (1.0 + u * u)
    }
}

/// Fiber description as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub segments: Vec<FiberSegment>,
    #[serde(default = "default_group_index")]
    pub group_index: f64,
    #[serde(default = "default_attenuation")]
    pub attenuation_db_per_km: f64,
    #[serde(default = "default_effective_area")]
    pub effective_area_m2: f64,
    pub pump_w: f64,
    pub probe_w: f64,
    #[serde(default)]
    pub mode: ResponseMode,
}

/// Validated, immutable fiber model.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberProfile {
    segments: Vec<FiberSegment>,
    starts: Vec<f64>,
    total_length: f64,
    group_index: f64,
    attenuation_db_per_km: f64,
    effective_area: f64,
    pump_w: f64,
    probe_w: f64,
    mode: ResponseMode,
}

impl TryFrom<FiberConfig> for FiberProfile {
    type Error = Error;

    fn try_from(cfg: FiberConfig) -> Result<Self> {
        Self::builder(cfg.segments)
            .group_index(cfg.group_index)
            .attenuation_db_per_km(cfg.attenuation_db_per_km)
            .effective_area(cfg.effective_area_m2)
            .powers(cfg.pump_w, cfg.probe_w)
            .mode(cfg.mode)
            .build()
    }
}

#[derive(Debug, Clone)]
pub struct FiberBuilder {
    segments: Vec<FiberSegment>,
    group_index: f64,
    attenuation_db_per_km: f64,
    effective_area: f64,
    pump_w: f64,
    probe_w: f64,
    mode: ResponseMode,
}

impl FiberBuilder {
    pub fn group_index(mut self, n: f64) -> Self {
        self.group_index = n;
        self
    }

    pub fn attenuation_db_per_km(mut self, alpha: f64) -> Self {
        self.attenuation_db_per_km = alpha;
        self
    }

    pub fn effective_area(mut self, a_eff: f64) -> Self {
        self.effective_area = a_eff;
        self
    }

    pub fn powers(mut self, pump_w: f64, probe_w: f64) -> Self {
        self.pump_w = pump_w;
        self.probe_w = probe_w;
        self
    }

    pub fn mode(mut self, mode: ResponseMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn build(self) -> Result<FiberProfile> {
        if self.segments.is_empty() {
            return Err(Error::invalid("segments", "at least one segment is required"));
        }
        for (i, s) in self.segments.iter().enumerate() {
            let bad = |what: &str| Error::invalid("segments", format!("segment {i}: {what}"));
            if !(s.length_m > 0.0 && s.length_m.is_finite()) {
                return Err(bad("length_m must be positive"));
            }
            if !(s.linewidth_mhz > 0.0 && s.linewidth_mhz.is_finite()) {
                return Err(bad("linewidth_mhz must be positive"));
            }
            if !(s.gain >= 0.0 && s.gain.is_finite()) {
                return Err(bad("gain must be non-negative"));
            }
            if !(s.backscatter_per_m >= 0.0 && s.backscatter_per_m.is_finite()) {
                return Err(bad("backscatter_per_m must be non-negative"));
            }
            if !s.bfs_mhz.is_finite() {
                return Err(bad("bfs_mhz must be finite"));
            }
        }
        if !(self.group_index > 1.0 && self.group_index.is_finite()) {
            return Err(Error::invalid("group_index", "must exceed 1"));
        }
        if !(self.attenuation_db_per_km >= 0.0 && self.attenuation_db_per_km.is_finite()) {
            return Err(Error::invalid("attenuation_db_per_km", "must be non-negative"));
        }
        if !(self.effective_area > 0.0 && self.effective_area.is_finite()) {
            return Err(Error::invalid("effective_area_m2", "must be positive"));
        }
        if !(self.pump_w >= 0.0 && self.probe_w >= 0.0) {
            return Err(Error::invalid("pump_w/probe_w", "powers must be non-negative"));
        }
        let mut starts = Vec::with_capacity(self.segments.len());
        let mut acc = 0.0;
        for s in &self.segments {
            starts.push(acc);
            acc += s.length_m;
        }
        Ok(FiberProfile {
            segments: self.segments,
            starts,
            total_length: acc,
            group_index: self.group_index,
            attenuation_db_per_km: self.attenuation_db_per_km,
            effective_area: self.effective_area,
            pump_w: self.pump_w,
            probe_w: self.probe_w,
            mode: self.mode,
        })
    }
}

impl FiberProfile {
    pub fn builder(segments: Vec<FiberSegment>) -> FiberBuilder {
        FiberBuilder {
            segments,
            group_index: DEFAULT_GROUP_INDEX,
            attenuation_db_per_km: DEFAULT_ATTENUATION_DB_PER_KM,
            effective_area: DEFAULT_EFFECTIVE_AREA_M2,
            pump_w: 0.01,
            probe_w: 0.001,
            mode: ResponseMode::BrillouinGain,
        }
    }

    /// 1 km spool at 10860 MHz spliced to 20 m at 10790 MHz.
    pub fn demo_short() -> Self {
        Self::builder(vec![
            FiberSegment::new(1000.0, 10860.0),
            FiberSegment::new(20.0, 10790.0),
        ])
        .build()
        .expect("demo fiber is valid")
    }

    /// Two 25 km spools followed by the short demo fiber. The Brillouin
    /// frequencies of the 25 km spools are placeholders.
    pub fn demo_long() -> Self {
        Self::builder(vec![
            FiberSegment::new(25_000.0, 10870.0),
            FiberSegment::new(25_000.0, 10850.0),
            FiberSegment::new(1000.0, 10860.0),
            FiberSegment::new(20.0, 10790.0),
        ])
        .build()
        .expect("demo fiber is valid")
    }

    pub fn to_config(&self) -> FiberConfig {
        FiberConfig {
            description: None,
            segments: self.segments.clone(),
            group_index: self.group_index,
            attenuation_db_per_km: self.attenuation_db_per_km,
            effective_area_m2: self.effective_area,
            pump_w: self.pump_w,
            probe_w: self.probe_w,
            mode: self.mode,
        }
    }

    pub fn segments(&self) -> &[FiberSegment] {
        &self.segments
    }

    /// Start position of every segment.
    pub fn segment_starts(&self) -> &[f64] {
        &self.starts
    }

    /// Interior splice positions (segment boundaries excluding 0 and the end).
    pub fn splice_positions(&self) -> &[f64] {
        &self.starts[1..]
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn group_index(&self) -> f64 {
        self.group_index
    }

    pub fn mode(&self) -> ResponseMode {
        self.mode
    }

    pub fn pump_w(&self) -> f64 {
        self.pump_w
    }

    pub fn probe_w(&self) -> f64 {
        self.probe_w
    }

    pub fn attenuation_db_per_km(&self) -> f64 {
        self.attenuation_db_per_km
    }

    /// Power attenuation coefficient in 1/m.
    pub fn alpha_linear(&self) -> f64 {
        self.attenuation_db_per_km * std::f64::consts::LN_10 / 10.0 / 1000.0
    }

    /// Copy with every segment gain multiplied by `factor`.
    pub fn scaled_gain(&self, factor: f64) -> Result<Self> {
        let mut segments = self.segments.clone();
        for s in &mut segments {
            s.gain *= factor;
            s.backscatter_per_m *= factor;
        }
        let mut cfg = self.to_config();
        cfg.segments = segments;
        cfg.try_into()
    }

    /// Copy with different launch powers.
    pub fn with_powers(&self, pump_w: f64, probe_w: f64) -> Result<Self> {
        let mut cfg = self.to_config();
        cfg.pump_w = pump_w;
        cfg.probe_w = probe_w;
        cfg.try_into()
    }

    fn check_position(&self, z: f64) -> Result<()> {
        if (0.0..=self.total_length).contains(&z) {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                what: "position z",
                value: z,
                range: format!("[0, {}] m", self.total_length),
            })
        }
    }

    /// Index of the segment containing `z`; boundaries belong to the segment
    /// on their right, the fiber end to the last segment.
    pub fn segment_index(&self, z: f64) -> usize {
        let idx = self.starts.partition_point(|&s| s <= z);
        idx.saturating_sub(1).min(self.segments.len() - 1)
    }

    /// Local gain density `g0 / A_eff * L(nu)`, 1/(W m).
    pub fn local_gain(&self, z: f64, nu_mhz: f64) -> Result<f64> {
        self.check_position(z)?;
        Ok(self.segment_gain(self.segment_index(z), nu_mhz))
    }

    fn segment_gain(&self, seg: usize, nu_mhz: f64) -> f64 {
        let s = &self.segments[seg];
        s.gain / self.effective_area * s.line_shape(nu_mhz)
    }

    fn pump_power(&self, z: f64) -> f64 {
        self.pump_w * (-self.alpha_linear() * z).exp()
    }

    fn probe_power(&self, z: f64) -> f64 {
        self.probe_w * (-self.alpha_linear() * (self.total_length - z)).exp()
    }

    /// Response per metre of segment `seg` at position `z`, return-path
    /// loss included.
    fn density_in(&self, seg: usize, z: f64, nu_mhz: f64) -> f64 {
        let back = (-self.alpha_linear() * z).exp();
        match self.mode {
            ResponseMode::BrillouinGain => {
                self.segment_gain(seg, nu_mhz) * self.pump_power(z) * self.probe_power(z) * back
            }
            ResponseMode::Backscatter => self.segments[seg].backscatter_per_m * self.pump_power(z) * back,
        }
    }

    /// Power contributed by a slab of length `dz` at `z`.
    pub fn local_response(&self, z: f64, nu_mhz: f64, dz: f64) -> Result<f64> {
        self.check_position(z)?;
        if dz.is_nan() || dz <= 0.0 {
            return Err(Error::invalid("dz", "interaction length must be positive"));
        }
        Ok(self.density_in(self.segment_index(z), z, nu_mhz) * dz)
    }

    /// Largest relative power transfer `S(z) / P_s(z)` along the fiber for a
    /// slab of length `interaction_length_m`. In backscatter mode the ratio is
    /// taken against the local pump power instead.
    pub fn small_gain_check(&self, nu_mhz: f64, interaction_length_m: f64) -> f64 {
        let alpha = self.alpha_linear();
        // S/P_s decays monotonically inside a segment, so each segment start
        // holds that segment's maximum.
        self.starts
            .iter()
            .enumerate()
            .map(|(seg, &z)| {
                let per_m = match self.mode {
                    ResponseMode::BrillouinGain => self.segment_gain(seg, nu_mhz) * self.pump_power(z),
                    ResponseMode::Backscatter => self.segments[seg].backscatter_per_m,
                };
                per_m * (-alpha * z).exp() * interaction_length_m
            })
            .fold(0.0, f64::max)
    }

    /// Integral of the response density over `[a, b]`, clipped to the fiber
    /// and split at segment boundaries. Each piece is integrated with
    /// composite Simpson on at least `min_intervals` sub-intervals.
    pub fn integrate_response(&self, a: f64, b: f64, nu_mhz: f64, resolution_m: f64) -> f64 {
        let lo = a.max(0.0);
        let hi = b.min(self.total_length);
        if hi <= lo {
            return 0.0;
        }
        let mut total = 0.0;
        let mut seg = self.segment_index(lo);
        let mut left = lo;
        while left < hi && seg < self.segments.len() {
            let seg_end = self.starts[seg] + self.segments[seg].length_m;
            let right = seg_end.min(hi);
            if right > left {
                let pieces = ((right - left) / resolution_m * SUBSAMPLES_PER_WINDOW as f64).ceil() as usize;
                let n = pieces.max(SUBSAMPLES_PER_WINDOW).next_multiple_of(2);
                total += simpson(|z| self.density_in(seg, z, nu_mhz), left, right, n);
            }
            left = right;
            seg += 1;
        }
        total
    }

    /// Single-pulse trace: sample `j` integrates the local response over the
    /// window `[z_j, z_j + w]` with `w = c * pulse_width / 2n`. Parts of the
    /// window beyond either fiber end contribute nothing.
    pub fn conventional_trace(&self, nu_mhz: f64, pulse_width: f64, grid: DelayGrid) -> Result<TemporalImage> {
        if !(pulse_width > 0.0 && pulse_width.is_finite()) {
            return Err(Error::invalid("pulse_width", "must be positive"));
        }
        grid.validate()?;
        let w = window_length(pulse_width, self.group_index);
        let values = (0..grid.count)
            .map(|j| {
                let z = SPEED_OF_LIGHT * grid.delay(j) / (2.0 * self.group_index);
                self.integrate_response(z, z + w, nu_mhz, w)
            })
            .collect();
        Ok(TemporalImage {
            values,
            delay_start: grid.start,
            delay_step: grid.step,
            frequency_mhz: nu_mhz,
            group_index: self.group_index,
        })
    }

    /// Round-trip time of flight to the far end.
    pub fn round_trip_time(&self) -> f64 {
        2.0 * self.group_index * self.total_length / SPEED_OF_LIGHT
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Spatial length covered by a pulse of duration `pulse_width`.
pub fn window_length(pulse_width: f64, group_index: f64) -> f64 {
    SPEED_OF_LIGHT * pulse_width / (2.0 * group_index)
}

/// Maps a round-trip delay to a position along the fiber.
pub fn delay_to_position(t: f64, group_index: f64) -> Result<f64> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::NegativeDelay(t));
    }
    Ok(SPEED_OF_LIGHT * t / (2.0 * group_index))
}

/// Uniform grid of delays `start + j * step`, `j < count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayGrid {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl DelayGrid {
    pub fn new(start: f64, step: f64, count: usize) -> Self {
        Self { start, step, count }
    }

    pub fn delay(&self, j: usize) -> f64 {
        self.start + j as f64 * self.step
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("delay_grid.count", "must be at least 1"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("delay_grid.step", "must be positive"));
        }
        Ok(())
    }
}

/// Sampled local response on a uniform delay grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalImage {
    pub values: Vec<f64>,
    pub delay_start: f64,
    pub delay_step: f64,
    pub frequency_mhz: f64,
    pub group_index: f64,
}

impl TemporalImage {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn delay(&self, j: usize) -> f64 {
        self.delay_start + j as f64 * self.delay_step
    }

    pub fn position(&self, j: usize) -> f64 {
        SPEED_OF_LIGHT * self.delay(j) / (2.0 * self.group_index)
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.values.len()).map(|j| self.position(j)).collect()
    }

    /// Read-out spacing in metres.
    pub fn position_step(&self) -> f64 {
        window_length(self.delay_step, self.group_index)
    }

    pub fn grid(&self) -> DelayGrid {
        DelayGrid::new(self.delay_start, self.delay_step, self.values.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lossless(segments: Vec<FiberSegment>) -> FiberProfile {
        FiberProfile::builder(segments)
            .attenuation_db_per_km(0.0)
            .build()
            .unwrap()
    }

    #[test]
    fn gain_on_resonance_and_half_width() {
        let fiber = FiberProfile::demo_short();
        let peak = DEFAULT_GAIN_M_PER_W / DEFAULT_EFFECTIVE_AREA_M2;
        let g = fiber.local_gain(500.0, 10860.0).unwrap();
        assert!((g - peak).abs() <= 1e-12 * peak);
        let half = fiber.local_gain(500.0, 10860.0 + 15.0).unwrap();
        assert!((half - 0.5 * peak).abs() <= 1e-12 * peak);
    }

    #[test]
    fn gain_across_splice() {
        let fiber = FiberProfile::demo_short();
        let left = fiber.local_gain(1000.0 - 1e-9, 10860.0).unwrap();
        let right = fiber.local_gain(1000.0 + 1e-9, 10790.0).unwrap();
        let peak = DEFAULT_GAIN_M_PER_W / DEFAULT_EFFECTIVE_AREA_M2;
        assert!((left - peak).abs() < 1e-9 * peak);
        assert!((right - peak).abs() < 1e-9 * peak);
        assert_eq!(fiber.segment_index(1000.0), 1);
        assert_eq!(fiber.segment_index(1020.0), 1);
    }

    #[test]
    fn position_bounds() {
        let fiber = FiberProfile::demo_short();
        assert!(fiber.local_gain(-0.1, 10860.0).is_err());
        assert!(fiber.local_gain(1020.1, 10860.0).is_err());
        assert!(fiber.local_response(10.0, 10860.0, 0.0).is_err());
    }

    #[test]
    fn uniform_lossless_response_is_flat() {
        let fiber = lossless(vec![FiberSegment::new(500.0, 10860.0)]);
        let a = fiber.local_response(0.0, 10860.0, 1.0).unwrap();
        for z in [1.0, 123.4, 250.0, 499.0, 500.0] {
            let b = fiber.local_response(z, 10860.0, 1.0).unwrap();
            assert!((a - b).abs() <= 1e-14 * a);
        }
    }

    #[test]
    fn pump_decay_at_25_km() {
        let fiber = FiberProfile::builder(vec![FiberSegment::new(50_000.0, 10860.0)])
            .build()
            .unwrap();
        let ratio = fiber.pump_power(25_000.0) / fiber.pump_w();
        assert!((ratio - 10f64.powf(-0.5)).abs() < 1e-12);
        assert!((ratio - 0.3162).abs() < 1e-4);
    }

    #[test]
    fn zero_gain_gives_zero_response() {
        let fiber = FiberProfile::demo_short().scaled_gain(0.0).unwrap();
        for z in [0.0, 400.0, 1010.0] {
            for nu in [10500.0, 10790.0, 10860.0] {
                assert_eq!(fiber.local_response(z, nu, 1.0).unwrap(), 0.0);
            }
        }
        assert_eq!(fiber.small_gain_check(10860.0, 2.5), 0.0);
    }

    #[test]
    fn response_is_bilinear_in_powers() {
        let fiber = FiberProfile::demo_long();
        let base = fiber.local_response(30_000.0, 10850.0, 1.0).unwrap();
        let pump2 = fiber.with_powers(2.0 * fiber.pump_w(), fiber.probe_w()).unwrap();
        let probe3 = fiber.with_powers(fiber.pump_w(), 3.0 * fiber.probe_w()).unwrap();
        let a = pump2.local_response(30_000.0, 10850.0, 1.0).unwrap();
        let b = probe3.local_response(30_000.0, 10850.0, 1.0).unwrap();
        assert!((a - 2.0 * base).abs() < 1e-14 * base);
        assert!((b - 3.0 * base).abs() < 1e-14 * base);
    }

    #[test]
    fn backscatter_mode_ignores_frequency() {
        let mut cfg = FiberProfile::demo_short().to_config();
        cfg.mode = ResponseMode::Backscatter;
        let fiber = FiberProfile::try_from(cfg).unwrap();
        let a = fiber.local_response(100.0, 10500.0, 1.0).unwrap();
        let b = fiber.local_response(100.0, 10860.0, 1.0).unwrap();
        assert_eq!(a, b);
        let expected = DEFAULT_BACKSCATTER_PER_M * fiber.pump_w() * (-2.0 * fiber.alpha_linear() * 100.0).exp();
        assert!((a - expected).abs() < 1e-14 * expected);
    }

    #[test]
    fn small_gain_check_scales_with_pump() {
        let fiber = FiberProfile::demo_short();
        let w = window_length(25e-9, fiber.group_index());
        let base = fiber.small_gain_check(10860.0, w);
        let doubled = fiber
            .with_powers(2.0 * fiber.pump_w(), fiber.probe_w())
            .unwrap()
            .small_gain_check(10860.0, w);
        assert!((doubled - 2.0 * base).abs() < 1e-15);
        assert!(base > 0.0 && base < 0.01, "{base}");
    }

    #[test]
    fn small_gain_check_matches_brute_force_max() {
        let fiber = FiberProfile::demo_long();
        let fast = fiber.small_gain_check(10790.0, 1.0);
        let brute = (0..=51_020)
            .map(|z| {
                let z = z as f64;
                fiber.local_response(z, 10790.0, 1.0).unwrap() / fiber.probe_power(z)
            })
            .fold(0.0, f64::max);
        assert!((fast - brute).abs() <= 1e-12 * fast);
    }

    #[test]
    fn delay_mapping() {
        assert_eq!(delay_to_position(0.0, 1.4682).unwrap(), 0.0);
        let z = delay_to_position(50e-9, 1.4682).unwrap();
        assert!((z - 5.1049).abs() < 1e-3, "{z}");
        let z = delay_to_position(9.795e-6, 1.4682).unwrap();
        assert!((z - 1000.0).abs() < 0.1, "{z}");
        assert!(matches!(delay_to_position(-1e-9, 1.4682), Err(Error::NegativeDelay(_))));
    }

    #[test]
    fn window_for_25ns_pulse() {
        let w = window_length(25e-9, DEFAULT_GROUP_INDEX);
        assert!((w - 2.5525).abs() < 1e-3, "{w}");
    }

    #[test]
    fn simpson_matches_closed_form_exponential() {
        let fiber = FiberProfile::builder(vec![FiberSegment::new(2000.0, 10860.0)])
            .attenuation_db_per_km(0.35)
            .build()
            .unwrap();
        let (a, b) = (123.0, 125.6);
        let numeric = fiber.integrate_response(a, b, 10860.0, b - a);
        // Pump decay, probe decay and return loss combine to
        // c0 * exp(-alpha z) with exp(-alpha L) folded into c0.
        let alpha = fiber.alpha_linear();
        let c0 =
            fiber.segment_gain(0, 10860.0) * fiber.pump_w() * fiber.probe_w() * (-alpha * fiber.total_length()).exp();
        let beta = alpha;
        let exact = c0 * ((-beta * a).exp() - (-beta * b).exp()) / beta;
        assert!((numeric - exact).abs() <= 1e-12 * exact, "{numeric} vs {exact}");
    }

    #[test]
    fn trace_of_uniform_lossless_fiber_is_flat_then_rolls_off() {
        let fiber = lossless(vec![FiberSegment::new(200.0, 10860.0)]);
        let tau = 25e-9;
        let w = window_length(tau, fiber.group_index());
        let step = 1e-9;
        let trace = fiber
            .conventional_trace(10860.0, tau, DelayGrid::new(0.0, step, 2200))
            .unwrap();
        let plateau = trace.values[10];
        let per_m = fiber.local_response(0.0, 10860.0, 1.0).unwrap();
        assert!((plateau - per_m * w).abs() < 1e-12 * plateau);
        for (j, &v) in trace.values.iter().enumerate() {
            let z = trace.position(j);
            if z + w <= 200.0 {
                assert!((v - plateau).abs() < 1e-12 * plateau);
            } else if z >= 200.0 {
                assert_eq!(v, 0.0);
            } else {
                let frac = (200.0 - z) / w;
                assert!((v - frac * plateau).abs() < 1e-9 * plateau);
            }
        }
    }

    #[test]
    fn trace_converges_to_local_response_for_short_pulses() {
        let fiber = FiberProfile::demo_short();
        for tau in [1e-9, 1e-10, 1e-11] {
            let w = window_length(tau, fiber.group_index());
            let t = 2.0 * fiber.group_index() * 300.0 / SPEED_OF_LIGHT;
            let trace = fiber
                .conventional_trace(10860.0, tau, DelayGrid::new(t, 1e-9, 1))
                .unwrap();
            let density = fiber.local_response(300.0, 10860.0, 1.0).unwrap();
            let rel = (trace.values[0] / w - density).abs() / density;
            assert!(rel < 1e-5 * (tau / 1e-9), "tau {tau}: {rel}");
        }
    }

    #[test]
    fn splice_edge_is_a_ramp_of_one_window() {
        let fiber = FiberProfile::demo_short();
        let tau = 25e-9;
        let w = window_length(tau, fiber.group_index());
        let t0 = 2.0 * fiber.group_index() * 990.0 / SPEED_OF_LIGHT;
        let trace = fiber
            .conventional_trace(10790.0, tau, DelayGrid::new(t0, 0.2e-9, 1000))
            .unwrap();
        let lo = trace.values[0];
        let hi = trace
            .values
            .iter()
            .zip(trace.positions())
            .find(|(_, z)| *z > 1005.0)
            .map(|(v, _)| *v)
            .unwrap();
        let crossing = |level: f64| {
            let j = trace.values.iter().position(|&v| v >= level).unwrap();
            let (z0, z1) = (trace.position(j - 1), trace.position(j));
            let (v0, v1) = (trace.values[j - 1], trace.values[j]);
            z0 + (level - v0) / (v1 - v0) * (z1 - z0)
        };
        let width = crossing(lo + 0.9 * (hi - lo)) - crossing(lo + 0.1 * (hi - lo));
        assert!((width / w - 0.8).abs() < 0.01, "{width} vs window {w}");
        assert!(width <= w && width >= 0.78 * w);
    }

    #[test]
    fn backscatter_trace_sum_rule() {
        let segments = vec![
            FiberSegment::new(60.0, 10860.0).with_backscatter(2e-7),
            FiberSegment::new(30.0, 10860.0).with_backscatter(5e-7),
            FiberSegment::new(45.0, 10860.0).with_backscatter(1e-7),
        ];
        let fiber = FiberProfile::builder(segments)
            .attenuation_db_per_km(0.0)
            .mode(ResponseMode::Backscatter)
            .build()
            .unwrap();
        let tau = 25e-9;
        let step = 0.1e-9;
        let start = -2.0 * tau;
        let count = ((fiber.round_trip_time() + 4.0 * tau) / step) as usize;
        let trace = fiber
            .conventional_trace(10860.0, tau, DelayGrid::new(start, step, count))
            .unwrap();
        let energy: f64 = trace.values.iter().sum::<f64>() * step;
        let direct: f64 = fiber
            .segments()
            .iter()
            .map(|s| s.backscatter_per_m * fiber.pump_w() * s.length_m)
            .sum::<f64>()
            * tau;
        assert!((energy - direct).abs() <= 1e-6 * direct, "{energy} vs {direct}");
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let json =
            r#"{"segments":[{"length_m":10,"bfs_mhz":10860,"gain":1e-11}],"pump_w":0.01,"probe_w":0.001,"typo":1}"#;
        assert!(serde_json::from_str::<FiberConfig>(json).is_err());
        let json = r#"{"segments":[{"length_m":10,"bfs_mhz":10860,"gain":1e-11}],"pump_w":0.01,"probe_w":0.001}"#;
        let cfg: FiberConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.group_index, DEFAULT_GROUP_INDEX);
        assert_eq!(cfg.segments[0].linewidth_mhz, DEFAULT_LINEWIDTH_MHZ);
        assert!(FiberProfile::try_from(cfg).is_ok());
        let bad = FiberProfile::builder(vec![FiberSegment::new(-1.0, 10860.0)]).build();
        assert!(bad.is_err());
        let bad = FiberProfile::builder(vec![FiberSegment::new(1.0, 10860.0)])
            .group_index(0.9)
            .build();
        assert!(bad.is_err());
    }
}
