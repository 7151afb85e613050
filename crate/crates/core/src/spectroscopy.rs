//! Frequency sweeps, Lorentzian fitting of the per-position Brillouin
//! spectra and edge-width measurement on temporal images.

use std::io;

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;

use crate::acquisition::{acquire_sectioned, conventional_acquire, AcquisitionPlan};
use crate::error::{Error, Result};
use crate::fiber::{FiberProfile, TemporalImage};
use crate::patterns::BinaryPatternPair;
use crate::reconstruction::{reconstruct_sectioned, Method};

/// Minimum number of spectral samples for a fit.
pub const MIN_FIT_SAMPLES: usize = 8;
pub const MAX_FIT_ITERATIONS: usize = 200;
pub const FIT_TOLERANCE: f64 = 1e-8;
/// Peak height above the median, in units of the estimated noise, below
/// which a spectrum counts as flat.
pub const PEAK_SIGNIFICANCE: f64 = 5.0;

/// Reconstructed gain as a frequency x position matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumMap {
    pub frequencies: Vec<f64>,
    pub positions: Vec<f64>,
    /// `values[f][p]`.
    pub values: Vec<Vec<f64>>,
}

impl SpectrumMap {
    pub fn new(frequencies: Vec<f64>, positions: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        check_frequency_grid(&frequencies)?;
        if values.len() != frequencies.len() || values.iter().any(|row| row.len() != positions.len()) {
            return Err(Error::Shape(format!(
                "map is not {} x {}",
                frequencies.len(),
                positions.len()
            )));
        }
        Ok(Self {
            frequencies,
            positions,
            values,
        })
    }

    /// Spectrum at one position.
    pub fn column(&self, p: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[p]).collect()
    }

    /// Index of the position closest to `z`.
    pub fn position_index(&self, z: f64) -> usize {
        self.positions
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - z).abs().total_cmp(&(b.1 - z).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

fn check_frequency_grid(frequencies: &[f64]) -> Result<()> {
    if frequencies.is_empty() || frequencies.iter().any(|f| !f.is_finite()) {
        return Err(Error::FrequencyGrid);
    }
    if frequencies.len() > 1 {
        let step = frequencies[1] - frequencies[0];
        if step <= 0.0 {
            return Err(Error::FrequencyGrid);
        }
        let uniform = frequencies
            .windows(2)
            .all(|w| ((w[1] - w[0]) - step).abs() <= 1e-6 * step);
        if !uniform {
            return Err(Error::FrequencyGrid);
        }
    }
    Ok(())
}

/// Uniform frequency list `start, start + step, ..` up to `stop` inclusive.
pub fn frequency_grid(start_mhz: f64, stop_mhz: f64, step_mhz: f64) -> Result<Vec<f64>> {
    if step_mhz.is_nan() || step_mhz <= 0.0 || stop_mhz.is_nan() || stop_mhz < start_mhz {
        return Err(Error::invalid("sweep", "need step > 0 and stop >= start"));
    }
    let n = ((stop_mhz - start_mhz) / step_mhz + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| start_mhz + i as f64 * step_mhz).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub map: SpectrumMap,
    /// Clipped buckets per frequency, in map order.
    pub clip_counts: Vec<usize>,
    /// Largest small-gain ratio encountered.
    pub small_gain_max: f64,
}

/// One full acquisition and reconstruction per frequency of the plan. Rows
/// come back in frequency order regardless of execution order.
pub fn frequency_sweep(
    plan: &AcquisitionPlan,
    fiber: &FiberProfile,
    patterns: &[BinaryPatternPair],
    method: Method,
) -> Result<SweepOutput> {
    check_frequency_grid(&plan.frequencies)?;
    let rows = plan
        .frequencies
        .par_iter()
        .map(|&nu| {
            let run = || -> Result<(TemporalImage, usize, f64)> {
                let acqs = acquire_sectioned(plan, fiber, patterns, nu)?;
                let clips = acqs.iter().flatten().map(|a| a.clip_count).sum();
                let gain = acqs.iter().flatten().map(|a| a.small_gain).fold(0.0, f64::max);
                let image = reconstruct_sectioned(plan, fiber.group_index(), &acqs, patterns, method)?.image;
                Ok((image, clips, gain))
            };
            run().map_err(|e| e.at_frequency(nu))
        })
        .collect::<Result<Vec<_>>>()?;
    let positions = rows[0].0.positions();
    let clip_counts = rows.iter().map(|r| r.1).collect();
    let small_gain_max = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    let values = rows.into_iter().map(|r| r.0.values).collect();
    Ok(SweepOutput {
        map: SpectrumMap::new(plan.frequencies.clone(), positions, values)?,
        clip_counts,
        small_gain_max,
    })
}

/// Spectrum map of the single-pulse comparator on the same read-out grid.
pub fn conventional_sweep(plan: &AcquisitionPlan, fiber: &FiberProfile, averages: usize) -> Result<SpectrumMap> {
    check_frequency_grid(&plan.frequencies)?;
    let rows = plan
        .frequencies
        .par_iter()
        .map(|&nu| conventional_acquire(plan, fiber, nu, averages).map_err(|e| e.at_frequency(nu)))
        .collect::<Result<Vec<_>>>()?;
    let positions = rows[0].positions();
    SpectrumMap::new(
        plan.frequencies.clone(),
        positions,
        rows.into_iter().map(|r| r.values).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorentzianFit {
    pub center_mhz: f64,
    pub fwhm_mhz: f64,
    pub amplitude: f64,
    pub offset: f64,
    pub residual_rms: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// `A / (1 + (2 (nu - c) / fwhm)^2) + B`.
pub fn lorentzian(nu: f64, center: f64, fwhm: f64, amplitude: f64, offset: f64) -> f64 {
    let u = 2.0 * (nu - center) / fwhm;
    amplitude / (1.0 + u * u) + offset
}

// Parameters are [center - origin, fwhm, amplitude, offset].
type Params = Vector4<f64>;

fn residual_and_jacobian(x: &[f64], y: &[f64], p: &Params) -> (f64, Matrix4<f64>, Vector4<f64>) {
    let (c, g, a, b) = (p[0], p[1], p[2], p[3]);
    let mut jtj = Matrix4::zeros();
    let mut jtr = Vector4::zeros();
    let mut sse = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let u = 2.0 * (xi - c) / g;
        let q = 1.0 / (1.0 + u * u);
        let r = yi - (a * q + b);
        let q2 = q * q;
        let j = Vector4::new(4.0 * a * u * q2 / g, 2.0 * a * u * u * q2 / g, q, 1.0);
        sse += r * r;
        jtj += j * j.transpose();
        jtr += j * r;
    }
    (sse, jtj, jtr)
}

fn sse(x: &[f64], y: &[f64], p: &Params) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let r = yi - lorentzian(xi, p[0], p[1], p[2], p[3]);
            r * r
        })
        .sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Robust white-noise estimate from second differences.
pub fn noise_floor(values: &[f64]) -> f64 {
    if values.len() < 3 {
        return 0.0;
    }
    let d2: Vec<f64> = values.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).abs()).collect();
    median(d2) / 0.674_489_75 / 6f64.sqrt()
}

/// Linear least squares for amplitude and offset given center and width.
fn linear_amplitude(x: &[f64], y: &[f64], c: f64, g: f64) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mut sq, mut sqq, mut sy, mut sqy) = (0.0, 0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let q = lorentzian(xi, c, g, 1.0, 0.0);
        sq += q;
        sqq += q * q;
        sy += yi;
        sqy += q * yi;
    }
    let det = n * sqq - sq * sq;
    if det.abs() < 1e-300 {
        return (0.0, sy / n, f64::INFINITY);
    }
    let a = (n * sqy - sq * sy) / det;
    let b = (sy - a * sq) / n;
    let p = Vector4::new(c, g, a, b);
    (a, b, sse(x, y, &p))
}

/// Four-parameter Lorentzian least-squares fit by damped Gauss-Newton.
pub fn lorentzian_fit(frequencies: &[f64], spectrum: &[f64]) -> Result<LorentzianFit> {
    let n = spectrum.len();
    if frequencies.len() != n {
        return Err(Error::Shape(format!(
            "{} frequencies for {n} samples",
            frequencies.len()
        )));
    }
    if n < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_FIT_SAMPLES,
            got: n,
        });
    }
    if spectrum.iter().chain(frequencies).any(|v| !v.is_finite()) {
        return Err(Error::invalid("spectrum", "contains non-finite samples"));
    }

    let mut peak = 0;
    for (i, &v) in spectrum.iter().enumerate() {
        if v > spectrum[peak] {
            peak = i;
        }
    }
    let max = spectrum[peak];
    let min = spectrum.iter().copied().fold(f64::INFINITY, f64::min);
    let med = median(spectrum.to_vec());
    if max - med <= PEAK_SIGNIFICANCE * noise_floor(spectrum) || max <= min {
        return Err(Error::NoPeak);
    }
    if peak == 0 || peak == n - 1 {
        return Err(Error::PeakAtBoundary);
    }

    let origin = frequencies[n / 2];
    let x: Vec<f64> = frequencies.iter().map(|f| f - origin).collect();
    let y = spectrum;
    let step = (x[n - 1] - x[0]) / (n - 1) as f64;

    let amp0 = max - min;
    let half = min + 0.5 * amp0;
    let cross = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let mut prev = peak;
        for i in range {
            if y[i] < half {
                let t = (y[prev] - half) / (y[prev] - y[i]);
                return Some(x[prev] + t * (x[i] - x[prev]));
            }
            prev = i;
        }
        None
    };
    let left = cross(&mut (0..peak).rev());
    let right = cross(&mut (peak + 1..n));
    let width0 = match (left, right) {
        (Some(l), Some(r)) => r - l,
        (Some(l), None) => 2.0 * (x[peak] - l),
        (None, Some(r)) => 2.0 * (r - x[peak]),
        (None, None) => 0.5 * (x[n - 1] - x[0]),
    }
    .max(step.abs());

    let mut p = Params::new(x[peak], width0, amp0, min);
    let mut cost = sse(&x, y, &p);
    let signal: f64 = y.iter().map(|v| (v - min).powi(2)).sum();
    if cost > 0.5 * signal {
        p = coarse_search(&x, y, width0, step).unwrap_or(p);
        cost = sse(&x, y, &p);
    }

    let scales = Vector4::new(origin.abs().max(1.0), 0.0, 0.0, 0.0);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_FIT_ITERATIONS {
        iterations += 1;
        let (c0, jtj, jtr) = residual_and_jacobian(&x, y, &p);
        if c0 == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = None;
        while lambda < 1e20 {
            let mut a = jtj;
            for i in 0..4 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
            }
            let Some(delta) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = p + delta;
            if trial[1] > 0.0 {
                let c1 = sse(&x, y, &trial);
                if c1 <= c0 {
                    accepted = Some((trial, delta, c1));
                    break;
                }
            }
            lambda *= 10.0;
        }
        let Some((trial, delta, c1)) = accepted else {
            // No damping level lowers the cost: stationary point.
            converged = true;
            break;
        };
        p = trial;
        cost = c1;
        lambda = (lambda / 10.0).max(1e-12);
        let tol = [
            FIT_TOLERANCE * (p[0] + origin).abs().max(scales[0]),
            FIT_TOLERANCE * p[1].abs(),
            FIT_TOLERANCE * p[2].abs(),
            FIT_TOLERANCE * (p[3].abs() + p[2].abs()),
        ];
        if (0..4).all(|i| delta[i].abs() <= tol[i]) {
            converged = true;
            break;
        }
    }

    Ok(LorentzianFit {
        center_mhz: p[0] + origin,
        fwhm_mhz: p[1],
        amplitude: p[2],
        offset: p[3],
        residual_rms: (cost / n as f64).sqrt(),
        converged,
        iterations,
    })
}

/// Grid search over centers and widths with linear amplitude/offset.
fn coarse_search(x: &[f64], y: &[f64], width0: f64, step: f64) -> Option<Params> {
    let n = x.len();
    let stride = n.div_ceil(200).max(1);
    let widths = [0.25, 0.5, 1.0, 2.0, 4.0].map(|f| (f * width0).max(step.abs()));
    let mut best: Option<(f64, Params)> = None;
    for i in (0..n).step_by(stride) {
        for &g in &widths {
            let (a, b, cost) = linear_amplitude(x, y, x[i], g);
            if a > 0.0 && best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, Params::new(x[i], g, a, b)));
            }
        }
    }
    best.map(|(_, p)| p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfsPoint {
    pub position_m: f64,
    /// `Err` marks a gap (no peak, boundary peak, ...).
    pub fit: std::result::Result<LorentzianFit, Error>,
}

/// Peak height, relative to the largest value of the whole map, below which
/// a column is treated as empty. Keeps round-off beyond the fiber end from
/// being fitted.
pub const MAP_RELATIVE_FLOOR: f64 = 1e-9;

/// One Lorentzian fit per position column.
pub fn bfs_profile(map: &SpectrumMap) -> Vec<BfsPoint> {
    let map_peak = map.values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    (0..map.positions.len())
        .into_par_iter()
        .map(|p| {
            let column = map.column(p);
            let height = column.iter().copied().fold(f64::NEG_INFINITY, f64::max) - median(column.clone());
            let fit = if height <= MAP_RELATIVE_FLOOR * map_peak {
                Err(Error::NoPeak)
            } else {
                lorentzian_fit(&map.frequencies, &column)
            };
            BfsPoint {
                position_m: map.positions[p],
                fit,
            }
        })
        .collect()
}

/// 10%-90% transition width, in metres, of the edge nearest
/// `nominal_position_m`. Plateau levels are averaged over
/// `[e - h, e - h/2]` and `[e + h/2, e + h]` around the edge centre `e`,
/// with `h = search_half_width_m`.
pub fn edge_width(image: &TemporalImage, nominal_position_m: f64, search_half_width_m: f64) -> Result<f64> {
    let h = search_half_width_m;
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid("search_half_width_m", "must be positive"));
    }
    let pos = image.positions();
    let v = &image.values;
    let in_range =
        |lo: f64, hi: f64| -> Vec<usize> { (0..v.len()).filter(|&j| pos[j] >= lo && pos[j] <= hi).collect() };

    let core = in_range(nominal_position_m - h / 2.0, nominal_position_m + h / 2.0);
    if core.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: core.len(),
        });
    }
    let (mut centre, _) = core
        .iter()
        .filter(|&&j| j > 0 && j + 1 < v.len())
        .map(|&j| (pos[j], (v[j + 1] - v[j - 1]).abs()))
        .fold((pos[core[0]], -1.0), |best, c| if c.1 > best.1 { c } else { best });

    let plateaus = |e: f64| -> Result<(f64, f64, f64)> {
        let left = in_range(e - h, e - h / 2.0);
        let right = in_range(e + h / 2.0, e + h);
        if left.len() < 2 || right.len() < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                got: left.len().min(right.len()),
            });
        }
        let mean = |idx: &[usize]| idx.iter().map(|&j| v[j]).sum::<f64>() / idx.len() as f64;
        let (lo, hi) = (mean(&left), mean(&right));
        let ss: f64 = left.iter().map(|&j| (v[j] - lo).powi(2)).sum::<f64>()
            + right.iter().map(|&j| (v[j] - hi).powi(2)).sum::<f64>();
        let sd = (ss / (left.len() + right.len() - 2).max(1) as f64).sqrt();
        Ok((lo, hi, sd))
    };
    let crossing = |level: f64, e: f64| -> Option<f64> {
        (0..v.len().saturating_sub(1))
            .filter(|&j| pos[j] >= e - h / 2.0 && pos[j + 1] <= e + h / 2.0)
            .filter(|&j| (v[j] - level) * (v[j + 1] - level) <= 0.0 && v[j] != v[j + 1])
            .map(|j| pos[j] + (level - v[j]) / (v[j + 1] - v[j]) * (pos[j + 1] - pos[j]))
            .min_by(|a, b| (a - e).abs().total_cmp(&(b - e).abs()))
    };

    // Re-centre on the 50% crossing so both plateau windows sit clear of the
    // ramp.
    let (lo, hi, _) = plateaus(centre)?;
    if let Some(mid) = crossing(0.5 * (lo + hi), centre) {
        centre = mid;
    }
    let (lo, hi, sd) = plateaus(centre)?;
    let delta = hi - lo;
    if delta == 0.0 || delta.abs() <= 3.0 * sd {
        return Err(Error::EdgeNotResolved);
    }
    let x10 = crossing(lo + 0.1 * delta, centre).ok_or(Error::EdgeNotResolved)?;
    let x90 = crossing(lo + 0.9 * delta, centre).ok_or(Error::EdgeNotResolved)?;
    Ok((x90 - x10).abs())
}

/// Map CSV: header `freq_mhz,<positions...>`, then one row per frequency.
/// Values use the shortest representation that parses back exactly.
pub fn write_map_csv<W: io::Write>(out: W, map: &SpectrumMap) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["freq_mhz".to_string()];
    header.extend(map.positions.iter().map(|p| format!("{p:.4}")));
    w.write_record(&header)?;
    for (f, row) in map.frequencies.iter().zip(&map.values) {
        let mut rec = vec![f.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()
}

pub fn read_map_csv<R: io::Read>(input: R) -> Result<SpectrumMap> {
    let mut rdr = csv::Reader::from_reader(input);
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Shape(format!("map value `{s}`: {e}")))
    };
    let headers = rdr
        .headers()
        .map_err(|e| Error::Shape(format!("map header: {e}")))?
        .clone();
    if headers.get(0) != Some("freq_mhz") {
        return Err(Error::Shape("map header must start with `freq_mhz`".into()));
    }
    let positions = headers.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?;
    let mut frequencies = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Shape(format!("map row: {e}")))?;
        let mut fields = rec.iter();
        frequencies.push(parse(fields.next().unwrap_or(""))?);
        values.push(fields.map(parse).collect::<Result<Vec<_>>>()?);
    }
    SpectrumMap::new(frequencies, positions, values)
}

/// BFS CSV: `position_m,bfs_mhz,fwhm_mhz,amplitude,converged`; gaps leave the
/// fit columns empty.
pub fn write_bfs_csv<W: io::Write>(out: W, profile: &[BfsPoint]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["position_m", "bfs_mhz", "fwhm_mhz", "amplitude", "converged"])?;
    for pt in profile {
        let pos = format!("{:.4}", pt.position_m);
        match &pt.fit {
            Ok(f) => w.write_record([
                pos,
                format!("{:.6}", f.center_mhz),
                format!("{:.6}", f.fwhm_mhz),
                format!("{:.8e}", f.amplitude),
                f.converged.to_string(),
            ])?,
            Err(_) => w.write_record([pos, String::new(), String::new(), String::new(), "false".into()])?,
        }
    }
    w.flush()
}
