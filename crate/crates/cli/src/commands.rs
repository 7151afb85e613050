//! Subcommand implementations. Each writes its artifacts atomically into the
//! experiment's output directory and returns a short report.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use fibergi::acquisition::{
    acquire_sectioned, calibrated_digitizer, peak_response_frequency, read_records_csv, write_records_csv,
    AcquisitionPlan, AcquisitionRecord, ShiftAcquisition,
};
use fibergi::fiber::TemporalImage;
use fibergi::patterns::{patterns_to_text, random_pattern_pairs, walsh_pattern_pairs, BinaryPatternPair};
use fibergi::reconstruction::reconstruct_sectioned;
use fibergi::spectroscopy::{
    bfs_profile, conventional_sweep, frequency_sweep, read_map_csv, write_bfs_csv, write_map_csv, BfsPoint, SpectrumMap,
};
use fibergi::Error;
use serde_json::json;

use crate::config::Experiment;

/// Offsets the experiment seed for random pattern generation so that the
/// pattern and noise streams never coincide.
const PATTERN_SEED_OFFSET: u64 = 0x7061_7474_6572_6e73;

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub dump_patterns: bool,
    pub compare_oracle: bool,
}

/// Files written and human-readable lines for the terminal.
#[derive(Debug, Default)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub lines: Vec<String>,
}

/// Writes through a temporary file in the target directory, then renames it
/// into place.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> anyhow::Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp =
        tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temporary file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        write(&mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush()?;
    }
    tmp.persist(path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn frequency_label(f: f64) -> String {
    format!("{}", tidy(f))
}

/// Rounds to 9 significant digits so that values like `5 / 50e-9` print as
/// the number they stand for.
fn tidy(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(8 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}

fn format_rate(hz: f64) -> String {
    if hz >= 1e6 {
        format!("{} MHz", tidy(hz / 1e6))
    } else if hz >= 1e3 {
        format!("{} kHz", tidy(hz / 1e3))
    } else {
        format!("{} Hz", tidy(hz))
    }
}

pub fn patterns_for(exp: &Experiment) -> anyhow::Result<Vec<BinaryPatternPair>> {
    let p = &exp.plan;
    let pairs = if exp.method.uses_random_patterns() {
        random_pattern_pairs(
            p.k,
            exp.config.rsgi_pairs,
            exp.config.seed.wrapping_add(PATTERN_SEED_OFFSET),
            p.bit_duration,
            p.duty_cycle,
        )?
    } else {
        walsh_pattern_pairs(p.k, p.bit_duration, p.duty_cycle)?
    };
    Ok(pairs)
}

/// The plan with its digitizer calibrated. Noise is calibrated against the
/// Walsh patterns so that every method sees the same absolute noise.
pub fn calibrated_plan(exp: &Experiment) -> anyhow::Result<AcquisitionPlan> {
    let Some(d) = &exp.config.digitizer else {
        return Ok(exp.plan.clone());
    };
    let p = &exp.plan;
    let walsh = walsh_pattern_pairs(p.k, p.bit_duration, p.duty_cycle)?;
    let reference = match d.reference_mhz {
        Some(f) => f,
        None => peak_response_frequency(p, &exp.fiber, &walsh)?,
    };
    let dig = calibrated_digitizer(
        p,
        &exp.fiber,
        &walsh,
        reference,
        d.relative_noise,
        d.resolution_bits,
        exp.config.seed,
    )?;
    Ok(p.clone().with_digitizer(Some(dig)))
}

pub fn plan_summary(exp: &Experiment) -> Vec<String> {
    let p = &exp.plan;
    let n = exp.fiber.group_index();
    vec![
        format!(
            "fiber: {} m in {} segment(s); plan: k={} bit={} ns duty={} sections={} shifts={}",
            exp.fiber.total_length(),
            exp.fiber.segments().len(),
            p.k,
            tidy(p.bit_duration * 1e9),
            p.duty_cycle,
            p.sections,
            p.shifts
        ),
        format!("bucket sample rate: {}", format_rate(p.sample_rate())),
        format!(
            "conventional sample rate: {} (Nyquist for the {} ns pulse: {})",
            format_rate(p.conventional_sample_rate()),
            tidy(p.pulse_width() * 1e9),
            format_rate(p.nyquist_sample_rate())
        ),
        format!("reduction factor: {}x", p.reduction_factor()),
        format!(
            "read-out step: {:.4} m, effective pulse window: {:.4} m",
            p.bit_length_m(n) / p.shifts as f64,
            fibergi::fiber::window_length(p.pulse_width(), n)
        ),
    ]
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn dump_patterns(exp: &Experiment, patterns: &[BinaryPatternPair], report: &mut Report) -> anyhow::Result<()> {
    let path = exp.config.output_dir.join("patterns.txt");
    let text = patterns_to_text(patterns);
    write_atomic(&path, |w| w.write_all(text.as_bytes()))?;
    report.files.push(path);
    Ok(())
}

pub fn records_path(exp: &Experiment, f: f64) -> PathBuf {
    exp.config
        .output_dir
        .join(format!("records_{}.csv", frequency_label(f)))
}

pub fn image_path(exp: &Experiment, f: f64) -> PathBuf {
    exp.config.output_dir.join(format!("image_{}.csv", frequency_label(f)))
}

/// Acquires every frequency of the sweep and writes one records file each.
pub fn simulate(exp: &Experiment, opts: RunOptions) -> anyhow::Result<Report> {
    ensure_dir(&exp.config.output_dir)?;
    let mut report = Report {
        lines: plan_summary(exp),
        ..Report::default()
    };
    let patterns = patterns_for(exp)?;
    if opts.dump_patterns {
        dump_patterns(exp, &patterns, &mut report)?;
    }
    let plan = calibrated_plan(exp)?;
    let mut clips = 0;
    for &f in &plan.frequencies {
        let acqs = acquire_sectioned(&plan, &exp.fiber, &patterns, f).map_err(|e| e.at_frequency(f))?;
        clips += acqs.iter().flatten().map(|a| a.clip_count).sum::<usize>();
        let records: Vec<AcquisitionRecord> = acqs.iter().flatten().flat_map(|a| a.records.iter().copied()).collect();
        let path = records_path(exp, f);
        write_atomic(&path, |w| write_records_csv(w, &records))?;
        report.files.push(path);
    }
    if clips > 0 {
        report.lines.push(format!("clipped buckets: {clips}"));
    }
    Ok(report)
}

/// Regroups a records file into per-section, per-shift acquisitions.
pub fn group_records(
    plan: &AcquisitionPlan,
    f: f64,
    records: Vec<AcquisitionRecord>,
) -> anyhow::Result<Vec<Vec<ShiftAcquisition>>> {
    let mut groups: BTreeMap<(usize, usize), Vec<AcquisitionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.section, r.shift)).or_default().push(r);
    }
    let missing: Vec<usize> = (0..plan.sections)
        .filter(|&m| (0..plan.shifts).any(|q| !groups.contains_key(&(m, q))))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingSections(missing).at_frequency(f).into());
    }
    Ok((0..plan.sections)
        .map(|m| {
            (0..plan.shifts)
                .map(|q| ShiftAcquisition {
                    frequency_mhz: f,
                    section: m,
                    shift: q,
                    records: groups.remove(&(m, q)).unwrap_or_default(),
                    clip_count: 0,
                    small_gain: 0.0,
                })
                .collect()
        })
        .collect())
}

fn write_image_csv(w: &mut dyn Write, image: &TemporalImage, oracle: Option<&[f64]>) -> io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if oracle.is_some() {
        out.write_record(["position_m", "delay_s", "value", "oracle"])?;
    } else {
        out.write_record(["position_m", "delay_s", "value"])?;
    }
    for j in 0..image.len() {
        let mut rec = vec![
            format!("{:.4}", image.position(j)),
            format!("{:.6e}", image.delay(j)),
            format!("{:.8e}", image.values[j]),
        ];
        if let Some(o) = oracle {
            rec.push(format!("{:.8e}", o[j]));
        }
        out.write_record(&rec)?;
    }
    out.flush()
}

/// Reconstructs the records files written by [`simulate`].
pub fn reconstruct(exp: &Experiment, opts: RunOptions) -> anyhow::Result<Report> {
    ensure_dir(&exp.config.output_dir)?;
    let mut report = Report::default();
    let patterns = patterns_for(exp)?;
    if opts.dump_patterns {
        dump_patterns(exp, &patterns, &mut report)?;
    }
    let plan = &exp.plan;
    for &f in &plan.frequencies {
        let path = records_path(exp, f);
        let file = fs::File::open(&path).map_err(|e| anyhow!("missing input {}: {e}", path.display()))?;
        let records = read_records_csv(io::BufReader::new(file)).with_context(|| path.display().to_string())?;
        let acqs = group_records(plan, f, records)?;
        let result = reconstruct_sectioned(plan, exp.fiber.group_index(), &acqs, &patterns, exp.method)
            .map_err(|e| e.at_frequency(f))?;
        let oracle = if opts.compare_oracle {
            let trace = exp
                .fiber
                .conventional_trace(f, plan.pulse_width(), plan.readout_grid())?;
            let o: Vec<f64> = trace.values.iter().map(|v| plan.gamma * v).collect();
            let n = o.len().min(result.image.len());
            let rms = (result.image.values[..n]
                .iter()
                .zip(&o[..n])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / n as f64)
                .sqrt();
            let peak = o.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            report.lines.push(format!(
                "{} MHz: RMS deviation from oracle {rms:.4e} ({:.4e} of peak)",
                frequency_label(f),
                if peak > 0.0 { rms / peak } else { rms }
            ));
            Some(o)
        } else {
            None
        };
        let out = image_path(exp, f);
        write_atomic(&out, |w| write_image_csv(w, &result.image, oracle.as_deref()))?;
        report.files.push(out);
    }
    Ok(report)
}

fn write_map(path: &Path, map: &SpectrumMap, report: &mut Report) -> anyhow::Result<()> {
    write_atomic(path, |w| write_map_csv(w, map))?;
    report.files.push(path.to_path_buf());
    Ok(())
}

fn write_bfs(path: &Path, profile: &[BfsPoint], report: &mut Report) -> anyhow::Result<()> {
    write_atomic(path, |w| write_bfs_csv(w, profile))?;
    report.files.push(path.to_path_buf());
    Ok(())
}

fn gap_count(profile: &[BfsPoint]) -> usize {
    profile.iter().filter(|p| p.fit.is_err()).count()
}

/// Sweeps every frequency, fits the Brillouin frequency at every position
/// and writes the map, the profile and a run manifest.
pub fn sweep(exp: &Experiment, opts: RunOptions) -> anyhow::Result<Report> {
    ensure_dir(&exp.config.output_dir)?;
    let mut report = Report {
        lines: plan_summary(exp),
        ..Report::default()
    };
    let patterns = patterns_for(exp)?;
    if opts.dump_patterns {
        dump_patterns(exp, &patterns, &mut report)?;
    }
    let start = Instant::now();
    let plan = calibrated_plan(exp)?;
    let calibration_ms = start.elapsed().as_millis();
    let out = frequency_sweep(&plan, &exp.fiber, &patterns, exp.method)?;
    let sweep_ms = start.elapsed().as_millis() - calibration_ms;
    let profile = bfs_profile(&out.map);
    let fit_ms = start.elapsed().as_millis() - calibration_ms - sweep_ms;

    let dir = &exp.config.output_dir;
    write_map(&dir.join("spectrum_map.csv"), &out.map, &mut report)?;
    write_bfs(&dir.join("bfs_profile.csv"), &profile, &mut report)?;

    let clips: usize = out.clip_counts.iter().sum();
    if clips > 0 {
        log::warn!("{clips} buckets clipped over the sweep");
    }
    report.lines.push(format!(
        "{} frequencies x {} positions, {} positions without a peak, small-gain ratio {:.3e}",
        out.map.frequencies.len(),
        out.map.positions.len(),
        gap_count(&profile),
        out.small_gain_max
    ));
    let dig = plan.digitizer.as_ref();
    let manifest = json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config": exp.config,
        "fiber": exp.fiber_config,
        "seed": exp.config.seed,
        "method": exp.method.name(),
        "sections": plan.sections,
        "sample_rate_hz": plan.sample_rate(),
        "conventional_sample_rate_hz": plan.conventional_sample_rate(),
        "reduction_factor": plan.reduction_factor(),
        "noise_sigma": dig.map(|d| d.noise_sigma),
        "full_scale": dig.map(|d| d.full_scale),
        "clip_counts": out.map.frequencies.iter().zip(&out.clip_counts)
            .map(|(f, c)| json!({"freq_mhz": f, "clipped": c}))
            .collect::<Vec<_>>(),
        "small_gain_max": out.small_gain_max,
        "timings_ms": {"calibration": calibration_ms, "sweep": sweep_ms, "fit": fit_ms},
    });
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&path, |w| w.write_all(text.as_bytes()))?;
    report.files.push(path);
    Ok(report)
}

/// Fits a previously written spectrum map.
pub fn fit(exp: &Experiment) -> anyhow::Result<Report> {
    let dir = &exp.config.output_dir;
    let path = dir.join("spectrum_map.csv");
    let file = fs::File::open(&path).map_err(|e| anyhow!("missing input {}: {e}", path.display()))?;
    let map = read_map_csv(io::BufReader::new(file)).with_context(|| path.display().to_string())?;
    let profile = bfs_profile(&map);
    let mut report = Report::default();
    write_bfs(&dir.join("bfs_profile.csv"), &profile, &mut report)?;
    report.lines.push(format!(
        "{} positions, {} without a peak",
        profile.len(),
        gap_count(&profile)
    ));
    Ok(report)
}

/// Number of single-pulse traces averaged by the comparator: one per
/// transmitted sequence of a ghost-imaging acquisition.
pub fn comparator_averages(plan: &AcquisitionPlan) -> usize {
    2 * plan.bits_per_sequence()
}

/// Ghost-imaging sweep next to the single-pulse comparator, with the
/// per-position difference of the fitted Brillouin frequencies.
pub fn compare(exp: &Experiment, opts: RunOptions) -> anyhow::Result<Report> {
    let mut report = sweep(exp, opts)?;
    let dir = &exp.config.output_dir;
    let gi_map = read_map_csv(io::BufReader::new(fs::File::open(dir.join("spectrum_map.csv"))?))?;
    let gi = bfs_profile(&gi_map);
    let plan = calibrated_plan(exp)?;
    let conv_map = conventional_sweep(&plan, &exp.fiber, comparator_averages(&plan))?;
    let conv = bfs_profile(&conv_map);
    write_map(&dir.join("conventional_map.csv"), &conv_map, &mut report)?;
    write_bfs(&dir.join("conventional_bfs.csv"), &conv, &mut report)?;

    let mut worst: Option<f64> = None;
    let path = dir.join("comparison.csv");
    write_atomic(&path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["position_m", "bfs_gi_mhz", "bfs_conventional_mhz", "difference_mhz"])?;
        for (a, b) in gi.iter().zip(&conv) {
            let cell = |p: &BfsPoint| {
                p.fit
                    .as_ref()
                    .map(|f| format!("{:.6}", f.center_mhz))
                    .unwrap_or_default()
            };
            let diff = match (&a.fit, &b.fit) {
                (Ok(x), Ok(y)) => {
                    let d = x.center_mhz - y.center_mhz;
                    worst = Some(worst.map_or(d.abs(), |m: f64| m.max(d.abs())));
                    format!("{d:.6}")
                }
                _ => String::new(),
            };
            out.write_record([format!("{:.4}", a.position_m), cell(a), cell(b), diff])?;
        }
        out.flush()
    })?;
    report.files.push(path);
    if let Some(w) = worst {
        report.lines.push(format!(
            "largest BFS difference to the single-pulse comparator: {w:.3} MHz"
        ));
    }
    Ok(report)
}
