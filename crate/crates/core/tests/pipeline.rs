use fibergi::acquisition::{acquire, acquire_sectioned, calibrated_digitizer, AcquisitionPlan, TransmissionOrder};
use fibergi::fiber::{FiberProfile, FiberSegment, ResponseMode};
use fibergi::patterns::{random_pattern_pairs, walsh_pattern_pairs};
use fibergi::reconstruction::{reconstruct_sectioned, relative_deviation, Method};
use fibergi::spectroscopy::{bfs_profile, edge_width, frequency_grid, frequency_sweep};
use fibergi::Error;

fn short_plan() -> AcquisitionPlan {
    AcquisitionPlan::new(8, 50e-9, 0.5)
}

#[test]
fn noiseless_short_fiber_matches_single_pulse_trace() {
    let fiber = FiberProfile::demo_short();
    let plan = short_plan();
    let patterns = walsh_pattern_pairs(plan.k, plan.bit_duration, plan.duty_cycle).unwrap();
    let acqs = acquire_sectioned(&plan, &fiber, &patterns, 10790.0).unwrap();
    let oracle = fiber
        .conventional_trace(10790.0, plan.pulse_width(), plan.readout_grid())
        .unwrap();
    for method in [Method::Iwht, Method::Whgi] {
        let image = reconstruct_sectioned(&plan, fiber.group_index(), &acqs, &patterns, method)
            .unwrap()
            .image;
        assert_eq!(image.len(), oracle.len());
        assert!((image.delay_start - oracle.delay_start).abs() < 1e-15);
        let peak = oracle.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dev = image
            .values
            .iter()
            .zip(&oracle.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - plan.gamma * b).abs()));
        assert!(dev / (plan.gamma * peak) < 1e-9, "{method:?}: {dev}");
    }
}

#[test]
fn backscatter_mode_round_trips() {
    let fiber = FiberProfile::builder(vec![
        FiberSegment::new(400.0, 10860.0).with_backscatter(1e-7),
        FiberSegment::new(200.0, 10860.0).with_backscatter(3e-7),
    ])
    .mode(ResponseMode::Backscatter)
    .build()
    .unwrap();
    let plan = AcquisitionPlan::new(7, 50e-9, 0.5).with_shifts(1);
    let patterns = walsh_pattern_pairs(plan.k, plan.bit_duration, plan.duty_cycle).unwrap();
    let acqs = acquire_sectioned(&plan, &fiber, &patterns, 0.0).unwrap();
    let image = reconstruct_sectioned(&plan, fiber.group_index(), &acqs, &patterns, Method::Iwht)
        .unwrap()
        .image;
    let oracle = fiber
        .conventional_trace(0.0, plan.pulse_width(), plan.readout_grid())
        .unwrap();
    assert!(relative_deviation(&oracle.values, &image.values) < 1e-9);
}

#[test]
fn same_seed_same_buckets() {
    let fiber = FiberProfile::demo_short();
    let plan = short_plan();
    let patterns = walsh_pattern_pairs(plan.k, plan.bit_duration, plan.duty_cycle).unwrap();
    let dig = calibrated_digitizer(&plan, &fiber, &patterns, 10860.0, 0.005, 14, 11).unwrap();
    let plan = plan.with_digitizer(Some(dig));
    let a = acquire(&plan, &fiber, &patterns, 10790.0, 0, 2).unwrap();
    let b = acquire(&plan, &fiber, &patterns, 10790.0, 0, 2).unwrap();
    assert_eq!(a, b);

    let mut other = plan.clone();
    other.digitizer.as_mut().unwrap().seed = 12;
    let c = acquire(&other, &fiber, &patterns, 10790.0, 0, 2).unwrap();
    assert_ne!(a.records, c.records);

    let d = acquire(&plan, &fiber, &patterns, 10790.0, 0, 3).unwrap();
    assert_ne!(a.records[0].d - d.records[0].d, 0.0);

    let mut blocked = plan.clone();
    blocked.order = TransmissionOrder::Blocked;
    let e = acquire(&blocked, &fiber, &patterns, 10790.0, 0, 2).unwrap();
    assert_eq!(e.records[0].d, a.records[0].d);
    assert_ne!(e.records[0].d_inverse, a.records[0].d_inverse);
}

#[test]
fn too_few_sections_is_a_coverage_error() {
    let fiber = FiberProfile::demo_long();
    let plan = AcquisitionPlan::new(7, 100e-9, 0.5).with_sections(10);
    let patterns = walsh_pattern_pairs(plan.k, plan.bit_duration, plan.duty_cycle).unwrap();
    match acquire_sectioned(&plan, &fiber, &patterns, 10860.0) {
        Err(Error::Coverage { required, .. }) => assert_eq!(required, 40),
        other => panic!("{other:?}"),
    }
}

#[test]
fn random_patterns_approach_the_trace() {
    let fiber = FiberProfile::demo_short();
    let plan = AcquisitionPlan::new(6, 400e-9, 0.5).with_shifts(1);
    let patterns = random_pattern_pairs(plan.k, 8192, 4, plan.bit_duration, plan.duty_cycle).unwrap();
    let acqs = acquire_sectioned(&plan, &fiber, &patterns, 10860.0).unwrap();
    let image = reconstruct_sectioned(&plan, fiber.group_index(), &acqs, &patterns, Method::Rsgi)
        .unwrap()
        .image;
    let oracle = fiber
        .conventional_trace(10860.0, plan.pulse_width(), plan.readout_grid())
        .unwrap();
    let dev = relative_deviation(&oracle.values, &image.values);
    assert!(dev < 0.25, "{dev}");
}

#[test]
fn sweep_recovers_segment_frequencies() {
    let fiber = FiberProfile::demo_short();
    let plan = short_plan().with_frequencies(frequency_grid(10700.0, 10950.0, 2.0).unwrap());
    let patterns = walsh_pattern_pairs(plan.k, plan.bit_duration, plan.duty_cycle).unwrap();
    let out = frequency_sweep(&plan, &fiber, &patterns, Method::Iwht).unwrap();
    assert_eq!(out.map.frequencies.len(), 126);
    assert!(out.small_gain_max < 0.01);
    let profile = bfs_profile(&out.map);
    for (z, bfs) in [(500.0, 10860.0), (1010.0, 10790.0)] {
        let p = out.map.position_index(z);
        let fit = profile[p].fit.as_ref().unwrap();
        assert!((fit.center_mhz - bfs).abs() < 1.0, "{z}: {}", fit.center_mhz);
        assert!((fit.fwhm_mhz - 30.0).abs() < 1.0);
    }
    let beyond = out.map.position_index(1200.0);
    assert!(profile[beyond].fit.is_err());

    let row = out.map.frequencies.iter().position(|&f| f == 10790.0).unwrap();
    let at_10790 = fibergi::fiber::TemporalImage {
        values: out.map.values[row].clone(),
        ..fiber
            .conventional_trace(10790.0, plan.pulse_width(), plan.readout_grid())
            .unwrap()
    };
    let w = edge_width(&at_10790, 1000.0, 10.0).unwrap();
    assert!((1.6..=3.5).contains(&w), "{w}");
}
