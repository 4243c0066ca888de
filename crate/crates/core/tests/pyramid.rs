use varflow::pyramid::{downsample_inputs, solve_pyramid, upsample_flow};
use varflow::{ConfidenceMap, DiffusionTensor, Field, FlowField, Model, PyramidConfig, SolverConfig};

fn single_pixel_instance() -> (FlowField<f64>, ConfidenceMap<f64>, DiffusionTensor<f64>) {
    let u0 = Field::from_fn(16, 16, |x, y| if (x, y) == (5, 9) { 2.5 } else { 0.3 * ((x * 3 + y) % 4) as f64 }).unwrap();
    let u1 = Field::from_fn(16, 16, |x, y| if (x, y) == (5, 9) { -1.0 } else { 0.0 }).unwrap();
    let c = Field::from_fn(16, 16, |x, y| if (x, y) == (5, 9) { 1.0 } else { 0.0 }).unwrap();
    (FlowField::new(u0, u1).unwrap(), ConfidenceMap::new(c).unwrap(), DiffusionTensor::filled(16, 16, 1.0).unwrap())
}

#[test]
fn three_levels_match_long_single_level() {
    let (u, c, w) = single_pixel_instance();
    let levels = PyramidConfig { iters_per_level: vec![500, 500, 1000], ..Default::default() };
    let single = PyramidConfig::direct(Model::Tv, SolverConfig::default(), 2000);
    let a = solve_pyramid(&u, &c, &w, &levels).unwrap();
    let b = solve_pyramid(&u, &c, &w, &single).unwrap();
    let epe = a.mean_epe(&b).unwrap();
    assert!(epe < 5e-3, "{epe}");
}

#[test]
fn down_then_up_reproduces_ramps() {
    let ramp = FlowField::new(
        Field::from_fn(12, 10, |x, y| 0.05 * x as f64 - 0.02 * y as f64).unwrap(),
        Field::from_fn(12, 10, |x, _| 0.03 * x as f64).unwrap(),
    )
    .unwrap();
    let c = ConfidenceMap::filled(12, 10, 0.5).unwrap();
    let w = DiffusionTensor::filled(12, 10, 1.0).unwrap();
    let (coarse, c2, w2) = downsample_inputs(&ramp, &c, &w).unwrap();
    assert!(c2.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(w2.w0().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    let back = upsample_flow(&coarse, 12, 10).unwrap();
    for y in 0..10 {
        for x in 0..12 {
            let (a, b) = (ramp.get(x, y), back.get(x, y));
            assert!((a.0 - b.0).abs() < 0.1 && (a.1 - b.1).abs() < 0.1);
        }
    }
}

#[test]
fn constant_flow_round_trip_is_exact() {
    let u = FlowField::constant(9, 7, 1.25, -3.5).unwrap();
    let c = ConfidenceMap::filled(9, 7, 1.0).unwrap();
    let w = DiffusionTensor::filled(9, 7, 1.0).unwrap();
    let (coarse, _, _) = downsample_inputs(&u, &c, &w).unwrap();
    assert_eq!(upsample_flow(&coarse, 9, 7).unwrap(), u);
}

#[test]
fn mixed_precision_pyramid_is_close_to_double() {
    let (u, c, w) = single_pixel_instance();
    let base = PyramidConfig { iters_per_level: vec![50, 50, 100], model: Model::Tgv, ..Default::default() };
    let mixed = PyramidConfig { solver: SolverConfig { precision: varflow::Precision::Mixed, ..base.solver }, ..base.clone() };
    let a = solve_pyramid(&u, &c, &w, &base).unwrap();
    let b = solve_pyramid(&u, &c, &w, &mixed).unwrap();
    assert!(a.mean_epe(&b).unwrap() < 1e-4);
}
