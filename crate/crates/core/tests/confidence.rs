use varflow::confidence::{boundary_distance, edge_tensor, fwd_bwd_distance, loss_cor, nonmin_suppress, ConfidenceFeatures};
use varflow::matching::correlate;
use varflow::quadfit::quadfit_refine;
use varflow::{FlowField, ScalarMap};

#[test]
fn consistent_flows_have_zero_distance_inside() {
    let fwd = FlowField::constant(6, 6, 1.0, 1.0).unwrap();
    let bwd = FlowField::constant(6, 6, 1.0, 1.0).unwrap();
    let d = fwd_bwd_distance(&fwd, &bwd).unwrap();
    for y in 0..5 {
        for x in 0..5 {
            assert_eq!(d.get(x, y, 0), 0.0);
        }
    }
    let b = boundary_distance(&fwd);
    assert_eq!(b.get(4, 4, 0), 1.0);
    assert_eq!(b.get(0, 0, 0), 1.0);
}

#[test]
fn suppression_keeps_one_per_block_and_never_grows() {
    let m = ScalarMap::new(5, 3, 1, (0..15).map(|i| ((i * 7) % 11) as f64 / 10.0).collect()).unwrap();
    let s = nonmin_suppress(&m);
    for (a, b) in m.values().iter().zip(s.values()) {
        assert!(*b == 0.0 || a == b);
    }
    assert_eq!(s.values().iter().filter(|&&v| v > 0.0).count(), 6);
}

#[test]
fn edge_tensor_is_in_unit_range() {
    let img = ScalarMap::new(4, 4, 1, (0..16).map(|i| (i % 5) as f64 / 4.0).collect()).unwrap();
    let t = edge_tensor(&img, 5.0).unwrap();
    assert!(t.w0().as_slice().iter().chain(t.w1().as_slice()).all(|v| *v > 0.0 && *v <= 1.0));
}

#[test]
fn loss_is_nll_plus_capped_huber() {
    let p = ScalarMap::new(1, 1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let gt = FlowField::constant(1, 1, 0.0, 1.0).unwrap();
    let est = FlowField::constant(1, 1, 0.005, 1.0).unwrap();
    let l = loss_cor(&p, &p, &est, &gt, &[true], 0.1, 0.01).unwrap();
    let expected = -(0.3f64.ln()) - 0.4f64.ln() + 0.1 * 0.5 * 0.005 * 0.005;
    assert!((l - expected).abs() < 1e-15);
    assert_eq!(loss_cor(&p, &p, &est, &gt, &[false], 0.1, 0.01).unwrap(), 0.0);
}

#[test]
fn features_from_a_pipeline() {
    let (w, h) = (8, 6);
    let f = ScalarMap::new(w, h, w * h, (0..w * h * w * h).map(|i| if i % (w * h + 1) == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    let strided = ScalarMap::new(4, 3, 12, (0..144).map(|i| if i % 13 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    let vol = correlate(&strided, &strided, 2).unwrap();
    let ubar = varflow::matching::argmin_flow(&vol.forward[0], &vol.forward[1]).unwrap();
    let refined = quadfit_refine(&f, &f, &ubar).unwrap();
    let feats = ConfidenceFeatures::new(&vol, &refined).unwrap();
    assert_eq!((feats.prob.width(), feats.prob.height(), feats.prob.channels()), (w, h, 2));
    assert!(feats.fb_dist.values().iter().all(|&v| v == 0.0));
    let conf = feats.baseline().unwrap();
    assert!(conf.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
}
