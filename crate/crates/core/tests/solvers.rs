use varflow::gradcheck::Instance;
use varflow::tgv::{tgv_lipschitz, tgv_backward, tgv_energy, tgv_forward, TgvGradients};
use varflow::tv::{tv_backward, tv_energy, tv_forward, TvGradients};
use varflow::{CheckpointMode, ConfidenceMap, DiffusionTensor, Field, Precision, SolverConfig};

fn tv_grads(inst: &Instance, cfg: &SolverConfig) -> TvGradients {
    let (uk, store) = tv_forward(&inst.uhat, &inst.c, &inst.w, &inst.u0, cfg).unwrap();
    tv_backward(&uk, &store, &inst.uhat, &inst.c, &inst.w, cfg).unwrap()
}

fn tgv_grads(inst: &Instance, cfg: &SolverConfig) -> TgvGradients {
    let (uk, (a, b), store) =
        tgv_forward(&inst.uhat, &inst.c, &inst.w, inst.beta, &inst.u0, (&inst.w_init.0, &inst.w_init.1), cfg).unwrap();
    tgv_backward(&uk, (&a, &b), &store, &inst.uhat, &inst.c, &inst.w, inst.beta, cfg).unwrap()
}

#[test]
fn checkpointing_is_bit_exact() {
    let inst = Instance::random(6, 5, 11).unwrap();
    for k in [1, 9, 100] {
        let sqrt = SolverConfig::default().with_iters(k);
        let full = sqrt.with_checkpoint(CheckpointMode::Full);
        assert_eq!(tv_grads(&inst, &sqrt), tv_grads(&inst, &full), "tv K={k}");
        assert_eq!(tgv_grads(&inst, &sqrt), tgv_grads(&inst, &full), "tgv K={k}");
    }
}

#[test]
fn stepping_matches_forward() {
    use varflow::tv::{tv_step, TvState};
    let inst = Instance::random(5, 5, 3).unwrap();
    let cfg = SolverConfig::default().with_iters(17);
    let (uk, _) = tv_forward(&inst.uhat, &inst.c, &inst.w, &inst.u0, &cfg).unwrap();
    let scaled = DiffusionTensor::new(inst.w.w0().map(|v| v / 8.0).unwrap(), inst.w.w1().map(|v| v / 8.0).unwrap()).unwrap();
    let mut s = TvState::initial(inst.u0.clone());
    for _ in 0..17 {
        s = tv_step(&s, &inst.uhat, &inst.c, &scaled, cfg.delta).unwrap();
    }
    assert_eq!(s.u, uk);
}

#[test]
fn huge_beta_tgv_tracks_tv() {
    let inst = Instance::random(6, 6, 5).unwrap();
    let beta = 1e6;
    let cfg = SolverConfig::default().with_iters(300);
    let z = Field::zeros(6, 6).unwrap();
    let (tgv, (w0, w1), _) = tgv_forward(&inst.uhat, &inst.c, &inst.w, beta, &inst.u0, (&z, &z), &cfg).unwrap();
    let s = 8.0 / tgv_lipschitz(beta);
    let eff = DiffusionTensor::new(inst.w.w0().map(|v| v * s).unwrap(), inst.w.w1().map(|v| v * s).unwrap()).unwrap();
    let (tv, _) = tv_forward(&inst.uhat, &inst.c, &eff, &inst.u0, &cfg).unwrap();
    let gap = tv.as_slice().iter().zip(tgv.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-3, "max gap {gap}");
    assert!(w0.as_slice().iter().chain(w1.as_slice()).all(|v| v.abs() <= 1e-3));
}

#[test]
fn energy_floors() {
    let z = Field::<f64>::zeros(4, 4).unwrap();
    let c = ConfidenceMap::filled(4, 4, 0.5).unwrap();
    let w = DiffusionTensor::filled(4, 4, 1.0).unwrap();
    assert!((tv_energy(&z, &z, &c, &w, 0.1).unwrap() - 0.08).abs() < 1e-12);
    let e = tgv_energy(&z, &z, &z, &z, &c, &w, 2.0, 0.1).unwrap();
    assert!((e - 5.0 * 16.0 * 0.005).abs() < 1e-12);
}

#[test]
fn mixed_precision_tracks_double() {
    let inst = Instance::random(6, 6, 2).unwrap();
    let cfg = SolverConfig { precision: Precision::Mixed, ..SolverConfig::default().with_iters(60) };
    let (u64_, _) = tv_forward(&inst.uhat, &inst.c, &inst.w, &inst.u0, &cfg).unwrap();
    let f = |x: &Field<f64>| x.cast::<f32>();
    let c32 = inst.c.cast::<f32>();
    let w32 = inst.w.cast::<f32>();
    let (u32_, store) = tv_forward(&f(&inst.uhat), &c32, &w32, &f(&inst.u0), &cfg).unwrap();
    for (a, b) in u64_.as_slice().iter().zip(u32_.as_slice()) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
    let g32 = tv_backward(&u32_, &store, &f(&inst.uhat), &c32, &w32, &cfg).unwrap();
    let g64 = tv_grads(&inst, &cfg);
    let diff = g32.d_uhat.as_slice().iter().zip(g64.d_uhat.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-3, "{diff}");
}
