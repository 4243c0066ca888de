use std::path::Path;
use std::process::{Command, Output};

use varflow::io::{read_flo, write_flo, write_map};
use varflow::pyramid::solve_pyramid;
use varflow::tv::tv_energy;
use varflow::{ConfidenceMap, DiffusionTensor, Field, FlowField, Model, PyramidConfig, ScalarMap, SolverConfig};

fn varflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varflow")).args(args).current_dir(dir).output().unwrap()
}

fn stdout_value(out: &Output, key: &str) -> String {
    let text = String::from_utf8_lossy(&out.stdout);
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

fn random_problem(dir: &Path, w: usize, h: usize) -> (FlowField<f32>, ScalarMap<f32>, ScalarMap<f32>) {
    let u = FlowField::new(
        Field::from_fn(w, h, |x, y| ((x * 5 + y * 3) % 7) as f32 * 0.4 - 1.0).unwrap(),
        Field::from_fn(w, h, |x, y| ((x + y * 2) % 5) as f32 * 0.3).unwrap(),
    )
    .unwrap();
    let c = ScalarMap::new(w, h, 1, (0..w * h).map(|i| if i % 5 == 0 { 0.8 } else { 0.02 }).collect()).unwrap();
    let t = ScalarMap::new(w, h, 2, (0..w * h * 2).map(|i| 0.2 + 0.7 * ((i * 13) % 10) as f32 / 10.0).collect()).unwrap();
    write_flo(&u, dir.join("uhat.flo")).unwrap();
    write_map(&c, dir.join("conf.f32m")).unwrap();
    write_map(&t, dir.join("tensor.f32m")).unwrap();
    (u, c, t)
}

const PROBLEM: [&str; 6] = ["--uhat", "uhat.flo", "--conf", "conf.f32m", "--tensor", "tensor.f32m"];

#[test]
fn inpaint_keeps_constant_confident_flow() {
    let dir = tempfile::tempdir().unwrap();
    let u = FlowField::constant(8, 6, 1.25f32, -0.5).unwrap();
    write_flo(&u, dir.path().join("uhat.flo")).unwrap();
    write_map(&ScalarMap::new(8, 6, 1, vec![1.0f32; 48]).unwrap(), dir.path().join("conf.f32m")).unwrap();
    write_map(&ScalarMap::new(8, 6, 2, vec![1.0f32; 96]).unwrap(), dir.path().join("tensor.f32m")).unwrap();
    let out = varflow(dir.path(), &[&["inpaint"][..], &PROBLEM[..], &["--level-iters", "10,10,10", "--out", "o.flo"]].concat());
    assert!(out.status.success());
    assert_eq!(read_flo(dir.path().join("o.flo")).unwrap(), u);
}

#[test]
fn single_level_equals_library_solve_and_repeats_bytewise() {
    let dir = tempfile::tempdir().unwrap();
    let (u, c, t) = random_problem(dir.path(), 9, 7);
    let args = [&["inpaint"][..], &PROBLEM[..], &["--levels", "1", "--level-iters", "500", "--out", "a.flo"]].concat();
    assert!(varflow(dir.path(), &args).status.success());
    let first = std::fs::read(dir.path().join("a.flo")).unwrap();
    assert!(varflow(dir.path(), &args).status.success());
    assert_eq!(first, std::fs::read(dir.path().join("a.flo")).unwrap());

    let u64_: FlowField<f64> = u.cast();
    let c = ConfidenceMap::new(c.cast::<f64>().channel(0).unwrap()).unwrap();
    let t = t.cast::<f64>();
    let w = DiffusionTensor::new(t.channel(0).unwrap(), t.channel(1).unwrap()).unwrap();
    let direct = solve_pyramid(&u64_, &c, &w, &PyramidConfig::direct(Model::Tv, SolverConfig::default(), 500)).unwrap();
    assert_eq!(read_flo(dir.path().join("a.flo")).unwrap(), direct.cast::<f32>());
}

#[test]
fn inpaint_from_image_and_png() {
    let dir = tempfile::tempdir().unwrap();
    random_problem(dir.path(), 8, 8);
    let img = image::GrayImage::from_fn(8, 8, |x, y| image::Luma([(x * 24 + y * 3) as u8]));
    img.save(dir.path().join("img.png")).unwrap();
    let out = varflow(
        dir.path(),
        &["inpaint", "--uhat", "uhat.flo", "--conf", "conf.f32m", "--image", "img.png", "--model", "tgv", "--level-iters", "20,20", "--out", "o.flo", "--png", "o.png"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_value(&out, "levels"), "2");
    assert!(std::fs::read(dir.path().join("o.png")).unwrap().starts_with(b"\x89PNG"));
}

fn one_hot(w: usize, h: usize, shift: usize) -> ScalarMap<f32> {
    let n = w * h + shift;
    ScalarMap::new(
        w,
        h,
        n,
        (0..w * h).flat_map(|i| (0..n).map(move |k| if k == i + shift { 1.0 } else { 0.0 })).collect(),
    )
    .unwrap()
}

#[test]
fn costvol_identical_and_shifted_features() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h) = (6, 4);
    write_map(&one_hot(w, h, 0), dir.path().join("a.f32m")).unwrap();
    let out = varflow(dir.path(), &["costvol", "--feat0", "a.f32m", "--feat1", "a.f32m", "--range", "3", "--out", "z.flo", "--prob0", "p0.f32m"]);
    assert!(out.status.success());
    let z = read_flo(dir.path().join("z.flo")).unwrap();
    assert!(z.u0.as_slice().iter().chain(z.u1.as_slice()).all(|&v| v == 0.0));

    let f1 = one_hot(w, h, 0);
    let f0 = ScalarMap::new(
        w,
        h,
        w * h,
        (0..w * h)
            .flat_map(|i| {
                let (x, y) = (i % w, i / w);
                (0..w * h).map(move |k| if x + 2 < w && k == y * w + x + 2 { 1.0 } else { 0.0 })
            })
            .collect(),
    )
    .unwrap();
    write_map(&f0, dir.path().join("s0.f32m")).unwrap();
    write_map(&f1, dir.path().join("s1.f32m")).unwrap();
    let out = varflow(dir.path(), &["costvol", "--feat0", "s0.f32m", "--feat1", "s1.f32m", "--range", "3", "--out", "s.flo"]);
    assert!(out.status.success());
    let s = read_flo(dir.path().join("s.flo")).unwrap();
    for y in 0..h {
        for x in 0..w - 2 {
            assert_eq!(s.get(x, y), (2.0, 0.0));
        }
    }
}

fn quadratic_features(w: usize, h: usize, s: [f64; 2]) -> (ScalarMap<f64>, ScalarMap<f64>) {
    let f0 = (0..w * h).flat_map(|i| {
        let (x, y) = ((i % w) as f64 + s[0], (i / w) as f64 + s[1]);
        [-(x * x + y * y), 2.0 * x, 2.0 * y, -1.0]
    });
    let f1 = (0..w * h).flat_map(|i| {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        [1.0, x, y, x * x + y * y]
    });
    (ScalarMap::new(w, h, 4, f0.collect()).unwrap(), ScalarMap::new(w, h, 4, f1.collect()).unwrap())
}

#[test]
fn costvol_refine_recovers_subpixel_shift() {
    let dir = tempfile::tempdir().unwrap();
    let (hr0, hr1) = quadratic_features(8, 8, [0.25, -0.5]);
    write_map(&hr0, dir.path().join("hr0.f32m")).unwrap();
    write_map(&hr1, dir.path().join("hr1.f32m")).unwrap();
    let strided = one_hot(4, 4, 0);
    write_map(&strided, dir.path().join("f.f32m")).unwrap();
    let out = varflow(
        dir.path(),
        &["costvol", "--feat0", "f.f32m", "--feat1", "f.f32m", "--range", "2", "--out", "u.flo", "--refine", "--hr0", "hr0.f32m", "--hr1", "hr1.f32m", "--refined", "r.flo", "--fail-mask", "m.f32m", "--fit-cost", "c.f32m"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_flo(dir.path().join("r.flo")).unwrap();
    for y in 1..7 {
        for x in 1..6 {
            let (u0, u1) = r.get(x, y);
            assert!((u0 - 0.25).abs() < 1e-4 && (u1 + 0.5).abs() < 1e-4, "({x},{y}) {u0} {u1}");
        }
    }
    let q = varflow(dir.path(), &["quadfit", "--ubar", "u.flo", "--hr0", "hr0.f32m", "--hr1", "hr1.f32m", "--refined", "q.flo"]);
    assert!(q.status.success());
    assert_eq!(std::fs::read(dir.path().join("q.flo")).unwrap(), std::fs::read(dir.path().join("r.flo")).unwrap());
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = varflow(dir.path(), &["gradcheck", "--seed", "0"]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(stdout_value(&ok, "status"), "pass");
    let strict = varflow(dir.path(), &["gradcheck", "--tol", "0"]);
    assert_eq!(strict.status.code(), Some(3));
    assert!(stdout_value(&strict, "worst_x").parse::<usize>().is_ok());
    let tiny = varflow(dir.path(), &["gradcheck", "--grid", "1x1"]);
    assert_eq!(tiny.status.code(), Some(0));
    let tgv = varflow(dir.path(), &["gradcheck", "--model", "tgv", "--grid", "5x5", "--iters", "30"]);
    assert_eq!(tgv.status.code(), Some(0));
    assert!(stdout_value(&tgv, "max_rel.beta").parse::<f64>().is_ok());
}

#[test]
fn energy_floor_and_library_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let u = FlowField::constant(4, 4, 0.7f32, 0.7).unwrap();
    write_flo(&u, dir.path().join("uhat.flo")).unwrap();
    write_map(&ScalarMap::new(4, 4, 1, vec![0.5f32; 16]).unwrap(), dir.path().join("conf.f32m")).unwrap();
    write_map(&ScalarMap::new(4, 4, 2, vec![1.0f32; 32]).unwrap(), dir.path().join("tensor.f32m")).unwrap();
    let out = varflow(dir.path(), &[&["energy"][..], &PROBLEM[..], &["--flow", "uhat.flo"]].concat());
    assert!(out.status.success());
    assert!((stdout_value(&out, "energy_u0").parse::<f64>().unwrap() - 0.08).abs() < 1e-12);
    let tgv = varflow(dir.path(), &[&["energy"][..], &PROBLEM[..], &["--flow", "uhat.flo", "--model", "tgv", "--beta", "2"]].concat());
    assert!((stdout_value(&tgv, "energy_u1").parse::<f64>().unwrap() - 5.0 * 16.0 * 0.005).abs() < 1e-12);

    let (u, c, t) = random_problem(dir.path(), 5, 5);
    let out = varflow(dir.path(), &[&["energy"][..], &PROBLEM[..], &["--flow", "uhat.flo", "--delta", "0.3"]].concat());
    let c = ConfidenceMap::new(c.cast::<f64>().channel(0).unwrap()).unwrap();
    let t = t.cast::<f64>();
    let w = DiffusionTensor::new(t.channel(0).unwrap(), t.channel(1).unwrap()).unwrap();
    let lib = tv_energy(&u.u0.cast::<f64>(), &u.u0.cast::<f64>(), &c, &w, 0.3).unwrap();
    assert_eq!(stdout_value(&out, "energy_u0"), format!("{lib:.11e}"));
}

#[test]
fn usage_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(varflow(dir.path(), &["inpaint", "--bogus"]).status.code(), Some(1));
    assert_eq!(varflow(dir.path(), &["gradcheck", "--grid", "0x3"]).status.code(), Some(1));
    random_problem(dir.path(), 6, 6);
    let mismatch = [&PROBLEM[..], &["--levels", "2", "--level-iters", "5", "--out", "o.flo"]].concat();
    assert_eq!(varflow(dir.path(), &[&["inpaint"][..], &mismatch].concat()).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.flo"), b"not a flow").unwrap();
    let bad = varflow(dir.path(), &["inpaint", "--uhat", "bad.flo", "--conf", "conf.f32m", "--tensor", "tensor.f32m", "--out", "o.flo"]);
    assert_eq!(bad.status.code(), Some(2));
    write_map(&ScalarMap::new(3, 3, 1, vec![0.5f32; 9]).unwrap(), dir.path().join("small.f32m")).unwrap();
    let dims = varflow(dir.path(), &["inpaint", "--uhat", "uhat.flo", "--conf", "small.f32m", "--tensor", "tensor.f32m", "--out", "o.flo"]);
    assert_eq!(dims.status.code(), Some(2));
    let mut nan = b"PIEH".to_vec();
    nan.extend_from_slice(&6i32.to_le_bytes());
    nan.extend_from_slice(&6i32.to_le_bytes());
    for _ in 0..36 {
        nan.extend_from_slice(&f32::NAN.to_le_bytes());
        nan.extend_from_slice(&0f32.to_le_bytes());
    }
    std::fs::write(dir.path().join("nan.flo"), nan).unwrap();
    let nf = varflow(dir.path(), &["inpaint", "--uhat", "nan.flo", "--conf", "conf.f32m", "--tensor", "tensor.f32m", "--level-iters", "3", "--out", "o.flo"]);
    assert_eq!(nf.status.code(), Some(3), "{}", String::from_utf8_lossy(&nf.stderr));
}
