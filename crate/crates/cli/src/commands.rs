use std::fmt::{self, Write as _};
use std::path::Path;

use varflow::confidence::edge_tensor;
use varflow::defaults::{LEVEL_ITERS, LEVELS};
use varflow::gradcheck::smooth_instances;
use varflow::io::{flow_to_png, read_flo, read_gray_png, read_map, write_flo, write_map};
use varflow::matching::{argmin_flow, correlate, softmax_prob};
use varflow::pyramid::solve_pyramid;
use varflow::quadfit::quadfit_refine;
use varflow::tgv::tgv_energy;
use varflow::tv::tv_energy;
use varflow::{
    ConfidenceMap, DiffusionTensor, Error, Field, FlowField, Model, PyramidConfig, ScalarMap, SolverConfig,
};

use crate::args::{CostvolArgs, EnergyArgs, GradcheckArgs, InpaintArgs, ProblemArgs, QuadfitArgs, RefineOutputs};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    /// `report` is printed to stdout before the error line.
    Numeric { message: String, report: String },
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric { .. } => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric { message: m, .. } => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::NonFinite { .. } => Failure::Numeric { message: m, report: String::new() },
            Error::NonPositive { .. } | Error::IterBudgetZero | Error::NonPositiveRange => Failure::Usage(m),
            _ => Failure::Data(m),
        }
    }
}

type Outcome = Result<String, Failure>;

fn line(out: &mut String, key: &str, value: impl fmt::Display) {
    let _ = writeln!(out, "{key}={value}");
}

fn flow64(path: &Path) -> Result<FlowField<f64>, Failure> {
    Ok(read_flo(path)?.cast())
}

fn map64(path: &Path, channels: usize, what: &str) -> Result<ScalarMap<f64>, Failure> {
    let m = read_map(path)?.cast::<f64>();
    if m.channels() != channels {
        return Err(Failure::Data(format!("{what} needs {channels} channel(s), {} has {}", path.display(), m.channels())));
    }
    Ok(m)
}

fn same_dims(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<(), Failure> {
    if got != want {
        return Err(Failure::Data(format!("{what} is {}x{}, expected {}x{}", got.0, got.1, want.0, want.1)));
    }
    Ok(())
}

struct Problem {
    uhat: FlowField<f64>,
    c: ConfidenceMap<f64>,
    w: DiffusionTensor<f64>,
}

fn load_problem(a: &ProblemArgs) -> Result<Problem, Failure> {
    let uhat = flow64(&a.uhat)?;
    let dims = uhat.dims();
    let conf = map64(&a.conf, 1, "confidence")?;
    same_dims("confidence", (conf.width(), conf.height()), dims)?;
    let c = ConfidenceMap::new(conf.channel(0)?)?;
    let w = match (&a.tensor, &a.image) {
        (Some(path), _) => {
            let t = map64(path, 2, "tensor")?;
            same_dims("tensor", (t.width(), t.height()), dims)?;
            DiffusionTensor::new(t.channel(0)?, t.channel(1)?)?
        }
        (None, Some(path)) => {
            let img = read_gray_png(path)?.cast::<f64>();
            same_dims("image", (img.width(), img.height()), dims)?;
            edge_tensor(&img, a.gamma)?
        }
        (None, None) => return Err(Failure::Usage("one of --tensor or --image is required".into())),
    };
    if !(a.delta > 0.0) {
        return Err(Failure::Usage(format!("--delta must be positive, got {}", a.delta)));
    }
    if !(a.beta > 0.0) {
        return Err(Failure::Usage(format!("--beta must be positive, got {}", a.beta)));
    }
    Ok(Problem { uhat, c, w })
}

fn level_schedule(levels: Option<usize>, iters: Option<Vec<usize>>) -> Result<Vec<usize>, Failure> {
    match (levels, iters) {
        (Some(n), Some(list)) if n != list.len() => Err(Failure::Usage(format!(
            "--levels {n} disagrees with {} --level-iters entries",
            list.len()
        ))),
        (_, Some(list)) => Ok(list),
        (Some(0), None) => Err(Failure::Usage("--levels must be at least 1".into())),
        (Some(n), None) if n == LEVELS => Ok(LEVEL_ITERS.to_vec()),
        (Some(n), None) => {
            let mut v = vec![LEVEL_ITERS[0]; n - 1];
            v.push(LEVEL_ITERS[LEVELS - 1]);
            Ok(v)
        }
        (None, None) => Ok(LEVEL_ITERS.to_vec()),
    }
}

pub fn inpaint(a: InpaintArgs) -> Outcome {
    let p = load_problem(&a.problem)?;
    let iters_per_level = level_schedule(a.levels, a.level_iters)?;
    let config = PyramidConfig {
        iters_per_level,
        model: a.problem.model.into(),
        solver: SolverConfig {
            delta: a.problem.delta,
            checkpoint: a.checkpoint.into(),
            precision: a.precision.into(),
            ..SolverConfig::default()
        },
        beta: a.problem.beta,
    };
    let flow = solve_pyramid(&p.uhat, &p.c, &p.w, &config)?;
    write_flo(&flow, &a.out)?;
    let mut out = String::new();
    line(&mut out, "command", "inpaint");
    line(&mut out, "width", flow.width());
    line(&mut out, "height", flow.height());
    line(&mut out, "model", format!("{:?}", config.model).to_lowercase());
    line(&mut out, "levels", config.levels());
    line(
        &mut out,
        "level_iters",
        config.iters_per_level.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
    );
    line(&mut out, "out", a.out.display());
    if let Some(png) = &a.png {
        let max = match a.png_max {
            Some(m) => m,
            None => (0..flow.height())
                .flat_map(|y| (0..flow.width()).map(move |x| (x, y)))
                .map(|(x, y)| {
                    let (u0, u1) = flow.get(x, y);
                    u0.hypot(u1)
                })
                .fold(0.0, f64::max),
        };
        let bytes = flow_to_png(&flow, max)?;
        std::fs::write(png, bytes).map_err(|e| Failure::Data(format!("cannot write {}: {e}", png.display())))?;
        line(&mut out, "png", png.display());
        line(&mut out, "png_max", max);
    }
    Ok(out)
}

fn write_refinement(ubar: &FlowField<f64>, r: &RefineOutputs, out: &mut String) -> Result<(), Failure> {
    let (Some(hr0), Some(hr1), Some(dest)) = (&r.hr0, &r.hr1, &r.refined) else {
        return Err(Failure::Usage("refinement needs --hr0, --hr1 and --refined".into()));
    };
    let psi0 = read_map(hr0)?.cast::<f64>();
    let psi1 = read_map(hr1)?.cast::<f64>();
    let res = quadfit_refine(&psi0, &psi1, ubar)?;
    write_flo(&res.flow, dest)?;
    line(out, "refined", dest.display());
    line(out, "refined_width", res.flow.width());
    line(out, "refined_height", res.flow.height());
    line(out, "fit_failures", res.failed.iter().filter(|&&f| f).count());
    if let Some(path) = &r.fit_cost {
        write_map(&res.cost, path)?;
        line(out, "fit_cost", path.display());
    }
    if let Some(path) = &r.fail_mask {
        let (w, h) = res.flow.dims();
        let mask = ScalarMap::new(w, h, 1, res.failed.iter().map(|&f| if f { 1.0f64 } else { 0.0 }).collect())?;
        write_map(&mask, path)?;
        line(out, "fail_mask", path.display());
    }
    Ok(())
}

pub fn costvol(a: CostvolArgs) -> Outcome {
    let f0 = read_map(&a.feat0)?.cast::<f64>();
    let f1 = read_map(&a.feat1)?.cast::<f64>();
    let vol = correlate(&f0, &f1, a.range)?;
    let ubar = argmin_flow(&vol.forward[0], &vol.forward[1])?;
    write_flo(&ubar, &a.out)?;
    let mut out = String::new();
    line(&mut out, "command", "costvol");
    line(&mut out, "width", ubar.width());
    line(&mut out, "height", ubar.height());
    line(&mut out, "range", a.range);
    line(&mut out, "out", a.out.display());
    for (path, cor, key) in [(&a.prob0, &vol.forward[0], "prob0"), (&a.prob1, &vol.forward[1], "prob1")] {
        if let Some(path) = path {
            write_map(&softmax_prob(cor), path)?;
            line(&mut out, key, path.display());
        }
    }
    if a.refine {
        write_refinement(&ubar, &a.refinement, &mut out)?;
    }
    Ok(out)
}

pub fn quadfit(a: QuadfitArgs) -> Outcome {
    let ubar = flow64(&a.ubar)?;
    let mut out = String::new();
    line(&mut out, "command", "quadfit");
    write_refinement(&ubar, &a.refinement, &mut out)?;
    Ok(out)
}

pub fn gradcheck(a: GradcheckArgs) -> Outcome {
    if !(a.fd_step > 0.0) {
        return Err(Failure::Usage(format!("--fd-step must be positive, got {}", a.fd_step)));
    }
    if !(a.tol >= 0.0) {
        return Err(Failure::Usage(format!("--tol must be non-negative, got {}", a.tol)));
    }
    let model: Model = a.model.into();
    let config = SolverConfig { delta: a.delta, ..SolverConfig::default().with_iters(a.iters) };
    let (w, h) = a.grid;
    let (reports, skipped) = smooth_instances(model, w, h, 1, a.seed, &config, a.fd_step)?;
    let (seed, report) = &reports[0];
    let mut out = String::new();
    line(&mut out, "command", "gradcheck");
    line(&mut out, "model", format!("{model:?}").to_lowercase());
    line(&mut out, "grid", format!("{w}x{h}"));
    line(&mut out, "iters", a.iters);
    line(&mut out, "instance_seed", seed);
    line(&mut out, "skipped_instances", skipped);
    for f in &report.families {
        line(&mut out, &format!("max_rel.{}", f.family), format!("{:e}", f.max_rel));
    }
    if report.passes(a.tol) {
        line(&mut out, "status", "pass");
        return Ok(out);
    }
    line(&mut out, "status", "fail");
    let worst = report.worst().expect("at least one family");
    let (x, y) = (worst.index % w, worst.index / w);
    line(&mut out, "worst_family", worst.family);
    line(&mut out, "worst_index", worst.index);
    line(&mut out, "worst_x", x);
    line(&mut out, "worst_y", y);
    line(&mut out, "worst_analytic", format!("{:e}", worst.analytic));
    line(&mut out, "worst_numeric", format!("{:e}", worst.numeric));
    Err(Failure::Numeric {
        message: format!(
            "gradient check failed: {} at ({x}, {y}) has relative error {:e} >= {:e}",
            worst.family, worst.max_rel, a.tol
        ),
        report: out,
    })
}

fn aux(path: &Option<std::path::PathBuf>, dims: (usize, usize), what: &str) -> Result<(Field<f64>, Field<f64>), Failure> {
    match path {
        None => Ok((Field::zeros(dims.0, dims.1)?, Field::zeros(dims.0, dims.1)?)),
        Some(p) => {
            let m = map64(p, 2, what)?;
            same_dims(what, (m.width(), m.height()), dims)?;
            Ok((m.channel(0)?, m.channel(1)?))
        }
    }
}

pub fn energy(a: EnergyArgs) -> Outcome {
    let p = load_problem(&a.problem)?;
    let flow = flow64(&a.flow)?;
    same_dims("flow", flow.dims(), p.uhat.dims())?;
    let model: Model = a.problem.model.into();
    let delta = a.problem.delta;
    let mut parts = [0.0; 2];
    for (k, part) in parts.iter_mut().enumerate() {
        let (u, uh) = (flow.component(k), p.uhat.component(k));
        *part = match model {
            Model::Tv => tv_energy(u, uh, &p.c, &p.w, delta)?,
            Model::Tgv => {
                let (path, what) = if k == 0 { (&a.w0, "w0") } else { (&a.w1, "w1") };
                let (wx, wy) = aux(path, flow.dims(), what)?;
                tgv_energy(u, &wx, &wy, uh, &p.c, &p.w, a.problem.beta, delta)?
            }
        };
    }
    let mut out = String::new();
    line(&mut out, "command", "energy");
    line(&mut out, "model", format!("{model:?}").to_lowercase());
    line(&mut out, "energy_u0", format!("{:.11e}", parts[0]));
    line(&mut out, "energy_u1", format!("{:.11e}", parts[1]));
    line(&mut out, "energy", format!("{:.11e}", parts[0] + parts[1]));
    Ok(out)
}
