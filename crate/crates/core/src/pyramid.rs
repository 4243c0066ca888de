//! Coarse-to-fine driver running the TV or TGV solver over dyadic levels.

use crate::defaults::{LEVELS, LEVEL_ITERS, TGV_BETA};
use crate::error::{Error, Result};
use crate::gradcheck::Model;
use crate::grid::{ConfidenceMap, DiffusionTensor, Field, FlowField};
use crate::scalar::Real;
use crate::tgv::tgv_forward;
use crate::tv::{tv_forward, Precision, SolverConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidConfig {
    /// Iterations per level, coarsest first; its length is the level count.
    pub iters_per_level: Vec<usize>,
    pub model: Model,
    /// `iters` is ignored; each level uses its own budget.
    pub solver: SolverConfig,
    pub beta: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            iters_per_level: LEVEL_ITERS[..LEVELS].to_vec(),
            model: Model::Tv,
            solver: SolverConfig::default(),
            beta: TGV_BETA,
        }
    }
}

impl PyramidConfig {
    /// Single level running `iters` iterations.
    pub fn direct(model: Model, solver: SolverConfig, iters: usize) -> Self {
        Self { iters_per_level: vec![iters], model, solver, beta: TGV_BETA }
    }

    pub fn levels(&self) -> usize {
        self.iters_per_level.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters_per_level.is_empty() {
            return Err(Error::EmptyLevel { level: 0 });
        }
        for &k in &self.iters_per_level {
            self.solver.with_iters(k).validate()?;
        }
        if self.model == Model::Tgv && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::NonPositive { name: "beta", value: self.beta });
        }
        Ok(())
    }
}

/// Fine-grid index ranges of each coarse cell along one axis; an odd last
/// row or column joins the final block.
fn blocks(n: usize) -> Vec<std::ops::Range<usize>> {
    let m = n / 2;
    (0..m).map(|i| 2 * i..if i + 1 == m { n } else { 2 * i + 2 }).collect()
}

/// Half-resolution inputs: `c` by block maximum, `W` by block minimum and
/// `uhat` taken at the most confident pixel of each block (first in
/// row-major order on ties), halved.
pub fn downsample_inputs<T: Real>(
    uhat: &FlowField<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
) -> Result<(FlowField<T>, ConfidenceMap<T>, DiffusionTensor<T>)> {
    let (width, height) = uhat.dims();
    if width < 2 || height < 2 {
        return Err(Error::DimTooSmall { width, height });
    }
    c.field().expect_dims(width, height, "c")?;
    w.w0().expect_dims(width, height, "W")?;
    let (bx, by) = (blocks(width), blocks(height));
    let (cw, ch) = (bx.len(), by.len());
    let cells = |x: usize, y: usize| {
        let (rx, ry) = (bx[x].clone(), by[y].clone());
        ry.flat_map(move |fy| rx.clone().map(move |fx| (fx, fy)))
    };
    let argmax = |x, y| {
        cells(x, y).fold(None, |best: Option<(usize, usize)>, p| match best {
            Some(b) if c.get(p.0, p.1) <= c.get(b.0, b.1) => Some(b),
            _ => Some(p),
        })
        .expect("blocks are non-empty")
    };
    let min_of = |f: &Field<T>, x, y| cells(x, y).map(|(i, j)| f.get(i, j)).fold(T::infinity(), T::min);
    let half = T::of(0.5);
    let at = Field::from_fn(cw, ch, |x, y| {
        let p = argmax(x, y);
        T::of((p.0 + p.1 * width) as f64)
    })?;
    let pick = |f: &Field<T>| {
        Field::from_fn(cw, ch, |x, y| {
            let i = at.get(x, y).wide() as usize;
            f.get(i % width, i / width) * half
        })
    };
    let uhat_c = FlowField::new(pick(&uhat.u0)?, pick(&uhat.u1)?)?;
    let c_c = ConfidenceMap::new(Field::from_fn(cw, ch, |x, y| {
        cells(x, y).map(|(i, j)| c.get(i, j)).fold(T::neg_infinity(), T::max)
    })?)?;
    let w_c = DiffusionTensor::new(
        Field::from_fn(cw, ch, |x, y| min_of(w.w0(), x, y))?,
        Field::from_fn(cw, ch, |x, y| min_of(w.w1(), x, y))?,
    )?;
    Ok((uhat_c, c_c, w_c))
}

/// Bilinear enlargement of a coarse flow to `width x height`, values
/// doubled. Fine pixel `x` samples coarse coordinate `x / 2`, clamped.
pub fn upsample_flow<T: Real>(u: &FlowField<T>, width: usize, height: usize) -> Result<FlowField<T>> {
    let (cw, ch) = u.dims();
    let up = |f: &Field<T>| {
        Field::from_fn(width, height, |x, y| {
            let sx = (x as f64 * 0.5).min((cw - 1) as f64);
            let sy = (y as f64 * 0.5).min((ch - 1) as f64);
            let (x0, y0) = (sx as usize, sy as usize);
            let (x1, y1) = ((x0 + 1).min(cw - 1), (y0 + 1).min(ch - 1));
            let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
            let g = |x, y| f.get(x, y).wide();
            let top = g(x0, y0) + tx * (g(x1, y0) - g(x0, y0));
            let bottom = g(x0, y1) + tx * (g(x1, y1) - g(x0, y1));
            T::of(2.0 * (top + ty * (bottom - top)))
        })
    };
    FlowField::new(up(&u.u0)?, up(&u.u1)?)
}

/// One solver call per flow component, with the components run in parallel.
fn solve_level<T: Real>(
    uhat: &FlowField<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    u0: &FlowField<T>,
    config: &PyramidConfig,
    iters: usize,
) -> Result<FlowField<T>> {
    let solver = config.solver.with_iters(iters);
    let (width, height) = uhat.dims();
    let solve = |uh: &Field<T>, init: &Field<T>| -> Result<Field<T>> {
        match config.model {
            Model::Tv => Ok(tv_forward(uh, c, w, init, &solver)?.0),
            Model::Tgv => {
                let z = Field::zeros(width, height)?;
                Ok(tgv_forward(uh, c, w, config.beta, init, (&z, &z), &solver)?.0)
            }
        }
    };
    let (a, b) = rayon::join(|| solve(&uhat.u0, &u0.u0), || solve(&uhat.u1, &u0.u1));
    FlowField::new(a?, b?)
}

fn solve_in<T: Real>(
    uhat: &FlowField<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    config: &PyramidConfig,
) -> Result<FlowField<T>> {
    let levels = config.levels();
    let mut inputs = vec![(uhat.clone(), c.clone(), w.clone())];
    for level in 1..levels {
        let (u, c, w) = inputs.last().expect("non-empty");
        let (width, height) = u.dims();
        if width < 2 || height < 2 {
            return Err(Error::EmptyLevel { level });
        }
        inputs.push(downsample_inputs(u, c, w)?);
    }
    let mut flow: Option<FlowField<T>> = None;
    for (i, (u, c, w)) in inputs.iter().rev().enumerate() {
        let (width, height) = u.dims();
        let init = match &flow {
            None => u.clone(),
            Some(prev) => upsample_flow(prev, width, height)?,
        };
        flow = Some(solve_level(u, c, w, &init, config, config.iters_per_level[i])?);
    }
    Ok(flow.expect("at least one level"))
}

/// Runs the solver at every level coarse to fine. The coarsest level
/// starts from its own `uhat`, finer ones from the enlarged coarser
/// solution; TGV auxiliaries restart at zero on each level.
pub fn solve_pyramid<T: Real>(
    uhat: &FlowField<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    config: &PyramidConfig,
) -> Result<FlowField<T>> {
    config.validate()?;
    let (width, height) = uhat.dims();
    c.field().expect_dims(width, height, "c")?;
    w.w0().expect_dims(width, height, "W")?;
    match config.solver.precision {
        Precision::Double => Ok(solve_in(&uhat.cast::<f64>(), &c.cast(), &w.cast(), config)?.cast()),
        Precision::Mixed => Ok(solve_in(&uhat.cast::<f32>(), &c.cast(), &w.cast(), config)?.cast()),
    }
}
