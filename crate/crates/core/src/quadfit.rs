//! Sub-pixel refinement by a separable quadratic fit to a 5-point stencil.
//!
//! With stencil costs `q(0,0)`, `q(+-1,0)`, `q(0,+-1)` the fit is
//!
//! ```text
//! a_i = (q(+e_i) + q(-e_i) - 2 q(0)) / 2,   b_i = (q(+e_i) - q(-e_i)) / 2,   c = q(0)
//! v_i = -b_i / (2 a_i),   f(v) = a_0 v_0^2 + b_0 v_0 + a_1 v_1^2 + b_1 v_1 + c
//! ```

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, Field, FlowField, ScalarMap};
use crate::matching::full_cost;
use crate::scalar::Real;

/// Curvatures at or below this count as a failed fit.
pub const MIN_CURVATURE: f64 = 1e-12;

/// Stencil order: center, `+x`, `-x`, `+y`, `-y`.
pub const STENCIL: [(i64, i64); 5] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];

/// Candidate offsets around `2 ubar`, in tie-breaking order.
const CANDIDATES: [(i64, i64); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadFit {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub c: f64,
    pub v: [f64; 2],
    pub f: f64,
}

/// Fits the stencil `q` (in [`STENCIL`] order). `None` when a curvature is
/// at most [`MIN_CURVATURE`] or the minimizer leaves `[-1, 1]^2`.
pub fn fit_stencil(q: [f64; 5]) -> Option<QuadFit> {
    let a = [(q[1] + q[2] - 2.0 * q[0]) / 2.0, (q[3] + q[4] - 2.0 * q[0]) / 2.0];
    let b = [(q[1] - q[2]) / 2.0, (q[3] - q[4]) / 2.0];
    if a[0] <= MIN_CURVATURE || a[1] <= MIN_CURVATURE {
        return None;
    }
    let v = [-b[0] / (2.0 * a[0]), -b[1] / (2.0 * a[1])];
    if v[0].abs() > 1.0 || v[1].abs() > 1.0 {
        return None;
    }
    let c = q[0];
    let f = a[0] * v[0] * v[0] + b[0] * v[0] + a[1] * v[1] * v[1] + b[1] * v[1] + c;
    Some(QuadFit { a, b, c, v, f })
}

/// Gradient w.r.t. the five stencil costs of `d_v . v + d_f f`; zero when
/// the fit fails.
pub fn stencil_gradient(q: [f64; 5], d_v: [f64; 2], d_f: f64) -> [f64; 5] {
    let Some(fit) = fit_stencil(q) else {
        return [0.0; 5];
    };
    let mut g = [0.0; 5];
    for i in 0..2 {
        let (a, b, v) = (fit.a[i], fit.b[i], fit.v[i]);
        // f is stationary in v, so only the explicit a, b dependence remains.
        let da = d_v[i] * b / (2.0 * a * a) + d_f * v * v;
        let db = -d_v[i] / (2.0 * a) + d_f * v;
        let (plus, minus) = (1 + 2 * i, 2 + 2 * i);
        g[plus] += 0.5 * da + 0.5 * db;
        g[minus] += 0.5 * da - 0.5 * db;
        g[0] -= da;
    }
    g[0] += d_f;
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadFitResult<T> {
    /// Refined full-resolution flow `vbar + v`.
    pub flow: FlowField<T>,
    /// Fitted cost `f(v)`, or the center cost where the fit failed.
    pub cost: ScalarMap<T>,
    pub failed: Vec<bool>,
    /// Integer candidate per pixel, `None` if every candidate left the grid.
    pub candidate: Vec<Option<[i64; 2]>>,
    /// Stencil costs in [`STENCIL`] order; only meaningful where the
    /// whole stencil is inside the grid.
    pub stencil: Vec<[f64; 5]>,
}

fn check_resolution<T: Real>(psi0: &FeatureMap<T>, psi1: &FeatureMap<T>, ubar: &FlowField<T>) -> Result<()> {
    if (psi0.width(), psi0.height(), psi0.channels()) != (psi1.width(), psi1.height(), psi1.channels()) {
        return Err(Error::DimMismatch("full-resolution feature maps differ in shape".into()));
    }
    if psi0.width().div_ceil(2) != ubar.width() || psi0.height().div_ceil(2) != ubar.height() {
        return Err(Error::DimMismatch(format!(
            "features are {}x{} but strided flow is {}x{}",
            psi0.width(),
            psi0.height(),
            ubar.width(),
            ubar.height()
        )));
    }
    Ok(())
}

fn inside<T: Real>(psi: &FeatureMap<T>, x: usize, y: usize, u: [i64; 2]) -> bool {
    let (tx, ty) = (x as i64 + u[0], y as i64 + u[1]);
    tx >= 0 && ty >= 0 && tx < psi.width() as i64 && ty < psi.height() as i64
}

/// Refines the strided integer flow `ubar` against full-resolution features.
pub fn quadfit_refine<T: Real>(psi0: &FeatureMap<T>, psi1: &FeatureMap<T>, ubar: &FlowField<T>) -> Result<QuadFitResult<T>> {
    check_resolution(psi0, psi1, ubar)?;
    let (w, h) = (psi0.width(), psi0.height());
    let n = w * h;
    let mut flow = (vec![T::zero(); n], vec![T::zero(); n]);
    let mut cost = vec![T::zero(); n];
    let mut failed = vec![false; n];
    let mut candidate = vec![None; n];
    let mut stencil = vec![[0.0; 5]; n];
    let q = |x: usize, y: usize, u: [i64; 2]| full_cost(psi0, psi1, x, y, u[0], u[1]).wide();

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (b0, b1) = ubar.get(x / 2, y / 2);
            let base = [2 * b0.wide().round() as i64, 2 * b1.wide().round() as i64];
            let mut best: Option<([i64; 2], f64)> = None;
            for (dx, dy) in CANDIDATES {
                let v = [base[0] + dx, base[1] + dy];
                if !inside(psi1, x, y, v) {
                    continue;
                }
                let s = q(x, y, v);
                if best.is_none_or(|(_, b)| s < b) {
                    best = Some((v, s));
                }
            }
            let Some((vbar, q0)) = best else {
                failed[i] = true;
                flow.0[i] = T::of(base[0] as f64);
                flow.1[i] = T::of(base[1] as f64);
                continue;
            };
            candidate[i] = Some(vbar);
            let fit = if STENCIL.iter().all(|&(sx, sy)| inside(psi1, x, y, [vbar[0] + sx, vbar[1] + sy])) {
                let mut s = [0.0; 5];
                for (k, &(sx, sy)) in STENCIL.iter().enumerate() {
                    s[k] = q(x, y, [vbar[0] + sx, vbar[1] + sy]);
                }
                stencil[i] = s;
                fit_stencil(s)
            } else {
                None
            };
            match fit {
                Some(fit) => {
                    flow.0[i] = T::of(vbar[0] as f64 + fit.v[0]);
                    flow.1[i] = T::of(vbar[1] as f64 + fit.v[1]);
                    cost[i] = T::of(fit.f);
                }
                None => {
                    failed[i] = true;
                    flow.0[i] = T::of(vbar[0] as f64);
                    flow.1[i] = T::of(vbar[1] as f64);
                    cost[i] = T::of(q0);
                }
            }
        }
    }
    Ok(QuadFitResult {
        flow: FlowField::new(Field::from_raw(w, h, flow.0), Field::from_raw(w, h, flow.1))?,
        cost: ScalarMap::new(w, h, 1, cost)?,
        failed,
        candidate,
        stencil,
    })
}

/// Per-pixel gradients w.r.t. the stencil costs; zero on failed pixels.
pub fn quadfit_backward<T: Real>(
    d_flow: &FlowField<f64>,
    d_cost: &ScalarMap<f64>,
    saved: &QuadFitResult<T>,
) -> Result<Vec<[f64; 5]>> {
    let (w, h) = saved.flow.dims();
    if d_flow.dims() != (w, h) || (d_cost.width(), d_cost.height(), d_cost.channels()) != (w, h, 1) {
        return Err(Error::StoreMismatch(format!(
            "gradients do not match the {w}x{h} refinement they are applied to"
        )));
    }
    Ok((0..w * h)
        .map(|i| {
            if saved.failed[i] {
                return [0.0; 5];
            }
            let d_v = [d_flow.u0.as_slice()[i], d_flow.u1.as_slice()[i]];
            stencil_gradient(saved.stencil[i], d_v, d_cost.values()[i])
        })
        .collect())
}

/// Transpose of the stencil correlation: maps `d_q` to feature gradients.
/// Contributions are scattered in row-major pixel order.
pub fn stencil_to_features<T: Real>(
    d_q: &[[f64; 5]],
    saved: &QuadFitResult<T>,
    psi0: &FeatureMap<T>,
    psi1: &FeatureMap<T>,
) -> Result<(ScalarMap<f64>, ScalarMap<f64>)> {
    let (w, h, ch) = (psi0.width(), psi0.height(), psi0.channels());
    if d_q.len() != w * h || saved.flow.dims() != (w, h) || (psi1.width(), psi1.height(), psi1.channels()) != (w, h, ch) {
        return Err(Error::StoreMismatch("stencil gradients do not match the feature maps".into()));
    }
    let mut g0 = ScalarMap::zeros(w, h, ch)?;
    let mut g1 = ScalarMap::zeros(w, h, ch)?;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (Some(vbar), false) = (saved.candidate[i], saved.failed[i]) else {
                continue;
            };
            for (k, &(sx, sy)) in STENCIL.iter().enumerate() {
                let g = d_q[i][k];
                if g == 0.0 {
                    continue;
                }
                let (tx, ty) = ((x as i64 + vbar[0] + sx) as usize, (y as i64 + vbar[1] + sy) as usize);
                for c in 0..ch {
                    let a = psi0.get(x, y, c).wide();
                    let b = psi1.get(tx, ty, c).wide();
                    g0.set(x, y, c, g0.get(x, y, c) - g * b);
                    g1.set(tx, ty, c, g1.get(tx, ty, c) - g * a);
                }
            }
        }
    }
    Ok((g0, g1))
}
