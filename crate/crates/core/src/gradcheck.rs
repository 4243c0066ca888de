//! Central finite-difference checks of the analytic reverse passes.
//!
//! The loss is `f = 1/2 |u_K|^2` for TV and `f = 1/2 (|u_K|^2 + |w_K|^2)`
//! for TGV. Each input family is perturbed coordinate by coordinate with
//! the forward pass alone, so the check is independent of the reverse code.
//!
//! Central differences only estimate the derivative when the loss is smooth
//! across the whole stencil. Every forward evaluation records its
//! [`BranchTrace`]; a coordinate whose `+h` or `-h` run takes a different
//! prox or Huber branch anywhere along the trajectory is counted as a
//! crossing, and the report of such an instance is not a valid oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grid::{ConfidenceMap, DiffusionTensor, Field};
use crate::tgv::{tgv_backward, tgv_forward, tgv_forward_traced};
use crate::tv::{tv_backward, tv_forward, tv_forward_traced, BranchTrace, SolverConfig};

/// Gradient magnitude, per unit of loss, below which errors are measured
/// absolutely. Central differences carry roundoff near `eps |f| / h`.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst coordinate of one input family.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyError {
    pub family: &'static str,
    pub max_rel: f64,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub families: Vec<FamilyError>,
    /// Coordinates whose difference stencil changed branch somewhere.
    pub crossings: usize,
    /// Loss at the unperturbed inputs.
    pub loss: f64,
}

impl GradcheckReport {
    pub fn max_rel(&self) -> f64 {
        self.families.iter().map(|f| f.max_rel).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&FamilyError> {
        self.families
            .iter()
            .fold(None, |acc: Option<&FamilyError>, f| match acc {
                Some(a) if a.max_rel >= f.max_rel => Some(a),
                _ => Some(f),
            })
    }

    /// True iff every family is strictly below `tol`.
    pub fn passes(&self, tol: f64) -> bool {
        self.families.iter().all(|f| f.max_rel < tol)
    }

    fn push(&mut self, family: &'static str, analytic: &[f64], numeric: &[f64]) {
        let mut worst = FamilyError {
            family,
            max_rel: 0.0,
            index: 0,
            analytic: analytic.first().copied().unwrap_or(0.0),
            numeric: numeric.first().copied().unwrap_or(0.0),
        };
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = relative_error(a, n, REL_FLOOR * self.loss.abs().max(1.0));
            if rel > worst.max_rel || rel.is_nan() {
                worst = FamilyError { family, max_rel: rel, index: i, analytic: a, numeric: n };
            }
        }
        self.families.push(worst);
    }
}

/// Inputs of one TV (and, with `beta`, TGV) problem.
#[derive(Clone, Debug)]
pub struct Instance {
    pub uhat: Field<f64>,
    pub c: ConfidenceMap<f64>,
    pub w: DiffusionTensor<f64>,
    pub u0: Field<f64>,
    pub w_init: (Field<f64>, Field<f64>),
    pub beta: f64,
}

/// Which layer an instance is checked against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    Tv,
    Tgv,
}

impl std::str::FromStr for Model {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "tv" => Ok(Self::Tv),
            "tgv" => Ok(Self::Tgv),
            other => Err(format!("unknown model '{other}' (expected tv|tgv)")),
        }
    }
}

impl Instance {
    /// Random instance: `uhat`, `u0` in `[-2, 2]`, `c` in `[0.002, 0.1]`,
    /// `W` in `[0.1, 0.9]`, initial `w` in `[-0.3, 0.3]`, `beta` in
    /// `{0.5, 0.75, .., 2}`.
    pub fn random(width: usize, height: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut field = |lo: f64, hi: f64| Field::from_fn(width, height, |_, _| rng.gen_range(lo..hi));
        let uhat = field(-2.0, 2.0)?;
        let c = ConfidenceMap::new(field(0.002, 0.1)?)?;
        let w = DiffusionTensor::new(field(0.1, 0.9)?, field(0.1, 0.9)?)?;
        let u0 = field(-2.0, 2.0)?;
        let w_init = (field(-0.3, 0.3)?, field(-0.3, 0.3)?);
        let beta = 0.5 + (seed % 7) as f64 * 0.25;
        Ok(Self { uhat, c, w, u0, w_init, beta })
    }
}

fn half_sq(f: &Field<f64>) -> f64 {
    0.5 * f.as_slice().iter().map(|v| v * v).sum::<f64>()
}

/// Central differences of `eval` around `base`; also counts coordinates
/// whose stencil ends leave the branch signature `sig`.
fn central<F>(base: &[f64], step: f64, sig: u64, crossings: &mut usize, mut eval: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<(f64, BranchTrace)>,
{
    let mut x = base.to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        x[i] = base[i] + step;
        let (plus, tp) = eval(&x)?;
        x[i] = base[i] - step;
        let (minus, tm) = eval(&x)?;
        x[i] = base[i];
        if tp.signature != sig || tm.signature != sig {
            *crossings += 1;
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

fn with_data(f: &Field<f64>, data: &[f64]) -> Result<Field<f64>> {
    Field::new(f.width(), f.height(), data.to_vec())
}

/// Checks the TV reverse pass on families `uhat`, `c`, `W`, `u0`.
pub fn tv_gradcheck(inst: &Instance, config: &SolverConfig, step: f64) -> Result<GradcheckReport> {
    let loss = |uhat: &Field<f64>, c: &ConfidenceMap<f64>, w: &DiffusionTensor<f64>, u0: &Field<f64>| {
        let (uk, trace) = tv_forward_traced(uhat, c, w, u0, config)?;
        Ok((half_sq(&uk), trace))
    };
    let (uk, store) = tv_forward(&inst.uhat, &inst.c, &inst.w, &inst.u0, config)?;
    let g = tv_backward(&uk, &store, &inst.uhat, &inst.c, &inst.w, config)?;
    let (f0, trace) = loss(&inst.uhat, &inst.c, &inst.w, &inst.u0)?;
    let sig = trace.signature;
    let mut report = GradcheckReport { loss: f0, ..Default::default() };
    let mut cross = 0;

    let num = central(inst.uhat.as_slice(), step, sig, &mut cross, |x| {
        loss(&with_data(&inst.uhat, x)?, &inst.c, &inst.w, &inst.u0)
    })?;
    report.push("uhat", g.d_uhat.as_slice(), &num);

    let num = central(inst.c.as_slice(), step, sig, &mut cross, |x| {
        let c = ConfidenceMap::new(with_data(inst.c.field(), x)?)?;
        loss(&inst.uhat, &c, &inst.w, &inst.u0)
    })?;
    report.push("c", g.d_c.as_slice(), &num);

    let (analytic, numeric) = tensor_family(
        &inst.w,
        step,
        sig,
        &mut cross,
        |w| loss(&inst.uhat, &inst.c, w, &inst.u0),
        &g.d_w0,
        &g.d_w1,
    )?;
    report.push("W", &analytic, &numeric);

    let num = central(inst.u0.as_slice(), step, sig, &mut cross, |x| {
        loss(&inst.uhat, &inst.c, &inst.w, &with_data(&inst.u0, x)?)
    })?;
    report.push("u0", g.d_u0.as_slice(), &num);
    report.crossings = cross;
    Ok(report)
}

/// Both tensor components concatenated as one family.
fn tensor_family<F>(
    w: &DiffusionTensor<f64>,
    step: f64,
    sig: u64,
    cross: &mut usize,
    mut loss: F,
    d_w0: &Field<f64>,
    d_w1: &Field<f64>,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&DiffusionTensor<f64>) -> Result<(f64, BranchTrace)>,
{
    let mut numeric = central(w.w0().as_slice(), step, sig, cross, |x| {
        loss(&DiffusionTensor::new(with_data(w.w0(), x)?, w.w1().clone())?)
    })?;
    numeric.extend(central(w.w1().as_slice(), step, sig, cross, |x| {
        loss(&DiffusionTensor::new(w.w0().clone(), with_data(w.w1(), x)?)?)
    })?);
    let mut analytic = d_w0.as_slice().to_vec();
    analytic.extend_from_slice(d_w1.as_slice());
    Ok((analytic, numeric))
}

/// Checks the TGV reverse pass on families `uhat`, `c`, `W`, `beta`, `u0`, `w0`.
pub fn tgv_gradcheck(inst: &Instance, config: &SolverConfig, step: f64) -> Result<GradcheckReport> {
    let loss = |uhat: &Field<f64>,
                c: &ConfidenceMap<f64>,
                w: &DiffusionTensor<f64>,
                beta: f64,
                u0: &Field<f64>,
                wi: (&Field<f64>, &Field<f64>)| {
        let (uk, (a, b), trace) = tgv_forward_traced(uhat, c, w, beta, u0, wi, config)?;
        Ok((half_sq(&uk) + half_sq(&a) + half_sq(&b), trace))
    };
    let wi = (&inst.w_init.0, &inst.w_init.1);
    let (uk, (wk0, wk1), store) = tgv_forward(&inst.uhat, &inst.c, &inst.w, inst.beta, &inst.u0, wi, config)?;
    let g = tgv_backward(&uk, (&wk0, &wk1), &store, &inst.uhat, &inst.c, &inst.w, inst.beta, config)?;
    let (f0, trace) = loss(&inst.uhat, &inst.c, &inst.w, inst.beta, &inst.u0, wi)?;
    let sig = trace.signature;
    let mut report = GradcheckReport { loss: f0, ..Default::default() };
    let mut cross = 0;

    let num = central(inst.uhat.as_slice(), step, sig, &mut cross, |x| {
        loss(&with_data(&inst.uhat, x)?, &inst.c, &inst.w, inst.beta, &inst.u0, wi)
    })?;
    report.push("uhat", g.d_uhat.as_slice(), &num);

    let num = central(inst.c.as_slice(), step, sig, &mut cross, |x| {
        let c = ConfidenceMap::new(with_data(inst.c.field(), x)?)?;
        loss(&inst.uhat, &c, &inst.w, inst.beta, &inst.u0, wi)
    })?;
    report.push("c", g.d_c.as_slice(), &num);

    let (analytic, numeric) = tensor_family(
        &inst.w,
        step,
        sig,
        &mut cross,
        |w| loss(&inst.uhat, &inst.c, w, inst.beta, &inst.u0, wi),
        &g.d_w0,
        &g.d_w1,
    )?;
    report.push("W", &analytic, &numeric);

    let num = central(&[inst.beta], step, sig, &mut cross, |x| {
        loss(&inst.uhat, &inst.c, &inst.w, x[0], &inst.u0, wi)
    })?;
    report.push("beta", &[g.d_beta], &num);

    let num = central(inst.u0.as_slice(), step, sig, &mut cross, |x| {
        loss(&inst.uhat, &inst.c, &inst.w, inst.beta, &with_data(&inst.u0, x)?, wi)
    })?;
    report.push("u0", g.d_u0.as_slice(), &num);

    let mut numeric = central(inst.w_init.0.as_slice(), step, sig, &mut cross, |x| {
        loss(&inst.uhat, &inst.c, &inst.w, inst.beta, &inst.u0, (&with_data(&inst.w_init.0, x)?, wi.1))
    })?;
    numeric.extend(central(inst.w_init.1.as_slice(), step, sig, &mut cross, |x| {
        loss(&inst.uhat, &inst.c, &inst.w, inst.beta, &inst.u0, (wi.0, &with_data(&inst.w_init.1, x)?))
    })?);
    let mut analytic = g.d_w0_0.as_slice().to_vec();
    analytic.extend_from_slice(g.d_w1_0.as_slice());
    report.push("w0", &analytic, &numeric);
    report.crossings = cross;
    Ok(report)
}

/// Reports for the first `count` random instances, starting at `seed`,
/// whose difference stencils never change branch. Returns the seed and
/// report of each, plus the number of instances skipped.
#[allow(clippy::too_many_arguments)]
pub fn smooth_instances(
    model: Model,
    width: usize,
    height: usize,
    count: usize,
    seed: u64,
    config: &SolverConfig,
    step: f64,
) -> Result<(Vec<(u64, GradcheckReport)>, usize)> {
    let mut out = Vec::with_capacity(count);
    let mut skipped = 0;
    let mut s = seed;
    while out.len() < count {
        let inst = Instance::random(width, height, s)?;
        let report = match model {
            Model::Tv => tv_gradcheck(&inst, config, step)?,
            Model::Tgv => tgv_gradcheck(&inst, config, step)?,
        };
        if report.crossings == 0 {
            out.push((s, report));
        } else {
            skipped += 1;
        }
        s = s.wrapping_add(1);
    }
    Ok((out, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn report_tracks_worst_family() {
        let mut r = GradcheckReport::default();
        r.push("a", &[1.0, 2.0], &[1.0, 2.2]);
        r.push("b", &[1.0], &[1.0]);
        assert_eq!(r.worst().unwrap().family, "a");
        assert_eq!(r.worst().unwrap().index, 1);
        assert!(!r.passes(0.05));
        assert!(r.passes(0.1));
    }
}
