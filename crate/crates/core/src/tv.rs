//! Weighted-Huber TV inpainting layer: unrolled FISTA forward pass and its
//! exact reverse pass with checkpointed replay.
//!
//! One FISTA iteration on a flow component:
//!
//! ```text
//! a      = v^k - D^T [ W' D v^k / max(1, |sqrt(W') D v^k| / delta) ]
//! u^k+1  = prox(a): a - c if a - c > uhat, a + c if a + c < uhat, uhat otherwise
//! v^k+1  = u^k+1 + (t^k - 1) / t^k+1 * (u^k+1 - u^k)
//! ```
//!
//! with `W' = W / 8`, i.e. the Lipschitz constant of `D^T D` folded into the
//! tensor. The iteration is plain FISTA with unit step on
//! `tv_energy(u, uhat, c, W / 8, delta)` ([`tv_solver_objective`]).

use std::str::FromStr;

use crate::checkpoint::{checkpoint_indices, CheckpointMode, CheckpointStore};
use crate::diffops::{dot, grad_adj_into, grad_into, huber_of_norm};
use crate::error::{Error, Result};
use crate::grid::{ConfidenceMap, DiffusionTensor, Field};
use crate::par;
use crate::scalar::Real;

/// Largest eigenvalue bound of `D^T W D` for `W <= 1`.
pub const TV_LIPSCHITZ: f64 = 8.0;

/// Working precision of the solver iterates. Gradient accumulators are
/// always double precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    /// `f32` iterates, `f64` gradient accumulation.
    Mixed,
    #[default]
    Double,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mixed" | "f32" => Ok(Self::Mixed),
            "f64" | "double" => Ok(Self::Double),
            other => Err(format!("unknown precision '{other}' (expected f64|mixed)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    /// Huber threshold.
    pub delta: f64,
    /// FISTA iterations `K`.
    pub iters: usize,
    pub checkpoint: CheckpointMode,
    pub precision: Precision,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            delta: crate::defaults::DELTA,
            iters: 100,
            checkpoint: CheckpointMode::Sqrt,
            precision: Precision::Double,
        }
    }
}

impl SolverConfig {
    pub fn with_iters(mut self, iters: usize) -> Self {
        self.iters = iters;
        self
    }

    pub fn with_checkpoint(mut self, mode: CheckpointMode) -> Self {
        self.checkpoint = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::NonPositive {
                name: "delta",
                value: self.delta,
            });
        }
        if self.iters == 0 {
            return Err(Error::IterBudgetZero);
        }
        Ok(())
    }
}

/// FISTA state after `k` iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct TvState<T> {
    pub u: Field<T>,
    pub v: Field<T>,
    pub k: usize,
    /// `t^(k-1)`; equals `t^0 = 1` for the initial state.
    pub t_prev: f64,
    pub t_cur: f64,
}

impl<T: Real> TvState<T> {
    /// State at `k = 0` with `v^0 = u^0`.
    pub fn initial(u0: Field<T>) -> Self {
        Self {
            v: u0.clone(),
            u: u0,
            k: 0,
            t_prev: 1.0,
            t_cur: 1.0,
        }
    }
}

/// Gradients of a scalar loss with respect to every input of the layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TvGradients {
    pub d_uhat: Field<f64>,
    pub d_c: Field<f64>,
    /// With respect to the caller's (unscaled) tensor components.
    pub d_w0: Field<f64>,
    pub d_w1: Field<f64>,
    pub d_u0: Field<f64>,
}

/// `t^0 = 1`, `t^(k+1) = (1 + sqrt(1 + 4 (t^k)^2)) / 2`; returns `t^0..=t^K`.
pub fn fista_t_sequence(iters: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(iters + 1);
    t.push(1.0);
    for k in 0..iters {
        let prev: f64 = t[k];
        t.push((1.0 + (1.0 + 4.0 * prev * prev).sqrt()) / 2.0);
    }
    t
}

#[inline]
pub(crate) fn momentum(t: &[f64], k: usize) -> f64 {
    (t[k] - 1.0) / t[k + 1]
}

/// Which case of the data-term prox fired at a pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxBranch {
    /// `a - c > uhat`: shrink down.
    Above,
    /// `a + c < uhat`: shrink up.
    Below,
    /// Clamped to `uhat`; ties land here.
    Clamp,
}

#[inline]
pub(crate) fn prox_branch<T: Real>(a: T, uhat: T, c: T) -> ProxBranch {
    if a - c > uhat {
        ProxBranch::Above
    } else if a + c < uhat {
        ProxBranch::Below
    } else {
        ProxBranch::Clamp
    }
}

#[inline]
pub(crate) fn prox_pixel<T: Real>(a: T, uhat: T, c: T) -> T {
    match prox_branch(a, uhat, c) {
        ProxBranch::Above => a - c,
        ProxBranch::Below => a + c,
        ProxBranch::Clamp => uhat,
    }
}

/// Record of the non-smooth decisions taken along a trajectory: which prox
/// branch and which Huber branch fired at every pixel and iteration, plus the
/// smallest distance to a switch of either kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchTrace {
    pub margin: f64,
    pub signature: u64,
}

impl Default for BranchTrace {
    fn default() -> Self {
        Self {
            margin: f64::INFINITY,
            signature: 0xcbf2_9ce4_8422_2325,
        }
    }
}

impl BranchTrace {
    #[inline]
    fn mix(&mut self, v: u64) {
        self.signature = (self.signature ^ v).wrapping_mul(0x0100_0000_01b3);
    }

    pub(crate) fn record_prox<T: Real>(&mut self, a: &[T], uhat: &[T], c: &[T]) {
        for i in 0..a.len() {
            self.mix(prox_branch(a[i], uhat[i], c[i]) as u64);
            let d = (a[i] - uhat[i]).wide().abs();
            self.margin = self.margin.min((d - c[i].wide()).abs());
        }
    }

    /// Huber groups with norm weights `nu(i)` on the 2-vectors `(zx, zy)`.
    pub(crate) fn record_groups<T: Real>(&mut self, zx: &[T], zy: &[T], nu: impl Fn(usize) -> [T; 2], delta: T) {
        for i in 0..zx.len() {
            let v = nu(i);
            let n = (v[0] * zx[i] * zx[i] + v[1] * zy[i] * zy[i]).sqrt();
            self.mix(u64::from(n <= delta));
            self.margin = self.margin.min((n - delta).wide().abs());
        }
    }
}

/// Soft shrinkage of `u_half` toward `uhat` with per-pixel radius `c`.
pub fn prox_data<T: Real>(u_half: &Field<T>, uhat: &Field<T>, c: &ConfidenceMap<T>) -> Result<Field<T>> {
    let (w, h) = u_half.dims();
    uhat.expect_dims(w, h, "uhat")?;
    c.field().expect_dims(w, h, "confidence")?;
    let out = u_half
        .as_slice()
        .iter()
        .zip(uhat.as_slice())
        .zip(c.as_slice())
        .map(|((&a, &f), &c)| prox_pixel(a, f, c))
        .collect();
    Ok(Field::from_raw(w, h, out))
}

/// Huber-normalized flux `W' z / max(1, |sqrt(W') z| / delta)` at one pixel.
/// Returns the flux and whether the linear (normalized) branch is active.
#[inline]
pub(crate) fn huber_flux<T: Real>(gx: T, gy: T, w0: T, w1: T, delta: T) -> (T, T, bool) {
    let n = (w0 * gx * gx + w1 * gy * gy).sqrt();
    if n <= delta {
        (w0 * gx, w1 * gy, false)
    } else {
        let s = delta / n;
        (w0 * gx * s, w1 * gy * s, true)
    }
}

/// Fixed inputs of one scalar TV problem, tensor already folded by `1/L`.
pub(crate) struct TvKernel<'a, T> {
    pub width: usize,
    pub uhat: &'a [T],
    pub c: &'a [T],
    pub w0: Vec<T>,
    pub w1: Vec<T>,
    pub delta: T,
}

/// Reusable buffers for one iteration.
pub(crate) struct TvScratch<T> {
    gx: Vec<T>,
    gy: Vec<T>,
    a: Vec<T>,
    pub trace: Option<BranchTrace>,
}

impl<T: Real> TvScratch<T> {
    pub fn new(n: usize) -> Self {
        Self {
            gx: vec![T::zero(); n],
            gy: vec![T::zero(); n],
            a: vec![T::zero(); n],
            trace: None,
        }
    }
}

impl<'a, T: Real> TvKernel<'a, T> {
    pub fn new(uhat: &'a Field<T>, c: &'a ConfidenceMap<T>, w: &DiffusionTensor<T>, delta: f64, scale: f64) -> Result<Self> {
        let (width, height) = uhat.dims();
        c.field().expect_dims(width, height, "confidence")?;
        w.w0().expect_dims(width, height, "diffusion tensor")?;
        let (w0, w1) = w.scaled_raw(scale);
        Ok(Self {
            width,
            uhat: uhat.as_slice(),
            c: c.as_slice(),
            w0,
            w1,
            delta: T::of(delta),
        })
    }

    /// `a = v - D^T flux(D v)`, left in `scratch.a`; `scratch.gx/gy` keep `D v`.
    fn half_step(&self, v: &[T], scratch: &mut TvScratch<T>) {
        let w = self.width;
        grad_into(v, w, &mut scratch.gx, &mut scratch.gy);
        let mut fx = scratch.gx.clone();
        let mut fy = scratch.gy.clone();
        let (w0, w1, delta) = (&self.w0, &self.w1, self.delta);
        par::rows2_mut(&mut fx, &mut fy, w, |y, rx, ry| {
            for x in 0..rx.len() {
                let i = y * w + x;
                let (a, b, _) = huber_flux(rx[x], ry[x], w0[i], w1[i], delta);
                rx[x] = a;
                ry[x] = b;
            }
        });
        grad_adj_into(&fx, &fy, w, &mut scratch.a);
        scratch.a.iter_mut().zip(v).for_each(|(a, &vv)| *a = vv - *a);
    }

    /// One FISTA iteration in place: `(u, v) <- (u^k+1, v^k+1)`.
    pub fn step(&self, u: &mut [T], v: &mut [T], beta: T, scratch: &mut TvScratch<T>) {
        self.half_step(v, scratch);
        if let Some(tr) = scratch.trace.as_mut() {
            tr.record_groups(&scratch.gx, &scratch.gy, |i| [self.w0[i], self.w1[i]], self.delta);
            tr.record_prox(&scratch.a, self.uhat, self.c);
        }
        let (uhat, c, a) = (self.uhat, self.c, &scratch.a);
        let w = self.width;
        par::rows2_mut(u, v, w, |y, ru, rv| {
            for x in 0..ru.len() {
                let i = y * w + x;
                let next = prox_pixel(a[i], uhat[i], c[i]);
                rv[x] = next + beta * (next - ru[x]);
                ru[x] = next;
            }
        });
    }
}

pub(crate) fn ensure_finite<T: Real>(what: &'static str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// One FISTA step on `state`. `w_scaled` must already be divided by the
/// Lipschitz constant.
pub fn tv_step<T: Real>(
    state: &TvState<T>,
    uhat: &Field<T>,
    c: &ConfidenceMap<T>,
    w_scaled: &DiffusionTensor<T>,
    delta: f64,
) -> Result<TvState<T>> {
    let (w, h) = uhat.dims();
    state.u.expect_dims(w, h, "state")?;
    let kernel = TvKernel::new(uhat, c, w_scaled, delta, 1.0)?;
    let t_next = (1.0 + (1.0 + 4.0 * state.t_cur * state.t_cur).sqrt()) / 2.0;
    let beta = T::of((state.t_cur - 1.0) / t_next);
    let mut u = state.u.as_slice().to_vec();
    let mut v = state.v.as_slice().to_vec();
    let mut scratch = TvScratch::new(w * h);
    kernel.step(&mut u, &mut v, beta, &mut scratch);
    ensure_finite("tv iterate", &u)?;
    ensure_finite("tv extrapolation", &v)?;
    Ok(TvState {
        u: Field::from_raw(w, h, u),
        v: Field::from_raw(w, h, v),
        k: state.k + 1,
        t_prev: state.t_cur,
        t_cur: t_next,
    })
}

/// Runs `config.iters` FISTA iterations from `u0` and returns `u^K` with the
/// checkpoints needed by [`tv_backward`].
pub fn tv_forward<T: Real>(
    uhat: &Field<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    u0: &Field<T>,
    config: &SolverConfig,
) -> Result<(Field<T>, CheckpointStore<TvState<T>>)> {
    config.validate()?;
    let (width, height) = uhat.dims();
    u0.expect_dims(width, height, "u0")?;
    let kernel = TvKernel::new(uhat, c, w, config.delta, 1.0 / TV_LIPSCHITZ)?;
    let t = fista_t_sequence(config.iters);
    let mut store = CheckpointStore::new(config.checkpoint, config.iters, width, height, config.delta);
    let marks = checkpoint_indices(config.checkpoint, config.iters);
    let mut next_mark = marks.iter().peekable();

    let mut u = u0.as_slice().to_vec();
    let mut v = u.clone();
    let mut scratch = TvScratch::new(width * height);
    for k in 0..config.iters {
        if next_mark.peek() == Some(&&k) {
            next_mark.next();
            ensure_finite("tv iterate", &u)?;
            ensure_finite("tv extrapolation", &v)?;
            store.states.push((
                k,
                TvState {
                    u: Field::from_raw(width, height, u.clone()),
                    v: Field::from_raw(width, height, v.clone()),
                    k,
                    t_prev: if k == 0 { 1.0 } else { t[k - 1] },
                    t_cur: t[k],
                },
            ));
        }
        kernel.step(&mut u, &mut v, T::of(momentum(&t, k)), &mut scratch);
    }
    ensure_finite("tv iterate", &u)?;
    Ok((Field::from_raw(width, height, u), store))
}

/// [`tv_forward`] without checkpoints, also returning the [`BranchTrace`]
/// of the trajectory.
pub fn tv_forward_traced<T: Real>(
    uhat: &Field<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    u0: &Field<T>,
    config: &SolverConfig,
) -> Result<(Field<T>, BranchTrace)> {
    config.validate()?;
    let (width, height) = uhat.dims();
    u0.expect_dims(width, height, "u0")?;
    let kernel = TvKernel::new(uhat, c, w, config.delta, 1.0 / TV_LIPSCHITZ)?;
    let t = fista_t_sequence(config.iters);
    let mut u = u0.as_slice().to_vec();
    let mut v = u.clone();
    let mut scratch = TvScratch::new(width * height);
    scratch.trace = Some(BranchTrace::default());
    for k in 0..config.iters {
        kernel.step(&mut u, &mut v, T::of(momentum(&t, k)), &mut scratch);
    }
    ensure_finite("tv iterate", &u)?;
    Ok((Field::from_raw(width, height, u), scratch.trace.unwrap_or_default()))
}

/// Literal weighted-Huber TV energy: `sum_p huber(sqrt(W) Du, delta) + c |u - uhat|`.
pub fn tv_energy<T: Real>(
    u: &Field<T>,
    uhat: &Field<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    delta: f64,
) -> Result<f64> {
    tv_energy_scaled(u, uhat, c, w, delta, 1.0)
}

/// The objective the FISTA iteration minimizes: [`tv_energy`] with the
/// tensor divided by [`TV_LIPSCHITZ`].
pub fn tv_solver_objective<T: Real>(
    u: &Field<T>,
    uhat: &Field<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    delta: f64,
) -> Result<f64> {
    tv_energy_scaled(u, uhat, c, w, delta, 1.0 / TV_LIPSCHITZ)
}

fn tv_energy_scaled<T: Real>(
    u: &Field<T>,
    uhat: &Field<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    delta: f64,
    scale: f64,
) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::NonPositive { name: "delta", value: delta });
    }
    let (width, height) = u.dims();
    uhat.expect_dims(width, height, "uhat")?;
    c.field().expect_dims(width, height, "confidence")?;
    w.w0().expect_dims(width, height, "diffusion tensor")?;
    let n = width * height;
    let mut gx = vec![T::zero(); n];
    let mut gy = vec![T::zero(); n];
    grad_into(u.as_slice(), width, &mut gx, &mut gy);
    let mut e = 0.0;
    for i in 0..n {
        let (a, b) = (gx[i].wide(), gy[i].wide());
        let norm = (scale * (w.w0().as_slice()[i].wide() * a * a + w.w1().as_slice()[i].wide() * b * b)).sqrt();
        e += huber_of_norm(norm, delta);
        e += c.as_slice()[i].wide() * (u.as_slice()[i].wide() - uhat.as_slice()[i].wide()).abs();
    }
    Ok(e)
}

/// Reverse of one Huber group `y = g * z / max(1, |sqrt(nu) z| / delta)`.
///
/// Returns `J^T r` and adds `r . dy/dg` and `r . dy/dnu` (per component)
/// into `dg` and `dnu`. Ties at the kink take the quadratic branch.
#[inline]
pub(crate) fn group_adjoint<T: Real>(
    z: [T; 2],
    r: [T; 2],
    g: [T; 2],
    nu: [T; 2],
    delta: T,
    dg: &mut [f64; 2],
    dnu: &mut [f64; 2],
) -> [T; 2] {
    let n = (nu[0] * z[0] * z[0] + nu[1] * z[1] * z[1]).sqrt();
    if n <= delta {
        dg[0] += r[0].wide() * z[0].wide();
        dg[1] += r[1].wide() * z[1].wide();
        return [g[0] * r[0], g[1] * r[1]];
    }
    let s = delta / n;
    let n2 = n * n;
    let gzr = g[0] * z[0] * r[0] + g[1] * z[1] * r[1];
    let jt = [
        s * (g[0] * r[0] - nu[0] * z[0] * gzr / n2),
        s * (g[1] * r[1] - nu[1] * z[1] * gzr / n2),
    ];
    let (sd, gzrd, n2d) = (s.wide(), gzr.wide(), n2.wide());
    for l in 0..2 {
        let zl = z[l].wide();
        dg[l] += sd * r[l].wide() * zl;
        dnu[l] -= sd * zl * zl * gzrd / (2.0 * n2d);
    }
    jt
}

/// Reverse pass. Given `d_uk = df/du^K`, returns exact gradients of `f`
/// w.r.t. `uhat`, `c`, `W` (unscaled) and `u^0`.
pub fn tv_backward<T: Real>(
    d_uk: &Field<T>,
    store: &CheckpointStore<TvState<T>>,
    uhat: &Field<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    config: &SolverConfig,
) -> Result<TvGradients> {
    config.validate()?;
    let (width, height) = uhat.dims();
    d_uk.expect_dims(width, height, "loss gradient")?;
    store.validate(config.iters, width, height, config.delta)?;
    let kernel = TvKernel::new(uhat, c, w, config.delta, 1.0 / TV_LIPSCHITZ)?;
    let t = fista_t_sequence(config.iters);
    let n = width * height;

    let mut acc_uhat = vec![0.0f64; n];
    let mut acc_c = vec![0.0f64; n];
    let mut acc_w0 = vec![0.0f64; n];
    let mut acc_w1 = vec![0.0f64; n];

    // Adjoint of u^(k+1) collected so far, and adjoint of v^(k+1).
    let mut ubar = d_uk.as_slice().to_vec();
    let mut vbar = vec![T::zero(); n];
    let mut ubar_k1 = vec![T::zero(); n];
    let mut abar = vec![T::zero(); n];
    let mut rx = vec![T::zero(); n];
    let mut ry = vec![T::zero(); n];
    let mut scratch = TvScratch::new(n);
    let mut replay: Vec<Vec<T>> = Vec::new();

    for (start, end, state) in store.segments_rev() {
        // Replay v^k for k in [start, end).
        replay.clear();
        let mut u = state.u.as_slice().to_vec();
        let mut v = state.v.as_slice().to_vec();
        for k in start..end {
            replay.push(v.clone());
            if k + 1 < end {
                kernel.step(&mut u, &mut v, T::of(momentum(&t, k)), &mut scratch);
            }
        }
        for k in (start..end).rev() {
            let vk = &replay[k - start];
            let beta = T::of(momentum(&t, k));
            for i in 0..n {
                ubar_k1[i] = ubar[i] + (T::one() + beta) * vbar[i];
                ubar[i] = -beta * vbar[i];
            }
            kernel.half_step(vk, &mut scratch);
            for i in 0..n {
                let g = ubar_k1[i];
                match prox_branch(scratch.a[i], kernel.uhat[i], kernel.c[i]) {
                    ProxBranch::Above => {
                        abar[i] = g;
                        acc_c[i] -= g.wide();
                    }
                    ProxBranch::Below => {
                        abar[i] = g;
                        acc_c[i] += g.wide();
                    }
                    ProxBranch::Clamp => {
                        abar[i] = T::zero();
                        acc_uhat[i] += g.wide();
                    }
                }
            }
            // vbar^k = abar - D^T J^T D abar
            grad_into(&abar, width, &mut rx, &mut ry);
            for i in 0..n {
                let mut dg = [0.0; 2];
                let mut dnu = [0.0; 2];
                let wl = [kernel.w0[i], kernel.w1[i]];
                let [jx, jy] = group_adjoint(
                    [scratch.gx[i], scratch.gy[i]],
                    [rx[i], ry[i]],
                    wl,
                    wl,
                    kernel.delta,
                    &mut dg,
                    &mut dnu,
                );
                // The flux enters the step with a minus sign.
                acc_w0[i] -= dg[0] + dnu[0];
                acc_w1[i] -= dg[1] + dnu[1];
                rx[i] = jx;
                ry[i] = jy;
            }
            grad_adj_into(&rx, &ry, width, &mut vbar);
            for i in 0..n {
                vbar[i] = abar[i] - vbar[i];
            }
        }
        ensure_finite("tv adjoint", &vbar)?;
    }

    // v^0 = u^0
    let d_u0: Vec<f64> = ubar.iter().zip(&vbar).map(|(a, b)| a.wide() + b.wide()).collect();
    let unscale = |v: Vec<f64>| v.into_iter().map(|g| g / TV_LIPSCHITZ).collect::<Vec<f64>>();
    let grads = TvGradients {
        d_uhat: Field::from_raw(width, height, acc_uhat),
        d_c: Field::from_raw(width, height, acc_c),
        d_w0: Field::from_raw(width, height, unscale(acc_w0)),
        d_w1: Field::from_raw(width, height, unscale(acc_w1)),
        d_u0: Field::from_raw(width, height, d_u0),
    };
    for f in [&grads.d_uhat, &grads.d_c, &grads.d_w0, &grads.d_w1, &grads.d_u0] {
        ensure_finite("tv gradient", f.as_slice())?;
    }
    Ok(grads)
}

/// Inner product helper used by loss wrappers: `<a, b>` in double precision.
pub fn inner<T: Real>(a: &Field<T>, b: &Field<T>) -> f64 {
    dot(a.as_slice(), b.as_slice())
}
