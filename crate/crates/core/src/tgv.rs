//! Second-order TGV inpainting layer.
//!
//! The smooth part couples `u` with an auxiliary vector field `w` through
//! `B(u, w) = (Du - w, Dw0, Dw1)`. Each pixel carries three Huber groups:
//! `(Du - w)` weighted by `W`, and `Dw0`, `Dw1` weighted by `beta`.
//! FISTA takes a joint gradient step on `(v, q)`, applies the data prox to
//! `u` only and extrapolates `(u, w)` together.
//!
//! The step size is folded into the weights through `L(beta)`, see
//! [`tgv_lipschitz`].

use crate::checkpoint::{checkpoint_indices, CheckpointStore};
use crate::diffops::{grad_adj_into, grad_into, huber_of_norm};
use crate::error::{Error, Result};
use crate::grid::{ConfidenceMap, DiffusionTensor, Field};
use crate::par;
use crate::scalar::Real;
use crate::tv::{ensure_finite, BranchTrace, fista_t_sequence, group_adjoint, momentum, prox_branch, prox_pixel, ProxBranch, SolverConfig};

/// Step-size constant for the TGV system.
///
/// `max(12, rho(beta))` where `rho` is the largest eigenvalue of
/// `B^T V_beta B` under periodic boundaries, which bounds the operator with
/// the zero far-boundary convention. Equals 12 for `beta <= 9/8`.
pub fn tgv_lipschitz(beta: f64) -> f64 {
    tgv_rho(beta).max(12.0)
}

/// `(T + sqrt(T^2 - 256 beta)) / 2` with `T = 9 + 8 beta`.
pub fn tgv_rho(beta: f64) -> f64 {
    let t = 9.0 + 8.0 * beta;
    (t + (t * t - 256.0 * beta).sqrt()) / 2.0
}

/// `dL/dbeta`; zero where the constant 12 is active.
pub fn tgv_lipschitz_derivative(beta: f64) -> f64 {
    if tgv_rho(beta) <= 12.0 {
        return 0.0;
    }
    let t = 9.0 + 8.0 * beta;
    (8.0 + (8.0 * t - 128.0) / (t * t - 256.0 * beta).sqrt()) / 2.0
}

/// Folded weights of the three Huber groups.
///
/// Group one uses `W / L` as both multiplier and norm weight; the two `Dw`
/// groups use multiplier `beta / L` and norm weight `1 / L`.
#[derive(Clone, Debug, PartialEq)]
pub struct VWeights<T> {
    width: usize,
    height: usize,
    w0: Vec<T>,
    w1: Vec<T>,
    gamma: T,
    nu: T,
    beta: f64,
    lipschitz: f64,
}

impl<T: Real> VWeights<T> {
    /// Folds `W` and `beta` by `L(beta)`.
    pub fn new(w: &DiffusionTensor<T>, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        let l = tgv_lipschitz(beta);
        let (w0, w1) = w.scaled_raw(1.0 / l);
        Ok(Self {
            width: w.width(),
            height: w.height(),
            w0,
            w1,
            gamma: T::of(beta / l),
            nu: T::of(1.0 / l),
            beta,
            lipschitz: l,
        })
    }

    /// Weights that are already folded: `w_scaled = W / L`, `gamma = beta / L`,
    /// `nu = 1 / L`.
    pub fn from_scaled(w_scaled: &DiffusionTensor<T>, gamma: f64, nu: f64) -> Result<Self> {
        check_beta(gamma)?;
        if !(nu > 0.0) {
            return Err(Error::NonPositive { name: "nu", value: nu });
        }
        let (w0, w1) = w_scaled.scaled_raw(1.0);
        Ok(Self {
            width: w_scaled.width(),
            height: w_scaled.height(),
            w0,
            w1,
            gamma: T::of(gamma),
            nu: T::of(nu),
            beta: gamma / nu,
            lipschitz: 1.0 / nu,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositive { name: "beta", value: beta })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TgvState<T> {
    pub u: Field<T>,
    pub w0: Field<T>,
    pub w1: Field<T>,
    pub v: Field<T>,
    pub q0: Field<T>,
    pub q1: Field<T>,
    pub k: usize,
    pub t_prev: f64,
    pub t_cur: f64,
}

impl<T: Real> TgvState<T> {
    /// State at `k = 0` with `v = u0`, `q = w`.
    pub fn initial(u0: Field<T>, w0: Field<T>, w1: Field<T>) -> Self {
        Self {
            v: u0.clone(),
            q0: w0.clone(),
            q1: w1.clone(),
            u: u0,
            w0,
            w1,
            k: 0,
            t_prev: 1.0,
            t_cur: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TgvGradients {
    pub d_uhat: Field<f64>,
    pub d_c: Field<f64>,
    pub d_w0: Field<f64>,
    pub d_w1: Field<f64>,
    pub d_beta: f64,
    pub d_u0: Field<f64>,
    pub d_w0_0: Field<f64>,
    pub d_w1_0: Field<f64>,
}

#[inline]
fn group_flux<T: Real>(z: [T; 2], g: [T; 2], nu: [T; 2], delta: T) -> [T; 2] {
    let n = (nu[0] * z[0] * z[0] + nu[1] * z[1] * z[1]).sqrt();
    if n <= delta {
        [g[0] * z[0], g[1] * z[1]]
    } else {
        let s = delta / n;
        [g[0] * z[0] * s, g[1] * z[1] * s]
    }
}

struct Kernel<'a, T> {
    width: usize,
    uhat: &'a [T],
    c: &'a [T],
    vw: &'a VWeights<T>,
    delta: T,
}

/// Per-pixel differences at `(v, q)` and the resulting gradient step.
struct Scratch<T> {
    z1: [Vec<T>; 2],
    z2: [Vec<T>; 2],
    z3: [Vec<T>; 2],
    y: [Vec<T>; 6],
    tmp: Vec<T>,
    a: Vec<T>,
    p0: Vec<T>,
    p1: Vec<T>,
    trace: Option<BranchTrace>,
}

impl<T: Real> Scratch<T> {
    fn new(n: usize) -> Self {
        let z = || vec![T::zero(); n];
        Self {
            z1: [z(), z()],
            z2: [z(), z()],
            z3: [z(), z()],
            y: [z(), z(), z(), z(), z(), z()],
            tmp: z(),
            a: z(),
            p0: z(),
            p1: z(),
            trace: None,
        }
    }
}

impl<'a, T: Real> Kernel<'a, T> {
    fn new(uhat: &'a Field<T>, c: &'a ConfidenceMap<T>, vw: &'a VWeights<T>, delta: f64) -> Result<Self> {
        let (width, height) = uhat.dims();
        c.field().expect_dims(width, height, "confidence")?;
        if (vw.width, vw.height) != (width, height) {
            return Err(Error::DimMismatch(format!(
                "tgv weights are {}x{}, expected {width}x{height}",
                vw.width, vw.height
            )));
        }
        Ok(Self {
            width,
            uhat: uhat.as_slice(),
            c: c.as_slice(),
            vw,
            delta: T::of(delta),
        })
    }

    fn half_step(&self, v: &[T], q0: &[T], q1: &[T], s: &mut Scratch<T>) {
        let w = self.width;
        let [z1x, z1y] = &mut s.z1;
        grad_into(v, w, z1x, z1y);
        for i in 0..v.len() {
            s.z1[0][i] = s.z1[0][i] - q0[i];
            s.z1[1][i] = s.z1[1][i] - q1[i];
        }
        let [z2x, z2y] = &mut s.z2;
        grad_into(q0, w, z2x, z2y);
        let [z3x, z3y] = &mut s.z3;
        grad_into(q1, w, z3x, z3y);

        let (vw, delta) = (self.vw, self.delta);
        let (g, nu) = ([vw.gamma; 2], [vw.nu; 2]);
        let (z1, z2, z3) = (&s.z1, &s.z2, &s.z3);
        let [y0, y1, y2, y3, y4, y5] = &mut s.y;
        par::rows3_mut(y0, y1, y2, w, |row, r0, r1, r2| {
            for x in 0..r0.len() {
                let i = row * w + x;
                let wl = [vw.w0[i], vw.w1[i]];
                let [a, b] = group_flux([z1[0][i], z1[1][i]], wl, wl, delta);
                let [c, _] = group_flux([z2[0][i], z2[1][i]], g, nu, delta);
                r0[x] = a;
                r1[x] = b;
                r2[x] = c;
            }
        });
        par::rows3_mut(y3, y4, y5, w, |row, r3, r4, r5| {
            for x in 0..r3.len() {
                let i = row * w + x;
                let [_, d] = group_flux([z2[0][i], z2[1][i]], g, nu, delta);
                let [e, f] = group_flux([z3[0][i], z3[1][i]], g, nu, delta);
                r3[x] = d;
                r4[x] = e;
                r5[x] = f;
            }
        });

        grad_adj_into(&s.y[0], &s.y[1], w, &mut s.tmp);
        for i in 0..v.len() {
            s.a[i] = v[i] - s.tmp[i];
        }
        grad_adj_into(&s.y[2], &s.y[3], w, &mut s.tmp);
        for i in 0..v.len() {
            s.p0[i] = q0[i] + s.y[0][i] - s.tmp[i];
        }
        grad_adj_into(&s.y[4], &s.y[5], w, &mut s.tmp);
        for i in 0..v.len() {
            s.p1[i] = q1[i] + s.y[1][i] - s.tmp[i];
        }
    }

    fn step(&self, st: &mut Iterate<T>, beta: T, s: &mut Scratch<T>) {
        self.half_step(&st.v, &st.q0, &st.q1, s);
        if let Some(tr) = s.trace.as_mut() {
            let vw = self.vw;
            tr.record_groups(&s.z1[0], &s.z1[1], |i| [vw.w0[i], vw.w1[i]], self.delta);
            tr.record_groups(&s.z2[0], &s.z2[1], |_| [vw.nu; 2], self.delta);
            tr.record_groups(&s.z3[0], &s.z3[1], |_| [vw.nu; 2], self.delta);
            tr.record_prox(&s.a, self.uhat, self.c);
        }
        let (uhat, c, w) = (self.uhat, self.c, self.width);
        let a = &s.a;
        par::rows2_mut(&mut st.u, &mut st.v, w, |row, ru, rv| {
            for x in 0..ru.len() {
                let i = row * w + x;
                let next = prox_pixel(a[i], uhat[i], c[i]);
                rv[x] = next + beta * (next - ru[x]);
                ru[x] = next;
            }
        });
        for (p, wv, qv) in [(&s.p0, &mut st.w0, &mut st.q0), (&s.p1, &mut st.w1, &mut st.q1)] {
            par::rows2_mut(wv, qv, w, |row, rw, rq| {
                for x in 0..rw.len() {
                    let next = p[row * w + x];
                    rq[x] = next + beta * (next - rw[x]);
                    rw[x] = next;
                }
            });
        }
    }
}

/// Raw buffers of a [`TgvState`].
#[derive(Clone)]
struct Iterate<T> {
    u: Vec<T>,
    w0: Vec<T>,
    w1: Vec<T>,
    v: Vec<T>,
    q0: Vec<T>,
    q1: Vec<T>,
}

impl<T: Real> Iterate<T> {
    fn of(s: &TgvState<T>) -> Self {
        Self {
            u: s.u.as_slice().to_vec(),
            w0: s.w0.as_slice().to_vec(),
            w1: s.w1.as_slice().to_vec(),
            v: s.v.as_slice().to_vec(),
            q0: s.q0.as_slice().to_vec(),
            q1: s.q1.as_slice().to_vec(),
        }
    }

    fn check(&self) -> Result<()> {
        ensure_finite("tgv u", &self.u)?;
        ensure_finite("tgv w", &self.w0)?;
        ensure_finite("tgv w", &self.w1)?;
        ensure_finite("tgv v", &self.v)?;
        ensure_finite("tgv q", &self.q0)?;
        ensure_finite("tgv q", &self.q1)
    }

    fn into_state(self, width: usize, height: usize, k: usize, t_prev: f64, t_cur: f64) -> TgvState<T> {
        let f = |d| Field::from_raw(width, height, d);
        TgvState {
            u: f(self.u),
            w0: f(self.w0),
            w1: f(self.w1),
            v: f(self.v),
            q0: f(self.q0),
            q1: f(self.q1),
            k,
            t_prev,
            t_cur,
        }
    }
}

/// One FISTA step with pre-folded weights.
pub fn tgv_step<T: Real>(
    state: &TgvState<T>,
    uhat: &Field<T>,
    c: &ConfidenceMap<T>,
    vw: &VWeights<T>,
    delta: f64,
) -> Result<TgvState<T>> {
    let (width, height) = uhat.dims();
    for f in [&state.u, &state.w0, &state.w1, &state.v, &state.q0, &state.q1] {
        f.expect_dims(width, height, "state")?;
    }
    let kernel = Kernel::new(uhat, c, vw, delta)?;
    let t_next = (1.0 + (1.0 + 4.0 * state.t_cur * state.t_cur).sqrt()) / 2.0;
    let mut it = Iterate::of(state);
    let mut scratch = Scratch::new(width * height);
    kernel.step(&mut it, T::of((state.t_cur - 1.0) / t_next), &mut scratch);
    it.check()?;
    Ok(it.into_state(width, height, state.k + 1, state.t_cur, t_next))
}

/// Runs `config.iters` iterations from `(u0, w_init)`; returns `u_K`, `w_K`
/// and the checkpoints for [`tgv_backward`].
#[allow(clippy::type_complexity)]
pub fn tgv_forward<T: Real>(
    uhat: &Field<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    beta: f64,
    u0: &Field<T>,
    w_init: (&Field<T>, &Field<T>),
    config: &SolverConfig,
) -> Result<(Field<T>, (Field<T>, Field<T>), CheckpointStore<TgvState<T>>)> {
    config.validate()?;
    let (width, height) = uhat.dims();
    u0.expect_dims(width, height, "u0")?;
    w_init.0.expect_dims(width, height, "w init")?;
    w_init.1.expect_dims(width, height, "w init")?;
    let vw = VWeights::new(w, beta)?;
    let kernel = Kernel::new(uhat, c, &vw, config.delta)?;
    let t = fista_t_sequence(config.iters);
    let mut store = CheckpointStore::new(config.checkpoint, config.iters, width, height, config.delta);
    let marks = checkpoint_indices(config.checkpoint, config.iters);
    let mut next_mark = marks.iter().peekable();

    let init = TgvState::initial(u0.clone(), w_init.0.clone(), w_init.1.clone());
    let mut it = Iterate::of(&init);
    let mut scratch = Scratch::new(width * height);
    for k in 0..config.iters {
        if next_mark.peek() == Some(&&k) {
            next_mark.next();
            it.check()?;
            let t_prev = if k == 0 { 1.0 } else { t[k - 1] };
            store.states.push((k, it.clone().into_state(width, height, k, t_prev, t[k])));
        }
        kernel.step(&mut it, T::of(momentum(&t, k)), &mut scratch);
    }
    it.check()?;
    let f = |d| Field::from_raw(width, height, d);
    Ok((f(it.u), (f(it.w0), f(it.w1)), store))
}

/// [`tgv_forward`] without checkpoints, also returning the [`BranchTrace`]
/// of the trajectory.
#[allow(clippy::type_complexity)]
pub fn tgv_forward_traced<T: Real>(
    uhat: &Field<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    beta: f64,
    u0: &Field<T>,
    w_init: (&Field<T>, &Field<T>),
    config: &SolverConfig,
) -> Result<(Field<T>, (Field<T>, Field<T>), BranchTrace)> {
    config.validate()?;
    let (width, height) = uhat.dims();
    u0.expect_dims(width, height, "u0")?;
    w_init.0.expect_dims(width, height, "w init")?;
    w_init.1.expect_dims(width, height, "w init")?;
    let vw = VWeights::new(w, beta)?;
    let kernel = Kernel::new(uhat, c, &vw, config.delta)?;
    let t = fista_t_sequence(config.iters);
    let mut it = Iterate::of(&TgvState::initial(u0.clone(), w_init.0.clone(), w_init.1.clone()));
    let mut scratch = Scratch::new(width * height);
    scratch.trace = Some(BranchTrace::default());
    for k in 0..config.iters {
        kernel.step(&mut it, T::of(momentum(&t, k)), &mut scratch);
    }
    it.check()?;
    let f = |d| Field::from_raw(width, height, d);
    Ok((f(it.u), (f(it.w0), f(it.w1)), scratch.trace.unwrap_or_default()))
}

/// Literal TGV energy:
/// `sum_p huber(sqrt(W)(Du - w)) + beta (huber(Dw0) + huber(Dw1)) + c |u - uhat|`.
#[allow(clippy::too_many_arguments)]
pub fn tgv_energy<T: Real>(
    u: &Field<T>,
    w0: &Field<T>,
    w1: &Field<T>,
    uhat: &Field<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    beta: f64,
    delta: f64,
) -> Result<f64> {
    energy_scaled(u, w0, w1, uhat, c, w, beta, delta, 1.0)
}

/// The objective the folded iteration minimizes:
/// `huber(sqrt(W/L)(Du - w)) + beta (huber(Dw0/sqrt L) + huber(Dw1/sqrt L)) + c |u - uhat|`.
#[allow(clippy::too_many_arguments)]
pub fn tgv_solver_objective<T: Real>(
    u: &Field<T>,
    w0: &Field<T>,
    w1: &Field<T>,
    uhat: &Field<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    beta: f64,
    delta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    energy_scaled(u, w0, w1, uhat, c, w, beta, delta, 1.0 / tgv_lipschitz(beta))
}

#[allow(clippy::too_many_arguments)]
fn energy_scaled<T: Real>(
    u: &Field<T>,
    w0: &Field<T>,
    w1: &Field<T>,
    uhat: &Field<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    beta: f64,
    delta: f64,
    scale: f64,
) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::NonPositive { name: "delta", value: delta });
    }
    let (width, height) = u.dims();
    for (f, what) in [(w0, "w0"), (w1, "w1"), (uhat, "uhat"), (c.field(), "confidence"), (w.w0(), "diffusion tensor")] {
        f.expect_dims(width, height, what)?;
    }
    let n = width * height;
    let wide = |f: &Field<T>| f.as_slice().iter().map(|v| v.wide()).collect::<Vec<f64>>();
    let (ud, w0d, w1d) = (wide(u), wide(w0), wide(w1));
    let mut gu = (vec![0.0; n], vec![0.0; n]);
    let mut g0 = (vec![0.0; n], vec![0.0; n]);
    let mut g1 = (vec![0.0; n], vec![0.0; n]);
    grad_into(&ud, width, &mut gu.0, &mut gu.1);
    grad_into(&w0d, width, &mut g0.0, &mut g0.1);
    grad_into(&w1d, width, &mut g1.0, &mut g1.1);
    let mut e = 0.0;
    for i in 0..n {
        let (a, b) = (gu.0[i] - w0d[i], gu.1[i] - w1d[i]);
        let (wa, wb) = (w.w0().as_slice()[i].wide(), w.w1().as_slice()[i].wide());
        e += huber_of_norm((scale * (wa * a * a + wb * b * b)).sqrt(), delta);
        e += beta * huber_of_norm((scale * (g0.0[i] * g0.0[i] + g0.1[i] * g0.1[i])).sqrt(), delta);
        e += beta * huber_of_norm((scale * (g1.0[i] * g1.0[i] + g1.1[i] * g1.1[i])).sqrt(), delta);
        e += c.as_slice()[i].wide() * (ud[i] - uhat.as_slice()[i].wide()).abs();
    }
    Ok(e)
}

/// Reverse pass. Given `df/du_K` and `df/dw_K`, returns exact gradients
/// w.r.t. `uhat`, `c`, `W`, `beta`, `u0` and the initial `w`.
#[allow(clippy::too_many_arguments)]
pub fn tgv_backward<T: Real>(
    d_uk: &Field<T>,
    d_wk: (&Field<T>, &Field<T>),
    store: &CheckpointStore<TgvState<T>>,
    uhat: &Field<T>,
    c: &ConfidenceMap<T>,
    w: &DiffusionTensor<T>,
    beta: f64,
    config: &SolverConfig,
) -> Result<TgvGradients> {
    config.validate()?;
    let (width, height) = uhat.dims();
    d_uk.expect_dims(width, height, "loss gradient")?;
    d_wk.0.expect_dims(width, height, "loss gradient")?;
    d_wk.1.expect_dims(width, height, "loss gradient")?;
    store.validate(config.iters, width, height, config.delta)?;
    let vw = VWeights::new(w, beta)?;
    let kernel = Kernel::new(uhat, c, &vw, config.delta)?;
    let t = fista_t_sequence(config.iters);
    let n = width * height;
    let zero = || vec![T::zero(); n];

    let mut acc_uhat = vec![0.0f64; n];
    let mut acc_c = vec![0.0f64; n];
    // Derivatives w.r.t. the folded group weights, per pixel.
    let mut acc_w = [vec![0.0f64; n], vec![0.0f64; n]];
    let mut acc_gamma = vec![0.0f64; n];
    let mut acc_nu = vec![0.0f64; n];

    let mut ubar = d_uk.as_slice().to_vec();
    let mut wbar = [d_wk.0.as_slice().to_vec(), d_wk.1.as_slice().to_vec()];
    let mut vbar = zero();
    let mut qbar = [zero(), zero()];
    let mut abar = zero();
    let mut pbar = [zero(), zero()];
    let mut r = [zero(), zero(), zero(), zero(), zero(), zero()];
    let mut tmp = zero();
    let mut scratch = Scratch::new(n);
    let mut replay: Vec<(Vec<T>, Vec<T>, Vec<T>)> = Vec::new();
    let (g2, nu2) = ([vw.gamma; 2], [vw.nu; 2]);

    for (start, end, state) in store.segments_rev() {
        replay.clear();
        let mut it = Iterate::of(state);
        for k in start..end {
            replay.push((it.v.clone(), it.q0.clone(), it.q1.clone()));
            if k + 1 < end {
                kernel.step(&mut it, T::of(momentum(&t, k)), &mut scratch);
            }
        }
        for k in (start..end).rev() {
            let (vk, q0k, q1k) = &replay[k - start];
            let mom = T::of(momentum(&t, k));
            for i in 0..n {
                let ub = ubar[i] + (T::one() + mom) * vbar[i];
                ubar[i] = -mom * vbar[i];
                abar[i] = ub;
                for j in 0..2 {
                    pbar[j][i] = wbar[j][i] + (T::one() + mom) * qbar[j][i];
                    wbar[j][i] = -mom * qbar[j][i];
                }
            }
            kernel.half_step(vk, q0k, q1k, &mut scratch);
            for i in 0..n {
                let g = abar[i];
                match prox_branch(scratch.a[i], kernel.uhat[i], kernel.c[i]) {
                    ProxBranch::Above => acc_c[i] -= g.wide(),
                    ProxBranch::Below => acc_c[i] += g.wide(),
                    ProxBranch::Clamp => {
                        acc_uhat[i] += g.wide();
                        abar[i] = T::zero();
                    }
                }
            }
            // r = B (abar, pbar)
            {
                let [r0, r1, r2, r3, r4, r5] = &mut r;
                grad_into(&abar, width, r0, r1);
                for i in 0..n {
                    r0[i] = r0[i] - pbar[0][i];
                    r1[i] = r1[i] - pbar[1][i];
                }
                grad_into(&pbar[0], width, r2, r3);
                grad_into(&pbar[1], width, r4, r5);
            }
            // r <- J^T r, group by group
            for i in 0..n {
                let wl = [vw.w0[i], vw.w1[i]];
                let mut dg = [0.0; 2];
                let mut dn = [0.0; 2];
                let s1 = group_adjoint(
                    [scratch.z1[0][i], scratch.z1[1][i]],
                    [r[0][i], r[1][i]],
                    wl,
                    wl,
                    kernel.delta,
                    &mut dg,
                    &mut dn,
                );
                acc_w[0][i] -= dg[0] + dn[0];
                acc_w[1][i] -= dg[1] + dn[1];
                let (mut dg, mut dn) = ([0.0; 2], [0.0; 2]);
                let s2 = group_adjoint(
                    [scratch.z2[0][i], scratch.z2[1][i]],
                    [r[2][i], r[3][i]],
                    g2,
                    nu2,
                    kernel.delta,
                    &mut dg,
                    &mut dn,
                );
                let s3 = group_adjoint(
                    [scratch.z3[0][i], scratch.z3[1][i]],
                    [r[4][i], r[5][i]],
                    g2,
                    nu2,
                    kernel.delta,
                    &mut dg,
                    &mut dn,
                );
                acc_gamma[i] -= dg[0] + dg[1];
                acc_nu[i] -= dn[0] + dn[1];
                [r[0][i], r[1][i]] = s1;
                [r[2][i], r[3][i]] = s2;
                [r[4][i], r[5][i]] = s3;
            }
            // (vbar, qbar) = (abar, pbar) - B^T r
            grad_adj_into(&r[0], &r[1], width, &mut tmp);
            for i in 0..n {
                vbar[i] = abar[i] - tmp[i];
            }
            grad_adj_into(&r[2], &r[3], width, &mut tmp);
            for i in 0..n {
                qbar[0][i] = pbar[0][i] + r[0][i] - tmp[i];
            }
            grad_adj_into(&r[4], &r[5], width, &mut tmp);
            for i in 0..n {
                qbar[1][i] = pbar[1][i] + r[1][i] - tmp[i];
            }
        }
        ensure_finite("tgv adjoint", &vbar)?;
        ensure_finite("tgv adjoint", &qbar[0])?;
        ensure_finite("tgv adjoint", &qbar[1])?;
    }

    let l = vw.lipschitz;
    let dl = tgv_lipschitz_derivative(beta);
    let (w0s, w1s) = (w.w0().as_slice(), w.w1().as_slice());
    let mut d_beta = 0.0;
    for i in 0..n {
        let chain_w = acc_w[0][i] * w0s[i].wide() + acc_w[1][i] * w1s[i].wide();
        d_beta += acc_gamma[i] / l - dl / (l * l) * (chain_w + acc_gamma[i] * beta + acc_nu[i]);
    }
    let sum = |a: &[T], b: &[T]| a.iter().zip(b).map(|(x, y)| x.wide() + y.wide()).collect::<Vec<f64>>();
    let f = |d| Field::from_raw(width, height, d);
    let [aw0, aw1] = acc_w;
    let grads = TgvGradients {
        d_uhat: f(acc_uhat),
        d_c: f(acc_c),
        d_w0: f(aw0.into_iter().map(|g| g / l).collect()),
        d_w1: f(aw1.into_iter().map(|g| g / l).collect()),
        d_beta,
        d_u0: f(sum(&ubar, &vbar)),
        d_w0_0: f(sum(&wbar[0], &qbar[0])),
        d_w1_0: f(sum(&wbar[1], &qbar[1])),
    };
    for g in [&grads.d_uhat, &grads.d_c, &grads.d_w0, &grads.d_w1, &grads.d_u0, &grads.d_w0_0, &grads.d_w1_0] {
        ensure_finite("tgv gradient", g.as_slice())?;
    }
    if !d_beta.is_finite() {
        return Err(Error::NonFinite { what: "tgv beta gradient", index: 0 });
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffops::{spectral_norm, WeightedTgv};

    fn filled(w: usize, h: usize, v: f64) -> Field<f64> {
        Field::filled(w, h, v).unwrap()
    }

    #[test]
    fn lipschitz_is_twelve_up_to_nine_eighths() {
        assert_eq!(tgv_lipschitz(0.5), 12.0);
        assert_eq!(tgv_lipschitz(1.0), 12.0);
        assert!((tgv_rho(1.125) - 12.0).abs() < 1e-12);
        assert!(tgv_lipschitz(2.0) > 16.0);
        assert_eq!(tgv_lipschitz_derivative(1.0), 0.0);
        let h = 1e-6;
        let fd = (tgv_lipschitz(3.0 + h) - tgv_lipschitz(3.0 - h)) / (2.0 * h);
        assert!((fd - tgv_lipschitz_derivative(3.0)).abs() < 1e-6);
    }

    #[test]
    fn lipschitz_bounds_power_iteration() {
        for beta in [0.25, 0.5, 1.0, 1.5, 2.0, 4.0, 10.0] {
            let op = WeightedTgv::new(12, 12, beta, None);
            let est = spectral_norm(&op, 300).unwrap();
            assert!(est <= tgv_lipschitz(beta) + 1e-9, "beta {beta}: {est}");
        }
    }

    #[test]
    fn affine_fixed_point() {
        let (w, h) = (5, 4);
        let u = Field::from_fn(w, h, |x, y| x as f64 + 2.0 * y as f64).unwrap();
        let w0 = filled(w, h, 1.0);
        let w1 = filled(w, h, 2.0);
        let c = ConfidenceMap::filled(w, h, 1.0).unwrap();
        let vw = VWeights::new(&DiffusionTensor::filled(w, h, 1.0).unwrap(), 1.0).unwrap();
        let s0 = TgvState::initial(u.clone(), w0.clone(), w1.clone());
        let s1 = tgv_step(&s0, &u, &c, &vw, 0.1).unwrap();
        assert_eq!(s1.u, u);
        // Only the far-boundary rows/columns of w feel Du = 0 there.
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                assert_eq!(s1.w0.get(x, y), 1.0);
                assert_eq!(s1.w1.get(x, y), 2.0);
            }
        }
    }

    #[test]
    fn zero_state_stays_zero() {
        let z = filled(3, 3, 0.0);
        let c = ConfidenceMap::filled(3, 3, 1.0).unwrap();
        let vw = VWeights::new(&DiffusionTensor::filled(3, 3, 0.7).unwrap(), 1.0).unwrap();
        let s = tgv_step(&TgvState::initial(z.clone(), z.clone(), z.clone()), &z, &c, &vw, 0.1).unwrap();
        for f in [&s.u, &s.w0, &s.w1, &s.v, &s.q0, &s.q1] {
            assert_eq!(f, &z);
        }
    }

    #[test]
    fn energy_floor() {
        let (w, h) = (4, 3);
        let u = Field::from_fn(w, h, |x, y| x as f64 + 2.0 * y as f64).unwrap();
        let c = ConfidenceMap::filled(w, h, 0.0).unwrap();
        let t = DiffusionTensor::filled(w, h, 1.0).unwrap();
        let z = filled(w, h, 0.0);
        let beta = 1.5;
        let floor = (1.0 + 2.0 * beta) * (w * h) as f64 * 0.5 * 0.01;
        let e = tgv_energy(&z, &z, &z, &z, &c, &t, beta, 0.1).unwrap();
        assert!((e - floor).abs() < 1e-12);
        // Affine u with w = Du: the far boundary has Du = 0 but w = (1, 2),
        // so only the interior is at the floor.
        let e = tgv_energy(&u, &filled(w, h, 1.0), &filled(w, h, 2.0), &u, &c, &t, beta, 0.1).unwrap();
        assert!(e > floor);
    }

    #[test]
    fn bad_beta_rejected() {
        let t = DiffusionTensor::filled(2, 2, 1.0).unwrap();
        assert!(matches!(VWeights::new(&t, 0.0), Err(Error::NonPositive { .. })));
        assert!(matches!(VWeights::new(&t, f64::NAN), Err(Error::NonPositive { .. })));
    }
}
