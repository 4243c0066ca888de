//! Forward-difference gradient `D`, the stacked TGV operator `B`, their
//! adjoints, the Huber function and power-iteration norm estimates.
//!
//! Boundary convention: the horizontal difference is zero on the last
//! column and the vertical difference is zero on the last row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Field;
use crate::scalar::Real;

/// Forward differences of a scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct GradField<T> {
    pub width: usize,
    pub height: usize,
    pub gx: Vec<T>,
    pub gy: Vec<T>,
}

impl<T: Real> GradField<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            gx: vec![T::zero(); width * height],
            gy: vec![T::zero(); width * height],
        }
    }

    pub fn dot(&self, other: &GradField<T>) -> f64 {
        dot(&self.gx, &other.gx) + dot(&self.gy, &other.gy)
    }
}

/// `B(u, w0, w1)`: `Du - w` (two channels), `Dw0`, `Dw1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TgvStack<T> {
    pub width: usize,
    pub height: usize,
    /// Channel order: `(Du - w)_x, (Du - w)_y, (Dw0)_x, (Dw0)_y, (Dw1)_x, (Dw1)_y`.
    pub channels: [Vec<T>; 6],
}

impl<T: Real> TgvStack<T> {
    pub fn dot(&self, other: &TgvStack<T>) -> f64 {
        self.channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| dot(a, b))
            .sum()
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.wide() * y.wide()).sum()
}

/// Writes `Du` into `gx`, `gy`.
pub(crate) fn grad_into<T: Real>(u: &[T], width: usize, gx: &mut [T], gy: &mut [T]) {
    let height = u.len() / width;
    crate::par::rows2_mut(gx, gy, width, |y, rx, ry| {
        let row = &u[y * width..(y + 1) * width];
        for x in 0..width {
            rx[x] = if x + 1 < width { row[x + 1] - row[x] } else { T::zero() };
            ry[x] = if y + 1 < height {
                u[(y + 1) * width + x] - row[x]
            } else {
                T::zero()
            };
        }
    });
}

/// Value of `(D^T p)` at pixel `(x, y)`. Entries of `p` on the far
/// boundary are ignored, which makes this the exact adjoint of
/// [`grad_into`] for arbitrary inputs.
#[inline]
pub(crate) fn grad_adj_at<T: Real>(px: &[T], py: &[T], width: usize, height: usize, x: usize, y: usize) -> T {
    let i = y * width + x;
    let mut acc = T::zero();
    if x + 1 < width {
        acc = acc - px[i];
    }
    if x > 0 {
        acc = acc + px[i - 1];
    }
    if y + 1 < height {
        acc = acc - py[i];
    }
    if y > 0 {
        acc = acc + py[i - width];
    }
    acc
}

/// Writes `D^T (px, py)` into `out`.
pub(crate) fn grad_adj_into<T: Real>(px: &[T], py: &[T], width: usize, out: &mut [T]) {
    let height = px.len() / width;
    crate::par::rows_mut(out, width, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            *o = grad_adj_at(px, py, width, height, x, y);
        }
    });
}

pub fn grad<T: Real>(u: &Field<T>) -> GradField<T> {
    let (w, h) = u.dims();
    let mut g = GradField::zeros(w, h);
    grad_into(u.as_slice(), w, &mut g.gx, &mut g.gy);
    g
}

pub fn grad_adj<T: Real>(p: &GradField<T>) -> Field<T> {
    let mut out = vec![T::zero(); p.width * p.height];
    grad_adj_into(&p.gx, &p.gy, p.width, &mut out);
    Field::from_raw(p.width, p.height, out)
}

pub fn apply_b<T: Real>(u: &Field<T>, w0: &Field<T>, w1: &Field<T>) -> Result<TgvStack<T>> {
    let (w, h) = u.dims();
    w0.expect_dims(w, h, "w0")?;
    w1.expect_dims(w, h, "w1")?;
    let du = grad(u);
    let dw0 = grad(w0);
    let dw1 = grad(w1);
    let c0 = du.gx.iter().zip(w0.as_slice()).map(|(&g, &a)| g - a).collect();
    let c1 = du.gy.iter().zip(w1.as_slice()).map(|(&g, &a)| g - a).collect();
    Ok(TgvStack {
        width: w,
        height: h,
        channels: [c0, c1, dw0.gx, dw0.gy, dw1.gx, dw1.gy],
    })
}

/// `B^T s`, returned as the `(u, w0, w1)` components.
pub fn apply_b_adj<T: Real>(s: &TgvStack<T>) -> (Field<T>, Field<T>, Field<T>) {
    let (w, h) = (s.width, s.height);
    let n = w * h;
    let [c0, c1, c2, c3, c4, c5] = &s.channels;
    let mut u = vec![T::zero(); n];
    grad_adj_into(c0, c1, w, &mut u);
    let mut a = vec![T::zero(); n];
    grad_adj_into(c2, c3, w, &mut a);
    let mut b = vec![T::zero(); n];
    grad_adj_into(c4, c5, w, &mut b);
    for i in 0..n {
        a[i] = a[i] - c0[i];
        b[i] = b[i] - c1[i];
    }
    (
        Field::from_raw(w, h, u),
        Field::from_raw(w, h, a),
        Field::from_raw(w, h, b),
    )
}

/// Huber function of a Euclidean norm, including the `delta^2 / 2` constant
/// of the quadratic branch: `|z|^2/2 + delta^2/2` if `|z| <= delta`, else
/// `delta |z|`.
#[inline]
pub(crate) fn huber_of_norm(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        0.5 * norm * norm + 0.5 * delta * delta
    } else {
        delta * norm
    }
}

pub fn huber(value: [f64; 2], delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::NonPositive { name: "delta", value: delta });
    }
    Ok(huber_of_norm(value[0].hypot(value[1]), delta))
}

/// A linear map `A` with its adjoint, acting on flat `f64` vectors.
pub trait LinearOperator {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn apply_adj(&self, y: &[f64], x: &mut [f64]);
}

/// Estimates the largest eigenvalue of `A^T A` by power iteration from a
/// fixed pseudo-random start vector. The returned Rayleigh quotient never
/// exceeds the true value and does not decrease with `iters`.
pub fn spectral_norm(op: &impl LinearOperator, iters: usize) -> Result<f64> {
    if iters == 0 {
        return Err(Error::IterBudgetZero);
    }
    let n = op.input_len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x005e_ed0f_d1ff);
    let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(0.0);
    }
    x.iter_mut().for_each(|v| *v /= norm);
    let mut y = vec![0.0; op.output_len()];
    let mut z = vec![0.0; n];
    let mut estimate = 0.0;
    for _ in 0..iters {
        op.apply(&x, &mut y);
        op.apply_adj(&y, &mut z);
        estimate = y.iter().map(|v| v * v).sum::<f64>();
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if zn == 0.0 {
            return Ok(0.0);
        }
        x.iter_mut().zip(&z).for_each(|(a, b)| *a = b / zn);
    }
    Ok(estimate)
}

/// `sqrt(W) D` for a diagonal tensor `W` (`None` means identity).
pub struct WeightedGrad {
    width: usize,
    height: usize,
    sqrt_w0: Vec<f64>,
    sqrt_w1: Vec<f64>,
}

impl WeightedGrad {
    pub fn new(width: usize, height: usize, tensor: Option<(&Field<f64>, &Field<f64>)>) -> Self {
        let n = width * height;
        let (sqrt_w0, sqrt_w1) = match tensor {
            Some((a, b)) => (
                a.as_slice().iter().map(|v| v.sqrt()).collect(),
                b.as_slice().iter().map(|v| v.sqrt()).collect(),
            ),
            None => (vec![1.0; n], vec![1.0; n]),
        };
        Self {
            width,
            height,
            sqrt_w0,
            sqrt_w1,
        }
    }
}

impl LinearOperator for WeightedGrad {
    fn input_len(&self) -> usize {
        self.width * self.height
    }

    fn output_len(&self) -> usize {
        2 * self.width * self.height
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.input_len();
        let (gx, gy) = y.split_at_mut(n);
        grad_into(x, self.width, gx, gy);
        for i in 0..n {
            gx[i] *= self.sqrt_w0[i];
            gy[i] *= self.sqrt_w1[i];
        }
    }

    fn apply_adj(&self, y: &[f64], x: &mut [f64]) {
        let n = self.input_len();
        let px: Vec<f64> = y[..n].iter().zip(&self.sqrt_w0).map(|(a, b)| a * b).collect();
        let py: Vec<f64> = y[n..].iter().zip(&self.sqrt_w1).map(|(a, b)| a * b).collect();
        grad_adj_into(&px, &py, self.width, x);
    }
}

/// `sqrt(V_beta) B`, where `V_beta` stacks the tensor (on `Du - w`) and
/// `beta` (on `Dw0`, `Dw1`). Input layout `[u, w0, w1]`, output the six
/// [`TgvStack`] channels back to back.
pub struct WeightedTgv {
    width: usize,
    height: usize,
    sqrt_w0: Vec<f64>,
    sqrt_w1: Vec<f64>,
    sqrt_beta: f64,
}

impl WeightedTgv {
    pub fn new(width: usize, height: usize, beta: f64, tensor: Option<(&Field<f64>, &Field<f64>)>) -> Self {
        let WeightedGrad { sqrt_w0, sqrt_w1, .. } = WeightedGrad::new(width, height, tensor);
        Self {
            width,
            height,
            sqrt_w0,
            sqrt_w1,
            sqrt_beta: beta.sqrt(),
        }
    }
}

impl LinearOperator for WeightedTgv {
    fn input_len(&self) -> usize {
        3 * self.width * self.height
    }

    fn output_len(&self) -> usize {
        6 * self.width * self.height
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.width * self.height;
        let (u, rest) = x.split_at(n);
        let (w0, w1) = rest.split_at(n);
        let (d0, rest) = y.split_at_mut(2 * n);
        let (d1, d2) = rest.split_at_mut(2 * n);
        {
            let (gx, gy) = d0.split_at_mut(n);
            grad_into(u, self.width, gx, gy);
            for i in 0..n {
                gx[i] = (gx[i] - w0[i]) * self.sqrt_w0[i];
                gy[i] = (gy[i] - w1[i]) * self.sqrt_w1[i];
            }
        }
        for (src, dst) in [(w0, d1), (w1, d2)] {
            let (gx, gy) = dst.split_at_mut(n);
            grad_into(src, self.width, gx, gy);
            gx.iter_mut().chain(gy.iter_mut()).for_each(|v| *v *= self.sqrt_beta);
        }
    }

    fn apply_adj(&self, y: &[f64], x: &mut [f64]) {
        let n = self.width * self.height;
        let s = |k: usize| &y[k * n..(k + 1) * n];
        let c0: Vec<f64> = s(0).iter().zip(&self.sqrt_w0).map(|(a, b)| a * b).collect();
        let c1: Vec<f64> = s(1).iter().zip(&self.sqrt_w1).map(|(a, b)| a * b).collect();
        let scaled = |k: usize| s(k).iter().map(|v| v * self.sqrt_beta).collect::<Vec<f64>>();
        let (c2, c3, c4, c5) = (scaled(2), scaled(3), scaled(4), scaled(5));
        let (xu, rest) = x.split_at_mut(n);
        let (xw0, xw1) = rest.split_at_mut(n);
        grad_adj_into(&c0, &c1, self.width, xu);
        grad_adj_into(&c2, &c3, self.width, xw0);
        grad_adj_into(&c4, &c5, self.width, xw1);
        for i in 0..n {
            xw0[i] -= c0[i];
            xw1[i] -= c1[i];
        }
    }
}
