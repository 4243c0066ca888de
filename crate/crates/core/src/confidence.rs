//! Hand-crafted confidence features, non-minimum suppression, an
//! image-edge diffusion tensor and the matching loss.

use crate::diffops::{grad_into, huber_of_norm};
use crate::error::{Error, Result};
use crate::grid::{ConfidenceMap, DiffusionTensor, Field, FlowField, ScalarMap};
use crate::matching::{argmin_flow, softmax_prob, CostVolumes};
use crate::quadfit::QuadFitResult;
use crate::scalar::Real;

/// Forward-backward distance of pixels whose warp leaves the grid.
pub const FAR: f64 = 1e6;

/// Bilinear sample of `f` at `(x, y)`; `None` outside `[0, w-1] x [0, h-1]`.
pub fn bilinear<T: Real>(f: &Field<T>, x: f64, y: f64) -> Option<f64> {
    let (w, h) = f.dims();
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let g = |x, y| f.get(x, y).wide();
    let top = g(x0, y0) + tx * (g(x1, y0) - g(x0, y0));
    let bottom = g(x0, y1) + tx * (g(x1, y1) - g(x0, y1));
    Some(top + ty * (bottom - top))
}

/// `|ubar(x, y) - ubar_bw(x + ubar_0, y + ubar_1)|` with bilinear sampling
/// of the backward flow; [`FAR`] where the warp leaves the grid.
pub fn fwd_bwd_distance<T: Real>(ubar: &FlowField<T>, ubar_bw: &FlowField<T>) -> Result<ScalarMap<T>> {
    if ubar.dims() != ubar_bw.dims() {
        return Err(Error::DimMismatch("forward and backward flows differ in size".into()));
    }
    let (w, h) = ubar.dims();
    let d = Field::from_fn(w, h, |x, y| {
        let (u0, u1) = ubar.get(x, y);
        let (px, py) = (x as f64 + u0.wide(), y as f64 + u1.wide());
        match (bilinear(&ubar_bw.u0, px, py), bilinear(&ubar_bw.u1, px, py)) {
            (Some(b0), Some(b1)) => T::of((u0.wide() - b0).hypot(u1.wide() - b1)),
            _ => T::of(FAR),
        }
    })?;
    Ok(ScalarMap::from_field(&d))
}

/// `max(0, min(x + u0, y + u1, N - x - u0, M - y - u1))` per pixel.
pub fn boundary_distance<T: Real>(uhat: &FlowField<T>) -> ScalarMap<T> {
    let (w, h) = uhat.dims();
    let d = Field::from_fn(w, h, |x, y| {
        let (u0, u1) = uhat.get(x, y);
        let (px, py) = (x as f64 + u0.wide(), y as f64 + u1.wide());
        let m = px.min(py).min(w as f64 - px).min(h as f64 - py);
        T::of(m.max(0.0))
    })
    .expect("dims come from a valid flow");
    ScalarMap::from_field(&d)
}

/// Keeps only the largest entry of every aligned 2x2 block, per channel.
/// Ties go to the first entry in row-major order; blocks cut by an odd edge
/// compete among the pixels they have.
pub fn nonmin_suppress<T: Real>(conf: &ScalarMap<T>) -> ScalarMap<T> {
    let (w, h, ch) = (conf.width(), conf.height(), conf.channels());
    let mut out = ScalarMap::zeros(w, h, ch).expect("dims come from a valid map");
    for c in 0..ch {
        for by in (0..h).step_by(2) {
            for bx in (0..w).step_by(2) {
                let mut best = (bx, by);
                for (x, y) in [(bx, by), (bx + 1, by), (bx, by + 1), (bx + 1, by + 1)] {
                    if x < w && y < h && conf.get(x, y, c) > conf.get(best.0, best.1, c) {
                        best = (x, y);
                    }
                }
                out.set(best.0, best.1, c, conf.get(best.0, best.1, c));
            }
        }
    }
    out
}

/// `w_i = exp(-gamma |d_i I|)` from forward differences of a grayscale
/// image; multi-channel images are averaged first.
pub fn edge_tensor<T: Real>(image: &ScalarMap<T>, gamma: f64) -> Result<DiffusionTensor<T>> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::NonPositive { name: "gamma", value: gamma });
    }
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let gray: Vec<f64> = (0..w * h)
        .map(|i| image.pixel(i % w, i / w).iter().map(|v| v.wide()).sum::<f64>() / ch as f64)
        .collect();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    grad_into(&gray, w, &mut gx, &mut gy);
    let weight = |g: &[f64]| Field::new(w, h, g.iter().map(|d| T::of((-gamma * d.abs()).exp())).collect());
    DiffusionTensor::new(weight(&gx)?, weight(&gy)?)
}

/// Standard Huber `1/2 z^2` below `eps`, `eps (|z| - eps / 2)` above.
fn huber0(norm: f64, eps: f64) -> f64 {
    huber_of_norm(norm, eps) - 0.5 * eps * eps
}

/// Matching loss over valid pixels:
/// `-log p0(u*_0) - log p1(u*_1) + alpha min(1, huber_eps(|uhat - u*|))`.
///
/// `prob0`, `prob1` hold `2d` channels over `H = {-d, .., d-1}`; lookups
/// round the ground-truth displacement.
#[allow(clippy::too_many_arguments)]
pub fn loss_cor<T: Real>(
    prob0: &ScalarMap<T>,
    prob1: &ScalarMap<T>,
    uhat: &FlowField<T>,
    ustar: &FlowField<T>,
    valid: &[bool],
    alpha: f64,
    eps: f64,
) -> Result<f64> {
    let (w, h) = uhat.dims();
    for (m, name) in [(prob0, "prob0"), (prob1, "prob1")] {
        if (m.width(), m.height()) != (w, h) {
            return Err(Error::DimMismatch(format!("{name} is {}x{}, expected {w}x{h}", m.width(), m.height())));
        }
    }
    if ustar.dims() != (w, h) || valid.len() != w * h || prob0.channels() != prob1.channels() {
        return Err(Error::DimMismatch("loss inputs differ in shape".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::NonPositive { name: "eps", value: eps });
    }
    let depth = prob0.channels();
    let d = (depth / 2) as i64;
    let lookup = |p: &ScalarMap<T>, x: usize, y: usize, u: f64| -> Result<f64> {
        let k = u.round() as i64 + d;
        if k < 0 || k >= depth as i64 {
            return Err(Error::ProbOutOfRange(format!("displacement {u} outside the volume at ({x}, {y})")));
        }
        let v = p.get(x, y, k as usize).wide();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::ProbOutOfRange(format!("probability {v} at ({x}, {y})")));
        }
        Ok(v.max(f64::MIN_POSITIVE))
    };
    let mut loss = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !valid[y * w + x] {
                continue;
            }
            let (s0, s1) = ustar.get(x, y);
            let (h0, h1) = uhat.get(x, y);
            loss -= lookup(prob0, x, y, s0.wide())?.ln();
            loss -= lookup(prob1, x, y, s1.wide())?.ln();
            let dist = (h0.wide() - s0.wide()).hypot(h1.wide() - s1.wide());
            loss += alpha * huber0(dist, eps).min(1.0);
        }
    }
    Ok(loss)
}

/// Nearest-neighbour enlargement of a strided map to `width x height`.
pub fn upsample_nearest<T: Real>(m: &ScalarMap<T>, width: usize, height: usize) -> Result<ScalarMap<T>> {
    let ch = m.channels();
    let mut out = ScalarMap::zeros(width, height, ch)?;
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = ((x / 2).min(m.width() - 1), (y / 2).min(m.height() - 1));
            for c in 0..ch {
                out.set(x, y, c, m.get(sx, sy, c));
            }
        }
    }
    Ok(out)
}

/// Probability of each pixel's own argmin displacement.
fn prob_at_argmin<T: Real>(prob: &ScalarMap<T>, u: &Field<T>) -> Field<T> {
    let d = (prob.channels() / 2) as i64;
    Field::from_fn(u.width(), u.height(), |x, y| {
        let k = (u.get(x, y).wide().round() as i64 + d) as usize;
        prob.get(x, y, k)
    })
    .expect("dims come from a valid flow")
}

/// Inputs of an external confidence scorer, all at full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceFeatures<T> {
    /// Pseudo-likelihoods of the argmin displacement, one channel per axis.
    pub prob: ScalarMap<T>,
    pub fb_dist: ScalarMap<T>,
    pub boundary: ScalarMap<T>,
    pub fit_cost: ScalarMap<T>,
}

impl<T: Real> ConfidenceFeatures<T> {
    /// Assembles the features from strided volumes and a refinement.
    pub fn new(volumes: &CostVolumes<T>, refined: &QuadFitResult<T>) -> Result<Self> {
        let (w, h) = refined.flow.dims();
        let ubar = argmin_flow(&volumes.forward[0], &volumes.forward[1])?;
        let ubar_bw = argmin_flow(&volumes.backward[0], &volumes.backward[1])?;
        let p0 = prob_at_argmin(&softmax_prob(&volumes.forward[0]), &ubar.u0);
        let p1 = prob_at_argmin(&softmax_prob(&volumes.forward[1]), &ubar.u1);
        Ok(Self {
            prob: upsample_nearest(&ScalarMap::stack(&[&p0, &p1])?, w, h)?,
            fb_dist: upsample_nearest(&fwd_bwd_distance(&ubar, &ubar_bw)?, w, h)?,
            boundary: boundary_distance(&refined.flow),
            fit_cost: refined.cost.clone(),
        })
    }

    /// Baseline scorer `nonmin_suppress(exp(-fb_dist) p0 p1)`.
    pub fn baseline(&self) -> Result<ConfidenceMap<T>> {
        let (w, h) = (self.prob.width(), self.prob.height());
        let raw = Field::from_fn(w, h, |x, y| {
            let p = self.prob.get(x, y, 0).wide() * self.prob.get(x, y, 1).wide();
            T::of((-self.fb_dist.get(x, y, 0).wide()).exp() * p)
        })?;
        ConfidenceMap::new(nonmin_suppress(&ScalarMap::from_field(&raw)).channel(0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(w: usize, h: usize, u0: f64, u1: f64) -> FlowField<f64> {
        FlowField::constant(w, h, u0, u1).unwrap()
    }

    #[test]
    fn boundary_examples() {
        let mut u = flow(10, 10, 0.0, 0.0);
        let b = boundary_distance(&u);
        assert_eq!(b.get(0, 0, 0), 0.0);
        assert_eq!(b.get(5, 5, 0), 5.0);
        u.u0.set(5, 5, -7.0);
        assert_eq!(boundary_distance(&u).get(5, 5, 0), 0.0);
    }

    #[test]
    fn fwd_bwd_examples() {
        let z = flow(4, 4, 0.0, 0.0);
        assert!(fwd_bwd_distance(&z, &z).unwrap().values().iter().all(|&v| v == 0.0));
        let a = flow(4, 4, 1.0, 0.0);
        let d = fwd_bwd_distance(&a, &a).unwrap();
        assert_eq!(d.get(0, 0, 0), 0.0);
        assert_eq!(d.get(3, 0, 0), FAR);
        assert!(matches!(fwd_bwd_distance(&a, &flow(3, 4, 0.0, 0.0)), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn suppression_examples() {
        let m = ScalarMap::new(2, 2, 1, vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        assert_eq!(nonmin_suppress(&m).values(), &[0.0, 0.9, 0.0, 0.0]);
        let e = ScalarMap::new(2, 2, 1, vec![0.4; 4]).unwrap();
        assert_eq!(nonmin_suppress(&e).values(), &[0.4, 0.0, 0.0, 0.0]);
        let odd = ScalarMap::new(3, 1, 1, vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(nonmin_suppress(&odd).values(), &[0.0, 0.2, 0.3]);
    }

    #[test]
    fn edge_tensor_examples() {
        let flat = ScalarMap::new(3, 3, 1, vec![0.5; 9]).unwrap();
        let t = edge_tensor(&flat, 5.0).unwrap();
        assert!(t.w0().as_slice().iter().chain(t.w1().as_slice()).all(|&v| v == 1.0));
        let step = ScalarMap::new(3, 1, 1, vec![0.0, 0.0, 0.4]).unwrap();
        let t = edge_tensor(&step, 5.0).unwrap();
        assert!((t.w0().get(1, 0) - (-2.0f64).exp()).abs() < 1e-15);
        assert!(matches!(edge_tensor(&flat, 0.0), Err(Error::NonPositive { .. })));
    }

    #[test]
    fn loss_examples() {
        let mut p = ScalarMap::zeros(2, 1, 4).unwrap();
        p.set(0, 0, 2, 1.0);
        p.set(1, 0, 3, 1.0);
        let gt = FlowField::new(
            Field::new(2, 1, vec![0.0, 1.2]).unwrap(),
            Field::new(2, 1, vec![0.0, 0.6]).unwrap(),
        )
        .unwrap();
        let mut q = ScalarMap::zeros(2, 1, 4).unwrap();
        q.set(0, 0, 2, 1.0);
        q.set(1, 0, 3, 1.0);
        let l = loss_cor(&p, &q, &gt, &gt, &[true, true], 0.1, 0.01).unwrap();
        assert_eq!(l, 0.0);
        let far = flow(2, 1, 500.0, 0.0);
        let l = loss_cor(&p, &q, &far, &gt, &[true, false], 0.1, 0.01).unwrap();
        assert!((l - 0.1).abs() < 1e-15);
        let out = flow(2, 1, 5.0, 0.0);
        assert!(matches!(loss_cor(&p, &q, &gt, &out, &[true, true], 0.1, 0.01), Err(Error::ProbOutOfRange(_))));
    }
}
