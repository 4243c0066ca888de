//! Correlation cost volumes, min-projection and softmax pseudo-likelihoods.
//!
//! For displacement range `d` the candidate set is `H = {-d, .., d-1}`. The
//! full cost of matching pixel `(x, y)` of map `j` with displacement
//! `(u0, u1)` is `-<f_j(x, y), f_(1-j)(x + u0, y + u1)>`; each directional
//! volume keeps the minimum over the orthogonal displacement.

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, Field, FlowField, ScalarMap};
use crate::scalar::Real;
use rayon::prelude::*;

/// Score of displacements whose target lies outside the grid.
pub const OUT_OF_BOUNDS: f64 = 1e30;

/// Per-pixel scores over `H = {-d, .., d-1}`, stored as `2d` contiguous
/// entries per pixel in row-major pixel order.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume<T> {
    width: usize,
    height: usize,
    range: usize,
    scores: Vec<T>,
}

impl<T: Real> CostVolume<T> {
    pub fn new(width: usize, height: usize, range: usize, scores: Vec<T>) -> Result<Self> {
        if range == 0 {
            return Err(Error::NonPositiveRange);
        }
        if width == 0 || height == 0 {
            return Err(Error::NonPositiveDims {
                width: width as i64,
                height: height as i64,
                channels: 2 * range as i64,
            });
        }
        if scores.len() != width * height * 2 * range {
            return Err(Error::DimMismatch(format!(
                "cost volume needs {} scores, got {}",
                width * height * 2 * range,
                scores.len()
            )));
        }
        Ok(Self { width, height, range, scores })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `d`.
    pub fn range(&self) -> usize {
        self.range
    }

    /// Number of candidates per pixel, `2d`.
    pub fn depth(&self) -> usize {
        2 * self.range
    }

    /// Displacement of candidate slot `k`.
    pub fn displacement(&self, k: usize) -> i64 {
        k as i64 - self.range as i64
    }

    /// Scores of one pixel, indexed by slot.
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let n = self.depth();
        let o = (y * self.width + x) * n;
        &self.scores[o..o + n]
    }

    /// Score at displacement `u` in `H`.
    pub fn get(&self, x: usize, y: usize, u: i64) -> T {
        self.pixel(x, y)[(u + self.range as i64) as usize]
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    /// The scores as a `2d`-channel map.
    pub fn to_map(&self) -> ScalarMap<T> {
        ScalarMap::new(self.width, self.height, self.depth(), self.scores.clone()).expect("volume shape is valid")
    }
}

/// Forward (`j = 0`) and backward (`j = 1`) volumes, each along both axes.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolumes<T> {
    /// `cor^0_0`, `cor^0_1`.
    pub forward: [CostVolume<T>; 2],
    /// `cor^1_0`, `cor^1_1`.
    pub backward: [CostVolume<T>; 2],
}

fn check_features<T: Real>(f0: &FeatureMap<T>, f1: &FeatureMap<T>) -> Result<()> {
    if (f0.width(), f0.height(), f0.channels()) != (f1.width(), f1.height(), f1.channels()) {
        return Err(Error::DimMismatch(format!(
            "feature maps {}x{}x{} and {}x{}x{}",
            f0.width(),
            f0.height(),
            f0.channels(),
            f1.width(),
            f1.height(),
            f1.channels()
        )));
    }
    Ok(())
}

#[inline]
fn neg_dot<T: Real>(a: &[T], b: &[T]) -> T {
    -a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Directional volumes of `src` against `dst`.
fn project<T: Real>(src: &FeatureMap<T>, dst: &FeatureMap<T>, d: usize) -> [CostVolume<T>; 2] {
    let (w, h) = (src.width(), src.height());
    let n = 2 * d;
    let big = T::of(OUT_OF_BOUNDS);
    let mut c0 = vec![big; w * h * n];
    let mut c1 = vec![big; w * h * n];
    c0.par_chunks_mut(n)
        .zip(c1.par_chunks_mut(n))
        .enumerate()
        .for_each(|(i, (r0, r1))| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            let a = src.pixel(x as usize, y as usize);
            for k1 in 0..n {
                let ty = y + k1 as i64 - d as i64;
                if ty < 0 || ty >= h as i64 {
                    continue;
                }
                for k0 in 0..n {
                    let tx = x + k0 as i64 - d as i64;
                    if tx < 0 || tx >= w as i64 {
                        continue;
                    }
                    let s = neg_dot(a, dst.pixel(tx as usize, ty as usize));
                    if s < r0[k0] {
                        r0[k0] = s;
                    }
                    if s < r1[k1] {
                        r1[k1] = s;
                    }
                }
            }
        });
    [
        CostVolume { width: w, height: h, range: d, scores: c0 },
        CostVolume { width: w, height: h, range: d, scores: c1 },
    ]
}

/// All four min-projected volumes of the pair `(f0, f1)`.
pub fn correlate<T: Real>(f0: &FeatureMap<T>, f1: &FeatureMap<T>, d: usize) -> Result<CostVolumes<T>> {
    check_features(f0, f1)?;
    if d == 0 {
        return Err(Error::NonPositiveRange);
    }
    Ok(CostVolumes {
        forward: project(f0, f1, d),
        backward: project(f1, f0, d),
    })
}

/// Full 4D cost `-<f0(x, y), f1(x + u0, y + u1)>` over `H x H`, or
/// [`OUT_OF_BOUNDS`] when the target leaves the grid.
pub fn full_cost<T: Real>(f0: &FeatureMap<T>, f1: &FeatureMap<T>, x: usize, y: usize, u0: i64, u1: i64) -> T {
    let (tx, ty) = (x as i64 + u0, y as i64 + u1);
    if tx < 0 || ty < 0 || tx >= f1.width() as i64 || ty >= f1.height() as i64 {
        return T::of(OUT_OF_BOUNDS);
    }
    neg_dot(f0.pixel(x, y), f1.pixel(tx as usize, ty as usize))
}

/// Index of the smallest entry; ties go to the lowest index.
fn argmin<T: Real>(s: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in s.iter().enumerate().skip(1) {
        if v < s[best] {
            best = k;
        }
    }
    best
}

/// Integer flow minimizing each directional volume.
pub fn argmin_flow<T: Real>(cor0: &CostVolume<T>, cor1: &CostVolume<T>) -> Result<FlowField<T>> {
    if (cor0.width, cor0.height, cor0.range) != (cor1.width, cor1.height, cor1.range) {
        return Err(Error::DimMismatch("directional volumes differ in shape".into()));
    }
    let (w, h) = (cor0.width, cor0.height);
    let pick = |c: &CostVolume<T>| {
        Field::from_fn(w, h, |x, y| T::of(c.displacement(argmin(c.pixel(x, y))) as f64))
    };
    FlowField::new(pick(cor0)?, pick(cor1)?)
}

/// `p(u) = exp(-cor(u)) / sum exp(-cor)`, shifted by the per-pixel minimum.
pub fn softmax_prob<T: Real>(cor: &CostVolume<T>) -> ScalarMap<T> {
    let n = cor.depth();
    let mut out = vec![T::zero(); cor.scores.len()];
    out.par_chunks_mut(n)
        .zip(cor.scores.par_chunks(n))
        .for_each(|(p, s)| {
            let m = s.iter().fold(T::infinity(), |a, &b| a.min(b));
            let mut z = T::zero();
            for (pi, &si) in p.iter_mut().zip(s) {
                *pi = (m - si).exp();
                z = z + *pi;
            }
            for pi in p.iter_mut() {
                *pi = *pi / z;
            }
        });
    ScalarMap::new(cor.width, cor.height, n, out).expect("volume shape is valid")
}
