//! Grid-borne value types.
//!
//! Every type stores its samples row-major: pixel `(x, y)` lives at
//! `y * width + x`. Constructors validate the invariants (positive extent,
//! finite samples, unit range where applicable) so downstream code can rely
//! on them without re-checking.

use crate::error::{Error, Result};
use crate::scalar::Real;

fn check_dims(width: usize, height: usize, channels: usize) -> Result<()> {
    if width == 0 || height == 0 || channels == 0 {
        return Err(Error::NonPositiveDims {
            width: width as i64,
            height: height as i64,
            channels: channels as i64,
        });
    }
    Ok(())
}

fn check_finite<T: Real>(what: &'static str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

fn check_unit<T: Real>(what: &'static str, data: &[T]) -> Result<()> {
    check_finite(what, data)?;
    match data
        .iter()
        .position(|&v| v < T::zero() || v > T::one())
    {
        Some(index) => Err(Error::OutOfUnitRange {
            what,
            index,
            value: data[index].wide(),
        }),
        None => Ok(()),
    }
}

/// A single-channel scalar field on an `width x height` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Field<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> Field<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        check_dims(width, height, 1)?;
        if data.len() != width * height {
            return Err(Error::DimMismatch(format!(
                "field {}x{} needs {} samples, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        check_finite("field", &data)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, T::zero())
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        check_dims(width, height, 1)?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    /// Wraps a buffer the caller has already produced from valid fields.
    /// Used internally on solver outputs, which are finiteness-checked
    /// separately.
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the samples. Callers must keep them finite.
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Field<U> {
        Field::from_raw(
            self.width,
            self.height,
            self.data.iter().map(|v| U::of(v.wide())).collect(),
        )
    }

    pub fn same_dims<U>(&self, other: &Field<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn expect_dims(&self, width: usize, height: usize, what: &str) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::DimMismatch(format!(
                "{what} is {}x{}, expected {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel motion `(u0, u1)` in pixels/frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    pub u0: Field<T>,
    pub u1: Field<T>,
}

impl<T: Real> FlowField<T> {
    pub fn new(u0: Field<T>, u1: Field<T>) -> Result<Self> {
        u1.expect_dims(u0.width(), u0.height(), "flow component u1")?;
        Ok(Self { u0, u1 })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Ok(Self {
            u0: Field::zeros(width, height)?,
            u1: Field::zeros(width, height)?,
        })
    }

    pub fn constant(width: usize, height: usize, u0: T, u1: T) -> Result<Self> {
        Ok(Self {
            u0: Field::filled(width, height, u0)?,
            u1: Field::filled(width, height, u1)?,
        })
    }

    /// Builds a flow from `[u0, u1]` interleaved row-major samples.
    pub fn from_interleaved(width: usize, height: usize, data: &[T]) -> Result<Self> {
        check_dims(width, height, 2)?;
        if data.len() != 2 * width * height {
            return Err(Error::DimMismatch(format!(
                "interleaved flow {}x{} needs {} samples, got {}",
                width,
                height,
                2 * width * height,
                data.len()
            )));
        }
        let u0 = data.iter().step_by(2).copied().collect();
        let u1 = data.iter().skip(1).step_by(2).copied().collect();
        Self::new(Field::new(width, height, u0)?, Field::new(width, height, u1)?)
    }

    pub fn width(&self) -> usize {
        self.u0.width()
    }

    pub fn height(&self) -> usize {
        self.u0.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.u0.dims()
    }

    pub fn get(&self, x: usize, y: usize) -> (T, T) {
        (self.u0.get(x, y), self.u1.get(x, y))
    }

    pub fn component(&self, i: usize) -> &Field<T> {
        match i {
            0 => &self.u0,
            1 => &self.u1,
            _ => panic!("flow component index {i} out of range"),
        }
    }

    pub fn cast<U: Real>(&self) -> FlowField<U> {
        FlowField {
            u0: self.u0.cast(),
            u1: self.u1.cast(),
        }
    }

    /// Mean end-point error against `other`.
    pub fn mean_epe(&self, other: &FlowField<T>) -> Result<f64> {
        other.u0.expect_dims(self.width(), self.height(), "reference flow")?;
        let n = self.u0.len() as f64;
        let sum: f64 = self
            .u0
            .as_slice()
            .iter()
            .zip(self.u1.as_slice())
            .zip(other.u0.as_slice().iter().zip(other.u1.as_slice()))
            .map(|((&a0, &a1), (&b0, &b1))| {
                let d0 = a0.wide() - b0.wide();
                let d1 = a1.wide() - b1.wide();
                (d0 * d0 + d1 * d1).sqrt()
            })
            .sum();
        Ok(sum / n)
    }
}

/// Data-term weight `c` in `[0, 1]`; 0 marks a pixel with no usable estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap<T>(Field<T>);

impl<T: Real> ConfidenceMap<T> {
    pub fn new(field: Field<T>) -> Result<Self> {
        check_unit("confidence", field.as_slice())?;
        Ok(Self(field))
    }

    pub fn filled(width: usize, height: usize, value: T) -> Result<Self> {
        Self::new(Field::filled(width, height, value)?)
    }

    pub fn field(&self) -> &Field<T> {
        &self.0
    }

    pub fn into_field(self) -> Field<T> {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.0.get(x, y)
    }

    pub fn as_slice(&self) -> &[T] {
        self.0.as_slice()
    }

    pub fn cast<U: Real>(&self) -> ConfidenceMap<U> {
        ConfidenceMap(self.0.cast())
    }
}

/// Diagonal diffusion tensor `diag(w0, w1)` with entries in `[0, 1]`.
///
/// `w0` weighs horizontal differences, `w1` vertical ones.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTensor<T> {
    w0: Field<T>,
    w1: Field<T>,
}

impl<T: Real> DiffusionTensor<T> {
    pub fn new(w0: Field<T>, w1: Field<T>) -> Result<Self> {
        w1.expect_dims(w0.width(), w0.height(), "tensor component w1")?;
        check_unit("tensor w0", w0.as_slice())?;
        check_unit("tensor w1", w1.as_slice())?;
        Ok(Self { w0, w1 })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Result<Self> {
        Self::new(Field::filled(width, height, value)?, Field::filled(width, height, value)?)
    }

    pub fn w0(&self) -> &Field<T> {
        &self.w0
    }

    pub fn w1(&self) -> &Field<T> {
        &self.w1
    }

    pub fn width(&self) -> usize {
        self.w0.width()
    }

    pub fn height(&self) -> usize {
        self.w0.height()
    }

    pub fn cast<U: Real>(&self) -> DiffusionTensor<U> {
        DiffusionTensor {
            w0: self.w0.cast(),
            w1: self.w1.cast(),
        }
    }

    /// Both components multiplied by `factor`. Not range checked: scaled
    /// tensors only live inside the solvers.
    pub(crate) fn scaled_raw(&self, factor: f64) -> (Vec<T>, Vec<T>) {
        let f = T::of(factor);
        (
            self.w0.as_slice().iter().map(|&v| v * f).collect(),
            self.w1.as_slice().iter().map(|&v| v * f).collect(),
        )
    }
}

/// Multi-channel real map. Carries feature vectors, probabilities, fit costs
/// and other per-pixel quantities; channels are interleaved per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap<T> {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<T>,
}

/// Feature maps are plain multi-channel maps.
pub type FeatureMap<T> = ScalarMap<T>;

impl<T: Real> ScalarMap<T> {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        check_dims(width, height, channels)?;
        if values.len() != width * height * channels {
            return Err(Error::DimMismatch(format!(
                "map {}x{}x{} needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                values.len()
            )));
        }
        check_finite("map", &values)?;
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![T::zero(); width * height * channels])
    }

    pub fn from_field(field: &Field<T>) -> Self {
        Self {
            width: field.width(),
            height: field.height(),
            channels: 1,
            values: field.as_slice().to_vec(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let start = (y * self.width + x) * self.channels;
        &self.values[start..start + self.channels]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, ch: usize) -> T {
        self.values[(y * self.width + x) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, ch: usize, value: T) {
        self.values[(y * self.width + x) * self.channels + ch] = value;
    }

    /// Extracts one channel as a scalar field.
    pub fn channel(&self, ch: usize) -> Result<Field<T>> {
        if ch >= self.channels {
            return Err(Error::DimMismatch(format!(
                "channel {ch} requested from a {}-channel map",
                self.channels
            )));
        }
        Ok(Field::from_raw(
            self.width,
            self.height,
            self.values.iter().skip(ch).step_by(self.channels).copied().collect(),
        ))
    }

    /// Interleaves equally sized fields into one map.
    pub fn stack(fields: &[&Field<T>]) -> Result<Self> {
        let first = fields
            .first()
            .ok_or(Error::NonPositiveDims { width: 0, height: 0, channels: 0 })?;
        let (w, h) = first.dims();
        for f in fields {
            f.expect_dims(w, h, "stacked channel")?;
        }
        let c = fields.len();
        let mut values = Vec::with_capacity(w * h * c);
        for i in 0..w * h {
            for f in fields {
                values.push(f.as_slice()[i]);
            }
        }
        Self::new(w, h, c, values)
    }

    pub fn cast<U: Real>(&self) -> ScalarMap<U> {
        ScalarMap {
            width: self.width,
            height: self.height,
            channels: self.channels,
            values: self.values.iter().map(|v| U::of(v.wide())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(Field::<f64>::zeros(0, 3), Err(Error::NonPositiveDims { .. })));
        assert!(matches!(
            Field::new(2, 1, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(matches!(ScalarMap::<f32>::zeros(1, 1, 0), Err(Error::NonPositiveDims { .. })));
    }

    #[test]
    fn unit_range_is_enforced() {
        assert!(ConfidenceMap::filled(2, 2, 1.0f64).is_ok());
        assert!(matches!(
            ConfidenceMap::new(Field::new(2, 1, vec![0.5, 1.5]).unwrap()),
            Err(Error::OutOfUnitRange { index: 1, .. })
        ));
        let w = Field::filled(2, 2, 0.5).unwrap();
        let bad = Field::filled(2, 2, -0.1).unwrap();
        assert!(DiffusionTensor::new(w.clone(), w.clone()).is_ok());
        assert!(DiffusionTensor::new(w, bad).is_err());
    }

    #[test]
    fn interleaved_flow_layout() {
        let f = FlowField::from_interleaved(2, 1, &[1.5f32, -2.0, 0.0, 3.0]).unwrap();
        assert_eq!(f.get(0, 0), (1.5, -2.0));
        assert_eq!(f.get(1, 0), (0.0, 3.0));
    }

    #[test]
    fn stack_and_channel_are_inverse() {
        let a = Field::from_fn(3, 2, |x, y| (x + 10 * y) as f64).unwrap();
        let b = a.map(|v| -v).unwrap();
        let m = ScalarMap::stack(&[&a, &b]).unwrap();
        assert_eq!(m.channels(), 2);
        assert_eq!(m.channel(0).unwrap(), a);
        assert_eq!(m.channel(1).unwrap(), b);
        assert_eq!(m.get(2, 1, 1), -12.0);
    }

    #[test]
    fn epe_of_identical_flows_is_zero() {
        let f = FlowField::constant(3, 3, 1.0f64, 2.0).unwrap();
        assert_eq!(f.mean_epe(&f).unwrap(), 0.0);
        let g = FlowField::constant(3, 3, 4.0f64, 6.0).unwrap();
        assert!((f.mean_epe(&g).unwrap() - 5.0).abs() < 1e-15);
    }
}
