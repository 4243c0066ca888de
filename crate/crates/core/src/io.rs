//! File formats: Middlebury `.flo`, the `F32M` map container, and PNG
//! color-wheel rendering of flow fields.
//!
//! `.flo`: `f32` sentinel 202021.25, `i32` width, `i32` height, then
//! `width * height` interleaved `(u0, u1)` pairs as `f32`, row-major.
//!
//! `F32M`: ASCII `F32M`, `u32` width, height, channels, then
//! `width * height * channels` `f32` values, row-major with channels
//! interleaved per pixel.
//!
//! All integers and reals are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{FlowField, ScalarMap};
use crate::scalar::Real;

pub const FLO_SENTINEL: f32 = 202021.25;
pub const MAP_MAGIC: &[u8; 4] = b"F32M";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn le_f32(b: &[u8]) -> f32 {
    f32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField<f32>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let tag = le_f32(&bytes[0..4]);
    if tag.to_bits() != FLO_SENTINEL.to_bits() {
        return Err(Error::BadMagic {
            expected: FLO_SENTINEL.to_string(),
            found: tag.to_string(),
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let width = le_u32(&bytes[4..8]) as i32;
    let height = le_u32(&bytes[8..12]) as i32;
    if width <= 0 || height <= 0 {
        return Err(Error::NonPositiveDims {
            width: width as i64,
            height: height as i64,
            channels: 2,
        });
    }
    let n = width as usize * height as usize;
    let expected = 12 + 8 * n;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[12..].chunks_exact(4).map(le_f32).collect();
    FlowField::from_interleaved(width as usize, height as usize, &data)
}

pub fn encode_flo<T: Real>(flow: &FlowField<T>) -> Result<Vec<u8>> {
    let (w, h) = flow.dims();
    if w > i32::MAX as usize || h > i32::MAX as usize {
        return Err(Error::NonPositiveDims {
            width: w as i64,
            height: h as i64,
            channels: 2,
        });
    }
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(&FLO_SENTINEL.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (a, b) in flow.u0.as_slice().iter().zip(flow.u1.as_slice()) {
        out.extend_from_slice(&(a.wide() as f32).to_le_bytes());
        out.extend_from_slice(&(b.wide() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_flo(&bytes)
}

pub fn write_flo<T: Real>(flow: &FlowField<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_flo(flow)?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn decode_map(bytes: &[u8]) -> Result<ScalarMap<f32>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    if &bytes[0..4] != MAP_MAGIC {
        return Err(Error::BadMagic {
            expected: "F32M".into(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    let width = le_u32(&bytes[4..8]) as usize;
    let height = le_u32(&bytes[8..12]) as usize;
    let channels = le_u32(&bytes[12..16]) as usize;
    if width == 0 || height == 0 || channels == 0 {
        return Err(Error::NonPositiveDims {
            width: width as i64,
            height: height as i64,
            channels: channels as i64,
        });
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .unwrap_or(usize::MAX);
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let values = bytes[16..].chunks_exact(4).map(le_f32).collect();
    ScalarMap::new(width, height, channels, values)
}

pub fn encode_map<T: Real>(map: &ScalarMap<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * map.values().len());
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.channels() as u32).to_le_bytes());
    for v in map.values() {
        out.extend_from_slice(&(v.wide() as f32).to_le_bytes());
    }
    out
}

pub fn read_map(path: impl AsRef<Path>) -> Result<ScalarMap<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_map(&bytes)
}

pub fn write_map<T: Real>(map: &ScalarMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_map(map)).map_err(|e| io_err(path, e))
}

/// Color-wheel RGB for one flow vector: hue from the direction, saturation
/// from the magnitude relative to `max_magnitude`, full value.
pub fn flow_color(u0: f64, u1: f64, max_magnitude: f64) -> [u8; 3] {
    let mag = (u0 * u0 + u1 * u1).sqrt();
    let sat = (mag / max_magnitude).min(1.0);
    let mut hue = u1.atan2(u0);
    if hue < 0.0 {
        hue += std::f64::consts::TAU;
    }
    // HSV -> RGB with V = 1.
    let h6 = hue / std::f64::consts::TAU * 6.0;
    let sector = (h6.floor() as i64).rem_euclid(6);
    let frac = h6 - h6.floor();
    let p = 1.0 - sat;
    let q = 1.0 - sat * frac;
    let t = 1.0 - sat * (1.0 - frac);
    let (r, g, b) = match sector {
        0 => (1.0, t, p),
        1 => (q, 1.0, p),
        2 => (p, 1.0, t),
        3 => (p, q, 1.0),
        4 => (t, p, 1.0),
        _ => (1.0, p, q),
    };
    let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    [to_u8(r), to_u8(g), to_u8(b)]
}

/// Renders a flow field as an 8-bit RGB PNG.
pub fn flow_to_png<T: Real>(flow: &FlowField<T>, max_magnitude: f64) -> Result<Vec<u8>> {
    if !(max_magnitude > 0.0) || !max_magnitude.is_finite() {
        return Err(Error::NonPositive {
            name: "max_magnitude",
            value: max_magnitude,
        });
    }
    let (w, h) = flow.dims();
    let mut rgb = Vec::with_capacity(3 * w * h);
    for (a, b) in flow.u0.as_slice().iter().zip(flow.u1.as_slice()) {
        rgb.extend_from_slice(&flow_color(a.wide(), b.wide(), max_magnitude));
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, rgb)
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Loads an 8-bit grayscale or RGB PNG as a single-channel map with values
/// in `[0, 1]` (RGB is converted with the Rec. 601 luma weights).
pub fn read_gray_png(path: impl AsRef<Path>) -> Result<ScalarMap<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let values = gray.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
    ScalarMap::new(w as usize, h as usize, 1, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flo_bytes(w: i32, h: i32, vals: &[f32]) -> Vec<u8> {
        let mut b = FLO_SENTINEL.to_le_bytes().to_vec();
        b.extend_from_slice(&w.to_le_bytes());
        b.extend_from_slice(&h.to_le_bytes());
        for v in vals {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn decodes_unit_zero_flow() {
        let f = decode_flo(&flo_bytes(1, 1, &[0.0, 0.0])).unwrap();
        assert_eq!(f.dims(), (1, 1));
        assert_eq!(f.get(0, 0), (0.0, 0.0));
    }

    #[test]
    fn decodes_interleaved_pairs() {
        let f = decode_flo(&flo_bytes(2, 1, &[1.5, -2.0, 0.0, 3.0])).unwrap();
        assert_eq!(f.get(0, 0), (1.5, -2.0));
        assert_eq!(f.get(1, 0), (0.0, 3.0));
    }

    #[test]
    fn zero_flow_encodes_to_twenty_bytes() {
        let f = FlowField::<f32>::zeros(1, 1).unwrap();
        let b = encode_flo(&f).unwrap();
        assert_eq!(b.len(), 20);
        assert_eq!(&b[0..4], &FLO_SENTINEL.to_le_bytes());
    }

    #[test]
    fn flo_errors() {
        let mut bad = flo_bytes(1, 1, &[0.0, 0.0]);
        bad[0] ^= 1;
        assert!(matches!(decode_flo(&bad), Err(Error::BadMagic { .. })));
        let short = flo_bytes(2, 2, &[0.0; 7]);
        assert!(matches!(decode_flo(&short), Err(Error::Truncated { expected: 44, found: 40 })));
        let long = flo_bytes(1, 1, &[0.0; 3]);
        assert!(matches!(decode_flo(&long), Err(Error::Truncated { .. })));
        assert!(matches!(
            decode_flo(&flo_bytes(0, 1, &[])),
            Err(Error::NonPositiveDims { .. })
        ));
        assert!(matches!(
            decode_flo(&flo_bytes(-3, 1, &[])),
            Err(Error::NonPositiveDims { .. })
        ));
    }

    #[test]
    fn zero_width_flow_cannot_be_built() {
        assert!(matches!(FlowField::<f32>::zeros(0, 4), Err(Error::NonPositiveDims { .. })));
    }

    #[test]
    fn map_header_and_errors() {
        let mut b = MAP_MAGIC.to_vec();
        for v in [1u32, 1, 1] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&0.5f32.to_le_bytes());
        let m = decode_map(&b).unwrap();
        assert_eq!((m.width(), m.height(), m.channels()), (1, 1, 1));
        assert_eq!(m.values(), &[0.5]);

        let mut zero_c = b.clone();
        zero_c[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_map(&zero_c), Err(Error::NonPositiveDims { .. })));

        let mut magic = b.clone();
        magic[3] = b'N';
        assert!(matches!(decode_map(&magic), Err(Error::BadMagic { .. })));

        assert!(matches!(decode_map(&b[..18]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn png_of_zero_flow_is_white_and_deterministic() {
        let f = FlowField::<f64>::zeros(4, 3).unwrap();
        let a = flow_to_png(&f, 1.0).unwrap();
        let b = flow_to_png(&f, 1.0).unwrap();
        assert_eq!(a, b);
        let img = image::load_from_memory(&a).unwrap().to_rgb8();
        assert!(img.pixels().all(|p| p.0 == [255, 255, 255]));
        assert!(matches!(flow_to_png(&f, 0.0), Err(Error::NonPositive { .. })));
    }

    #[test]
    fn saturated_color_at_or_beyond_max_magnitude() {
        // Direction 0 (hue 0) at full saturation is pure red.
        assert_eq!(flow_color(3.0, 0.0, 2.0), [255, 0, 0]);
        assert_eq!(flow_color(2.0, 0.0, 2.0), [255, 0, 0]);
        // Hue 120 degrees is pure green, 240 pure blue.
        let a = 2.0 * std::f64::consts::PI / 3.0;
        assert_eq!(flow_color(5.0 * a.cos(), 5.0 * a.sin(), 1.0), [0, 255, 0]);
        assert_eq!(flow_color(5.0 * (2.0 * a).cos(), 5.0 * (2.0 * a).sin(), 1.0), [0, 0, 255]);
        // Half magnitude -> half saturation.
        assert_eq!(flow_color(1.0, 0.0, 2.0), [255, 128, 128]);
    }

    proptest! {
        #[test]
        fn flo_round_trip_is_bit_exact(
            w in 1usize..6, h in 1usize..6,
            seed in proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::ZERO | proptest::num::f32::SUBNORMAL, 72)
        ) {
            let vals: Vec<f32> = seed.into_iter().take(2 * w * h).collect();
            let f = FlowField::from_interleaved(w, h, &vals).unwrap();
            let back = decode_flo(&encode_flo(&f).unwrap()).unwrap();
            let bits = |f: &FlowField<f32>| f.u0.as_slice().iter().chain(f.u1.as_slice()).map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&f));
            let bytes = encode_flo(&f).unwrap();
            prop_assert_eq!(encode_flo(&back).unwrap(), bytes);
        }

        #[test]
        fn map_round_trip_is_bit_exact(
            w in 1usize..5, h in 1usize..5, c in 1usize..4,
            seed in proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::ZERO, 48)
        ) {
            let vals: Vec<f32> = seed.into_iter().take(w * h * c).collect();
            let m = ScalarMap::new(w, h, c, vals).unwrap();
            let bytes = encode_map(&m);
            let back = decode_map(&bytes).unwrap();
            prop_assert_eq!(encode_map(&back), bytes);
            prop_assert_eq!(
                back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.flo");
        let f = FlowField::from_interleaved(2, 2, &[1.0f32, 2.0, -3.5, 0.25, 7.0, 8.0, 9.0, -1e-3]).unwrap();
        write_flo(&f, &p).unwrap();
        assert_eq!(read_flo(&p).unwrap(), f);
        let m = ScalarMap::new(2, 1, 2, vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
        let q = dir.path().join("m.f32m");
        write_map(&m, &q).unwrap();
        assert_eq!(read_map(&q).unwrap(), m);
        assert!(matches!(read_flo(dir.path().join("missing.flo")), Err(Error::Io { .. })));
    }
}
