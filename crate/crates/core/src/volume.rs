//! Scalar 3D volumes, the YVOL container, intensity normalization and
//! maximum-intensity projections.
//!
//! Voxels are stored x-fastest: `index = (z * ny + y) * nx + x`.
//!
//! YVOL layout (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `YVOL` |
//! | 4     | `u32` version = 1 |
//! | 12    | `u32` nx, ny, nz |
//! | 12    | `f32` spacing sx, sy, sz (mm) |
//! | 1 + 3 | `u8` kind (0 intensity, 1 probability, 2 label), 3 zero bytes |
//! | 4·N   | `f32` payload |

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const YVOL_MAGIC: &[u8; 4] = b"YVOL";
pub const YVOL_VERSION: u32 = 1;
pub const YVOL_HEADER_LEN: usize = 36;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Intensity,
    Probability,
    Label,
}

impl VolumeKind {
    pub fn code(self) -> u8 {
        match self {
            VolumeKind::Intensity => 0,
            VolumeKind::Probability => 1,
            VolumeKind::Label => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(VolumeKind::Intensity),
            1 => Ok(VolumeKind::Probability),
            2 => Ok(VolumeKind::Label),
            other => Err(Error::InvalidKindCode(other)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f32; 3],
    kind: VolumeKind,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], kind: VolumeKind, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::DimMismatch(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        match kind {
            VolumeKind::Probability if data.iter().any(|v| !(0.0..=1.0).contains(v)) => {
                return Err(Error::InvalidVolume("probability values outside [0,1]".into()));
            }
            VolumeKind::Label if data.iter().any(|&v| v != 0.0 && v != 1.0) => {
                return Err(Error::InvalidVolume("label values outside {0,1}".into()));
            }
            _ => {}
        }
        Ok(Volume3D { dims, spacing, kind, data })
    }

    pub fn filled(dims: [usize; 3], kind: VolumeKind, value: f32) -> Result<Self> {
        Volume3D::new(dims, [1.0; 3], kind, vec![value; dims[0] * dims[1] * dims[2]])
    }

    /// Builds a label volume from a boolean mask.
    pub fn from_mask(dims: [usize; 3], spacing: [f32; 3], mask: &[bool]) -> Result<Self> {
        let data = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Volume3D::new(dims, spacing, VolumeKind::Label, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Same geometry, new kind and payload (validated).
    pub fn with_data(&self, kind: VolumeKind, data: Vec<f32>) -> Result<Self> {
        Volume3D::new(self.dims, self.spacing, kind, data)
    }

    pub fn mask(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v != 0.0).collect()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Copies the `size`-cube starting at `origin` into `out` (x-fastest).
    pub fn extract_cube(&self, origin: [usize; 3], size: usize, out: &mut [f32]) {
        let [ox, oy, oz] = origin;
        let mut k = 0;
        for z in oz..oz + size {
            for y in oy..oy + size {
                let start = self.index(ox, y, z);
                out[k..k + size].copy_from_slice(&self.data[start..start + size]);
                k += size;
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(YVOL_HEADER_LEN + 4 * self.data.len());
        buf.extend_from_slice(YVOL_MAGIC);
        buf.extend_from_slice(&YVOL_VERSION.to_le_bytes());
        for d in self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        buf.extend_from_slice(&[self.kind.code(), 0, 0, 0]);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != YVOL_MAGIC {
            let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
            return Err(Error::BadMagic {
                expected: "YVOL".into(),
                found,
            });
        }
        if bytes.len() < YVOL_HEADER_LEN {
            return Err(Error::TruncatedPayload(format!(
                "header needs {YVOL_HEADER_LEN} bytes, file has {}",
                bytes.len()
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != YVOL_VERSION {
            return Err(Error::InvalidVolume(format!("unsupported YVOL version {version}")));
        }
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let spacing = [f32_at(20), f32_at(24), f32_at(28)];
        let kind = VolumeKind::from_code(bytes[32])?;
        let payload = &bytes[YVOL_HEADER_LEN..];
        if payload.len() % 4 != 0 {
            return Err(Error::TruncatedPayload(format!(
                "payload of {} bytes is not a whole number of f32 values",
                payload.len()
            )));
        }
        let expected = dims[0] * dims[1] * dims[2];
        let found = payload.len() / 4;
        if found != expected {
            return Err(Error::DimMismatch(format!(
                "header dims {dims:?} need {expected} values, payload has {found}"
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Volume3D::new(dims, spacing, kind, data)
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume3D::from_bytes(&bytes)
}

pub fn write_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&v.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Linear-interpolated percentile of an ascending slice, `p` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f32], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0] as f64;
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)
}

/// Clips to the `[p_lo, p_hi]` percentile range and maps it affinely to `[0, 1]`.
pub fn normalize_intensity(v: &Volume3D, p_lo: f64, p_hi: f64) -> Result<Volume3D> {
    if v.kind != VolumeKind::Intensity {
        return Err(Error::InvalidArgument("normalization needs an intensity volume".into()));
    }
    if !(0.0 <= p_lo && p_lo < p_hi && p_hi <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentiles must satisfy 0 <= {p_lo} < {p_hi} <= 100"
        )));
    }
    let mut sorted = v.data.clone();
    sorted.sort_by(f32::total_cmp);
    let lo = percentile_sorted(&sorted, p_lo);
    let hi = percentile_sorted(&sorted, p_hi);
    if !(hi > lo) {
        return Err(Error::DegenerateRange(lo));
    }
    let scale = 1.0 / (hi - lo);
    let data = v
        .data
        .iter()
        .map(|&x| (((x as f64).clamp(lo, hi) - lo) * scale).clamp(0.0, 1.0) as f32)
        .collect();
    v.with_data(VolumeKind::Intensity, data)
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut buf = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend_from_slice(&self.pixels);
        buf
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Maximum-intensity projection along `axis`, values clipped to `[0, 1]` and
/// scaled to `round(255 v)`.
///
/// Output axes: projecting Z gives an `nx x ny` image (x across, y down),
/// Y gives `nx x nz`, X gives `ny x nz`.
pub fn render_mip(v: &Volume3D, axis: Axis) -> GrayImage {
    let [nx, ny, nz] = v.dims;
    let (width, height) = match axis {
        Axis::X => (ny, nz),
        Axis::Y => (nx, nz),
        Axis::Z => (nx, ny),
    };
    let mut max = vec![f32::NEG_INFINITY; width * height];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let pix = match axis {
                    Axis::X => z * ny + y,
                    Axis::Y => z * nx + x,
                    Axis::Z => y * nx + x,
                };
                let val = v.data[(z * ny + y) * nx + x];
                if val > max[pix] {
                    max[pix] = val;
                }
            }
        }
    }
    let pixels = max
        .into_iter()
        .map(|m| (m.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    GrayImage { width, height, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], data: Vec<f32>) -> Volume3D {
        Volume3D::new(dims, [1.0; 3], VolumeKind::Intensity, data).unwrap()
    }

    #[test]
    fn kind_invariants_enforced() {
        assert!(Volume3D::new([2, 1, 1], [1.0; 3], VolumeKind::Label, vec![0.0, 0.5]).is_err());
        assert!(Volume3D::new([2, 1, 1], [1.0; 3], VolumeKind::Probability, vec![0.0, 1.5]).is_err());
        assert!(Volume3D::new([2, 1, 1], [1.0; 3], VolumeKind::Intensity, vec![0.0]).is_err());
    }

    #[test]
    fn header_is_36_bytes() {
        let v = vol([2, 2, 2], vec![0.25; 8]);
        let bytes = v.to_bytes();
        assert_eq!(bytes.len(), 4 + 4 + 12 + 12 + 4 + 8 * 4);
        assert_eq!(&bytes[..4], b"YVOL");
        assert_eq!(bytes[32..36], [0, 0, 0, 0]);
    }

    #[test]
    fn bad_magic_and_bad_kind() {
        let mut bytes = vol([1, 1, 1], vec![0.0]).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Volume3D::from_bytes(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes = vol([1, 1, 1], vec![0.0]).to_bytes();
        bytes[32] = 7;
        assert!(matches!(Volume3D::from_bytes(&bytes), Err(Error::InvalidKindCode(7))));
        assert!(matches!(
            Volume3D::from_bytes(b"YVOL\x01\x00"),
            Err(Error::TruncatedPayload(_))
        ));
    }

    #[test]
    fn normalize_affine_and_degenerate() {
        let v = vol([3, 1, 1], vec![0.0, 50.0, 100.0]);
        let n = normalize_intensity(&v, 0.0, 100.0).unwrap();
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
        let c = vol([2, 2, 1], vec![3.0; 4]);
        assert!(matches!(normalize_intensity(&c, 1.0, 99.0), Err(Error::DegenerateRange(_))));
        assert!(normalize_intensity(&v, 50.0, 50.0).is_err());
    }

    #[test]
    fn mip_examples() {
        let mut data = vec![0.0; 27];
        data[13] = 1.0;
        let img = render_mip(&vol([3, 3, 3], data), Axis::Z);
        assert_eq!(img.pixels.iter().filter(|&&p| p == 255).count(), 1);
        assert_eq!(img.pixels.iter().filter(|&&p| p == 0).count(), 8);

        let img = render_mip(&vol([4, 3, 2], vec![0.5; 24]), Axis::Y);
        assert_eq!((img.width, img.height), (4, 2));
        assert!(img.pixels.iter().all(|&p| p == 128));
        assert!(img.to_pgm().starts_with(b"P5\n4 2\n255\n"));
    }
}
