//! Synthetic vascular phantoms: bright tubes of known geometry on a dark,
//! noisy background, with an exact binary ground truth.
//!
//! A voxel (centre at integer coordinates) is labelled 1 when it lies within
//! the local radius of a tube's piecewise-linear centreline. The radius
//! tapers linearly with arc length from `radius_start` to `radius_end`, and is
//! evaluated at the closest point on each segment.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use ynet_tensor::rng::SeedRng;

use crate::filters::gaussian_filter;
use crate::volume::{Volume3D, VolumeKind};
use crate::{Error, Result};

/// Largest allowed tube radius, half a 16-voxel patch.
pub const MAX_RADIUS: f64 = 8.0;

pub const DEFAULT_DIMS: [usize; 3] = [64, 64, 64];
pub const DEFAULT_BACKGROUND: f64 = 0.1;
/// Brightest tube contrast above background.
pub const DEFAULT_CONTRAST: f64 = 0.6;
/// Dataset tubes draw their contrast from `[MIN_RANDOM_CONTRAST, DEFAULT_CONTRAST)`,
/// so a single global cut cannot separate every vessel from noise.
pub const MIN_RANDOM_CONTRAST: f64 = 0.3;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;
pub const DEFAULT_PSF_SIGMA: f64 = 0.6;
/// Accepted foreground fraction for generated dataset volumes.
pub const FOREGROUND_RANGE: (f64, f64) = (0.002, 0.03);

// ChaCha stream ids; see `ynet_tensor::rng`.
const STREAM_NOISE: u64 = 1;
const STREAM_DATASET: u64 = 2;
const STREAM_GEOMETRY: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeSpec {
    pub control_points: Vec<[f64; 3]>,
    pub radius_start: f64,
    pub radius_end: f64,
    /// Intensity added above background inside the tube.
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub tubes: Vec<TubeSpec>,
    pub background_level: f64,
    pub noise_sigma: f64,
    pub psf_sigma: f64,
    pub seed: u64,
}

/// Intensity model shared by every volume of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomStyle {
    pub background_level: f64,
    /// Tube contrasts are drawn uniformly from `[min_contrast, max_contrast)`.
    pub min_contrast: f64,
    pub max_contrast: f64,
    pub noise_sigma: f64,
    pub psf_sigma: f64,
}

impl Default for PhantomStyle {
    fn default() -> Self {
        PhantomStyle {
            background_level: DEFAULT_BACKGROUND,
            min_contrast: MIN_RANDOM_CONTRAST,
            max_contrast: DEFAULT_CONTRAST,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            psf_sigma: DEFAULT_PSF_SIGMA,
        }
    }
}

impl PhantomStyle {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.background_level) {
            return Err(Error::BadPhantom("background_level must lie in [0,1)".into()));
        }
        if !(self.min_contrast > 0.0 && self.min_contrast <= self.max_contrast && self.max_contrast <= 1.0) {
            return Err(Error::BadPhantom(format!(
                "contrast range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.min_contrast, self.max_contrast
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.psf_sigma >= 0.0) {
            return Err(Error::BadPhantom("noise_sigma and psf_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::BadPhantom(format!("dims must be positive: {:?}", self.dims)));
        }
        if !(0.0..1.0).contains(&self.background_level) {
            return Err(Error::BadPhantom("background_level must lie in [0,1)".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.psf_sigma >= 0.0) {
            return Err(Error::BadPhantom("noise_sigma and psf_sigma must be >= 0".into()));
        }
        for tube in &self.tubes {
            if tube.control_points.len() < 2 {
                return Err(Error::BadPhantom("a tube needs at least two control points".into()));
            }
            for r in [tube.radius_start, tube.radius_end] {
                if !(r > 0.0 && r <= MAX_RADIUS) {
                    return Err(Error::BadPhantom(format!("radius {r} outside (0, {MAX_RADIUS}]")));
                }
            }
            if !(tube.intensity > 0.0 && tube.intensity <= 1.0) {
                return Err(Error::BadPhantom("tube intensity must lie in (0,1]".into()));
            }
            for &p in &tube.control_points {
                let inside = p
                    .iter()
                    .zip(self.dims)
                    .all(|(&c, d)| c >= 0.0 && c <= (d - 1) as f64);
                if !inside {
                    return Err(Error::TubeOutOfBounds {
                        point: p,
                        dims: self.dims,
                    });
                }
            }
        }
        Ok(())
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

impl TubeSpec {
    pub fn length(&self) -> f64 {
        self.control_points.windows(2).map(|w| norm(sub(w[1], w[0]))).sum()
    }

    /// Radius at arc length `s` from the first control point.
    pub fn radius_at(&self, s: f64, total: f64) -> f64 {
        if total <= 0.0 {
            return self.radius_start;
        }
        self.radius_start + (self.radius_end - self.radius_start) * (s / total)
    }

    /// Marks `contrast[i] = max(contrast[i], intensity)` for every voxel inside.
    fn rasterize(&self, dims: [usize; 3], contrast: &mut [f64]) {
        let total = self.length();
        let rmax = self.radius_start.max(self.radius_end);
        let mut arc = 0.0;
        for seg in self.control_points.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let ab = sub(b, a);
            let seg_len = norm(ab);
            let len2 = dot(ab, ab);
            let lo: Vec<usize> = (0..3)
                .map(|k| (a[k].min(b[k]) - rmax).floor().max(0.0) as usize)
                .collect();
            let hi: Vec<usize> = (0..3)
                .map(|k| ((a[k].max(b[k]) + rmax).ceil() as usize).min(dims[k] - 1))
                .collect();
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let p = [x as f64, y as f64, z as f64];
                        let u = if len2 > 0.0 {
                            (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
                        } else {
                            0.0
                        };
                        let q = [a[0] + u * ab[0], a[1] + u * ab[1], a[2] + u * ab[2]];
                        let dist = norm(sub(p, q));
                        if dist <= self.radius_at(arc + u * seg_len, total) {
                            let i = (z * dims[1] + y) * dims[0] + x;
                            contrast[i] = contrast[i].max(self.intensity);
                        }
                    }
                }
            }
            arc += seg_len;
        }
    }
}

/// Per-voxel foreground contrast (0 outside every tube).
pub fn rasterize_tubes(spec: &PhantomSpec) -> Vec<f64> {
    let [nx, ny, nz] = spec.dims;
    let mut contrast = vec![0.0; nx * ny * nz];
    for tube in &spec.tubes {
        tube.rasterize(spec.dims, &mut contrast);
    }
    contrast
}

/// Renders `(intensity, label)`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3D, Volume3D)> {
    spec.validate()?;
    let contrast = rasterize_tubes(spec);
    let label: Vec<f32> = contrast.iter().map(|&c| if c > 0.0 { 1.0 } else { 0.0 }).collect();
    let mut clean: Vec<f64> = contrast.iter().map(|&c| spec.background_level + c).collect();
    if spec.psf_sigma > 0.0 {
        clean = gaussian_filter(&clean, spec.dims, spec.psf_sigma, [0, 0, 0]);
    }
    let mut rng = SeedRng::derive(spec.seed, STREAM_NOISE);
    let image: Vec<f32> = clean
        .iter()
        .map(|&v| {
            let noise = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * rng.normal()
            } else {
                0.0
            };
            (v + noise).clamp(0.0, 1.0) as f32
        })
        .collect();
    let spacing = [1.0; 3];
    Ok((
        Volume3D::new(spec.dims, spacing, VolumeKind::Intensity, image)?,
        Volume3D::new(spec.dims, spacing, VolumeKind::Label, label)?,
    ))
}

/// One generated image/label pair with the `PhantomSpec` that produced it.
#[derive(Clone, Debug)]
pub struct PhantomPair {
    pub name: String,
    pub spec: PhantomSpec,
    pub image: Volume3D,
    pub label: Volume3D,
}

impl PhantomPair {
    pub fn foreground_fraction(&self) -> f64 {
        self.label.count_nonzero() as f64 / self.label.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<PhantomPair>,
    pub val: Vec<PhantomPair>,
    pub test: Vec<PhantomPair>,
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &PhantomPair> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

fn random_unit(rng: &mut SeedRng) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = norm(v);
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Random walk of `segments` steps from `start`, turning smoothly and
/// reflecting off a margin around the volume.
fn random_centerline(
    rng: &mut SeedRng,
    dims: [usize; 3],
    start: [f64; 3],
    mut dir: [f64; 3],
    segments: usize,
    margin: f64,
) -> Vec<[f64; 3]> {
    let mut pts = vec![start];
    let mut cur = start;
    for _ in 0..segments {
        let jitter = random_unit(rng);
        let turned = [
            dir[0] + 0.45 * jitter[0],
            dir[1] + 0.45 * jitter[1],
            dir[2] + 0.45 * jitter[2],
        ];
        let n = norm(turned);
        dir = [turned[0] / n, turned[1] / n, turned[2] / n];
        let step = rng.uniform_range(8.0, 14.0);
        let mut next = [0.0; 3];
        for k in 0..3 {
            let hi = dims[k] as f64 - 1.0 - margin;
            let mut c = cur[k] + step * dir[k];
            if c < margin || c > hi {
                dir[k] = -dir[k];
                c = cur[k] + step * dir[k];
            }
            next[k] = c.clamp(margin.min(hi), hi.max(margin));
        }
        pts.push(next);
        cur = next;
    }
    pts
}

/// Geometry for one dataset volume: a parent vessel with one bifurcation
/// pair plus 0-3 independent vessels (3-6 tubes total).
pub fn random_phantom_spec(volume_seed: u64, attempt: u64, style: &PhantomStyle) -> PhantomSpec {
    let dims = DEFAULT_DIMS;
    let mut rng = SeedRng::derive(volume_seed, STREAM_GEOMETRY + attempt);
    let margin = 4.0;
    let start_point = |rng: &mut SeedRng| -> [f64; 3] {
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = rng.uniform_range(margin + 4.0, dims[k] as f64 - 5.0 - margin);
        }
        p
    };

    let mut tubes = Vec::new();
    let parent_start = start_point(&mut rng);
    let parent_dir = random_unit(&mut rng);
    let parent_pts = random_centerline(&mut rng, dims, parent_start, parent_dir, 4, margin);
    let parent_r0 = rng.uniform_range(2.5, 4.0);
    let parent_r1 = rng.uniform_range(1.5, parent_r0);
    let parent = TubeSpec {
        control_points: parent_pts,
        radius_start: parent_r0,
        radius_end: parent_r1,
        intensity: rng.uniform_range(style.min_contrast, style.max_contrast),
    };
    // Branch at the end of the second segment.
    let branch = parent.control_points[2];
    let arc: f64 = parent.control_points[..3]
        .windows(2)
        .map(|w| norm(sub(w[1], w[0])))
        .sum();
    let branch_r = parent.radius_at(arc, parent.length()).max(1.5);
    tubes.push(parent);
    for _ in 0..2 {
        let dir = random_unit(&mut rng);
        let segs = 2 + rng.below(2) as usize;
        let pts = random_centerline(&mut rng, dims, branch, dir, segs, margin);
        let r0 = (branch_r * rng.uniform_range(0.7, 0.9)).max(1.5);
        tubes.push(TubeSpec {
            control_points: pts,
            radius_start: r0,
            radius_end: rng.uniform_range(1.5, r0),
            intensity: rng.uniform_range(style.min_contrast, style.max_contrast),
        });
    }
    let extra = rng.below(4) as usize;
    for _ in 0..extra {
        let start = start_point(&mut rng);
        let dir = random_unit(&mut rng);
        let segs = 3 + rng.below(3) as usize;
        let pts = random_centerline(&mut rng, dims, start, dir, segs, margin);
        let r0 = rng.uniform_range(1.5, 4.0);
        tubes.push(TubeSpec {
            control_points: pts,
            radius_start: r0,
            radius_end: rng.uniform_range(1.5, r0),
            intensity: rng.uniform_range(style.min_contrast, style.max_contrast),
        });
    }
    PhantomSpec {
        dims,
        tubes,
        background_level: style.background_level,
        noise_sigma: style.noise_sigma,
        psf_sigma: style.psf_sigma,
        seed: volume_seed,
    }
}

fn dataset_volume(name: String, volume_seed: u64, style: &PhantomStyle) -> Result<PhantomPair> {
    for attempt in 0.. {
        let spec = random_phantom_spec(volume_seed, attempt, style);
        let fraction = rasterize_tubes(&spec).iter().filter(|&&c| c > 0.0).count() as f64
            / spec.dims.iter().product::<usize>() as f64;
        if (FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(&fraction) {
            let (image, label) = generate_phantom(&spec)?;
            return Ok(PhantomPair { name, spec, image, label });
        }
    }
    unreachable!()
}

/// Generates `n_train + n_val + n_test` 64^3 phantoms with distinct
/// per-volume seeds drawn from `seed`, using the default intensity model.
pub fn default_dataset(seed: u64, n_train: usize, n_val: usize, n_test: usize) -> Result<Dataset> {
    generate_dataset(seed, n_train, n_val, n_test, &PhantomStyle::default())
}

/// [`default_dataset`] with an explicit intensity model.
pub fn generate_dataset(seed: u64, n_train: usize, n_val: usize, n_test: usize, style: &PhantomStyle) -> Result<Dataset> {
    style.validate()?;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::InvalidArgument("train, val and test counts must be >= 1".into()));
    }
    let mut master = SeedRng::derive(seed, STREAM_DATASET);
    let mut used = HashSet::new();
    let mut seeds = Vec::new();
    while seeds.len() < n_train + n_val + n_test {
        let s = master.next_u64();
        if used.insert(s) {
            seeds.push(s);
        }
    }
    let build = |prefix: &str, range: std::ops::Range<usize>| -> Result<Vec<PhantomPair>> {
        use rayon::prelude::*;
        range
            .into_par_iter()
            .enumerate()
            .map(|(i, k)| dataset_volume(format!("{prefix}{i:03}"), seeds[k], style))
            .collect()
    };
    Ok(Dataset {
        train: build("train", 0..n_train)?,
        val: build("val", n_train..n_train + n_val)?,
        test: build("test", n_train + n_val..n_train + n_val + n_test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(dims: [usize; 3], r: f64) -> PhantomSpec {
        PhantomSpec {
            dims,
            tubes: vec![TubeSpec {
                control_points: vec![[16.0, 16.0, 0.0], [16.0, 16.0, 31.0]],
                radius_start: r,
                radius_end: r,
                intensity: 0.6,
            }],
            background_level: 0.1,
            noise_sigma: 0.0,
            psf_sigma: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn noiseless_phantom_has_two_levels() {
        let (img, lbl) = generate_phantom(&straight([32; 3], 2.0)).unwrap();
        for (&i, &l) in img.data().iter().zip(lbl.data()) {
            let want = if l == 1.0 { (0.1f64 + 0.6) as f32 } else { 0.1 };
            assert_eq!(i, want);
        }
        // Disc of radius 2 on the integer lattice has 13 points per slice.
        assert_eq!(lbl.count_nonzero(), 13 * 32);
    }

    #[test]
    fn empty_tube_list_gives_background_plus_noise() {
        let mut spec = straight([16; 3], 2.0);
        spec.tubes.clear();
        spec.noise_sigma = 0.05;
        let (img, lbl) = generate_phantom(&spec).unwrap();
        assert_eq!(lbl.count_nonzero(), 0);
        let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
        assert!((mean - 0.1).abs() < 0.01);
    }

    #[test]
    fn out_of_bounds_and_bad_radius() {
        let mut spec = straight([32; 3], 2.0);
        spec.tubes[0].control_points[1] = [16.0, 16.0, 40.0];
        assert!(matches!(generate_phantom(&spec), Err(Error::TubeOutOfBounds { .. })));
        let spec = straight([32; 3], 9.0);
        assert!(matches!(generate_phantom(&spec), Err(Error::BadPhantom(_))));
    }
}
