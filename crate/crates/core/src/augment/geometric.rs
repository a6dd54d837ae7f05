//! Label-preserving geometric augmentation: axis flips, small rotations about
//! the image centre, and integer translations, all with zero fill.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    /// Spatial axes (0-based, excluding the channel axis) that may be flipped.
    pub flip_axes: Vec<usize>,
    /// Rotation angles are drawn uniformly from `±rotation_range` radians.
    pub rotation_range: f64,
    /// Shifts are drawn uniformly from `±translation_range` voxels per axis.
    pub translation_range: usize,
    pub seed: u64,
}

impl AugmentationConfig {
    pub fn none() -> Self {
        Self {
            flip_axes: Vec::new(),
            rotation_range: 0.0,
            translation_range: 0,
            seed: 0,
        }
    }

    /// Flips on every axis, ±0.2 rad rotations and ±2 voxel shifts.
    pub fn standard(dims: usize) -> Self {
        Self {
            flip_axes: (0..dims).collect(),
            rotation_range: 0.2,
            translation_range: 2,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flip_axes.is_empty() && self.rotation_range == 0.0 && self.translation_range == 0
    }

    pub fn validate(&self, dims: usize) -> Result<()> {
        if !(self.rotation_range >= 0.0 && self.rotation_range.is_finite()) {
            return Err(Error::invalid(
                "rotation range must be finite and non-negative",
            ));
        }
        if let Some(a) = self.flip_axes.iter().find(|&&a| a >= dims) {
            return Err(Error::invalid(format!(
                "flip axis {a} does not exist in a {dims}-D image"
            )));
        }
        Ok(())
    }
}

// (channels, depth, height, width) view of a 2D or 3D image
fn lifted(image: &Tensor) -> Result<[usize; 4]> {
    match image.shape() {
        [c, h, w] => Ok([*c, 1, *h, *w]),
        [c, d, h, w] => Ok([*c, *d, *h, *w]),
        s => Err(Error::shape(format!(
            "augmentation expects (channels, 2 or 3 spatial axes), got {s:?}"
        ))),
    }
}

/// Mirrors the image along spatial `axis`.
pub fn flip(image: &Tensor, axis: usize) -> Result<Tensor> {
    let [_, d, h, w] = lifted(image)?;
    let dims = image.shape().len() - 1;
    if axis >= dims {
        return Err(Error::invalid(format!(
            "flip axis {axis} out of range for {dims}-D image"
        )));
    }
    let lifted_axis = axis + (3 - dims);
    let src = image.data();
    let out = Tensor::from_fn(image.shape(), |i| {
        let x = i % w;
        let y = (i / w) % h;
        let z = (i / (w * h)) % d;
        let ch = i / (w * h * d);
        let (z, y, x) = match lifted_axis {
            0 => (d - 1 - z, y, x),
            1 => (z, h - 1 - y, x),
            _ => (z, y, w - 1 - x),
        };
        src[((ch * d + z) * h + y) * w + x]
    });
    Ok(out)
}

/// Shifts content by `shifts` voxels per spatial axis; vacated voxels are 0.
pub fn translate(image: &Tensor, shifts: &[i64]) -> Result<Tensor> {
    let [_, d, h, w] = lifted(image)?;
    let dims = image.shape().len() - 1;
    if shifts.len() != dims {
        return Err(Error::shape(format!(
            "translation needs {dims} shifts, got {}",
            shifts.len()
        )));
    }
    let mut s = [0i64; 3];
    s[3 - dims..].copy_from_slice(shifts);
    let src = image.data();
    Ok(Tensor::from_fn(image.shape(), |i| {
        let x = (i % w) as i64 - s[2];
        let y = ((i / w) % h) as i64 - s[1];
        let z = ((i / (w * h)) % d) as i64 - s[0];
        let ch = i / (w * h * d);
        if x < 0 || y < 0 || z < 0 || x >= w as i64 || y >= h as i64 || z >= d as i64 {
            0.0
        } else {
            src[((ch * d + z as usize) * h + y as usize) * w + x as usize]
        }
    }))
}

fn rotation_matrix(dims: usize, angles: &[f64]) -> Result<[[f64; 3]; 3]> {
    let expected = if dims == 2 { 1 } else { 3 };
    if angles.len() != expected {
        return Err(Error::invalid(format!(
            "a {dims}-D rotation takes {expected} angle(s), got {}",
            angles.len()
        )));
    }
    // axes are (z, y, x); a 2D image rotates in the (y, x) plane
    let plane = |a: usize, b: usize, t: f64| {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let (s, c) = t.sin_cos();
        m[a][a] = c;
        m[a][b] = -s;
        m[b][a] = s;
        m[b][b] = c;
        m
    };
    let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
            }
        }
        r
    };
    Ok(if dims == 2 {
        plane(1, 2, angles[0])
    } else {
        // rotations about x, y and z in turn
        mul(
            plane(0, 1, angles[2]),
            mul(plane(0, 2, angles[1]), plane(1, 2, angles[0])),
        )
    })
}

/// Rotates about the spatial centre with (bi/tri)linear interpolation and
/// zero fill. 2D images take one angle; 3D images take one angle per axis
/// (about x, y, then z).
pub fn rotate(image: &Tensor, angles: &[f64]) -> Result<Tensor> {
    let [c, d, h, w] = lifted(image)?;
    let dims = image.shape().len() - 1;
    let r = rotation_matrix(dims, angles)?;
    let centre = [
        (d as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
        (w as f64 - 1.0) / 2.0,
    ];
    let src = image.data();
    let sample = |ch: usize, z: i64, y: i64, x: i64| -> f64 {
        if z < 0 || y < 0 || x < 0 || z >= d as i64 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            src[((ch * d + z as usize) * h + y as usize) * w + x as usize]
        }
    };
    let mut out = vec![0.0; image.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [
                    z as f64 - centre[0],
                    y as f64 - centre[1],
                    x as f64 - centre[2],
                ];
                // inverse map: source = Rᵀ p + centre
                let q: Vec<f64> = (0..3)
                    .map(|i| (0..3).map(|k| r[k][i] * p[k]).sum::<f64>() + centre[i])
                    .collect();
                let (fz, fy, fx) = (q[0].floor(), q[1].floor(), q[2].floor());
                let (tz, ty, tx) = (q[0] - fz, q[1] - fy, q[2] - fx);
                let (z0, y0, x0) = (fz as i64, fy as i64, fx as i64);
                for ch in 0..c {
                    let mut v = 0.0;
                    for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                        if wz == 0.0 {
                            continue;
                        }
                        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                            if wy == 0.0 {
                                continue;
                            }
                            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                                if wx == 0.0 {
                                    continue;
                                }
                                v += wz * wy * wx * sample(ch, z0 + dz, y0 + dy, x0 + dx);
                            }
                        }
                    }
                    out[((ch * d + z) * h + y) * w + x] = v;
                }
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Random flips (each allowed axis with probability 0.5), then a random
/// rotation, then a random integer translation. Draws nothing for disabled
/// components.
pub fn random_geometric_augment<R: Rng + ?Sized>(
    image: &Tensor,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let dims = image.shape().len().saturating_sub(1);
    lifted(image)?;
    config.validate(dims)?;
    let mut out = image.clone();
    for &axis in &config.flip_axes {
        if rng.random_bool(0.5) {
            out = flip(&out, axis)?;
        }
    }
    if config.rotation_range > 0.0 {
        let count = if dims == 2 { 1 } else { 3 };
        let r = config.rotation_range;
        let angles: Vec<f64> = (0..count).map(|_| rng.random_range(-r..=r)).collect();
        out = rotate(&out, &angles)?;
    }
    if config.translation_range > 0 {
        let t = config.translation_range as i64;
        let shifts: Vec<i64> = (0..dims).map(|_| rng.random_range(-t..=t)).collect();
        out = translate(&out, &shifts)?;
    }
    Ok(out)
}
