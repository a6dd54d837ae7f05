//! Images of Gaussian blobs on a noisy background. The count label is the
//! number of blobs; the volume label is the number of voxels where the
//! noise-free blob field exceeds a threshold.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub image_extent: Vec<usize>,
    pub dims: usize,
    pub blob_count_range: (usize, usize),
    pub blob_sigma_range: (f64, f64),
    pub intensity_range: (f64, f64),
    pub noise_sigma: f64,
    pub volume_threshold: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_extent: vec![16, 16],
            dims: 2,
            blob_count_range: (0, 8),
            blob_sigma_range: (0.6, 0.9),
            intensity_range: (0.6, 1.0),
            noise_sigma: 0.05,
            volume_threshold: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::invalid(format!(
                "dims must be 2 or 3, got {}",
                self.dims
            )));
        }
        if self.image_extent.len() != self.dims {
            return Err(Error::invalid(format!(
                "image_extent {:?} must have {} entries",
                self.image_extent, self.dims
            )));
        }
        let (c0, c1) = self.blob_count_range;
        let (s0, s1) = self.blob_sigma_range;
        let (i0, i1) = self.intensity_range;
        if c0 > c1 || s0 > s1 || i0 > i1 {
            return Err(Error::invalid("every range needs min <= max"));
        }
        if s0 <= 0.0 || i0 <= 0.0 {
            return Err(Error::invalid(
                "blob sigma and intensity ranges must be positive",
            ));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        if let Some(e) = self.image_extent.iter().find(|&&e| (e as f64) < 4.0 * s1) {
            return Err(Error::invalid(format!(
                "image extent {e} is smaller than 4x the largest blob sigma {s1}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: Vec<f64>,
    pub sigma: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug)]
pub struct BlobImage {
    /// `(1, spatial...)` image including noise.
    pub image: Tensor,
    /// Noise-free blob field, same shape as `image`.
    pub field: Tensor,
    pub blobs: Vec<Blob>,
    pub count_label: usize,
    pub volume_label: usize,
}

/// Noise-free sum of Gaussian blobs over a `(1, extent...)` grid.
pub fn blob_field(extent: &[usize], blobs: &[Blob]) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(extent);
    let mut field = Tensor::zeros(&shape);
    let mut coord = vec![0usize; extent.len()];
    for v in field.data_mut() {
        *v = blobs
            .iter()
            .map(|b| {
                let r2: f64 = coord
                    .iter()
                    .zip(&b.center)
                    .map(|(&x, &c)| (x as f64 - c).powi(2))
                    .sum();
                b.intensity * (-r2 / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum();
        // row-major increment
        for axis in (0..coord.len()).rev() {
            coord[axis] += 1;
            if coord[axis] < extent[axis] {
                break;
            }
            coord[axis] = 0;
        }
    }
    field
}

const PLACEMENT_ATTEMPTS: usize = 2_000;
const PLACEMENT_RESTARTS: usize = 50;

fn place_blobs<R: Rng + ?Sized>(
    config: &SyntheticConfig,
    k: usize,
    rng: &mut R,
) -> Option<Vec<Blob>> {
    let (s0, s1) = config.blob_sigma_range;
    let (i0, i1) = config.intensity_range;
    'restart: for _ in 0..PLACEMENT_RESTARTS {
        let mut blobs: Vec<Blob> = Vec::with_capacity(k);
        for _ in 0..k {
            let sigma = rng.random_range(s0..=s1);
            let intensity = rng.random_range(i0..=i1);
            let margin = 2.0 * sigma;
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let center: Vec<f64> = config
                    .image_extent
                    .iter()
                    .map(|&e| {
                        let hi = (e as f64 - 1.0 - margin).max(margin);
                        rng.random_range(margin..=hi)
                    })
                    .collect();
                let clear = blobs.iter().all(|b| {
                    let d2: f64 = b
                        .center
                        .iter()
                        .zip(&center)
                        .map(|(a, c)| (a - c).powi(2))
                        .sum();
                    d2.sqrt() >= 2.0 * (b.sigma + sigma)
                });
                if clear {
                    blobs.push(Blob {
                        center,
                        sigma,
                        intensity,
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return Some(blobs);
    }
    None
}

/// Draws one image. The count is uniform over `blob_count_range`.
pub fn generate_blob_image<R: Rng + ?Sized>(
    config: &SyntheticConfig,
    rng: &mut R,
) -> Result<BlobImage> {
    config.validate()?;
    let (c0, c1) = config.blob_count_range;
    let k = rng.random_range(c0..=c1);
    let blobs = place_blobs(config, k, rng).ok_or_else(|| {
        Error::invalid(format!(
            "could not place {k} non-overlapping blobs in extent {:?} after {PLACEMENT_RESTARTS} restarts",
            config.image_extent
        ))
    })?;
    let field = blob_field(&config.image_extent, &blobs);
    let volume_label = field
        .data()
        .iter()
        .filter(|&&v| v > config.volume_threshold)
        .count();
    let image = if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
        Tensor::from_fn(field.shape(), |i| {
            (field.data()[i] + noise.sample(rng)).max(0.0)
        })
    } else {
        field.clone()
    };
    Ok(BlobImage {
        image,
        field,
        blobs,
        count_label: k,
        volume_label,
    })
}

/// `count` images, record `i` drawn from its own stream derived from
/// `config.seed`, so records can be generated in any order.
pub fn generate_dataset(config: &SyntheticConfig, count: usize) -> Result<Vec<BlobImage>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| generate_blob_image(config, &mut rng::stream(config.seed, &[i as u64])))
        .collect()
}
