use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Intensity-weighted centre of mass per spatial axis, summing over channels.
/// An all-zero image has no mass; its geometric centre is returned instead.
pub fn center_of_mass(image: &Tensor) -> Vec<f64> {
    let spatial = image.spatial().to_vec();
    let plane: usize = spatial.iter().product();
    let mut weighted = vec![0.0; spatial.len()];
    let mut total = 0.0;
    for (i, &v) in image.data().iter().enumerate() {
        let mut rem = i % plane.max(1);
        for axis in (0..spatial.len()).rev() {
            weighted[axis] += v * (rem % spatial[axis]) as f64;
            rem /= spatial[axis];
        }
        total += v;
    }
    if total == 0.0 {
        return spatial.iter().map(|&e| (e as f64 - 1.0) / 2.0).collect();
    }
    weighted.into_iter().map(|w| w / total).collect()
}

/// Window of `crop_extent` around the rounded centre of mass, shifted as
/// needed to stay inside the image.
pub fn center_of_mass_crop(image: &Tensor, crop_extent: &[usize]) -> Result<Tensor> {
    let spatial = image.spatial().to_vec();
    if crop_extent.len() != spatial.len() {
        return Err(Error::shape(format!(
            "crop extent {crop_extent:?} does not match image spatial extents {spatial:?}"
        )));
    }
    if let Some(axis) =
        (0..spatial.len()).find(|&a| crop_extent[a] > spatial[a] || crop_extent[a] == 0)
    {
        return Err(Error::shape(format!(
            "crop extent {} on axis {axis} must lie in 1..={}",
            crop_extent[axis], spatial[axis]
        )));
    }
    let com = center_of_mass(image);
    let start: Vec<usize> = com
        .iter()
        .zip(spatial.iter().zip(crop_extent))
        .map(|(&c, (&e, &k))| {
            let lo = c.round() as i64 - (k / 2) as i64;
            lo.clamp(0, (e - k) as i64) as usize
        })
        .collect();
    let mut shape = vec![image.channels()];
    shape.extend_from_slice(crop_extent);
    let plane_in: usize = spatial.iter().product();
    let plane_out: usize = crop_extent.iter().product();
    let src = image.data();
    Ok(Tensor::from_fn(&shape, |i| {
        let ch = i / plane_out;
        let mut rem = i % plane_out;
        let mut offset = 0;
        let mut stride = 1;
        for axis in (0..spatial.len()).rev() {
            let local = rem % crop_extent[axis];
            rem /= crop_extent[axis];
            offset += (start[axis] + local) * stride;
            stride *= spatial[axis];
        }
        src[ch * plane_in + offset]
    }))
}

/// Linear rescale to `[0, 1]`; a constant image maps to all zeros.
pub fn rescale_intensity(image: &Tensor) -> Tensor {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Tensor::zeros(image.shape());
    }
    let span = hi - lo;
    image.map(|v| (v - lo) / span)
}
