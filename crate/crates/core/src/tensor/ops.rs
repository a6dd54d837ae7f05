use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a convolution: square stride/padding applied on every spatial
/// axis, and the number of spatial axes (2 or 3).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dims: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dims: usize) -> Self {
        Self {
            stride,
            padding,
            dims,
        }
    }
}

pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

// Every convolution is run as 3D; 2D problems get a unit depth axis with no
// padding along it.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    in_ch: usize,
    out_ch: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    pad: [usize; 3],
    stride: [usize; 3],
}

impl Geometry {
    fn resolve(input: &Tensor, kernel: &Tensor, spec: ConvSpec) -> Result<Self> {
        if spec.dims != 2 && spec.dims != 3 {
            return Err(Error::invalid(format!(
                "convolution dims must be 2 or 3, got {}",
                spec.dims
            )));
        }
        if spec.stride == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        if input.shape().len() != spec.dims + 1 {
            return Err(Error::shape(format!(
                "conv input rank: expected (channels, {} spatial) but got shape {:?}",
                spec.dims,
                input.shape()
            )));
        }
        if kernel.shape().len() != spec.dims + 2 {
            return Err(Error::shape(format!(
                "conv kernel rank: expected (out, in, {} spatial) but got shape {:?}",
                spec.dims,
                kernel.shape()
            )));
        }
        let in_ch = input.shape()[0];
        if kernel.shape()[1] != in_ch {
            return Err(Error::shape(format!(
                "conv in_channels: kernel expects {} but input has {}",
                kernel.shape()[1],
                in_ch
            )));
        }
        let lift = |s: &[usize]| -> [usize; 3] {
            if s.len() == 2 {
                [1, s[0], s[1]]
            } else {
                [s[0], s[1], s[2]]
            }
        };
        let in_sp = lift(&input.shape()[1..]);
        let k_sp = lift(&kernel.shape()[2..]);
        let first = 3 - spec.dims;
        let mut pad = [0; 3];
        let mut stride = [1; 3];
        let mut output = [1; 3];
        const AXES: [&str; 3] = ["depth", "height", "width"];
        for axis in first..3 {
            pad[axis] = spec.padding;
            stride[axis] = spec.stride;
            let padded = in_sp[axis] + 2 * spec.padding;
            if padded < k_sp[axis] {
                return Err(Error::shape(format!(
                    "conv spatial axis {} ({}): padded extent {} is smaller than kernel extent {}",
                    axis - first,
                    AXES[axis],
                    padded,
                    k_sp[axis]
                )));
            }
            output[axis] = (padded - k_sp[axis]) / spec.stride + 1;
        }
        Ok(Self {
            in_ch,
            out_ch: kernel.shape()[0],
            input: in_sp,
            kernel: k_sp,
            output,
            pad,
            stride,
        })
    }

    fn output_shape(&self, dims: usize) -> Vec<usize> {
        let mut shape = vec![self.out_ch];
        shape.extend_from_slice(&self.output[3 - dims..]);
        shape
    }

    /// Output indices along `axis` whose input tap at kernel offset `k` lies
    /// inside the (unpadded) input, returned as a half-open range.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (p, s, n, out) = (
            self.pad[axis],
            self.stride[axis],
            self.input[axis],
            self.output[axis],
        );
        // need 0 <= o*s + k - p <= n - 1
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if n + p > k {
            (n - 1 + p - k) / s + 1
        } else {
            0
        };
        (lo, hi.min(out).max(lo))
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn k_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visits every (output position, input position) pair for one kernel tap,
    /// passing flat plane offsets.
    #[inline]
    fn for_each_tap(
        &self,
        kz: usize,
        ky: usize,
        kx: usize,
        mut f: impl FnMut(usize, usize, usize),
    ) {
        let (z0, z1) = self.valid(0, kz);
        let (y0, y1) = self.valid(1, ky);
        let (x0, x1) = self.valid(2, kx);
        if x0 >= x1 {
            return;
        }
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        for oz in z0..z1 {
            let iz = oz * self.stride[0] + kz - self.pad[0];
            for oy in y0..y1 {
                let iy = oy * self.stride[1] + ky - self.pad[1];
                let out_row = (oz * oh + oy) * ow;
                let in_row = (iz * ih + iy) * iw;
                let ix0 = x0 * self.stride[2] + kx - self.pad[2];
                f(out_row + x0, in_row + ix0, x1 - x0);
            }
        }
    }
}

/// Cross-correlation of a `(channels, spatial...)` input with an
/// `(out, in, spatial...)` kernel, plus an optional per-output-channel bias.
pub fn conv(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    spec: ConvSpec,
) -> Result<Tensor> {
    let g = Geometry::resolve(input, kernel, spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_ch] {
            return Err(Error::shape(format!(
                "conv bias: expected shape [{}], got {:?}",
                g.out_ch,
                b.shape()
            )));
        }
    }
    let (in_plane, out_plane, kvol) = (g.in_plane(), g.out_plane(), g.k_volume());
    let [kd, kh, kw] = g.kernel;
    let sx = g.stride[2];
    let mut out = vec![0.0; g.out_ch * out_plane];
    let x = input.data();
    let w = kernel.data();
    for o in 0..g.out_ch {
        let out_o = &mut out[o * out_plane..(o + 1) * out_plane];
        if let Some(b) = bias {
            out_o.fill(b.data()[o]);
        }
        for c in 0..g.in_ch {
            let x_c = &x[c * in_plane..(c + 1) * in_plane];
            let w_oc = &w[(o * g.in_ch + c) * kvol..(o * g.in_ch + c + 1) * kvol];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w_oc[(kz * kh + ky) * kw + kx];
                        g.for_each_tap(kz, ky, kx, |o0, i0, n| {
                            let dst = &mut out_o[o0..o0 + n];
                            if sx == 1 {
                                for (d, s) in dst.iter_mut().zip(&x_c[i0..i0 + n]) {
                                    *d += wv * s;
                                }
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d += wv * x_c[i0 + j * sx];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    Tensor::new(g.output_shape(spec.dims), out)
}

/// Gradients of [`conv`] with respect to its input, kernel and bias given the
/// upstream gradient of its output.
pub fn conv_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    spec: ConvSpec,
) -> Result<ConvGrads> {
    let g = Geometry::resolve(input, kernel, spec)?;
    let expected = g.output_shape(spec.dims);
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::shape(format!(
            "conv upstream gradient: expected {:?}, got {:?}",
            expected,
            grad_out.shape()
        )));
    }
    let (in_plane, out_plane, kvol) = (g.in_plane(), g.out_plane(), g.k_volume());
    let [kd, kh, kw] = g.kernel;
    let sx = g.stride[2];
    let x = input.data();
    let w = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; input.len()];
    let mut gw = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; g.out_ch];
    for o in 0..g.out_ch {
        let go_o = &go[o * out_plane..(o + 1) * out_plane];
        gb[o] = go_o.iter().sum();
        for c in 0..g.in_ch {
            let x_c = &x[c * in_plane..(c + 1) * in_plane];
            let gx_c = &mut gx[c * in_plane..(c + 1) * in_plane];
            let base = (o * g.in_ch + c) * kvol;
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = base + (kz * kh + ky) * kw + kx;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        g.for_each_tap(kz, ky, kx, |o0, i0, n| {
                            let src = &go_o[o0..o0 + n];
                            if sx == 1 {
                                for ((gi, xi), &gv) in
                                    gx_c[i0..i0 + n].iter_mut().zip(&x_c[i0..i0 + n]).zip(src)
                                {
                                    acc += gv * xi;
                                    *gi += wv * gv;
                                }
                            } else {
                                for (j, &gv) in src.iter().enumerate() {
                                    acc += gv * x_c[i0 + j * sx];
                                    gx_c[i0 + j * sx] += wv * gv;
                                }
                            }
                        });
                        gw[widx] = acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        kernel: Tensor::new(kernel.shape().to_vec(), gw)?,
        bias: Tensor::vector(gb),
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// Stacks `b`'s channels after `a`'s. Spatial extents must agree.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.spatial() != b.spatial() || a.shape().is_empty() || b.shape().is_empty() {
        return Err(Error::shape(format!(
            "concat_channels: spatial extents differ ({:?} vs {:?})",
            a.shape(),
            b.shape()
        )));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.channels();
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

/// Per-channel mean over all spatial positions; output shape `[channels]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    if input.spatial().is_empty() {
        return Err(Error::shape(format!(
            "global_avg_pool needs at least one spatial axis, got shape {:?}",
            input.shape()
        )));
    }
    let plane: usize = input.spatial().iter().product();
    let means = input
        .data()
        .chunks(plane.max(1))
        .take(input.channels())
        .map(|ch| ch.iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(Tensor::vector(means))
}

/// `W x (+ b)` with `W` of shape `(out, in)`; `x` is flattened.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if weights.shape().len() != 2 || weights.shape()[1] != input.len() {
        return Err(Error::shape(format!(
            "fully_connected: weights {:?} do not accept an input of {} values",
            weights.shape(),
            input.len()
        )));
    }
    let (rows, cols) = (weights.shape()[0], weights.shape()[1]);
    if let Some(b) = bias {
        if b.shape() != [rows] {
            return Err(Error::shape(format!(
                "fully_connected bias: expected shape [{}], got {:?}",
                rows,
                b.shape()
            )));
        }
    }
    let x = input.data();
    let out = (0..rows)
        .map(|r| {
            let row = &weights.data()[r * cols..(r + 1) * cols];
            let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            dot + bias.map_or(0.0, |b| b.data()[r])
        })
        .collect();
    Ok(Tensor::vector(out))
}

/// Inverted-dropout keep mask: each entry is `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect())
}

pub fn dropout_apply<R: Rng + ?Sized>(
    input: &Tensor,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask(input.len(), rate, rng)?;
    let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Tensor::new(input.shape().to_vec(), data)
}
