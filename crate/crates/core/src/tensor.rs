//! Channel-major dense tensors plus the handful of spatial ops the toy
//! oracles are built from: circular 3x3 convolution, factor-2 bilinear
//! upsampling, and area-average downsampling. Every spatial op has an
//! explicit adjoint so oracle gradients are exact transposes of the
//! forward maps, not approximations.

use crate::error::{Error, Result};

/// Dense rank-3 tensor laid out `[channel][row][col]`, f64 throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "feature map {}x{}x{} needs {} values, got {}",
                    channels,
                    height,
                    width,
                    channels * height * width,
                    data.len()
                ),
            });
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
    }
}

/// y = W x + b with row-major `w` of shape `out_dim x in_dim`.
pub fn affine(w: &[f64], out_dim: usize, in_dim: usize, x: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(x.len(), in_dim);
    debug_assert_eq!(b.len(), out_dim);
    (0..out_dim)
        .map(|o| {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            b[o] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>()
        })
        .collect()
}

#[inline]
fn wrapped(i: usize, d: isize, n: usize) -> usize {
    // i + d mod n for d in {-1, 0, 1}
    let j = i as isize + d;
    if j < 0 {
        n - 1
    } else if j as usize >= n {
        0
    } else {
        j as usize
    }
}

/// Circular 3x3 convolution; kernel laid out `[out][in][dy][dx]` row-major.
/// Tap (dy, dx) reads the input at (y + dy - 1, x + dx - 1) with wraparound.
pub fn conv3x3_circular(kernel: &[f64], c_out: usize, input: &FeatureMap) -> FeatureMap {
    let (ci, h, w) = (input.channels, input.height, input.width);
    debug_assert_eq!(kernel.len(), c_out * ci * 9);
    let mut out = FeatureMap::zeros(c_out, h, w);
    for o in 0..c_out {
        for c in 0..ci {
            let kbase = (o * ci + c) * 9;
            for dy in 0..3 {
                for dx in 0..3 {
                    let kv = kernel[kbase + dy * 3 + dx];
                    for y in 0..h {
                        let sy = wrapped(y, dy as isize - 1, h);
                        let orow = (o * h + y) * w;
                        let irow = (c * h + sy) * w;
                        for x in 0..w {
                            let sx = wrapped(x, dx as isize - 1, w);
                            out.data[orow + x] += kv * input.data[irow + sx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `conv3x3_circular` with respect to its input.
pub fn conv3x3_circular_adjoint(kernel: &[f64], c_out: usize, cograd: &FeatureMap) -> FeatureMap {
    debug_assert_eq!(cograd.channels, c_out);
    let (h, w) = (cograd.height, cograd.width);
    let ci = kernel.len() / (c_out * 9);
    let mut out = FeatureMap::zeros(ci, h, w);
    for o in 0..c_out {
        for c in 0..ci {
            let kbase = (o * ci + c) * 9;
            for dy in 0..3 {
                for dx in 0..3 {
                    let kv = kernel[kbase + dy * 3 + dx];
                    // forward read at (y+dy-1, x+dx-1) becomes a scatter here
                    for y in 0..h {
                        let sy = wrapped(y, dy as isize - 1, h);
                        let grow = (o * h + y) * w;
                        let orow = (c * h + sy) * w;
                        for x in 0..w {
                            let sx = wrapped(x, dx as isize - 1, w);
                            out.data[orow + sx] += kv * cograd.data[grow + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 1x1 channel mixing: out[o] = sum_c m[o][c] * input[c], per pixel.
pub fn channel_mix(m: &[f64], c_out: usize, input: &FeatureMap) -> FeatureMap {
    let (ci, h, w) = (input.channels, input.height, input.width);
    debug_assert_eq!(m.len(), c_out * ci);
    let mut out = FeatureMap::zeros(c_out, h, w);
    let plane = h * w;
    for o in 0..c_out {
        for c in 0..ci {
            let mv = m[o * ci + c];
            let (dst, src) = (o * plane, c * plane);
            for p in 0..plane {
                out.data[dst + p] += mv * input.data[src + p];
            }
        }
    }
    out
}

/// Adjoint of `channel_mix` with respect to its input.
pub fn channel_mix_adjoint(m: &[f64], c_out: usize, cograd: &FeatureMap) -> FeatureMap {
    debug_assert_eq!(cograd.channels, c_out);
    let (h, w) = (cograd.height, cograd.width);
    let ci = m.len() / c_out;
    let mut out = FeatureMap::zeros(ci, h, w);
    let plane = h * w;
    for o in 0..c_out {
        for c in 0..ci {
            let mv = m[o * ci + c];
            let (dst, src) = (c * plane, o * plane);
            for p in 0..plane {
                out.data[dst + p] += mv * cograd.data[src + p];
            }
        }
    }
    out
}

// Factor-2 bilinear taps with half-pixel centers and edge clamping:
// out[2i] = 0.75 in[i] + 0.25 in[i-1], out[2i+1] = 0.75 in[i] + 0.25 in[i+1].
fn up2_rows(input: &FeatureMap) -> FeatureMap {
    let (c, h, w) = (input.channels, input.height, input.width);
    let mut out = FeatureMap::zeros(c, 2 * h, w);
    for ch in 0..c {
        for y in 0..h {
            let lo = y.saturating_sub(1);
            let hi = (y + 1).min(h - 1);
            for x in 0..w {
                let v = input.at(ch, y, x);
                *out.at_mut(ch, 2 * y, x) = 0.75 * v + 0.25 * input.at(ch, lo, x);
                *out.at_mut(ch, 2 * y + 1, x) = 0.75 * v + 0.25 * input.at(ch, hi, x);
            }
        }
    }
    out
}

fn up2_cols(input: &FeatureMap) -> FeatureMap {
    let (c, h, w) = (input.channels, input.height, input.width);
    let mut out = FeatureMap::zeros(c, h, 2 * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(1);
                let hi = (x + 1).min(w - 1);
                let v = input.at(ch, y, x);
                *out.at_mut(ch, y, 2 * x) = 0.75 * v + 0.25 * input.at(ch, y, lo);
                *out.at_mut(ch, y, 2 * x + 1) = 0.75 * v + 0.25 * input.at(ch, y, hi);
            }
        }
    }
    out
}

/// Factor-2 bilinear upsampling in both spatial dimensions (rows first).
pub fn bilinear_up2(input: &FeatureMap) -> FeatureMap {
    up2_cols(&up2_rows(input))
}

fn up2_rows_adjoint(cograd: &FeatureMap) -> FeatureMap {
    let (c, h2, w) = (cograd.channels, cograd.height, cograd.width);
    let h = h2 / 2;
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            let lo = y.saturating_sub(1);
            let hi = (y + 1).min(h - 1);
            for x in 0..w {
                let ge = cograd.at(ch, 2 * y, x);
                let go = cograd.at(ch, 2 * y + 1, x);
                *out.at_mut(ch, y, x) += 0.75 * (ge + go);
                *out.at_mut(ch, lo, x) += 0.25 * ge;
                *out.at_mut(ch, hi, x) += 0.25 * go;
            }
        }
    }
    out
}

fn up2_cols_adjoint(cograd: &FeatureMap) -> FeatureMap {
    let (c, h, w2) = (cograd.channels, cograd.height, cograd.width);
    let w = w2 / 2;
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(1);
                let hi = (x + 1).min(w - 1);
                let ge = cograd.at(ch, y, 2 * x);
                let go = cograd.at(ch, y, 2 * x + 1);
                *out.at_mut(ch, y, x) += 0.75 * (ge + go);
                *out.at_mut(ch, y, lo) += 0.25 * ge;
                *out.at_mut(ch, y, hi) += 0.25 * go;
            }
        }
    }
    out
}

/// Adjoint of `bilinear_up2` (cols adjoint first, mirroring the forward order).
pub fn bilinear_up2_adjoint(cograd: &FeatureMap) -> FeatureMap {
    up2_rows_adjoint(&up2_cols_adjoint(cograd))
}

/// Area-average downsampling to `out_h x out_w`; factors must divide exactly.
pub fn area_downsample(input: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    let (c, h, w) = (input.channels, input.height, input.width);
    if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
        return Err(Error::ShapeMismatch {
            context: format!("cannot area-downsample {}x{} to {}x{}", h, w, out_h, out_w),
        });
    }
    let (ky, kx) = (h / out_h, w / out_w);
    let inv = 1.0 / (ky * kx) as f64;
    let mut out = FeatureMap::zeros(c, out_h, out_w);
    for ch in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for yy in 0..ky {
                    for xx in 0..kx {
                        acc += input.at(ch, oy * ky + yy, ox * kx + xx);
                    }
                }
                *out.at_mut(ch, oy, ox) = acc * inv;
            }
        }
    }
    Ok(out)
}

/// Adjoint of `area_downsample`: spread each cograd entry uniformly over its block.
pub fn area_downsample_adjoint(cograd: &FeatureMap, in_h: usize, in_w: usize) -> FeatureMap {
    let (c, oh, ow) = (cograd.channels, cograd.height, cograd.width);
    let (ky, kx) = (in_h / oh, in_w / ow);
    let inv = 1.0 / (ky * kx) as f64;
    let mut out = FeatureMap::zeros(c, in_h, in_w);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = cograd.at(ch, oy, ox) * inv;
                for yy in 0..ky {
                    for xx in 0..kx {
                        *out.at_mut(ch, oy * ky + yy, ox * kx + xx) += g;
                    }
                }
            }
        }
    }
    out
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}
