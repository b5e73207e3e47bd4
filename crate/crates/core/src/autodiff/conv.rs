//! Direct 3x3 convolution with zero "same" padding over `[C, H, W]` maps.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - 1) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - 1) / self.stride + 1
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * 9
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_height(), self.out_width()]
    }

    /// Multiply-accumulates to produce one output position.
    pub fn macs_per_position(&self) -> u64 {
        (9 * self.in_channels * self.out_channels) as u64
    }

    /// Output indices `o` along one axis whose tap `o * stride + k - 1` lands in `0..extent`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = if k == 0 { 1usize.div_ceil(s) } else { 0 };
        // o * s + k - 1 < extent  <=>  o * s < extent + 1 - k
        let hi = (extent + 1 - k).div_ceil(s).min(out);
        lo..hi.max(lo)
    }
}

pub(crate) fn forward(geom: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let (h, w, s) = (geom.height, geom.width, geom.stride);
    let mut out = vec![0.0; geom.out_channels * oh * ow];
    for o in 0..geom.out_channels {
        let out_plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..geom.in_channels {
            let in_plane = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                let ys = geom.valid_range(ky, h, oh);
                for kx in 0..3 {
                    let wv = kernel[((o * geom.in_channels + c) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let xs = geom.valid_range(kx, w, ow);
                    for y in ys.clone() {
                        let iy = y * s + ky - 1;
                        let row = &in_plane[iy * w..(iy + 1) * w];
                        let orow = &mut out_plane[y * ow..(y + 1) * ow];
                        for x in xs.clone() {
                            orow[x] += wv * row[x * s + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d input, d kernel)` for upstream adjoint `grad`.
pub(crate) fn backward(
    geom: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let (h, w, s) = (geom.height, geom.width, geom.stride);
    let mut gin = want_input.then(|| vec![0.0; input.len()]);
    let mut gk = want_kernel.then(|| vec![0.0; kernel.len()]);
    for o in 0..geom.out_channels {
        let g_plane = &grad[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..geom.in_channels {
            let in_off = c * h * w;
            for ky in 0..3 {
                let ys = geom.valid_range(ky, h, oh);
                for kx in 0..3 {
                    let kidx = ((o * geom.in_channels + c) * 3 + ky) * 3 + kx;
                    let wv = kernel[kidx];
                    let xs = geom.valid_range(kx, w, ow);
                    let mut acc = 0.0;
                    for y in ys.clone() {
                        let iy = y * s + ky - 1;
                        let grow = &g_plane[y * ow..(y + 1) * ow];
                        let base = in_off + iy * w;
                        if let Some(gin) = gin.as_mut() {
                            for x in xs.clone() {
                                gin[base + x * s + kx - 1] += wv * grow[x];
                            }
                        }
                        if gk.is_some() {
                            for x in xs.clone() {
                                acc += input[base + x * s + kx - 1] * grow[x];
                            }
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    (gin, gk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(geom: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let mut out = vec![0.0; geom.out_channels * oh * ow];
        for o in 0..geom.out_channels {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..geom.in_channels {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (y * geom.stride + ky) as isize - 1;
                                let ix = (x * geom.stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= geom.height as isize || ix >= geom.width as isize {
                                    continue;
                                }
                                let v = input[(c * geom.height + iy as usize) * geom.width + ix as usize];
                                acc += kernel[((o * geom.in_channels + c) * 3 + ky) * 3 + kx] * v;
                            }
                        }
                    }
                    out[(o * oh + y) * ow + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        for &(h, w, s) in &[(5, 5, 1), (4, 6, 2), (7, 3, 2), (1, 1, 1), (8, 8, 2)] {
            let geom = ConvGeometry {
                in_channels: 2,
                out_channels: 3,
                height: h,
                width: w,
                stride: s,
            };
            let input: Vec<f64> = (0..2 * h * w).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let kernel: Vec<f64> = (0..geom.kernel_len()).map(|i| ((i * 5 % 13) as f64) * 0.1 - 0.6).collect();
            let fast = forward(&geom, &input, &kernel);
            let slow = naive(&geom, &input, &kernel);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn output_extent_halves_with_stride_two() {
        let geom = ConvGeometry {
            in_channels: 1,
            out_channels: 1,
            height: 16,
            width: 16,
            stride: 2,
        };
        assert_eq!(geom.output_shape(), [1, 8, 8]);
    }
}
