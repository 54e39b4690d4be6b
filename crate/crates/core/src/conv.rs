//! 2-D convolution and max pooling over `[B, C, H, W]` buffers.
//!
//! Stride-1 convolution with symmetric zero padding, and non-overlapping
//! square max pooling. Layouts are flat row-major; dimensions are passed
//! explicitly so the same kernels serve both the tape ops and the model
//! builder's shape inference.

use alloc::vec;
use alloc::vec::Vec;

/// Spatial dimensions of one convolution input/output plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    /// Whether the kernel fits the padded input.
    pub fn is_valid(&self) -> bool {
        self.kernel >= 1
            && self.height + 2 * self.padding >= self.kernel
            && self.width + 2 * self.padding >= self.kernel
    }
}

/// Stride-1 2-D convolution: `x` is `[B, Cin, H, W]`, `w` is
/// `[Cout, Cin, K, K]`, `bias` is `[Cout]`; returns `[B, Cout, H', W']`.
pub fn conv2d_forward(x: &[f64], w: &[f64], bias: &[f64], d: ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.out_height(), d.out_width());
    debug_assert_eq!(x.len(), d.batch * d.in_channels * d.height * d.width);
    debug_assert_eq!(w.len(), d.out_channels * d.in_channels * d.kernel * d.kernel);
    debug_assert_eq!(bias.len(), d.out_channels);
    let mut out = vec![0.0; d.batch * d.out_channels * oh * ow];
    let p = d.padding as isize;
    for b in 0..d.batch {
        for oc in 0..d.out_channels {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..d.in_channels {
                        for ki in 0..d.kernel {
                            let xi = i as isize + ki as isize - p;
                            if xi < 0 || xi >= d.height as isize {
                                continue;
                            }
                            for kj in 0..d.kernel {
                                let xj = j as isize + kj as isize - p;
                                if xj < 0 || xj >= d.width as isize {
                                    continue;
                                }
                                let x_idx = ((b * d.in_channels + ic) * d.height
                                    + xi as usize)
                                    * d.width
                                    + xj as usize;
                                let w_idx = ((oc * d.in_channels + ic) * d.kernel + ki)
                                    * d.kernel
                                    + kj;
                                acc += x[x_idx] * w[w_idx];
                            }
                        }
                    }
                    out[((b * d.out_channels + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] given `grad_out` of shape `[B, Cout, H', W']`.
/// Returns `(dx, dw, dbias)`.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    d: ConvDims,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (d.out_height(), d.out_width());
    debug_assert_eq!(grad_out.len(), d.batch * d.out_channels * oh * ow);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut dbias = vec![0.0; d.out_channels];
    let p = d.padding as isize;
    for b in 0..d.batch {
        for oc in 0..d.out_channels {
            for i in 0..oh {
                for j in 0..ow {
                    let g = grad_out[((b * d.out_channels + oc) * oh + i) * ow + j];
                    if g == 0.0 {
                        continue;
                    }
                    dbias[oc] += g;
                    for ic in 0..d.in_channels {
                        for ki in 0..d.kernel {
                            let xi = i as isize + ki as isize - p;
                            if xi < 0 || xi >= d.height as isize {
                                continue;
                            }
                            for kj in 0..d.kernel {
                                let xj = j as isize + kj as isize - p;
                                if xj < 0 || xj >= d.width as isize {
                                    continue;
                                }
                                let x_idx = ((b * d.in_channels + ic) * d.height
                                    + xi as usize)
                                    * d.width
                                    + xj as usize;
                                let w_idx = ((oc * d.in_channels + ic) * d.kernel + ki)
                                    * d.kernel
                                    + kj;
                                dw[w_idx] += g * x[x_idx];
                                dx[x_idx] += g * w[w_idx];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, dbias)
}

/// Non-overlapping `size x size` max pooling of `[B, C, H, W]`; `H` and `W`
/// must be divisible by `size`.
pub fn max_pool2d_forward(x: &[f64], batch: usize, channels: usize, height: usize, width: usize, size: usize) -> Vec<f64> {
    debug_assert!(height % size == 0 && width % size == 0);
    let (oh, ow) = (height / size, width / size);
    let mut out = vec![0.0; batch * channels * oh * ow];
    for bc in 0..batch * channels {
        let plane = &x[bc * height * width..(bc + 1) * height * width];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for di in 0..size {
                    for dj in 0..size {
                        let v = plane[(i * size + di) * width + (j * size + dj)];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(bc * oh + i) * ow + j] = best;
            }
        }
    }
    out
}

/// Gradient of [`max_pool2d_forward`]: routes each output gradient to the
/// first maximal element of its window (scan order breaks ties).
pub fn max_pool2d_backward(
    x: &[f64],
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    size: usize,
    grad_out: &[f64],
) -> Vec<f64> {
    let (oh, ow) = (height / size, width / size);
    debug_assert_eq!(grad_out.len(), batch * channels * oh * ow);
    let mut dx = vec![0.0; x.len()];
    for bc in 0..batch * channels {
        let plane = &x[bc * height * width..(bc + 1) * height * width];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for di in 0..size {
                    for dj in 0..size {
                        let idx = (i * size + di) * width + (j * size + dj);
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                dx[bc * height * width + best_idx] += grad_out[(bc * oh + i) * ow + j];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims_1ch(h: usize, w: usize, k: usize, p: usize) -> ConvDims {
        ConvDims { batch: 1, in_channels: 1, out_channels: 1, height: h, width: w, kernel: k, padding: p }
    }

    #[test]
    fn ones_kernel_sums_windows() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let w = [1.0; 4];
        let out = conv2d_forward(&x, &w, &[0.0], dims_1ch(3, 3, 2, 0));
        assert_eq!(out, vec![12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn centered_delta_kernel_with_padding_is_identity() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let mut w = [0.0; 9];
        w[4] = 1.0; // center of the 3x3 kernel
        let out = conv2d_forward(&x, &w, &[0.0], dims_1ch(3, 3, 3, 1));
        assert_eq!(out.as_slice(), x.as_slice());
    }

    #[test]
    fn bias_shifts_every_output() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0];
        let out = conv2d_forward(&x, &w, &[10.0], dims_1ch(2, 2, 1, 0));
        assert_eq!(out, vec![11.0, 12.0, 13.0, 14.0]);
    }

    #[test]
    fn backward_of_ones_kernel_spreads_gradient() {
        // A 2x2 ones kernel over a 2x2 input sums everything: the single
        // output's gradient flows to every input, dw picks up x itself.
        let x = [3.0, 5.0, 1.0, 2.0];
        let w = [1.0; 4];
        let (dx, dw, db) = conv2d_backward(&x, &w, dims_1ch(2, 2, 2, 0), &[2.0]);
        assert_eq!(dx, vec![2.0; 4]);
        assert_eq!(dw, vec![6.0, 10.0, 2.0, 4.0]);
        assert_eq!(db, vec![2.0]);
    }

    #[test]
    fn max_pool_picks_window_maxima() {
        let x = [1.0, 2.0, 3.0, 4.0, 8.0, 7.0, 6.0, 5.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 9.0];
        let out = max_pool2d_forward(&x, 1, 1, 4, 4, 2);
        assert_eq!(out, vec![8.0, 6.0, 1.0, 9.0]);
    }

    #[test]
    fn max_pool_backward_routes_to_argmax_only() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let dx = max_pool2d_backward(&x, 1, 1, 2, 2, 2, &[5.0]);
        assert_eq!(dx, vec![0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn max_pool_backward_breaks_ties_deterministically() {
        let x = [7.0, 7.0, 7.0, 7.0];
        let dx = max_pool2d_backward(&x, 1, 1, 2, 2, 2, &[1.0]);
        assert_eq!(dx, vec![1.0, 0.0, 0.0, 0.0]);
    }
}
