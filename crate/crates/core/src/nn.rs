//! 3x3 convolutions with explicit backward passes, lowered onto GEMM via
//! im2col.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const KERNEL: usize = 3;
const PAD: usize = 1;

/// Spatial output size of a padded 3x3 convolution.
pub fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 * PAD - KERNEL) / stride + 1
}

/// A 3x3, padding-1 convolution. `weight` is laid out as
/// `(out, in * 9)` with input channel major, then kernel row, then column.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            stride,
            weight: Array2::zeros((out_channels, in_channels * KERNEL * KERNEL)),
            bias: Array1::zeros(out_channels),
        }
    }

    /// Normal weights with standard deviation `gain / sqrt(fan_in)`, zero
    /// bias. Values are rounded to f32 so a checkpoint round trip is exact.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, stride);
        let fan_in = (in_channels * KERNEL * KERNEL) as f64;
        let std = gain / fan_in.sqrt();
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite std");
            conv.weight
                .mapv_inplace(|_| normal.sample(&mut *rng) as f32 as f64);
        }
        conv
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels, self.out_channels, self.stride)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        (self.out_channels, conv_out(h, self.stride), conv_out(w, self.stride))
    }

    /// Returns the output and the im2col buffer needed by `backward`.
    pub fn forward(&self, x: ArrayView3<f64>) -> (Array3<f64>, Array2<f64>) {
        debug_assert_eq!(x.dim().0, self.in_channels);
        let cols = im2col(x, self.stride);
        let y = self.forward_cols(cols.view(), x.dim().1, x.dim().2);
        (y, cols)
    }

    pub fn forward_cols(&self, cols: ArrayView2<f64>, h: usize, w: usize) -> Array3<f64> {
        let (oc, oh, ow) = self.out_shape(h, w);
        let mut y = Array2::<f64>::zeros((oc, oh * ow));
        for (mut row, b) in y.outer_iter_mut().zip(self.bias.iter()) {
            row.fill(*b);
        }
        general_mat_mul(1.0, &self.weight, &cols, 1.0, &mut y);
        y.into_shape_with_order((oc, oh, ow)).expect("contiguous")
    }

    /// Accumulates parameter gradients into `grad`.
    pub fn backward_params(&self, gy: ArrayView3<f64>, cols: ArrayView2<f64>, grad: &mut Conv2d) {
        let (oc, oh, ow) = gy.dim();
        let gy2 = gy.into_shape_with_order((oc, oh * ow)).expect("contiguous");
        general_mat_mul(1.0, &gy2, &cols.t(), 1.0, &mut grad.weight);
        for (g, row) in grad.bias.iter_mut().zip(gy2.outer_iter()) {
            *g += row.sum();
        }
    }

    /// Gradient with respect to the input of spatial size `h x w`.
    pub fn backward_input(&self, gy: ArrayView3<f64>, h: usize, w: usize) -> Array3<f64> {
        let (oc, oh, ow) = gy.dim();
        let gy2 = gy.into_shape_with_order((oc, oh * ow)).expect("contiguous");
        let gcols = self.weight.t().dot(&gy2);
        col2im(gcols.view(), self.in_channels, h, w, self.stride)
    }
}

/// Output columns `ox` whose tap `kx` lands inside a row of width `w`.
fn valid_cols(kx: usize, w: usize, ow: usize, stride: usize) -> std::ops::Range<usize> {
    let lo = PAD.saturating_sub(kx).div_ceil(stride);
    let hi = if w + PAD > kx { ((w + PAD - 1 - kx) / stride + 1).min(ow) } else { 0 };
    lo..hi.max(lo)
}

/// `(c * 9, oh * ow)` patch matrix of a zero-padded input.
pub fn im2col(x: ArrayView3<f64>, stride: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut out = vec![0.0; c * KERNEL * KERNEL * oh * ow];
    for ch in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ch * KERNEL + ky) * KERNEL + kx;
                let dst = &mut out[row * oh * ow..(row + 1) * oh * ow];
                let cols = valid_cols(kx, w, ow, stride);
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    if iy < PAD || iy - PAD >= h {
                        continue;
                    }
                    let src_row = &src[(ch * h + iy - PAD) * w..][..w];
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let ix0 = cols.start + kx - PAD;
                        d[cols.clone()].copy_from_slice(&src_row[ix0..ix0 + cols.len()]);
                    } else {
                        for ox in cols.clone() {
                            d[ox] = src_row[ox * stride + kx - PAD];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * KERNEL * KERNEL, oh * ow), out).expect("sized above")
}

/// Scatter-adds a patch matrix back onto a `(c, h, w)` grid.
pub fn col2im(cols: ArrayView2<f64>, c: usize, h: usize, w: usize, stride: usize) -> Array3<f64> {
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ch * KERNEL + ky) * KERNEL + kx;
                let s_row = &src[row * oh * ow..(row + 1) * oh * ow];
                let valid = valid_cols(kx, w, ow, stride);
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    if iy < PAD || iy - PAD >= h {
                        continue;
                    }
                    let dst = &mut out[(ch * h + iy - PAD) * w..][..w];
                    let s = &s_row[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let ix0 = valid.start + kx - PAD;
                        for (d, v) in dst[ix0..ix0 + valid.len()].iter_mut().zip(&s[valid.clone()]) {
                            *d += v;
                        }
                    } else {
                        for ox in valid.clone() {
                            dst[ox * stride + kx - PAD] += s[ox];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).expect("sized above")
}

pub fn silu(x: f64) -> f64 {
    x * crate::mask::sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = crate::mask::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (oc, oh, ow) = conv.out_shape(h, w);
        Array3::from_shape_fn((oc, oh, ow), |(o, oy, ox)| {
            let mut acc = conv.bias[o];
            for ch in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * conv.stride + ky) as isize - 1;
                        let ix = (ox * conv.stride + kx) as isize - 1;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight[[o, ch * 9 + ky * 3 + kx]]
                                * x[[ch, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn forward_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for stride in [1, 2] {
            let mut conv = Conv2d::init(3, 4, stride, 1.0, &mut rng);
            conv.bias = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
            let x = Array3::from_shape_fn((3, 6, 5), |(a, b, c)| (a * 7 + b * 3 + c) as f64 * 0.1 - 1.0);
            let (y, _) = conv.forward(x.view());
            let expected = naive(&conv, &x);
            assert_eq!(y.dim(), expected.dim());
            for (a, b) in y.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::init(2, 3, 2, 1.0, &mut rng);
        let x = Array3::from_shape_fn((2, 5, 4), |(a, b, c)| ((a + 2 * b + 3 * c) as f64).sin());
        let gy = Array3::from_shape_fn(conv.out_shape(5, 4), |(a, b, c)| ((a * 5 + b + c) as f64).cos());
        let objective = |conv: &Conv2d, x: &Array3<f64>| (naive(conv, x) * &gy).sum();

        let (_, cols) = conv.forward(x.view());
        let mut grad = conv.zeros_like();
        conv.backward_params(gy.view(), cols.view(), &mut grad);
        let gx = conv.backward_input(gy.view(), 5, 4);

        let h = 1e-6;
        for idx in [(0, 0), (1, 7), (2, 17)] {
            let mut p = conv.clone();
            p.weight[idx] += h;
            let mut m = conv.clone();
            m.weight[idx] -= h;
            let fd = (objective(&p, &x) - objective(&m, &x)) / (2.0 * h);
            assert!((fd - grad.weight[idx]).abs() < 1e-6);
        }
        for idx in [(0, 0, 0), (1, 4, 3), (0, 2, 1)] {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            let fd = (objective(&conv, &p) - objective(&conv, &m)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6);
        }
        let mut p = conv.clone();
        p.bias[1] += h;
        let mut m = conv.clone();
        m.bias[1] -= h;
        let fd = (objective(&p, &x) - objective(&m, &x)) / (2.0 * h);
        assert!((fd - grad.bias[1]).abs() < 1e-6);
    }

    #[test]
    fn silu_derivative() {
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
