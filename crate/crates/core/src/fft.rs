//! FFT helpers: axis-by-axis multidimensional transforms over ndarray
//! storage, smooth padded sizes, and cached-kernel linear 3D convolution.

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex;
use rustfft::FftPlanner;

/// Smallest 2^a 3^b 5^c integer >= `n` (fast rustfft sizes).
pub fn good_size(n: usize) -> usize {
    let mut s = n.max(1);
    loop {
        let mut r = s;
        for p in [2usize, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return s;
        }
        s += 1;
    }
}

fn transform_axis3(data: &mut Array3<Complex<f64>>, axis: Axis, inverse: bool) {
    let len = data.len_of(axis);
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    };
    let mut buf = vec![Complex::default(); len];
    for mut lane in data.lanes_mut(axis) {
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        fft.process(&mut buf);
        for (v, b) in lane.iter_mut().zip(buf.iter()) {
            *v = *b;
        }
    }
}

/// In-place 3D FFT. The inverse applies the 1/N normalization.
pub fn fft3(data: &mut Array3<Complex<f64>>, inverse: bool) {
    for ax in 0..3 {
        transform_axis3(data, Axis(ax), inverse);
    }
    if inverse {
        let scale = 1.0 / data.len() as f64;
        data.mapv_inplace(|v| v * scale);
    }
}

fn transform_axis2(data: &mut Array2<Complex<f64>>, axis: Axis, inverse: bool) {
    let len = data.len_of(axis);
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    };
    let mut buf = vec![Complex::default(); len];
    for mut lane in data.lanes_mut(axis) {
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        fft.process(&mut buf);
        for (v, b) in lane.iter_mut().zip(buf.iter()) {
            *v = *b;
        }
    }
}

/// In-place 2D FFT. The inverse applies the 1/N normalization.
pub fn fft2(data: &mut Array2<Complex<f64>>, inverse: bool) {
    for ax in 0..2 {
        transform_axis2(data, Axis(ax), inverse);
    }
    if inverse {
        let scale = 1.0 / data.len() as f64;
        data.mapv_inplace(|v| v * scale);
    }
}

/// Full linear 2D convolution of real arrays via zero-padded FFT.
/// Output shape is (a0 + b0 - 1, a1 + b1 - 1).
pub fn conv2_full(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (a0, a1) = a.dim();
    let (b0, b1) = b.dim();
    let (n0, n1) = (good_size(a0 + b0 - 1), good_size(a1 + b1 - 1));
    let mut fa = Array2::<Complex<f64>>::zeros((n0, n1));
    let mut fb = Array2::<Complex<f64>>::zeros((n0, n1));
    for ((i, j), v) in a.indexed_iter() {
        fa[(i, j)] = Complex::new(*v, 0.0);
    }
    for ((i, j), v) in b.indexed_iter() {
        fb[(i, j)] = Complex::new(*v, 0.0);
    }
    fft2(&mut fa, false);
    fft2(&mut fb, false);
    fa.zip_mut_with(&fb, |x, y| *x *= *y);
    fft2(&mut fa, true);
    let mut out = Array2::<f64>::zeros((a0 + b0 - 1, a1 + b1 - 1));
    for ((i, j), v) in out.indexed_iter_mut() {
        *v = fa[(i, j)].re;
    }
    out
}

/// Linear (zero-padded) 3D convolution with a fixed kernel of size
/// (2n-1)^3 indexed by offsets in [-(n-1), n-1]^3, applied to n^3 inputs,
/// producing n^3 outputs:
///
///   out[k] = sum_d kernel[d] * input[k - d]
///
/// The kernel spectrum is precomputed once and reused across applications
/// (the inner solver calls this every iteration).
#[derive(Debug)]
pub struct Conv3 {
    n: usize,
    padded: usize,
    kernel_hat: Array3<Complex<f64>>,
}

impl Conv3 {
    pub fn new(kernel: &Array3<f64>, n: usize) -> Self {
        let k = 2 * n - 1;
        assert_eq!(kernel.dim(), (k, k, k), "kernel must be (2n-1)^3");
        let padded = good_size(3 * n - 2);
        let mut kernel_hat = Array3::<Complex<f64>>::zeros((padded, padded, padded));
        for ((i, j, l), v) in kernel.indexed_iter() {
            kernel_hat[(i, j, l)] = Complex::new(*v, 0.0);
        }
        fft3(&mut kernel_hat, false);
        Conv3 {
            n,
            padded,
            kernel_hat,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn apply(&self, input: &Array3<f64>) -> Array3<f64> {
        let n = self.n;
        assert_eq!(input.dim(), (n, n, n), "input must be n^3");
        let p = self.padded;
        let mut x = Array3::<Complex<f64>>::zeros((p, p, p));
        for ((i, j, l), v) in input.indexed_iter() {
            x[(i, j, l)] = Complex::new(*v, 0.0);
        }
        fft3(&mut x, false);
        x.zip_mut_with(&self.kernel_hat, |a, b| *a *= *b);
        fft3(&mut x, true);
        // Kernel index d+(n-1) times input index k-d lands at position k+(n-1).
        let off = n - 1;
        let mut out = Array3::<f64>::zeros((n, n, n));
        for ((i, j, l), v) in out.indexed_iter_mut() {
            *v = x[(i + off, j + off, l + off)].re;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn good_sizes_are_smooth_and_minimal() {
        assert_eq!(good_size(1), 1);
        assert_eq!(good_size(7), 8);
        assert_eq!(good_size(97), 100);
        assert_eq!(good_size(192), 192);
    }

    #[test]
    fn fft3_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let orig = Array3::from_shape_fn((6, 8, 5), |_| {
            Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let mut data = orig.clone();
        fft3(&mut data, false);
        fft3(&mut data, true);
        for (a, b) in data.iter().zip(orig.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn conv2_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Array2::from_shape_fn((7, 5), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let got = conv2_full(&a, &b);
        assert_eq!(got.dim(), (10, 10));
        for ((i, j), g) in got.indexed_iter() {
            let mut want = 0.0;
            for ((p, q), av) in a.indexed_iter() {
                if i >= p && j >= q {
                    let (bi, bj) = (i - p, j - q);
                    if bi < 4 && bj < 6 {
                        want += av * b[(bi, bj)];
                    }
                }
            }
            assert!((g - want).abs() < 1e-10);
        }
    }

    #[test]
    fn conv3_matches_direct_sum() {
        let n = 4usize;
        let k = 2 * n - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kernel = Array3::from_shape_fn((k, k, k), |_| rng.gen_range(-1.0..1.0));
        let input = Array3::from_shape_fn((n, n, n), |_| rng.gen_range(-1.0..1.0));
        let conv = Conv3::new(&kernel, n);
        let got = conv.apply(&input);
        for ((i, j, l), g) in got.indexed_iter() {
            let mut want = 0.0;
            for ((di, dj, dl), kv) in kernel.indexed_iter() {
                let (oi, oj, ol) = (
                    i as isize - (di as isize - (n as isize - 1)),
                    j as isize - (dj as isize - (n as isize - 1)),
                    l as isize - (dl as isize - (n as isize - 1)),
                );
                if (0..n as isize).contains(&oi)
                    && (0..n as isize).contains(&oj)
                    && (0..n as isize).contains(&ol)
                {
                    want += kv * input[(oi as usize, oj as usize, ol as usize)];
                }
            }
            assert!((g - want).abs() < 1e-10, "at ({i},{j},{l})");
        }
    }

    #[test]
    fn conv3_delta_kernel_is_identity() {
        let n = 5usize;
        let k = 2 * n - 1;
        let mut kernel = Array3::<f64>::zeros((k, k, k));
        kernel[(n - 1, n - 1, n - 1)] = 1.0;
        let conv = Conv3::new(&kernel, n);
        let input = Array3::from_shape_fn((n, n, n), |(i, j, l)| (i + 2 * j + 3 * l) as f64);
        let out = conv.apply(&input);
        for (a, b) in out.iter().zip(input.iter()) {
            assert!((a - b).abs() < 1e-11);
        }
    }
}
