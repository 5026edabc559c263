//! 2D FFTs and zero-padded "same"-size correlation.
//!
//! `correlate(f, k)[x] = Σ_i k[i] · f[x + i − c]` where `c = shape(k) / 2` is
//! the kernel's centre pixel and `f` is zero outside its domain.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Smallest `m ≥ n` whose only prime factors are 2, 3 and 5.
pub fn next_fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Planned 2D transform of a fixed shape.
#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    fwd_row: Arc<dyn Fft<f64>>,
    fwd_col: Arc<dyn Fft<f64>>,
    inv_row: Arc<dyn Fft<f64>>,
    inv_col: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            fwd_row: planner.plan_fft_forward(cols),
            fwd_col: planner.plan_fft_forward(rows),
            inv_row: planner.plan_fft_inverse(cols),
            inv_col: planner.plan_fft_inverse(rows),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn run(&self, a: &mut Array2<Complex64>, row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        assert_eq!(a.dim(), (self.rows, self.cols), "FFT shape mismatch");
        if !a.is_standard_layout() {
            *a = a.as_standard_layout().to_owned();
        }
        row.process(a.as_slice_mut().expect("standard layout"));
        let mut buf = vec![Complex64::default(); self.rows];
        for mut c in a.axis_iter_mut(Axis(1)) {
            for (b, v) in buf.iter_mut().zip(c.iter()) {
                *b = *v;
            }
            col.process(&mut buf);
            for (v, b) in c.iter_mut().zip(&buf) {
                *v = *b;
            }
        }
    }

    pub fn forward(&self, a: &mut Array2<Complex64>) {
        self.run(a, &self.fwd_row, &self.fwd_col);
    }

    /// Inverse transform, normalized so that `inverse(forward(a)) == a`.
    pub fn inverse(&self, a: &mut Array2<Complex64>) {
        self.run(a, &self.inv_row, &self.inv_col);
        let s = 1.0 / (self.rows * self.cols) as f64;
        a.mapv_inplace(|v| v * s);
    }
}

/// Cached plan for correlating images of one shape with kernels of one shape.
#[derive(Clone)]
pub struct Correlator {
    image: (usize, usize),
    kernel: (usize, usize),
    fft: Fft2,
}

impl Correlator {
    pub fn new(image: (usize, usize), kernel: (usize, usize)) -> Self {
        let p0 = next_fast_len(image.0 + kernel.0 - 1);
        let p1 = next_fast_len(image.1 + kernel.1 - 1);
        Self {
            image,
            kernel,
            fft: Fft2::new(p0, p1),
        }
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        self.fft.shape()
    }

    fn padded<T: Copy>(&self, a: &ArrayView2<T>, f: impl Fn(T) -> Complex64) -> Array2<Complex64> {
        let mut out = Array2::zeros(self.fft.shape());
        for ((i, j), v) in a.indexed_iter() {
            out[[i, j]] = f(*v);
        }
        out
    }

    pub fn image_spectrum(&self, f: &ArrayView2<f64>) -> Array2<Complex64> {
        assert_eq!(f.dim(), self.image, "image shape mismatch");
        let mut a = self.padded(f, |v| Complex64::new(v, 0.0));
        self.fft.forward(&mut a);
        a
    }

    pub fn image_spectrum_complex(&self, f: &ArrayView2<Complex64>) -> Array2<Complex64> {
        assert_eq!(f.dim(), self.image, "image shape mismatch");
        let mut a = self.padded(f, |v| v);
        self.fft.forward(&mut a);
        a
    }

    /// Spectrum of the flipped kernel, so that products with image spectra
    /// become correlations.
    pub fn kernel_spectrum<T: Copy>(&self, k: &ArrayView2<T>, to_c: impl Fn(T) -> Complex64) -> Array2<Complex64> {
        assert_eq!(k.dim(), self.kernel, "kernel shape mismatch");
        let (k0, k1) = self.kernel;
        let mut a = Array2::zeros(self.fft.shape());
        for ((i, j), v) in k.indexed_iter() {
            a[[k0 - 1 - i, k1 - 1 - j]] = to_c(*v);
        }
        self.fft.forward(&mut a);
        a
    }

    /// Inverse-transform a product of spectra and crop to the image domain.
    pub fn finish(&self, mut prod: Array2<Complex64>) -> Array2<Complex64> {
        self.fft.inverse(&mut prod);
        let (k0, k1) = self.kernel;
        let o0 = k0 - 1 - k0 / 2;
        let o1 = k1 - 1 - k1 / 2;
        let (n0, n1) = self.image;
        Array2::from_shape_fn((n0, n1), |(i, j)| prod[[i + o0, j + o1]])
    }

    /// Plain inverse transform on the padded grid, no cropping.
    pub fn inverse(&self, mut spec: Array2<Complex64>) -> Array2<Complex64> {
        self.fft.inverse(&mut spec);
        spec
    }

    pub fn correlate(&self, image_spec: &Array2<Complex64>, kernel_spec: &Array2<Complex64>) -> Array2<Complex64> {
        self.finish(image_spec * kernel_spec)
    }
}

/// Real "same"-size correlation.
pub fn correlate_real(f: &ArrayView2<f64>, k: &ArrayView2<f64>) -> Array2<f64> {
    let c = Correlator::new(f.dim(), k.dim());
    let out = c.correlate(&c.image_spectrum(f), &c.kernel_spectrum(k, |v| Complex64::new(v, 0.0)));
    out.mapv(|z| z.re)
}

/// Real image correlated with a complex kernel.
pub fn correlate_complex(f: &ArrayView2<f64>, k: &ArrayView2<Complex64>) -> Array2<Complex64> {
    let c = Correlator::new(f.dim(), k.dim());
    c.correlate(&c.image_spectrum(f), &c.kernel_spectrum(k, |v| v))
}

/// Direct-summation reference for [`correlate_real`].
pub fn correlate_direct(f: &ArrayView2<f64>, k: &ArrayView2<f64>) -> Array2<f64> {
    let (n0, n1) = f.dim();
    let (k0, k1) = k.dim();
    let (c0, c1) = ((k0 / 2) as i64, (k1 / 2) as i64);
    Array2::from_shape_fn((n0, n1), |(x, y)| {
        let mut s = 0.0;
        for ((i, j), kv) in k.indexed_iter() {
            let px = x as i64 + i as i64 - c0;
            let py = y as i64 + j as i64 - c1;
            if px >= 0 && py >= 0 && (px as usize) < n0 && (py as usize) < n1 {
                s += kv * f[[px as usize, py as usize]];
            }
        }
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fast_lengths() {
        assert_eq!(next_fast_len(1), 1);
        assert_eq!(next_fast_len(7), 8);
        assert_eq!(next_fast_len(61), 64);
        assert_eq!(next_fast_len(101), 108);
        assert_eq!(next_fast_len(125), 125);
    }

    #[test]
    fn fft_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((6, 10), |_| Complex64::new(rng.random(), rng.random()));
        let fft = Fft2::new(6, 10);
        let mut b = a.clone();
        fft.forward(&mut b);
        // DC bin is the plain sum.
        let s: Complex64 = a.iter().sum();
        assert!((b[[0, 0]] - s).norm() < 1e-12);
        fft.inverse(&mut b);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn correlation_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (img, ker) in [((9, 7), (3, 5)), ((12, 12), (5, 5)), ((8, 11), (4, 6)), ((5, 5), (7, 9))] {
            let f = Array2::from_shape_fn(img, |_| rng.random_range(-1.0..1.0));
            let k = Array2::from_shape_fn(ker, |_| rng.random_range(-1.0..1.0));
            let a = correlate_real(&f.view(), &k.view());
            let b = correlate_direct(&f.view(), &k.view());
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12, "{img:?} {ker:?}");
            }
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Array2::from_shape_fn((10, 8), |_| rng.random_range(-1.0..1.0));
        let mut k = Array2::zeros((5, 5));
        k[[2, 2]] = 1.0;
        let a = correlate_real(&f.view(), &k.view());
        for (x, y) in a.iter().zip(f.iter()) {
            assert!((x - y).abs() < 1e-13);
        }
    }
}
