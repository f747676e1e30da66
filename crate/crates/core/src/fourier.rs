//! 2-D discrete Fourier transforms (full and real-input halves) and the
//! adjoints needed to backpropagate through them.
//!
//! Conventions: forward transforms are unnormalized with kernel
//! `e^{-2πi(uh/H + vw/W)}`; inverses carry the `1/(HW)` factor. Gradients of
//! complex quantities are represented as `∂L/∂Re + i·∂L/∂Im`.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rustfft::{num_complex::Complex64, Fft, FftPlanner};

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Unnormalized 1-D transform of every lane along `axis`, in place.
fn fft_axis(a: &mut Array2<Complex64>, axis: usize, inverse: bool) {
    let n = a.len_of(Axis(axis));
    if n == 0 {
        return;
    }
    let fft = plan(n, inverse);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for mut lane in a.lanes_mut(Axis(axis)) {
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        fft.process(&mut buf);
        for (v, b) in lane.iter_mut().zip(buf.iter()) {
            *v = *b;
        }
    }
}

/// Unnormalized 2-D complex transform.
pub fn fft2_complex(x: ArrayView2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let mut a = x.to_owned();
    fft_axis(&mut a, 1, inverse);
    fft_axis(&mut a, 0, inverse);
    a
}

pub fn to_complex(x: ArrayView2<f64>) -> Array2<Complex64> {
    x.mapv(|v| Complex64::new(v, 0.0))
}

/// Full 2-D DFT of a real image.
pub fn dft2(image: ArrayView2<f64>) -> Array2<Complex64> {
    fft2_complex(to_complex(image).view(), false)
}

/// Inverse of [`dft2`], including the `1/(HW)` factor.
pub fn idft2(spectrum: ArrayView2<Complex64>) -> Array2<Complex64> {
    let n = spectrum.len() as f64;
    fft2_complex(spectrum, true).mapv(|c| c / n)
}

fn check_even(w: usize) -> Result<()> {
    if w < 2 || !w.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "real FFT needs an even width of at least 2, got {w}"
        )));
    }
    Ok(())
}

/// Non-negative horizontal frequencies of the 2-D DFT: `[H × (W/2+1)]`.
pub fn rfft2(image: ArrayView2<f64>) -> Result<Array2<Complex64>> {
    let (h, w) = image.dim();
    if h < 1 {
        return Err(Error::Shape("empty image".into()));
    }
    check_even(w)?;
    let full = dft2(image);
    Ok(full.slice(ndarray::s![.., ..w / 2 + 1]).to_owned())
}

/// Real image from a half spectrum. The imaginary parts of the zero and
/// Nyquist columns are ignored, matching the usual `irfftn` behaviour.
pub fn irfft2(half: ArrayView2<Complex64>, h: usize, w: usize) -> Result<Array2<f64>> {
    check_even(w)?;
    if half.dim() != (h, w / 2 + 1) {
        return Err(Error::Shape(format!(
            "half spectrum is {:?}, expected {:?}",
            half.dim(),
            (h, w / 2 + 1)
        )));
    }
    // inverse along rows of the half spectrum (axis 0, complex)
    let mut y = half.to_owned();
    fft_axis(&mut y, 0, true);
    y.mapv_inplace(|c| c / h as f64);

    let nyq = w / 2;
    let mut full = Array2::<Complex64>::zeros((h, w));
    for r in 0..h {
        full[[r, 0]] = Complex64::new(y[[r, 0]].re, 0.0);
        full[[r, nyq]] = Complex64::new(y[[r, nyq]].re, 0.0);
        for k in 1..nyq {
            full[[r, k]] = y[[r, k]];
            full[[r, w - k]] = y[[r, k]].conj();
        }
    }
    fft_axis(&mut full, 1, true);
    Ok(full.mapv(|c| c.re / w as f64))
}

/// Gradient w.r.t. the image of `L(rfft2(image))` given `∂L/∂rfft2`.
pub fn rfft2_adjoint(grad: ArrayView2<Complex64>, w: usize) -> Array2<f64> {
    let h = grad.nrows();
    let mut padded = Array2::<Complex64>::zeros((h, w));
    padded
        .slice_mut(ndarray::s![.., ..grad.ncols()])
        .assign(&grad);
    fft2_complex(padded.view(), true).mapv(|c| c.re)
}

/// Gradient w.r.t. the half spectrum of `L(irfft2(half))` given `∂L/∂image`.
pub fn irfft2_adjoint(grad: ArrayView2<f64>) -> Array2<Complex64> {
    let (h, w) = grad.dim();
    let nyq = w / 2;
    let mut g = to_complex(grad);
    fft_axis(&mut g, 1, false);
    let mut half = Array2::<Complex64>::zeros((h, nyq + 1));
    for r in 0..h {
        half[[r, 0]] = Complex64::new(g[[r, 0]].re / w as f64, 0.0);
        half[[r, nyq]] = Complex64::new(g[[r, nyq]].re / w as f64, 0.0);
        for k in 1..nyq {
            half[[r, k]] = g[[r, k]] * (2.0 / w as f64);
        }
    }
    fft_axis(&mut half, 0, false);
    half.mapv(|c| c / h as f64)
}

/// Moves the zero frequency to `(⌊H/2⌋, ⌊W/2⌋)`.
pub fn fftshift<T: Clone>(a: ArrayView2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    let (sh, sw) = (h / 2, w / 2);
    Array2::from_shape_fn((h, w), |(i, j)| {
        a[[(i + h - sh) % h, (j + w - sw) % w]].clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn random(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0))
    }

    fn brute_dft(x: &Array2<f64>) -> Array2<Complex64> {
        let (h, w) = x.dim();
        Array2::from_shape_fn((h, w), |(u, v)| {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..h {
                for b in 0..w {
                    let th = -TAU * ((u * a) as f64 / h as f64 + (v * b) as f64 / w as f64);
                    acc += x[[a, b]] * Complex64::new(th.cos(), th.sin());
                }
            }
            acc
        })
    }

    #[test]
    fn dft_matches_double_sum() {
        for (h, w) in [(4, 4), (3, 5), (8, 6)] {
            let x = random(h, w, 3);
            let diff = (&dft2(x.view()) - &brute_dft(&x)).mapv(|c| c.norm());
            assert!(diff.iter().all(|&d| d < 1e-10));
        }
    }

    #[test]
    fn constant_and_delta() {
        let c = Array2::from_elem((4, 6), 2.5);
        let f = dft2(c.view());
        assert!((f[[0, 0]].re - 60.0).abs() < 1e-12);
        assert!(f.iter().skip(1).all(|v| v.norm() < 1e-12));
        let mut d = Array2::zeros((4, 4));
        d[[0, 0]] = 1.0;
        assert!(dft2(d.view()).iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn rfft_roundtrip() {
        let x = random(8, 8, 1);
        let back = irfft2(rfft2(x.view()).unwrap().view(), 8, 8).unwrap();
        assert!((&back - &x).iter().all(|d| d.abs() < 1e-10));
        assert!(rfft2(random(4, 5, 0).view()).is_err());
    }

    #[test]
    fn adjoints() {
        let x = random(6, 8, 11);
        let g = rfft2(random(6, 8, 12).view()).unwrap();
        // <rfft2 x, g>_R = <x, rfft2ᵀ g>
        let f = rfft2(x.view()).unwrap();
        let lhs: f64 = f.iter().zip(g.iter()).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        let rhs = (&x * &rfft2_adjoint(g.view(), 8)).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let gi = random(6, 8, 13);
        let xi = irfft2(g.view(), 6, 8).unwrap();
        let lhs = (&xi * &gi).sum();
        let adj = irfft2_adjoint(gi.view());
        let rhs: f64 = g.iter().zip(adj.iter()).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn shift_centers_dc() {
        let a = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64);
        let s = fftshift(a.view());
        assert_eq!(s[[2, 2]], 0.0);
    }
}
