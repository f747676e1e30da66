//! Power-spectrum-slope analysis: centered power spectra, radial averaging,
//! log–log power-law fits and per-modality statistics, plus readers that turn
//! series, images and text into comparable grayscale images.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, STD_FLOOR};
use crate::error::{Error, Result};
use crate::fourier::{dft2, fftshift, idft2};
use crate::pgm;
use crate::rendering::{fold_to_grid, pad_left_replicate, resize_bilinear, RenderSpec};

pub const DEFAULT_F_LO: f64 = 0.05;
pub const DEFAULT_F_HI: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct PowerSpectrum2D {
    /// `|X|²` with the zero frequency at `(⌊H/2⌋, ⌊W/2⌋)`.
    pub power: Array2<f64>,
}

impl PowerSpectrum2D {
    pub fn dim(&self) -> (usize, usize) {
        self.power.dim()
    }
}

pub fn power_centered(image: ArrayView2<f64>) -> PowerSpectrum2D {
    let spec = dft2(image);
    PowerSpectrum2D {
        power: fftshift(spec.mapv(|c| c.norm_sqr()).view()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadialSpectrum {
    /// Bin index over `R_max`, one entry per non-empty bin.
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
    pub counts: Vec<usize>,
    pub r_max: f64,
}

/// Means of the centered power over annuli `⌊r⌋ = k`.
pub fn radial_average(ps: &PowerSpectrum2D) -> RadialSpectrum {
    let (h, w) = ps.dim();
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let r_max = ((h as f64 / 2.0).powi(2) + (w as f64 / 2.0).powi(2)).sqrt();
    let k_max = r_max.floor() as usize + 1;
    let mut sums = vec![0.0; k_max + 1];
    let mut counts = vec![0usize; k_max + 1];
    for ((u, v), &p) in ps.power.indexed_iter() {
        let r = ((u as f64 - ch).powi(2) + (v as f64 - cw).powi(2)).sqrt();
        let k = r.floor() as usize;
        sums[k] += p;
        counts[k] += 1;
    }
    let mut out = RadialSpectrum {
        freqs: Vec::new(),
        power: Vec::new(),
        counts: Vec::new(),
        r_max,
    };
    for (k, (&s, &n)) in sums.iter().zip(&counts).enumerate() {
        if n > 0 {
            out.freqs.push(k as f64 / r_max);
            out.power.push(s / n as f64);
            out.counts.push(n);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub f_lo: f64,
    pub f_hi: f64,
    pub n_points: usize,
}

/// OLS of `log P = −α log f + C` over bins with `f_lo < f < f_hi` and
/// positive power.
pub fn fit_power_law(rs: &RadialSpectrum, f_lo: f64, f_hi: f64) -> Result<PowerLawFit> {
    let pts: Vec<(f64, f64)> = rs
        .freqs
        .iter()
        .zip(&rs.power)
        .filter(|(&f, &p)| f > f_lo && f < f_hi && p > 0.0)
        .map(|(&f, &p)| (f.ln(), p.ln()))
        .collect();
    let n = pts.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "{n} usable radial bins in ({f_lo}, {f_hi}); need 2"
        )));
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(PowerLawFit {
        alpha: -slope,
        intercept,
        r_squared,
        f_lo,
        f_hi,
        n_points: n,
    })
}

pub fn pss_of_image(image: ArrayView2<f64>, f_lo: f64, f_hi: f64) -> Result<PowerLawFit> {
    fit_power_law(&radial_average(&power_centered(image)), f_lo, f_hi)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalityStats {
    pub alphas: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (`N − 1`).
    pub std: f64,
    pub n: usize,
}

impl ModalityStats {
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        let n = alphas.len();
        if n < 2 {
            return Err(Error::InsufficientData(format!(
                "{n} samples; a standard deviation needs 2"
            )));
        }
        let mean = alphas.iter().sum::<f64>() / n as f64;
        let var = alphas.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok(ModalityStats {
            alphas,
            mean,
            std: var.sqrt(),
            n,
        })
    }
}

fn synth_power_law_complex(alpha: f64, h: usize, w: usize, seed: u64) -> Array2<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Array2::from_shape_fn((h, w), |_| rng.sample::<f64, _>(StandardNormal));
    // phases of real white noise are uniform and conjugate-symmetric
    let spec = dft2(noise.view());
    let r_max = ((h as f64 / 2.0).powi(2) + (w as f64 / 2.0).powi(2)).sqrt();
    let signed = |i: usize, n: usize| -> f64 {
        if i <= n / 2 {
            i as f64
        } else {
            i as f64 - n as f64
        }
    };
    let shaped = Array2::from_shape_fn((h, w), |(u, v)| {
        let c = spec[[u, v]];
        let r = (signed(u, h).powi(2) + signed(v, w).powi(2)).sqrt();
        if r == 0.0 || c.norm() == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            c / c.norm() * (r / r_max).powf(-alpha / 2.0)
        }
    });
    idft2(shaped.view())
}

/// Real image whose Fourier magnitude is `(r/R_max)^{−α/2}` (zero at DC) with
/// the phases of a seeded white-noise field.
pub fn synth_power_law_image(alpha: f64, h: usize, w: usize, seed: u64) -> Array2<f64> {
    synth_power_law_complex(alpha, h, w, seed).mapv(|c| c.re)
}

/// Largest imaginary part discarded by [`synth_power_law_image`].
pub fn synth_imaginary_residue(alpha: f64, h: usize, w: usize, seed: u64) -> f64 {
    synth_power_law_complex(alpha, h, w, seed)
        .iter()
        .map(|c| c.im.abs())
        .fold(0.0, f64::max)
}

/// Zero-mean, unit-variance copy (σ floored).
pub fn zscore(img: ArrayView2<f64>) -> Array2<f64> {
    let n = img.len() as f64;
    let mean = img.sum() / n;
    let sd = (img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(STD_FLOOR);
    img.mapv(|v| (v - mean) / sd)
}

/// Printable ASCII mapped by `(code − 32)/94`, tiled or truncated to `h·w`
/// and laid out row-major.
pub fn ascii_text_to_image(text: &str, h: usize, w: usize) -> Result<Array2<f64>> {
    let codes: Vec<f64> = text
        .chars()
        .map(|c| ((c as u32).clamp(32, 126) - 32) as f64 / 94.0)
        .collect();
    if codes.is_empty() {
        return Err(Error::InsufficientData("empty text".into()));
    }
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        codes[(i * w + j) % codes.len()]
    }))
}

/// Loads a P2/P5 graymap, resizes to `size × size` and z-scores it.
pub fn load_grayscale_image(path: impl AsRef<Path>, size: usize) -> Result<Array2<f64>> {
    let (raw, _) = pgm::read_pgm(path)?;
    let resized = resize_bilinear(raw.view(), size, size);
    Ok(zscore(resized.view()))
}

/// The image a rendered look-back contributes to the spectral analysis:
/// the folded grid resized to the full image size.
pub fn series_pss_image(context: &[f64], spec: &RenderSpec) -> Result<Array2<f64>> {
    let padded = pad_left_replicate(context, spec.periodicity);
    let grid = fold_to_grid(&padded, spec.periodicity)?;
    Ok(resize_bilinear(
        grid.view(),
        spec.image_height,
        spec.image_width,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesSample {
    pub start: usize,
    pub variable: usize,
    pub fit: PowerLawFit,
}

/// PSS over `n_samples` random (start, variable) look-backs of length
/// `lookback`, each z-scored and rendered.
pub fn pss_of_series(
    ds: &Dataset,
    spec: &RenderSpec,
    n_samples: usize,
    lookback: usize,
    band: (f64, f64),
    seed: u64,
) -> Result<(ModalityStats, Vec<SeriesSample>)> {
    spec.validate()?;
    if lookback == 0 || ds.len() < lookback {
        return Err(Error::InsufficientData(format!(
            "dataset has {} steps, look-back is {lookback}",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let start = rng.random_range(0..=ds.len() - lookback);
        let variable = rng.random_range(0..ds.n_vars());
        let col: Vec<f64> = ds
            .values
            .column(variable)
            .iter()
            .skip(start)
            .take(lookback)
            .copied()
            .collect();
        let z = zscore(ndarray::ArrayView2::from_shape((1, lookback), &col).expect("1×T view"));
        let img = series_pss_image(z.as_slice().expect("contiguous"), spec)?;
        let fit = pss_of_image(img.view(), band.0, band.1)?;
        samples.push(SeriesSample {
            start,
            variable,
            fit,
        });
    }
    let stats = ModalityStats::from_alphas(samples.iter().map(|s| s.fit.alpha).collect())?;
    Ok((stats, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn centered_power_examples() {
        let c = Array2::from_elem((4, 6), 1.0);
        let ps = power_centered(c.view());
        assert!((ps.power[[2, 3]] - 576.0).abs() < 1e-9);
        assert_eq!(ps.power.iter().filter(|&&p| p > 1e-9).count(), 1);

        let d = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(power_centered(d.view()).power.iter().all(|&p| (p - 1.0).abs() < 1e-15));
    }

    #[test]
    fn point_symmetry_for_real_input() {
        let img = synth_power_law_image(1.3, 8, 8, 2) + 0.3;
        let p = power_centered(img.view()).power;
        for u in 1..8 {
            for v in 1..8 {
                let (a, b) = (p[[u, v]], p[[8 - u, 8 - v]]);
                assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-12));
            }
        }
    }

    #[test]
    fn constant_power_bins() {
        let ps = PowerSpectrum2D {
            power: Array2::from_elem((6, 6), 3.0),
        };
        let rs = radial_average(&ps);
        assert!(rs.power.iter().all(|&p| p == 3.0));
        assert_eq!(rs.counts.iter().sum::<usize>(), 36);
        assert!(rs.freqs.windows(2).all(|w| w[0] < w[1]));
    }

    fn radial_from(mut f: impl FnMut(f64) -> f64) -> RadialSpectrum {
        let freqs: Vec<f64> = (1..200).map(|k| k as f64 / 200.0).collect();
        RadialSpectrum {
            power: freqs.iter().map(|&x| f(x)).collect(),
            counts: vec![1; freqs.len()],
            freqs,
            r_max: 200.0,
        }
    }

    #[test]
    fn exact_power_laws() {
        let fit = fit_power_law(&radial_from(|f| f.powf(-2.0)), 0.05, 0.5).unwrap();
        assert!((fit.alpha - 2.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        let fit = fit_power_law(&radial_from(|_| 4.2), 0.05, 0.5).unwrap();
        assert!(fit.alpha.abs() < 1e-12);
    }

    #[test]
    fn noisy_power_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rs = radial_from(|f| f.powf(-1.5) * (1.0 + 0.01 * rng.random_range(-1.0..1.0)));
        let fit = fit_power_law(&rs, 0.05, 0.5).unwrap();
        assert!((fit.alpha - 1.5).abs() < 0.05);
    }

    #[test]
    fn too_few_points() {
        let rs = radial_from(|f| if f < 0.3 { 0.0 } else { 1.0 });
        // zero-power bins are dropped, leaving only f = 0.3 below 0.303
        assert!(fit_power_law(&rs, 0.05, 0.303).is_err());
        let fit = fit_power_law(&rs, 0.05, 0.5).unwrap();
        assert!(fit.n_points >= 2);
    }

    #[test]
    fn synth_flat_and_seeded() {
        let a = synth_power_law_image(0.0, 64, 64, 9);
        let fit = pss_of_image(a.view(), DEFAULT_F_LO, DEFAULT_F_HI).unwrap();
        assert!(fit.alpha.abs() < 0.05);
        assert_eq!(a, synth_power_law_image(0.0, 64, 64, 9));
        assert!(synth_imaginary_residue(2.0, 32, 32, 1) < 1e-9);
    }

    #[test]
    fn ascii_mapping() {
        let z = ascii_text_to_image("     ", 3, 3).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let o = ascii_text_to_image("~~", 2, 2).unwrap();
        assert!(o.iter().all(|&v| v == 1.0));
        let ab = ascii_text_to_image("ab", 2, 2).unwrap();
        let (a, b) = (65.0 / 94.0, 66.0 / 94.0);
        assert_eq!(ab, array![[a, b], [a, b]]);
        assert!(ascii_text_to_image("", 2, 2).is_err());
    }

    #[test]
    fn grayscale_loader() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.pgm");
        std::fs::write(&p, b"P5\n4 4\n255\n".iter().chain(&[7u8; 16]).copied().collect::<Vec<_>>()).unwrap();
        let img = load_grayscale_image(&p, 8).unwrap();
        assert_eq!(img.dim(), (8, 8));
        assert!(img.iter().all(|&v| v == 0.0));
        let q = dir.path().join("q.ppm");
        std::fs::write(&q, "P3\n1 1\n255\n1 2 3\n").unwrap();
        assert!(load_grayscale_image(&q, 8).is_err());
    }

    #[test]
    fn modality_stats() {
        let s = ModalityStats::from_alphas(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert!(ModalityStats::from_alphas(vec![1.0]).is_err());
    }
}
