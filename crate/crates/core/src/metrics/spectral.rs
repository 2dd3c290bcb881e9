//! Frequency-domain probe of decoder feature maps: DFT of the central
//! spatial row, channel-averaged magnitude per frequency bin, log-scaled.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Log-magnitude response of a `[C, H, W]` feature map along its central row
/// (`H/2`): per channel, the DFT of the row; magnitudes averaged over
/// channels for bins `0..=W/2`; scaled as `ln(1 + m)`.
pub fn spectral_response(feature: &Tensor) -> Result<Vec<f64>> {
    const OP: &str = "spectral_response";
    let shape = feature.shape();
    if shape.len() != 3 {
        return Err(Error::shape(OP, "[C, H, W]", format!("{shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h < 2 {
        return Err(Error::invalid(OP, format!("need H >= 2 for a central row, got {h}")));
    }

    let row = h / 2;
    let bins = w / 2 + 1;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(w);

    let mut mean_mag = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); w];
    for ch in 0..c {
        let base = ch * h * w + row * w;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(feature.data()[base + i], 0.0);
        }
        fft.process(&mut buf);
        for (k, m) in mean_mag.iter_mut().enumerate() {
            *m += buf[k].norm() / c as f64;
        }
    }
    Ok(mean_mag.into_iter().map(|m| (1.0 + m).ln()).collect())
}

/// Mean response over the upper quartile of frequency bins — the summary
/// statistic used to compare configurations.
pub fn upper_quartile_mean(response: &[f64]) -> f64 {
    let start = (response.len() * 3) / 4;
    let tail = &response[start.min(response.len() - 1)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, uniform_vec};
    use std::f64::consts::PI;

    /// Direct DFT-summation oracle, independent of rustfft.
    fn direct_response(feature: &Tensor) -> Vec<f64> {
        let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
        let row = h / 2;
        let bins = w / 2 + 1;
        let mut out = vec![0.0; bins];
        for k in 0..bins {
            let mut mag_sum = 0.0;
            for ch in 0..c {
                let base = ch * h * w + row * w;
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..w {
                    let angle = -2.0 * PI * (k * n) as f64 / w as f64;
                    let v = feature.data()[base + n];
                    re += v * angle.cos();
                    im += v * angle.sin();
                }
                mag_sum += (re * re + im * im).sqrt();
            }
            out[k] = (1.0 + mag_sum / c as f64).ln();
        }
        out
    }

    #[test]
    fn constant_row_concentrates_in_dc_bin() {
        let t = Tensor::full(&[3, 4, 8], 0.5);
        let r = spectral_response(&t).unwrap();
        assert_eq!(r.len(), 5);
        assert!((r[0] - (1.0f64 + 0.5 * 8.0).ln()).abs() < 1e-12);
        for &v in &r[1..] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_row_is_flat() {
        let mut t = Tensor::zeros(&[1, 2, 8]);
        // Central row of H=2 is row 1; impulse at its first pixel.
        t.data_mut()[8] = 1.0;
        let r = spectral_response(&t).unwrap();
        for &v in &r {
            assert!((v - (2.0f64).ln()).abs() < 1e-12); // ln(1 + 1)
        }
    }

    #[test]
    fn sinusoid_peaks_at_its_bin() {
        let w = 16usize;
        let k0 = 3usize;
        let mut t = Tensor::zeros(&[1, 4, w]);
        for n in 0..w {
            t.data_mut()[2 * w + n] = (2.0 * PI * (k0 * n) as f64 / w as f64).cos();
        }
        let r = spectral_response(&t).unwrap();
        let peak = r
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, k0);
        // cos at bin k0 has |X[k0]| = W/2.
        assert!((r[k0] - (1.0 + w as f64 / 2.0).ln()).abs() < 1e-9);
    }

    #[test]
    fn matches_direct_dft_summation() {
        let mut rng = rng_from_seed(5);
        for &(c, h, w) in &[(1usize, 2usize, 4usize), (3, 8, 16), (8, 32, 32)] {
            let t = Tensor::new(vec![c, h, w], uniform_vec(&mut rng, c * h * w, -1.0, 1.0)).unwrap();
            let fast = spectral_response(&t).unwrap();
            let slow = direct_response(&t);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_row_height_is_rejected() {
        let t = Tensor::zeros(&[1, 1, 8]);
        assert!(spectral_response(&t).is_err());
    }
}
