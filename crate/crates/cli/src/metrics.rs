//! Fusion quality metrics on 8-bit quantized images.

use std::fmt;

use tcmoa_core::autodiff::{Tape, Tensor};
use tcmoa_core::losses::ssim;
use tcmoa_core::ppm::{quantize, quantized};

/// Returned when two images disagree in shape.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("shape {found:?} does not match {expected:?}")]
pub struct ShapeMismatch {
    pub expected: Vec<usize>,
    pub found: Vec<usize>,
}

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    /// Entropy of the gray histogram, bits.
    pub en: f64,
    /// Against the reference, or the source mean without one.
    pub psnr: f64,
    /// Standard deviation of gray levels (0..255 scale).
    pub sd: f64,
    pub ssim: f64,
    /// Mutual information with each source, summed, bits.
    pub mi: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "en\tpsnr\tsd\tssim\tmi";

    pub fn tsv(&self) -> String {
        format!("{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", self.en, self.psnr, self.sd, self.ssim, self.mi)
    }
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "en={:.6}\npsnr={:.6}\nsd={:.6}\nssim={:.6}\nmi={:.6}", self.en, self.psnr, self.sd, self.ssim, self.mi)
    }
}

/// Gray levels: channel mean of the image, quantized to a byte.
pub fn gray_levels(image: &Tensor) -> Vec<u8> {
    let c = *image.shape().last().unwrap_or(&1);
    image.data().chunks_exact(c).map(|px| quantize(px.iter().sum::<f64>() / c as f64)).collect()
}

fn histogram(levels: &[u8]) -> [f64; 256] {
    let mut h = [0.0; 256];
    for &v in levels {
        h[v as usize] += 1.0;
    }
    let n = levels.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

fn plogp_sum(probs: impl Iterator<Item = f64>) -> f64 {
    -probs.filter(|&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>()
}

pub fn entropy(levels: &[u8]) -> f64 {
    plogp_sum(histogram(levels).into_iter())
}

pub fn mutual_information(a: &[u8], b: &[u8]) -> f64 {
    let mut joint = vec![0.0; 256 * 256];
    for (&u, &v) in a.iter().zip(b) {
        joint[u as usize * 256 + v as usize] += 1.0;
    }
    let n = a.len() as f64;
    let hj = plogp_sum(joint.iter().map(|c| c / n));
    entropy(a) + entropy(b) - hj
}

pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn ssim_of(a: &Tensor, b: &Tensor) -> f64 {
    let tape = Tape::new();
    ssim(tape.constant(a.clone()), tape.constant(b.clone())).map(|v| v.item()).unwrap_or(f64::NAN)
}

fn check(expected: &Tensor, found: &Tensor) -> Result<(), ShapeMismatch> {
    if expected.shape() == found.shape() {
        Ok(())
    } else {
        Err(ShapeMismatch { expected: expected.shape().to_vec(), found: found.shape().to_vec() })
    }
}

/// All metrics are taken on byte-quantized copies so that values are the
/// same before and after a PPM round trip.
pub fn compute_metrics(fused: &Tensor, x: &Tensor, y: &Tensor, reference: Option<&Tensor>) -> Result<MetricsRow, ShapeMismatch> {
    check(fused, x)?;
    check(fused, y)?;
    if let Some(r) = reference {
        check(fused, r)?;
    }
    let (f, qx, qy) = (quantized(fused), quantized(x), quantized(y));
    let gf = gray_levels(&f);
    let mean = gf.iter().map(|&v| v as f64).sum::<f64>() / gf.len() as f64;
    let sd = (gf.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / gf.len() as f64).sqrt();
    let (psnr_v, ssim_v) = match reference {
        Some(r) => {
            let r = quantized(r);
            (psnr(&f, &r), ssim_of(&f, &r))
        }
        None => {
            let avg = Tensor::from_fn(qx.shape().to_vec(), |i| 0.5 * (qx.data()[i] + qy.data()[i]));
            (psnr(&f, &avg), 0.5 * (ssim_of(&f, &qx) + ssim_of(&f, &qy)))
        }
    };
    Ok(MetricsRow {
        en: entropy(&gf),
        psnr: psnr_v,
        sd,
        ssim: ssim_v,
        mi: mutual_information(&gf, &gray_levels(&qx)) + mutual_information(&gf, &gray_levels(&qy)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor {
        Tensor::from_fn(vec![16, 16, 3], |i| ((i / 3) % 97) as f64 / 96.0)
    }

    #[test]
    fn constant_image_has_no_entropy_or_spread() {
        let c = Tensor::full(vec![8, 8, 3], 0.3);
        let m = compute_metrics(&c, &c, &c, None).unwrap();
        assert_eq!(m.en, 0.0);
        assert_eq!(m.sd, 0.0);
    }

    #[test]
    fn identical_images_hit_the_psnr_cap() {
        let a = ramp();
        assert_eq!(psnr(&a, &a), PSNR_CAP);
        let m = compute_metrics(&a, &a, &a, Some(&a)).unwrap();
        assert_eq!(m.psnr, PSNR_CAP);
        assert!((m.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_information_equals_entropy() {
        let g = gray_levels(&ramp());
        assert!((mutual_information(&g, &g) - entropy(&g)).abs() < 1e-9);
        let m = compute_metrics(&ramp(), &ramp(), &ramp(), None).unwrap();
        assert!((m.mi - 2.0 * m.en).abs() < 1e-9);
        assert!(m.en > 0.0 && m.en <= 8.0);
    }

    #[test]
    fn uniform_bytes_have_eight_bits() {
        let levels: Vec<u8> = (0..=255).collect();
        assert!((entropy(&levels) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_known_error() {
        let a = Tensor::zeros(vec![2, 2, 3]);
        let b = Tensor::full(vec![2, 2, 3], 0.1);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = Tensor::zeros(vec![4, 4, 3]);
        let b = Tensor::zeros(vec![4, 5, 3]);
        assert!(compute_metrics(&a, &b, &a, None).is_err());
    }
}
