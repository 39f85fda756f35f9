//! Scalar GAN objectives over discriminator score grids and images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Clamp applied to discriminator probabilities before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// Log-likelihood form with a non-saturating generator term.
    #[default]
    CrossEntropy,
    /// Squared distance of the scores to 1 (real) and 0 (fake).
    LeastSquares,
}

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

fn check_grid(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid(format!("{name} score grid is empty")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("{name} score grid contains a non-finite value")));
    }
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// `(loss_D, loss_G)` for a conditional discriminator's scores on real and
/// generated pairs.
pub fn pix2pix_gan_loss(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    adversarial_loss(d_real, d_fake, AdversarialMode::CrossEntropy)
}

/// Same objective for an unconditional discriminator, with a least-squares
/// alternative.
pub fn cycle_gan_loss(dy_real: &[f64], dy_fake: &[f64], mode: AdversarialMode) -> Result<(f64, f64)> {
    adversarial_loss(dy_real, dy_fake, mode)
}

fn adversarial_loss(real: &[f64], fake: &[f64], mode: AdversarialMode) -> Result<(f64, f64)> {
    check_grid("real", real)?;
    check_grid("fake", fake)?;
    let (nr, nf) = (real.len(), fake.len());
    Ok(match mode {
        AdversarialMode::CrossEntropy => {
            let d = -mean(real.iter().map(|&p| clamp(p).ln()), nr) - mean(fake.iter().map(|&p| (1.0 - clamp(p)).ln()), nf);
            let g = -mean(fake.iter().map(|&p| clamp(p).ln()), nf);
            (d, g)
        }
        AdversarialMode::LeastSquares => {
            let d = mean(real.iter().map(|p| (p - 1.0).powi(2)), nr) + mean(fake.iter().map(|p| p * p), nf);
            let g = mean(fake.iter().map(|p| (p - 1.0).powi(2)), nf);
            (d, g)
        }
    })
}

fn mean_abs_diff(a: &Tensor, b: &Tensor, what: &str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::invalid(format!("{what}: empty images")));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Mean absolute pixel difference on `[-1, 1]` images.
pub fn pix2pix_l1_loss(target: &Tensor, generated: &Tensor) -> Result<f64> {
    mean_abs_diff(target, generated, "l1 loss")
}

pub fn pix2pix_total_loss(adv_g: f64, l1: f64, lambda: f64) -> f64 {
    adv_g + lambda * l1
}

/// `mean|F(G(x)) - x| + mean|G(F(y)) - y|`
pub fn cycle_consistency_loss(x: &Tensor, fgx: &Tensor, y: &Tensor, gfy: &Tensor) -> Result<f64> {
    Ok(mean_abs_diff(fgx, x, "cycle loss (x)")? + mean_abs_diff(gfy, y, "cycle loss (y)")?)
}

pub fn cycle_total_objective(adv_g: f64, adv_f: f64, cyc: f64, lambda: f64) -> f64 {
    adv_g + adv_f + lambda * cyc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn adversarial_hand_values() {
        let (d, g) = pix2pix_gan_loss(&[0.5; 4], &[0.5; 4]).unwrap();
        assert_abs_diff_eq!(d, 2.0 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(g, 2f64.ln(), epsilon = 1e-12);
        let (d, _) = pix2pix_gan_loss(&[0.8], &[0.3]).unwrap();
        assert_abs_diff_eq!(d, -(0.8f64.ln() + 0.7f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(d, 0.5798, epsilon = 1e-4);
        let (d, _) = cycle_gan_loss(&[0.9], &[0.4], AdversarialMode::CrossEntropy).unwrap();
        assert_abs_diff_eq!(d, 0.6162, epsilon = 1e-4);
        let (d, _) = pix2pix_gan_loss(&[1.0], &[0.0]).unwrap();
        assert!(d < 1e-6 && d.is_finite());
        let (d, g) = cycle_gan_loss(&[1.0], &[0.0], AdversarialMode::LeastSquares).unwrap();
        assert_eq!((d, g), (0.0, 1.0));
    }

    #[test]
    fn reconstruction_hand_values() {
        assert_eq!(pix2pix_l1_loss(&t(&[0.5, -0.5]), &t(&[0.0, 0.0])).unwrap(), 0.5);
        assert_eq!(pix2pix_l1_loss(&t(&[1.0; 6]), &t(&[-1.0; 6])).unwrap(), 2.0);
        assert!(pix2pix_l1_loss(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
        let x = t(&[0.1, -0.3]);
        let shifted = x.map(|v| v + 0.2);
        assert_abs_diff_eq!(cycle_consistency_loss(&x, &shifted, &x, &x).unwrap(), 0.2, epsilon = 1e-12);
        let off = x.map(|v| v + 0.1);
        assert_abs_diff_eq!(cycle_consistency_loss(&x, &off, &x, &off).unwrap(), 0.2, epsilon = 1e-12);
        assert_eq!(pix2pix_total_loss(1.0, 0.1, 100.0), 11.0);
        assert_eq!(cycle_total_objective(1.0, 1.0, 0.3, 10.0), 5.0);
    }
}
