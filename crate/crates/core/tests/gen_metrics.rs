use approx::assert_abs_diff_eq;
use cropgan::gen_metrics::{
    fid, fit_gaussian, inception_score, matrix_sqrt_psd, score_generation, ClassProbMatrix, FeatureExtractor,
    FeatureStats,
};
use cropgan::Result;
use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;

fn gauss(rng: &mut cropgan::seed::Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn psd(rng: &mut cropgan::seed::Rng, d: usize) -> DMatrix<f64> {
    let x = gauss(rng, d, d + 2);
    &x * x.transpose() / d as f64
}

fn rel_residual(s: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
    (s * s - a).norm() / a.norm()
}

#[test]
fn sqrt_residual_on_psd_products() {
    for d in [1usize, 2, 3, 8, 17, 32, 64] {
        for trial in 0..3u64 {
            let mut rng = cropgan::seed::stream(trial, &format!("sqrt/{d}"));
            let p = psd(&mut rng, d);
            let q = psd(&mut rng, d);
            let half = matrix_sqrt_psd(&p).unwrap();
            let inner = &half * &q * &half;
            let s = matrix_sqrt_psd(&inner).unwrap();
            assert!(rel_residual(&s, &inner) < 1e-6, "symmetric d={d}");
            let prod = &p * &q;
            let s = matrix_sqrt_psd(&prod).unwrap();
            assert!(rel_residual(&s, &prod) < 1e-6, "product d={d}");
        }
    }
}

#[test]
fn sqrt_random_3x3_to_1e8() {
    let mut rng = cropgan::seed::stream(11, "sqrt3");
    for _ in 0..20 {
        let a = psd(&mut rng, 3);
        let s = matrix_sqrt_psd(&a).unwrap();
        assert!((&s * &s - &a).amax() < 1e-8);
    }
}

fn rotation(rng: &mut cropgan::seed::Rng, d: usize) -> DMatrix<f64> {
    gauss(rng, d, d).qr().q()
}

#[test]
fn fid_rotation_invariant() {
    let mut rng = cropgan::seed::stream(5, "rot");
    for d in [2usize, 5, 12] {
        let a = gauss(&mut rng, 40, d);
        let b = gauss(&mut rng, 30, d).add_scalar(0.3);
        let r = rotation(&mut rng, d);
        let f0 = fid(&fit_gaussian(&a).unwrap(), &fit_gaussian(&b).unwrap()).unwrap();
        let f1 = fid(&fit_gaussian(&(&a * &r)).unwrap(), &fit_gaussian(&(&b * &r)).unwrap()).unwrap();
        assert_abs_diff_eq!(f0, f1, epsilon = 1e-6);
        let back = fid(&fit_gaussian(&b).unwrap(), &fit_gaussian(&a).unwrap()).unwrap();
        assert_abs_diff_eq!(f0, back, epsilon = 1e-6);
        assert_abs_diff_eq!(fid(&fit_gaussian(&a).unwrap(), &fit_gaussian(&a).unwrap()).unwrap(), 0.0, epsilon = 1e-9);
    }
}

#[test]
fn fit_gaussian_permutation_invariant() {
    let mut rng = cropgan::seed::stream(1, "perm");
    let a = gauss(&mut rng, 9, 4);
    let rev = DMatrix::from_fn(9, 4, |i, j| a[(8 - i, j)]);
    let (s0, s1) = (fit_gaussian(&a).unwrap(), fit_gaussian(&rev).unwrap());
    assert_abs_diff_eq!(s0.mu, s1.mu, epsilon = 1e-12);
    assert_abs_diff_eq!(s0.sigma, s1.sigma, epsilon = 1e-12);
}

proptest! {
    #[test]
    fn fid_1d_closed_form(mr in -5.0f64..5.0, mg in -5.0f64..5.0, sr in 0.0f64..4.0, sg in 0.0f64..4.0) {
        let st = |m: f64, s: f64| FeatureStats { mu: DVector::from_element(1, m), sigma: DMatrix::from_element(1, 1, s * s), n: 5 };
        let v = fid(&st(mr, sr), &st(mg, sg)).unwrap();
        prop_assert!((v - ((mr - mg).powi(2) + (sr - sg).powi(2))).abs() < 1e-9);
    }

    #[test]
    fn inception_score_bounded(raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..20)) {
        let rows: Vec<Vec<f64>> = raw.iter().map(|r| {
            let s: f64 = r.iter().sum::<f64>() + 1e-9;
            r.iter().map(|v| (v + 1e-9 / 4.0) / s).collect()
        }).collect();
        let p = ClassProbMatrix::from_rows(&rows).unwrap();
        let (m, _) = inception_score(&p, 1).unwrap();
        prop_assert!((1.0 - 1e-9..=4.0 + 1e-9).contains(&m));
    }
}

/// Reads class probabilities straight from the red channel bucket and uses
/// the mean colour as a 3-d feature.
struct Toy4;

const TOY_PROBS: [[f64; 4]; 4] = [
    [0.7, 0.1, 0.1, 0.1],
    [0.1, 0.6, 0.2, 0.1],
    [0.25, 0.25, 0.25, 0.25],
    [0.0, 0.0, 0.5, 0.5],
];

impl FeatureExtractor for Toy4 {
    fn name(&self) -> String {
        "toy4".into()
    }
    fn dim(&self) -> usize {
        3
    }
    fn num_classes(&self) -> usize {
        4
    }
    fn embed(&self, images: &[RgbImage]) -> Result<DMatrix<f64>> {
        let rows: Vec<f64> = images
            .iter()
            .flat_map(|i| i.get_pixel(0, 0).0.map(f64::from))
            .collect();
        Ok(DMatrix::from_row_slice(images.len(), 3, &rows))
    }
    fn classify(&self, images: &[RgbImage]) -> Result<ClassProbMatrix> {
        let rows: Vec<Vec<f64>> = images
            .iter()
            .map(|i| TOY_PROBS[usize::from(i.get_pixel(0, 0)[0]) % 4].to_vec())
            .collect();
        ClassProbMatrix::from_rows(&rows)
    }
}

fn flat(r: u8, g: u8, b: u8) -> RgbImage {
    RgbImage::from_pixel(4, 4, Rgb([r, g, b]))
}

#[test]
fn toy_extractor_matches_brute_force_kl() {
    let gen: Vec<RgbImage> = [0u8, 1, 2, 3, 0, 1].iter().map(|&k| flat(k, 9, 9)).collect();
    let rows: Vec<[f64; 4]> = [0usize, 1, 2, 3, 0, 1].iter().map(|&k| TOY_PROBS[k]).collect();
    let py: Vec<f64> = (0..4).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / 6.0).collect();
    let mut kl = 0.0;
    for r in &rows {
        for c in 0..4 {
            if r[c] > 0.0 {
                kl += r[c] * (r[c] / py[c]).ln();
            }
        }
    }
    let expect = (kl / 6.0).exp();
    let s = score_generation(&gen, &gen, &Toy4, 1).unwrap();
    assert_abs_diff_eq!(s.is_mean, expect, epsilon = 1e-12);
    assert_abs_diff_eq!(s.fid, 0.0, epsilon = 1e-9);
    assert_eq!((s.n_real, s.n_gen), (6, 6));
}

#[test]
fn constant_sets_give_squared_distance() {
    let real = vec![flat(10, 20, 30); 3];
    let gen = vec![flat(13, 24, 30); 4];
    let s = score_generation(&real, &gen, &Toy4, 1).unwrap();
    assert_abs_diff_eq!(s.fid, 25.0, epsilon = 1e-9);
    assert!(score_generation(&real[..1], &gen, &Toy4, 1).is_err());
}
