use approx::assert_abs_diff_eq;
use cropgan::cam::{
    explain_grid, gradcam, gradcam_pp, render_cell, scorecam, Activations, CamConfig, CamMethod, DifferentiableModel,
};
use cropgan::classify::{ClassifierAdapter, ClfExample, ClfTrainConfig, TinyCnn};
use cropgan::dataset::synth::render_sample;
use cropgan::dataset::Label;
use cropgan::imaging::{self, Map2};
use cropgan::nn::Tensor;
use cropgan::render::Colormap;
use cropgan::seed::sha256_hex;
use cropgan::{Error, Result};
use image::{Rgb, RgbImage};
use proptest::prelude::*;

/// Activations are the image channels in [0, 1]; `y^c = Σ_k W[c][k]·GAP(A^k)`.
struct LinearGap {
    w: Vec<Vec<f64>>,
    grads_allowed: bool,
}

fn channels(img: &RgbImage) -> Activations {
    let (h, w) = (img.height() as usize, img.width() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for k in 0..3 {
            data[k * h * w + y as usize * w + x as usize] = f64::from(p[k]) / 255.0;
        }
    }
    Activations::new(3, h, w, data).unwrap()
}

impl DifferentiableModel for LinearGap {
    fn name(&self) -> String {
        "linear-gap".into()
    }
    fn num_classes(&self) -> usize {
        self.w.len()
    }
    fn default_layer(&self) -> String {
        "rgb".into()
    }
    fn forward(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let a = channels(image);
        let z = (a.h * a.w) as f64;
        Ok(self.w.iter().map(|wc| (0..3).map(|k| wc[k] * a.map(k).iter().sum::<f64>() / z).sum()).collect())
    }
    fn activations(&self, image: &RgbImage, layer: &str) -> Result<Activations> {
        match layer {
            "rgb" => Ok(channels(image)),
            "scores" => Activations::new(self.w.len(), 1, 1, self.forward(image)?),
            _ => Err(Error::InvalidInput(format!("no layer {layer}"))),
        }
    }
    fn grad_of_score(&self, image: &RgbImage, _layer: &str, class: usize) -> Result<Activations> {
        assert!(self.grads_allowed, "gradient requested from a gradient-free explainer");
        let a = channels(image);
        let z = (a.h * a.w) as f64;
        let data = (0..3).flat_map(|k| vec![self.w[class][k] / z; a.h * a.w]).collect();
        Activations::new(3, a.h, a.w, data)
    }
    fn masked_forward(&self, image: &RgbImage, mask: &Map2) -> Result<Vec<f64>> {
        let mut m = image.clone();
        for (x, y, p) in m.enumerate_pixels_mut() {
            let s = mask.get(y as usize, x as usize);
            *p = Rgb(p.0.map(|c| (f64::from(c) * s).round() as u8));
        }
        self.forward(&m)
    }
}

fn model(w: Vec<Vec<f64>>) -> LinearGap {
    LinearGap { w, grads_allowed: true }
}

fn cfg() -> CamConfig {
    CamConfig::default()
}

fn noisy_image(seed: u8) -> RgbImage {
    RgbImage::from_fn(6, 5, |x, y| Rgb([(x * 40 + u32::from(seed)) as u8, (y * 50) as u8, ((x * y * 13) % 255) as u8]))
}

#[test]
fn gradcam_recovers_linear_weights() {
    let w = vec![vec![0.5, -1.25, 2.0], vec![1.0, 1.0, -3.0]];
    let m = model(w.clone());
    let img = noisy_image(3);
    let z = 30.0;
    for c in 0..2 {
        let hm = gradcam(&m, &img, c, "rgb", &cfg()).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(hm.weights[k] * z, w[c][k], epsilon = 1e-12);
        }
    }
}

#[test]
fn gradcam_zero_and_single_map_cases() {
    let img = noisy_image(1);
    let hm = gradcam(&model(vec![vec![0.0; 3], vec![0.0; 3]]), &img, 0, "rgb", &cfg()).unwrap();
    assert!(hm.values.data.iter().all(|v| *v == 0.0));
    // Only the red channel carries weight, so the map is red normalised.
    let hm = gradcam(&model(vec![vec![7.0, 0.0, 0.0], vec![0.0; 3]]), &img, 0, "rgb", &cfg()).unwrap();
    let red = channels(&img);
    let mx = red.map(0).iter().cloned().fold(0.0, f64::max);
    for (v, r) in hm.values.data.iter().zip(red.map(0)) {
        assert_abs_diff_eq!(*v, r / mx, epsilon = 1e-12);
    }
    let err = gradcam(&model(vec![vec![1.0; 3], vec![1.0; 3]]), &img, 0, "scores", &cfg()).unwrap_err();
    assert!(err.to_string().contains("choose a convolutional layer"));
}

#[test]
fn gradcam_invariant_to_positive_score_scaling() {
    let img = noisy_image(9);
    let base = vec![vec![0.3, -0.2, 0.9], vec![0.0; 3]];
    let a = gradcam(&model(base.clone()), &img, 0, "rgb", &cfg()).unwrap();
    let scaled: Vec<Vec<f64>> = base.iter().map(|r| r.iter().map(|v| v * 17.5).collect()).collect();
    let b = gradcam(&model(scaled), &img, 0, "rgb", &cfg()).unwrap();
    assert_eq!(a.values.argmax(), b.values.argmax());
    for (x, y) in a.values.data.iter().zip(&b.values.data) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-12);
    }
}

#[test]
fn gradcam_pp_cases() {
    let img = noisy_image(4);
    let neg = gradcam_pp(&model(vec![vec![-1.0, -2.0, -0.5], vec![0.0; 3]]), &img, 0, "rgb", &cfg()).unwrap();
    assert!(neg.values.data.iter().all(|v| *v == 0.0));

    let px = RgbImage::from_pixel(1, 1, Rgb([120, 30, 200]));
    let m = model(vec![vec![0.4, 1.5, 0.2], vec![0.0; 3]]);
    let a = gradcam(&m, &px, 0, "rgb", &cfg()).unwrap();
    let b = gradcam_pp(&m, &px, 0, "rgb", &cfg()).unwrap();
    assert_eq!(a.values, b.values);

    let mut spot = RgbImage::from_pixel(8, 8, Rgb([10, 10, 10]));
    spot.put_pixel(5, 2, Rgb([250, 10, 10]));
    let hm = gradcam_pp(&model(vec![vec![1.0, 0.1, 0.1], vec![0.0; 3]]), &spot, 0, "rgb", &cfg()).unwrap();
    assert_eq!(hm.values.argmax(), (2, 5));
}

#[test]
fn scorecam_cases_and_gradient_freedom() {
    let gray = RgbImage::from_fn(6, 6, |x, y| {
        let v = (x * 30 + y * 10) as u8;
        Rgb([v, v, v])
    });
    let m = LinearGap { w: vec![vec![1.0, 2.0, 0.5], vec![0.0; 3]], grads_allowed: false };
    let hm = scorecam(&m, &gray, 0, "rgb", &cfg()).unwrap();
    let ch = channels(&gray);
    let mx = ch.map(0).iter().cloned().fold(0.0, f64::max);
    for (v, r) in hm.values.data.iter().zip(ch.map(0)) {
        assert_abs_diff_eq!(*v, r / mx, epsilon = 1e-9);
    }

    let two = RgbImage::from_fn(8, 8, |x, _| if x < 4 { Rgb([255, 0, 0]) } else { Rgb([0, 255, 0]) });
    let m = LinearGap { w: vec![vec![10.0, 0.0, 0.0], vec![0.0; 3]], grads_allowed: false };
    let a = scorecam(&m, &two, 0, "rgb", &cfg()).unwrap();
    assert!(a.values.argmax().1 < 4);
    let b = scorecam(&m, &two, 0, "rgb", &cfg()).unwrap();
    assert_eq!(a, b);
    let tight = CamConfig { scorecam_budget: 1, ..cfg() };
    let c = scorecam(&m, &two, 0, "rgb", &tight).unwrap();
    assert_eq!(c.weights.iter().filter(|w| **w > 0.0).count(), 1);
}

proptest! {
    #[test]
    fn heatmaps_nonnegative_full_size(seed in 0u8..255, w in prop::collection::vec(-3.0f64..3.0, 3), method in 0usize..3) {
        let img = RgbImage::from_fn(7, 5, |x, y| Rgb([seed.wrapping_add((x * 31) as u8), (y * 40) as u8, seed ^ (x as u8)]));
        let m = model(vec![w, vec![0.0; 3]]);
        let hm = match method {
            0 => gradcam(&m, &img, 0, "rgb", &cfg()),
            1 => gradcam_pp(&m, &img, 0, "rgb", &cfg()),
            _ => scorecam(&m, &img, 0, "rgb", &cfg()),
        }.unwrap();
        prop_assert_eq!((hm.values.height, hm.values.width), (5, 7));
        prop_assert!(hm.values.data.iter().all(|v| *v >= 0.0));
        let mx = hm.values.max();
        prop_assert!(mx == 0.0 || (mx - 1.0).abs() < 1e-12);
    }
}

fn trained_cnn(name: &str) -> TinyCnn {
    let data: Vec<ClfExample> = (0..6)
        .map(|i| {
            let label = Label::ALL[i % 3];
            ClfExample { image: render_sample(label, 32, 4, i).0, class: i % 3 }
        })
        .collect();
    let mut net = TinyCnn::for_backbone(name, 1);
    net.train(&data, 3, &ClfTrainConfig { epochs: 2, batch_size: 3, ..Default::default() }).unwrap();
    net
}

#[test]
fn cnn_gradients_match_finite_differences() {
    let net = trained_cnn("resnet152v2");
    let img = render_sample(Label::CommonScab, 32, 8, 0).0;
    for (si, layer) in net.layer_names().iter().enumerate() {
        let a = net.activations(&img, layer).unwrap();
        for class in 0..3 {
            let g = net.grad_of_score(&img, layer, class).unwrap();
            let eps = 1e-6;
            let mut worst: f64 = 0.0;
            for idx in (0..a.data.len()).step_by(7) {
                let bump = |d: f64| {
                    let mut v = a.data.clone();
                    v[idx] += d;
                    let t = Tensor::from_vec(&[1, a.k, a.h, a.w], v).unwrap();
                    net.logits_from_stage(si, t).unwrap()[class]
                };
                let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                let rel = (fd - g.data[idx]).abs() / fd.abs().max(g.data[idx].abs()).max(1e-3);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-4, "layer {layer} class {class}: rel err {worst}");
        }
    }
}

#[test]
fn grid_layout_and_manifest_round_trip() {
    let nets: Vec<TinyCnn> = cropgan::classify::BACKBONES.iter().map(|b| trained_cnn(b)).collect();
    let models: Vec<&dyn DifferentiableModel> = nets.iter().map(|n| n as &dyn DifferentiableModel).collect();
    let img = render_sample(Label::BlackScurf, 32, 2, 1).0;
    let images = vec![("tuber".to_string(), img.clone())];
    let (grid, manifest, tiles) = explain_grid(&models, &CamMethod::ALL, &images, 0.5, Colormap::Jet, &cfg(), 48).unwrap();
    assert_eq!(tiles.len(), 9);
    assert_eq!(manifest.cells.len(), 9);
    assert_eq!((manifest.rows, manifest.cols), (3, 3));
    assert!(grid.width() > 3 * 48);
    let json = serde_json::to_string(&manifest).unwrap();
    let back: cropgan::cam::GridManifest = serde_json::from_str(&json).unwrap();
    let cell = &back.cells[5];
    let owner = models.iter().find(|m| m.name() == cell.model).unwrap();
    let (tile, _, _) = render_cell(*owner, cell.method, &img, cell.class, &back).unwrap();
    assert_eq!(Some(sha256_hex(&imaging::encode_png(&tile).unwrap())), cell.tile_sha256);

    let one = explain_grid(&models[..1], &[CamMethod::GradCam], &images, 0.5, Colormap::Jet, &cfg(), 48).unwrap();
    assert_eq!(one.2.len(), 1);

    // Three classes over a 1x1 image look like a score layer and must fail.
    let toy = model(vec![vec![1.0; 3]; 3]);
    let broken: Vec<&dyn DifferentiableModel> = vec![&toy, models[0]];
    let tiny = RgbImage::from_pixel(1, 1, Rgb([1, 2, 3]));
    let (_, man, _) = explain_grid(&broken, &[CamMethod::GradCam], &[("px".into(), tiny)], 0.5, Colormap::Jet, &cfg(), 16).unwrap();
    assert_eq!(man.cells.len(), 2);
    assert!(man.cells[0].error.is_some() && man.cells[0].tile_sha256.is_none());
    assert!(man.cells[1].error.is_none());
}
