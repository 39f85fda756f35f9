use approx::assert_abs_diff_eq;
use cropgan::classify::{
    accuracy, argmax, benchmark, confusion, log_loss, precision_recall_f1, Averaging, ClassifierAdapter, ClfExample,
    ClfTrainConfig, ConfusionMatrix, LinearSoftmax, TinyCnn, TrainSummary,
};
use cropgan::dataset::synth::render_sample;
use cropgan::dataset::Label;
use cropgan::gen_metrics::ClassProbMatrix;
use cropgan::{Error, Result};
use image::{Rgb, RgbImage};
use proptest::prelude::*;

fn names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("c{i}")).collect()
}

fn cm_strategy(c: usize) -> impl Strategy<Value = ConfusionMatrix> {
    prop::collection::vec(0u64..20, c * c)
        .prop_filter("non-empty", |v| v.iter().sum::<u64>() > 0)
        .prop_map(move |v| ConfusionMatrix::from_counts(names(c), v.chunks(c).map(<[u64]>::to_vec).collect()).unwrap())
}

proptest! {
    #[test]
    fn accuracy_matches_raw_predictions(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
        let (pred, truth): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let cm = ConfusionMatrix::from_indices(names(4), &pred, &truth).unwrap();
        let raw = pairs.iter().filter(|(p, t)| p == t).count() as f64 / pairs.len() as f64;
        prop_assert!((accuracy(&cm).unwrap() - raw).abs() < 1e-12);
        prop_assert_eq!(cm.total(), pairs.len() as u64);
    }

    #[test]
    fn micro_equals_accuracy(cm in cm_strategy(3)) {
        let (p, r, f) = precision_recall_f1(&cm, Averaging::Micro).unwrap();
        let a = accuracy(&cm).unwrap();
        prop_assert!((p - a).abs() < 1e-12 && (r - a).abs() < 1e-12 && (f - a).abs() < 1e-12);
    }

    #[test]
    fn binary_matches_brute_force(cm in cm_strategy(2)) {
        let (tn, fp, fn_, tp) = (cm.counts[0][0] as f64, cm.counts[0][1] as f64, cm.counts[1][0] as f64, cm.counts[1][1] as f64);
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        let got = precision_recall_f1(&cm, Averaging::Binary(1)).unwrap();
        prop_assert!((got.0 - p).abs() < 1e-12 && (got.1 - r).abs() < 1e-12 && (got.2 - f).abs() < 1e-12);
        prop_assert!((accuracy(&cm).unwrap() - (tp + tn) / (tp + tn + fp + fn_)).abs() < 1e-12);
    }

    #[test]
    fn metrics_permutation_invariant(cm in cm_strategy(3), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let pc = cm.permuted(&perm).unwrap();
        prop_assert!((accuracy(&cm).unwrap() - accuracy(&pc).unwrap()).abs() < 1e-12);
        for a in [Averaging::Macro, Averaging::Micro] {
            let (x, y) = (precision_recall_f1(&cm, a).unwrap(), precision_recall_f1(&pc, a).unwrap());
            prop_assert!((x.0 - y.0).abs() < 1e-12 && (x.1 - y.1).abs() < 1e-12 && (x.2 - y.2).abs() < 1e-12);
        }
        let (x, y) = (precision_recall_f1(&cm, Averaging::Binary(1)).unwrap(), precision_recall_f1(&pc, Averaging::Binary(perm[1])).unwrap());
        prop_assert!((x.2 - y.2).abs() < 1e-12);
    }

    #[test]
    fn log_loss_drops_as_mass_moves_to_truth(p0 in 0.05f64..0.9, shift in 0.01f64..0.05) {
        let a = ClassProbMatrix::new(1, 3, vec![p0, (1.0 - p0) / 2.0, (1.0 - p0) / 2.0]).unwrap();
        let q0 = p0 + shift;
        let b = ClassProbMatrix::new(1, 3, vec![q0, (1.0 - q0) / 2.0, (1.0 - q0) / 2.0]).unwrap();
        prop_assert!(log_loss(&b, &[0]).unwrap() < log_loss(&a, &[0]).unwrap());
    }
}

#[test]
fn confusion_from_probabilities() {
    let p = ClassProbMatrix::new(3, 2, vec![0.9, 0.1, 0.2, 0.8, 0.4, 0.6]).unwrap();
    let cm = confusion(&p, &[0, 1, 0], &names(2)).unwrap();
    assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
    assert!(confusion(&p, &[0, 1, 5], &names(2)).is_err());
    assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    assert!(cm.to_csv().starts_with("true\\predicted,c0,c1\n"));
    let img = cm.render(24);
    assert_eq!(img.width(), 2 * 24 + 2);
}

fn flat(rgb: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(16, 16, Rgb(rgb))
}

fn separable() -> (Vec<ClfExample>, Vec<ClfExample>) {
    let make = |i: u8, class: usize| ClfExample {
        image: if class == 0 { flat([200 + i, 190, 150]) } else { flat([40 + i, 30, 25]) },
        class,
    };
    let train = (0..10).map(|i| make(i, (i % 2) as usize)).collect();
    let test = (10..16).map(|i| make(i, (i % 2) as usize)).collect();
    (train, test)
}

struct Uniform(usize);

impl ClassifierAdapter for Uniform {
    fn name(&self) -> &str {
        "uniform"
    }
    fn train(&mut self, _: &[ClfExample], c: usize, _: &ClfTrainConfig) -> Result<TrainSummary> {
        self.0 = c;
        Ok(TrainSummary::default())
    }
    fn predict_proba(&self, images: &[RgbImage]) -> Result<ClassProbMatrix> {
        ClassProbMatrix::new(images.len(), self.0, vec![1.0 / self.0 as f64; images.len() * self.0])
    }
}

struct Broken;

impl ClassifierAdapter for Broken {
    fn name(&self) -> &str {
        "broken"
    }
    fn train(&mut self, _: &[ClfExample], _: usize, _: &ClfTrainConfig) -> Result<TrainSummary> {
        Err(Error::Numerical("boom".into()))
    }
    fn predict_proba(&self, _: &[RgbImage]) -> Result<ClassProbMatrix> {
        unreachable!()
    }
}

#[test]
fn benchmark_contracts() {
    let (train, test) = separable();
    let cfg = ClfTrainConfig { epochs: 20, batch_size: 4, learning_rate: 0.1, ..Default::default() };
    let mut adapters: Vec<Box<dyn ClassifierAdapter>> =
        vec![Box::new(LinearSoftmax::new("linear")), Box::new(Broken), Box::new(Uniform(0))];
    let out = benchmark(&mut adapters, &train, &test, &names(2), &cfg, Averaging::Macro);
    assert_eq!(out.iter().map(|e| e.adapter.as_str()).collect::<Vec<_>>(), ["linear", "broken", "uniform"]);
    assert_eq!(out[0].report.as_ref().unwrap().accuracy, 1.0);
    assert!(!out[1].succeeded() && out[1].error.as_deref().unwrap().contains("boom"));
    // Every uniform prediction ties and falls to class 0.
    let prior0 = test.iter().filter(|e| e.class == 0).count() as f64 / test.len() as f64;
    let uniform = out[2].report.as_ref().unwrap();
    assert_abs_diff_eq!(uniform.accuracy, prior0, epsilon = 1e-12);
    assert_abs_diff_eq!(uniform.log_loss, 2f64.ln(), epsilon = 1e-12);
}

#[test]
fn tiny_cnn_learns_synthetic_classes() {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, label) in [Label::Healthy, Label::BlackScurf].into_iter().enumerate() {
        for i in 0..16 {
            let (image, _) = render_sample(label, 48, 9, i);
            let ex = ClfExample { image, class };
            if i < 12 { train.push(ex) } else { test.push(ex) }
        }
    }
    let cfg = ClfTrainConfig { epochs: 12, ..Default::default() };
    let mut net = TinyCnn::for_backbone("densenet169", 3);
    let summary = net.train(&train, 2, &cfg).unwrap();
    assert!(summary.loss_history.last().unwrap() < &summary.loss_history[0]);
    let probs = net.predict_proba(&test.iter().map(|e| e.image.clone()).collect::<Vec<_>>()).unwrap();
    let labels: Vec<usize> = test.iter().map(|e| e.class).collect();
    let acc = accuracy(&confusion(&probs, &labels, &names(2)).unwrap()).unwrap();
    assert!(acc >= 0.75, "accuracy {acc}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clf.json");
    net.save(&path).unwrap();
    let back = TinyCnn::load(&path).unwrap();
    let again = back.predict_proba(&test.iter().map(|e| e.image.clone()).collect::<Vec<_>>()).unwrap();
    assert_eq!(probs, again);
}
