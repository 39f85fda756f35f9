use std::time::Instant;

use approx::assert_abs_diff_eq;
use cropgan::dataset::synth::synthetic_pairs;
use cropgan::dataset::Label;
use cropgan::gan::{
    cycle_consistency_loss, cycle_gan_loss, cycle_total_objective, epoch_means, pix2pix_gan_loss, pix2pix_l1_loss,
    pix2pix_total_loss, train_cyclegan, train_pix2pix, AdversarialMode, Checkpoint, GanModel, GanTrainConfig,
};
use cropgan::imaging::to_signed_tensor;
use cropgan::nn::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

#[test]
fn fixed_point_and_identity_round_trips() {
    for n in [1, 4, 30] {
        let (d, g) = pix2pix_gan_loss(&vec![0.5; n], &vec![0.5; n]).unwrap();
        assert_abs_diff_eq!(d, 2.0 * 2f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(g, 2f64.ln(), epsilon = 1e-9);
        let (d, _) = cycle_gan_loss(&vec![0.5; n], &vec![0.5; n], AdversarialMode::CrossEntropy).unwrap();
        assert_abs_diff_eq!(d, 2.0 * 2f64.ln(), epsilon = 1e-9);
    }
    let (h, _) = &synthetic_pairs(1, 24, 3)[0];
    let x = to_signed_tensor(h);
    assert_eq!(pix2pix_l1_loss(&x, &x).unwrap(), 0.0);
    assert_eq!(cycle_consistency_loss(&x, &x, &x, &x).unwrap(), 0.0);
    assert!(pix2pix_gan_loss(&[], &[0.5]).is_err());
    assert!(pix2pix_gan_loss(&[f64::NAN], &[0.5]).is_err());
}

proptest! {
    #[test]
    fn totals_are_linear_in_lambda(adv in -10.0f64..10.0, adv2 in -10.0f64..10.0, rec in 0.0f64..5.0, l in 0.0f64..200.0) {
        prop_assert_eq!(pix2pix_total_loss(adv, rec, l), adv + l * rec);
        prop_assert_eq!(pix2pix_total_loss(adv, rec, 0.0), adv);
        prop_assert_eq!(cycle_total_objective(adv, adv2, rec, l), adv + adv2 + l * rec);
    }

    #[test]
    fn cross_entropy_is_bounded_below(p in 1e-3f64..1.0 - 1e-3, q in 1e-3f64..1.0 - 1e-3) {
        let (d, g) = pix2pix_gan_loss(&[p], &[q]).unwrap();
        prop_assert!(d > 0.0 && g > 0.0);
        prop_assert!((d - (-(p.ln()) - (1.0 - q).ln())).abs() < 1e-12);
    }
}

/// `G(x) = tanh(w * x + b)` as a 1x1 convolution, scored by a fixed sigmoid
/// critic, trained against an L1 target.
fn toy_objective(w: f64, b: f64, x: &Tensor, y: &Tensor, lambda: f64, grad: bool) -> (f64, Option<(f64, f64)>) {
    let mut store = ParamStore::new();
    let wi = store.add("w", Tensor::from_vec(&[1, 1, 1, 1], vec![w]).unwrap());
    let bi = store.add("b", Tensor::from_vec(&[1], vec![b]).unwrap());
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let wv = g.param(&store, wi);
    let bv = g.param(&store, bi);
    let pre = g.conv2d(xv, wv, Some(bv), 1, 0).unwrap();
    let fake = g.tanh(pre);
    let critic = g.sigmoid(fake);
    let adv = g.bce(critic, 1.0, 1e-7);
    let l1 = g.l1(fake, yv).unwrap();
    let weighted = g.scale(l1, lambda);
    let total = g.add(adv, weighted).unwrap();
    let v = g.value(total).item();
    if !grad {
        return (v, None);
    }
    let gr = g.backward(total).unwrap().for_store(&store);
    (v, Some((gr[0].item(), gr[1].item())))
}

#[test]
fn toy_generator_gradient_matches_central_differences() {
    let x = Tensor::from_vec(&[1, 1, 3, 3], vec![-0.9, -0.5, -0.2, 0.1, 0.3, 0.45, 0.6, 0.8, 0.95]).unwrap();
    let y = Tensor::from_vec(&[1, 1, 3, 3], vec![0.7, -0.6, 0.2, 0.05, -0.4, 0.9, -0.1, 0.33, -0.8]).unwrap();
    let h = 1e-6;
    for (w, b) in [(0.4, -0.1), (1.3, 0.25), (-0.7, 0.6)] {
        for lambda in [0.0, 1.0, 10.0] {
            let (_, Some((gw, gb))) = toy_objective(w, b, &x, &y, lambda, true) else { unreachable!() };
            let fd_w = (toy_objective(w + h, b, &x, &y, lambda, false).0 - toy_objective(w - h, b, &x, &y, lambda, false).0) / (2.0 * h);
            let fd_b = (toy_objective(w, b + h, &x, &y, lambda, false).0 - toy_objective(w, b - h, &x, &y, lambda, false).0) / (2.0 * h);
            for (an, fd) in [(gw, fd_w), (gb, fd_b)] {
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "w={w} b={b} lambda={lambda}: analytic {an} vs numeric {fd}");
            }
        }
    }
}

#[test]
fn desk_scale_training_reduces_reconstruction() {
    let pairs = synthetic_pairs(40, 64, 11);
    let t0 = Instant::now();
    let cfg = GanTrainConfig::desk(GanModel::Pix2pix);
    let (_, hist) = train_pix2pix(&pairs, Label::BlackScurf, &cfg, None).unwrap();
    let l1 = epoch_means(&hist, |h| h.recon);
    assert_eq!(l1.len(), 5);
    assert!(l1[4] < l1[0], "pix2pix l1 per epoch {l1:?}");

    let dir = tempfile::tempdir().unwrap();
    let healthy: Vec<_> = pairs.iter().map(|p| p.0.clone()).collect();
    let diseased: Vec<_> = pairs.iter().map(|p| p.1.clone()).collect();
    let cfg = GanTrainConfig::desk(GanModel::Cyclegan);
    let (ck, hist) = train_cyclegan(&healthy, &diseased, Label::BlackScurf, &cfg, Some(dir.path())).unwrap();
    let cyc = epoch_means(&hist, |h| h.recon);
    assert!(cyc[4] < cyc[0], "cycle loss per epoch {cyc:?}");
    assert!(t0.elapsed().as_secs() < 300, "took {:?}", t0.elapsed());

    let last = Checkpoint::load(&dir.path().join("epoch-5")).unwrap();
    assert_eq!(last.to_bytes().unwrap(), ck.to_bytes().unwrap());
    assert_eq!(last.state.epochs_done, 5);
    let (ck2, hist2) = train_cyclegan(&healthy[..4], &diseased[..4], Label::BlackScurf, &GanTrainConfig { epochs: 1, ..cfg.clone() }, None).unwrap();
    let (ck3, hist3) = train_cyclegan(&healthy[..4], &diseased[..4], Label::BlackScurf, &GanTrainConfig { epochs: 1, ..cfg }, None).unwrap();
    assert_eq!(hist2, hist3);
    assert_eq!(ck2.to_bytes().unwrap(), ck3.to_bytes().unwrap());
}
