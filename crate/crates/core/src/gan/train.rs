use std::fmt;
use std::path::Path;

use image::RgbImage;
use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::arch::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use super::checkpoint::{Checkpoint, TrainState};
use super::losses::{AdversarialMode, EPS};
use crate::dataset::{ImageSample, Label, Provenance};
use crate::error::{Error, Result};
use crate::imaging;
use crate::nn::{Adam, Graph, Tensor, Var};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanModel {
    Pix2pix,
    Cyclegan,
}

impl GanModel {
    pub const ALL: [GanModel; 2] = [GanModel::Cyclegan, GanModel::Pix2pix];

    pub fn as_str(self) -> &'static str {
        match self {
            GanModel::Pix2pix => "pix2pix",
            GanModel::Cyclegan => "cyclegan",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            GanModel::Pix2pix => "Pix2Pix",
            GanModel::Cyclegan => "CycleGAN",
        }
    }
}

impl fmt::Display for GanModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HealthyToDisease,
    DiseaseToHealthy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the reconstruction term (L1 or cycle).
    pub lambda: f64,
    pub seed: u64,
    #[serde(default)]
    pub adversarial: AdversarialMode,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl GanTrainConfig {
    pub fn pix2pix() -> Self {
        GanTrainConfig {
            learning_rate: 2e-4,
            batch_size: 8,
            epochs: 130,
            beta1: 0.5,
            beta2: 0.999,
            lambda: 100.0,
            seed: 0,
            adversarial: AdversarialMode::CrossEntropy,
            generator: GeneratorSpec::unet(),
            discriminator: DiscriminatorSpec::patch(true),
        }
    }

    pub fn cyclegan() -> Self {
        GanTrainConfig {
            learning_rate: 1e-5,
            batch_size: 8,
            epochs: 70,
            beta1: 0.5,
            beta2: 0.999,
            lambda: 10.0,
            seed: 0,
            adversarial: AdversarialMode::CrossEntropy,
            generator: GeneratorSpec::resnet(),
            discriminator: DiscriminatorSpec::patch(false),
        }
    }

    pub fn for_model(model: GanModel) -> Self {
        match model {
            GanModel::Pix2pix => Self::pix2pix(),
            GanModel::Cyclegan => Self::cyclegan(),
        }
    }

    /// Reduced networks and a larger step size so that a few epochs on a
    /// few dozen 64px images finish in seconds on one CPU core.
    pub fn desk(model: GanModel) -> Self {
        let mut cfg = Self::for_model(model);
        cfg.learning_rate = 2e-3;
        cfg.batch_size = 4;
        cfg.epochs = 5;
        cfg.generator = match model {
            GanModel::Pix2pix => GeneratorSpec::Pix2pixUnet {
                depth: 4,
                base_channels: 8,
                dropout: 0.5,
                identity_init: false,
            },
            GanModel::Cyclegan => GeneratorSpec::CycleganResnet {
                blocks: 1,
                base_channels: 8,
                identity_init: false,
            },
        };
        cfg.discriminator.base_channels = 8;
        cfg.discriminator.n_layers = 2;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        self.generator.validate()
    }
}

/// Losses of one optimisation step. For CycleGAN the adversarial fields hold
/// the sum over both directions, so `total = adversarial_g + lambda * recon`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub step: u64,
    pub adversarial_d: f64,
    pub adversarial_g: f64,
    pub recon: f64,
    pub total: f64,
}

pub fn history_csv(history: &[LossBreakdown]) -> String {
    let mut s = String::from("epoch,step,adv_D,adv_G,recon,total\n");
    for h in history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            h.epoch, h.step, h.adversarial_d, h.adversarial_g, h.recon, h.total
        ));
    }
    s
}

/// Mean of `recon` per epoch, in epoch order.
pub fn epoch_means(history: &[LossBreakdown], f: impl Fn(&LossBreakdown) -> f64) -> Vec<f64> {
    let epochs = history.iter().map(|h| h.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let v: Vec<f64> = history.iter().filter(|h| h.epoch == e).map(&f).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

fn adv(g: &mut Graph, scores: Var, real: bool, mode: AdversarialMode) -> Var {
    let target = if real { 1.0 } else { 0.0 };
    match mode {
        AdversarialMode::CrossEntropy => g.bce(scores, target, EPS),
        AdversarialMode::LeastSquares => g.mse(scores, target),
    }
}

fn check_finite(v: f64, what: &str, epoch: usize, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "{what} loss became {v} at epoch {epoch}, step {step}"
        )))
    }
}

fn batch(tensors: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &tensors[i]).collect();
    Tensor::stack(&refs)
}

fn same_size(images: &[&RgbImage]) -> Result<()> {
    if let Some(first) = images.first() {
        if let Some(bad) = images.iter().find(|i| i.dimensions() != first.dimensions()) {
            return Err(Error::shape(format!(
                "training images must share one size: {:?} vs {:?}",
                first.dimensions(),
                bad.dimensions()
            )));
        }
    }
    Ok(())
}

fn checkpoint_path(dir: &Path, epoch: usize) -> std::path::PathBuf {
    dir.join(format!("epoch-{epoch}"))
}

/// Paired training on `(healthy, diseased)` images.
pub fn train_pix2pix(
    pairs: &[(RgbImage, RgbImage)],
    disease: Label,
    cfg: &GanTrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Checkpoint, Vec<LossBreakdown>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("pix2pix training needs at least one pair"));
    }
    if !cfg.discriminator.conditional {
        return Err(Error::Config("pix2pix needs a conditional discriminator".into()));
    }
    same_size(&pairs.iter().flat_map(|(a, b)| [a, b]).collect::<Vec<_>>())?;
    let xs: Vec<Tensor> = pairs.iter().map(|(x, _)| imaging::to_signed_tensor(x)).collect();
    let ys: Vec<Tensor> = pairs.iter().map(|(_, y)| imaging::to_signed_tensor(y)).collect();

    let mut gen = Generator::new(cfg.generator.clone(), &mut seed::stream(cfg.seed, "pix2pix/init/G"))?;
    let mut disc = Discriminator::new(cfg.discriminator.clone(), &mut seed::stream(cfg.seed, "pix2pix/init/D"))?;
    let mut opt_g = Adam::new(&gen.store, cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::new(&disc.store, cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mode = cfg.adversarial;

    let mut history = Vec::new();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::stream(cfg.seed, &format!("pix2pix/order/{epoch}")));
        for idx in order.chunks(cfg.batch_size) {
            let xb = batch(&xs, idx)?;
            let yb = batch(&ys, idx)?;

            let mut g = Graph::new();
            let x = g.constant(xb.clone());
            let y = g.constant(yb.clone());
            let mut noise = seed::stream(cfg.seed, &format!("pix2pix/noise/{step}"));
            let fake = gen.forward(&mut g, x, false, Some(&mut noise))?;

            // Discriminator step on real pairs and detached fakes.
            let mut gd = Graph::new();
            let dx = gd.constant(xb);
            let dy = gd.constant(yb);
            let df = gd.constant(g.value(fake).clone());
            let real_in = gd.concat_channels(dx, dy)?;
            let fake_in = gd.concat_channels(dx, df)?;
            let s_real = disc.forward(&mut gd, real_in, false)?;
            let s_fake = disc.forward(&mut gd, fake_in, false)?;
            let l_real = adv(&mut gd, s_real, true, mode);
            let l_fake = adv(&mut gd, s_fake, false, mode);
            let loss_d = gd.add(l_real, l_fake)?;
            let loss_d_val = gd.value(loss_d).item();
            check_finite(loss_d_val, "discriminator", epoch, step)?;
            let grads = gd.backward(loss_d)?;
            let gr = grads.for_store(&disc.store);
            opt_d.step(&mut disc.store, &gr);

            // Generator step against the updated, frozen discriminator.
            let cond = g.concat_channels(x, fake)?;
            let s = disc.forward(&mut g, cond, true)?;
            let adv_g = adv(&mut g, s, true, mode);
            let l1 = g.l1(fake, y)?;
            let weighted = g.scale(l1, cfg.lambda);
            let total = g.add(adv_g, weighted)?;
            let rec = LossBreakdown {
                epoch,
                step,
                adversarial_d: loss_d_val,
                adversarial_g: g.value(adv_g).item(),
                recon: g.value(l1).item(),
                total: g.value(total).item(),
            };
            check_finite(rec.total, "generator", epoch, step)?;
            let grads = g.backward(total)?;
            let gr = grads.for_store(&gen.store);
            opt_g.step(&mut gen.store, &gr);
            history.push(rec);
            step += 1;
        }
        info!("pix2pix {disease} epoch {} done, {} steps", epoch + 1, step);
        if let Some(dir) = checkpoint_dir {
            let ck = Checkpoint {
                model: GanModel::Pix2pix,
                disease,
                config: cfg.clone(),
                state: TrainState {
                    seed: cfg.seed,
                    epochs_done: epoch + 1,
                    global_step: step,
                },
                generator: gen.clone(),
                inverse: None,
                discriminators: vec![disc.clone()],
            };
            ck.save(&checkpoint_path(dir, epoch + 1))?;
        }
    }
    let ck = Checkpoint {
        model: GanModel::Pix2pix,
        disease,
        config: cfg.clone(),
        state: TrainState {
            seed: cfg.seed,
            epochs_done: cfg.epochs,
            global_step: step,
        },
        generator: gen,
        inverse: None,
        discriminators: vec![disc],
    };
    Ok((ck, history))
}

/// Unpaired training between a healthy domain X and a diseased domain Y.
pub fn train_cyclegan(
    healthy: &[RgbImage],
    diseased: &[RgbImage],
    disease: Label,
    cfg: &GanTrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Checkpoint, Vec<LossBreakdown>)> {
    cfg.validate()?;
    if healthy.is_empty() || diseased.is_empty() {
        return Err(Error::invalid("cyclegan training needs both domains to be non-empty"));
    }
    if cfg.discriminator.conditional {
        return Err(Error::Config("cyclegan discriminators are unconditional".into()));
    }
    same_size(&healthy.iter().chain(diseased).collect::<Vec<_>>())?;
    let xs: Vec<Tensor> = healthy.iter().map(imaging::to_signed_tensor).collect();
    let ys: Vec<Tensor> = diseased.iter().map(imaging::to_signed_tensor).collect();

    let mut gen_g = Generator::new(cfg.generator.clone(), &mut seed::stream(cfg.seed, "cyclegan/init/G"))?;
    let mut gen_f = Generator::new(cfg.generator.clone(), &mut seed::stream(cfg.seed, "cyclegan/init/F"))?;
    let mut d_y = Discriminator::new(cfg.discriminator.clone(), &mut seed::stream(cfg.seed, "cyclegan/init/DY"))?;
    let mut d_x = Discriminator::new(cfg.discriminator.clone(), &mut seed::stream(cfg.seed, "cyclegan/init/DX"))?;
    let (lr, b1, b2) = (cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut opt_g = Adam::new(&gen_g.store, lr, b1, b2);
    let mut opt_f = Adam::new(&gen_f.store, lr, b1, b2);
    let mut opt_dy = Adam::new(&d_y.store, lr, b1, b2);
    let mut opt_dx = Adam::new(&d_x.store, lr, b1, b2);
    let mode = cfg.adversarial;

    let steps_per_epoch = healthy.len().max(diseased.len()).div_ceil(cfg.batch_size);
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut ox: Vec<usize> = (0..xs.len()).collect();
        let mut oy: Vec<usize> = (0..ys.len()).collect();
        ox.shuffle(&mut seed::stream(cfg.seed, &format!("cyclegan/order-x/{epoch}")));
        oy.shuffle(&mut seed::stream(cfg.seed, &format!("cyclegan/order-y/{epoch}")));
        for s in 0..steps_per_epoch {
            let bsz = cfg.batch_size.min(xs.len().max(ys.len()) - s * cfg.batch_size);
            let ix: Vec<usize> = (0..bsz).map(|i| ox[(s * cfg.batch_size + i) % ox.len()]).collect();
            let iy: Vec<usize> = (0..bsz).map(|i| oy[(s * cfg.batch_size + i) % oy.len()]).collect();
            let xb = batch(&xs, &ix)?;
            let yb = batch(&ys, &iy)?;

            let mut g = Graph::new();
            let x = g.constant(xb.clone());
            let y = g.constant(yb.clone());
            let fake_y = gen_g.forward(&mut g, x, false, None)?;
            let fake_x = gen_f.forward(&mut g, y, false, None)?;
            let rec_x = gen_f.forward(&mut g, fake_y, false, None)?;
            let rec_y = gen_g.forward(&mut g, fake_x, false, None)?;

            let mut gd = Graph::new();
            let ry = gd.constant(yb);
            let fy = gd.constant(g.value(fake_y).clone());
            let rx = gd.constant(xb);
            let fx = gd.constant(g.value(fake_x).clone());
            let sy_r = d_y.forward(&mut gd, ry, false)?;
            let sy_f = d_y.forward(&mut gd, fy, false)?;
            let sx_r = d_x.forward(&mut gd, rx, false)?;
            let sx_f = d_x.forward(&mut gd, fx, false)?;
            let terms = [
                adv(&mut gd, sy_r, true, mode),
                adv(&mut gd, sy_f, false, mode),
                adv(&mut gd, sx_r, true, mode),
                adv(&mut gd, sx_f, false, mode),
            ];
            let a = gd.add(terms[0], terms[1])?;
            let b = gd.add(terms[2], terms[3])?;
            let loss_d = gd.add(a, b)?;
            let loss_d_val = gd.value(loss_d).item();
            check_finite(loss_d_val, "discriminator", epoch, step)?;
            let grads = gd.backward(loss_d)?;
            let gr = grads.for_store(&d_y.store);
            opt_dy.step(&mut d_y.store, &gr);
            let gr = grads.for_store(&d_x.store);
            opt_dx.step(&mut d_x.store, &gr);

            let sy = d_y.forward(&mut g, fake_y, true)?;
            let sx = d_x.forward(&mut g, fake_x, true)?;
            let adv_g = adv(&mut g, sy, true, mode);
            let adv_f = adv(&mut g, sx, true, mode);
            let cx = g.l1(rec_x, x)?;
            let cy = g.l1(rec_y, y)?;
            let cyc = g.add(cx, cy)?;
            let advs = g.add(adv_g, adv_f)?;
            let weighted = g.scale(cyc, cfg.lambda);
            let total = g.add(advs, weighted)?;
            let rec = LossBreakdown {
                epoch,
                step,
                adversarial_d: loss_d_val,
                adversarial_g: g.value(advs).item(),
                recon: g.value(cyc).item(),
                total: g.value(total).item(),
            };
            check_finite(rec.total, "generator", epoch, step)?;
            let grads = g.backward(total)?;
            let gr = grads.for_store(&gen_g.store);
            opt_g.step(&mut gen_g.store, &gr);
            let gr = grads.for_store(&gen_f.store);
            opt_f.step(&mut gen_f.store, &gr);
            history.push(rec);
            step += 1;
        }
        info!("cyclegan {disease} epoch {} done, {} steps", epoch + 1, step);
        if let Some(dir) = checkpoint_dir {
            let ck = Checkpoint {
                model: GanModel::Cyclegan,
                disease,
                config: cfg.clone(),
                state: TrainState {
                    seed: cfg.seed,
                    epochs_done: epoch + 1,
                    global_step: step,
                },
                generator: gen_g.clone(),
                inverse: Some(gen_f.clone()),
                discriminators: vec![d_y.clone(), d_x.clone()],
            };
            ck.save(&checkpoint_path(dir, epoch + 1))?;
        }
    }
    let ck = Checkpoint {
        model: GanModel::Cyclegan,
        disease,
        config: cfg.clone(),
        state: TrainState {
            seed: cfg.seed,
            epochs_done: cfg.epochs,
            global_step: step,
        },
        generator: gen_g,
        inverse: Some(gen_f),
        discriminators: vec![d_y, d_x],
    };
    Ok((ck, history))
}

/// Runs one generator of `ckpt` on `image` in inference mode.
pub fn translate(image: &ImageSample, ckpt: &Checkpoint, direction: Direction) -> Result<ImageSample> {
    let (gen, want, label) = match direction {
        Direction::HealthyToDisease => (&ckpt.generator, Label::Healthy, ckpt.disease),
        Direction::DiseaseToHealthy => {
            let f = ckpt.inverse.as_ref().ok_or_else(|| {
                Error::invalid(format!(
                    "{} checkpoint only translates healthy to disease",
                    ckpt.model.display_name()
                ))
            })?;
            (f, ckpt.disease, Label::Healthy)
        }
    };
    if image.label != want {
        return Err(Error::invalid(format!(
            "`{}` is labelled {}, but this direction expects {} input",
            image.id, image.label, want
        )));
    }
    let out = run_generator(gen, &image.pixels)?;
    let mut s = image.derive(
        format!("{}~{}-{}", image.id, ckpt.model, label),
        out,
        Provenance::Generated,
    );
    s.label = label;
    Ok(s)
}

/// Deterministic forward pass of a generator on one image.
pub fn run_generator(gen: &Generator, img: &RgbImage) -> Result<RgbImage> {
    let mut g = Graph::new();
    let x = g.constant(imaging::to_signed_tensor(img));
    let y = gen.forward(&mut g, x, true, None)?;
    imaging::from_signed_tensor(g.value(y), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::synthetic_pairs;

    fn tiny_cfg(model: GanModel) -> GanTrainConfig {
        let mut cfg = GanTrainConfig::for_model(model);
        cfg.generator = match model {
            GanModel::Pix2pix => GeneratorSpec::Pix2pixUnet {
                depth: 3,
                base_channels: 4,
                dropout: 0.5,
                identity_init: false,
            },
            GanModel::Cyclegan => GeneratorSpec::CycleganResnet {
                blocks: 1,
                base_channels: 4,
                identity_init: false,
            },
        };
        cfg.discriminator.base_channels = 4;
        cfg.discriminator.n_layers = 2;
        cfg.epochs = 1;
        cfg.batch_size = 1;
        cfg
    }

    #[test]
    fn table_defaults() {
        let p = GanTrainConfig::pix2pix();
        assert_eq!((p.learning_rate, p.batch_size, p.epochs, p.lambda), (2e-4, 8, 130, 100.0));
        let c = GanTrainConfig::cyclegan();
        assert_eq!((c.learning_rate, c.batch_size, c.epochs, c.lambda), (1e-5, 8, 70, 10.0));
        assert_eq!((c.beta1, c.beta2), (0.5, 0.999));
    }

    #[test]
    fn single_pair_single_step() {
        let pairs = synthetic_pairs(1, 16, 0);
        let (ck, hist) = train_pix2pix(&pairs, Label::BlackScurf, &tiny_cfg(GanModel::Pix2pix), None).unwrap();
        assert_eq!(hist.len(), 1);
        assert_eq!(ck.state.global_step, 1);
        let h = &hist[0];
        assert!((h.total - (h.adversarial_g + 100.0 * h.recon)).abs() < 1e-9);
    }

    #[test]
    fn singleton_domains_single_step() {
        let pairs = synthetic_pairs(1, 16, 0);
        let (ck, hist) = train_cyclegan(
            &[pairs[0].0.clone()],
            &[pairs[0].1.clone()],
            Label::CommonScab,
            &tiny_cfg(GanModel::Cyclegan),
            None,
        )
        .unwrap();
        assert_eq!(hist.len(), 1);
        assert!(ck.inverse.is_some());
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(train_pix2pix(&[], Label::BlackScurf, &tiny_cfg(GanModel::Pix2pix), None).is_err());
        assert!(train_cyclegan(&[], &[], Label::BlackScurf, &tiny_cfg(GanModel::Cyclegan), None).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_direction_checks() {
        let pairs = synthetic_pairs(2, 16, 1);
        let dir = tempfile::tempdir().unwrap();
        let (ck, _) = train_pix2pix(&pairs, Label::BlackScurf, &tiny_cfg(GanModel::Pix2pix), Some(dir.path())).unwrap();
        let loaded = Checkpoint::load(&dir.path().join("epoch-1")).unwrap();
        assert_eq!(loaded.to_bytes().unwrap(), ck.to_bytes().unwrap());
        let healthy = ImageSample::raw("healthy/x.png", pairs[0].0.clone(), Label::Healthy);
        let a = translate(&healthy, &loaded, Direction::HealthyToDisease).unwrap();
        let b = translate(&healthy, &ck, Direction::HealthyToDisease).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label, Label::BlackScurf);
        assert_eq!(a.provenance, Provenance::Generated);
        assert_eq!(a.source_id.as_deref(), Some("healthy/x.png"));
        assert!(translate(&healthy, &ck, Direction::DiseaseToHealthy).is_err());
    }
}
