//! Generator and discriminator networks.
//!
//! Upsampling in the decoders is nearest-neighbour followed by a 3x3
//! convolution rather than a transposed convolution.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Init, ParamStore, Tensor, Var};
use crate::seed::Rng;

const NORM_EPS: f64 = 1e-5;
const GAN_INIT: Init = Init::Normal(0.02);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// Encoder-decoder with skip connections.
    Pix2pixUnet {
        depth: usize,
        base_channels: usize,
        /// Dropout rate used as the noise source in the three innermost
        /// decoder levels; 0 disables it.
        dropout: f64,
        identity_init: bool,
    },
    /// Residual-block generator.
    CycleganResnet {
        blocks: usize,
        base_channels: usize,
        identity_init: bool,
    },
}

impl GeneratorSpec {
    /// Reference-size U-Net: 8 levels, 64 base channels.
    pub fn unet() -> Self {
        GeneratorSpec::Pix2pixUnet {
            depth: 8,
            base_channels: 64,
            dropout: 0.5,
            identity_init: false,
        }
    }

    /// Reference-size residual generator: 9 blocks, 64 base channels.
    pub fn resnet() -> Self {
        GeneratorSpec::CycleganResnet {
            blocks: 9,
            base_channels: 64,
            identity_init: false,
        }
    }

    pub fn with_identity_init(mut self, on: bool) -> Self {
        match &mut self {
            GeneratorSpec::Pix2pixUnet { identity_init, .. } | GeneratorSpec::CycleganResnet { identity_init, .. } => {
                *identity_init = on
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GeneratorSpec::Pix2pixUnet {
                depth,
                base_channels,
                dropout,
                ..
            } => {
                if *depth == 0 || *base_channels == 0 {
                    return Err(Error::Config("U-Net depth and width must be positive".into()));
                }
                if !(0.0..1.0).contains(dropout) {
                    return Err(Error::Config(format!("dropout must lie in [0, 1), got {dropout}")));
                }
            }
            GeneratorSpec::CycleganResnet { base_channels, .. } => {
                if *base_channels == 0 {
                    return Err(Error::Config("generator width must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub n_layers: usize,
    pub base_channels: usize,
    /// Sees `(input, output)` channel-stacked pairs.
    pub conditional: bool,
}

impl DiscriminatorSpec {
    pub fn patch(conditional: bool) -> Self {
        DiscriminatorSpec {
            n_layers: 3,
            base_channels: 64,
            conditional,
        }
    }

    /// Receptive field in pixels of one output score.
    pub fn receptive_field(&self) -> usize {
        let strides: Vec<usize> = std::iter::repeat_n(2, self.n_layers).chain([1, 1]).collect();
        strides.iter().rev().fold(1, |rf, s| (rf - 1) * s + 4)
    }
}

fn norm_relu(g: &mut Graph, x: Var, leaky: bool) -> Result<Var> {
    let y = g.instance_norm(x, NORM_EPS)?;
    Ok(if leaky { g.leaky_relu(y, 0.2) } else { g.relu(y) })
}

/// Samples a dropout mask scaled by `1 / (1 - p)`.
fn dropout_mask(shape: &[usize], p: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let data = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    Tensor::from_vec(shape, data).expect("mask shape")
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub store: ParamStore,
    layers: Vec<Conv2d>,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let layers = build_generator(&spec, &mut store, rng);
        Ok(Generator { spec, store, layers })
    }

    /// Rebuilds the layer table for a spec and loads saved tensors.
    pub fn from_parts(spec: GeneratorSpec, names: &[String], values: Vec<Tensor>) -> Result<Self> {
        let mut g = Generator::new(spec, &mut crate::seed::root(0))?;
        g.store.load(names, values)?;
        Ok(g)
    }

    /// Runs the generator on a `[N, 3, H, W]` batch. Dropout is active only
    /// when `noise` is given.
    pub fn forward(&self, g: &mut Graph, x: Var, frozen: bool, noise: Option<&mut Rng>) -> Result<Var> {
        match &self.spec {
            GeneratorSpec::Pix2pixUnet {
                depth,
                dropout,
                identity_init,
                ..
            } => self.forward_unet(g, x, *depth, *dropout, *identity_init, frozen, noise),
            GeneratorSpec::CycleganResnet {
                blocks, identity_init, ..
            } => self.forward_resnet(g, x, *blocks, *identity_init, frozen),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_unet(
        &self,
        g: &mut Graph,
        x: Var,
        depth: usize,
        dropout: f64,
        identity: bool,
        frozen: bool,
        mut noise: Option<&mut Rng>,
    ) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4()?;
        if h != w {
            return Err(Error::shape(format!("U-Net generator needs square input, got {h}x{w}")));
        }
        let unit = 1usize << depth;
        let target = h.div_ceil(unit) * unit;
        let pad = (target - h).div_ceil(2);
        if pad >= h {
            return Err(Error::shape(format!(
                "{h}x{w} input is too small for a {depth}-level U-Net"
            )));
        }
        let input = if pad > 0 {
            let p = g.pad_reflect(x, pad)?;
            g.crop(p, 0, 0, target, target)?
        } else {
            x
        };

        let mut skips = vec![input];
        let mut cur = input;
        for i in 0..depth {
            let y = self.layers[i].forward(g, &self.store, cur, frozen)?;
            let (_, _, sh, _) = g.value(y).dims4()?;
            cur = if i > 0 && sh > 1 { norm_relu(g, y, true)? } else { g.leaky_relu(y, 0.2) };
            skips.push(cur);
        }
        for (step, k) in (0..depth).rev().enumerate() {
            let up = g.upsample_nearest(cur, 2)?;
            let y = self.layers[depth + step].forward(g, &self.store, up, frozen)?;
            if k == 0 {
                cur = y;
                break;
            }
            let mut y = norm_relu(g, y, false)?;
            if dropout > 0.0 && step < 3 {
                if let Some(rng) = noise.as_deref_mut() {
                    let mask = dropout_mask(g.value(y).shape(), dropout, rng);
                    y = g.mul_const(y, mask)?;
                }
            }
            cur = g.concat_channels(y, skips[k])?;
        }
        let out = g.tanh(cur);
        let out = if identity { g.add(out, input)? } else { out };
        if pad > 0 {
            g.crop(out, pad, pad, h, w)
        } else {
            Ok(out)
        }
    }

    fn forward_resnet(&self, g: &mut Graph, x: Var, blocks: usize, identity: bool, frozen: bool) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4()?;
        if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
            return Err(Error::shape(format!(
                "residual generator needs sides divisible by 4 and at least 8, got {h}x{w}"
            )));
        }
        let l = &self.layers;
        let p = g.pad_reflect(x, 3)?;
        let y = l[0].forward(g, &self.store, p, frozen)?;
        let mut cur = norm_relu(g, y, false)?;
        for layer in &l[1..3] {
            let y = layer.forward(g, &self.store, cur, frozen)?;
            cur = norm_relu(g, y, false)?;
        }
        for b in 0..blocks {
            let p = g.pad_reflect(cur, 1)?;
            let y = l[3 + 2 * b].forward(g, &self.store, p, frozen)?;
            let y = norm_relu(g, y, false)?;
            let p = g.pad_reflect(y, 1)?;
            let y = l[4 + 2 * b].forward(g, &self.store, p, frozen)?;
            let y = g.instance_norm(y, NORM_EPS)?;
            cur = g.add(cur, y)?;
        }
        let base = 3 + 2 * blocks;
        for layer in &l[base..base + 2] {
            let up = g.upsample_nearest(cur, 2)?;
            let y = layer.forward(g, &self.store, up, frozen)?;
            cur = norm_relu(g, y, false)?;
        }
        let p = g.pad_reflect(cur, 3)?;
        let y = l[base + 2].forward(g, &self.store, p, frozen)?;
        let out = g.tanh(y);
        if identity {
            g.add(out, x)
        } else {
            Ok(out)
        }
    }
}

fn unet_channels(depth: usize, base: usize) -> Vec<usize> {
    // Channels of the encoder outputs e_0 (the image) .. e_depth.
    std::iter::once(3)
        .chain((1..=depth).map(|k| base << (k - 1).min(3)))
        .collect()
}

fn build_generator(spec: &GeneratorSpec, store: &mut ParamStore, rng: &mut Rng) -> Vec<Conv2d> {
    let mut layers = Vec::new();
    match spec {
        GeneratorSpec::Pix2pixUnet {
            depth,
            base_channels,
            identity_init,
            ..
        } => {
            let ch = unet_channels(*depth, *base_channels);
            for i in 0..*depth {
                layers.push(Conv2d::new(store, &format!("down{i}"), ch[i], ch[i + 1], 4, 2, 1, true, GAN_INIT, rng));
            }
            for k in (0..*depth).rev() {
                let in_c = if k == depth - 1 { ch[*depth] } else { 2 * ch[k + 1] };
                let (out_c, init) = if k == 0 {
                    (3, if *identity_init { Init::Zeros } else { GAN_INIT })
                } else {
                    (ch[k], GAN_INIT)
                };
                layers.push(Conv2d::new(store, &format!("up{k}"), in_c, out_c, 3, 1, 1, true, init, rng));
            }
        }
        GeneratorSpec::CycleganResnet {
            blocks,
            base_channels: b,
            identity_init,
        } => {
            let b = *b;
            layers.push(Conv2d::new(store, "stem", 3, b, 7, 1, 0, true, GAN_INIT, rng));
            layers.push(Conv2d::new(store, "down0", b, 2 * b, 3, 2, 1, true, GAN_INIT, rng));
            layers.push(Conv2d::new(store, "down1", 2 * b, 4 * b, 3, 2, 1, true, GAN_INIT, rng));
            for i in 0..*blocks {
                layers.push(Conv2d::new(store, &format!("res{i}.a"), 4 * b, 4 * b, 3, 1, 0, true, GAN_INIT, rng));
                layers.push(Conv2d::new(store, &format!("res{i}.b"), 4 * b, 4 * b, 3, 1, 0, true, GAN_INIT, rng));
            }
            layers.push(Conv2d::new(store, "up0", 4 * b, 2 * b, 3, 1, 1, true, GAN_INIT, rng));
            layers.push(Conv2d::new(store, "up1", 2 * b, b, 3, 1, 1, true, GAN_INIT, rng));
            let init = if *identity_init { Init::Zeros } else { GAN_INIT };
            layers.push(Conv2d::new(store, "head", b, 3, 7, 1, 0, true, init, rng));
        }
    }
    layers
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub store: ParamStore,
    layers: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, rng: &mut Rng) -> Result<Self> {
        if spec.n_layers == 0 || spec.base_channels == 0 {
            return Err(Error::Config("discriminator depth and width must be positive".into()));
        }
        let mut store = ParamStore::new();
        let in_c = if spec.conditional { 6 } else { 3 };
        let b = spec.base_channels;
        let mut layers = vec![Conv2d::new(&mut store, "conv0", in_c, b, 4, 2, 1, true, GAN_INIT, rng)];
        let mut prev = b;
        for n in 1..spec.n_layers {
            let c = b << n.min(3);
            layers.push(Conv2d::new(&mut store, &format!("conv{n}"), prev, c, 4, 2, 1, true, GAN_INIT, rng));
            prev = c;
        }
        let c = b << spec.n_layers.min(3);
        layers.push(Conv2d::new(&mut store, "penult", prev, c, 4, 1, 1, true, GAN_INIT, rng));
        layers.push(Conv2d::new(&mut store, "score", c, 1, 4, 1, 1, true, GAN_INIT, rng));
        Ok(Discriminator { spec, store, layers })
    }

    pub fn from_parts(spec: DiscriminatorSpec, names: &[String], values: Vec<Tensor>) -> Result<Self> {
        let mut d = Discriminator::new(spec, &mut crate::seed::root(0))?;
        d.store.load(names, values)?;
        Ok(d)
    }

    /// Score grid in `(0, 1)`, shape `[N, 1, h, w]`.
    pub fn forward(&self, g: &mut Graph, x: Var, frozen: bool) -> Result<Var> {
        let want = if self.spec.conditional { 6 } else { 3 };
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != want {
            return Err(Error::shape(format!("discriminator expects {want} channels, got {c}")));
        }
        let last = self.layers.len() - 1;
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(g, &self.store, cur, frozen)?;
            cur = if i == last {
                g.sigmoid(y)
            } else if i == 0 {
                g.leaky_relu(y, 0.2)
            } else {
                let (_, _, h, w) = g.value(y).dims4()?;
                if h * w > 1 {
                    norm_relu(g, y, true)?
                } else {
                    g.leaky_relu(y, 0.2)
                }
            };
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn small_unet(identity: bool) -> GeneratorSpec {
        GeneratorSpec::Pix2pixUnet {
            depth: 3,
            base_channels: 4,
            dropout: 0.5,
            identity_init: identity,
        }
    }

    #[test]
    fn patch_discriminator_sees_70_pixels() {
        assert_eq!(DiscriminatorSpec::patch(true).receptive_field(), 70);
    }

    #[test]
    fn generators_preserve_spatial_size() {
        let mut rng = seed::root(1);
        let x = Tensor::full(&[2, 3, 20, 20], 0.1);
        for spec in [
            small_unet(false),
            GeneratorSpec::CycleganResnet {
                blocks: 1,
                base_channels: 4,
                identity_init: false,
            },
        ] {
            let gen = Generator::new(spec, &mut rng).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = gen.forward(&mut g, xv, true, None).unwrap();
            assert_eq!(g.value(y).shape(), &[2, 3, 20, 20]);
            assert!(g.value(y).data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn identity_init_returns_the_input() {
        let mut rng = seed::root(2);
        let x = Tensor::from_vec(&[1, 3, 16, 16], (0..768).map(|i| ((i % 17) as f64 / 8.5) - 1.0).collect()).unwrap();
        for spec in [
            small_unet(true),
            GeneratorSpec::CycleganResnet {
                blocks: 2,
                base_channels: 4,
                identity_init: true,
            },
        ] {
            let gen = Generator::new(spec, &mut rng).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = gen.forward(&mut g, xv, true, None).unwrap();
            assert_eq!(g.value(y).max_abs_diff(&x), 0.0);
        }
    }

    #[test]
    fn discriminator_grid_is_a_probability() {
        let mut rng = seed::root(3);
        let d = Discriminator::new(
            DiscriminatorSpec {
                n_layers: 2,
                base_channels: 4,
                conditional: true,
            },
            &mut rng,
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 6, 32, 32], 0.3));
        let s = d.forward(&mut g, x, true).unwrap();
        let (_, c, h, w) = g.value(s).dims4().unwrap();
        assert_eq!((c, h, w), (1, 6, 6));
        assert!(g.value(s).data().iter().all(|p| *p > 0.0 && *p < 1.0));
    }
}
