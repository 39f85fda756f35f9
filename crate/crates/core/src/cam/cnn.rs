use image::{Rgb, RgbImage};

use super::{Activations, DifferentiableModel};
use crate::classify::TinyCnn;
use crate::error::{Error, Result};
use crate::imaging::Map2;
use crate::nn::{Graph, Tensor};

fn to_acts(t: &Tensor) -> Result<Activations> {
    let (_, k, h, w) = t.dims4()?;
    Activations::new(k, h, w, t.data().to_vec())
}

impl DifferentiableModel for TinyCnn {
    fn name(&self) -> String {
        TinyCnn::name(self).to_string()
    }

    fn num_classes(&self) -> usize {
        TinyCnn::num_classes(self)
    }

    fn default_layer(&self) -> String {
        self.layer_names().pop().unwrap_or_default()
    }

    fn forward(&self, image: &RgbImage) -> Result<Vec<f64>> {
        self.logits(std::slice::from_ref(image))
    }

    fn activations(&self, image: &RgbImage, layer: &str) -> Result<Activations> {
        let stage = self.stage_index(layer)?;
        let mut g = Graph::new();
        let x = g.constant(self.input_tensor(image));
        let t = self.forward_graph(&mut g, x, true)?;
        to_acts(g.value(t.stages[stage]))
    }

    fn grad_of_score(&self, image: &RgbImage, layer: &str, class: usize) -> Result<Activations> {
        let stage = self.stage_index(layer)?;
        let mut g = Graph::new();
        // A leaf input makes every downstream node track gradients.
        let x = g.leaf(self.input_tensor(image));
        let t = self.forward_graph(&mut g, x, true)?;
        let y = g.select(t.logits, class)?;
        let grads = g.backward(y)?;
        let a = t.stages[stage];
        match grads.wrt(a) {
            Some(gr) => to_acts(gr),
            None => {
                let acts = to_acts(g.value(a))?;
                Activations::new(acts.k, acts.h, acts.w, vec![0.0; acts.data.len()])
            }
        }
    }

    fn masked_forward(&self, image: &RgbImage, mask: &Map2) -> Result<Vec<f64>> {
        if (mask.height, mask.width) != (image.height() as usize, image.width() as usize) {
            return Err(Error::shape("mask size differs from image"));
        }
        let mut masked = image.clone();
        for (x, y, p) in masked.enumerate_pixels_mut() {
            let m = mask.get(y as usize, x as usize).clamp(0.0, 1.0);
            *p = Rgb(p.0.map(|c| (f64::from(c) * m).round() as u8));
        }
        self.forward(&masked)
    }
}
