use super::sample::{ImagePair, Label, Labeled};
use crate::error::{Error, Result};
use crate::seed;

/// Binds every diseased image to `k` distinct healthy partners, sampled
/// without replacement from a stream keyed by the diseased id.
pub fn pair_images<H: Labeled, D: Labeled>(
    healthy: &[H],
    diseased: &[D],
    k: usize,
    seed: u64,
) -> Result<Vec<ImagePair>> {
    if k == 0 {
        return Err(Error::invalid("pairing needs k >= 1"));
    }
    if healthy.len() < k {
        return Err(Error::invalid(format!(
            "need at least {k} healthy images to pair, found {}",
            healthy.len()
        )));
    }
    if let Some(h) = healthy.iter().find(|h| h.label() != Label::Healthy) {
        return Err(Error::invalid(format!("pairing input `{}` is not healthy", h.id())));
    }
    let mut pairs = Vec::with_capacity(diseased.len() * k);
    for d in diseased {
        if !d.label().is_diseased() {
            return Err(Error::invalid(format!("pairing target `{}` is not diseased", d.id())));
        }
        let mut rng = seed::stream(seed, &format!("pair/{}", d.id()));
        let picks = rand::seq::index::sample(&mut rng, healthy.len(), k);
        for i in picks.iter() {
            pairs.push(ImagePair {
                input: healthy[i].id().to_string(),
                target: d.id().to_string(),
                disease: d.label(),
            });
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageSample;
    use image::RgbImage;
    use std::collections::{HashMap, HashSet};

    fn samples(n: usize, label: Label) -> Vec<ImageSample> {
        (0..n)
            .map(|i| ImageSample::raw(format!("{label}/{i}"), RgbImage::new(1, 1), label))
            .collect()
    }

    #[test]
    fn cardinality_and_distinct_partners() {
        let pairs = pair_images(&samples(12, Label::Healthy), &samples(5, Label::BlackScurf), 10, 3).unwrap();
        assert_eq!(pairs.len(), 50);
        let mut by_target: HashMap<&str, HashSet<&str>> = HashMap::new();
        for p in &pairs {
            by_target.entry(&p.target).or_default().insert(&p.input);
        }
        assert_eq!(by_target.len(), 5);
        assert!(by_target.values().all(|s| s.len() == 10));
    }

    #[test]
    fn minimal_and_error_cases() {
        let pairs = pair_images(&samples(1, Label::Healthy), &samples(1, Label::CommonScab), 1, 0).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!(pair_images(&samples(9, Label::Healthy), &samples(1, Label::CommonScab), 10, 0).is_err());
    }

    #[test]
    fn ninety_three_diseased_give_930_pairs() {
        let pairs = pair_images(&samples(20, Label::Healthy), &samples(93, Label::BlackScurf), 10, 1).unwrap();
        assert_eq!(pairs.len(), 930);
        assert_eq!(
            pairs,
            pair_images(&samples(20, Label::Healthy), &samples(93, Label::BlackScurf), 10, 1).unwrap()
        );
    }
}
