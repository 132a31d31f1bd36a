//! Deterministic toy corpus whose captions are a function of the features.
//!
//! Each image draws a colour, an object and a scene (four values each). The
//! first twelve feature coordinates are three one-hot blocks for those
//! attributes; the remaining coordinates are Gaussian noise with σ = 0.1.
//! Every image gets five captions built from distinct templates, each of which
//! mentions all three attribute words.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::captions::CaptionGroup;
use super::features::FeatureStore;
use crate::error::{Error, Result};

pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
pub const OBJECTS: [&str; 4] = ["dog", "cat", "bird", "horse"];
pub const SCENES: [&str; 4] = ["park", "street", "field", "beach"];

/// Coordinates carrying attribute one-hots.
pub const ATTRIBUTE_DIMS: usize = 12;
pub const CAPTIONS_PER_IMAGE: usize = 5;
const NOISE_SIGMA: f64 = 0.1;

const TEMPLATES: [&str; 7] = [
    "a {c} {o} in the {s}",
    "a {c} {o} standing in the {s}",
    "the {c} {o} is in the {s}",
    "there is a {c} {o} in the {s}",
    "a {c} {o} sitting in the {s}",
    "one {c} {o} outside in the {s}",
    "a {c} {o} playing at the {s}",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attributes {
    pub color: usize,
    pub object: usize,
    pub scene: usize,
}

impl Attributes {
    pub fn words(&self) -> [&'static str; 3] {
        [COLORS[self.color], OBJECTS[self.object], SCENES[self.scene]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub captions: Vec<CaptionGroup>,
    pub features: FeatureStore,
    pub attributes: Vec<Attributes>,
}

pub fn synthetic_image_id(i: usize) -> String {
    format!("synth{i:05}")
}

pub fn gen_synthetic(n_images: usize, feature_dim: usize, seed: u64) -> Result<SyntheticCorpus> {
    if feature_dim < ATTRIBUTE_DIMS {
        return Err(Error::Config(format!(
            "synthetic features need at least {ATTRIBUTE_DIMS} dimensions, got {feature_dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut captions = Vec::with_capacity(n_images);
    let mut features = FeatureStore::new(feature_dim);
    let mut attributes = Vec::with_capacity(n_images);

    for i in 0..n_images {
        let attr = Attributes {
            color: rng.random_range(0..COLORS.len()),
            object: rng.random_range(0..OBJECTS.len()),
            scene: rng.random_range(0..SCENES.len()),
        };
        let mut feature = vec![0.0; feature_dim];
        feature[attr.color] = 1.0;
        feature[4 + attr.object] = 1.0;
        feature[8 + attr.scene] = 1.0;
        for v in &mut feature[ATTRIBUTE_DIMS..] {
            *v = noise.sample(&mut rng);
        }

        let mut order: Vec<usize> = (0..TEMPLATES.len()).collect();
        order.shuffle(&mut rng);
        let [c, o, s] = attr.words();
        let texts = order[..CAPTIONS_PER_IMAGE]
            .iter()
            .map(|&t| {
                TEMPLATES[t]
                    .replace("{c}", c)
                    .replace("{o}", o)
                    .replace("{s}", s)
            })
            .collect();

        let id = synthetic_image_id(i);
        features.insert(id.clone(), feature.into())?;
        captions.push(CaptionGroup {
            image_id: id,
            captions: texts,
        });
        attributes.push(attr);
    }
    Ok(SyntheticCorpus {
        captions,
        features,
        attributes,
    })
}
