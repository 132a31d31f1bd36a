use rayon::prelude::*;

use crate::bleu::{corpus_bleu, BleuReport};
use crate::data::dataset::CaptionedImage;
use crate::data::vocab::{Vocabulary, END, START};
use crate::error::{Error, Result};
use crate::model::{project_image, step, ModelConfig, ModelParams};
use crate::tensor::Vector;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Generated ids, without START or END.
    pub tokens: Vec<usize>,
    /// Set when `max_decode_len` was reached before END.
    pub truncated: bool,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(params: &ModelParams, config: &ModelConfig, feature: &Vector) -> Result<Decoded> {
    if feature.len() != config.feature_dim {
        return Err(Error::shape(
            "greedy_decode feature",
            format!("feature_dim {}", config.feature_dim),
            format!("feature of length {}", feature.len()),
        ));
    }
    let proj = project_image(params, feature)?;
    let mut h = Vector::zeros(config.hidden_dim);
    let mut input = START;
    let mut tokens = Vec::new();
    for t in 1..=config.max_decode_len {
        let x: Vector = params.embedding.row(input).into();
        let out = step(params, config, &x, &h, &proj, t)?;
        let next = argmax(&out.probs);
        if next == END {
            return Ok(Decoded {
                tokens,
                truncated: false,
            });
        }
        tokens.push(next);
        input = next;
        h = out.hidden.into_iter().last().expect("depth >= 1");
    }
    Ok(Decoded {
        tokens,
        truncated: true,
    })
}

/// Decodes every feature in order, in parallel.
pub fn decode_all(params: &ModelParams, config: &ModelConfig, features: &[&Vector]) -> Result<Vec<Decoded>> {
    features
        .par_iter()
        .map(|f| greedy_decode(params, config, f))
        .collect()
}

/// Scores one candidate per image against that image's reference captions,
/// compared as vocabulary-decoded words.
pub fn score_candidates(images: &[CaptionedImage], candidates: &[Vec<usize>], vocab: &Vocabulary) -> Result<BleuReport> {
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| vocab.decode(c)).collect();
    let refs: Vec<Vec<Vec<String>>> = images
        .iter()
        .map(|img| img.captions.iter().map(|c| vocab.decode(c)).collect())
        .collect();
    corpus_bleu(&cands, &refs)
}

/// Greedy captions for every image of a split, with their BLEU report.
pub fn evaluate_with_candidates(
    params: &ModelParams,
    config: &ModelConfig,
    images: &[CaptionedImage],
    vocab: &Vocabulary,
) -> Result<(BleuReport, Vec<Decoded>)> {
    if images.is_empty() {
        return Err(Error::Data("split has no images to evaluate".into()));
    }
    let features: Vec<&Vector> = images.iter().map(|i| &i.feature).collect();
    let decoded = decode_all(params, config, &features)?;
    let tokens: Vec<Vec<usize>> = decoded.iter().map(|d| d.tokens.clone()).collect();
    Ok((score_candidates(images, &tokens, vocab)?, decoded))
}

pub fn evaluate_model(
    params: &ModelParams,
    config: &ModelConfig,
    images: &[CaptionedImage],
    vocab: &Vocabulary,
) -> Result<BleuReport> {
    evaluate_with_candidates(params, config, images, vocab).map(|(r, _)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::build_vocab;
    use crate::model::{init_params, FeedMode};
    use crate::tensor::Activation;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            embed_dim: 4,
            hidden_dim: 6,
            depth: 2,
            feature_dim: 5,
            activation: Activation::Relu,
            feed_mode: FeedMode::LearnedGate,
            max_decode_len: 7,
            share_transition_weights: false,
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
        assert_eq!(argmax(&[0.25; 4]), 0);
        assert_eq!(argmax(&[0.0, 0.0, 1.0]), 2);
    }

    #[test]
    fn end_bias_gives_empty_caption() {
        let cfg = config();
        let mut p = init_params(&cfg, 1);
        p.bd[END] = 1e3;
        let d = greedy_decode(&p, &cfg, &Vector::filled(5, 0.3)).unwrap();
        assert_eq!(d, Decoded { tokens: vec![], truncated: false });
    }

    #[test]
    fn never_ending_model_is_truncated() {
        let cfg = config();
        let mut p = init_params(&cfg, 1);
        p.bd[4] = 1e3;
        let d = greedy_decode(&p, &cfg, &Vector::filled(5, 0.3)).unwrap();
        assert!(d.truncated);
        assert_eq!(d.tokens, vec![4; cfg.max_decode_len]);
    }

    #[test]
    fn zero_model_ties_pick_start() {
        // Uniform output: argmax is id 0 (START) forever.
        let cfg = config();
        let p = ModelParams::zeros(&cfg);
        let d = greedy_decode(&p, &cfg, &Vector::zeros(5)).unwrap();
        assert_eq!(d.tokens, vec![START; cfg.max_decode_len]);
    }

    #[test]
    fn decoding_is_deterministic() {
        let cfg = config();
        let p = init_params(&cfg, 9);
        let f = Vector::from(vec![0.5, -1.0, 0.2, 0.0, 1.5]);
        assert_eq!(
            greedy_decode(&p, &cfg, &f).unwrap(),
            greedy_decode(&p, &cfg, &f).unwrap()
        );
        let parallel = decode_all(&p, &cfg, &[&f, &f]).unwrap();
        assert_eq!(parallel[0], parallel[1]);
    }

    #[test]
    fn wrong_feature_length() {
        let cfg = config();
        let p = init_params(&cfg, 0);
        assert!(greedy_decode(&p, &cfg, &Vector::zeros(4)).is_err());
    }

    #[test]
    fn references_as_candidates_score_100() {
        let texts = ["a red dog in the park", "the blue cat sits in a field"];
        let vocab = build_vocab(texts.iter().copied(), 1).unwrap();
        let images: Vec<CaptionedImage> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| CaptionedImage {
                image_id: format!("i{i}"),
                captions: vec![vocab.encode_sentence(t), vocab.encode_sentence("something else")],
                feature: Vector::zeros(1),
            })
            .collect();
        let cands: Vec<Vec<usize>> = images.iter().map(|i| i.captions[0][1..i.captions[0].len() - 1].to_vec()).collect();
        let r = score_candidates(&images, &cands, &vocab).unwrap();
        assert_eq!(r.bleu, [100.0; 4]);
    }

    #[test]
    fn empty_split_is_an_error() {
        let cfg = config();
        let p = init_params(&cfg, 0);
        let vocab = build_vocab(["a b c d e"].into_iter(), 1).unwrap();
        assert!(evaluate_model(&p, &cfg, &[], &vocab).is_err());
    }
}
