use std::collections::HashSet;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::captions::CaptionGroup;
use super::features::FeatureStore;
use super::vocab::{build_vocab, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Vector;

/// An image with its encoded captions (each `START ... END`) and feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedImage {
    pub image_id: String,
    pub captions: Vec<Vec<usize>>,
    pub feature: Vector,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

pub type Dataset = Splits<CaptionedImage>;
pub type SplitIds = Splits<String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "val" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train|dev|test)"
            ))),
        }
    }
}

impl<T> Splits<T> {
    pub fn get(&self, split: Split) -> &[T] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn map<U>(self, mut f: impl FnMut(T) -> Option<U>) -> Splits<U> {
        Splits {
            train: self.train.into_iter().filter_map(&mut f).collect(),
            dev: self.dev.into_iter().filter_map(&mut f).collect(),
            test: self.test.into_iter().filter_map(&mut f).collect(),
        }
    }
}

impl Dataset {
    /// One `(caption, feature)` sample per caption of every image in `split`.
    pub fn pairs(&self, split: Split) -> Vec<(&[usize], &Vector)> {
        self.get(split)
            .iter()
            .flat_map(|img| img.captions.iter().map(move |c| (c.as_slice(), &img.feature)))
            .collect()
    }

    pub fn split_ids(&self) -> SplitIds {
        let ids = |v: &[CaptionedImage]| v.iter().map(|i| i.image_id.clone()).collect();
        Splits {
            train: ids(&self.train),
            dev: ids(&self.dev),
            test: ids(&self.test),
        }
    }
}

/// Seeded split: ids are sorted, shuffled, then the first `dev_n` go to dev,
/// the next `test_n` to test and the rest to train. Each part comes back
/// sorted by id.
pub fn split_dataset<T>(
    mut items: Vec<T>,
    id: impl Fn(&T) -> &str,
    dev_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<Splits<T>> {
    if dev_n + test_n >= items.len() {
        return Err(Error::Data(format!(
            "cannot take {dev_n} dev + {test_n} test images from {} and leave any for training",
            items.len()
        )));
    }
    items.sort_by(|a, b| id(a).cmp(id(b)));
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = items.split_off(dev_n + test_n);
    let mut test = items.split_off(dev_n);
    let mut dev = items;
    for part in [&mut train, &mut dev, &mut test] {
        part.sort_by(|a, b| id(a).cmp(id(b)));
    }
    Ok(Splits { train, dev, test })
}

/// Split from explicit id lists. With `train = None`, every image not listed
/// for dev or test is used for training; otherwise unlisted images are dropped.
/// Each part comes back sorted by id.
pub fn split_explicit<T>(
    items: Vec<T>,
    id: impl Fn(&T) -> &str,
    lists: &SplitSpecLists,
) -> Result<Splits<T>> {
    let dev: HashSet<&str> = lists.dev.iter().map(String::as_str).collect();
    let test: HashSet<&str> = lists.test.iter().map(String::as_str).collect();
    let train: Option<HashSet<&str>> = lists
        .train
        .as_ref()
        .map(|t| t.iter().map(String::as_str).collect());

    let overlap = |a: &HashSet<&str>, b: &HashSet<&str>| a.intersection(b).next().map(|s| s.to_string());
    if let Some(x) = overlap(&dev, &test)
        .or_else(|| train.as_ref().and_then(|t| overlap(t, &dev)))
        .or_else(|| train.as_ref().and_then(|t| overlap(t, &test)))
    {
        return Err(Error::Data(format!("image `{x}` is listed in more than one split")));
    }

    let known: HashSet<String> = items.iter().map(|i| id(i).to_string()).collect();
    let listed = dev
        .iter()
        .chain(&test)
        .chain(train.iter().flatten())
        .copied();
    let missing: Vec<&str> = listed.filter(|x| !known.contains(*x)).collect();
    if !missing.is_empty() {
        let mut missing = missing;
        missing.sort_unstable();
        return Err(Error::Data(format!(
            "split lists name unknown images: {}",
            missing.join(", ")
        )));
    }

    let mut out = Splits {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for item in items {
        let key = id(&item);
        if dev.contains(key) {
            out.dev.push(item);
        } else if test.contains(key) {
            out.test.push(item);
        } else if train.as_ref().is_none_or(|t| t.contains(key)) {
            out.train.push(item);
        }
    }
    for part in [&mut out.train, &mut out.dev, &mut out.test] {
        part.sort_by(|a, b| id(a).cmp(id(b)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitSpecLists {
    pub train: Option<Vec<String>>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitSpec {
    Random { dev_n: usize, test_n: usize, seed: u64 },
    Explicit(SplitSpecLists),
}

struct RawImage {
    id: String,
    captions: Vec<String>,
    feature: Vector,
}

/// Joins captions with features, splits, builds (or reuses) the vocabulary
/// from training captions and encodes every caption.
pub fn assemble_dataset(
    groups: Vec<CaptionGroup>,
    features: &FeatureStore,
    split: &SplitSpec,
    min_count: usize,
    vocab: Option<Vocabulary>,
) -> Result<(Dataset, Vocabulary)> {
    let raw = groups
        .into_iter()
        .map(|g| {
            let feature = features.get(&g.image_id).cloned().ok_or_else(|| {
                Error::Data(format!("no feature vector for image `{}`", g.image_id))
            })?;
            Ok(RawImage {
                id: g.image_id,
                captions: g.captions,
                feature,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let splits = match split {
        SplitSpec::Random { dev_n, test_n, seed } => {
            split_dataset(raw, |r| r.id.as_str(), *dev_n, *test_n, *seed)?
        }
        SplitSpec::Explicit(lists) => split_explicit(raw, |r| r.id.as_str(), lists)?,
    };
    if splits.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }

    let vocab = match vocab {
        Some(v) => v,
        None => build_vocab(
            splits
                .train
                .iter()
                .flat_map(|r| r.captions.iter().map(String::as_str)),
            min_count,
        )?,
    };

    let dataset = splits.map(|r| {
        let captions: Vec<Vec<usize>> = r
            .captions
            .iter()
            .map(|c| vocab.encode_sentence(c))
            .filter(|ids| ids.len() >= 3)
            .collect();
        if captions.len() < r.captions.len() {
            warn!(
                "image `{}`: dropped {} empty caption(s)",
                r.id,
                r.captions.len() - captions.len()
            );
        }
        if captions.is_empty() {
            warn!("image `{}` has no usable captions; skipped", r.id);
            return None;
        }
        Some(CaptionedImage {
            image_id: r.id,
            captions,
            feature: r.feature,
        })
    });
    Ok((dataset, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:02}")).collect()
    }

    #[test]
    fn split_arithmetic_and_determinism() {
        let s = split_dataset(ids(10), |s| s.as_str(), 2, 2, 5).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (6, 2, 2));
        let again = split_dataset(ids(10), |s| s.as_str(), 2, 2, 5).unwrap();
        assert_eq!(s, again);
        let mut reversed = ids(10);
        reversed.reverse();
        assert_eq!(split_dataset(reversed, |s| s.as_str(), 2, 2, 5).unwrap(), s);
    }

    #[test]
    fn splits_are_disjoint_and_complete() {
        let s = split_dataset(ids(30), |s| s.as_str(), 5, 7, 1).unwrap();
        let all: HashSet<_> = s.train.iter().chain(&s.dev).chain(&s.test).collect();
        assert_eq!(all.len(), 30);
    }

    #[test]
    fn explicit_lists_reproduce_a_seeded_split() {
        let s = split_dataset(ids(12), |s| s.as_str(), 3, 2, 9).unwrap();
        let lists = SplitSpecLists {
            train: Some(s.train.clone()),
            dev: s.dev.clone(),
            test: s.test.clone(),
        };
        let mut shuffled = ids(12);
        shuffled.reverse();
        assert_eq!(split_explicit(shuffled, |s| s.as_str(), &lists).unwrap(), s);
    }

    #[test]
    fn insufficient_items() {
        assert!(split_dataset(ids(4), |s| s.as_str(), 2, 2, 0).is_err());
    }

    #[test]
    fn explicit_lists_override_shuffle() {
        let lists = SplitSpecLists {
            train: None,
            dev: vec!["img01".into()],
            test: vec!["img03".into(), "img00".into()],
        };
        let s = split_explicit(ids(5), |s| s.as_str(), &lists).unwrap();
        assert_eq!(s.dev, vec!["img01"]);
        assert_eq!(s.test, vec!["img00", "img03"]);
        assert_eq!(s.train, vec!["img02", "img04"]);

        let lists = SplitSpecLists {
            train: Some(vec!["img02".into()]),
            ..lists
        };
        let s = split_explicit(ids(5), |s| s.as_str(), &lists).unwrap();
        assert_eq!(s.train, vec!["img02"]);
    }

    #[test]
    fn explicit_lists_are_validated() {
        let overlap = SplitSpecLists {
            train: None,
            dev: vec!["img01".into()],
            test: vec!["img01".into()],
        };
        assert!(split_explicit(ids(3), |s| s.as_str(), &overlap).is_err());
        let unknown = SplitSpecLists {
            train: None,
            dev: vec!["nope".into()],
            test: vec![],
        };
        let msg = split_explicit(ids(3), |s| s.as_str(), &unknown)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("nope"));
    }

    fn groups() -> Vec<CaptionGroup> {
        (0..6)
            .map(|i| CaptionGroup {
                image_id: format!("im{i}"),
                captions: vec![format!("a dog number{i}"), "a cat".into(), "".into()],
            })
            .collect()
    }

    fn store() -> FeatureStore {
        let mut s = FeatureStore::new(2);
        for i in 0..6 {
            s.insert(format!("im{i}"), vec![i as f64, 1.0].into()).unwrap();
        }
        s
    }

    #[test]
    fn assembly_expands_pairs_and_drops_empty_captions() {
        let spec = SplitSpec::Random {
            dev_n: 1,
            test_n: 1,
            seed: 3,
        };
        let (ds, vocab) = assemble_dataset(groups(), &store(), &spec, 1, None).unwrap();
        assert_eq!(ds.train.len(), 4);
        let expected: usize = ds.train.iter().map(|i| i.captions.len()).sum();
        assert_eq!(ds.pairs(Split::Train).len(), expected);
        assert_eq!(expected, 8);
        assert!(ds.train.iter().flat_map(|i| &i.captions).all(|c| c.len() >= 3));
        // Vocabulary only sees training captions.
        let dev_word = format!("number{}", &ds.dev[0].image_id[2..]);
        assert_eq!(vocab.id(&dev_word), super::super::vocab::UNK);
    }

    #[test]
    fn missing_feature_is_a_data_error() {
        let mut s = FeatureStore::new(2);
        s.insert("im0", vec![0.0, 0.0].into()).unwrap();
        let spec = SplitSpec::Random {
            dev_n: 1,
            test_n: 1,
            seed: 0,
        };
        let err = assemble_dataset(groups(), &s, &spec, 1, None).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("im1"));
    }
}
