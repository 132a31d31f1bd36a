use std::collections::HashMap;

use crate::error::{Error, Result};

pub const START: usize = 0;
pub const END: usize = 1;
pub const UNK: usize = 2;

pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";
pub const UNK_TOKEN: &str = "<unk>";

const RESERVED: [&str; 3] = [START_TOKEN, END_TOKEN, UNK_TOKEN];

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Bidirectional token/id table. Ids 0, 1 and 2 are START, END and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Result<Self> {
        if tokens.len() < 3 || tokens[..3] != RESERVED {
            return Err(Error::Data(
                "vocabulary must start with <start>, <end>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{tok}`")));
            }
        }
        Ok(Self {
            tokens,
            index,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of a corpus token. Reserved surface forms never map to their
    /// reserved ids; they come back as UNK like any other unknown word.
    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&id) if id > UNK => id,
            _ => UNK,
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[START] + ids + [END]`.
    pub fn encode_sentence(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![START];
        ids.extend(tokenize(text).map(|t| self.id(&t)));
        ids.push(END);
        ids
    }

    /// Surface forms of `ids`, dropping START and END.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != START && id != END)
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }
}

/// Counts lowercased whitespace tokens and keeps those seen at least
/// `min_count` times, ordered by descending frequency then lexicographically.
pub fn build_vocab<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    min_count: usize,
) -> Result<Vocabulary> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut n_lines = 0;
    for line in lines {
        n_lines += 1;
        for tok in tokenize(line) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if n_lines == 0 {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(tok, n)| *n >= min_count && !RESERVED.contains(&tok.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(tokens, min_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn construction_and_threshold() {
        let v = build_vocab(["a a b"], 1).unwrap();
        assert_eq!(v.tokens(), &["<start>", "<end>", "<unk>", "a", "b"]);
        assert_eq!(v.len(), 5);
        let v = build_vocab(["a a b"], 2).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn ordering_is_frequency_then_lexicographic() {
        let corpus = ["Dog cat", "cat bird dog", "ant"];
        let a = build_vocab(corpus, 1).unwrap();
        let b = build_vocab(corpus, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a.tokens()[3..], &["cat", "dog", "ant", "bird"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(build_vocab(std::iter::empty(), 1).is_err());
    }

    #[test]
    fn encode_examples() {
        let v = build_vocab(["a dog runs", "a cat"], 1).unwrap();
        assert_eq!(
            v.encode_sentence("A dog"),
            vec![START, v.id("a"), v.id("dog"), END]
        );
        assert_eq!(v.encode_sentence(""), vec![START, END]);
        assert_eq!(v.encode_sentence("a zebra"), vec![START, v.id("a"), UNK, END]);
    }

    #[test]
    fn reserved_forms_never_produce_reserved_ids() {
        let v = build_vocab(["<start> <end> <unk> x"], 1).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.encode_sentence("<start> x <end>"), vec![START, UNK, 3, UNK, END]);
    }

    #[test]
    fn from_tokens_validates() {
        assert!(Vocabulary::from_tokens(vec!["x".into()], 1).is_err());
        let dup = ["<start>", "<end>", "<unk>", "a", "a"].map(String::from).to_vec();
        assert!(Vocabulary::from_tokens(dup, 1).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(words in prop::collection::vec("[a-zA-Z]{1,5}", 0..12)) {
            let vocab = build_vocab(["the cat sat on a mat", "The dog"], 1).unwrap();
            let text = words.join(" ");
            let decoded = vocab.decode(&vocab.encode_sentence(&text));
            let expected: Vec<String> = tokenize(&text)
                .map(|t| if vocab.id(&t) == UNK { UNK_TOKEN.to_string() } else { t })
                .collect();
            prop_assert_eq!(decoded, expected);
        }
    }
}
