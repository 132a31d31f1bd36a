//! Caption token files: `image_id<TAB>caption` per line, where a trailing
//! `#k` on the id (Flickr convention) is stripped before grouping.

use std::collections::HashMap;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::fsio;

/// All captions of one image, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionGroup {
    pub image_id: String,
    pub captions: Vec<String>,
}

fn strip_caption_index(id: &str) -> &str {
    match id.rsplit_once('#') {
        Some((base, k)) if !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()) => base,
        _ => id,
    }
}

pub fn parse_captions(path: &Path, text: &str) -> Result<Vec<CaptionGroup>> {
    let mut groups: Vec<CaptionGroup> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (raw_id, caption) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, format!("line {lineno}: missing TAB between id and caption")))?;
        let id = strip_caption_index(raw_id.trim());
        if caption.trim().is_empty() {
            warn!("{}: line {lineno}: empty caption for `{id}`", path.display());
        }
        let idx = *slot.entry(id.to_string()).or_insert_with(|| {
            groups.push(CaptionGroup {
                image_id: id.to_string(),
                captions: Vec::new(),
            });
            groups.len() - 1
        });
        groups[idx].captions.push(caption.trim().to_string());
    }
    Ok(groups)
}

pub fn load_captions(path: impl AsRef<Path>) -> Result<Vec<CaptionGroup>> {
    let path = path.as_ref();
    parse_captions(path, &fsio::read_to_string(path)?)
}

/// Writes `id#k<TAB>caption` lines, `k` counting from zero per image.
pub fn write_captions(path: impl AsRef<Path>, groups: &[CaptionGroup]) -> Result<()> {
    let mut out = String::new();
    for g in groups {
        for (k, c) in g.captions.iter().enumerate() {
            out.push_str(&format!("{}#{k}\t{c}\n", g.image_id));
        }
    }
    fsio::write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<CaptionGroup>> {
        parse_captions(Path::new("caps.tsv"), text)
    }

    #[test]
    fn groups_by_stripped_id() {
        let g = parse("img1#0\ta dog\nimg1#1\ta cat\n").unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].image_id, "img1");
        assert_eq!(g[0].captions, vec!["a dog", "a cat"]);
    }

    #[test]
    fn plain_ids_group_as_is_in_input_order() {
        let g = parse("b\tx\na\ty\nb\tz\n").unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].image_id, "b");
        assert_eq!(g[0].captions, vec!["x", "z"]);
        assert_eq!(g[1].image_id, "a");
    }

    #[test]
    fn non_numeric_hash_suffix_is_kept() {
        let g = parse("pic#a\tx\n").unwrap();
        assert_eq!(g[0].image_id, "pic#a");
        let g = parse("1000268201_693b08cb0e.jpg#4\tA child\n").unwrap();
        assert_eq!(g[0].image_id, "1000268201_693b08cb0e.jpg");
    }

    #[test]
    fn empty_caption_is_accepted() {
        let g = parse("img\t\n").unwrap();
        assert_eq!(g[0].captions, vec![""]);
    }

    #[test]
    fn missing_tab_names_the_line() {
        let msg = parse("a\tok\nbroken line\n").unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        let groups = vec![CaptionGroup {
            image_id: "i".into(),
            captions: vec!["one".into(), "two".into()],
        }];
        write_captions(&p, &groups).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "i#0\tone\ni#1\ttwo\n");
        assert_eq!(load_captions(&p).unwrap(), groups);
    }
}
