//! Keypoint instructions and coordinate answers as character token sequences.
//!
//! A query is `"{description} Where is the {name} of this person? Answer:"` and
//! its answer is `" x=0.ddd,y=0.ddd"`. Text is tokenized one character at a
//! time over a 45-symbol alphabet: lowercase letters, digits, space,
//! `. , ? = - ' :` and a shift marker that upper-cases the following letter.

use std::fmt::Write as _;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Bundled `name<TAB>description` catalog in COCO-17 order.
pub const CATALOG_TSV: &str = include_str!("../data/keypoints.tsv");

pub const NUM_KEYPOINTS: usize = 17;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left eye",
    "right eye",
    "left ear",
    "right ear",
    "left shoulder",
    "right shoulder",
    "left elbow",
    "right elbow",
    "left wrist",
    "right wrist",
    "left hip",
    "right hip",
    "left knee",
    "right knee",
    "left ankle",
    "right ankle",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogEntry {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeypointCatalog {
    entries: Vec<CatalogEntry>,
}

impl KeypointCatalog {
    pub fn parse(tsv: &str) -> Result<Self> {
        let mut entries = Vec::with_capacity(NUM_KEYPOINTS);
        for (i, line) in tsv.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (name, description) = line.split_once('\t').ok_or_else(|| {
                Error::Integrity(format!("catalog line {} has no tab separator", i + 1))
            })?;
            entries.push(CatalogEntry {
                name: name.to_string(),
                description: description.to_string(),
            });
        }
        let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        if names != KEYPOINT_NAMES {
            return Err(Error::Integrity(format!(
                "catalog names {names:?} do not follow the COCO-17 order"
            )));
        }
        Ok(KeypointCatalog { entries })
    }

    /// The bundled catalog.
    pub fn builtin() -> &'static KeypointCatalog {
        static CATALOG: OnceLock<KeypointCatalog> = OnceLock::new();
        CATALOG.get_or_init(|| KeypointCatalog::parse(CATALOG_TSV).expect("bundled catalog"))
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> Result<&CatalogEntry> {
        self.entries.get(index).ok_or_else(|| {
            Error::Domain(format!(
                "keypoint index {index} out of range 0..{NUM_KEYPOINTS}"
            ))
        })
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.entries.iter().position(|e| e.name == name).ok_or_else(|| {
            Error::Domain(format!(
                "unknown keypoint {name:?}; valid names: {}",
                KEYPOINT_NAMES.join(", ")
            ))
        })
    }
}

pub fn build_prompt(keypoint_index: usize) -> Result<String> {
    let entry = KeypointCatalog::builtin().get(keypoint_index)?;
    Ok(format!(
        "{} Where is the {} of this person? Answer:",
        entry.description, entry.name
    ))
}

/// Formats `(x, y)` as `x=0.ddd,y=0.ddd` with round-half-up to three digits.
pub fn serialize_coords(x: f64, y: f64) -> Result<String> {
    Ok(format!("x={},y={}", format_unit(x)?, format_unit(y)?))
}

fn format_unit(v: f64) -> Result<String> {
    if v.is_nan() {
        return Err(Error::Domain("coordinate is NaN".into()));
    }
    let v = v.clamp(0.0, 1.0);
    // Exact three-digit ties are v = odd / 16; `{:.3}` would round those to even.
    let sixteenths = v * 16.0;
    let milli = if sixteenths.fract() == 0.0 && (sixteenths as u64) % 2 == 1 {
        (v * 1000.0 + 0.5).floor() as u64
    } else {
        let s = format!("{v:.3}");
        let (int, frac) = s.split_once('.').expect("fixed-point format");
        int.parse::<u64>().expect("digits") * 1000 + frac.parse::<u64>().expect("digits")
    };
    Ok(format!("{}.{:03}", milli / 1000, milli % 1000))
}

/// Strict inverse of [`serialize_coords`].
pub fn parse_coords(answer: &str) -> Option<(f64, f64)> {
    let rest = answer.strip_prefix("x=")?;
    let (x, rest) = rest.split_at_checked(5)?;
    let y = rest.strip_prefix(",y=")?;
    Some((parse_unit(x)?, parse_unit(y)?))
}

fn parse_unit(s: &str) -> Option<f64> {
    let b = s.as_bytes();
    if b.len() != 5 || b[1] != b'.' || !b[2..].iter().all(u8::is_ascii_digit) {
        return None;
    }
    match b[0] {
        b'0' => {}
        b'1' if &b[2..] == b"000" => {}
        _ => return None,
    }
    s.parse().ok()
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SHIFT: u32 = 3;

const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];
const SHIFT_SYMBOL: &str = "<shift>";
const PLAIN: &str = "abcdefghijklmnopqrstuvwxyz0123456789 .,?=-':";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    char_ids: [Option<u32>; 128],
}

impl Vocabulary {
    pub fn builtin() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
            symbols.push(SHIFT_SYMBOL.to_string());
            let mut char_ids = [None; 128];
            for c in PLAIN.chars() {
                char_ids[c as usize] = Some(symbols.len() as u32);
                symbols.push(c.to_string());
            }
            Vocabulary { symbols, char_ids }
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Size of the text alphabet (plain characters plus the shift marker).
    pub fn alphabet_len(&self) -> usize {
        self.symbols.len() - SPECIALS.len()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn char_id(&self, c: char) -> Option<u32> {
        if c.is_ascii() {
            self.char_ids[c as usize]
        } else {
            None
        }
    }

    /// `symbol<TAB>id` lines.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (id, s) in self.symbols.iter().enumerate() {
            let _ = writeln!(out, "{s}\t{id}");
        }
        out
    }
}

pub fn tokenize(text: &str) -> Result<Vec<u32>> {
    let vocab = Vocabulary::builtin();
    let mut ids = Vec::with_capacity(text.len());
    for c in text.chars() {
        if c.is_ascii_uppercase() {
            ids.push(SHIFT);
            ids.push(vocab.char_id(c.to_ascii_lowercase()).expect("lowercase letter"));
        } else {
            ids.push(vocab.char_id(c).ok_or(Error::Tokenize(c))?);
        }
    }
    Ok(ids)
}

/// Renders ids as text. Special tokens other than the shift marker render as
/// their `<name>` symbol.
pub fn detokenize(ids: &[u32]) -> Result<String> {
    render(ids, true)
}

/// Like [`detokenize`] but drops pad/bos/eos.
pub fn decode_text(ids: &[u32]) -> Result<String> {
    render(ids, false)
}

fn render(ids: &[u32], show_specials: bool) -> Result<String> {
    let vocab = Vocabulary::builtin();
    let mut out = String::with_capacity(ids.len());
    let mut shift = false;
    for &id in ids {
        let sym = vocab
            .symbol(id)
            .ok_or_else(|| Error::Domain(format!("token id {id} outside vocabulary")))?;
        if shift {
            let mut chars = sym.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_lowercase() => out.push(c.to_ascii_uppercase()),
                _ => return Err(Error::Domain(format!("shift marker before {sym:?}"))),
            }
            shift = false;
        } else if id == SHIFT {
            shift = true;
        } else if id < SHIFT {
            if show_specials {
                out.push_str(sym);
            }
        } else {
            out.push_str(sym);
        }
    }
    if shift {
        return Err(Error::Domain("dangling shift marker".into()));
    }
    Ok(out)
}

/// One teacher-forced query: prompt, answer and the mask selecting answer tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionRecord {
    pub keypoint: usize,
    pub prompt_text: String,
    /// Leading space included: `" x=0.ddd,y=0.ddd"`.
    pub answer_text: String,
    pub token_ids: Vec<u32>,
    pub answer_mask: Vec<bool>,
}

impl InstructionRecord {
    /// Number of leading ids (bos + prompt) that precede the answer.
    pub fn prompt_len(&self) -> usize {
        self.answer_mask.iter().take_while(|m| !**m).count()
    }
}

/// `bos + prompt` ids, ending at the `Answer:` boundary.
pub fn prompt_ids(keypoint_index: usize) -> Result<Vec<u32>> {
    let mut ids = vec![BOS];
    ids.extend(tokenize(&build_prompt(keypoint_index)?)?);
    Ok(ids)
}

pub fn make_training_record(keypoint_index: usize, x: f64, y: f64) -> Result<InstructionRecord> {
    let prompt_text = build_prompt(keypoint_index)?;
    let answer_text = format!(" {}", serialize_coords(x, y)?);
    let mut token_ids = vec![BOS];
    token_ids.extend(tokenize(&prompt_text)?);
    let prompt_len = token_ids.len();
    token_ids.extend(tokenize(&answer_text)?);
    token_ids.push(EOS);
    let answer_mask = (0..token_ids.len()).map(|i| i >= prompt_len).collect();
    Ok(InstructionRecord {
        keypoint: keypoint_index,
        prompt_text,
        answer_text,
        token_ids,
        answer_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_contains_catalog_description() {
        let p = build_prompt(0).unwrap();
        assert!(p.contains("The nose is the central, protruding feature on their face"));
        assert!(p.ends_with("Where is the nose of this person? Answer:"));
        assert_eq!(p, build_prompt(0).unwrap());
    }

    #[test]
    fn right_ankle_named_once_in_question() {
        let p = build_prompt(16).unwrap();
        let question = p.rsplit_once(". ").unwrap().1;
        assert_eq!(question.matches("right ankle").count(), 1);
    }

    #[test]
    fn out_of_range_index() {
        assert!(matches!(build_prompt(17), Err(Error::Domain(_))));
    }

    #[test]
    fn serialization_examples() {
        assert_eq!(serialize_coords(0.5, 0.5).unwrap(), "x=0.500,y=0.500");
        assert_eq!(serialize_coords(1.0, 0.0).unwrap(), "x=1.000,y=0.000");
        assert_eq!(serialize_coords(0.1234, 0.9876).unwrap(), "x=0.123,y=0.988");
        assert_eq!(serialize_coords(0.0625, 0.9375).unwrap(), "x=0.063,y=0.938");
        assert_eq!(serialize_coords(-0.2, 1.7).unwrap(), "x=0.000,y=1.000");
        assert!(serialize_coords(f64::NAN, 0.1).is_err());
    }

    #[test]
    fn parse_is_strict() {
        assert_eq!(parse_coords("x=0.123,y=0.988"), Some((0.123, 0.988)));
        assert_eq!(parse_coords("x=1.000,y=0.000"), Some((1.0, 0.0)));
        for bad in ["x=0.5", "x=0.500,y=0.50", "x=1.001,y=0.000", " x=0.100,y=0.100", "y=0.100,x=0.100", "x=0.1a0,y=0.100", "x=0.100,y=0.1000"] {
            assert_eq!(parse_coords(bad), None, "{bad}");
        }
    }

    #[test]
    fn alphabet_and_vocabulary_sizes() {
        let v = Vocabulary::builtin();
        assert_eq!(v.alphabet_len(), 45);
        assert_eq!(v.len(), 48);
        let dump = v.dump();
        assert_eq!(dump.lines().count(), 48);
        assert!(dump.starts_with("<pad>\t0\n<bos>\t1\n<eos>\t2\n<shift>\t3\na\t4\n"));
    }

    #[test]
    fn tokenizer_basics() {
        assert_eq!(tokenize("x=0.500").unwrap().len(), 7);
        assert!(tokenize("").unwrap().is_empty());
        assert!(matches!(tokenize("a!b"), Err(Error::Tokenize('!'))));
        let nose = &KeypointCatalog::builtin().entries()[0].description;
        assert_eq!(detokenize(&tokenize(nose).unwrap()).unwrap(), *nose);
        assert!(detokenize(&[SHIFT]).is_err());
        assert!(detokenize(&[SHIFT, tokenize("1").unwrap()[0]]).is_err());
    }

    #[test]
    fn record_mask_covers_answer_and_eos() {
        let r = make_training_record(3, 0.25, 0.75).unwrap();
        let answer_ids: Vec<u32> = r
            .token_ids
            .iter()
            .zip(&r.answer_mask)
            .filter(|(_, m)| **m)
            .map(|(id, _)| *id)
            .collect();
        assert_eq!(
            detokenize(&answer_ids).unwrap(),
            " x=0.250,y=0.750<eos>".to_string()
        );
        assert_eq!(
            answer_ids.len(),
            tokenize(&r.answer_text).unwrap().len() + 1
        );
        assert_eq!(
            decode_text(&r.token_ids).unwrap(),
            format!("{}{}", r.prompt_text, r.answer_text)
        );
        assert_eq!(r.token_ids[0], BOS);
        assert_eq!(*r.token_ids.last().unwrap(), EOS);
        assert_eq!(&r.token_ids[..r.prompt_len()], prompt_ids(3).unwrap().as_slice());
    }

    #[test]
    fn records_share_prompt_prefix() {
        let a = make_training_record(9, 0.1, 0.2).unwrap();
        let b = make_training_record(9, 0.7, 0.9).unwrap();
        let n = a.prompt_len();
        assert_eq!(n, b.prompt_len());
        assert_eq!(a.token_ids[..n], b.token_ids[..n]);
        assert_ne!(a.token_ids, b.token_ids);
    }

    #[test]
    fn unknown_name_lists_catalog() {
        let err = KeypointCatalog::builtin().index_of("tail").unwrap_err();
        let msg = err.to_string();
        for name in KEYPOINT_NAMES {
            assert!(msg.contains(name));
        }
    }
}
