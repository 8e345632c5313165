//! Fixed symbol inventory shared by every generator and model.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const QUESTION: &str = "<q>";
pub const ANSWER: &str = "<ans>";

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
/// Pixel intensity used when drawing each entry of [`COLORS`].
pub const COLOR_INTENSITY: [f64; 4] = [0.4, 0.6, 0.8, 1.0];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const NUMBER_WORDS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
pub const RELATIONS: [&str; 4] = ["left", "right", "above", "below"];
pub const GLYPHS: [char; 36] = [
    'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J', 'K', 'L', 'M', 'N', 'O', 'P', 'Q', 'R', 'S', 'T', 'U', 'V', 'W',
    'X', 'Y', 'Z', '0', '1', '2', '3', '4', '5', '6', '7', '8', '9',
];

const SPECIALS: [&str; 5] = [PAD, BOS, EOS, QUESTION, ANSWER];
const PUNCT: [&str; 3] = ["?", ".", ","];
const FILLER: [&str; 16] = [
    "how", "many", "shapes", "where", "is", "of", "what", "read", "spell", "as", "words", "number", "the", "color",
    "there", "and",
];

pub fn inverse_relation(rel: usize) -> usize {
    [1, 0, 3, 2][rel]
}

#[derive(Debug)]
pub struct Vocab {
    symbols: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// The process-wide vocabulary. Symbol order is part of the data format.
    pub fn get() -> &'static Vocab {
        static V: OnceLock<Vocab> = OnceLock::new();
        V.get_or_init(Vocab::build)
    }

    fn build() -> Self {
        let mut symbols: Vec<String> = Vec::new();
        let groups: [&[&str]; 7] = [&SPECIALS, &PUNCT, &FILLER, &COLORS, &SHAPES, &NUMBER_WORDS, &RELATIONS];
        for g in groups {
            symbols.extend(g.iter().map(|s| s.to_string()));
        }
        symbols.extend(GLYPHS.iter().map(|c| c.to_string()));
        let ids = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect::<HashMap<_, _>>();
        assert_eq!(ids.len(), symbols.len(), "vocabulary symbols must be unique");
        Self { symbols, ids }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.ids
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown symbol `{symbol}`")))
    }

    /// Like [`Vocab::id`] for symbols known at compile time.
    pub fn tok(&self, symbol: &str) -> usize {
        self.ids[symbol]
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn pad(&self) -> usize {
        self.tok(PAD)
    }

    pub fn eos(&self) -> usize {
        self.tok(EOS)
    }

    pub fn glyph(&self, c: char) -> usize {
        self.ids[c.to_string().as_str()]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|s| self.id(s)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.symbol(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Words that can also appear as glyph strings (upper-cased); used to mix
/// real words into the copy task and to measure how many strings are not words.
pub fn glyph_words() -> Vec<String> {
    COLORS
        .iter()
        .chain(&SHAPES)
        .chain(&NUMBER_WORDS)
        .map(|w| w.to_uppercase())
        .filter(|w| (3..=6).contains(&w.len()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bijective() {
        let v = Vocab::get();
        for id in 0..v.len() {
            assert_eq!(v.id(v.symbol(id).unwrap()).unwrap(), id);
        }
        assert_eq!(v.pad(), 0);
    }

    #[test]
    fn encode_roundtrip() {
        let v = Vocab::get();
        let ids = v.encode("<q> how many red ? <ans> two <eos>").unwrap();
        assert_eq!(v.decode(&ids), "<q> how many red ? <ans> two <eos>");
        assert!(v.encode("purple").is_err());
    }

    #[test]
    fn glyph_word_list_is_uppercase_and_short() {
        let w = glyph_words();
        assert!(w.contains(&"RED".to_string()));
        assert!(w.contains(&"SEVEN".to_string()));
        assert!(w.iter().all(|s| (3..=6).contains(&s.len())));
    }
}
