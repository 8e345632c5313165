//! Seeded sample generators for the text corpus, the language-heavy
//! multimodal source and the OCR-style copy source.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::IGNORE_INDEX;
use crate::data::scene::{ObjectKind, Scene, SceneObject, GRID};
use crate::data::vocab::{
    glyph_words, inverse_relation, Vocab, ANSWER, BOS, COLORS, EOS, GLYPHS, NUMBER_WORDS, QUESTION, RELATIONS, SHAPES,
};
use crate::objective::{SourceCategory, SourceTag};
use crate::seed::rng_for;

pub const TEXT_SOURCE: &str = "text";
pub const LANG_MM_SOURCE: &str = "lang_mm";
pub const OCR_SOURCE: &str = "ocr";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Count,
    Relation,
    Digits,
    Spell,
    MmCount,
    MmRelation,
    MmDigits,
    Copy,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Count,
        TaskKind::Relation,
        TaskKind::Digits,
        TaskKind::Spell,
        TaskKind::MmCount,
        TaskKind::MmRelation,
        TaskKind::MmDigits,
        TaskKind::Copy,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub tokens: Vec<usize>,
    /// Next-token targets on the answer span (answer tokens and EOS),
    /// `IGNORE_INDEX` everywhere else.
    pub labels: Vec<i64>,
    pub scene: Option<Scene>,
    pub tag: SourceTag,
    pub task: TaskKind,
}

impl Sample {
    /// `<bos> <q> prompt… <ans> answer… <eos>` with labels on the answer and EOS.
    pub fn from_parts(prompt: &[&str], answer: &[&str], scene: Option<Scene>, tag: SourceTag, task: TaskKind) -> Self {
        let v = Vocab::get();
        let mut tokens = vec![v.tok(BOS), v.tok(QUESTION)];
        tokens.extend(prompt.iter().map(|s| v.tok(s)));
        tokens.push(v.tok(ANSWER));
        let first_answer = tokens.len();
        tokens.extend(answer.iter().map(|s| v.tok(s)));
        tokens.push(v.tok(EOS));
        let labels = (0..tokens.len())
            .map(|t| {
                if t + 1 >= first_answer && t + 1 < tokens.len() {
                    tokens[t + 1] as i64
                } else {
                    IGNORE_INDEX
                }
            })
            .collect();
        Self {
            tokens,
            labels,
            scene,
            tag,
            task,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of the first answer token.
    pub fn answer_start(&self) -> usize {
        self.labels.iter().position(|&l| l != IGNORE_INDEX).map_or(self.len(), |p| p + 1)
    }

    /// Answer tokens followed by EOS.
    pub fn answer(&self) -> &[usize] {
        &self.tokens[self.answer_start()..]
    }

    pub fn counted(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextParams {
    pub max_objects: usize,
    /// Probability that a count question targets an attribute that occurs in
    /// the list; otherwise the attribute is uniform.
    pub present_prob: f64,
    pub max_digits: usize,
    /// Relative weights of count, relation, digits and spelling prompts.
    pub task_weights: [f64; 4],
}

impl Default for TextParams {
    fn default() -> Self {
        Self {
            max_objects: 4,
            present_prob: 0.75,
            max_digits: 4,
            task_weights: [1.0, 1.0, 1.0, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LangMmParams {
    pub max_objects: usize,
    pub max_digits: usize,
    /// Relative weights of count, relation and digit-reading prompts.
    pub task_weights: [f64; 3],
    /// Probability that the prompt carries the picture's content as text
    /// (a caption-style question the text alone answers).
    pub caption_prob: f64,
}

impl Default for LangMmParams {
    fn default() -> Self {
        Self {
            max_objects: 4,
            max_digits: 4,
            task_weights: [1.0, 1.0, 1.0],
            caption_prob: 0.5,
        }
    }
}

impl LangMmParams {
    /// Held-out multimodal questions: image-grounded only.
    pub fn grounded(&self) -> Self {
        Self {
            caption_prob: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcrParams {
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of strings drawn from the glyph word list instead of uniformly.
    pub word_fraction: f64,
}

impl Default for OcrParams {
    fn default() -> Self {
        Self {
            min_len: 3,
            max_len: 6,
            word_fraction: 0.25,
        }
    }
}

fn pick_weighted(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn text_tag() -> SourceTag {
    SourceTag::new(TEXT_SOURCE, SourceCategory::LanguageHeavy)
}

fn lang_mm_tag() -> SourceTag {
    SourceTag::new(LANG_MM_SOURCE, SourceCategory::LanguageHeavy)
}

fn ocr_tag() -> SourceTag {
    SourceTag::new(OCR_SOURCE, SourceCategory::OcrHeavy)
}

fn digit_words(digits: &[usize]) -> Vec<&'static str> {
    digits.iter().map(|&d| NUMBER_WORDS[d]).collect()
}

fn digit_glyphs(digits: &[usize]) -> Vec<String> {
    digits.iter().map(|d| d.to_string()).collect()
}

struct CountQuestion {
    objects: Vec<(usize, usize)>,
    prompt: Vec<&'static str>,
    answer: &'static str,
}

/// Count question over a comma-separated object list.
fn count_question(rng: &mut impl Rng, max_objects: usize, present_prob: f64) -> CountQuestion {
    let n = rng.random_range(1..=max_objects);
    let objects: Vec<(usize, usize)> = (0..n).map(|_| (rng.random_range(0..4), rng.random_range(0..4))).collect();
    let by_color = rng.random_bool(0.5);
    let attr = |o: &(usize, usize)| if by_color { o.0 } else { o.1 };
    let target = if rng.random_bool(present_prob) {
        attr(&objects[rng.random_range(0..n)])
    } else {
        rng.random_range(0..4)
    };
    let count = objects.iter().filter(|o| attr(o) == target).count();
    let mut prompt = Vec::new();
    for (i, (c, s)) in objects.iter().enumerate() {
        if i > 0 {
            prompt.push(",");
        }
        prompt.extend([COLORS[*c], SHAPES[*s]]);
    }
    prompt.extend([".", "how", "many", if by_color { COLORS[target] } else { SHAPES[target] }, "?"]);
    CountQuestion {
        objects,
        prompt,
        answer: NUMBER_WORDS[count],
    }
}

fn text_count(rng: &mut impl Rng, p: &TextParams) -> Sample {
    let q = count_question(rng, p.max_objects, p.present_prob);
    Sample::from_parts(&q.prompt, &[q.answer], None, text_tag(), TaskKind::Count)
}

fn distinct_pair(rng: &mut impl Rng) -> [(usize, usize); 2] {
    loop {
        let a = (rng.random_range(0..4), rng.random_range(0..4));
        let b = (rng.random_range(0..4), rng.random_range(0..4));
        if a != b {
            return [a, b];
        }
    }
}

struct RelationQuestion {
    a: (usize, usize),
    b: (usize, usize),
    /// Where `a` is relative to `b`.
    rel: usize,
    prompt: Vec<&'static str>,
    answer: &'static str,
}

/// One relational fact; the question asks where either participant is.
fn relation_question(rng: &mut impl Rng) -> RelationQuestion {
    let [a, b] = distinct_pair(rng);
    let rel = rng.random_range(0..4);
    let ask_subject = rng.random_bool(0.5);
    let (q, answer) = if ask_subject { (a, rel) } else { (b, inverse_relation(rel)) };
    let prompt = vec![
        COLORS[a.0], SHAPES[a.1], RELATIONS[rel], "of", COLORS[b.0], SHAPES[b.1], ".", "where", "is", COLORS[q.0],
        SHAPES[q.1], "?",
    ];
    RelationQuestion {
        a,
        b,
        rel,
        prompt,
        answer: RELATIONS[answer],
    }
}

fn text_relation(rng: &mut impl Rng) -> Sample {
    let q = relation_question(rng);
    Sample::from_parts(&q.prompt, &[q.answer], None, text_tag(), TaskKind::Relation)
}

fn random_digits(rng: &mut impl Rng, max_digits: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max_digits);
    (0..n).map(|_| rng.random_range(0..10)).collect()
}

fn digits_prompt(glyphs: &[String]) -> Vec<&str> {
    let mut prompt: Vec<&str> = glyphs.iter().map(String::as_str).collect();
    prompt.extend(["as", "words", "?"]);
    prompt
}

fn text_digits(rng: &mut impl Rng, p: &TextParams) -> Sample {
    let digits = random_digits(rng, p.max_digits);
    let glyphs = digit_glyphs(&digits);
    Sample::from_parts(&digits_prompt(&glyphs), &digit_words(&digits), None, text_tag(), TaskKind::Digits)
}

fn text_spell(rng: &mut impl Rng) -> Sample {
    let words = glyph_words();
    let w = words.choose(rng).expect("word list is non-empty").clone();
    let lower = w.to_lowercase();
    let letters: Vec<String> = w.chars().map(|c| c.to_string()).collect();
    let answer: Vec<&str> = letters.iter().map(String::as_str).collect();
    Sample::from_parts(&["spell", &lower, "?"], &answer, None, text_tag(), TaskKind::Spell)
}

pub fn text_sample(rng: &mut impl Rng, p: &TextParams) -> Sample {
    match pick_weighted(rng, &p.task_weights) {
        0 => text_count(rng, p),
        1 => text_relation(rng),
        2 => text_digits(rng, p),
        _ => text_spell(rng),
    }
}

/// `n` text samples, a pure function of `seed` and `p`.
pub fn gen_text_corpus(seed: u64, n: usize, p: &TextParams) -> Vec<Sample> {
    let mut rng = rng_for(seed, "text");
    (0..n).map(|_| text_sample(&mut rng, p)).collect()
}

fn random_cells(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(rng);
    cells.truncate(n);
    cells
}

fn shape_kind(color: usize, shape: usize) -> ObjectKind {
    ObjectKind::Shape {
        shape: shape as u8,
        color: color as u8,
    }
}

fn mm_count(rng: &mut impl Rng, p: &LangMmParams) -> Sample {
    let n = rng.random_range(1..=p.max_objects);
    let cells = random_cells(rng, n);
    let objs: Vec<(usize, usize)> = (0..n).map(|_| (rng.random_range(0..4), rng.random_range(0..4))).collect();
    let scene = Scene {
        objects: objs.iter().zip(&cells).map(|(o, &c)| SceneObject::in_cell(shape_kind(o.0, o.1), c)).collect(),
    };
    let (word, count) = match rng.random_range(0..3) {
        0 => {
            let c = rng.random_range(0..4);
            (COLORS[c], objs.iter().filter(|o| o.0 == c).count())
        }
        1 => {
            let s = rng.random_range(0..4);
            (SHAPES[s], objs.iter().filter(|o| o.1 == s).count())
        }
        _ => ("shapes", n),
    };
    Sample::from_parts(
        &["how", "many", word, "?"],
        &[NUMBER_WORDS[count]],
        Some(scene),
        lang_mm_tag(),
        TaskKind::MmCount,
    )
}

/// Two objects sharing a row or a column; asks where one is relative to the other.
fn mm_relation(rng: &mut impl Rng) -> Sample {
    let [a, b] = distinct_pair(rng);
    let (ca, cb) = loop {
        let ca = rng.random_range(0..GRID * GRID);
        let cb = rng.random_range(0..GRID * GRID);
        if ca != cb && (ca / GRID == cb / GRID || ca % GRID == cb % GRID) {
            break (ca, cb);
        }
    };
    let rel_of_a = if ca / GRID == cb / GRID {
        if ca % GRID < cb % GRID { 0 } else { 1 }
    } else if ca / GRID < cb / GRID {
        2
    } else {
        3
    };
    let scene = Scene {
        objects: vec![
            SceneObject::in_cell(shape_kind(a.0, a.1), ca),
            SceneObject::in_cell(shape_kind(b.0, b.1), cb),
        ],
    };
    let (q, answer) = if rng.random_bool(0.5) { (a, rel_of_a) } else { (b, inverse_relation(rel_of_a)) };
    Sample::from_parts(
        &["where", "is", COLORS[q.0], SHAPES[q.1], "?"],
        &[RELATIONS[answer]],
        Some(scene),
        lang_mm_tag(),
        TaskKind::MmRelation,
    )
}

fn glyph_scene(chars: impl IntoIterator<Item = char>) -> Scene {
    Scene {
        objects: chars
            .into_iter()
            .enumerate()
            .map(|(i, c)| SceneObject::in_cell(ObjectKind::Glyph(c), i))
            .collect(),
    }
}

/// Digit glyphs in the picture, answered with number words.
fn mm_digits(rng: &mut impl Rng, p: &LangMmParams) -> Sample {
    let digits = random_digits(rng, p.max_digits);
    let scene = glyph_scene(digits.iter().map(|&d| char::from(b'0' + d as u8)));
    Sample::from_parts(
        &["read", "number", "as", "words", "?"],
        &digit_words(&digits),
        Some(scene),
        lang_mm_tag(),
        TaskKind::MmDigits,
    )
}

/// Two distinct cells with `a` at `rel` (left/right/above/below) of `b`.
fn cells_for_relation(rng: &mut impl Rng, rel: usize) -> (usize, usize) {
    loop {
        let ca = rng.random_range(0..GRID * GRID);
        let cb = rng.random_range(0..GRID * GRID);
        let (ra, ka, rb, kb) = (ca / GRID, ca % GRID, cb / GRID, cb % GRID);
        let ok = match rel {
            0 => ra == rb && ka < kb,
            1 => ra == rb && ka > kb,
            2 => ka == kb && ra < rb,
            _ => ka == kb && ra > rb,
        };
        if ok {
            return (ca, cb);
        }
    }
}

/// A text question whose picture shows the same content.
fn captioned_sample(rng: &mut impl Rng, p: &LangMmParams) -> Sample {
    match pick_weighted(rng, &p.task_weights) {
        0 => {
            let q = count_question(rng, p.max_objects, 0.75);
            let cells = random_cells(rng, q.objects.len());
            let scene = Scene {
                objects: q.objects.iter().zip(&cells).map(|(o, &c)| SceneObject::in_cell(shape_kind(o.0, o.1), c)).collect(),
            };
            Sample::from_parts(&q.prompt, &[q.answer], Some(scene), lang_mm_tag(), TaskKind::Count)
        }
        1 => {
            let q = relation_question(rng);
            let (ca, cb) = cells_for_relation(rng, q.rel);
            let scene = Scene {
                objects: vec![
                    SceneObject::in_cell(shape_kind(q.a.0, q.a.1), ca),
                    SceneObject::in_cell(shape_kind(q.b.0, q.b.1), cb),
                ],
            };
            Sample::from_parts(&q.prompt, &[q.answer], Some(scene), lang_mm_tag(), TaskKind::Relation)
        }
        _ => {
            let digits = random_digits(rng, p.max_digits);
            let glyphs = digit_glyphs(&digits);
            let scene = glyph_scene(digits.iter().map(|&d| char::from(b'0' + d as u8)));
            Sample::from_parts(&digits_prompt(&glyphs), &digit_words(&digits), Some(scene), lang_mm_tag(), TaskKind::Digits)
        }
    }
}

pub fn lang_mm_sample(rng: &mut impl Rng, p: &LangMmParams) -> Sample {
    if p.caption_prob > 0.0 && rng.random_bool(p.caption_prob.min(1.0)) {
        return captioned_sample(rng, p);
    }
    match pick_weighted(rng, &p.task_weights) {
        0 => mm_count(rng, p),
        1 => mm_relation(rng),
        _ => mm_digits(rng, p),
    }
}

pub fn gen_lang_mm_samples(seed: u64, n: usize, p: &LangMmParams) -> Vec<Sample> {
    let mut rng = rng_for(seed, "lang_mm");
    (0..n).map(|_| lang_mm_sample(&mut rng, p)).collect()
}

/// Sample with the given glyph string drawn row-major and copied as the answer.
pub fn copy_sample(text: &str) -> Sample {
    let scene = glyph_scene(text.chars());
    let letters: Vec<String> = text.chars().map(|c| c.to_string()).collect();
    let answer: Vec<&str> = letters.iter().map(String::as_str).collect();
    Sample::from_parts(&["read", "?"], &answer, Some(scene), ocr_tag(), TaskKind::Copy)
}

pub fn ocr_string(rng: &mut impl Rng, p: &OcrParams, words: &[String]) -> String {
    if rng.random_bool(p.word_fraction) {
        if let Some(w) = words.iter().filter(|w| (p.min_len..=p.max_len).contains(&w.len())).collect::<Vec<_>>().choose(rng) {
            return (*w).clone();
        }
    }
    let n = rng.random_range(p.min_len..=p.max_len);
    (0..n).map(|_| *GLYPHS.choose(rng).expect("glyphs")).collect()
}

pub fn gen_ocr_mm_samples(seed: u64, n: usize, p: &OcrParams) -> Vec<Sample> {
    let mut rng = rng_for(seed, "ocr");
    let words = glyph_words();
    (0..n).map(|_| copy_sample(&ocr_string(&mut rng, p, &words))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_cover_answer_and_eos() {
        let s = Sample::from_parts(&["how", "many", "red", "?"], &["two"], None, text_tag(), TaskKind::Count);
        let v = Vocab::get();
        assert_eq!(v.decode(&s.tokens), "<bos> <q> how many red ? <ans> two <eos>");
        assert_eq!(s.counted(), 2);
        assert_eq!(s.answer(), &[v.tok("two"), v.eos()]);
        assert_eq!(s.labels[6], v.tok("two") as i64);
        assert_eq!(s.labels[7], v.eos() as i64);
        assert_eq!(s.labels[8], IGNORE_INDEX);
    }

    #[test]
    fn copy_probe_string() {
        let s = copy_sample("PEAEC");
        let v = Vocab::get();
        let want: Vec<usize> = "PEAEC".chars().map(|c| v.glyph(c)).chain([v.eos()]).collect();
        assert_eq!(s.answer(), want.as_slice());
    }

    #[test]
    fn generators_are_deterministic() {
        let p = TextParams::default();
        assert_eq!(gen_text_corpus(5, 50, &p), gen_text_corpus(5, 50, &p));
        assert_ne!(gen_text_corpus(5, 50, &p), gen_text_corpus(6, 50, &p));
    }
}
