//! Synthetic sources, their splits and on-disk materialisation.

mod collate;
mod font;
mod generators;
mod io;
mod scene;
mod vocab;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use collate::{collate_batch, Batch};
pub use font::{glyph_bitmap, shape_bitmap, Bitmap, GLYPH_SIZE};
pub use generators::{
    copy_sample, gen_lang_mm_samples, gen_ocr_mm_samples, gen_text_corpus, lang_mm_sample, ocr_string, text_sample,
    LangMmParams, OcrParams, Sample, TaskKind, TextParams, LANG_MM_SOURCE, OCR_SOURCE, TEXT_SOURCE,
};
pub use io::{
    encode_sample, read_records, sample_hash, write_records, Manifest, ManifestEntry, RECORD_MAGIC, RECORD_VERSION,
};
pub use scene::{render_image, Image, ObjectKind, Scene, SceneObject, CELL, GRID, IMAGE_SIZE};
pub use vocab::{
    glyph_words, inverse_relation, Vocab, ANSWER, BOS, COLORS, COLOR_INTENSITY, EOS, GLYPHS, NUMBER_WORDS, PAD,
    QUESTION, RELATIONS, SHAPES,
};

use crate::error::{Error, Result};
use crate::objective::SourceCategory;
use crate::seed::{derive_seed, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub text_train: usize,
    pub lang_mm_train: usize,
    pub ocr_train: usize,
    pub eval_per_task: usize,
    pub text: TextParams,
    pub lang_mm: LangMmParams,
    pub ocr: OcrParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            text_train: 20_000,
            lang_mm_train: 8_000,
            ocr_train: 8_000,
            eval_per_task: 1_000,
            text: TextParams::default(),
            lang_mm: LangMmParams::default(),
            ocr: OcrParams::default(),
        }
    }
}

impl DataConfig {
    /// Text parameters for held-out questions: spelling prompts are a
    /// training-only auxiliary and never evaluated.
    pub fn text_eval_params(&self) -> TextParams {
        let mut p = self.text.clone();
        p.task_weights[3] = 0.0;
        p
    }
}

/// Every split the pipeline uses. Training and evaluation streams come from
/// differently labelled sub-seeds, and evaluation samples whose content also
/// occurs in training are redrawn.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub text_train: Vec<Sample>,
    pub lang_mm_train: Vec<Sample>,
    pub ocr_train: Vec<Sample>,
    pub text_eval: Vec<Sample>,
    pub mm_eval: Vec<Sample>,
    pub ocr_eval: Vec<Sample>,
    pub manifest: Manifest,
}

const FILES: [(&str, &str); 6] = [
    ("train", "text"),
    ("train", "lang_mm"),
    ("train", "ocr"),
    ("eval", "text_qa"),
    ("eval", "mm_qa"),
    ("eval", "ocr_copy"),
];

fn draw_disjoint(n: usize, seen: &HashSet<[u8; 32]>, mut draw: impl FnMut() -> Sample) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 50 * n + 1000 {
            return Err(Error::Config(format!(
                "could only draw {} of {n} evaluation samples disjoint from training",
                out.len()
            )));
        }
        let s = draw();
        if !seen.contains(&sample_hash(&s)) {
            out.push(s);
        }
    }
    Ok(out)
}

impl Datasets {
    pub fn generate(seed: u64, cfg: &DataConfig) -> Result<Self> {
        let seeds: Vec<u64> = FILES.iter().map(|(split, name)| derive_seed(seed, &format!("{split}/{name}"))).collect();
        let text_train = gen_text_corpus(seeds[0], cfg.text_train, &cfg.text);
        let lang_mm_train = gen_lang_mm_samples(seeds[1], cfg.lang_mm_train, &cfg.lang_mm);
        let ocr_train = gen_ocr_mm_samples(seeds[2], cfg.ocr_train, &cfg.ocr);
        let seen: HashSet<[u8; 32]> = text_train
            .iter()
            .chain(&lang_mm_train)
            .chain(&ocr_train)
            .map(sample_hash)
            .collect();

        let text_eval_params = cfg.text_eval_params();
        let mut rng = rng_for(seeds[3], "text");
        let text_eval = draw_disjoint(cfg.eval_per_task, &seen, || text_sample(&mut rng, &text_eval_params))?;
        let mut rng = rng_for(seeds[4], "lang_mm");
        let mm_eval_params = cfg.lang_mm.grounded();
        let mm_eval = draw_disjoint(cfg.eval_per_task, &seen, || lang_mm_sample(&mut rng, &mm_eval_params))?;
        let mut rng = rng_for(seeds[5], "ocr");
        let words = glyph_words();
        let ocr_eval = draw_disjoint(cfg.eval_per_task, &seen, || copy_sample(&ocr_string(&mut rng, &cfg.ocr, &words)))?;

        let manifest = Self::generate_manifest(seed, cfg)?;
        Ok(Self {
            text_train,
            lang_mm_train,
            ocr_train,
            text_eval,
            mm_eval,
            ocr_eval,
            manifest,
        })
    }

    /// The manifest `generate` produces, without drawing any samples.
    pub fn generate_manifest(seed: u64, cfg: &DataConfig) -> Result<Manifest> {
        let params = [
            json(&cfg.text),
            json(&cfg.lang_mm),
            json(&cfg.ocr),
            json(&cfg.text_eval_params()),
            json(&cfg.lang_mm.grounded()),
            json(&cfg.ocr),
        ];
        let counts = [
            cfg.text_train,
            cfg.lang_mm_train,
            cfg.ocr_train,
            cfg.eval_per_task,
            cfg.eval_per_task,
            cfg.eval_per_task,
        ];
        let cats = [
            SourceCategory::LanguageHeavy,
            SourceCategory::LanguageHeavy,
            SourceCategory::OcrHeavy,
            SourceCategory::LanguageHeavy,
            SourceCategory::LanguageHeavy,
            SourceCategory::OcrHeavy,
        ];
        Ok(Manifest {
            entries: (0..FILES.len())
                .map(|i| ManifestEntry {
                    name: FILES[i].1.to_string(),
                    split: FILES[i].0.to_string(),
                    category: cats[i],
                    count: counts[i],
                    seed: derive_seed(seed, &format!("{}/{}", FILES[i].0, FILES[i].1)),
                    params: params[i].clone(),
                })
                .collect(),
        })
    }

    fn parts(&self) -> [&Vec<Sample>; 6] {
        [
            &self.text_train,
            &self.lang_mm_train,
            &self.ocr_train,
            &self.text_eval,
            &self.mm_eval,
            &self.ocr_eval,
        ]
    }

    /// Writes `manifest.txt` and one record file per split/source into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.txt"), self.manifest.render())?;
        for ((split, name), samples) in FILES.iter().zip(self.parts()) {
            write_records(&dir.join(format!("{split}_{name}.bin")), samples)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        if !manifest_path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "dataset manifest {} (run gen-data first)",
                manifest_path.display()
            )));
        }
        let manifest = Manifest::parse(&fs::read_to_string(&manifest_path)?)?;
        let mut parts = Vec::with_capacity(FILES.len());
        for (split, name) in FILES {
            let samples = read_records(&dir.join(format!("{split}_{name}.bin")))?;
            let entry = manifest
                .entries
                .iter()
                .find(|e| e.split == split && e.name == name)
                .ok_or_else(|| Error::Format(format!("manifest lacks {split}/{name}")))?;
            if entry.count != samples.len() {
                return Err(Error::Format(format!(
                    "{split}/{name}: manifest says {} samples, file holds {}",
                    entry.count,
                    samples.len()
                )));
            }
            parts.push(samples);
        }
        let mut it = parts.into_iter();
        let mut next = || it.next().expect("six parts");
        Ok(Self {
            text_train: next(),
            lang_mm_train: next(),
            ocr_train: next(),
            text_eval: next(),
            mm_eval: next(),
            ocr_eval: next(),
            manifest,
        })
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("generator params serialise")
}
