mod common;

use std::collections::HashSet;

use kvdistill::autograd::IGNORE_INDEX;
use kvdistill::data::{
    collate_batch, copy_sample, gen_lang_mm_samples, gen_ocr_mm_samples, gen_text_corpus, glyph_bitmap, glyph_words,
    render_image, sample_hash, shape_bitmap, DataConfig, Datasets, Image, LangMmParams, OcrParams, Sample, TaskKind,
    TextParams, Vocab, CELL, COLORS, COLOR_INTENSITY, GLYPHS, GLYPH_SIZE, GRID, IMAGE_SIZE, NUMBER_WORDS, RELATIONS,
    SHAPES,
};

fn words(ids: &[usize]) -> Vec<String> {
    let v = Vocab::get();
    ids.iter().map(|&i| v.symbol(i).unwrap().to_string()).collect()
}

fn prompt_words(s: &Sample) -> Vec<String> {
    // Skip <bos> <q>, stop before <ans>.
    words(&s.tokens[2..s.answer_start() - 1])
}

fn answer_words(s: &Sample) -> Vec<String> {
    let a = s.answer();
    words(&a[..a.len() - 1])
}

fn binomial(n: usize, k: usize, p: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    let c = (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

#[test]
fn count_answers_follow_analytic_marginal() {
    let p = TextParams {
        task_weights: [1.0, 0.0, 0.0, 0.0],
        ..TextParams::default()
    };
    let n = 10_000;
    let samples = gen_text_corpus(17, n, &p);
    let mut freq = [0usize; 10];
    for s in &samples {
        assert_eq!(s.task, TaskKind::Count);
        let a = answer_words(s);
        freq[NUMBER_WORDS.iter().position(|w| *w == a[0]).unwrap()] += 1;
    }
    // Objects per list are uniform on 1..=max; the queried attribute either
    // comes from a listed object (one guaranteed hit plus Binomial(n-1, 1/4))
    // or is uniform (Binomial(n, 1/4)).
    let m = p.max_objects;
    for k in 0..=m {
        let mut want = 0.0;
        for objs in 1..=m {
            let present = if k >= 1 { binomial(objs - 1, k - 1, 0.25) } else { 0.0 };
            want += (p.present_prob * present + (1.0 - p.present_prob) * binomial(objs, k, 0.25)) / m as f64;
        }
        let got = freq[k] as f64 / n as f64;
        assert!((got - want).abs() <= 0.05, "count {k}: empirical {got:.4} vs analytic {want:.4}");
    }
    assert_eq!(freq[m + 1..].iter().sum::<usize>(), 0);
}

#[derive(Debug, PartialEq)]
enum Sprite {
    Shape { shape: usize, color: usize },
    Glyph(char),
}

/// Reads the 5x5 block of one grid cell, matching the lit pattern against
/// the shape sprites (with the intensity giving the colour) or the font.
fn read_cell(img: &Image, cell: usize, glyphs: bool) -> Option<Sprite> {
    let (y0, x0) = ((cell / GRID) * CELL, (cell % GRID) * CELL);
    let mut lit = [[false; GLYPH_SIZE]; GLYPH_SIZE];
    let mut intensity: f64 = 0.0;
    for (dy, row) in lit.iter_mut().enumerate() {
        for (dx, px) in row.iter_mut().enumerate() {
            let v = img.at(y0 + dy, x0 + dx);
            *px = v > 0.0;
            intensity = intensity.max(v);
        }
    }
    if intensity == 0.0 {
        return None;
    }
    if glyphs {
        let c = GLYPHS.iter().copied().find(|&c| glyph_bitmap(c).unwrap() == lit)?;
        return Some(Sprite::Glyph(c));
    }
    let shape = (0..4).find(|&s| shape_bitmap(s) == lit)?;
    let color = COLOR_INTENSITY.iter().position(|&c| c == intensity)?;
    Some(Sprite::Shape { shape, color })
}

fn read_image(img: &Image, glyphs: bool) -> Vec<(usize, Sprite)> {
    (0..GRID * GRID).filter_map(|c| read_cell(img, c, glyphs).map(|s| (c, s))).collect()
}

/// Answers a grounded question from the rendered pixels alone.
fn interpret(s: &Sample) -> Vec<String> {
    let img = render_image(s.scene.as_ref().unwrap(), IMAGE_SIZE).unwrap();
    let prompt = prompt_words(s);
    match s.task {
        TaskKind::MmCount => {
            let objs = read_image(&img, false);
            let w = prompt[2].as_str();
            let n = objs
                .iter()
                .filter(|(_, o)| match o {
                    Sprite::Shape { shape, color } => w == "shapes" || SHAPES[*shape] == w || COLORS[*color] == w,
                    Sprite::Glyph(_) => false,
                })
                .count();
            vec![NUMBER_WORDS[n].to_string()]
        }
        TaskKind::MmRelation => {
            let objs = read_image(&img, false);
            let (color, shape) = (&prompt[2], &prompt[3]);
            let is_q = |o: &Sprite| matches!(o, Sprite::Shape { shape: s, color: c } if SHAPES[*s] == shape && COLORS[*c] == color);
            let q = objs.iter().find(|(_, o)| is_q(o)).unwrap().0;
            let other = objs.iter().find(|(_, o)| !is_q(o)).unwrap().0;
            let (qr, qc, or, oc) = (q / GRID, q % GRID, other / GRID, other % GRID);
            let rel = if qr == or {
                if qc < oc { 0 } else { 1 }
            } else if qr < or {
                2
            } else {
                3
            };
            vec![RELATIONS[rel].to_string()]
        }
        TaskKind::MmDigits => read_image(&img, true)
            .into_iter()
            .map(|(_, g)| match g {
                Sprite::Glyph(c) => NUMBER_WORDS[c.to_digit(10).unwrap() as usize].to_string(),
                other => panic!("unexpected sprite {other:?}"),
            })
            .collect(),
        t => panic!("not a grounded task: {t:?}"),
    }
}

#[test]
fn grounded_questions_agree_with_pixel_interpreter() {
    let samples = gen_lang_mm_samples(3, 1000, &LangMmParams::default().grounded());
    let mut tasks = HashSet::new();
    for (i, s) in samples.iter().enumerate() {
        tasks.insert(s.task);
        assert_eq!(interpret(s), answer_words(s), "sample {i}: {}", Vocab::get().decode(&s.tokens));
    }
    assert_eq!(tasks.len(), 3);
}

#[test]
fn captioned_questions_show_their_text() {
    let p = LangMmParams {
        caption_prob: 1.0,
        ..LangMmParams::default()
    };
    for s in gen_lang_mm_samples(4, 300, &p) {
        let img = render_image(s.scene.as_ref().unwrap(), IMAGE_SIZE).unwrap();
        let prompt = prompt_words(&s);
        match s.task {
            TaskKind::Count => {
                let listed = prompt.iter().take_while(|w| *w != ".").filter(|w| SHAPES.contains(&w.as_str())).count();
                assert_eq!(read_image(&img, false).len(), listed);
            }
            TaskKind::Relation => assert_eq!(read_image(&img, false).len(), 2),
            TaskKind::Digits => {
                let digits: String = prompt.iter().take_while(|w| *w != "as").map(String::as_str).collect();
                let drawn: String = read_image(&img, true)
                    .into_iter()
                    .map(|(_, g)| match g {
                        Sprite::Glyph(c) => c,
                        _ => unreachable!(),
                    })
                    .collect();
                assert_eq!(drawn, digits);
            }
            t => panic!("unexpected task {t:?}"),
        }
    }
}

#[test]
fn copy_answers_match_pixel_reading() {
    let samples = gen_ocr_mm_samples(5, 500, &OcrParams::default());
    for s in samples.iter().chain([&copy_sample("PEAEC")]) {
        let img = render_image(s.scene.as_ref().unwrap(), IMAGE_SIZE).unwrap();
        let read: Vec<String> = read_image(&img, true)
            .into_iter()
            .map(|(_, g)| match g {
                Sprite::Glyph(c) => c.to_string(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(read, answer_words(s));
    }
    let probe = copy_sample("PEAEC");
    assert_eq!(answer_words(&probe).concat(), "PEAEC");
    assert_eq!(probe.counted(), 6);
}

#[test]
fn most_copy_strings_are_not_words() {
    let known: HashSet<String> = glyph_words().into_iter().collect();
    let samples = gen_ocr_mm_samples(6, 4000, &OcrParams::default());
    let non_words = samples.iter().filter(|s| !known.contains(&answer_words(s).concat())).count();
    let frac = non_words as f64 / samples.len() as f64;
    assert!(frac >= 0.6, "only {frac:.3} of copy strings are non-words");
    for s in &samples {
        assert!((3..=6).contains(&answer_words(s).len()));
    }
}

#[test]
fn collate_counts_answer_positions() {
    let data = gen_text_corpus(8, 12, &TextParams::default());
    let refs: Vec<&Sample> = data.iter().collect();
    let b = collate_batch(&refs, 48).unwrap();
    let width = data.iter().map(Sample::len).max().unwrap();
    assert_eq!(b.seq_len(), width);
    let mut n = 0;
    for (i, s) in data.iter().enumerate() {
        assert_eq!(&b.tokens[i][..s.len()], &s.tokens[..]);
        assert!(b.tokens[i][s.len()..].iter().all(|&t| t == Vocab::get().pad()));
        assert!(b.labels[i][s.len()..].iter().all(|&l| l == IGNORE_INDEX));
        assert_eq!(b.mask[i].iter().filter(|&&m| m).count(), s.len());
        n += s.labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
    }
    assert_eq!(b.counted(), n);
    assert!(collate_batch(&refs, width - 1).is_err());
}

#[test]
fn datasets_are_deterministic_and_eval_is_disjoint() {
    let cfg = common::tiny_data();
    let a = Datasets::generate(9, &cfg).unwrap();
    let b = Datasets::generate(9, &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.text_train, Datasets::generate(10, &cfg).unwrap().text_train);
    assert_eq!(a.manifest, Datasets::generate_manifest(9, &cfg).unwrap());

    let train: HashSet<[u8; 32]> = a.text_train.iter().chain(&a.lang_mm_train).chain(&a.ocr_train).map(sample_hash).collect();
    for s in a.text_eval.iter().chain(&a.mm_eval).chain(&a.ocr_eval) {
        assert!(!train.contains(&sample_hash(s)));
    }
    assert!(a.text_eval.iter().all(|s| s.task != TaskKind::Spell));
    assert!(a.mm_eval.iter().all(|s| matches!(s.task, TaskKind::MmCount | TaskKind::MmRelation | TaskKind::MmDigits)));

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    assert_eq!(Datasets::load(dir.path()).unwrap(), a);
}

#[test]
fn default_sizes_fit_the_sequence_budget() {
    let cfg = DataConfig::default();
    let d = Datasets::generate(
        0,
        &DataConfig {
            text_train: 2000,
            lang_mm_train: 2000,
            ocr_train: 2000,
            eval_per_task: 200,
            ..cfg
        },
    )
    .unwrap();
    let longest = d
        .text_train
        .iter()
        .chain(&d.lang_mm_train)
        .chain(&d.ocr_train)
        .map(Sample::len)
        .max()
        .unwrap();
    let lab = kvdistill::train::lab_model();
    let image_tokens = (IMAGE_SIZE / lab.vision.patch_size).pow(2);
    assert!(longest + image_tokens <= lab.decoder.max_seq, "{longest}");
}
