#![allow(dead_code)]

use std::path::Path;

use kvdistill::autograd::{Graph, IGNORE_INDEX};
use kvdistill::data::{DataConfig, Datasets, Vocab, IMAGE_SIZE};
use kvdistill::model::{ModelConfig, TeacherEmbeds, VisionConfig};
use kvdistill::params::ParamSet;
use kvdistill::pipeline::{gen_data, train_run, Layout};
use kvdistill::train::{RunConfig, RunOptions};
use kvdistill::transformer::{AttentionMask, Decoder, KvSource, PositionScheme, TransformerConfig};
use kvdistill::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        decoder: TransformerConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: Vocab::get().len(),
            max_seq: 48,
            d_ff: 32,
            position: PositionScheme::Rotary,
            rope_base: 10_000.0,
        },
        vision: VisionConfig {
            image_size: IMAGE_SIZE,
            patch_size: 12,
            d_vis: 8,
            depth: 1,
            n_heads: 1,
            d_ff: 16,
        },
        teacher_embeds: TeacherEmbeds::Shared,
    }
}

pub fn tiny_data() -> DataConfig {
    DataConfig {
        text_train: 200,
        lang_mm_train: 120,
        ocr_train: 120,
        eval_per_task: 24,
        ..DataConfig::default()
    }
}

/// A preset shrunk to the tiny model and data.
pub fn tiny_run(preset: &str, steps: usize, seed: u64) -> RunConfig {
    let mut c = RunConfig::preset(preset).unwrap();
    c.model = tiny_model();
    c.data = tiny_data();
    c.total_steps = steps;
    c.batch_size = 4;
    c.seed = seed;
    c
}

/// Generates data and trains short pretrain-lm and adapt-vlm runs.
pub fn prepare(layout: &Layout, seed: u64) -> Datasets {
    let data = gen_data(layout, seed, &tiny_data()).unwrap();
    train_run(layout, &tiny_run("pretrain-lm", 30, seed), &RunOptions::default()).unwrap();
    train_run(layout, &tiny_run("adapt-vlm", 20, seed), &RunOptions::default()).unwrap();
    data
}

pub fn dir_of(path: &Path) -> Layout {
    Layout::new(path)
}

/// A random decoder configuration small enough for exhaustive checks.
pub fn random_decoder_config(rng: &mut ChaCha8Rng) -> TransformerConfig {
    let n_heads = rng.random_range(1..=3);
    let d_head = [2, 4][rng.random_range(0..2)];
    TransformerConfig {
        n_layers: rng.random_range(1..=3),
        d_model: n_heads * d_head,
        n_heads,
        vocab_size: rng.random_range(5..=12),
        max_seq: 8,
        d_ff: rng.random_range(4..=12),
        position: if rng.random_bool(0.5) { PositionScheme::Rotary } else { PositionScheme::LearnedAbsolute },
        rope_base: 10_000.0,
    }
}

pub fn init_decoder(cfg: &TransformerConfig, seed: u64) -> (ParamSet, Decoder) {
    let mut params = ParamSet::new();
    let dec = Decoder::init(cfg, &mut params, "d", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (params, dec)
}

/// Random right-padding pattern with at least one real position per row.
pub fn random_padding(rng: &mut ChaCha8Rng, batch: usize, seq: usize) -> Vec<Vec<bool>> {
    (0..batch)
        .map(|_| {
            let real = rng.random_range(1..=seq);
            (0..seq).map(|p| p >= real).collect()
        })
        .collect()
}

/// Self-mode logits and the logits of the same decoder fed its own cache.
pub fn self_and_injected(
    params: &ParamSet,
    dec: &Decoder,
    x: &Tensor,
    mask: &AttentionMask,
) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let xv = dec.add_positions(&mut g, &bound, xv).unwrap();
    let own = dec.forward(&mut g, &bound, xv, mask, KvSource::Own).unwrap();
    let inj = dec.forward(&mut g, &bound, xv, mask, KvSource::Inject(&own.cache)).unwrap();
    (g.value(own.logits).clone(), g.value(inj.logits).clone())
}

/// Graph-free rendition of the mixed objective for a flattened batch:
/// `Σ_counted [α_b T² KL(p_t ‖ p_s) + (1 − α_b) CE] / N`.
pub fn scalar_objective(
    student: &[f64],
    teacher: &[f64],
    vocab: usize,
    labels: &[i64],
    mask: &[bool],
    alphas: &[f64],
    seq: usize,
    temperature: f64,
) -> Option<f64> {
    fn log_softmax(z: &[f64], t: f64) -> Vec<f64> {
        let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
        let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + scaled.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        scaled.iter().map(|v| v - lse).collect()
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for r in 0..labels.len() {
        if !mask[r] || labels[r] == IGNORE_INDEX {
            continue;
        }
        n += 1;
        let zs = &student[r * vocab..(r + 1) * vocab];
        let zt = &teacher[r * vocab..(r + 1) * vocab];
        let alpha = alphas[r / seq];
        let ce = -log_softmax(zs, 1.0)[labels[r] as usize];
        let mut kl = 0.0;
        if alpha > 0.0 {
            let (lt, ls) = (log_softmax(zt, temperature), log_softmax(zs, temperature));
            for j in 0..vocab {
                kl += lt[j].exp() * (lt[j] - ls[j]);
            }
        }
        total += alpha * temperature * temperature * kl + (1.0 - alpha) * ce;
    }
    (n > 0).then(|| total / n as f64)
}
