//! Fast structural checks runnable from the command line: gradients, cache
//! injection, objective arithmetic, masking and data determinism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, Graph, IGNORE_INDEX};
use crate::data::{DataConfig, Datasets};
use crate::error::Result;
use crate::objective::{combined_loss, hard_only_loss, AlphaPolicy, Positions, SourceCategory, SourceTag};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::transformer::{causal_attention, AttentionMask, Decoder, KvSource, PositionScheme, TransformerConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!("{} {:<28} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn tiny_decoder(rng: &mut ChaCha8Rng, position: PositionScheme) -> Result<(TransformerConfig, ParamSet, Decoder)> {
    let cfg = TransformerConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        vocab_size: 11,
        max_seq: 8,
        d_ff: 12,
        position,
        rope_base: 10_000.0,
    };
    let mut params = ParamSet::new();
    let dec = Decoder::init(&cfg, &mut params, "d", rng)?;
    Ok((cfg, params, dec))
}

fn check_gradients(seed: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for s in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s));
        let (b, n, h, dh) = (1, 3, 2, 2);
        let mask = AttentionMask::causal_batch(&[vec![false, false, true]])?;
        let inputs = vec![
            Tensor::randn([b, n, h, dh], 1.0, &mut rng),
            Tensor::randn([b, n, h, dh], 1.0, &mut rng),
            Tensor::randn([b, n, h, dh], 1.0, &mut rng),
            Tensor::randn([h * dh, 5], 0.5, &mut rng),
        ];
        let targets = [Some(1), None, Some(4)];
        let report = grad_check(
            |g, v| {
                let a = causal_attention(g, v[0], v[1], v[2], &mask)?;
                let a = g.reshape(a, [n, h * dh])?;
                let z = g.matmul(a, v[3])?;
                let ce = g.cross_entropy_rows(z, &targets)?;
                Ok(g.sum(ce))
            },
            &inputs,
            1e-5,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(CheckResult {
        name: "gradient check",
        passed: worst < 1e-4,
        detail: format!("attention+loss max rel err {worst:.2e}"),
    })
}

fn check_injection(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cfg, params, dec) = tiny_decoder(&mut rng, PositionScheme::Rotary)?;
    let x = Tensor::randn([2, 5, cfg.d_model], 1.0, &mut rng);
    let mask = AttentionMask::causal_batch(&[vec![false; 5], vec![false, false, false, true, true]])?;

    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let own = dec.forward(&mut g, &bound, xv, &mask, KvSource::Own)?;
    let injected = dec.forward(&mut g, &bound, xv, &mask, KvSource::Inject(&own.cache))?;
    let identity = g.value(own.logits).bitwise_eq(g.value(injected.logits));

    let mut tg = Graph::new();
    let tbound = params.bind_frozen(&mut tg);
    let cache = own.cache.transfer(&g, &mut tg);
    let tx = tg.constant(x);
    let cross = dec.forward(&mut tg, &tbound, tx, &mask, KvSource::Inject(&cache))?;
    let diff = g.value(own.logits).max_abs_diff(tg.value(cross.logits));
    Ok(CheckResult {
        name: "kv injection",
        passed: identity && diff <= 1e-10,
        detail: format!("self-inject bitwise {identity}, cross-graph max diff {diff:.1e}"),
    })
}

/// Straight-line rendition of the mixture for one flattened batch.
fn scalar_mixture(student: &Tensor, teacher: &Tensor, labels: &[i64], alphas: &[f64], seq: usize, t: f64) -> f64 {
    let v = student.last_dim();
    let log_softmax = |row: &[f64], temp: f64| -> Vec<f64> {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / temp));
        let z: f64 = row.iter().map(|&x| (x / temp - m).exp()).sum();
        row.iter().map(|&x| x / temp - m - z.ln()).collect()
    };
    let (mut total, mut n) = (0.0, 0usize);
    for (r, &label) in labels.iter().enumerate() {
        if label == IGNORE_INDEX {
            continue;
        }
        n += 1;
        let alpha = alphas[r / seq];
        let ls = log_softmax(&student.data()[r * v..(r + 1) * v], 1.0);
        let hard = -ls[label as usize];
        let mut soft = 0.0;
        if alpha > 0.0 {
            let lt = log_softmax(&teacher.data()[r * v..(r + 1) * v], t);
            let lst = log_softmax(&student.data()[r * v..(r + 1) * v], t);
            soft = t * t * (0..v).map(|j| lt[j].exp() * (lt[j] - lst[j])).sum::<f64>();
        }
        total += alpha * soft + (1.0 - alpha) * hard;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

fn check_objective(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut collapse = true;
    for _ in 0..20 {
        let (b, s, v) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(2..=16));
        let student = Tensor::randn([b * s, v], 2.0, &mut rng);
        let teacher = Tensor::randn([b * s, v], 2.0, &mut rng);
        let labels: Vec<i64> = (0..b * s)
            .map(|_| if rng.random_bool(0.3) { IGNORE_INDEX } else { rng.random_range(0..v) as i64 })
            .collect();
        let mask = vec![true; b * s];
        let tags: Vec<SourceTag> = (0..b)
            .map(|_| {
                let c = if rng.random_bool(0.5) { SourceCategory::LanguageHeavy } else { SourceCategory::OcrHeavy };
                SourceTag::new(c.as_str(), c)
            })
            .collect();
        let t = [1.0, 2.0, 4.0][rng.random_range(0..3)];
        let a = [0.0, 0.3, 0.5, 0.7, 1.0][rng.random_range(0..5)];
        let policy = AlphaPolicy::selective(a, t)?;
        let pos = Positions {
            labels: &labels,
            mask: &mask,
            seq_len: s,
            tags: &tags,
        };
        let mut g = Graph::new();
        let z = g.param(student.clone());
        let obj = combined_loss(&mut g, Some(&teacher), z, &pos, &policy)?;
        let alphas: Vec<f64> = tags.iter().map(|tag| policy.alpha_for(tag)).collect::<Result<_>>()?;
        let want = scalar_mixture(&student, &teacher, &labels, &alphas, s, t);
        worst = worst.max((g.value(obj.loss).item() - want).abs());

        let zero = AlphaPolicy::uniform(0.0, t)?;
        let mut g1 = Graph::new();
        let z1 = g1.param(student.clone());
        let l1 = combined_loss(&mut g1, None, z1, &pos, &zero)?.loss;
        let mut g2 = Graph::new();
        let z2 = g2.param(student);
        let l2 = hard_only_loss(&mut g2, z2, &pos)?.loss;
        collapse &= g1.value(l1).bitwise_eq(g2.value(l2));
        if !obj.breakdown.empty {
            g1.backward(l1)?;
            g2.backward(l2)?;
            collapse &= match (g1.grad(z1), g2.grad(z2)) {
                (Some(a), Some(b)) => a.bitwise_eq(&b),
                _ => false,
            };
        }
    }
    Ok(CheckResult {
        name: "objective",
        passed: worst <= 1e-10 && collapse,
        detail: format!("oracle max diff {worst:.1e}, alpha=0 collapse bitwise {collapse}"),
    })
}

fn check_mask() -> Result<CheckResult> {
    let m = AttentionMask::causal(3, &[false, false, true])?;
    let mut ok = true;
    for i in 0..3 {
        for j in 0..3 {
            ok &= m.is_visible(0, i, j) == (j <= i && j != 2);
        }
    }
    Ok(CheckResult {
        name: "causal mask",
        passed: ok,
        detail: "3x3 with padded last column".into(),
    })
}

fn check_data(seed: u64) -> Result<CheckResult> {
    let cfg = DataConfig {
        text_train: 40,
        lang_mm_train: 20,
        ocr_train: 20,
        eval_per_task: 10,
        ..DataConfig::default()
    };
    let a = Datasets::generate(seed, &cfg)?;
    let b = Datasets::generate(seed, &cfg)?;
    let planned = Datasets::generate_manifest(seed, &cfg)?;
    let same = a.manifest == b.manifest && a.manifest == planned;
    Ok(CheckResult {
        name: "data determinism",
        passed: same,
        detail: format!("{} record files hashed", a.manifest.entries.len()),
    })
}

/// Runs every check; an error inside a check is reported as a failure.
pub fn run_selfcheck(seed: u64) -> Vec<CheckResult> {
    let named: [(&'static str, Box<dyn Fn() -> Result<CheckResult>>); 5] = [
        ("gradient check", Box::new(move || check_gradients(seed))),
        ("kv injection", Box::new(move || check_injection(seed))),
        ("objective", Box::new(move || check_objective(seed))),
        ("causal mask", Box::new(check_mask)),
        ("data determinism", Box::new(move || check_data(seed))),
    ];
    named
        .into_iter()
        .map(|(name, f)| {
            f().unwrap_or_else(|e| CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            })
        })
        .collect()
}
