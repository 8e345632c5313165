//! Central-difference checks for every differentiable primitive and for an
//! attention block feeding the mixed objective.

use std::sync::Arc;

use kvdistill::autograd::{grad_check, Graph, Var, IGNORE_INDEX};
use kvdistill::objective::{combined_loss, AlphaPolicy, Positions, SourceCategory, SourceTag};
use kvdistill::transformer::AttentionMask;
use kvdistill::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Reduces `v` to a scalar through a fixed random weighting so that every
/// output element contributes a distinct gradient.
fn probe(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph, &[Var], u64) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make_inputs(&mut rng);
        let report = grad_check(|g, v| f(g, v, seed), &inputs, STEP).unwrap();
        assert!(report.passes(TOL), "{name} seed {seed}: max rel err {:.3e}", report.max_rel_error);
        worst = worst.max(report.max_rel_error);
    }
    println!("{name:<22} worst rel err over {SEEDS} seeds: {worst:.2e}");
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

#[test]
fn elementwise_primitives() {
    check("add", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |g, v, s| {
        let y = g.add(v[0], v[1])?;
        probe(g, y, s)
    });
    check("mul", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |g, v, s| {
        let y = g.mul(v[0], v[1])?;
        probe(g, y, s)
    });
    check("scale", |r| vec![randn(r, &[5])], |g, v, s| {
        let y = g.scale(v[0], -2.5);
        probe(g, y, s)
    });
    check("neg", |r| vec![randn(r, &[2, 3])], |g, v, s| {
        let y = g.neg(v[0]);
        probe(g, y, s)
    });
    check("add_row", |r| vec![randn(r, &[2, 3, 4]), randn(r, &[4])], |g, v, s| {
        let y = g.add_row(v[0], v[1])?;
        probe(g, y, s)
    });
    check("map(tanh)", |r| vec![randn(r, &[6])], |g, v, s| {
        let y = g.map(v[0], |x| (x.tanh(), 1.0 - x.tanh() * x.tanh()));
        probe(g, y, s)
    });
    check("gelu", |r| vec![randn(r, &[3, 5])], |g, v, s| {
        let y = g.gelu(v[0]);
        probe(g, y, s)
    });
    check("sum", |r| vec![randn(r, &[4, 2])], |g, v, _| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    });
}

#[test]
fn shape_primitives() {
    check("matmul", |r| vec![randn(r, &[2, 3, 4]), randn(r, &[4, 5])], |g, v, s| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, s)
    });
    check("transpose", |r| vec![randn(r, &[3, 4])], |g, v, s| {
        let y = g.transpose(v[0])?;
        probe(g, y, s)
    });
    check("reshape", |r| vec![randn(r, &[3, 4])], |g, v, s| {
        let y = g.reshape(v[0], [2, 6])?;
        probe(g, y, s)
    });
    check("concat", |r| vec![randn(r, &[2, 3, 2]), randn(r, &[2, 1, 2])], |g, v, s| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        probe(g, y, s)
    });
    check("slice", |r| vec![randn(r, &[2, 5, 3])], |g, v, s| {
        let y = g.slice(v[0], 1, 1, 3)?;
        probe(g, y, s)
    });
    check("embedding", |r| vec![randn(r, &[6, 3])], |g, v, s| {
        let y = g.embedding(v[0], &[2, 0, 2, 5])?;
        probe(g, y, s)
    });
    check("gather_rows", |r| vec![randn(r, &[2, 3, 4])], |g, v, s| {
        let y = g.gather_rows(v[0], &[5, 1, 1])?;
        probe(g, y, s)
    });
}

#[test]
fn neural_primitives() {
    check("softmax", |r| vec![randn(r, &[3, 5])], |g, v, s| {
        let y = g.softmax(v[0])?;
        probe(g, y, s)
    });
    check("rms_norm", |r| vec![randn(r, &[3, 6]), randn(r, &[6])], |g, v, s| {
        let y = g.rms_norm(v[0], v[1], 1e-5)?;
        probe(g, y, s)
    });
    check("rotary", |r| vec![randn(r, &[2, 4, 2, 4])], |g, v, s| {
        let y = g.rotary(v[0], 10_000.0)?;
        probe(g, y, s)
    });
    check(
        "attention",
        |r| vec![randn(r, &[2, 4, 2, 3]), randn(r, &[2, 4, 2, 3]), randn(r, &[2, 4, 2, 3])],
        |g, v, s| {
            let mask = AttentionMask::causal_batch(&[vec![false; 4], vec![false, false, true, true]])?;
            let y = g.attention(v[0], v[1], v[2], mask.additive())?;
            probe(g, y, s)
        },
    );
    check(
        "attention (cross)",
        |r| vec![randn(r, &[1, 2, 1, 2]), randn(r, &[1, 3, 1, 2]), randn(r, &[1, 3, 1, 2])],
        |g, v, s| {
            let mask = Arc::new(vec![0.0, -1e9, 0.0, 0.0, 0.0, -1e9]);
            let y = g.attention(v[0], v[1], v[2], mask)?;
            probe(g, y, s)
        },
    );
}

#[test]
fn loss_primitives() {
    check("cross_entropy_rows", |r| vec![randn(r, &[4, 6])], |g, v, _| {
        let y = g.cross_entropy_rows(v[0], &[Some(1), None, Some(5), Some(0)])?;
        Ok(g.sum(y))
    });
    check("cross_entropy_masked", |r| vec![randn(r, &[3, 5])], |g, v, _| {
        Ok(g.cross_entropy_masked(v[0], &[4, IGNORE_INDEX, 2], IGNORE_INDEX)?.0)
    });
    for t in [1.0, 2.0, 4.0] {
        check(
            &format!("kl_rows T={t}"),
            |r| vec![randn(r, &[3, 5])],
            |g, v, s| {
                let teacher = Tensor::randn([3, 5], 2.0, &mut ChaCha8Rng::seed_from_u64(s + 100));
                let y = g.kl_rows(&teacher, v[0], &[true, false, true], t)?;
                Ok(g.sum(y))
            },
        );
    }
    check("kl_divergence_masked", |r| vec![randn(r, &[2, 4])], |g, v, s| {
        let teacher = Tensor::randn([2, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(s + 7));
        Ok(g.kl_divergence_masked(&teacher, v[0], &[true, true], 2.0)?.0)
    });
}

/// Normalised attention block with rotary queries/keys, an output head and
/// the mixed soft/hard objective on top.
#[test]
fn attention_and_objective_composite() {
    let (b, s, h, dh, v) = (2usize, 4usize, 2usize, 2usize, 5usize);
    let d = h * dh;
    check(
        "attention+objective",
        |r| {
            vec![
                randn(r, &[b, s, d]),
                randn(r, &[d]),
                randn(r, &[d, d]),
                randn(r, &[d, d]),
                randn(r, &[d, d]),
                randn(r, &[d, v]),
            ]
        },
        |g, p, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let x = g.rms_norm(p[0], p[1], 1e-5)?;
            let q = g.matmul(x, p[2])?;
            let k = g.matmul(x, p[3])?;
            let val = g.matmul(x, p[4])?;
            let q = g.reshape(q, [b, s, h, dh])?;
            let k = g.reshape(k, [b, s, h, dh])?;
            let val = g.reshape(val, [b, s, h, dh])?;
            let q = g.rotary(q, 10_000.0)?;
            let k = g.rotary(k, 10_000.0)?;
            let mask = AttentionMask::causal_batch(&[vec![false; s], vec![false, false, false, true]])?;
            let a = g.attention(q, k, val, mask.additive())?;
            let a = g.reshape(a, [b, s, d])?;
            let z = g.matmul(a, p[5])?;
            let labels: Vec<i64> = (0..b * s)
                .map(|i| if i % 3 == 0 { IGNORE_INDEX } else { rng.random_range(0..v) as i64 })
                .collect();
            let mask_flat: Vec<bool> = (0..b * s).map(|i| i != b * s - 1).collect();
            let tags = [
                SourceTag::new("lang", SourceCategory::LanguageHeavy),
                SourceTag::new("ocr", SourceCategory::OcrHeavy),
            ];
            let teacher = Tensor::randn([b * s, v], 1.5, &mut rng);
            let pos = Positions {
                labels: &labels,
                mask: &mask_flat,
                seq_len: s,
                tags: &tags,
            };
            let policy = AlphaPolicy::new(0.7, 0.3, 4.0)?;
            Ok(combined_loss(g, Some(&teacher), z, &pos, &policy)?.loss)
        },
    );
}

#[test]
fn corrupted_derivative_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn([8], 1.0, &mut rng);
    let good = grad_check(
        |g, v| {
            let y = g.map(v[0], |x| (x.sin(), x.cos()));
            Ok(g.sum(y))
        },
        std::slice::from_ref(&x),
        STEP,
    )
    .unwrap();
    assert!(good.passes(TOL));
    let bad = grad_check(
        |g, v| {
            let y = g.map(v[0], |x| (x.sin(), 1.01 * x.cos()));
            Ok(g.sum(y))
        },
        &[x],
        STEP,
    )
    .unwrap();
    assert!(!bad.passes(TOL), "a 1% derivative error went unnoticed: {:.3e}", bad.max_rel_error);
}
