use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kvdistill::autograd::Graph;
use kvdistill::{AttentionMask, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [48, 128, 256] {
        let a = Tensor::randn([n, n], 1.0, &mut rng);
        let b = Tensor::randn([n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::new("fwd+bwd", n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.param(a.clone());
                let y = g.param(b.clone());
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z);
                g.backward(s).unwrap();
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, h, dh) = (16, 4, 12);
    for s in [16, 48] {
        let q = Tensor::randn([b, s, h, dh], 1.0, &mut rng);
        let k = Tensor::randn([b, s, h, dh], 1.0, &mut rng);
        let v = Tensor::randn([b, s, h, dh], 1.0, &mut rng);
        let mask = AttentionMask::causal_batch(&vec![vec![false; s]; b]).unwrap().additive();
        group.bench_with_input(BenchmarkId::new("fwd+bwd", s), &s, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (q, k, v) = (g.param(q.clone()), g.param(k.clone()), g.param(v.clone()));
                let a = g.attention(q, k, v, mask.clone()).unwrap();
                let s = g.sum(a);
                g.backward(s).unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, attention);
criterion_main!(benches);
