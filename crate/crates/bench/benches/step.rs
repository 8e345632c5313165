use criterion::{criterion_group, criterion_main, Criterion};
use kvdistill::data::{collate_batch, Datasets, Sample};
use kvdistill::train::{lab_data, lab_model, train_step, AdamW, AdamWConfig, RunConfig, StepObjective};
use kvdistill::Tower;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn train_step_lab(c: &mut Criterion) {
    let cfg = lab_model();
    let mut data_cfg = lab_data();
    data_cfg.text_train = 64;
    data_cfg.lang_mm_train = 64;
    data_cfg.ocr_train = 64;
    data_cfg.eval_per_task = 8;
    let data = Datasets::generate(0, &data_cfg).unwrap();
    let samples: Vec<&Sample> = data
        .text_train
        .iter()
        .take(6)
        .chain(data.lang_mm_train.iter().take(5))
        .chain(data.ocr_train.iter().take(5))
        .collect();
    let batch = collate_batch(&samples, cfg.decoder.max_seq).unwrap();
    let teacher = Tower::new_language(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let student = Tower::new_multimodal(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let policy = RunConfig::preset("selective-kd").unwrap().policy.unwrap();

    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for (name, distill) in [("ce-full", false), ("selective-kd", true)] {
        group.bench_function(name, |bench| {
            let mut s = student.clone();
            let mut opt = AdamW::new(AdamWConfig::default(), &s.params);
            let objective = if distill {
                StepObjective::Distill { teacher: &teacher, policy: &policy }
            } else {
                StepObjective::HardOnly
            };
            bench.iter(|| train_step(&mut s, &batch, &objective, &|_| true, &mut opt, 1e-4, 1.0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, train_step_lab);
criterion_main!(benches);
