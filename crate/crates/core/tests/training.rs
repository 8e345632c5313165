mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::{prepare, tiny_run};
use kvdistill::data::{collate_batch, Sample};
use kvdistill::objective::AlphaPolicy;
use kvdistill::pipeline::{load_data, stage_inputs, train_run, Layout};
use kvdistill::train::{
    checkpoint_path, clip_global_norm, global_norm, load_checkpoint, metrics_path, run_stage, save_checkpoint,
    train_step, AdamW, AdamWConfig, RunConfig, RunOptions, ScheduleConfig, Stage, StepObjective,
};
use kvdistill::{Error, Tensor, Tower};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn prepared() -> (tempfile::TempDir, Layout) {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    prepare(&layout, 0);
    (dir, layout)
}

fn stage(layout: &Layout, cfg: &RunConfig, run_dir: &Path, opts: &RunOptions) -> kvdistill::train::RunResult {
    let data = load_data(layout, cfg.seed, &cfg.data).unwrap();
    run_stage(cfg, &data, &stage_inputs(layout, cfg).unwrap(), run_dir, opts).unwrap()
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let (dir, layout) = prepared();
    let src = checkpoint_path(&layout.run_dir("adapt-vlm"));
    let c = load_checkpoint(&src).unwrap();
    let copy = dir.path().join("copy");
    save_checkpoint(&c, &copy).unwrap();
    assert_eq!(files_under(&src), files_under(&copy));
    assert_eq!(load_checkpoint(&copy).unwrap(), c);

    let victim = copy.join("tensors/decoder.head.bin");
    let mut bytes = fs::read(&victim).unwrap();
    bytes[3] ^= 0x10;
    fs::write(&victim, bytes).unwrap();
    match load_checkpoint(&copy) {
        Err(Error::HashMismatch { name }) => assert_eq!(name, "decoder.head"),
        other => panic!("expected a hash mismatch, got {other:?}"),
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (dir, layout) = prepared();
    let mut cfg = tiny_run("selective-kd", 12, 0);
    cfg.checkpoint_every = 4;
    let straight = stage(&layout, &cfg, &dir.path().join("a"), &RunOptions::default());

    let b = dir.path().join("b");
    let first = stage(&layout, &cfg, &b, &RunOptions { resume: false, stop_after: Some(7) });
    assert!(!first.complete);
    assert_eq!(load_checkpoint(&checkpoint_path(&b)).unwrap().step, 7);
    let rest = stage(&layout, &cfg, &b, &RunOptions { resume: true, stop_after: None });
    assert!(rest.complete);
    assert_eq!(rest.tower.params.checksum(), straight.tower.params.checksum());
    assert_eq!(
        fs::read(metrics_path(&b)).unwrap(),
        fs::read(metrics_path(&dir.path().join("a"))).unwrap()
    );
}

#[test]
fn zero_alpha_distillation_equals_cross_entropy_run() {
    let (dir, layout) = prepared();
    let ce = stage(&layout, &tiny_run("ce-full", 50, 0), &dir.path().join("ce"), &RunOptions::default());
    let mut kd = tiny_run("distill-full", 50, 0);
    kd.policy = Some(AlphaPolicy::uniform(0.0, 2.0).unwrap());
    let kd = stage(&layout, &kd, &dir.path().join("kd"), &RunOptions::default());
    assert!(ce.tower.params.iter().zip(kd.tower.params.iter()).all(|(a, b)| a.2.bitwise_eq(b.2)));
    for (a, b) in ce.metrics.iter().zip(&kd.metrics) {
        assert_eq!(a.loss_combined.to_bits(), b.loss_combined.to_bits());
        assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
    }
}

#[test]
fn zero_alpha_step_loop_is_bitwise_cross_entropy() {
    let (_dir, layout) = prepared();
    let data = load_data(&layout, 0, &common::tiny_data()).unwrap();
    let student = kvdistill::pipeline::load_tower(&layout, "adapt-vlm").unwrap();
    let teacher = kvdistill::pipeline::load_tower(&layout, "pretrain-lm").unwrap();
    let policy = AlphaPolicy::uniform(0.0, 4.0).unwrap();
    let (mut a, mut b) = (student.clone(), student);
    let mut oa = AdamW::new(AdamWConfig::default(), &a.params);
    let mut ob = AdamW::new(AdamWConfig::default(), &b.params);
    let pool: Vec<&Sample> = data.lang_mm_train.iter().chain(&data.ocr_train).collect();
    let all = |_: &str| true;
    for k in 0..50 {
        let samples: Vec<&Sample> = (0..4).map(|i| pool[(k * 4 + i * 7) % pool.len()]).collect();
        let batch = collate_batch(&samples, 48).unwrap();
        let x = train_step(&mut a, &batch, &StepObjective::HardOnly, &all, &mut oa, 1e-3, 1.0).unwrap();
        let kd = StepObjective::Distill { teacher: &teacher, policy: &policy };
        let y = train_step(&mut b, &batch, &kd, &all, &mut ob, 1e-3, 1.0).unwrap();
        assert!(!y.teacher_ran, "no example has a positive weight");
        assert_eq!(x.breakdown.combined.to_bits(), y.breakdown.combined.to_bits(), "step {k}");
    }
    assert!(a.params.iter().zip(b.params.iter()).all(|(p, q)| p.2.bitwise_eq(q.2)));
}

#[test]
fn teacher_stays_frozen_through_distillation() {
    let (dir, layout) = prepared();
    let teacher_dir = checkpoint_path(&layout.run_dir("pretrain-lm"));
    let before = files_under(&teacher_dir);
    let r = stage(&layout, &tiny_run("selective-kd", 200, 0), &dir.path().join("kd"), &RunOptions::default());
    let (a, b) = r.teacher_checksums.unwrap();
    assert_eq!(a, b);
    assert_eq!(a, load_checkpoint(&teacher_dir).unwrap().params.checksum());
    assert_eq!(r.teacher_trainable_nodes, 0);
    assert_eq!(files_under(&teacher_dir), before);
    assert_eq!(r.metrics.len(), 200);
}

#[test]
fn reruns_are_byte_identical_and_follow_the_schedule() {
    let (dir, layout) = prepared();
    let cfg = tiny_run("selective-kd", 30, 0);
    let r = stage(&layout, &cfg, &dir.path().join("x"), &RunOptions::default());
    stage(&layout, &cfg, &dir.path().join("y"), &RunOptions::default());
    assert_eq!(
        fs::read(metrics_path(&dir.path().join("x"))).unwrap(),
        fs::read(metrics_path(&dir.path().join("y"))).unwrap()
    );
    assert_eq!(files_under(&dir.path().join("x/checkpoint")), files_under(&dir.path().join("y/checkpoint")));

    // Warmup is ceil(3% of 30) = 1 step, then cosine to zero.
    let s = &cfg.schedule;
    for row in &r.metrics {
        let k = row.step as f64;
        let want = if row.step < 1 {
            s.peak_lr * k
        } else {
            0.5 * s.peak_lr * (1.0 + (std::f64::consts::PI * (k - 1.0) / 29.0).cos())
        };
        assert!((row.lr - want).abs() <= 1e-15, "step {}: {} vs {want}", row.step, row.lr);
        assert!(row.grad_norm.is_finite());
    }
    assert_eq!(r.metrics.last().unwrap().lr, 0.0);
}

#[test]
fn schedule_closed_form() {
    let s = ScheduleConfig {
        peak_lr: 2e-3,
        warmup_fraction: 0.1,
        floor_lr: 1e-4,
    };
    let total = 200;
    for step in 0..=total {
        let want = if step < 20 {
            2e-3 * step as f64 / 20.0
        } else {
            1e-4 + (2e-3 - 1e-4) * 0.5 * (1.0 + (std::f64::consts::PI * (step - 20) as f64 / 180.0).cos())
        };
        assert!((s.lr_at(step, total) - want).abs() < 1e-16, "step {step}");
    }
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for scale in [0.01, 1.0, 50.0] {
        let mut grads = vec![
            Some(Tensor::randn([3, 4], scale, &mut rng)),
            None,
            Some(Tensor::randn([5], scale, &mut rng)),
        ];
        let orig = grads.clone();
        let want: f64 = orig.iter().flatten().flat_map(|t| t.data().to_vec()).map(|x| x * x).sum::<f64>().sqrt();
        let norm = clip_global_norm(&mut grads, 1.0).unwrap();
        assert!((norm - want).abs() < 1e-12);
        assert!(global_norm(&grads) <= 1.0 + 1e-12);
        let factor = if want > 1.0 { 1.0 / want } else { 1.0 };
        for (g, o) in grads.iter().flatten().zip(orig.iter().flatten()) {
            for (x, y) in g.data().iter().zip(o.data()) {
                assert!((x - y * factor).abs() < 1e-12);
            }
        }
    }
    assert!(clip_global_norm(&mut [], 0.0).is_err());
}

#[test]
fn adamw_single_step_by_hand() {
    let mut params = kvdistill::ParamSet::new();
    let id = params.insert("w", Tensor::new([2], vec![1.0, -2.0]).unwrap()).unwrap();
    let cfg = AdamWConfig::default();
    let mut opt = AdamW::new(cfg.clone(), &params);
    let g = [0.5, -0.25];
    let lr = 1e-2;
    opt.update(&mut params, &[Some(Tensor::new([2], g.to_vec()).unwrap())], lr).unwrap();
    for (i, &w0) in [1.0f64, -2.0].iter().enumerate() {
        let m_hat = (1.0 - cfg.beta1) * g[i] / (1.0 - cfg.beta1);
        let v_hat = (1.0 - cfg.beta2) * g[i] * g[i] / (1.0 - cfg.beta2);
        let want = w0 - lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w0);
        assert!((params.get(id).data()[i] - want).abs() < 1e-15, "{} vs {want}", params.get(id).data()[i]);
    }
}

#[test]
fn stage_order_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    kvdistill::pipeline::gen_data(&layout, 0, &common::tiny_data()).unwrap();
    let err = train_run(&layout, &tiny_run("selective-kd", 5, 0), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::MissingPrerequisite(_)), "{err}");
    assert!(err.to_string().contains("adapt-vlm"), "{err}");
    train_run(&layout, &tiny_run("pretrain-lm", 3, 0), &RunOptions::default()).unwrap();
    let err = train_run(&layout, &tiny_run("ce-full", 5, 0), &RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("adapt-vlm"), "{err}");

    // A teacher-era run stopped early cannot seed the next stage.
    train_run(&layout, &tiny_run("pretrain-lm", 10, 0), &RunOptions { resume: false, stop_after: Some(2) }).unwrap();
    let err = train_run(&layout, &tiny_run("adapt-vlm", 5, 0), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::MissingPrerequisite(_)), "{err}");
}

#[test]
fn stage_three_keeps_the_vision_encoder_frozen() {
    let (dir, layout) = prepared();
    let init = load_checkpoint(&checkpoint_path(&layout.run_dir("adapt-vlm"))).unwrap();
    let cfg = tiny_run("ce-full", 5, 0);
    assert_eq!(cfg.stage, Stage::Finetune);
    let r = stage(&layout, &cfg, &dir.path().join("ce"), &RunOptions::default());
    let tower = Tower::from_params(&init.model, init.params.clone()).unwrap();
    for ((_, name, before), (_, _, after)) in tower.params.iter().zip(r.tower.params.iter()) {
        if !name.starts_with("vision.") {
            continue;
        }
        assert!(before.bitwise_eq(after), "{name} changed");
    }
    assert_ne!(tower.decoder_checksum(), r.tower.decoder_checksum());
}
