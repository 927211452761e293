use dzsr_core::checkpoint::Checkpoint;
use dzsr_core::config::TrainConfig;
use dzsr_core::data::{generate_samples, DualZoomSample, GenConfig, PairConfig};
use dzsr_core::error::Error;
use dzsr_core::image::Image;
use dzsr_core::metrics::{corner_mask, psnr_region, Region};
use dzsr_core::model::{AblationMode, ZoomNet};
use dzsr_core::train::{
    degradation_checkpoint, evaluate_samples, infer, load_degradation, smoothed, train_degradation,
    train_selfdzsr,
};

fn data(n: usize, seed: u64) -> Vec<DualZoomSample> {
    generate_samples(&GenConfig {
        scenes: n,
        ratio: 2,
        lr_size: 16,
        pair: PairConfig::default(),
        seed,
    })
    .unwrap()
}

fn tiny(iterations: usize) -> TrainConfig {
    TrainConfig {
        lr_patch: 16,
        iterations,
        batch: 2,
        channels: 8,
        blocks: 2,
        feature_channels: 8,
        estimator_channels: 8,
        deg_channels: 8,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn decreases(totals: &[f64]) -> (f64, f64) {
    let s = smoothed(totals, 20);
    (s[0], *s.last().unwrap())
}

#[test]
fn degradation_loss_decreases() {
    let run = train_degradation(&data(4, 1), &tiny(120)).unwrap();
    let totals: Vec<f64> = run.log.iter().map(|l| l.total).collect();
    let (start, end) = decreases(&totals);
    assert!(end < start, "{start} -> {end}");
    assert!(run.net.centroid_term() < run.initial_centroid);
}

#[test]
fn zooming_loss_decreases_and_none_mode_drops_the_degradation_net() {
    let samples = data(4, 2);
    let cfg = tiny(80);
    let deg = train_degradation(&samples, &tiny(10)).unwrap().net;
    let run = train_selfdzsr(&samples, Some(deg.clone()), &cfg, AblationMode::Full).unwrap();
    let totals: Vec<f64> = run.log.iter().map(|l| l.total).collect();
    let (start, end) = decreases(&totals);
    assert!(end < start, "{start} -> {end}");
    assert!(run.pipeline.degradation.is_some());

    let none = train_selfdzsr(&samples, Some(deg), &tiny(2), AblationMode::None).unwrap();
    assert!(none.pipeline.degradation.is_none());
    assert_eq!(none.pipeline.degradation_calls(), 0);
}

#[test]
fn modes_needing_pseudo_lr_reject_a_missing_degradation_net() {
    let samples = data(2, 3);
    for mode in [AblationMode::Full, AblationMode::NoLrAlign, AblationMode::Stn] {
        assert!(train_selfdzsr(&samples, None, &tiny(1), mode).is_err(), "{mode}");
    }
    assert!(train_selfdzsr(&samples, None, &tiny(1), AblationMode::None).is_ok());
}

#[test]
fn training_is_reproducible_with_one_thread() {
    std::env::set_var("DZSR_THREADS", "1");
    let samples = data(3, 4);
    let cfg = tiny(6);
    let digests = || {
        let deg = train_degradation(&samples, &cfg).unwrap().net;
        let d = degradation_checkpoint(&deg, &cfg).digest();
        let z = train_selfdzsr(&samples, Some(deg), &cfg, AblationMode::Full).unwrap();
        (d, z.checkpoint().digest())
    };
    assert_eq!(digests(), digests());
    let other = TrainConfig { seed: 4, ..cfg.clone() };
    let d2 = degradation_checkpoint(&train_degradation(&samples, &other).unwrap().net, &other).digest();
    assert_ne!(digests().0, d2);
}

#[test]
fn checkpoints_survive_disk_and_reject_other_architectures() {
    let samples = data(2, 5);
    let cfg = tiny(2);
    let deg = train_degradation(&samples, &cfg).unwrap().net;
    let run = train_selfdzsr(&samples, Some(deg.clone()), &cfg, AblationMode::Full).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let zpath = dir.path().join("zoom.ckpt");
    run.checkpoint().save(&zpath).unwrap();
    let loaded = Checkpoint::load(&zpath).unwrap();
    let s = &samples[0];
    let direct = run.pipeline.zoom.infer(&s.short_focus, &s.telephoto).unwrap();
    let via_disk = infer(&s.short_focus, &s.telephoto, &loaded).unwrap();
    assert_eq!(direct, via_disk);
    assert_eq!(via_disk.dims(), (s.short_focus.height() * 2, s.short_focus.width() * 2));

    let dpath = dir.path().join("deg.ckpt");
    degradation_checkpoint(&deg, &cfg).save(&dpath).unwrap();
    let dck = Checkpoint::load(&dpath).unwrap();
    assert_eq!(load_degradation(&dck, &cfg).unwrap().store.iter().count(), deg.store.len());
    let wider = TrainConfig { deg_channels: 12, ..cfg.clone() };
    assert!(matches!(load_degradation(&dck, &wider), Err(Error::Checkpoint(_))));
    assert!(matches!(ZoomNet::from_checkpoint(&dck), Err(Error::Checkpoint(_))));

    let mut other = loaded.clone();
    other.config = other.config.replace("blocks=2", "blocks=3");
    assert!(matches!(ZoomNet::from_checkpoint(&other), Err(Error::Checkpoint(_))));
}

#[test]
fn infer_rejects_mismatched_inputs() {
    let samples = data(1, 6);
    let run = train_selfdzsr(&samples, None, &tiny(1), AblationMode::None).unwrap();
    let ck = run.checkpoint();
    let s = &samples[0];
    let small = Image::filled(s.telephoto.height() / 2, s.telephoto.width() / 2, 0.5).unwrap();
    assert!(matches!(infer(&s.short_focus, &small, &ck), Err(Error::Input(_))));
}

#[test]
fn region_metrics_follow_the_mask() {
    let (h, w, r) = (32, 32, 2);
    let gt = Image::from_fn(h, w, |i, j, c| ((i * 7 + j * 3 + c) % 11) as f32 / 11.0).unwrap();
    assert_eq!(psnr_region(&gt, &gt, Region::Full).unwrap(), f64::INFINITY);
    assert_eq!(psnr_region(&gt, &gt, Region::Corner { ratio: r }).unwrap(), f64::INFINITY);

    let mut centre = gt.clone();
    for i in h / 4..h / 4 + h / r {
        for j in w / 4..w / 4 + w / r {
            centre.set(i, j, 0, 1.0 - gt.get(i, j, 0));
        }
    }
    assert!(psnr_region(&centre, &gt, Region::Full).unwrap().is_finite());
    assert_eq!(psnr_region(&centre, &gt, Region::Corner { ratio: r }).unwrap(), f64::INFINITY);

    assert_eq!(Region::Full.mask(h, w).iter().filter(|&&m| m).count(), h * w);
    for r in [2, 4] {
        let kept = corner_mask(h, w, r).iter().filter(|&&m| m).count();
        assert_eq!(kept * r * r, h * w * (r * r - 1));
    }
}

#[test]
fn evaluation_reports_are_stable_text() {
    let samples = data(2, 7);
    let run = train_selfdzsr(&samples, None, &tiny(1), AblationMode::None).unwrap();
    let named: Vec<_> = samples.into_iter().enumerate().map(|(i, s)| (format!("x{i}"), s)).collect();
    let a = evaluate_samples(&named, &run.pipeline.zoom).unwrap();
    let b = evaluate_samples(&named, &run.pipeline.zoom).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    let csv = a.to_csv();
    assert_eq!(csv.lines().count(), 1 + named.len() + 1);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
    assert!(a.summary().contains("Corner-Image"));
    assert!(!csv.contains("runtime"));
}
