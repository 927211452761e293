//! Two-stage training, inference and evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use dzsr_autograd::{Adam, AdamConfig, GradBuffer, Graph};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::TrainConfig;
use crate::data::{inject_noise, list_samples, load_sample, DualZoomSample, NoiseSpec, Triplet};
use crate::degradation::DegradationNet;
use crate::error::{Error, Result};
use crate::image::{bicubic_upsample, Image};
use crate::losses::{selfdzsr_loss_graph, PerceptualExtractor, SwConfig};
use crate::metrics::{fmt_db, psnr_region, ssim_region, Region};
use crate::model::{AblationMode, SelfDzsr, ZeroMasks, ZoomConfig, ZoomNet};
use crate::rng::{derive, derive2, rng};

/// Worker count from `DZSR_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("DZSR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Order-preserving parallel map. Results do not depend on the thread count.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                let f = &f;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(k, t)| f(ci * chunk + k, t))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Named samples of a dataset directory, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, DualZoomSample)>> {
    list_samples(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            Ok((name, load_sample(&p)?))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub l1: f64,
    /// Centroid term in stage 1, sliced Wasserstein term in stage 2.
    pub aux: f64,
}

/// Moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    values
        .windows(w.min(values.len()).max(1))
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect()
}

/// Deterministic sample order: a fresh shuffle per epoch.
struct Schedule {
    n: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
}

impl Schedule {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            epoch: usize::MAX,
            order: Vec::new(),
        }
    }

    fn index(&mut self, k: usize) -> usize {
        let epoch = k / self.n;
        if epoch != self.epoch {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut rng(derive2(self.seed, 0xE90C, epoch as u64)));
            self.epoch = epoch;
        }
        self.order[k % self.n]
    }

    fn batch(&mut self, step: usize, size: usize) -> Vec<usize> {
        (0..size).map(|j| self.index(step * size + j)).collect()
    }
}

/// Per-sample draws for one slot of one step.
struct Draws {
    hflip: bool,
    vflip: bool,
    transpose: bool,
    noise_seed: u64,
    loss_seed: u64,
    mask_rng: crate::rng::Rng,
}

fn draws(cfg: &TrainConfig, step: usize, slot: usize) -> Draws {
    let s = derive2(cfg.seed, step as u64, slot as u64);
    let mut r = rng(s);
    Draws {
        hflip: cfg.hflip && r.random(),
        vflip: cfg.vflip && r.random(),
        transpose: cfg.rot90 && r.random(),
        noise_seed: derive(s, 1),
        loss_seed: derive(s, 2),
        mask_rng: rng(derive(s, 3)),
    }
}

fn check_samples(samples: &[DualZoomSample], cfg: &TrainConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    for s in samples {
        if s.ratio != cfg.ratio {
            return Err(Error::Config(format!("dataset ratio {} differs from config ratio {}", s.ratio, cfg.ratio)));
        }
        let lr = s.short_focus.height() / s.ratio;
        if cfg.lr_patch != 0 && lr != cfg.lr_patch {
            return Err(Error::Config(format!(
                "lr_patch={} but the dataset holds {lr}-pixel LR crops",
                cfg.lr_patch
            )));
        }
    }
    Ok(())
}

fn training_triplet(s: &DualZoomSample, d: &Draws) -> Result<Triplet> {
    s.augment(d.hflip, d.vflip, d.transpose).triplet()
}

pub struct DegradationRun {
    pub net: DegradationNet,
    pub log: Vec<StepLog>,
    pub initial_centroid: f64,
}

/// Stage 1: fit the degradation network with the l1 and centroid terms.
pub fn train_degradation(samples: &[DualZoomSample], cfg: &TrainConfig) -> Result<DegradationRun> {
    cfg.validate()?;
    check_samples(samples, cfg)?;
    let mut net = DegradationNet::new(&cfg.degradation(), cfg.seed)?;
    let noise = NoiseSpec::default();
    let mut adam = Adam::new(
        &net.store,
        AdamConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            ..AdamConfig::default()
        },
    );
    let total_steps = cfg.total_steps(samples.len());
    let mut schedule = Schedule::new(samples.len(), derive(cfg.seed, 0xD1));
    let threads = worker_threads();
    let initial_centroid = net.centroid_term();
    let mut log = Vec::with_capacity(total_steps);
    let inv_b = 1.0 / cfg.batch as f32;
    for step in 0..total_steps {
        let batch = schedule.batch(step, cfg.batch);
        let results = par_map(&batch, threads, |slot, &i| -> Result<(GradBuffer, f64)> {
            let d = draws(cfg, step, slot);
            let t = training_triplet(&samples[i], &d)?;
            let mut g = Graph::new();
            let tv = g.input(t.gt.to_tensor());
            let sv = g.input(t.lr.to_tensor());
            let y = net.forward(&mut g, tv, sv);
            let clean = Image::from_tensor(g.value(y))?.clamp01();
            let (noisy, residual, _) = inject_noise(&clean, &noise, d.noise_seed)?;
            let rv = g.input(Image::new(noisy.height(), noisy.width(), residual)?.to_tensor());
            let with_noise = g.add(y, rv);
            let denoised = g.sub(with_noise, rv);
            let l1 = g.mean_abs_diff(denoised, sv);
            let l1_value = g.value(l1).item() as f64;
            let loss = g.scale(l1, inv_b);
            let mut buf = GradBuffer::zeros_like(&net.store);
            g.backward(loss).accumulate_into(&g, &mut buf);
            Ok((buf, l1_value))
        });
        let mut grads = GradBuffer::zeros_like(&net.store);
        let mut l1 = 0.0;
        for r in results {
            let (b, v) = r?;
            grads.merge(&b);
            l1 += v;
        }
        l1 /= cfg.batch as f64;
        let mut g = Graph::new();
        let c = net.centroid_var(&mut g);
        let centroid = g.value(c).item() as f64;
        let weighted = g.scale(c, cfg.lambda_c as f32);
        g.backward(weighted).accumulate_into(&g, &mut grads);
        let entry = StepLog {
            step,
            total: l1 + cfg.lambda_c * centroid,
            l1,
            aux: centroid,
        };
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total_steps) {
            log::info!(
                "degradation step {step}/{total_steps}: loss {:.5} l1 {:.5} centroid {:.3e}",
                entry.total,
                entry.l1,
                entry.aux
            );
        }
        log.push(entry);
        adam.step(&mut net.store, &grads, cfg.lr_at(step, total_steps), &|_| false);
    }
    net.calls.reset();
    Ok(DegradationRun {
        net,
        log,
        initial_centroid,
    })
}

pub fn degradation_checkpoint(net: &DegradationNet, cfg: &TrainConfig) -> Checkpoint {
    Checkpoint::from_store(CheckpointKind::Degradation, &net.cfg.describe(), &cfg.to_text(), &net.store)
}

/// Load a stage-1 checkpoint; its architecture must match `cfg`.
pub fn load_degradation(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<DegradationNet> {
    let mut net = DegradationNet::new(&cfg.degradation(), cfg.seed)?;
    let arch = net.cfg.describe();
    ckpt.restore_into(CheckpointKind::Degradation, &arch, &mut net.store)?;
    Ok(net)
}

pub struct ZoomRun {
    pub pipeline: SelfDzsr,
    pub log: Vec<StepLog>,
    /// Configuration as stored in checkpoints, with the ablation's alignment mode.
    pub config: TrainConfig,
}

impl ZoomRun {
    pub fn checkpoint(&self) -> Checkpoint {
        self.pipeline.zoom.checkpoint(&self.config.to_text())
    }
}

/// Stage 2: train the zooming network against the telephoto target.
pub fn train_selfdzsr(
    samples: &[DualZoomSample],
    degradation: Option<DegradationNet>,
    cfg: &TrainConfig,
    mode: AblationMode,
) -> Result<ZoomRun> {
    cfg.validate()?;
    check_samples(samples, cfg)?;
    let mut config = cfg.clone();
    config.align_mode = mode.align_mode(cfg.align_mode);
    let degradation = if mode.needs_pseudo() { degradation } else { None };
    let zoom = ZoomNet::new(&ZoomConfig::from_train(&config), config.seed)?;
    let mut pipeline = SelfDzsr::new(zoom, degradation, mode)?;
    let ext = PerceptualExtractor::default();
    let sw = SwConfig {
        num_projections: (cfg.sw_projections > 0).then_some(cfg.sw_projections),
    };
    let mut adam = Adam::new(
        &pipeline.zoom.store,
        AdamConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            ..AdamConfig::default()
        },
    );
    let total_steps = cfg.total_steps(samples.len());
    let mut schedule = Schedule::new(samples.len(), derive(cfg.seed, 0xD2));
    let threads = worker_threads();
    let stages = pipeline.zoom.stages();
    let inv_b = 1.0 / cfg.batch as f32;
    let mut log = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        let batch = schedule.batch(step, cfg.batch);
        let p = &pipeline;
        let results = par_map(&batch, threads, |slot, &i| -> Result<(GradBuffer, f64, f64, f64)> {
            let mut d = draws(cfg, step, slot);
            let t = training_triplet(&samples[i], &d)?;
            let pseudo = p.pseudo_lr(&t, d.noise_seed)?;
            let masks = ZeroMasks::draw(&mut d.mask_rng, stages, cfg.zero_prob);
            let mut g = Graph::new();
            let y = p.forward_train(&mut g, &t, pseudo.as_ref(), &masks)?;
            let gt = g.input(t.gt.to_tensor());
            let lv = selfdzsr_loss_graph(&mut g, y, gt, &ext, &sw, cfg.lambda_sw, d.loss_seed)?;
            let vals = (
                g.value(lv.total).item() as f64,
                g.value(lv.l1).item() as f64,
                g.value(lv.sw).item() as f64,
            );
            let loss = g.scale(lv.total, inv_b);
            let mut buf = GradBuffer::zeros_like(&p.zoom.store);
            g.backward(loss).accumulate_into(&g, &mut buf);
            Ok((buf, vals.0, vals.1, vals.2))
        });
        let mut grads = GradBuffer::zeros_like(&pipeline.zoom.store);
        let (mut total, mut l1, mut swv) = (0.0, 0.0, 0.0);
        for r in results {
            let (b, a, l, s) = r?;
            grads.merge(&b);
            total += a;
            l1 += l;
            swv += s;
        }
        let nb = cfg.batch as f64;
        let entry = StepLog {
            step,
            total: total / nb,
            l1: l1 / nb,
            aux: swv / nb,
        };
        if !entry.total.is_finite() {
            return Err(Error::Numeric(format!("loss became {} at step {step}", entry.total)));
        }
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total_steps) {
            log::info!(
                "zoom[{mode}] step {step}/{total_steps}: loss {:.5} l1 {:.5} sw {:.5}",
                entry.total,
                entry.l1,
                entry.aux
            );
        }
        log.push(entry);
        adam.step(&mut pipeline.zoom.store, &grads, cfg.lr_at(step, total_steps), &|_| false);
    }
    Ok(ZoomRun { pipeline, log, config })
}

/// Run the test-time graph from a zooming checkpoint.
pub fn infer(short_focus: &Image, telephoto: &Image, ckpt: &Checkpoint) -> Result<Image> {
    ZoomNet::from_checkpoint(ckpt)?.infer(short_focus, telephoto)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub full_psnr: f64,
    pub full_ssim: f64,
    pub corner_psnr: f64,
    pub corner_ssim: f64,
    pub bicubic_psnr: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub ratio: usize,
    pub rows: Vec<EvalRow>,
    /// Wall-clock seconds; never written to report files.
    pub runtime_secs: f64,
}

/// Mean over finite values and the number of infinite ones.
pub fn finite_mean(values: impl IntoIterator<Item = f64>) -> (f64, usize) {
    let (mut sum, mut n, mut inf) = (0.0, 0usize, 0usize);
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        } else {
            inf += 1;
        }
    }
    (if n > 0 { sum / n as f64 } else { f64::INFINITY }, inf)
}

impl EvalReport {
    pub fn mean_full_psnr(&self) -> f64 {
        finite_mean(self.rows.iter().map(|r| r.full_psnr)).0
    }

    pub fn mean_corner_psnr(&self) -> f64 {
        finite_mean(self.rows.iter().map(|r| r.corner_psnr)).0
    }

    pub fn mean_bicubic_psnr(&self) -> f64 {
        finite_mean(self.rows.iter().map(|r| r.bicubic_psnr)).0
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,full_psnr,full_ssim,corner_psnr,corner_ssim,bicubic_psnr\n");
        let row = |s: &mut String, name: &str, v: [f64; 5]| {
            let _ = writeln!(
                s,
                "{name},{},{:.6},{},{:.6},{}",
                fmt_db(v[0]),
                v[1],
                fmt_db(v[2]),
                v[3],
                fmt_db(v[4])
            );
        };
        for r in &self.rows {
            row(&mut s, &r.name, [r.full_psnr, r.full_ssim, r.corner_psnr, r.corner_ssim, r.bicubic_psnr]);
        }
        let m = |f: fn(&EvalRow) -> f64| finite_mean(self.rows.iter().map(f)).0;
        row(
            &mut s,
            "mean",
            [
                m(|r| r.full_psnr),
                m(|r| r.full_ssim),
                m(|r| r.corner_psnr),
                m(|r| r.corner_ssim),
                m(|r| r.bicubic_psnr),
            ],
        );
        s
    }

    pub fn summary(&self) -> String {
        let (full, full_inf) = finite_mean(self.rows.iter().map(|r| r.full_psnr));
        let (corner, corner_inf) = finite_mean(self.rows.iter().map(|r| r.corner_psnr));
        let (fs, _) = finite_mean(self.rows.iter().map(|r| r.full_ssim));
        let (cs, _) = finite_mean(self.rows.iter().map(|r| r.corner_ssim));
        let mut s = format!(
            "{} samples, ratio {}\nFull-Image   PSNR {} dB  SSIM {:.4}\nCorner-Image PSNR {} dB  SSIM {:.4}\nBicubic      PSNR {} dB\n",
            self.rows.len(),
            self.ratio,
            fmt_db(full),
            fs,
            fmt_db(corner),
            cs,
            fmt_db(self.mean_bicubic_psnr()),
        );
        if full_inf + corner_inf > 0 {
            let _ = writeln!(
                s,
                "excluded from means: {full_inf} infinite full and {corner_inf} infinite corner PSNR values"
            );
        }
        s
    }
}

/// Score `zoom` on stored samples: processed LR and Ref in, telephoto as GT.
pub fn evaluate_samples(samples: &[(String, DualZoomSample)], zoom: &ZoomNet) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let start = Instant::now();
    let r = zoom.cfg.ratio();
    let rows = par_map(samples, worker_threads(), |_, (name, s)| -> Result<EvalRow> {
        let t = s.triplet()?;
        let y = zoom.infer(&t.lr, &t.reference)?;
        let corner = Region::Corner { ratio: r };
        Ok(EvalRow {
            name: name.clone(),
            full_psnr: psnr_region(&y, &t.gt, Region::Full)?,
            full_ssim: ssim_region(&y, &t.gt, Region::Full)?,
            corner_psnr: psnr_region(&y, &t.gt, corner)?,
            corner_ssim: ssim_region(&y, &t.gt, corner)?,
            bicubic_psnr: psnr_region(&bicubic_upsample(&t.lr, r)?.clamp01(), &t.gt, Region::Full)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        ratio: r,
        rows,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

pub fn evaluate(dataset_dir: &Path, ckpt: &Checkpoint) -> Result<EvalReport> {
    let zoom = ZoomNet::from_checkpoint(ckpt)?;
    evaluate_samples(&load_dataset(dataset_dir)?, &zoom)
}
