//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p dzsr-core --test acceptance`. Pass criterion
//! numbers as arguments to run a subset, e.g. `-- 1 3 9`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dzsr_autograd::{GradBuffer, Graph, ParamStore, Tensor};
use dzsr_core::config::TrainConfig;
use dzsr_core::data::{generate_samples, DualZoomSample, GenConfig, PairConfig};
use dzsr_core::degradation::{centroid_loss, degradation_loss, DegradationConfig, DegradationNet, LAMBDA_CENTROID};
use dzsr_core::geometry::{
    affine_offsets, affine_offsets_backward, deformable_sample, deformable_sample_backward_generic,
    deformable_sample_generic, regular_grid, DeformableKernel, OffsetField, TAPS,
};
use dzsr_core::image::{area_downsample, bicubic_upsample, Image};
use dzsr_core::losses::{
    selfdzsr_loss, selfdzsr_loss_graph, sliced_wasserstein, sliced_wasserstein_projected, PerceptualExtractor,
    SwConfig, LAMBDA_SW,
};
use dzsr_core::metrics::{corner_mask, psnr, ssim};
use dzsr_core::model::{AblationMode, SelfDzsr, ZeroMasks, ZoomConfig, ZoomNet};
use dzsr_core::nn::{Conv, Init};
use dzsr_core::rng::{derive, rng, Rng};
use dzsr_core::train::{
    degradation_checkpoint, evaluate_samples, train_degradation, train_selfdzsr,
};
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn uniform(r: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn samples(n: usize, seed: u64, pair: PairConfig) -> Vec<DualZoomSample> {
    let cfg = GenConfig {
        scenes: n,
        ratio: 2,
        lr_size: 32,
        pair,
        seed,
    };
    generate_samples(&cfg).expect("synthetic data")
}

fn warp_free() -> PairConfig {
    PairConfig {
        warp_bound: 0.0,
        ..PairConfig::default()
    }
}

fn named(s: Vec<DualZoomSample>) -> Vec<(String, DualZoomSample)> {
    s.into_iter().enumerate().map(|(i, s)| (format!("s{i:03}"), s)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn norm_rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if n == 0.0 {
        d
    } else {
        d / n
    }
}

// ---------------------------------------------------------------- 1

fn brute_conv3(x: &[f64], c: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let co = bias.len();
    let mut y = vec![0.0; co * h * w];
    for o in 0..co {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias[o];
                for ci in 0..c {
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (yy, xx) = (i as i64 + di as i64 - 1, j as i64 + dj as i64 - 1);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                acc += weight[((o * c + ci) * 3 + di) * 3 + dj] * x[(ci * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                }
                y[(o * h + i) * w + j] = acc;
            }
        }
    }
    y
}

fn brute_pointwise(x: &[f64], c: usize, n: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let co = bias.len();
    let mut y = vec![0.0; co * n];
    for o in 0..co {
        for q in 0..n {
            let mut acc = bias[o];
            for ci in 0..c {
                let wsum: f64 = (0..9).map(|k| weight[(o * c + ci) * 9 + k]).sum();
                acc += wsum * x[ci * n + q];
            }
            y[o * n + q] = acc;
        }
    }
    y
}

fn criterion_1() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let g = regular_grid();
    let expected: Vec<(i32, i32)> = (0..9).map(|k| (k / 3 - 1, k % 3 - 1)).collect();
    let grid_ok = (0..TAPS).all(|k| g.column(k) == expected[k]);
    ok &= grid_ok;
    notes.push(format!("grid {}", if grid_ok { "exact" } else { "WRONG" }));

    let (h, w) = (5usize, 7usize);
    let n = h * w;
    let rep = |v: &[f64]| -> Vec<f64> { v.iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect() };
    let check = |a: &[f64], b: &[f64], want: &dyn Fn(usize) -> (f64, f64)| -> bool {
        let p = affine_offsets(&rep(a), &rep(b), h, w).unwrap();
        (0..TAPS).all(|k| {
            let (wy, wx) = want(k);
            (0..n).all(|q| p[2 * k * n + q] == wy && p[(2 * k + 1) * n + q] == wx)
        })
    };
    let gk = |k: usize| (expected[k].0 as f64, expected[k].1 as f64);
    let (ty, tx) = (0.75, -1.25);
    let affine_ok = check(&[0.0; 4], &[0.0; 2], &|_| (0.0, 0.0))
        && check(&[1.0, 0.0, 0.0, 1.0], &[0.0; 2], &gk)
        && check(&[0.0; 4], &[ty, tx], &|_| (ty, tx))
        && check(&[1.0, 0.0, 0.0, 1.0], &[ty, tx], &|k| (gk(k).0 + ty, gk(k).1 + tx));
    ok &= affine_ok;
    notes.push(format!("affine identities {}", if affine_ok { "exact" } else { "WRONG" }));

    let mut r = rng(11);
    let mut worst0 = 0.0f64;
    let mut worst_g = 0.0f64;
    for trial in 0..20 {
        let (c, co, h, w) = (1 + trial % 4, 1 + (trial * 7) % 5, 3 + trial % 6, 4 + (trial * 3) % 7);
        let n = h * w;
        let x = uniform(&mut r, c * n, -1.0, 1.0);
        let wt = uniform(&mut r, co * c * 9, -1.0, 1.0);
        let b = uniform(&mut r, co, -0.5, 0.5);
        let to32 = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();
        let kernel = DeformableKernel::new(Tensor::new(&[co, c, 3, 3], to32(&wt)), Tensor::new(&[co], to32(&b))).unwrap();
        let xt = Tensor::new(&[c, h, w], to32(&x));
        let xr: Vec<f64> = xt.data().iter().map(|&v| v as f64).collect();
        let wr: Vec<f64> = kernel.weight.data().iter().map(|&v| v as f64).collect();
        let br: Vec<f64> = kernel.bias.data().iter().map(|&v| v as f64).collect();

        let y0 = deformable_sample(&xt, &kernel, &OffsetField::zeros(h, w)).unwrap();
        let y0: Vec<f64> = y0.data().iter().map(|&v| v as f64).collect();
        worst0 = worst0.max(max_abs_diff(&y0, &brute_pointwise(&xr, c, n, &wr, &br)));

        let grid = OffsetField::uniform([1.0, 0.0, 0.0, 1.0], [0.0, 0.0], h, w);
        let yg = deformable_sample(&xt, &kernel, &grid).unwrap();
        let yg: Vec<f64> = yg.data().iter().map(|&v| v as f64).collect();
        worst_g = worst_g.max(max_abs_diff(&yg, &brute_conv3(&xr, c, h, w, &wr, &br)));
    }
    ok &= worst0 < 1e-5 && worst_g < 1e-5;
    notes.push(format!("P=0 vs 1x1 max err {worst0:.2e}, P=G vs 3x3 max err {worst_g:.2e}"));
    outcome(ok, notes.join("; "))
}

// ---------------------------------------------------------------- 2

fn deform_gradients() -> (f64, [f64; 4]) {
    let (c, co, h, w) = (2usize, 3usize, 5usize, 6usize);
    let n = h * w;
    let mut r = rng(21);
    let x = uniform(&mut r, c * n, -1.0, 1.0);
    let wt = uniform(&mut r, co * c * 9, -1.0, 1.0);
    let bias = uniform(&mut r, co, -0.5, 0.5);
    let a = uniform(&mut r, 4 * n, -1.5, 1.5);
    let b = uniform(&mut r, 2 * n, -1.5, 1.5);
    let probe = uniform(&mut r, co * n, -1.0, 1.0);

    let loss = |x: &[f64], wt: &[f64], a: &[f64], b: &[f64]| -> f64 {
        let p = affine_offsets(a, b, h, w).unwrap();
        let y = deformable_sample_generic(x, c, h, w, wt, &bias, &p);
        y.iter().zip(&probe).map(|(u, v)| u * v).sum()
    };
    let p = affine_offsets(&a, &b, h, w).unwrap();
    let grads = deformable_sample_backward_generic(&x, c, h, w, &wt, &bias, &p, &probe);
    let (ga, gb) = affine_offsets_backward(&grads.p, h, w);

    let eps = 1e-6;
    let numeric = |which: usize, len: usize| -> Vec<f64> {
        (0..len)
            .map(|i| {
                let mut args = [x.clone(), wt.clone(), a.clone(), b.clone()];
                args[which][i] += eps;
                let lp = loss(&args[0], &args[1], &args[2], &args[3]);
                args[which][i] -= 2.0 * eps;
                let lm = loss(&args[0], &args[1], &args[2], &args[3]);
                (lp - lm) / (2.0 * eps)
            })
            .collect()
    };
    let errs = [
        norm_rel(&grads.x, &numeric(0, x.len())),
        norm_rel(&grads.weight, &numeric(1, wt.len())),
        norm_rel(&ga, &numeric(2, a.len())),
        norm_rel(&gb, &numeric(3, b.len())),
    ];
    (errs.iter().cloned().fold(0.0, f64::max), errs)
}

fn flat_params(store: &ParamStore) -> Vec<f64> {
    store.iter().flat_map(|(_, _, t)| t.data().iter().map(|&v| v as f64)).collect()
}

fn flat_grads(store: &ParamStore, buf: &GradBuffer) -> Vec<f64> {
    store
        .ids()
        .flat_map(|id| buf.get(id).data().iter().map(|&v| v as f64).collect::<Vec<_>>())
        .collect()
}

fn shift_params(store: &mut ParamStore, base: &[f64], dir: &[f64], h: f64) {
    let ids: Vec<_> = store.ids().collect();
    let mut k = 0;
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = (base[k] + h * dir[k]) as f32;
            k += 1;
        }
    }
}

/// Directional derivatives along the gradient and a few random unit
/// directions, error relative to the gradient norm.
fn directional_check(
    store: &mut ParamStore,
    grad: &[f64],
    h: f64,
    seed: u64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let base = flat_params(store);
    let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut r = rng(seed);
    let mut dirs = vec![grad.iter().map(|v| v / gnorm).collect::<Vec<_>>()];
    for _ in 0..3 {
        let d = uniform(&mut r, grad.len(), -1.0, 1.0);
        let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        dirs.push(d.iter().map(|v| v / dn).collect());
    }
    let mut worst = 0.0f64;
    for d in &dirs {
        let analytic: f64 = grad.iter().zip(d).map(|(g, v)| g * v).sum();
        shift_params(store, &base, d, h);
        let lp = loss(store);
        shift_params(store, &base, d, -h);
        let lm = loss(store);
        shift_params(store, &base, d, 0.0);
        let numeric = (lp - lm) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / gnorm);
    }
    worst
}

fn smooth_image(seed: u64, h: usize, w: usize) -> Image {
    let mut r = rng(seed);
    let ph = uniform(&mut r, 6, 0.0, 6.28);
    Image::from_fn(h, w, |i, j, c| {
        let (y, x) = (i as f32, j as f32);
        0.5 + 0.2 * (0.7 * y + ph[c] as f32).sin() * (0.45 * x + ph[c + 3] as f32).cos()
            + 0.1 * ((y * 1.3 + x * 0.4 + c as f32).sin())
    })
    .unwrap()
}

fn degradation_gradient() -> f64 {
    let cfg = DegradationConfig {
        ratio: 2,
        channels: 4,
        guide_channels: 4,
        kernel: 3,
    };
    let mut net = DegradationNet::new(&cfg, 5).unwrap();
    let t = smooth_image(1, 16, 16);
    let s_c = area_downsample(&smooth_image(2, 16, 16), 2).unwrap();
    let mut r = rng(3);
    let residual: Vec<f32> = (0..s_c.data().len()).map(|_| r.random_range(-0.02f32..0.02)).collect();
    let res_img = Image::new(8, 8, residual.clone()).unwrap();

    let mut g = Graph::new();
    let tv = g.input(t.to_tensor());
    let sv = g.input(s_c.to_tensor());
    let y = net.forward(&mut g, tv, sv);
    let rv = g.input(res_img.to_tensor());
    let noisy = g.add(y, rv);
    let clean = g.sub(noisy, rv);
    let l1 = g.mean_abs_diff(clean, sv);
    let c = net.centroid_var(&mut g);
    let wc = g.scale(c, LAMBDA_CENTROID as f32);
    let total = g.add(l1, wc);
    let mut buf = GradBuffer::zeros_like(&net.store);
    g.backward(total).accumulate_into(&g, &mut buf);
    let grad = flat_grads(&net.store, &buf);

    let kernels = net.backbone_kernels();
    let mut store = net.store.clone();
    directional_check(&mut store, &grad, 1e-3, 4, |st| {
        net.store = st.clone();
        let y = net.degrade(&t, &s_c).unwrap();
        let noisy = Image::new(8, 8, y.data().iter().zip(&residual).map(|(a, b)| a + b).collect()).unwrap();
        let ks: Vec<&Tensor> = kernels.iter().map(|&id| st.get(id)).collect();
        degradation_loss(&noisy, &s_c, &residual, &ks).unwrap().0
    })
}

fn selfdzsr_gradient() -> f64 {
    let mut store = ParamStore::new();
    let mut r = rng(8);
    let conv = Conv::same(&mut store, "tiny", 3, 3, 3, Init::He(0.5), &mut r);
    let x = smooth_image(9, 16, 16);
    let t = smooth_image(10, 16, 16);
    let ext = PerceptualExtractor::new(4, 2, 12);
    let sw = SwConfig::default();
    let forward = |g: &mut Graph, st: &ParamStore| {
        let xv = g.input(x.to_tensor());
        let y = conv.forward(g, st, xv);
        g.add(y, xv)
    };

    let mut g = Graph::new();
    let y = forward(&mut g, &store);
    let tv = g.input(t.to_tensor());
    let lv = selfdzsr_loss_graph(&mut g, y, tv, &ext, &sw, LAMBDA_SW, 13).unwrap();
    let mut buf = GradBuffer::zeros_like(&store);
    g.backward(lv.total).accumulate_into(&g, &mut buf);
    let grad = flat_grads(&store, &buf);

    directional_check(&mut store, &grad, 1e-3, 14, |st| {
        let mut g = Graph::new();
        let y = forward(&mut g, st);
        let yi = Image::from_tensor(g.value(y)).unwrap();
        selfdzsr_loss(&yi, &t, &ext, &sw, 13).unwrap().0
    })
}

fn criterion_2() -> Outcome {
    let (deform, parts) = deform_gradients();
    let deg = degradation_gradient();
    let sdz = selfdzsr_gradient();
    let ok = deform < 1e-4 && deg < 1e-3 && sdz < 1e-3;
    outcome(
        ok,
        format!(
            "deformable f64 rel err {deform:.2e} (x {:.1e}, w {:.1e}, A {:.1e}, b {:.1e}); degradation_loss {deg:.2e}; selfdzsr_loss {sdz:.2e}",
            parts[0], parts[1], parts[2], parts[3]
        ),
    )
}

// ---------------------------------------------------------------- 3

fn moment_oracle(w: &[f32], shape: &[usize]) -> f64 {
    let k = shape[2];
    let half = k as f64 / 2.0;
    let mut total = 0.0;
    for p in 0..shape[0] * shape[1] {
        let (mut my, mut mx) = (0.0f64, 0.0f64);
        for i in 0..k {
            for j in 0..k {
                let v = w[p * k * k + i * k + j] as f64;
                my += (i as f64 - half + 0.5) * v;
                mx += (j as f64 - half + 0.5) * v;
            }
        }
        total += my.abs() + mx.abs();
    }
    total
}

fn criterion_3() -> Outcome {
    let mut r = rng(31);
    let mut sym_ok = true;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = [1usize, 3, 5, 7][r.random_range(0..4)];
        let shape = [r.random_range(1..4), r.random_range(1..4), k, k];
        let len: usize = shape.iter().product();
        let mut w: Vec<f32> = (0..len).map(|_| r.random_range(-1.0f32..1.0)).collect();
        worst = worst.max((centroid_loss(&w, &shape).unwrap() - moment_oracle(&w, &shape)).abs());
        let kk = k * k;
        for p in 0..shape[0] * shape[1] {
            for idx in 0..kk {
                w[p * kk + kk - 1 - idx] = w[p * kk + idx];
            }
        }
        sym_ok &= centroid_loss(&w, &shape).unwrap() == 0.0;
    }
    let mut delta = vec![0.0f32; 9];
    delta[0] = 1.0;
    let corner = centroid_loss(&delta, &[1, 1, 3, 3]).unwrap();
    let ok = sym_ok && worst < 1e-10 && corner == 2.0;
    outcome(
        ok,
        format!(
            "centro-symmetric exact zero: {sym_ok}; max |loss - oracle| {worst:.2e}; corner delta {corner}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn random_tensor(r: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0f32..1.0))
}

fn criterion_4() -> Outcome {
    let mut r = rng(41);
    let cfg = SwConfig::default();
    let mut zero_ok = true;
    for trial in 0..20 {
        let (c, h, w) = (1 + trial % 6, 3 + trial % 5, 4 + trial % 3);
        let u = random_tensor(&mut r, &[c, h, w]);
        let n = h * w;
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permuted = Tensor::from_fn(&[c, h, w], |k| {
            let (ch, q) = (k / n, k % n);
            u.data()[ch * n + perm[q]]
        });
        zero_ok &= sliced_wasserstein(&u, &u, &cfg, trial as u64).unwrap() == 0.0;
        zero_ok &= sliced_wasserstein(&u, &permuted, &cfg, trial as u64).unwrap() == 0.0;
    }

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = r.random_range(1..6);
        let (h, w) = (r.random_range(2..9), r.random_range(2..9));
        let u = random_tensor(&mut r, &[c, h, w]);
        let v = random_tensor(&mut r, &[c, h, w]);
        let dir: Vec<f32> = (0..c).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let project = |t: &Tensor| -> Vec<f64> {
            let n = h * w;
            let mut p: Vec<f64> = (0..n)
                .map(|q| (0..c).map(|ch| dir[ch] as f64 * t.data()[ch * n + q] as f64).sum())
                .collect();
            p.sort_by(f64::total_cmp);
            p
        };
        let (pu, pv) = (project(&u), project(&v));
        let oracle = pu.iter().zip(&pv).map(|(a, b)| (a - b).abs()).sum::<f64>() / pu.len() as f64;
        let got = sliced_wasserstein_projected(&u, &v, &dir, 1).unwrap();
        worst = worst.max((got - oracle).abs());
    }

    let mut fuzz_ok = true;
    for i in 0..500 {
        let shape = [r.random_range(1..8), r.random_range(1..7), r.random_range(1..7)];
        let u = random_tensor(&mut r, &shape);
        let v = random_tensor(&mut r, &shape);
        let a = sliced_wasserstein(&u, &v, &cfg, i).unwrap();
        let b = sliced_wasserstein(&v, &u, &cfg, i).unwrap();
        fuzz_ok &= a >= 0.0 && a == b;
    }
    let ok = zero_ok && worst < 1e-6 && fuzz_ok;
    outcome(
        ok,
        format!("identical/permuted exact zero: {zero_ok}; single-projection max err {worst:.2e}; 500-pair fuzz: {fuzz_ok}"),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let pair = PairConfig::default();
    let train = samples(32, 51, pair);
    let cfg = TrainConfig {
        iterations: 2000,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = train_degradation(&train, &cfg).unwrap();
    let (dy, dx) = run.net.impulse_centroid_offset(32, 0.4, 0.3).unwrap();
    let held = samples(8, 52, warp_free());
    let (mut pseudo, mut naive) = (0.0, 0.0);
    for s in &held {
        let t = s.triplet().unwrap();
        let pl = run.net.degrade(&t.gt, &t.lr).unwrap().clamp01();
        pseudo += psnr(&pl, &t.clean_lr).unwrap() / held.len() as f64;
        naive += psnr(&area_downsample(&t.gt, 2).unwrap(), &t.clean_lr).unwrap() / held.len() as f64;
    }
    let centered = dy.abs() < 0.1 && dx.abs() < 0.1;
    outcome(
        centered && pseudo > naive,
        format!(
            "impulse centroid offset ({dy:+.4}, {dx:+.4}) px; centroid term {:.3e} -> {:.3e}; pseudo-LR {pseudo:.2} dB vs area-downsampled GT {naive:.2} dB",
            run.initial_centroid,
            run.net.centroid_term()
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let scene = samples(1, 61, PairConfig::default());
    let cfg = TrainConfig {
        iterations: 2000,
        batch: 1,
        seed: 6,
        ..TrainConfig::default()
    };
    let deg = train_degradation(
        &scene,
        &TrainConfig {
            iterations: 300,
            ..cfg.clone()
        },
    )
    .unwrap()
    .net;
    let run = train_selfdzsr(&scene, Some(deg), &cfg, AblationMode::Full).unwrap();
    let t = scene[0].triplet().unwrap();
    let sr = run.pipeline.zoom.infer(&t.lr, &t.reference).unwrap();
    let ours = psnr(&sr, &t.gt).unwrap();
    let base = psnr(&bicubic_upsample(&t.lr, 2).unwrap().clamp01(), &t.gt).unwrap();
    outcome(
        ours - base >= 2.0,
        format!("inference {ours:.2} dB vs bicubic {base:.2} dB (gain {:+.2} dB, {} iterations)", ours - base, cfg.iterations),
    )
}

// ---------------------------------------------------------------- 7

const TREND_ITERS: usize = 1500;

fn criterion_7() -> Outcome {
    let train = samples(32, 71, PairConfig::default());
    let held = named(samples(8, 72, warp_free()));
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let cfg = TrainConfig {
            iterations: TREND_ITERS,
            seed,
            ..TrainConfig::default()
        };
        let deg = train_degradation(
            &train,
            &TrainConfig {
                iterations: 1000,
                ..cfg.clone()
            },
        )
        .unwrap()
        .net;
        let score = |mode: AblationMode| {
            let run = train_selfdzsr(&train, Some(deg.clone()), &cfg, mode).unwrap();
            evaluate_samples(&held, &run.pipeline.zoom).unwrap().mean_full_psnr()
        };
        let full = score(AblationMode::Full);
        let none = score(AblationMode::None);
        if full > none {
            wins += 1;
        }
        lines.push(format!("seed {seed}: full {full:.3} vs none {none:.3}"));
    }
    outcome(wins >= 2, format!("{wins}/3 seeds favour full alignment; {}", lines.join(", ")))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let cfg = TrainConfig::default();
    let zoom = ZoomNet::new(&ZoomConfig::from_train(&cfg), 81).unwrap();
    let deg = DegradationNet::new(&cfg.degradation(), 82).unwrap();
    let pipeline = SelfDzsr::new(zoom, Some(deg), AblationMode::Full).unwrap();
    let t = samples(1, 83, PairConfig::default())[0].triplet().unwrap();

    let pseudo = pipeline.pseudo_lr(&t, 1).unwrap();
    let mut g = Graph::new();
    let masks = ZeroMasks {
        lr: vec![false; pipeline.zoom.stages()],
        reference: false,
    };
    pipeline.forward_train(&mut g, &t, pseudo.as_ref(), &masks).unwrap();
    let (train_deg, train_est) = (pipeline.degradation_calls(), pipeline.zoom.estimator_calls());

    let (deg_before, est_before) = (pipeline.degradation_calls(), pipeline.zoom.estimator_calls());
    pipeline.zoom.infer(&t.lr, &t.reference).unwrap();
    let deg_calls = pipeline.degradation_calls() - deg_before;
    let est_calls = pipeline.zoom.estimator_calls() - est_before;

    let mut r = rng(derive(84, 0));
    let trials = 1000;
    let hits = (0..trials)
        .filter(|_| ZeroMasks::draw(&mut r, 3, 0.3).lr.iter().all(|&z| z))
        .count();
    let freq = hits as f64 / trials as f64;
    let ok = train_deg > 0 && train_est > 0 && deg_calls == 0 && est_calls == 0 && (freq - 0.027).abs() <= 0.015;
    outcome(
        ok,
        format!(
            "inference: {deg_calls} degradation and {est_calls} estimator evaluations (training graph: {train_deg} and {train_est}); all-three-zero frequency {freq:.3}"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let a = Image::filled(16, 16, 0.5).unwrap();
    let b = Image::filled(16, 16, 0.5 + 10.0 / 255.0).unwrap();
    let p = psnr(&a, &b).unwrap();
    let x = smooth_image(91, 32, 24);
    let s = ssim(&x, &x).unwrap();
    let mut counts_ok = true;
    for (h, w, r) in [(64, 64, 2), (64, 48, 4), (30, 50, 2), (17, 23, 4), (8, 8, 1)] {
        let m = corner_mask(h, w, r);
        let (ch, cw) = (h / r, w / r);
        let (top, left) = ((h - ch) / 2, (w - cw) / 2);
        let excluded = m.iter().filter(|&&v| !v).count();
        counts_ok &= excluded == ch * cw;
        counts_ok &= m.iter().filter(|&&v| v).count() == h * w - ch * cw;
        for i in 0..h {
            for j in 0..w {
                let inside = (top..top + ch).contains(&i) && (left..left + cw).contains(&j);
                counts_ok &= m[i * w + j] != inside;
            }
        }
    }
    let ok = (p - 28.131).abs() <= 1e-3 && s == 1.0 && counts_ok;
    outcome(ok, format!("PSNR {p:.4} dB; SSIM(a, a) = {s}; corner mask counts exact: {counts_ok}"))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    std::env::set_var("DZSR_THREADS", "1");
    let train = samples(6, 101, PairConfig::default());
    let held = named(samples(3, 102, warp_free()));
    let cfg = TrainConfig {
        iterations: 20,
        batch: 2,
        seed: 10,
        ..TrainConfig::default()
    };
    let once = || {
        let deg = train_degradation(&train, &cfg).unwrap().net;
        let deg_digest = degradation_checkpoint(&deg, &cfg).digest();
        let run = train_selfdzsr(&train, Some(deg), &cfg, AblationMode::Full).unwrap();
        let report = evaluate_samples(&held, &run.pipeline.zoom).unwrap();
        (deg_digest, run.checkpoint().digest(), report.to_csv(), report.summary())
    };
    let a = once();
    let b = once();
    std::env::remove_var("DZSR_THREADS");
    let ok = a == b;
    outcome(
        ok,
        format!(
            "degradation checkpoint {}, zooming checkpoint {}, report {}",
            if a.0 == b.0 { "identical" } else { "DIFFERS" },
            if a.1 == b.1 { "identical" } else { "DIFFERS" },
            if a.2 == b.2 && a.3 == b.3 { "identical" } else { "DIFFERS" },
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, fn() -> Outcome, Duration); 10] = [
        (1, criterion_1, Duration::from_secs(60)),
        (2, criterion_2, Duration::from_secs(300)),
        (3, criterion_3, Duration::from_secs(60)),
        (4, criterion_4, Duration::from_secs(60)),
        (5, criterion_5, Duration::from_secs(600)),
        (6, criterion_6, Duration::from_secs(900)),
        (7, criterion_7, Duration::from_secs(3600)),
        (8, criterion_8, Duration::from_secs(60)),
        (9, criterion_9, Duration::from_secs(60)),
        (10, criterion_10, Duration::from_secs(600)),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, run, budget) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let out = run();
        let took = t0.elapsed();
        let in_budget = took <= budget;
        let pass = out.pass && in_budget;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {n}: {} {} [{:.1}s of {}s budget{}]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            budget.as_secs(),
            if in_budget { "" } else { ", over budget" }
        );
    }
    println!("{failed} criteria failed");
    let strict = std::env::var("DZSR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
