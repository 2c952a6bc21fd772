//! Acceptance criteria, run in order by one test so timings are not
//! distorted by parallel test threads. Prints one line per criterion.
//!
//! `ACCEPTANCE_ONLY=2,3` runs a subset; the others are reported as skipped.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use marrowcast_core::cascade::CascadeConfig;
use marrowcast_core::eval::{emerging_lesion_targets, roc_auc};
use marrowcast_core::nn::{self, adam_step, AdamHyper, AdamState, Param, Tensor4};
use marrowcast_core::patches::{self, binarize_and_dilate, dilate_disk, disk_offsets, reconstruct_risk_map, Fusion, PatchGrid};
use marrowcast_core::phantom::{generate_case, label_components, Misalignment, PhantomParams};
use marrowcast_core::preprocess::{align_pair, RegistrationParams};
use marrowcast_core::unet::{LossKind, UNet, UNetConfig};
use marrowcast_core::{Error, Geometry, MaskVolume, Slice2D, Volume};
use marrowcast_cli::{Profile, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

const FD_EPS: f64 = 1e-6;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_vec(shape, rand_vec(rng, shape.iter().product())).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + FD_EPS;
            let hi = f(&xp);
            xp[i] = orig - FD_EPS;
            let lo = f(&xp);
            xp[i] = orig;
            (hi - lo) / (2.0 * FD_EPS)
        })
        .collect()
}

fn small_shape(rng: &mut ChaCha8Rng, even: bool) -> [usize; 4] {
    let m = if even { 2 } else { 1 };
    [
        rng.random_range(1..3),
        rng.random_range(1..4),
        m * rng.random_range(1..4),
        m * rng.random_range(1..4),
    ]
}

/// Worst relative error of `d/dx sum(r * f(x))` over the trials of one op.
fn pointwise_trials(
    rng: &mut ChaCha8Rng,
    trials: usize,
    even: bool,
    fwd: impl Fn(&Tensor4<f64>) -> Tensor4<f64>,
    bwd: impl Fn(&Tensor4<f64>, &Tensor4<f64>, &Tensor4<f64>) -> Tensor4<f64>,
) -> f64 {
    (0..trials)
        .map(|_| {
            let shape = small_shape(rng, even);
            let x = rand_tensor(rng, shape);
            let y = fwd(&x);
            let r = rand_tensor(rng, y.shape());
            let analytic = bwd(&x, &y, &r);
            let f = |xs: &[f64]| dot(r.data(), fwd(&Tensor4::from_vec(x.shape(), xs.to_vec()).unwrap()).data());
            rel_err(analytic.data(), &numeric_grad(x.data(), f))
        })
        .fold(0.0, f64::max)
}

fn net_loss_with(net: &UNet<f64>, x: &Tensor4<f64>, y: &Tensor4<f64>, p: usize, i: usize, v: f64) -> f64 {
    let mut m = net.clone();
    m.params_mut()[p].data[i] = v;
    let out = m.forward(x).unwrap();
    m.loss(&out, y).unwrap().0
}

fn gradient_suite() -> Outcome {
    const TRIALS: usize = 7;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772);
    let mut trials = 0;
    let mut worst_op: Vec<(&str, f64)> = Vec::new();

    for (name, is_1x1) in [("conv2d", false), ("conv1x1", true)] {
        let mut worst: f64 = 0.0;
        for _ in 0..TRIALS {
            let [n, ci, h, w] = small_shape(&mut rng, false);
            let co = rng.random_range(1..4);
            let klen = if is_1x1 { co * ci } else { co * ci * 9 };
            let x = rand_tensor(&mut rng, [n, ci, h, w]);
            let k = rand_vec(&mut rng, klen);
            let b = rand_vec(&mut rng, co);
            let r = rand_vec(&mut rng, n * co * h * w);
            let conv = |x: &Tensor4<f64>, k: &[f64], b: &[f64]| {
                if is_1x1 {
                    nn::conv1x1(x, k, b).unwrap()
                } else {
                    nn::conv2d(x, k, b).unwrap()
                }
            };
            let rt = Tensor4::from_vec([n, co, h, w], r.clone()).unwrap();
            let g = if is_1x1 {
                nn::conv1x1_backward(&x, &k, &rt).unwrap()
            } else {
                nn::conv2d_backward(&x, &k, &rt).unwrap()
            };
            let fx = |xs: &[f64]| dot(&r, conv(&Tensor4::from_vec(x.shape(), xs.to_vec()).unwrap(), &k, &b).data());
            let fk = |ks: &[f64]| dot(&r, conv(&x, ks, &b).data());
            let fb = |bs: &[f64]| dot(&r, conv(&x, &k, bs).data());
            worst = worst
                .max(rel_err(g.input.data(), &numeric_grad(x.data(), fx)))
                .max(rel_err(&g.kernel, &numeric_grad(&k, fk)))
                .max(rel_err(&g.bias, &numeric_grad(&b, fb)));
            trials += 1;
        }
        worst_op.push((name, worst));
    }

    worst_op.push(("elu", pointwise_trials(&mut rng, TRIALS, false, nn::elu, |_, y, g| nn::elu_backward(y, g))));
    worst_op.push(("sigmoid", pointwise_trials(&mut rng, TRIALS, false, nn::sigmoid, |_, y, g| nn::sigmoid_backward(y, g))));
    worst_op.push((
        "max_pool2",
        pointwise_trials(
            &mut rng,
            TRIALS,
            true,
            |x| nn::max_pool2(x).unwrap().0,
            |x, _, g| nn::max_pool2_backward(&nn::max_pool2(x).unwrap().1, g),
        ),
    ));
    worst_op.push(("upsample2", pointwise_trials(&mut rng, TRIALS, false, nn::upsample2, |_, _, g| nn::upsample2_backward(g))));
    trials += 4 * TRIALS;

    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let [n, ca, h, w] = small_shape(&mut rng, false);
        let cb = rng.random_range(1..3);
        let a = rand_tensor(&mut rng, [n, ca, h, w]);
        let b = rand_tensor(&mut rng, [n, cb, h, w]);
        let r = rand_vec(&mut rng, n * (ca + cb) * h * w);
        let (ga, gb) = nn::concat_channels_backward(&Tensor4::from_vec([n, ca + cb, h, w], r.clone()).unwrap(), ca);
        let fa = |xs: &[f64]| dot(&r, nn::concat_channels(&Tensor4::from_vec(a.shape(), xs.to_vec()).unwrap(), &b).unwrap().data());
        let fb = |xs: &[f64]| dot(&r, nn::concat_channels(&a, &Tensor4::from_vec(b.shape(), xs.to_vec()).unwrap()).unwrap().data());
        worst = worst
            .max(rel_err(ga.data(), &numeric_grad(a.data(), fa)))
            .max(rel_err(gb.data(), &numeric_grad(b.data(), fb)));
        trials += 1;
    }
    worst_op.push(("concat_channels", worst));

    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let shape = small_shape(&mut rng, false);
        let len: usize = shape.iter().product();
        let p: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..0.95)).collect();
        let y = Tensor4::from_vec(shape, (0..len).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect()).unwrap();
        let wpos = rng.random_range(1.0..20.0);
        let pt = Tensor4::from_vec(shape, p.clone()).unwrap();
        let (_, g) = nn::bce_loss(&pt, &y).unwrap();
        let f = |ps: &[f64]| nn::bce_loss(&Tensor4::from_vec(shape, ps.to_vec()).unwrap(), &y).unwrap().0;
        worst = worst.max(rel_err(g.data(), &numeric_grad(&p, f)));
        let (_, g) = nn::weighted_bce_loss(&pt, &y, wpos).unwrap();
        let f = |ps: &[f64]| nn::weighted_bce_loss(&Tensor4::from_vec(shape, ps.to_vec()).unwrap(), &y, wpos).unwrap().0;
        worst = worst.max(rel_err(g.data(), &numeric_grad(&p, f)));
        trials += 1;
    }
    worst_op.push(("bce/weighted_bce", worst));

    let mut worst_net: f64 = 0.0;
    for trial in 0..TRIALS {
        let loss = if trial % 2 == 0 { LossKind::Bce } else { LossKind::WeightedBce };
        let cfg = UNetConfig {
            input_size: 16,
            depth: 2,
            base_channels: 2,
            w_pos: Some(3.0),
            loss,
            ..UNetConfig::lesionnet_default()
        };
        let mut net = UNet::<f64>::build(cfg, trial as u64).unwrap();
        for p in net.params_mut() {
            if p.name.starts_with("head") || p.name.ends_with(".bias") {
                p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        let x = rand_tensor(&mut rng, [2, 1, 16, 16]);
        let y = Tensor4::from_vec([2, 1, 16, 16], (0..512).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect()).unwrap();
        let (out, tape) = net.forward_train(&x).unwrap();
        let (_, g) = net.loss(&out, &y).unwrap();
        let grads = net.backward(&tape, &g).unwrap();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (p, param) in net.params().iter().enumerate() {
            for _ in 0..3 {
                let i = rng.random_range(0..param.data.len());
                let v = param.data[i];
                numeric.push((net_loss_with(&net, &x, &y, p, i, v + FD_EPS) - net_loss_with(&net, &x, &y, p, i, v - FD_EPS)) / (2.0 * FD_EPS));
                analytic.push(grads[p][i]);
            }
        }
        worst_net = worst_net.max(rel_err(&analytic, &numeric));
        trials += 1;
    }

    let elapsed = start.elapsed();
    for (name, e) in &worst_op {
        check(*e < 1e-3, || format!("{name}: relative error {e:.2e} >= 1e-3"))?;
    }
    check(worst_net < 1e-2, || format!("network: relative error {worst_net:.2e} >= 1e-2"))?;
    check(trials >= 50, || format!("only {trials} trials"))?;
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?}"))?;
    let worst_op = worst_op.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(format!(
        "{trials} trials, worst op error {worst_op:.1e}, net error {worst_net:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 2

/// Zero-padded 3x3 convolution by direct summation.
fn conv2d_reference(x: &Tensor4<f32>, k: &[f32], b: &[f32], co: usize) -> Vec<f32> {
    let [n, ci, h, w] = x.shape();
    let mut out = vec![0.0; n * co * h * w];
    for s in 0..n {
        for o in 0..co {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (yy as i64 + ky as i64 - 1, xx as i64 + kx as i64 - 1);
                                if sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64 {
                                    acc += k[((o * ci + c) * 3 + ky) * 3 + kx] * x.at(s, c, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out[((s * co + o) * h + yy) * w + xx] = acc;
                }
            }
        }
    }
    out
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate().filter(|(i, _)| labels[*i]) {
        let _ = i;
        for (_, &sj) in scores.iter().enumerate().filter(|(j, _)| !labels[*j]) {
            pairs += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn oracle_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6f72);
    // small integers keep every partial sum exact in f32
    let int = |rng: &mut ChaCha8Rng| rng.random_range(-3i32..=3) as f32;
    for trial in 0..40 {
        let shape = [rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=16), rng.random_range(1..=16)];
        let co = rng.random_range(1..=4);
        let x = Tensor4::from_vec(shape, (0..shape.iter().product::<usize>()).map(|_| int(&mut rng)).collect()).unwrap();
        let k: Vec<f32> = (0..co * shape[1] * 9).map(|_| int(&mut rng)).collect();
        let b: Vec<f32> = (0..co).map(|_| int(&mut rng)).collect();
        let got = nn::conv2d(&x, &k, &b).map_err(|e| e.to_string())?;
        check(got.data() == conv2d_reference(&x, &k, &b, co).as_slice(), || {
            format!("conv2d differs from direct summation in trial {trial} (shape {shape:?}, {co} out)")
        })?;
    }

    let mut worst_auc: f64 = 0.0;
    let mut instances = 0;
    while instances < 1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..50);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let fast = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst_auc = worst_auc.max((fast - brute_auc(&scores, &labels)).abs());
        instances += 1;
    }
    check(worst_auc < 1e-12, || format!("roc_auc deviates by {worst_auc:e}"))?;

    // window oracle: every patch prediction is the target window itself
    let case = generate_case(&PhantomParams::desk_scale(), "P000").map_err(|e| e.to_string())?;
    let targets = emerging_lesion_targets(&case).map_err(|e| e.to_string())?;
    let cfg = CascadeConfig {
        patch_size: 32,
        ..CascadeConfig::default()
    };
    let (mut covered_total, mut slices) = (0usize, 0usize);
    let (mut all_scores, mut all_labels) = (Vec::new(), Vec::new());
    for z in 0..case.geometry().dims[2] {
        let bone = case.b_t.axial_slice(z).map_err(|e| e.to_string())?;
        let target = targets.axial_slice(z).map_err(|e| e.to_string())?;
        let region = binarize_and_dilate(&bone, cfg.threshold, cfg.dilation_px);
        let grid = PatchGrid::new(&region, cfg.patch_size, cfg.stride).map_err(|e| e.to_string())?;
        if grid.is_empty() {
            continue;
        }
        let preds: Vec<Vec<f32>> = (0..grid.len()).map(|i| grid.read_batch(&target, i..i + 1).into_data()).collect();
        let rec = reconstruct_risk_map(&grid, &preds, Fusion::Mean).map_err(|e| e.to_string())?;
        for (i, &c) in rec.coverage.iter().enumerate() {
            if c > 0 {
                check(rec.risk.data[i] == target.data[i], || format!("slice {z} pixel {i} not reproduced"))?;
                all_scores.push(rec.risk.data[i]);
                all_labels.push(target.data[i] >= 0.5);
                covered_total += 1;
            }
        }
        slices += 1;
    }
    let auc = roc_auc(&all_scores, &all_labels).map_err(|e| e.to_string())?;
    check(auc == 1.0, || format!("window-oracle AUC {auc}"))?;
    Ok(format!(
        "conv2d exact on 40 shapes; roc_auc max |d| {worst_auc:.1e} on {instances} instances; window oracle exact on {covered_total} px over {slices} slices, AUC {auc}"
    ))
}

// ---------------------------------------------------------------- 3

fn closed_forms() -> Outcome {
    let half = Tensor4::from_vec([1, 1, 1, 2], vec![0.5f64, 0.5]).unwrap();
    let y = Tensor4::from_vec([1, 1, 1, 2], vec![1.0f64, 0.0]).unwrap();
    let (bce, _) = nn::bce_loss(&half, &y).map_err(|e| e.to_string())?;
    check((bce - std::f64::consts::LN_2).abs() < 1e-6, || format!("BCE(0.5) = {bce}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x6366);
    let p = Tensor4::from_vec([2, 1, 8, 8], (0..128).map(|_| rng.random_range(0.01f32..0.99)).collect()).unwrap();
    let t = Tensor4::from_vec([2, 1, 8, 8], (0..128).map(|_| f32::from(u8::from(rng.random_bool(0.2)))).collect()).unwrap();
    let (l0, g0) = nn::bce_loss(&p, &t).map_err(|e| e.to_string())?;
    let (l1, g1) = nn::weighted_bce_loss(&p, &t, 1.0).map_err(|e| e.to_string())?;
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    check(l0.to_bits() == l1.to_bits() && bits(g0.data()) == bits(g1.data()), || {
        "weighted BCE with w_pos = 1 differs from BCE".into()
    })?;

    let elu = nn::elu(&Tensor4::from_vec([1, 1, 1, 1], vec![-1.0f64]).unwrap()).data()[0];
    let expected = (-1.0f64).exp() - 1.0;
    check((elu - expected).abs() < 1e-6, || format!("ELU(-1) = {elu}"))?;

    // m = 0.1 g, v = 0.001 g^2, so m_hat = g and v_hat = g^2
    let (theta, g, lr) = (0.5f64, 0.2f64, 0.01f64);
    let mut params = vec![Param {
        name: "theta".into(),
        shape: vec![1],
        data: vec![theta],
    }];
    let mut state = AdamState::new(
        AdamHyper {
            lr,
            ..AdamHyper::default()
        },
        &params,
    );
    adam_step(&mut params, &[vec![g]], &mut state).map_err(|e| e.to_string())?;
    let hand = theta - lr * g / (g + 1e-8);
    let got = params[0].data[0];
    check((got - hand).abs() < 1e-9, || format!("Adam step {got}, expected {hand}"))?;

    let disk = disk_offsets(2.0).len();
    let mut dot = Slice2D::zeros(9, 9);
    dot.set(4, 4, 1.0);
    let dilated = dilate_disk(&dot, 2.0).data.iter().filter(|&&v| v == 1.0).count();
    check(disk == 13 && dilated == 13, || format!("radius-2 disk has {disk} offsets, dilation sets {dilated}"))?;
    Ok(format!("BCE(0.5) = {bce:.9}, ELU(-1) = {elu:.9}, Adam step {got:.12}, disk r=2 {disk} px"))
}

// ---------------------------------------------------------------- 4

fn patch_counts(p: &PhantomParams, cfg: &CascadeConfig) -> Result<Vec<usize>, String> {
    let case = generate_case(p, "P000").map_err(|e| e.to_string())?;
    let mut counts = Vec::new();
    for z in 0..p.dims[2] {
        let bone = case.b_t.axial_slice(z).map_err(|e| e.to_string())?;
        if bone.data.iter().all(|&v| v == 0.0) {
            continue;
        }
        let region = binarize_and_dilate(&bone, cfg.threshold, cfg.dilation_px);
        counts.push(PatchGrid::new(&region, cfg.patch_size, cfg.stride).map_err(|e| e.to_string())?.len());
    }
    Ok(counts)
}

fn paper_constants() -> Outcome {
    let (bone, lesion, cascade) = (UNetConfig::bonenet_default(), UNetConfig::lesionnet_default(), CascadeConfig::default());
    check(bone.input_size == 384, || format!("bone net input {}", bone.input_size))?;
    check(lesion.input_size == 64 && cascade.patch_size == 64, || "patch input is not 64".into())?;
    check(cascade.threshold == 0.5 && patches::DEFAULT_THRESHOLD == 0.5, || "threshold is not 0.5".into())?;
    check(cascade.dilation_px == 2, || "dilation is not 2 px".into())?;
    let paper = RunConfig::for_profile(Profile::PaperScale);
    check(
        paper.bonenet.input_size == 384 && paper.lesionnet.input_size == 64 && paper.cascade == cascade,
        || "paper_scale profile diverges from the defaults".into(),
    )?;

    let counts = patch_counts(&PhantomParams::paper_scale(), &cascade)?;
    let (lo, hi) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let median = sorted[sorted.len() / 2];
    // bone end caps thin out, so the gate is on the typical slice
    check((1_000..=50_000).contains(&median), || format!("median paper-scale patches per slice {median}"))?;
    let desk = RunConfig::for_profile(Profile::DeskScale);
    let desk_counts = patch_counts(&desk.phantom, &desk.cascade)?;
    let desk_mean = desk_counts.iter().sum::<usize>() as f64 / desk_counts.len() as f64;
    Ok(format!(
        "384/64/0.5/2 px; paper-scale patches per bone slice: median {median}, range {lo}..{hi} over {} slices (reported clinical range 7k - 10k); desk-scale mean {desk_mean:.0}",
        counts.len()
    ))
}

// ---------------------------------------------------------------- 5, 6

fn marrowcast(args: &[&str], cwd: &Path) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_marrowcast"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MARROWCAST_JOBS")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)))
    }
}

fn mean_auc(summary: &serde_json::Value, key: &str, region: &str) -> Option<f64> {
    summary[key][region]["mean"].as_f64()
}

fn phantom_end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = RunConfig::for_profile(Profile::DeskScale);
    check(config.cohort_size == 12 && config.phantom.precursor_contrast == 0.4, || "desk profile changed".into())?;
    let start = Instant::now();
    marrowcast(&["--jobs", "1", "evaluate", "--out", "report"], tmp.path())?;
    let elapsed = start.elapsed();
    let text = fs::read_to_string(tmp.path().join("report/summary.json")).map_err(|e| e.to_string())?;
    let summary: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    check(summary["folds"].as_array().map(Vec::len) == Some(12), || "expected 12 folds".into())?;
    check(summary["failed_folds"] == 0, || format!("{} folds failed", summary["failed_folds"]))?;
    let bone = mean_auc(&summary, "mean_auc", "bone").unwrap_or(f64::NAN);
    let lesion = mean_auc(&summary, "mean_auc", "lesion_all").unwrap_or(f64::NAN);
    let thorax = mean_auc(&summary, "mean_auc", "lesion_thorax").unwrap_or(f64::NAN);
    let legs = mean_auc(&summary, "mean_auc", "lesion_legs").unwrap_or(f64::NAN);
    let baseline = mean_auc(&summary, "mean_baseline_auc", "lesion_all").unwrap_or(f64::NAN);
    let line = format!(
        "bone {bone:.4}, emerging lesion {lesion:.4} (thorax {thorax:.4}, legs {legs:.4}), constant baseline {baseline:.4}, {:.1} min",
        elapsed.as_secs_f64() / 60.0
    );
    check(bone >= 0.95, || format!("bone AUC below 0.95: {line}"))?;
    check(lesion >= 0.75, || format!("lesion AUC below 0.75: {line}"))?;
    check(baseline == 0.5, || format!("baseline is not 0.5: {line}"))?;
    check(elapsed <= Duration::from_secs(30 * 60), || format!("over 30 min: {line}"))?;
    Ok(line)
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let args = |out: &'static str| {
        vec![
            "evaluate",
            "--reference",
            "--seed",
            "11",
            "--set",
            "cohort_size=3",
            "--set",
            "eval.folds=2",
            "--set",
            "bonenet.epochs=2",
            "--set",
            "lesionnet.epochs=1",
            "--out",
            out,
        ]
    };
    marrowcast(&args("a"), tmp.path())?;
    marrowcast(&args("b"), tmp.path())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let files = files_under(&a);
    check(files == files_under(&b), || "runs wrote different file sets".into())?;
    for required in ["summary.json", "folds/fold_00/bonenet.bin", "folds/fold_01/lesionnet.bin", "risk_maps/P000.nii"] {
        check(files.iter().any(|f| f == Path::new(required)), || format!("{required} missing"))?;
    }
    for f in &files {
        let same = fs::read(a.join(f)).ok() == fs::read(b.join(f)).ok();
        check(same, || format!("{} differs between runs", f.display()))?;
    }
    Ok(format!("{} files byte-identical across two reference-mode runs", files.len()))
}

// ---------------------------------------------------------------- 7

fn centroids(m: &MaskVolume) -> Vec<[f64; 3]> {
    let (labels, n) = label_components(m);
    let g = m.geometry();
    let mut acc = vec![[0.0f64; 4]; n];
    for (i, &l) in labels.iter().enumerate().filter(|(_, &l)| l > 0) {
        let a = &mut acc[l as usize - 1];
        a[0] += (i % g.dims[0]) as f64;
        a[1] += ((i / g.dims[0]) % g.dims[1]) as f64;
        a[2] += (i / g.slice_len()) as f64;
        a[3] += 1.0;
    }
    acc.iter().map(|a| [a[0] / a[3], a[1] / a[3], a[2] / a[3]]).collect()
}

/// Mean distance (voxels) from each aligned lesion to the nearest true one.
fn centroid_error(aligned: &MaskVolume, truth: &MaskVolume) -> f64 {
    let (ca, ct) = (centroids(aligned), centroids(truth));
    let nearest = |a: &[f64; 3]| {
        ct.iter()
            .map(|t| ((a[0] - t[0]).powi(2) + (a[1] - t[1]).powi(2) + (a[2] - t[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    ca.iter().map(nearest).sum::<f64>() / ca.len() as f64
}

fn registration() -> Outcome {
    let cases = [
        ([3.0, -4.0, 1.5], [2.0, -3.0, 4.0]),
        ([5.0, 0.0, 0.0], [0.0, 0.0, 5.0]),
        ([-3.5, 3.5, 2.0], [5.0, 0.0, 0.0]),
        ([0.0, 0.0, -5.0], [0.0, -5.0, 0.0]),
        ([2.9, 2.9, 2.9], [2.9, 2.9, 2.9]),
    ];
    let mut errors = Vec::new();
    let mut before = Vec::new();
    for (seed, (t, r)) in cases.into_iter().enumerate() {
        let base = PhantomParams {
            seed: 100 + seed as u64,
            ..PhantomParams::desk_scale()
        };
        let truth = generate_case(&base, "P").map_err(|e| e.to_string())?;
        let moved = generate_case(
            &PhantomParams {
                misalignment: Some(Misalignment {
                    translation_vox: t,
                    rotation_deg: r,
                }),
                ..base
            },
            "P",
        )
        .map_err(|e| e.to_string())?;
        let (aligned, _) = align_pair(&moved, RegistrationParams::default()).map_err(|e| e.to_string())?;
        before.push(centroid_error(&moved.a_t1, &truth.a_t1));
        errors.push(centroid_error(&aligned.a_t1, &truth.a_t1));
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let mean_before = before.iter().sum::<f64>() / before.len() as f64;
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    check(mean <= 1.0, || format!("mean centroid error {mean:.3} voxels (per case {errors:.3?})"))?;
    Ok(format!(
        "mean lesion-centroid error {mean:.3} vox (worst {worst:.3}) after alignment, {mean_before:.2} before, {} cases",
        errors.len()
    ))
}

// ---------------------------------------------------------------- 8

fn io_roundtrips() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x696f);
    let g = Geometry::new([13, 7, 5], [0.7, 1.3, 2.9]).map_err(|e| e.to_string())?;
    let mut data: Vec<f32> = (0..g.len()).map(|_| rng.random_range(-1e4f32..1e4)).collect();
    data[0] = f32::MIN_POSITIVE;
    data[1] = -0.0;
    data[2] = f32::MAX;
    let v = Volume::from_vec(g, data).map_err(|e| e.to_string())?;
    let path = tmp.path().join("v.nii");
    v.save_nifti(&path).map_err(|e| e.to_string())?;
    let back = Volume::load_nifti(&path).map_err(|e| e.to_string())?;
    let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    check(back.geometry() == g && bits(&back) == bits(&v), || "NIfTI roundtrip is not bit-exact".into())?;

    let cfg = UNetConfig {
        input_size: 16,
        depth: 2,
        base_channels: 2,
        epochs: 1,
        batch_size: 2,
        w_pos: Some(4.0),
        ..UNetConfig::lesionnet_default()
    };
    let mut net = UNet::<f32>::build(cfg, 5).map_err(|e| e.to_string())?;
    let x = Tensor4::from_vec([2, 1, 16, 16], (0..512).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap();
    let y = Tensor4::from_vec([2, 1, 16, 16], (0..512).map(|_| f32::from(u8::from(rng.random_bool(0.2)))).collect()).unwrap();
    net.train_epoch(&[(x.clone(), y)], 1).map_err(|e| e.to_string())?;
    let ck = tmp.path().join("net");
    net.save_checkpoint(&ck).map_err(|e| e.to_string())?;
    let loaded = UNet::<f32>::load_checkpoint(&ck).map_err(|e| e.to_string())?;
    check(loaded.params() == net.params() && loaded.adam() == net.adam(), || "checkpoint state differs".into())?;
    let fwd_bits = |n: &UNet<f32>| n.forward(&x).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    check(fwd_bits(&loaded) == fwd_bits(&net), || "reloaded net computes differently".into())?;
    let again = tmp.path().join("again");
    loaded.save_checkpoint(&again).map_err(|e| e.to_string())?;
    for ext in ["json", "bin"] {
        let same = fs::read(ck.with_extension(ext)).ok() == fs::read(again.with_extension(ext)).ok();
        check(same, || format!("re-saved .{ext} differs"))?;
    }

    let blob = fs::read(ck.with_extension("bin")).map_err(|e| e.to_string())?;
    let mut rejected = 0;
    let mut flipped = blob.clone();
    flipped[blob.len() / 2] ^= 0x01;
    for (name, bad) in [("flipped", flipped), ("truncated", blob[..blob.len() - 4].to_vec())] {
        let dir = tmp.path().join(name);
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        fs::copy(ck.with_extension("json"), dir.join("net.json")).map_err(|e| e.to_string())?;
        fs::write(dir.join("net.bin"), bad).map_err(|e| e.to_string())?;
        match UNet::<f32>::load_checkpoint(dir.join("net")) {
            Err(Error::Corruption(_)) => rejected += 1,
            other => return Err(format!("{name} blob: expected corruption error, got {:?}", other.map(|_| ()))),
        }
    }
    let mut header = fs::read(&path).map_err(|e| e.to_string())?;
    header[344] = b'x';
    let bad_nii = tmp.path().join("bad.nii");
    fs::write(&bad_nii, header).map_err(|e| e.to_string())?;
    match Volume::load_nifti(&bad_nii) {
        Err(Error::Format(_)) => rejected += 1,
        other => return Err(format!("bad magic: expected format error, got {:?}", other.map(|_| ()))),
    }
    Ok(format!(
        "NIfTI and checkpoint roundtrips bit-exact ({} params); {rejected} corrupted fixtures rejected",
        net.param_count()
    ))
}

#[test]
fn acceptance_criteria() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "gradient suite", gradient_suite),
        (2, "oracle suite", oracle_suite),
        (3, "closed-form values", closed_forms),
        (4, "default constants and patch counts", paper_constants),
        (5, "phantom end-to-end LOOCV", phantom_end_to_end),
        (6, "determinism", determinism),
        (7, "registration", registration),
        (8, "I/O roundtrips", io_roundtrips),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            println!("criterion {id} ({name}): SKIPPED");
            continue;
        }
        let start = Instant::now();
        match run() {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{:.1?}] {detail}", start.elapsed()),
            Err(why) => {
                println!("criterion {id} ({name}): FAIL [{:.1?}] {why}", start.elapsed());
                failed.push(id);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
