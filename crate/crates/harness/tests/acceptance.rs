//! Acceptance checks for the whole testbed. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.
//!
//! Criteria 7 to 9 share one desk-scale experiment: a denoiser and a score
//! model trained on the default phantom dataset, attacked at 4x / 8% centre.

mod common;

use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use mri_robust::attack::{
    init_delta, transfer_item, worst_case_perturb, AttackConfig, LearningRate, TransferItem,
};
use mri_robust::autodiff::{Tape, Tensor, Var};
use mri_robust::diffusion::{
    data_consistency, dc_kspace, pc_sample, train_score, DiffusionRecon, GaussianMixture,
    LearnedScore, NoiseSchedule, SamplerConfig, Score,
};
use mri_robust::fft::{fft2, fft2_real, ifft2};
use mri_robust::metrics::{data_range, lag1_autocorrelation, ssim};
use mri_robust::mri::{
    apply_adjoint, apply_forward, forward, make_cartesian_mask, NoiseModel, SamplingMask,
};
use mri_robust::phantom::{build_dataset, shepp_logan, DatasetConfig};
use mri_robust::recon::train::{train_supervised, MaskDistribution, TrainConfig};
use mri_robust::recon::{
    DenoiserNet, DenoiserRecon, Differentiable, NetArch, ReconError, Reconstructor, UnrolledConfig,
    UnrolledRecon, ZeroFilled,
};
use mri_robust::tensor::{
    derive_seed, gaussian_complex, gaussian_real, ComplexTensor2, RealTensor2, RngStream,
};
use mri_robust_harness::models::Cached;
use mri_robust_harness::pipeline::median;
use nalgebra::{DMatrix, DVector};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, detail: String) -> Check {
    let t = start.elapsed();
    ensure(
        t < limit,
        format!(
            "{detail}; {:.1}s of {}s budget",
            t.as_secs_f64(),
            limit.as_secs()
        ),
    )
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn cmax_abs(a: &ComplexTensor2, b: &ComplexTensor2) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

// 1. FFT and operator suite.

fn fft_and_operators() -> Check {
    let start = Instant::now();
    let mut rng = RngStream::new(1);
    let mut roundtrip: f64 = 0.0;
    let mut n = 2;
    while n <= 256 {
        let x = gaussian_complex(&mut rng, n, n);
        roundtrip = roundtrip.max(cmax_abs(&ifft2(&fft2(&x).unwrap()).unwrap(), &x));
        n *= 2;
    }
    let x = gaussian_real(&mut rng, 32, 32);
    let parseval = (fft2_real(&x).unwrap().l2_norm() - x.l2_norm()).abs() / x.l2_norm();
    let (a, b) = (
        gaussian_complex(&mut rng, 32, 32),
        gaussian_complex(&mut rng, 32, 32),
    );
    let lhs = fft2(&a.scale(1.5).add(&b.scale(-0.7)).unwrap()).unwrap();
    let rhs = fft2(&a)
        .unwrap()
        .scale(1.5)
        .add(&fft2(&b).unwrap().scale(-0.7))
        .unwrap();
    let linearity = cmax_abs(&lhs, &rhs);
    let mut adjoint: f64 = 0.0;
    for (i, n) in [16usize, 32, 64].into_iter().enumerate() {
        let mask = make_cartesian_mask(n, 4.0, 0.08, &mut RngStream::new(10 + i as u64)).unwrap();
        let x = gaussian_real(&mut rng, n, n);
        let w = gaussian_complex(&mut rng, n, n);
        let l = apply_forward(&x, &mask).unwrap().real_dot(&w).unwrap();
        let r = x.dot(&apply_adjoint(&w, &mask).unwrap()).unwrap();
        adjoint = adjoint.max((l - r).abs() / l.abs().max(r.abs()));
    }
    let gt = gaussian_real(&mut rng, 32, 32);
    let full = SamplingMask::full(32, 32);
    let back = apply_adjoint(&apply_forward(&gt, &full).unwrap(), &full).unwrap();
    let full_err = max_abs(back.data(), gt.data());
    let detail = format!(
        "roundtrip {roundtrip:.1e} (<1e-10), Parseval {parseval:.1e} (<1e-9), linearity {linearity:.1e} (<1e-10), \
         adjointness {adjoint:.1e} (<1e-9), full-mask inverse {full_err:.1e} (<1e-9)"
    );
    if roundtrip < 1e-10
        && parseval < 1e-9
        && linearity < 1e-10
        && adjoint < 1e-9
        && full_err < 1e-9
    {
        within(Duration::from_secs(10), start, detail)
    } else {
        Err(detail)
    }
}

// 2. Finite-difference checks of every op and differentiable reconstructor.

fn random_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    max_abs(a, b) / b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12)
}

/// Worst relative error of the tape gradient of every input slot against
/// central differences.
fn check_program(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (slot, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[slot]).unwrap().data().to_vec();
        let eval = |probe: &Tensor| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| t.constant(if j == slot { probe.clone() } else { v.clone() }))
                .collect();
            let l = build(&mut t, &vs);
            t.value(l).item()
        };
        let mut probe = input.clone();
        let h = 1e-5;
        let numeric: Vec<f64> = (0..input.len())
            .map(|i| {
                let orig = probe.data()[i];
                probe.data_mut()[i] = orig + h;
                let up = eval(&probe);
                probe.data_mut()[i] = orig - h;
                let down = eval(&probe);
                probe.data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn contract(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(random_tensor(&mut RngStream::new(seed), &shape));
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

fn busy_net(arch: NetArch, seed: u64) -> DenoiserNet {
    let mut rng = RngStream::new(seed);
    let mut net = DenoiserNet::new(arch, &mut rng).unwrap();
    let mut params = net.params().to_vec();
    for p in params.iter_mut() {
        for v in p.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    net.set_params(params).unwrap();
    net
}

type Program = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

fn gradients() -> Check {
    let start = Instant::now();
    let mut rng = RngStream::new(2);
    let pair = vec![
        random_tensor(&mut rng, &[2, 16, 16]),
        random_tensor(&mut rng, &[2, 16, 16]),
    ];
    let single = vec![pair[0].clone()];
    let mask = make_cartesian_mask(16, 4.0, 0.125, &mut RngStream::new(3)).unwrap();
    let weights: Arc<[f64]> = mask.weights().into();
    let w = weights.clone();
    let ops: Vec<(&str, &Vec<Tensor>, Program)> = vec![
        (
            "add",
            &pair,
            Box::new(|t, v| {
                let o = t.add(v[0], v[1]).unwrap();
                contract(t, o, 7)
            }),
        ),
        (
            "sub",
            &pair,
            Box::new(|t, v| {
                let o = t.sub(v[0], v[1]).unwrap();
                contract(t, o, 7)
            }),
        ),
        (
            "mul",
            &pair,
            Box::new(|t, v| {
                let o = t.mul(v[0], v[1]).unwrap();
                contract(t, o, 7)
            }),
        ),
        (
            "scale",
            &single,
            Box::new(|t, v| {
                let o = t.scale(v[0], -1.7);
                contract(t, o, 7)
            }),
        ),
        (
            "sum",
            &single,
            Box::new(|t, v| {
                let o = t.mul(v[0], v[0]).unwrap();
                t.sum(o)
            }),
        ),
        ("mse", &pair, Box::new(|t, v| t.mse(v[0], v[1]).unwrap())),
        ("l2_squared", &single, Box::new(|t, v| t.l2_squared(v[0]))),
        (
            "leaky_relu",
            &single,
            Box::new(|t, v| {
                let o = t.leaky_relu(v[0], 0.1);
                contract(t, o, 7)
            }),
        ),
        (
            "concat",
            &pair,
            Box::new(|t, v| {
                let o = t.concat(v[0], v[1]).unwrap();
                contract(t, o, 7)
            }),
        ),
        (
            "fft2",
            &single,
            Box::new(|t, v| {
                let o = t.fft2(v[0]).unwrap();
                contract(t, o, 5)
            }),
        ),
        (
            "ifft2",
            &single,
            Box::new(|t, v| {
                let o = t.ifft2(v[0]).unwrap();
                contract(t, o, 5)
            }),
        ),
        (
            "mask_mul",
            &single,
            Box::new(move |t, v| {
                let o = t.mask_mul(v[0], w.clone()).unwrap();
                contract(t, o, 5)
            }),
        ),
        (
            "real_part",
            &single,
            Box::new(|t, v| {
                let o = t.real_part(v[0]).unwrap();
                contract(t, o, 5)
            }),
        ),
        (
            "complexify",
            &single,
            Box::new(|t, v| {
                let r = t.real_part(v[0]).unwrap();
                let c = t.complexify(r).unwrap();
                let f = t.fft2(c).unwrap();
                contract(t, f, 5)
            }),
        ),
    ];
    let mut worst_op: (f64, &str) = (0.0, "");
    for (name, inputs, build) in &ops {
        let e = check_program(inputs, build.as_ref());
        if e > worst_op.0 {
            worst_op = (e, name);
        }
    }
    let conv = vec![
        random_tensor(&mut rng, &[2, 16, 16]),
        random_tensor(&mut rng, &[3, 2, 3, 3]),
        random_tensor(&mut rng, &[3]),
    ];
    let e = check_program(&conv, &|t, v| {
        let o = t.conv2d(v[0], v[1], v[2]).unwrap();
        contract(t, o, 9)
    });
    if e > worst_op.0 {
        worst_op = (e, "conv2d");
    }

    let arch = NetArch {
        hidden: 4,
        depth: 3,
        ..NetArch::default()
    };
    let denoiser = DenoiserRecon::new(busy_net(arch.clone(), 13));
    let config = UnrolledConfig {
        n_iters: 3,
        step_size: 1.0,
        shared_weights: false,
    };
    let unrolled = UnrolledRecon::new(
        config,
        (0..3).map(|i| busy_net(arch.clone(), 20 + i)).collect(),
    )
    .unwrap();
    let recons: [&dyn Differentiable; 3] = [&ZeroFilled, &denoiser, &unrolled];
    let ksp = vec![random_tensor(&mut rng, &[2, 16, 16])];
    let mut worst_recon: (f64, String) = (0.0, String::new());
    for r in recons {
        let e = check_program(&ksp, &|t, v| {
            let out = r.record(t, v[0], &mask).unwrap();
            contract(t, out, 11)
        });
        if e >= worst_recon.0 {
            worst_recon = (e, r.name());
        }
    }
    let detail = format!(
        "{} ops, worst {} at {:.1e} (<1e-4); 3 reconstructors, worst {} at {:.1e} (<1e-3)",
        ops.len() + 1,
        worst_op.1,
        worst_op.0,
        worst_recon.1,
        worst_recon.0
    );
    if worst_op.0 < 1e-4 && worst_recon.0 < 1e-3 {
        within(Duration::from_secs(60), start, detail)
    } else {
        Err(detail)
    }
}

// 3. Hard data consistency.

fn data_consistency_exactness() -> Check {
    let mut worst_measured: f64 = 0.0;
    let mut worst_image: f64 = 0.0;
    let mut untouched = true;
    let mut idempotent = true;
    for trial in 0..100u64 {
        let mut rng = RngStream::new(100 + trial);
        let n = [16, 32, 64][trial as usize % 3];
        let mask = make_cartesian_mask(n, 4.0, 0.08, &mut rng).unwrap();
        let k = gaussian_complex(&mut rng, n, n);
        let y = mask.apply(&gaussian_complex(&mut rng, n, n)).unwrap();
        let out = dc_kspace(&k, &y, &mask, 1.0).unwrap();
        for r in 0..n {
            for c in 0..n {
                if mask.is_selected(r) {
                    worst_measured = worst_measured.max((out.get(r, c) - y.get(r, c)).norm());
                } else {
                    untouched &= out.get(r, c) == k.get(r, c);
                }
            }
        }
        idempotent &= dc_kspace(&out, &y, &mask, 1.0).unwrap() == out;

        let x = gaussian_complex(&mut rng, n, n);
        let img = data_consistency(&x, &y, &mask, 1.0).unwrap();
        let k_img = fft2(&img).unwrap();
        let k_x = fft2(&x).unwrap();
        for r in 0..n {
            for c in 0..n {
                let expected = if mask.is_selected(r) {
                    y.get(r, c)
                } else {
                    k_x.get(r, c)
                };
                worst_image = worst_image.max((k_img.get(r, c) - expected).norm());
            }
        }
    }
    ensure(
        worst_measured < 1e-12 && worst_image < 1e-12 && untouched && idempotent,
        format!(
            "100 trials: measured entries off by {worst_measured:.1e} (k-space) / {worst_image:.1e} (image-domain round trip), \
             unmeasured untouched {untouched}, idempotent {idempotent}"
        ),
    )
}

// 4. Posterior-mean oracle for a Gaussian prior.

fn dense_posterior_mean(
    mu: &RealTensor2,
    tau2: f64,
    mask: &SamplingMask,
    y: &ComplexTensor2,
    s2: f64,
) -> Vec<f64> {
    let n = mu.rows();
    let mut a = DMatrix::zeros(2 * n * n, n * n);
    for j in 0..n * n {
        let mut e = RealTensor2::zeros(n, n);
        e.data_mut()[j] = 1.0;
        for (i, v) in apply_forward(&e, mask).unwrap().data().iter().enumerate() {
            a[(2 * i, j)] = v.re;
            a[(2 * i + 1, j)] = v.im;
        }
    }
    let ym = mask.apply(y).unwrap();
    let yv = DVector::from_iterator(2 * ym.len(), ym.data().iter().flat_map(|v| [v.re, v.im]));
    let lhs = a.transpose() * &a / s2 + DMatrix::identity(n * n, n * n) / tau2;
    let rhs = a.transpose() * yv / s2 + DVector::from_column_slice(mu.data()) / tau2;
    lhs.cholesky()
        .unwrap()
        .solve(&rhs)
        .iter()
        .copied()
        .collect()
}

fn sampler_oracle() -> Check {
    let start = Instant::now();
    let mu = shepp_logan(16).unwrap().image;
    let tau2 = 0.01;
    let prior = GaussianMixture::single(mu.clone(), tau2).unwrap();
    let mask = make_cartesian_mask(16, 4.0, 0.125, &mut RngStream::new(11)).unwrap();
    let gt = prior.sample(&mut RngStream::new(11));
    let ksp = fft2_real(&gt).unwrap();
    let oracle = dense_posterior_mean(&mu, tau2, &mask, &ksp, 1e-8);
    let mut mean = vec![0.0; 256];
    for seed in 0..32 {
        let cfg = SamplerConfig {
            seed,
            ..SamplerConfig::default()
        };
        let out = pc_sample(&prior, &ksp, &mask, &NoiseSchedule::default(), &cfg, false).unwrap();
        for (m, v) in mean.iter_mut().zip(out.image.data()) {
            *m += v / 32.0;
        }
    }
    let range = oracle.iter().cloned().fold(f64::MIN, f64::max)
        - oracle.iter().cloned().fold(f64::MAX, f64::min);
    let mad = mean
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 256.0;
    let rel = mad / range;
    let detail = format!(
        "32-seed mean vs dense solve: mean abs deviation {:.2}% of range (<5%)",
        100.0 * rel
    );
    if rel < 0.05 {
        within(Duration::from_secs(300), start, detail)
    } else {
        Err(detail)
    }
}

// 5. Score evaluations per reconstruction.

struct Counting<'a> {
    inner: &'a dyn Score,
    calls: AtomicUsize,
}

impl Score for Counting<'_> {
    fn kind(&self) -> &'static str {
        "counting"
    }

    fn score(&self, x: &RealTensor2, sigma: f64) -> Result<RealTensor2, ReconError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score(x, sigma)
    }
}

fn step_accounting() -> Check {
    let gt = shepp_logan(16).unwrap().image;
    let prior = GaussianMixture::single(RealTensor2::zeros(16, 16), 0.1).unwrap();
    let counter = Counting {
        inner: &prior,
        calls: AtomicUsize::new(0),
    };
    let mask = make_cartesian_mask(16, 4.0, 0.125, &mut RngStream::new(3)).unwrap();
    let ksp = forward(&gt, &mask, NoiseModel::noiseless(), &mut RngStream::new(0))
        .unwrap()
        .ksp;
    let out = pc_sample(
        &counter,
        &ksp,
        &mask,
        &NoiseSchedule::default(),
        &SamplerConfig::default(),
        false,
    )
    .unwrap();
    let calls = counter.calls.load(Ordering::Relaxed);
    ensure(
        calls == 2000 && out.score_evaluations == 2000,
        format!(
            "default sampler: {calls} score calls, {} reported (expected 2000)",
            out.score_evaluations
        ),
    )
}

// 6. Attack budget.

fn attack_budget() -> Check {
    let arch = NetArch {
        hidden: 4,
        depth: 3,
        ..NetArch::default()
    };
    let denoiser = DenoiserRecon::new(busy_net(arch.clone(), 1));
    let unrolled = UnrolledRecon::new(
        UnrolledConfig {
            n_iters: 2,
            ..UnrolledConfig::default()
        },
        vec![busy_net(arch, 2)],
    )
    .unwrap();
    let models: [&dyn Differentiable; 3] = [&ZeroFilled, &denoiser, &unrolled];
    let mut runs = 0;
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    let mut init_err: f64 = 0.0;
    for i in 0..12u64 {
        let mut rng = RngStream::new(300 + i);
        let gt = mri_robust::phantom::random_ellipses(16, (3, 8), &mut rng)
            .unwrap()
            .image;
        let mask = make_cartesian_mask(16, 4.0, 0.125, &mut rng).unwrap();
        let ksp = forward(&gt, &mask, NoiseModel::noiseless(), &mut rng)
            .unwrap()
            .ksp;
        let kn = ksp.l2_norm();
        let d0 = init_delta(&ksp, 1e4, &mut RngStream::new(i)).unwrap();
        init_err = init_err.max((d0.l2_norm() / kn - 1e-4).abs());
        for eps in [0.0, 0.005, 0.01, 0.05, 0.1, 0.3] {
            for lr in [
                LearningRate::Relative(1e-3),
                LearningRate::Relative(1e-1),
                LearningRate::Fixed(1.0),
            ] {
                let model = models[(i as usize + runs) % 3];
                let cfg = AttackConfig {
                    epsilon: eps,
                    iters: 5,
                    lr,
                    seed: i,
                    ..AttackConfig::default()
                };
                let out = worst_case_perturb(model, &ksp, &mask, &cfg).unwrap();
                runs += 1;
                let ratio = out.delta.l2_norm() / kn;
                worst = worst.max(ratio - eps);
                if out.delta.l2_norm() > eps * kn + 1e-9 * kn || !out.delta.is_finite() {
                    violations += 1;
                }
            }
        }
    }
    ensure(
        violations == 0 && init_err < 1e-12,
        format!(
            "{runs} perturbations, {violations} over budget (max excess {worst:.1e}); init ratio off 1e-4 by {init_err:.1e}"
        ),
    )
}

// 7 to 9. Desk-scale experiment.

const EPSILONS: [f64; 5] = [0.005, 0.01, 0.02, 0.05, 0.1];
const N_ITEMS: usize = 20;

struct ItemResult {
    /// (adv, rand) SSIM drop of the denoiser per epsilon.
    denoiser: Vec<(f64, f64)>,
    /// (adv, rand) SSIM drop of the sampler at epsilon 0.01 and 0.05.
    diffusion: [(f64, f64); 2],
    /// Lag-1 autocorrelation of `adv - clean` at epsilon 0.05.
    autocorr_denoiser: f64,
    autocorr_diffusion: f64,
}

struct Experiment {
    items: Vec<ItemResult>,
    train_denoiser: Duration,
    train_score: Duration,
    white_box: Duration,
    transfer: Duration,
}

fn ssim_drop(gt: &RealTensor2, clean: &RealTensor2, other: &RealTensor2) -> f64 {
    let l = data_range(gt);
    ssim(gt, clean, l).unwrap() - ssim(gt, other, l).unwrap()
}

fn run_experiment() -> Experiment {
    let data = build_dataset(&DatasetConfig::default()).unwrap();
    let masks = MaskDistribution {
        acceleration: 4.0,
        center_fraction: 0.08,
        noise: NoiseModel::noiseless(),
    };

    let start = Instant::now();
    let init =
        DenoiserRecon::new(DenoiserNet::new(NetArch::default(), &mut RngStream::new(1)).unwrap());
    let (denoiser, _) =
        train_supervised(&init, &data.train.images(), &masks, &TrainConfig::default()).unwrap();
    let train_denoiser = start.elapsed();

    let start = Instant::now();
    let init = LearnedScore::init(16, 4, &mut RngStream::new(2)).unwrap();
    let (score, _) = train_score(
        &init,
        &data.train.images(),
        &NoiseSchedule::default(),
        &TrainConfig::default(),
    )
    .unwrap();
    let schedule = NoiseSchedule::new(0.01, 10.0, 200).unwrap();
    let diffusion = Cached::new(DiffusionRecon::new(
        Arc::new(score),
        schedule,
        SamplerConfig::default(),
    ));
    let train_score = start.elapsed();

    let items: Vec<TransferItem> = data
        .test
        .images()
        .into_iter()
        .take(N_ITEMS)
        .enumerate()
        .map(|(index, gt)| {
            let mut rng = RngStream::new(derive_seed(500, index as u64));
            let mask = make_cartesian_mask(64, masks.acceleration, masks.center_fraction, &mut rng)
                .unwrap();
            let ksp = forward(&gt, &mask, masks.noise, &mut rng).unwrap().ksp;
            TransferItem {
                index,
                gt,
                ksp,
                mask,
            }
        })
        .collect();

    let mut white_box = Duration::ZERO;
    let mut transfer = Duration::ZERO;
    let mut results: Vec<ItemResult> = (0..N_ITEMS)
        .map(|_| ItemResult {
            denoiser: Vec::new(),
            diffusion: [(0.0, 0.0); 2],
            autocorr_denoiser: f64::NAN,
            autocorr_diffusion: f64::NAN,
        })
        .collect();
    for eps in EPSILONS {
        let cfg = AttackConfig {
            epsilon: eps,
            seed: 3,
            ..AttackConfig::default()
        };
        let with_sampler = eps == 0.01 || eps == 0.05;
        for item in &items {
            let start = Instant::now();
            let white = [("denoiser".to_string(), &denoiser as &dyn Reconstructor)];
            let out = transfer_item(&denoiser, &white, item, &cfg).unwrap();
            white_box += start.elapsed();
            let t = &out.targets[0];
            let r = &mut results[item.index];
            r.denoiser.push((
                ssim_drop(&item.gt, &t.clean, &t.adv),
                ssim_drop(&item.gt, &t.clean, &t.rand),
            ));
            if !with_sampler {
                continue;
            }
            let start = Instant::now();
            let adv_ksp = item.ksp.add(&out.attack.delta).unwrap();
            let rand_ksp = item.ksp.add(&out.random_delta).unwrap();
            let clean = diffusion.reconstruct(&item.ksp, &item.mask).unwrap();
            let adv = diffusion.reconstruct(&adv_ksp, &item.mask).unwrap();
            let rand = diffusion.reconstruct(&rand_ksp, &item.mask).unwrap();
            transfer += start.elapsed();
            let drops = (
                ssim_drop(&item.gt, &clean, &adv),
                ssim_drop(&item.gt, &clean, &rand),
            );
            if eps == 0.01 {
                r.diffusion[0] = drops;
            } else {
                r.diffusion[1] = drops;
                r.autocorr_denoiser = lag1_autocorrelation(&t.adv.sub(&t.clean).unwrap());
                r.autocorr_diffusion = lag1_autocorrelation(&adv.sub(&clean).unwrap());
            }
        }
    }
    Experiment {
        items: results,
        train_denoiser,
        train_score,
        white_box,
        transfer,
    }
}

fn white_box_instability(x: &Experiment) -> Check {
    let at = |k: usize, adv: bool| -> Vec<f64> {
        x.items
            .iter()
            .map(|r| {
                if adv {
                    r.denoiser[k].0
                } else {
                    r.denoiser[k].1
                }
            })
            .collect()
    };
    let k05 = EPSILONS.iter().position(|&e| e == 0.05).unwrap();
    let (adv, rand) = (median(&at(k05, true)), median(&at(k05, false)));
    let curve: Vec<f64> = (0..EPSILONS.len()).map(|k| median(&at(k, true))).collect();
    let monotone = curve.windows(2).all(|w| w[1] >= w[0]);
    let time = x.train_denoiser + x.white_box;
    let detail = format!(
        "eps 0.05: median dSSIM adv {adv:.4} vs random {rand:.4} (ratio {:.1}, need >= 3); medians over {EPSILONS:?}: {:?} \
         (monotone {monotone}); {:.0}s of 900s budget",
        adv / rand,
        curve.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
        time.as_secs_f64()
    );
    ensure(
        adv >= 3.0 * rand && monotone && time < Duration::from_secs(900),
        detail,
    )
}

fn transfer_to_sampler(x: &Experiment) -> Check {
    let wins = x
        .items
        .iter()
        .filter(|r| r.diffusion[0].0 > r.diffusion[0].1)
        .count();
    let adv: Vec<f64> = x.items.iter().map(|r| r.diffusion[0].0).collect();
    let rand: Vec<f64> = x.items.iter().map(|r| r.diffusion[0].1).collect();
    let time = x.train_score + x.transfer;
    let detail = format!(
        "eps 0.01, 200 levels: adversarial beats random on {wins}/{N_ITEMS} items (need >= 14); median dSSIM adv {:.4}, \
         random {:.4}; {:.0}s of 1800s budget",
        median(&adv),
        median(&rand),
        time.as_secs_f64()
    );
    ensure(
        wins * 10 >= 7 * N_ITEMS && time < Duration::from_secs(1800),
        detail,
    )
}

fn artifact_character(x: &Experiment) -> Check {
    let den = median(
        &x.items
            .iter()
            .map(|r| r.autocorr_denoiser)
            .collect::<Vec<_>>(),
    );
    let dif = median(
        &x.items
            .iter()
            .map(|r| r.autocorr_diffusion)
            .collect::<Vec<_>>(),
    );
    ensure(
        dif < den,
        format!("eps 0.05: median lag-1 autocorrelation of the residual, sampler {dif:.3} vs denoiser {den:.3}"),
    )
}

// 10. Reproducibility of the full pipeline.

fn reproducibility() -> Check {
    let cfg = common::tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    mri_robust_harness::run(&cfg, a.path()).map_err(|e| e.to_string())?;
    mri_robust_harness::run(&cfg, b.path()).map_err(|e| e.to_string())?;
    let names = common::csv_files(a.path());
    if names != common::csv_files(b.path()) {
        return Err("the two runs wrote different CSV files".into());
    }
    let differing: Vec<String> = names
        .iter()
        .filter(|n| fs::read(a.path().join(n)).unwrap() != fs::read(b.path().join(n)).unwrap())
        .map(|n| n.display().to_string())
        .collect();
    ensure(
        differing.is_empty() && !names.is_empty(),
        format!(
            "{} CSV files compared, {} differ {differing:?}",
            names.len(),
            differing.len()
        ),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, start: Instant, check: Check| {
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match check {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {status} [{name}] ({secs:.1}s) {detail}");
    };
    let quick: [(usize, &str, fn() -> Check); 6] = [
        (1, "fft and operators", fft_and_operators),
        (2, "finite-difference gradients", gradients),
        (3, "hard data consistency", data_consistency_exactness),
        (4, "sampler posterior mean", sampler_oracle),
        (5, "score evaluations", step_accounting),
        (6, "attack budget", attack_budget),
    ];
    for (id, name, f) in quick {
        let start = Instant::now();
        report(id, name, start, f());
    }
    let start = Instant::now();
    let experiment = run_experiment();
    report(
        7,
        "white-box instability",
        start,
        white_box_instability(&experiment),
    );
    report(
        8,
        "transfer to the sampler",
        start,
        transfer_to_sampler(&experiment),
    );
    report(
        9,
        "residual character",
        start,
        artifact_character(&experiment),
    );
    let start = Instant::now();
    report(10, "pipeline reproducibility", start, reproducibility());
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
