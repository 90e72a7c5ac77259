mod common;

use std::sync::Arc;

use common::{busy_net, check_program, random_tensor};
use mri_robust::autodiff::{Tape, Tensor, Var};
use mri_robust::mri::{make_cartesian_mask, SamplingMask};
use mri_robust::recon::{
    DenoiserRecon, Differentiable, NetArch, UnrolledConfig, UnrolledRecon, ZeroFilled,
};
use mri_robust::tensor::RngStream;

const TOL: f64 = 1e-4;

/// Contracts a tensor against fixed random weights so the loss depends on
/// every output entry.
fn contract(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(random_tensor(&mut RngStream::new(seed), &shape));
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut rng = RngStream::new(seed);
    shapes.iter().map(|s| random_tensor(&mut rng, s)).collect()
}

#[test]
fn elementwise_ops() {
    let x = inputs(1, &[&[2, 16, 16], &[2, 16, 16]]);
    let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &[Var]) -> Var>)> = vec![
        (
            "add",
            Box::new(|t, v| {
                let o = t.add(v[0], v[1]).unwrap();
                contract(t, o, 7)
            }),
        ),
        (
            "sub",
            Box::new(|t, v| {
                let o = t.sub(v[0], v[1]).unwrap();
                contract(t, o, 7)
            }),
        ),
        (
            "mul",
            Box::new(|t, v| {
                let o = t.mul(v[0], v[1]).unwrap();
                contract(t, o, 7)
            }),
        ),
        (
            "scale",
            Box::new(|t, v| {
                let o = t.scale(v[0], -1.7);
                let p = t.add(o, v[1]).unwrap();
                contract(t, p, 7)
            }),
        ),
        ("mse", Box::new(|t, v| t.mse(v[0], v[1]).unwrap())),
        (
            "l2_squared",
            Box::new(|t, v| {
                let o = t.sub(v[0], v[1]).unwrap();
                t.l2_squared(o)
            }),
        ),
        (
            "leaky_relu",
            Box::new(|t, v| {
                let o = t.leaky_relu(v[0], 0.1);
                let p = t.mul(o, v[1]).unwrap();
                t.sum(p)
            }),
        ),
        (
            "concat",
            Box::new(|t, v| {
                let o = t.concat(v[0], v[1]).unwrap();
                contract(t, o, 7)
            }),
        ),
    ];
    for (name, build) in cases {
        let err = check_program(&x, |t, v| build(t, v));
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn spectral_ops() {
    let x = inputs(2, &[&[2, 16, 16]]);
    let mask = make_cartesian_mask(16, 4.0, 0.125, &mut RngStream::new(3)).unwrap();
    let weights: Arc<[f64]> = mask.weights().into();
    let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &[Var]) -> Var>)> = vec![
        (
            "fft2",
            Box::new(|t, v| {
                let o = t.fft2(v[0]).unwrap();
                contract(t, o, 5)
            }),
        ),
        (
            "ifft2",
            Box::new(|t, v| {
                let o = t.ifft2(v[0]).unwrap();
                contract(t, o, 5)
            }),
        ),
        (
            "mask_mul",
            Box::new(|t, v| {
                let o = t.mask_mul(v[0], weights.clone()).unwrap();
                contract(t, o, 5)
            }),
        ),
        (
            "real_part",
            Box::new(|t, v| {
                let o = t.real_part(v[0]).unwrap();
                contract(t, o, 5)
            }),
        ),
        (
            "complexify",
            Box::new(|t, v| {
                let r = t.real_part(v[0]).unwrap();
                let c = t.complexify(r).unwrap();
                let f = t.fft2(c).unwrap();
                contract(t, f, 5)
            }),
        ),
    ];
    for (name, build) in cases {
        let err = check_program(&x, |t, v| build(t, v));
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn conv2d_all_slots() {
    let x = inputs(4, &[&[2, 8, 8], &[3, 2, 3, 3], &[3]]);
    let err = check_program(&x, |t, v| {
        let o = t.conv2d(v[0], v[1], v[2]).unwrap();
        contract(t, o, 9)
    });
    assert!(err < TOL, "{err}");
    let x5 = inputs(5, &[&[1, 8, 8], &[2, 1, 5, 5], &[2]]);
    let err = check_program(&x5, |t, v| {
        let o = t.conv2d(v[0], v[1], v[2]).unwrap();
        contract(t, o, 9)
    });
    assert!(err < TOL, "k=5: {err}");
}

#[test]
fn reused_variable_accumulates() {
    let x = inputs(6, &[&[1, 8, 8]]);
    let err = check_program(&x, |t, v| {
        let sq = t.mul(v[0], v[0]).unwrap();
        let mix = t.add(sq, v[0]).unwrap();
        contract(t, mix, 1)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x = inputs(7, &[&[2, 8, 8]]);
    let grad_of = |factor: f64| {
        let mut t = Tape::new();
        let v = t.param(x[0].clone());
        let f = t.fft2(v).unwrap();
        let l = contract(&mut t, f, 3);
        let s = t.scale(l, factor);
        t.backward(s).unwrap();
        t.grad(v).unwrap().data().to_vec()
    };
    let g1 = grad_of(1.0);
    let g3 = grad_of(3.0);
    for (a, b) in g1.iter().zip(&g3) {
        assert!((3.0 * a - b).abs() < 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn gradients_are_deterministic() {
    let arch = NetArch {
        hidden: 4,
        depth: 3,
        ..NetArch::default()
    };
    let net = busy_net(arch, 1, 0.1);
    let x = random_tensor(&mut RngStream::new(2), &[1, 16, 16]);
    let run = || {
        let mut t = Tape::new();
        let params = net.bind(&mut t, true);
        let input = t.constant(x.clone());
        let out = net.record(&mut t, &params, input).unwrap();
        let l = contract(&mut t, out, 4);
        t.backward(l).unwrap();
        params
            .iter()
            .flat_map(|p| {
                t.grad(*p)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}

fn check_recon(recon: &dyn Differentiable, mask: &SamplingMask, tol: f64) {
    let ksp = random_tensor(&mut RngStream::new(8), &[2, 16, 16]);
    let err = check_program(&[ksp], |t, v| {
        let out = recon.record(t, v[0], mask).unwrap();
        contract(t, out, 11)
    });
    assert!(err < tol, "{}: {err}", recon.name());
}

#[test]
fn reconstructors_match_finite_differences() {
    let mask = make_cartesian_mask(16, 4.0, 0.125, &mut RngStream::new(12)).unwrap();
    check_recon(&ZeroFilled, &mask, 1e-3);

    let arch = NetArch {
        hidden: 4,
        depth: 3,
        ..NetArch::default()
    };
    let denoiser = DenoiserRecon::new(busy_net(arch.clone(), 13, 0.1));
    check_recon(&denoiser, &mask, 1e-3);

    let config = UnrolledConfig {
        n_iters: 3,
        step_size: 1.0,
        shared_weights: false,
    };
    let nets = (0..3)
        .map(|i| busy_net(arch.clone(), 20 + i, 0.1))
        .collect();
    let unrolled = UnrolledRecon::new(config, nets).unwrap();
    check_recon(&unrolled, &mask, 1e-3);
}
