#![allow(dead_code)]

use mri_robust::autodiff::{Tape, Tensor, Var};
use mri_robust::recon::{DenoiserNet, NetArch};
use mri_robust::tensor::RngStream;

pub fn random_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Max abs difference divided by the largest finite-difference magnitude.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    diff / scale
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Checks every input slot of a scalar-valued tape program against central
/// differences. Returns the worst relative error.
pub fn check_program(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (slot, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[slot]).unwrap().data().to_vec();
        let numeric = numeric_grad(input, 1e-5, |probe| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| t.constant(if j == slot { probe.clone() } else { v.clone() }))
                .collect();
            let l = build(&mut t, &vs);
            t.value(l).item()
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// A net whose zero-initialized output layer has been randomized so that the
/// whole stack contributes.
pub fn busy_net(arch: NetArch, seed: u64, scale: f64) -> DenoiserNet {
    let mut rng = RngStream::new(seed);
    let mut net = DenoiserNet::new(arch, &mut rng).unwrap();
    let mut params = net.params().to_vec();
    for p in params.iter_mut() {
        for v in p.data_mut() {
            *v += scale * rng.normal();
        }
    }
    net.set_params(params).unwrap();
    net
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
