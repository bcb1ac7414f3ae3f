#![allow(dead_code)]

use poifusion_core::autodiff::{Tape, Var};
use poifusion_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so that entries whose true
/// derivative is ~0 are judged against finite-difference noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Build `f` on a fresh tape and reduce its output to a scalar with fixed
/// random weights, so every output entry carries a distinct adjoint.
fn scalarize(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let n = tape.value(out).numel();
    if n == 1 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(tape.shape(out), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let wv = tape.constant(w);
    let p = tape.mul(out, wv).unwrap();
    tape.sum(p).unwrap()
}

fn eval(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let s = scalarize(&mut tape, out, 99);
    tape.value(s).item()
}

/// Worst relative error between reverse-mode and central-difference
/// gradients over every entry of every input.
pub fn grad_check(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let s = scalarize(&mut tape, out, 99);
    tape.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let ad = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for j in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let fd = (eval(&plus, f) - eval(&minus, f)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(ad[j], fd));
        }
    }
    worst
}
