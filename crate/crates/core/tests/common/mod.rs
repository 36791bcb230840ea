#![allow(dead_code)]

use collidenet_core::numerics::{Tape, Tensor, Var};
use collidenet_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `|a - f| / max(|a|, |f|, 1e-6)`.
pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

/// Reduces any output to a scalar through a fixed random weighting so
/// that no gradient entry cancels by symmetry.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(&mut rng(seed), tape.value(y).shape());
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Compares reverse-mode gradients of `f` with central differences for
/// every element of every input. Returns the worst relative error.
pub fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();

    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs).unwrap();
        t.value(l).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
        for j in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += EPS;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * EPS;
            let down = eval(&xs);
            let fd = (up - down) / (2.0 * EPS);
            let e = rel_err(analytic[j], fd);
            assert!(e < TOL, "input {i} element {j}: analytic {} vs fd {fd} (rel {e:.2e})", analytic[j]);
            worst = worst.max(e);
        }
    }
    worst
}
