#![allow(dead_code)]

use pixelsnail::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| scale * rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Relative error with a floor on the denominator so that entries whose
/// true gradient is ~0 are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Builds `build(inputs)` and reduces it with fixed random weights to a
/// scalar `sum(r * out)`.
fn scalar_of<F>(inputs: &[Tensor<f64>], build: &F, proj_seed: u64) -> (Graph<f64>, Vec<Var>, Var)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let shape = g.shape(out).to_vec();
    let r = random_tensor(&shape, &mut rng(proj_seed), 1.0);
    let r = g.constant(r);
    let prod = g.mul(out, r).unwrap();
    let loss = g.sum(prod).unwrap();
    (g, vars, loss)
}

/// Maximum relative error between the tape gradient and central
/// differences over every input entry.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], build: F, step: f64, floor: f64) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let (mut g, vars, loss) = scalar_of(inputs, &build, 999);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.tensor(v).len()])
        })
        .collect();
    let eval = |inputs: &[Tensor<f64>]| {
        let (g, _, loss) = scalar_of(inputs, &build, 999);
        g.values(loss)[0]
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].values()[j];
            work[i].values_mut()[j] = x + step;
            let up = eval(&work);
            work[i].values_mut()[j] = x - step;
            let down = eval(&work);
            work[i].values_mut()[j] = x;
            let numeric = (up - down) / (2.0 * step);
            let e = rel_err(analytic[i][j], numeric, floor);
            if e > worst && std::env::var("GC_DEBUG").is_ok() {
                eprintln!(
                    "input {i} entry {j}: analytic {:e} numeric {:e}",
                    analytic[i][j], numeric
                );
            }
            worst = worst.max(e);
        }
    }
    worst
}
