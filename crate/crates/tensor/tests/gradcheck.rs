//! Central finite differences against tape gradients, per primitive.

use alora_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const INSTANCES: usize = 100;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

/// Scalarises `f` as `Σ f(inputs) ⊙ weights` so every output entry is exercised.
fn scalar_loss(
    inputs: &[Tensor],
    weights: &Tensor,
    f: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let loss = if tape.value(out).shape() == [1, 1] && weights.shape() == [1, 1] {
        out
    } else {
        let w = tape.constant(weights.clone());
        let p = tape.mul(out, w).unwrap();
        tape.sum(p)
    };
    (tape, vars, loss)
}

fn numeric_grad(
    inputs: &[Tensor],
    weights: &Tensor,
    which: usize,
    f: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> Vec<f64> {
    let mut grad = Vec::with_capacity(inputs[which].len());
    for k in 0..inputs[which].len() {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[k] += H;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[k] -= H;
        let (tp, _, lp) = scalar_loss(&plus, weights, f);
        let (tm, _, lm) = scalar_loss(&minus, weights, f);
        grad.push((tp.value(lp).get(0, 0) - tm.value(lm).get(0, 0)) / (2.0 * H));
    }
    grad
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Worst relative error over all inputs of one instance.
fn check(inputs: &[Tensor], weights: &Tensor, f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let (mut tape, vars, loss) = scalar_loss(inputs, weights, f);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad_tensor(*v).into_data();
        let numeric = numeric_grad(inputs, weights, i, f);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn sweep(
    name: &str,
    seed: u64,
    tol: f64,
    mut make: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, [usize; 2]),
    f: &dyn Fn(&mut Tape, &[Var]) -> Var,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (inputs, out_shape) = make(&mut rng);
        let weights = random(&mut rng, out_shape[0], out_shape[1]);
        worst = worst.max(check(&inputs, &weights, f));
    }
    assert!(worst < tol, "{name}: worst relative error {worst:e} >= {tol:e}");
}

#[test]
fn matmul_3x4_by_4x2() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 4, 2);
    let w = random(&mut rng, 3, 2);
    let err = check(&[a, b], &w, &|t, v| t.matmul(v[0], v[1]).unwrap());
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn matmul_random_shapes() {
    sweep(
        "matmul",
        1,
        1e-4,
        |rng| {
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            (vec![random(rng, m, k), random(rng, k, n)], [m, n])
        },
        &|t, v| t.matmul(v[0], v[1]).unwrap(),
    );
}

#[test]
fn sigmoid_at_point_three() {
    let x = Tensor::row(vec![0.3]);
    let w = Tensor::row(vec![1.0]);
    let err = check(&[x], &w, &|t, v| t.sigmoid(v[0]));
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn elementwise_unary_ops() {
    sweep(
        "sigmoid",
        2,
        1e-4,
        |rng| (vec![random(rng, 3, 4)], [3, 4]),
        &|t, v| t.sigmoid(v[0]),
    );
    sweep(
        "gelu",
        3,
        1e-4,
        |rng| (vec![random(rng, 3, 4)], [3, 4]),
        &|t, v| t.gelu(v[0]),
    );
    // Keep relu inputs away from the kink so the central difference is defined.
    sweep(
        "relu",
        4,
        1e-4,
        |rng| {
            let x = random(rng, 3, 4).map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
            (vec![x], [3, 4])
        },
        &|t, v| t.relu(v[0]),
    );
    sweep(
        "scale",
        5,
        1e-4,
        |rng| (vec![random(rng, 2, 3)], [2, 3]),
        &|t, v| t.scale(v[0], -1.7),
    );
    sweep(
        "transpose",
        6,
        1e-4,
        |rng| (vec![random(rng, 2, 5)], [5, 2]),
        &|t, v| t.transpose(v[0]),
    );
}

#[test]
fn binary_ops_with_broadcast() {
    sweep(
        "add",
        10,
        1e-4,
        |rng| (vec![random(rng, 3, 4), random(rng, 3, 4)], [3, 4]),
        &|t, v| t.add(v[0], v[1]).unwrap(),
    );
    sweep(
        "add_row",
        11,
        1e-4,
        |rng| (vec![random(rng, 3, 4), random(rng, 1, 4)], [3, 4]),
        &|t, v| t.add(v[0], v[1]).unwrap(),
    );
    sweep(
        "mul",
        12,
        1e-4,
        |rng| (vec![random(rng, 3, 4), random(rng, 3, 4)], [3, 4]),
        &|t, v| t.mul(v[0], v[1]).unwrap(),
    );
    sweep(
        "mul_row",
        13,
        1e-4,
        |rng| (vec![random(rng, 3, 4), random(rng, 1, 4)], [3, 4]),
        &|t, v| t.mul(v[0], v[1]).unwrap(),
    );
}

#[test]
fn normalisation_and_softmax() {
    sweep(
        "layernorm",
        20,
        1e-4,
        |rng| (vec![random(rng, 3, 6)], [3, 6]),
        &|t, v| t.layernorm(v[0]),
    );
    sweep(
        "softmax_rows",
        21,
        1e-4,
        |rng| (vec![random(rng, 3, 5)], [3, 5]),
        &|t, v| t.softmax_rows(v[0]),
    );
}

#[test]
fn cross_entropy_4x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let z = random(&mut rng, 4, 5).scale(3.0);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let w = Tensor::row(vec![1.0]);
        let err = check(&[z], &w, &|t, v| {
            t.softmax_cross_entropy(v[0], &targets).unwrap()
        });
        worst = worst.max(err);
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn structural_ops() {
    sweep(
        "concat_cols",
        40,
        1e-4,
        |rng| (vec![random(rng, 3, 2), random(rng, 3, 3)], [3, 5]),
        &|t, v| t.concat_cols(&[v[0], v[1]]).unwrap(),
    );
    sweep(
        "concat_rows",
        41,
        1e-4,
        |rng| (vec![random(rng, 2, 3), random(rng, 1, 3)], [3, 3]),
        &|t, v| t.concat_rows(&[v[0], v[1]]).unwrap(),
    );
    sweep(
        "slice_rows",
        42,
        1e-4,
        |rng| (vec![random(rng, 5, 3)], [2, 3]),
        &|t, v| t.slice_rows(v[0], 1, 3).unwrap(),
    );
    sweep(
        "slice_cols",
        43,
        1e-4,
        |rng| (vec![random(rng, 3, 5)], [3, 3]),
        &|t, v| t.slice_cols(v[0], 2, 5).unwrap(),
    );
    sweep(
        "sum",
        44,
        1e-4,
        |rng| (vec![random(rng, 3, 5)], [1, 1]),
        &|t, v| t.sum(v[0]),
    );
}

#[test]
fn composed_attention_like_graph() {
    sweep(
        "attention",
        50,
        1e-4,
        |rng| {
            (
                vec![random(rng, 3, 4), random(rng, 4, 4), random(rng, 4, 4), random(rng, 4, 4)],
                [3, 4],
            )
        },
        &|t, v| {
            let q = t.matmul(v[0], v[1]).unwrap();
            let k = t.matmul(v[0], v[2]).unwrap();
            let val = t.matmul(v[0], v[3]).unwrap();
            let kt = t.transpose(k);
            let s = t.matmul(q, kt).unwrap();
            let s = t.scale(s, 0.5);
            let p = t.softmax_rows(s);
            let o = t.matmul(p, val).unwrap();
            let n = t.layernorm(o);
            t.gelu(n)
        },
    );
}
