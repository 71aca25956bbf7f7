//! Every tape primitive against central finite differences on 100 seeded
//! N(0, 1) inputs, away from kinks.

use rand::Rng;
use rand_distr::StandardNormal;

use lasr::diffkit::{
    evaluate, evaluate_with_gradients, finite_difference_gradient, relative_error, Bindings, DiffError, Inputs, Tape,
    Tensor, Var,
};
use lasr::rng::{self, Stream};

type Graph = Box<dyn Fn(&mut Tape, &Bindings) -> Result<Var, DiffError>>;

const CASES: u64 = 100;

fn normal(rng: &mut Stream, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// `sum(y ⊙ W)` for a fixed random `W`, so every output element matters.
fn readout(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, DiffError> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.leaf(normal(&mut rng::stream(seed, "readout", 0), &shape));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Runs `CASES` accepted cases of `make` and returns the worst relative error.
fn worst_error(name: &str, make: impl Fn(u64, &mut Stream) -> Option<(Inputs, Graph)>) -> f64 {
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut attempt = 0;
    while accepted < CASES {
        attempt += 1;
        assert!(attempt < 50 * CASES, "{name}: too many rejected draws");
        let mut rng = rng::stream(attempt, name, 0);
        let Some((inputs, graph)) = make(attempt, &mut rng) else { continue };
        let wrt: Vec<&str> = inputs.keys().map(String::as_str).collect();
        let (value, grads) = evaluate_with_gradients(&graph, &inputs, &wrt).unwrap();
        let again = evaluate(&graph, &inputs).unwrap();
        assert!(value.bit_eq(&again), "{name}: forward evaluation is not deterministic");
        let fd = finite_difference_gradient(&graph, &inputs, &wrt, 1e-5).unwrap();
        for k in &wrt {
            worst = worst.max(relative_error(&grads[*k], &fd[*k]));
        }
        accepted += 1;
    }
    worst
}

fn inputs(items: Vec<(&str, Tensor)>) -> Inputs {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn unary(name: &'static str, op: fn(&mut Tape, Var) -> Result<Var, DiffError>, ok: fn(f64) -> bool) -> f64 {
    worst_error(name, move |seed, rng| {
        let x = normal(rng, &[3, 4]);
        if !x.data().iter().all(|&v| ok(v)) {
            return None;
        }
        let g: Graph = Box::new(move |t, b| {
            let y = op(t, b.get("x")?)?;
            readout(t, y, seed)
        });
        Some((inputs(vec![("x", x)]), g))
    })
}

#[test]
fn elementwise_primitives() {
    let away_from_zero = |v: f64| v.abs() > 1e-3;
    let inside_arccos = |v: f64| v.abs() < 1.0 - 1e-3 || v.abs() > 1.0 + 1e-3;
    let any = |_: f64| true;
    let cases: [(&str, fn(&mut Tape, Var) -> Result<Var, DiffError>, fn(f64) -> bool); 9] = [
        ("relu", |t, x| t.relu(x), away_from_zero),
        ("hinge", |t, x| t.hinge(x), away_from_zero),
        ("tanh", |t, x| t.tanh(x), any),
        ("sigmoid", |t, x| t.sigmoid(x), any),
        ("arccos", |t, x| t.arccos(x), inside_arccos),
        ("scale", |t, x| t.scale(x, -2.5), any),
        ("shift", |t, x| t.shift(x, 0.7), any),
        ("normalize_rows", |t, x| t.normalize_rows(x), any),
        ("reshape", |t, x| t.reshape(x, vec![2, 6]), any),
    ];
    for (name, op, ok) in cases {
        let e = unary(name, op, ok);
        assert!(e < 1e-4, "{name}: relative error {e:.2e}");
    }
}

#[test]
fn binary_primitives() {
    let cases: [(&str, fn(&mut Tape, Var, Var) -> Result<Var, DiffError>, [usize; 2], [usize; 2]); 6] = [
        ("add", |t, a, b| t.add(a, b), [3, 4], [3, 4]),
        ("sub", |t, a, b| t.sub(a, b), [3, 4], [3, 4]),
        ("mul", |t, a, b| t.mul(a, b), [3, 4], [3, 4]),
        ("matmul", |t, a, b| t.matmul(a, b), [3, 4], [4, 2]),
        ("matmul_t", |t, a, b| t.matmul_t(a, true, b, true), [4, 3], [2, 4]),
        ("concat_rows", |t, a, b| t.concat_rows(a, b), [3, 4], [2, 4]),
    ];
    for (name, op, sa, sb) in cases {
        let e = worst_error(name, move |seed, rng| {
            let a = normal(rng, &sa);
            let b = normal(rng, &sb);
            let g: Graph = Box::new(move |t, bind| {
                let y = op(t, bind.get("a")?, bind.get("b")?)?;
                readout(t, y, seed)
            });
            Some((inputs(vec![("a", a), ("b", b)]), g))
        });
        assert!(e < 1e-4, "{name}: relative error {e:.2e}");
    }
}

#[test]
fn broadcast_bias_add() {
    let e = worst_error("bias_add", |seed, rng| {
        let a = normal(rng, &[5, 3]);
        let b = normal(rng, &[3]);
        let g: Graph = Box::new(move |t, bind| {
            let y = t.add(bind.get("a")?, bind.get("b")?)?;
            readout(t, y, seed)
        });
        Some((inputs(vec![("a", a), ("b", b)]), g))
    });
    assert!(e < 1e-4, "bias add: relative error {e:.2e}");
}

#[test]
fn reductions_and_indexing() {
    let e = worst_error("mean_axis", |seed, rng| {
        let x = normal(rng, &[4, 3]);
        let axis = (seed % 2) as usize;
        let g: Graph = Box::new(move |t, b| {
            let y = t.mean_axis(b.get("x")?, axis)?;
            readout(t, y, seed)
        });
        Some((inputs(vec![("x", x)]), g))
    });
    assert!(e < 1e-4, "mean_axis: {e:.2e}");

    let e = worst_error("segment_mean", |seed, rng| {
        let x = normal(rng, &[7, 2]);
        let g: Graph = Box::new(move |t, b| {
            let y = t.segment_mean(b.get("x")?, vec![(0, 3), (3, 1), (4, 3)])?;
            readout(t, y, seed)
        });
        Some((inputs(vec![("x", x)]), g))
    });
    assert!(e < 1e-4, "segment_mean: {e:.2e}");

    let e = worst_error("sum_and_mean", |_, rng| {
        let x = normal(rng, &[3, 3]);
        let g: Graph = Box::new(|t, b| {
            let x = b.get("x")?;
            let sq = t.mul(x, x)?;
            let s = t.sum(sq)?;
            let m = t.mean_all(x)?;
            t.add(s, m)
        });
        Some((inputs(vec![("x", x)]), g))
    });
    assert!(e < 1e-4, "sum/mean_all: {e:.2e}");

    let e = worst_error("gather", |seed, rng| {
        let x = normal(rng, &[4, 3]);
        // Repeated indices accumulate gradient.
        let idx: Vec<u32> = (0..10).map(|_| rng.gen_range(0..12)).collect();
        let rows: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
        let g: Graph = Box::new(move |t, b| {
            let x = b.get("x")?;
            let y = t.gather(x, idx.clone(), vec![2, 5])?;
            let r = t.gather_rows(x, &rows)?;
            let a = readout(t, y, seed)?;
            let c = readout(t, r, seed + 1)?;
            t.add(a, c)
        });
        Some((inputs(vec![("x", x)]), g))
    });
    assert!(e < 1e-4, "gather: {e:.2e}");
}

#[test]
fn selection_primitives() {
    for max in [true, false] {
        let name = if max { "select_max" } else { "select_min" };
        let e = worst_error(name, move |seed, rng| {
            let x = normal(rng, &[12]);
            let groups = vec![vec![0, 3, 5, 7], vec![1, 2], vec![4, 6, 8, 9, 10, 11]];
            for g in &groups {
                let mut v: Vec<f64> = g.iter().map(|&i| x.data()[i]).collect();
                v.sort_by(f64::total_cmp);
                if v.windows(2).any(|w| w[1] - w[0] < 1e-3) {
                    return None;
                }
            }
            let g: Graph = Box::new(move |t, b| {
                let x = b.get("x")?;
                let y = if max {
                    t.select_max(x, groups.clone())?
                } else {
                    t.select_min(x, groups.clone())?
                };
                readout(t, y, seed)
            });
            Some((inputs(vec![("x", x)]), g))
        });
        assert!(e < 1e-4, "{name}: {e:.2e}");
    }
}

#[test]
fn softmax_cross_entropy_primitive() {
    let e = worst_error("softmax_cross_entropy", |seed, rng| {
        let x = normal(rng, &[5, 6]);
        let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..6)).collect();
        let g: Graph = Box::new(move |t, b| {
            let y = t.softmax_cross_entropy(b.get("x")?, targets.clone())?;
            readout(t, y, seed)
        });
        Some((inputs(vec![("x", x)]), g))
    });
    assert!(e < 1e-4, "softmax_cross_entropy: {e:.2e}");
}

#[test]
fn selection_gradient_routes_to_the_selected_element() {
    let inputs = inputs(vec![("x", Tensor::vector(vec![0.3, 2.0, -1.0, 2.0]))]);
    let graph = |t: &mut Tape, b: &Bindings| {
        let x = b.get("x")?;
        let m = t.select_max(x, vec![vec![0, 1, 2, 3]])?;
        t.sum(m)
    };
    let (_, g) = evaluate_with_gradients(graph, &inputs, &["x"]).unwrap();
    assert_eq!(g["x"].data(), &[0.0, 1.0, 0.0, 0.0]);
}
