use proptest::prelude::*;
use pst_autodiff::{
    grad_check, Faults, GradCheckOptions, Graph, Reduction, Result, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, v).unwrap()
}

/// Contracts `out` with fixed random weights so every output coordinate
/// influences the scalar objective.
fn contract(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = random(&mut rng, g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn check<F>(params: Vec<(String, Tensor<f64>)>, seed: u64, mut f: F) -> f64
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step: 1e-6,
        coords_per_param: 12,
        seed,
        five_point: false,
    };
    let report = grad_check(
        &params,
        |g, v| {
            let out = f(g, v)?;
            if g.value(out).numel() == 1 {
                Ok(out)
            } else {
                contract(g, out, seed)
            }
        },
        &opts,
    )
    .unwrap();
    report.max_rel_err()
}

const TOL: f64 = 1e-4;

fn named(name: &str, t: Tensor<f64>) -> (String, Tensor<f64>) {
    (name.to_string(), t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_primitive_matches_finite_differences(
        rows in 1usize..5,
        cols in 1usize..6,
        inner in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[rows, cols], -2.0, 2.0);
        let b = random(&mut rng, &[rows, cols], -2.0, 2.0);
        let bias = random(&mut rng, &[cols], -1.0, 1.0);
        let col = random(&mut rng, &[rows, 1], -1.0, 1.0);

        let mut errs: Vec<(&str, f64)> = Vec::new();

        errs.push(("add", check(vec![named("a", a.clone()), named("bias", bias.clone())], seed,
            |g, v| g.add(v[0], v[1]))));
        errs.push(("sub", check(vec![named("a", a.clone()), named("col", col.clone())], seed,
            |g, v| g.sub(v[0], v[1]))));
        errs.push(("mul", check(vec![named("a", a.clone()), named("b", b.clone())], seed,
            |g, v| g.mul(v[0], v[1]))));
        errs.push(("mul_broadcast", check(vec![named("a", a.clone()), named("col", col.clone())], seed,
            |g, v| g.mul(v[0], v[1]))));
        errs.push(("scale", check(vec![named("a", a.clone())], seed,
            |g, v| Ok(g.scale(v[0], -1.7)))));

        let m = random(&mut rng, &[cols, inner], -1.0, 1.0);
        errs.push(("matmul", check(vec![named("a", a.clone()), named("m", m)], seed,
            |g, v| g.matmul(v[0], v[1]))));
        let mt = random(&mut rng, &[inner, cols], -1.0, 1.0);
        errs.push(("matmul_nt", check(vec![named("a", a.clone()), named("mt", mt)], seed,
            |g, v| g.matmul_nt(v[0], v[1]))));

        errs.push(("softmax", check(vec![named("a", a.clone())], seed, |g, v| Ok(g.softmax(v[0])))));
        errs.push(("log_softmax", check(vec![named("a", a.clone())], seed, |g, v| Ok(g.log_softmax(v[0])))));
        let offset = cols.saturating_sub(rows);
        errs.push(("causal_mask", check(vec![named("a", a.clone())], seed, |g, v| {
            let m = g.causal_mask(v[0], offset)?;
            Ok(g.softmax(m))
        })));

        let gamma = random(&mut rng, &[cols], 0.5, 1.5);
        let beta = random(&mut rng, &[cols], -0.5, 0.5);
        // With two columns the normalised output is +-1 whatever the input.
        if cols > 2 {
            errs.push(("layer_norm", check(
                vec![named("a", a.clone()), named("gamma", gamma), named("beta", beta)], seed,
                |g, v| g.layer_norm(v[0], v[1], v[2]))));
        }

        errs.push(("gelu", check(vec![named("a", a.clone())], seed, |g, v| Ok(g.gelu(v[0])))));
        errs.push(("tanh", check(vec![named("a", a.clone())], seed, |g, v| Ok(g.tanh(v[0])))));
        errs.push(("exp", check(vec![named("a", a.clone())], seed, |g, v| Ok(g.exp(v[0])))));
        let pos = random(&mut rng, &[rows, cols], 0.5, 3.0);
        errs.push(("log", check(vec![named("pos", pos)], seed, |g, v| Ok(g.log(v[0])))));

        let ids: Vec<usize> = (0..inner + 1).map(|_| rng.gen_range(0..rows)).collect();
        errs.push(("gather", check(vec![named("a", a.clone())], seed, |g, v| g.gather(v[0], &ids))));
        errs.push(("concat_rows", check(vec![named("a", a.clone()), named("b", b.clone())], seed,
            |g, v| g.concat(&[v[0], v[1]], 0))));
        errs.push(("concat_cols", check(vec![named("a", a.clone()), named("col", col.clone())], seed,
            |g, v| g.concat(&[v[0], v[1], v[0]], 1))));
        let start = rng.gen_range(0..cols);
        errs.push(("slice", check(vec![named("a", a.clone())], seed,
            |g, v| g.slice(v[0], 1, start, cols - start))));
        errs.push(("reshape", check(vec![named("a", a.clone())], seed,
            |g, v| g.reshape(v[0], &[cols, rows]))));
        errs.push(("broadcast_to", check(vec![named("bias", bias.clone())], seed,
            |g, v| g.broadcast_to(v[0], &[rows, cols]))));
        errs.push(("sum", check(vec![named("a", a.clone())], seed, |g, v| Ok(g.sum(v[0])))));
        errs.push(("mean", check(vec![named("a", a.clone())], seed, |g, v| Ok(g.mean(v[0])))));
        errs.push(("mean_axis", check(vec![named("a", a.clone())], seed, |g, v| g.mean_axis(v[0], 0))));
        let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
        errs.push(("cross_entropy", check(vec![named("a", a.clone())], seed,
            |g, v| g.cross_entropy(v[0], &targets, Reduction::Mean))));

        for (op, err) in errs {
            prop_assert!(err < TOL, "{op}: max rel err {err:e}");
        }
    }

    #[test]
    fn backward_leaves_forward_values_and_constants_untouched(
        rows in 1usize..4,
        cols in 2usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f32>::new();
        let frozen = random(&mut rng, &[cols, cols], -1.0, 1.0).cast::<f32>();
        let x = g.param(random(&mut rng, &[rows, cols], -1.0, 1.0).cast());
        let w = g.constant(frozen.clone());
        let h = g.matmul(x, w).unwrap();
        let t = g.tanh(h);
        let s = g.softmax(t);
        let loss = g.cross_entropy(s, &vec![0; rows], Reduction::Sum).unwrap();
        let vars = [x, w, h, t, s, loss];
        let before: Vec<Tensor<f32>> = vars.iter().map(|&v| g.value(v).clone()).collect();
        let _ = g.backward(loss).unwrap();
        for (v, t) in vars.iter().zip(&before) {
            prop_assert!(t.bit_eq(g.value(*v)));
        }
        prop_assert!(g.value(w).bit_eq(&frozen));
    }
}

#[test]
fn corrupted_backward_rule_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let opts = GradCheckOptions::default();
    let run = |faulty: bool| {
        grad_check(
            &[("a".to_string(), a.clone())],
            |g, v| {
                if faulty {
                    g.inject_faults(Faults {
                        tanh_backward_sign: true,
                    });
                }
                let t = g.tanh(v[0]);
                contract(g, t, 3)
            },
            &opts,
        )
        .unwrap()
        .max_rel_err()
    };
    assert!(run(false) < 1e-8);
    assert!(run(true) > 1e-1);
}
