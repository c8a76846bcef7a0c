//! Analytic gradients against central finite differences.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zeronorm_tensor::{AttentionSpec, Graph, Result, Tensor, Var, LAYER_NORM_EPS};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

/// Relative error with a floor on the denominator so that gradients that are
/// zero up to round-off do not blow up the ratio.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Returns the worst relative error over every scalar of every parameter.
fn check(params: &[Tensor], seed: u64, build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let run = |ps: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::training(seed);
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &vars).unwrap();
        let value = g.value(loss).item();
        let grads = g.backward(loss).unwrap();
        let gs = vars
            .iter()
            .zip(ps)
            .map(|(&v, p)| grads.get_or_zeros(v, p.len()))
            .collect();
        (value, gs)
    };
    let (_, analytic) = run(params);
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[j] += H;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[j] -= H;
            let numeric = (run(&plus).0 - run(&minus).0) / (2.0 * H);
            worst = worst.max(rel_err(analytic[pi][j], numeric));
        }
    }
    worst
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand_t(g.shape(x), seed));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_add_row_relu_cross_entropy() {
    let params = [rand_t(&[4, 3], 1), rand_t(&[3, 5], 2), rand_t(&[5], 3)];
    let err = check(&params, 0, &|g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_row(h, v[2])?;
        let h = g.scale(h, 0.7);
        let h = g.relu(h);
        g.cross_entropy(h, &[Some(0), None, Some(4), Some(2)])
    });
    assert!(err < REL_TOL, "{err}");
}

#[test]
fn layer_norm_all_inputs() {
    let params = [rand_t(&[3, 6], 4), rand_t(&[6], 5), rand_t(&[6], 6)];
    let err = check(&params, 0, &|g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
        weighted_sum(g, y, 7)
    });
    assert!(err < REL_TOL, "{err}");
}

#[test]
fn layer_norm_simple_input() {
    let params = [rand_t(&[2, 5], 8)];
    let err = check(&params, 0, &|g, v| {
        let y = g.layer_norm_simple(v[0], LAYER_NORM_EPS)?;
        weighted_sum(g, y, 9)
    });
    assert!(err < REL_TOL, "{err}");
}

#[test]
fn softmax_embedding_concat_dropout() {
    let params = [rand_t(&[6, 3], 10), rand_t(&[4, 2], 11)];
    let err = check(&params, 42, &|g, v| {
        let e = g.embedding(v[0], &[1, 5, 1, 0])?;
        let c = g.concat(&[e, v[1]])?;
        let d = g.dropout(c, 0.3)?;
        let s = g.softmax(d);
        weighted_sum(g, s, 12)
    });
    assert!(err < REL_TOL, "{err}");
}

#[test]
fn masked_and_causal_attention() {
    for causal in [false, true] {
        let spec = AttentionSpec {
            batch: 2,
            query_len: 3,
            key_len: 3,
            heads: 2,
            key_lens: vec![3, 2],
            causal,
        };
        let params = [
            rand_t(&[6, 4], 13),
            rand_t(&[6, 4], 14),
            rand_t(&[6, 4], 15),
        ];
        let err = check(&params, 0, &|g, v| {
            let y = g.attention(v[0], v[1], v[2], spec.clone())?;
            weighted_sum(g, y, 16)
        });
        assert!(err < REL_TOL, "causal={causal}: {err}");
    }
}

#[test]
fn cross_attention_with_different_lengths() {
    let spec = AttentionSpec {
        batch: 2,
        query_len: 2,
        key_len: 4,
        heads: 1,
        key_lens: vec![4, 1],
        causal: false,
    };
    let params = [
        rand_t(&[4, 3], 17),
        rand_t(&[8, 3], 18),
        rand_t(&[8, 3], 19),
    ];
    let err = check(&params, 0, &|g, v| {
        let y = g.attention(v[0], v[1], v[2], spec.clone())?;
        weighted_sum(g, y, 20)
    });
    assert!(err < REL_TOL, "{err}");
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Linear,
    LayerNorm,
    LayerNormSimple,
    Softmax,
    Relu,
    SelfAttention,
    Residual,
    Square,
}

fn step_strategy() -> impl Strategy<Value = Step> {
    prop_oneof![
        Just(Step::Linear),
        Just(Step::LayerNorm),
        Just(Step::LayerNormSimple),
        Just(Step::Softmax),
        Just(Step::Relu),
        Just(Step::SelfAttention),
        Just(Step::Residual),
        Just(Step::Square),
    ]
}

/// Applies `steps` to `v[0]`; `near_kink` is set when a ReLU input lies within
/// 1e-3 of zero, where finite differences are meaningless.
fn apply_steps(g: &mut Graph, v: &[Var], steps: &[Step], near_kink: &mut bool) -> Result<Var> {
    let mut x = v[0];
    for s in steps {
        x = match s {
            Step::Linear => {
                let h = g.matmul(x, v[1])?;
                g.add_row(h, v[2])?
            }
            Step::LayerNorm => g.layer_norm(x, v[3], v[2], LAYER_NORM_EPS)?,
            Step::LayerNormSimple => g.layer_norm_simple(x, LAYER_NORM_EPS)?,
            Step::Softmax => g.softmax(x),
            Step::Relu => {
                *near_kink |= g.value(x).data().iter().any(|v| v.abs() < 1e-3);
                g.relu(x)
            }
            Step::SelfAttention => g.attention(
                x,
                x,
                x,
                AttentionSpec {
                    batch: 1,
                    query_len: 3,
                    key_len: 3,
                    heads: 2,
                    key_lens: vec![3],
                    causal: true,
                },
            )?,
            Step::Residual => g.add(x, v[0])?,
            Step::Square => g.mul(x, x)?,
        };
    }
    let w = g.constant(rand_t(g.shape(x), 999));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Random chains over a `[3, 4]` activation (36 parameter scalars).
    #[test]
    fn random_chains_match_finite_differences(
        steps in prop::collection::vec(step_strategy(), 1..6),
        seed in 0u64..1000,
    ) {
        const D: usize = 4;
        let params = vec![
            rand_t(&[3, D], seed),
            rand_t(&[D, D], seed + 1),
            rand_t(&[D], seed + 2),
            rand_t(&[D], seed + 3),
        ];
        let mut near_kink = false;
        {
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            apply_steps(&mut g, &vars, &steps, &mut near_kink).unwrap();
        }
        prop_assume!(!near_kink);
        let err = check(&params, 0, &|g, v| apply_steps(g, v, &steps, &mut false));
        prop_assert!(err < REL_TOL, "steps {:?}: {}", steps, err);
    }

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![3, 4], data).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardises(data in prop::collection::vec(-50.0f64..50.0, 16)) {
        let var = {
            let m = data.iter().sum::<f64>() / 16.0;
            data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 16.0
        };
        // eps shifts the output variance by eps / (var + eps).
        prop_assume!(var > 10.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![16], data).unwrap());
        let gain = g.constant(Tensor::ones(&[16]));
        let bias = g.constant(Tensor::zeros(&[16]));
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        let out = g.value(y).data();
        let mean = out.iter().sum::<f64>() / 16.0;
        let v = out.iter().map(|o| (o - mean) * (o - mean)).sum::<f64>() / 16.0;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((v - 1.0).abs() < 1e-6);
    }
}

#[test]
fn identical_seed_gives_bitwise_identical_outputs() {
    let run = || {
        let mut g = Graph::training(7);
        let x = g.param(rand_t(&[5, 4], 3));
        let y = g.dropout(x, 0.4).unwrap();
        let z = g.softmax(y);
        g.value(z).clone()
    };
    assert_eq!(run().data(), run().data());
}
