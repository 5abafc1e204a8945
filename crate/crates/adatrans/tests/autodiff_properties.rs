//! Finite-difference validation of the reverse-mode engine on composed
//! networks, and bit-level determinism of forward evaluation.

use adatrans::graph::{grad_check, grad_check_sampled};
use adatrans::nn::{bind, Activation, Mlp2, ParamSet};
use adatrans::rng::Rng;
use adatrans::{Array, BoundParams, Graph};
use proptest::prelude::*;

/// Random two-layer MLP with a scalar readout: analytic gradients against
/// central differences (h = 1e-5) at 20 random coordinates.
#[test]
fn random_mlp_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = Rng::new(seed, 0);
        let mut ps = ParamSet::new();
        let mlp = Mlp2::init(&mut ps, "mlp", 6, 12, 1, Activation::Tanh, &mut rng);
        let x = Array::vector(rng.normal_vec(6));
        let mut inputs = vec![x];
        inputs.extend(ps.iter().map(|(_, a)| a.clone()));

        let mut coord_rng = Rng::new(seed, 1);
        let err = grad_check_sampled(&inputs, 1e-5, 4, &mut coord_rng, |g, ids| {
            let bound = BoundParams::from_ids(ids[1..].to_vec(), true);
            let out = mlp.apply(g, &bound, ids[0])?;
            g.sum(out)
        })
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: err {err}");
    }
}

#[test]
fn deep_composition_still_checks_out() {
    // exp, log, logsumexp, normalization, slicing and concatenation chained
    // together; the kind of graph the losses build.
    let x = Array::vector(vec![0.4, -0.7, 1.2, 0.9, -0.2, 0.5]);
    let err = grad_check(&[x], 1e-5, |g, ids| {
        let a = g.slice(ids[0], 0, 3)?;
        let b = g.slice(ids[0], 3, 6)?;
        let na = g.unit_normalize(a)?;
        let eb = g.exp(b)?;
        let lb = g.log(eb)?;
        let joined = g.concat(na, lb)?;
        let smooth = g.tanh(joined)?;
        let lse = g.log_sum_exp(smooth)?;
        let d = g.squared_l2_distance(na, lb)?;
        let total = g.add(lse, d)?;
        g.sum(total)
    })
    .unwrap();
    assert!(err < 1e-4, "err {err}");
}

#[test]
fn forward_is_bit_deterministic_across_graphs() {
    let mut rng = Rng::new(3, 0);
    let mut ps = ParamSet::new();
    let mlp = Mlp2::init(&mut ps, "m", 8, 16, 4, Activation::Relu, &mut rng);
    let x = rng.normal_vec(8);
    let run = || {
        let mut g = Graph::new();
        let bound = bind(&mut g, &ps, false);
        let xid = g.vector_const(x.clone()).unwrap();
        let y = mlp.apply(&mut g, &bound, xid).unwrap();
        let lse = g.log_sum_exp(y).unwrap();
        g.scalar_value(lse).to_bits()
    };
    let first = run();
    for _ in 0..5 {
        assert_eq!(run(), first);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradcheck_passes_on_random_points(values in prop::collection::vec(-1.5f64..1.5, 4)) {
        // Keep away from the relu kink at the probe weights.
        let shifted: Vec<f64> = values.iter().map(|v| v + 2.0).collect();
        let x = Array::vector(shifted);
        let err = grad_check(&[x], 1e-5, |g, ids| {
            let w = g.leaf(
                alloc_matrix(),
                vec![0.3, -0.5, 0.8, 0.1, -0.2, 0.6, -0.9, 0.4],
                false,
            )?;
            let y = g.matmul(w, ids[0])?;
            let r = g.relu(y)?;
            let s = g.sigmoid(r)?;
            g.mean(s)
        }).unwrap();
        prop_assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn backward_twice_always_doubles(values in prop::collection::vec(-2.0f64..2.0, 3)) {
        let mut g = Graph::new();
        let x = g.param(vec![3], values).unwrap();
        let t = g.tanh(x).unwrap();
        let e = g.exp(t).unwrap();
        let out = g.sum(e).unwrap();
        g.backward(out).unwrap();
        let once = g.grad(x).to_vec();
        g.backward(out).unwrap();
        for (a, b) in once.iter().zip(g.grad(x)) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }
}

fn alloc_matrix() -> Vec<usize> {
    vec![2, 4]
}
