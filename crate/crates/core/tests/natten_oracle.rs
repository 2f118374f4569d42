//! Neighborhood attention against independent formulations.

use ecgnat::autodiff::neighborhood_attention;
use ecgnat::gradcheck;
use ecgnat::natten::{
    na_backward, na_forward, na_forward_saved, na_reference, na_reference_graph, neighbor_indices, NeighborMap,
};
use ecgnat::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

struct Case {
    q: Tensor<f64>,
    k: Tensor<f64>,
    v: Tensor<f64>,
    bias: Tensor<f64>,
    window: usize,
}

fn case(rng: &mut ChaCha8Rng, heads: usize, n: usize, d: usize, window: usize) -> Case {
    let shape = [heads, n, d];
    Case {
        q: rand_tensor(rng, &shape),
        k: rand_tensor(rng, &shape),
        v: rand_tensor(rng, &shape),
        bias: rand_tensor(rng, &[heads, 2 * window - 1]),
        window,
    }
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let heads = rng.random_range(1..=4);
    let n = rng.random_range(1..=64);
    let d = rng.random_range(1..=16);
    let window = [1, 3, 5, 7][rng.random_range(0..4)];
    case(rng, heads, n, d, window)
}

/// Softmax attention over an explicit index set, written out per query.
fn attend_over(c: &Case, keys: impl Fn(usize) -> Vec<usize>, rel_bias: impl Fn(usize, usize, usize) -> f64) -> Vec<f64> {
    let (heads, n, d) = (c.q.shape()[0], c.q.shape()[1], c.q.shape()[2]);
    let mut out = vec![0.0; heads * n * d];
    for h in 0..heads {
        for i in 0..n {
            let js = keys(i);
            let logits: Vec<f64> = js
                .iter()
                .map(|&j| {
                    let s: f64 = (0..d).map(|t| c.q.get(&[h, i, t]) * c.k.get(&[h, j, t])).sum();
                    (s + rel_bias(h, i, j)) / (d as f64).sqrt()
                })
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (&j, l) in js.iter().zip(&logits) {
                let a = (l - m).exp() / z;
                for t in 0..d {
                    out[(h * n + i) * d + t] += a * c.v.get(&[h, j, t]);
                }
            }
        }
    }
    out
}

fn table_bias(c: &Case) -> impl Fn(usize, usize, usize) -> f64 + '_ {
    move |h, i, j| c.bias.get(&[h, i + c.window - 1 - j])
}

#[test]
fn forward_matches_reference_on_200_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let c = random_case(&mut rng);
        let fast = na_forward(&c.q, &c.k, &c.v, &c.bias, c.window).unwrap();
        let slow = na_reference(&c.q, &c.k, &c.v, &c.bias, c.window).unwrap();
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    assert!(worst < 1e-12, "max abs diff {worst:e}");
}

#[test]
fn forward_matches_explicit_window_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let c = random_case(&mut rng);
        let n = c.q.shape()[1];
        let want = attend_over(&c, |i| neighbor_indices(i, c.window, n).unwrap(), table_bias(&c));
        let got = na_forward(&c.q, &c.k, &c.v, &c.bias, c.window).unwrap();
        let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "diff {diff:e}");
    }
}

#[test]
fn single_precision_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let c = random_case(&mut rng);
        let f = |t: &Tensor<f64>| t.cast::<f32>();
        let fast = na_forward(&f(&c.q), &f(&c.k), &f(&c.v), &f(&c.bias), c.window).unwrap();
        let slow = na_reference(&f(&c.q), &f(&c.k), &f(&c.v), &f(&c.bias), c.window).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-4);
    }
}

#[test]
fn unit_window_returns_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = case(&mut rng, 2, 9, 3, 1);
    let out = na_forward(&c.q, &c.k, &c.v, &c.bias, 1).unwrap();
    assert_eq!(out.data(), c.v.data());
}

#[test]
fn single_token_returns_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = case(&mut rng, 3, 1, 4, 5);
    assert_eq!(na_reference(&c.q, &c.k, &c.v, &c.bias, 5).unwrap().data(), c.v.data());
    assert_eq!(na_forward(&c.q, &c.k, &c.v, &c.bias, 5).unwrap().data(), c.v.data());
}

#[test]
fn five_wide_support_on_eight_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = case(&mut rng, 1, 8, 4, 5);
    let (_, saved) = na_forward_saved(&c.q, &c.k, &c.v, &c.bias, 5).unwrap();
    assert_eq!(saved.attn.shape(), &[1, 8, 5]);
    for row in saved.attn.data().chunks(5) {
        assert!(row.iter().all(|&a| a > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // Keys outside a query's window have no influence on its output.
    let base = na_forward(&c.q, &c.k, &c.v, &c.bias, 5).unwrap();
    let map = NeighborMap::new(5, 8).unwrap();
    for j in 0..8 {
        let mut k2 = c.k.clone();
        let mut v2 = c.v.clone();
        for t in 0..4 {
            k2.data_mut()[j * 4 + t] += 3.0;
            v2.data_mut()[j * 4 + t] -= 2.0;
        }
        let moved = na_forward(&c.q, &k2, &v2, &c.bias, 5).unwrap();
        for i in 0..8 {
            let changed = (0..4).any(|t| moved.data()[i * 4 + t] != base.data()[i * 4 + t]);
            assert_eq!(changed, map.lists[i].contains(&j), "query {i}, key {j}");
        }
    }
}

#[test]
fn wide_window_is_global_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (n, window) in [(3, 3), (4, 5), (6, 7), (2, 7)] {
        let mut c = case(&mut rng, 2, n, 3, window);
        let all = |_| (0..n).collect::<Vec<_>>();
        let with_bias = attend_over(&c, all, table_bias(&c));
        let got = na_forward(&c.q, &c.k, &c.v, &c.bias, window).unwrap();
        let diff = got.data().iter().zip(&with_bias).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
        c.bias = Tensor::zeros(c.bias.shape());
        let plain = attend_over(&c, all, |_, _, _| 0.0);
        let got = na_reference(&c.q, &c.k, &c.v, &c.bias, window).unwrap();
        let diff = got.data().iter().zip(&plain).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}

#[test]
fn backward_matches_finite_differences_small_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = case(&mut rng, 1, 6, 2, 3);
    let g_out = rand_tensor(&mut rng, &[1, 6, 2]);
    let (_, saved) = na_forward_saved(&c.q, &c.k, &c.v, &c.bias, 3).unwrap();
    let analytic = na_backward(&g_out, &saved).unwrap();
    let inputs = [c.q.clone(), c.k.clone(), c.v.clone(), c.bias.clone()];
    let loss = |vals: &[Tensor<f64>]| -> f64 {
        let out = na_forward(&vals[0], &vals[1], &vals[2], &vals[3], 3).unwrap();
        out.data().iter().zip(g_out.data()).map(|(a, b)| a * b).sum()
    };
    let grads = [&analytic.0, &analytic.1, &analytic.2, &analytic.3];
    for (ti, grad) in grads.iter().enumerate() {
        for e in 0..inputs[ti].numel() {
            let mut plus = inputs.clone();
            plus[ti].data_mut()[e] += gradcheck::EPS;
            let mut minus = inputs.clone();
            minus[ti].data_mut()[e] -= gradcheck::EPS;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * gradcheck::EPS);
            let err = gradcheck::relative_error(grad.data()[e], numeric);
            assert!(err < gradcheck::REL_TOL, "input {ti} elem {e}: {} vs {numeric}", grad.data()[e]);
        }
    }
}

#[test]
fn backward_matches_reference_autodiff() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..40 {
        let c = random_case(&mut rng);
        let g_out = rand_tensor(&mut rng, c.q.shape());
        let (_, saved) = na_forward_saved(&c.q, &c.k, &c.v, &c.bias, c.window).unwrap();
        let fast = na_backward(&g_out, &saved).unwrap();

        let graph = Graph::new();
        let vars: Vec<_> = [&c.q, &c.k, &c.v, &c.bias].iter().map(|t| graph.variable((*t).clone())).collect();
        let out = na_reference_graph(vars[0], vars[1], vars[2], vars[3], c.window).unwrap();
        let loss = out.mul(graph.constant(g_out.clone())).unwrap().sum();
        graph.backward(loss).unwrap();
        for (v, f) in vars.iter().zip([&fast.0, &fast.1, &fast.2, &fast.3]) {
            let want = v.grad().unwrap();
            assert!(f.max_abs_diff(&want) < 1e-10, "diff {:e}", f.max_abs_diff(&want));
        }
    }
}

#[test]
fn unreachable_bias_offsets_get_no_gradient() {
    // With n < k only offsets |i - j| < n occur.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = case(&mut rng, 1, 3, 2, 7);
    let (_, saved) = na_forward_saved(&c.q, &c.k, &c.v, &c.bias, 7).unwrap();
    let (_, _, _, gb) = na_backward(&rand_tensor(&mut rng, &[1, 3, 2]), &saved).unwrap();
    for (idx, &g) in gb.data().iter().enumerate() {
        let offset = idx as isize - 6;
        if offset.unsigned_abs() >= 3 {
            assert_eq!(g, 0.0, "offset {offset}");
        }
    }
}

#[test]
fn fused_op_records_the_kernel_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = case(&mut rng, 2, 10, 3, 5);
    let g_out = rand_tensor(&mut rng, c.q.shape());
    let (_, saved) = na_forward_saved(&c.q, &c.k, &c.v, &c.bias, 5).unwrap();
    let direct = na_backward(&g_out, &saved).unwrap();
    let graph = Graph::new();
    let vars: Vec<_> = [&c.q, &c.k, &c.v, &c.bias].iter().map(|t| graph.variable((*t).clone())).collect();
    let out = neighborhood_attention(vars[0], vars[1], vars[2], vars[3], 5).unwrap();
    graph.backward(out.mul(graph.constant(g_out)).unwrap().sum()).unwrap();
    assert_eq!(vars[0].grad().unwrap(), direct.0);
    assert_eq!(vars[3].grad().unwrap(), direct.3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_are_stochastic(seed in any::<u64>(), n in 1usize..40, wi in 0usize..4, heads in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = case(&mut rng, heads, n, 4, [1, 3, 5, 7][wi]);
        let (_, saved) = na_forward_saved(&c.q, &c.k, &c.v, &c.bias, c.window).unwrap();
        let span = saved.attn.shape()[2];
        prop_assert_eq!(span, c.window.min(n));
        for row in saved.attn.data().chunks(span) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn interior_is_translation_equivariant(seed in any::<u64>(), n in 12usize..40, wi in 0usize..4) {
        let window = [1, 3, 5, 7][wi];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        // Long random sequence; compare the windows [0, n) and [1, n + 1).
        let long = case(&mut rng, 1, n + 1, d, window);
        let slice = |t: &Tensor<f64>, from: usize| {
            Tensor::from_vec(&[1, n, d], t.data()[from * d..(from + n) * d].to_vec()).unwrap()
        };
        let a = na_forward(&slice(&long.q, 0), &slice(&long.k, 0), &slice(&long.v, 0), &long.bias, window).unwrap();
        let b = na_forward(&slice(&long.q, 1), &slice(&long.k, 1), &slice(&long.v, 1), &long.bias, window).unwrap();
        let h = window / 2;
        for i in (h + 1)..(n - h) {
            for t in 0..d {
                prop_assert!((a.data()[i * d + t] - b.data()[(i - 1) * d + t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn windows_are_contiguous_and_contain_the_query(n in 1usize..80, wi in 0usize..4, frac in 0.0f64..1.0) {
        let k = [1, 3, 5, 7][wi];
        let i = ((n as f64 * frac) as usize).min(n - 1);
        let w = neighbor_indices(i, k, n).unwrap();
        prop_assert_eq!(w.len(), k.min(n));
        prop_assert!(w.contains(&i));
        prop_assert!(w.windows(2).all(|p| p[1] == p[0] + 1));
        prop_assert!(*w.last().unwrap() < n);
    }
}
