//! Finite-difference checks for every differentiable primitive.

use ecgnat::autodiff::{concat, neighborhood_attention};
use ecgnat::gradcheck::{self, GradCheckReport};
use ecgnat::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts an arbitrary output against a fixed random tensor so every
/// output element contributes to the scalar loss.
fn project<'g>(out: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = rand_tensor(&mut rng, &out.shape());
    let w = out.graph().constant(w);
    Ok(out.mul(w)?.sum())
}

fn assert_sound(name: &str, report: GradCheckReport) {
    assert!(
        report.passed(gradcheck::REL_TOL),
        "{name}: max rel err {:.3e} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

fn run<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let report = gradcheck::check(&inputs, gradcheck::EPS, None, |g, v| project(f(g, v)?, trial)).unwrap();
        assert_sound(&format!("{name} trial {trial}"), report);
    }
}

#[test]
fn elementwise() {
    run("add", &[&[3, 4], &[3, 4]], |_, v| v[0].add(v[1]));
    run("add_broadcast", &[&[3, 4], &[4]], |_, v| v[0].add(v[1]));
    run("sub", &[&[3, 4], &[4]], |_, v| v[0].sub(v[1]));
    run("mul", &[&[2, 5], &[2, 5]], |_, v| v[0].mul(v[1]));
    run("mul_self", &[&[6]], |_, v| v[0].mul(v[0]));
    run("scale", &[&[5]], |_, v| Ok(v[0].scale(-1.7).add_scalar(0.3)));
    run("relu", &[&[4, 4]], |_, v| Ok(v[0].relu()));
    run("gelu", &[&[4, 4]], |_, v| Ok(v[0].gelu()));
    run("exp", &[&[4, 3]], |_, v| Ok(v[0].exp()));
    run("log", &[&[4, 3]], |_, v| Ok(v[0].exp().add_scalar(0.5).log()));
}

#[test]
fn matrix_and_shape_ops() {
    run("matmul", &[&[3, 4], &[4, 2]], |_, v| v[0].matmul(v[1]));
    run("bmm", &[&[2, 3, 4], &[2, 4, 5]], |_, v| v[0].bmm(v[1]));
    run("reshape", &[&[3, 4]], |_, v| v[0].reshape(&[2, 6]));
    run("transpose", &[&[3, 4]], |_, v| v[0].t());
    run("permute", &[&[2, 3, 4]], |_, v| v[0].permute(&[2, 0, 1]));
    run("concat", &[&[2, 3], &[2, 1]], |_, v| concat(&[v[0], v[1]], 1));
    run("index_select", &[&[4, 3]], |_, v| v[0].index_select(0, &[3, 0, 0, 2]));
}

#[test]
fn reductions_and_normalizations() {
    run("sum", &[&[3, 4]], |_, v| Ok(v[0].exp().sum()));
    run("mean", &[&[3, 4]], |_, v| Ok(v[0].exp().mean()));
    run("sum_axis", &[&[3, 4, 2]], |_, v| v[0].sum_axis(1));
    run("mean_axis", &[&[3, 4]], |_, v| v[0].mean_axis(1));
    run("softmax", &[&[3, 5]], |_, v| Ok(v[0].softmax()));
    run("log_softmax", &[&[3, 5]], |_, v| Ok(v[0].log_softmax()));
    run("layer_norm", &[&[4, 6], &[6], &[6]], |_, v| v[0].layer_norm(v[1], v[2], 1e-5));
    run("l2_normalize", &[&[3, 4]], |_, v| Ok(v[0].l2_normalize()));
}

#[test]
fn convolutions() {
    run("conv1d", &[&[3, 11], &[4, 3, 3], &[4]], |_, v| v[0].conv1d(v[1], Some(v[2]), 2, 1));
    run("conv1d_asym", &[&[2, 9], &[3, 2, 3]], |_, v| v[0].conv1d_asym(v[1], None, 2, 1, 0));
    run("conv_transpose1d", &[&[3, 5], &[3, 2, 3], &[2]], |_, v| {
        v[0].conv_transpose1d(v[1], Some(v[2]), 2, 0)
    });
    run("conv_transpose1d_pad", &[&[2, 6], &[2, 3, 4]], |_, v| v[0].conv_transpose1d(v[1], None, 2, 1));
}

#[test]
fn neighborhood_attention_op() {
    run("na_k3", &[&[2, 6, 2], &[2, 6, 2], &[2, 6, 2], &[2, 5]], |_, v| {
        neighborhood_attention(v[0], v[1], v[2], v[3], 3)
    });
    run("na_k5_short", &[&[1, 3, 4], &[1, 3, 4], &[1, 3, 4], &[1, 9]], |_, v| {
        neighborhood_attention(v[0], v[1], v[2], v[3], 5)
    });
}
