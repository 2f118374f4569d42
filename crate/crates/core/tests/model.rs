//! Architecture shapes, structural identities and end-to-end gradients.

use ecgnat::finetune::{ce_loss, supcon_loss, total_loss};
use ecgnat::gradcheck;
use ecgnat::model::{count_params, EcgNat, ModelConfig};
use ecgnat::pretrain::{recon_loss, MaskPlan};
use ecgnat::{Binder, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mini() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        stage_heads: vec![1, 2, 4, 8],
        input_len: 64,
        blocks_per_stage: 1,
        n_classes: 3,
        ..ModelConfig::default()
    }
}

fn rand_tensor<T: ecgnat::Real>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f(rng.random_range(-scale..scale))).collect()).unwrap()
}

fn model<T: ecgnat::Real>(cfg: ModelConfig, seed: u64) -> EcgNat<T> {
    EcgNat::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn zero_params<T: ecgnat::Real>(m: &mut EcgNat<T>, suffixes: &[&str]) {
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        if suffixes.iter().any(|s| m.params.name(id).ends_with(s)) {
            m.params.get_mut(id).data_mut().fill(T::zero());
        }
    }
}

#[test]
fn default_config_shape_ladder() {
    let m = model::<f32>(ModelConfig::default(), 0);
    let g = Graph::new();
    let p = Binder::new(&g, &m.params, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = g.constant(rand_tensor(&mut rng, &[12, 2500], 1.0));
    let tokens = m.tokenize(&p, x).unwrap();
    assert_eq!(tokens.shape(), vec![96, 625]);
    let stages = m.encode_stages(&p, tokens).unwrap();
    let shapes: Vec<_> = stages.iter().map(|s| s.shape()).collect();
    assert_eq!(shapes, vec![vec![96, 625], vec![192, 312], vec![384, 156], vec![768, 78]]);
    let z = *stages.last().unwrap();
    let first = m.arch.decoder[0].forward(&p, z).unwrap();
    assert_eq!(first.shape(), vec![384, 156]);
    assert_eq!(m.decode(&p, z).unwrap().shape(), vec![12, 2500]);
    assert_eq!(m.classify(&p, z).unwrap().shape(), vec![5]);
    assert_eq!(m.embed(z).unwrap().shape(), vec![768]);
}

#[test]
fn default_parameter_count_is_near_thirty_million() {
    let c = count_params(&ModelConfig::default());
    assert!((25_000_000..=35_000_000).contains(&c.total()), "{c:?}");
    assert!((25_000_000..=35_000_000).contains(&c.finetune()), "{c:?}");
}

#[test]
fn mini_count_by_hand() {
    // Tokenizer: 12→4 and 4→8, kernel 3.
    let tokenizer = (12 * 4 * 3 + 4) + (4 * 8 * 3 + 8);
    // Block of width c with h heads: two norms, q/k/v/proj, bias table (13 per head), MLP 4c.
    let block = |c: usize, h: usize| 2 * 2 * c + 4 * (c * c + c) + 13 * h + (c * 4 * c + 4 * c) + (4 * c * c + c);
    let blocks = block(8, 1) + block(16, 2) + block(32, 4) + block(64, 8);
    let downs = (8 * 16 * 3 + 16) + (16 * 32 * 3 + 32) + (32 * 64 * 3 + 64);
    // Lengths 64 → 32 → 16 tokens → 8 → 4 → 2; decoder kernels 2,2,2,2,2.
    let decoder = (64 * 32 * 2 + 32) + (32 * 16 * 2 + 16) + (16 * 8 * 2 + 8) + (8 * 4 * 2 + 4) + (4 * 12 * 2 + 12);
    let classifier = 64 * 2 * 3 + 3;
    let c = count_params(&mini());
    assert_eq!(c.tokenizer, tokenizer);
    assert_eq!(c.blocks, blocks);
    assert_eq!(c.downsamplers, downs);
    assert_eq!(c.decoder, decoder);
    assert_eq!(c.classifier, classifier);
    assert_eq!(model::<f64>(mini(), 0).params.numel(), c.total());
}

#[test]
fn doubling_width_roughly_quadruples_attention_weights() {
    let attn = |cfg: &ModelConfig| {
        let m = model::<f32>(cfg.clone(), 0);
        m.params
            .iter()
            .filter(|(n, _)| [".q.w", ".k.w", ".v.w", ".proj.w"].iter().any(|s| n.ends_with(s)))
            .map(|(_, t)| t.numel())
            .sum::<usize>()
    };
    let narrow = mini();
    let wide = ModelConfig { embed_dim: 16, ..mini() };
    assert_eq!(attn(&wide), 4 * attn(&narrow));
}

#[test]
fn tokenizer_edge_cases() {
    let cfg = ModelConfig { input_len: 4, stage_heads: vec![1], ..mini() };
    let mut m = model::<f64>(cfg, 0);
    let g = Graph::new();
    let p = Binder::new(&g, &m.params, false);
    let x = g.constant(Tensor::zeros(&[12, 4]));
    assert_eq!(m.tokenize(&p, x).unwrap().shape(), vec![8, 1]);
    drop(p);

    // Zero input: only the biases reach the tokens.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for name in ["tok.0.b", "tok.1.b"] {
        let id = m.params.find(name).unwrap();
        let shape = m.params.get(id).shape().to_vec();
        *m.params.get_mut(id) = rand_tensor(&mut rng, &shape, 1.0);
    }
    let g = Graph::new();
    let p = Binder::new(&g, &m.params, false);
    let out = m.tokenize(&p, g.constant(Tensor::zeros(&[12, 4]))).unwrap().value();
    let b0 = m.params.get(m.params.find("tok.0.b").unwrap()).data().to_vec();
    let w1 = m.params.get(m.params.find("tok.1.w").unwrap());
    let b1 = m.params.get(m.params.find("tok.1.b").unwrap()).data();
    // The single output token sees positions -1, 0, 1 of a length-2 bias-only map.
    for co in 0..8 {
        let mut want = b1[co];
        for ci in 0..4 {
            want += (w1.get(&[co, ci, 1]) + w1.get(&[co, ci, 2])) * b0[ci];
        }
        assert!((out.data()[co] - want).abs() < 1e-12);
    }
}

#[test]
fn zeroed_output_projections_make_blocks_identities() {
    let mut m = model::<f64>(mini(), 4);
    zero_params(&mut m, &[".proj.w", ".proj.b", ".fc2.w", ".fc2.b"]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Graph::new();
    let p = Binder::new(&g, &m.params, false);
    let u = g.constant(rand_tensor(&mut rng, &[16, 9], 1.0));
    let block = &m.arch.stages[1][0];
    assert_eq!(block.forward(&p, u).unwrap().value(), u.value());

    // The encoder then reduces to tokenizer plus downsamplers.
    let x = g.constant(rand_tensor(&mut rng, &[12, 64], 1.0));
    let z = m.encode(&p, x).unwrap().value();
    let mut h = m.tokenize(&p, x).unwrap();
    for s in 0..3 {
        h = m.downsample(&p, s, h).unwrap();
    }
    assert_eq!(z, h.value());
}

#[test]
fn block_preserves_shape_and_rejects_bad_widths() {
    let m = model::<f32>(mini(), 0);
    let g = Graph::new();
    let p = Binder::new(&g, &m.params, false);
    for n in [1, 2, 5, 7, 33] {
        let u = g.constant(Tensor::zeros(&[32, n]));
        assert_eq!(m.arch.stages[2][0].forward(&p, u).unwrap().shape(), vec![32, n]);
    }
    let bad = g.constant(Tensor::zeros(&[31, 5]));
    assert!(m.arch.stages[2][0].forward(&p, bad).is_err());
}

#[test]
fn downsampler_halves_by_floor_and_rectifies() {
    let cfg = ModelConfig { input_len: 2500, ..mini() };
    let m = model::<f32>(cfg, 0);
    let g = Graph::new();
    let p = Binder::new(&g, &m.params, false);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let u = g.constant(rand_tensor(&mut rng, &[8, 625], 1.0));
    let d = m.downsample(&p, 0, u).unwrap();
    assert_eq!(d.shape(), vec![16, 312]);
    assert!(d.value().data().iter().all(|&v| v >= 0.0));
    assert!(d.value().data().iter().any(|&v| v > 0.0));
    let u = g.constant(rand_tensor(&mut rng, &[32, 156], 1.0));
    assert_eq!(m.downsample(&p, 2, u).unwrap().shape(), vec![64, 78]);
    let short = g.constant(Tensor::zeros(&[8, 1]));
    assert!(m.downsample(&p, 0, short).is_err());
}

#[test]
fn default_width_downsamplers() {
    let m = model::<f32>(ModelConfig::default(), 0);
    let g = Graph::new();
    let p = Binder::new(&g, &m.params, false);
    let u = g.constant(Tensor::zeros(&[96, 625]));
    assert_eq!(m.downsample(&p, 0, u).unwrap().shape(), vec![192, 312]);
    let u = g.constant(Tensor::zeros(&[384, 156]));
    assert_eq!(m.downsample(&p, 2, u).unwrap().shape(), vec![768, 78]);
}

#[test]
fn encoding_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Tensor<f32> = rand_tensor(&mut rng, &[12, 64], 1.0);
    let run = || {
        let m = model::<f32>(mini(), 11);
        let g = Graph::new();
        let p = Binder::new(&g, &m.params, false);
        m.encode(&p, g.constant(x.clone())).unwrap().value()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn classifier_with_zero_weights_returns_bias() {
    for n_classes in [5, 9] {
        let mut m = model::<f64>(ModelConfig { n_classes, ..mini() }, 0);
        zero_params(&mut m, &["head.w"]);
        let id = m.params.find("head.b").unwrap();
        let bias: Vec<f64> = (0..n_classes).map(|i| i as f64 - 2.0).collect();
        m.params.get_mut(id).data_mut().copy_from_slice(&bias);
        let g = Graph::new();
        let p = Binder::new(&g, &m.params, false);
        let z = g.constant(Tensor::full(&[64, 2], 3.0));
        assert_eq!(m.classify(&p, z).unwrap().value().data(), &bias[..]);
    }
}

/// Number of token columns whose gradient is nonzero when backpropagating
/// from one channel of the middle output position of `stage`.
fn receptive_field(m: &EcgNat<f64>, tokens: &Tensor<f64>, stage: usize) -> usize {
    let g = Graph::new();
    let p = Binder::new(&g, &m.params, false);
    let t = g.variable(tokens.clone());
    let out = m.encode_stages(&p, t).unwrap()[stage];
    let (c, n) = (out.shape()[0], out.shape()[1]);
    let mut pick = vec![0.0; c * n];
    pick[n / 2] = 1.0;
    let loss = out.mul(g.constant(Tensor::from_vec(&[c, n], pick).unwrap())).unwrap().sum();
    g.backward(loss).unwrap();
    let grad = t.grad().unwrap();
    let len = tokens.shape()[1];
    (0..len)
        .filter(|&j| (0..tokens.shape()[0]).any(|ch| grad.get(&[ch, j]) != 0.0))
        .count()
}

#[test]
fn receptive_field_grows_per_stage_and_stays_local() {
    let cfg = ModelConfig { input_len: 1024, ..mini() };
    let m = model::<f64>(cfg.clone(), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n_tokens = cfg.token_lens()[1];
    let tokens = rand_tensor(&mut rng, &[8, n_tokens], 1.0);
    let k = cfg.window_k;
    let mut prev = 0;
    for s in 0..4 {
        let rf = receptive_field(&m, &tokens, s);
        assert!(rf >= (k - 1) << s, "stage {s}: {rf}");
        assert!(rf > prev, "stage {s}: {rf} after {prev}");
        prev = rf;
        if s == 0 {
            assert_eq!(rf, k);
        }
    }
    assert!(prev < n_tokens);
}

/// Denominator floor for deep composites. With the default tolerance this
/// allows an absolute error of 1e-8 on gradients that are zero in theory,
/// such as the key bias (softmax is shift invariant per row).
const COMPOSITE_FLOOR: f64 = 1e-3;

fn perturbed_mini(seed: u64) -> (EcgNat<f64>, Vec<Tensor<f64>>) {
    let m = model::<f64>(mini(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    // Larger weights than the initializer keep every gradient well above
    // the finite-difference noise floor.
    let inputs = m
        .params
        .iter()
        .map(|(name, t)| {
            let mut r = rand_tensor::<f64>(&mut rng, t.shape(), 0.5);
            if name.ends_with(".g") {
                r.data_mut().iter_mut().for_each(|v| *v += 1.0);
            }
            r
        })
        .collect();
    (m, inputs)
}

#[test]
fn nat_block_gradcheck() {
    let (m, params) = perturbed_mini(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u: Tensor<f64> = rand_tensor(&mut rng, &[16, 9], 1.0);
    let w: Tensor<f64> = rand_tensor(&mut rng, &[16, 9], 1.0);
    let mut inputs = params;
    inputs.push(u);
    let report = gradcheck::check_floored(&inputs, gradcheck::EPS, None, COMPOSITE_FLOOR, |g, v| {
        let (params, u) = v.split_at(v.len() - 1);
        let p = Binder::from_vars(g, &m.params, params)?;
        let out = m.arch.stages[1][0].forward(&p, u[0])?;
        Ok(out.mul(g.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert!(report.passed(gradcheck::REL_TOL), "{report:?}");
}

#[test]
fn reconstruction_path_gradcheck() {
    let (m, params) = perturbed_mini(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Tensor<f64> = rand_tensor(&mut rng, &[12, 64], 1.0);
    let plan = MaskPlan::from_positions(vec![0, 3, 4, 9, 15], 16, 0.2).unwrap();
    let report = gradcheck::check_floored(&params, gradcheck::EPS, Some(8), COMPOSITE_FLOOR, |g, v| {
        let p = Binder::from_vars(g, &m.params, v)?;
        let xv = g.constant(x.clone());
        let z = m.encode(&p, xv)?;
        let xh = m.decode(&p, z)?;
        recon_loss(xv, xh, &plan, 4)
    })
    .unwrap();
    assert!(report.passed(gradcheck::REL_TOL), "{report:?}");
    assert!(report.checked > 500);
}

#[test]
fn classification_path_gradcheck() {
    let (m, params) = perturbed_mini(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xs: Vec<Tensor<f64>> = (0..4).map(|_| rand_tensor(&mut rng, &[12, 64], 1.0)).collect();
    let labels = [0, 1, 0, 1];
    let report = gradcheck::check_floored(&params, gradcheck::EPS, Some(8), COMPOSITE_FLOOR, |g, v| {
        let p = Binder::from_vars(g, &m.params, v)?;
        let zs = xs
            .iter()
            .map(|x| m.encode(&p, g.constant(x.clone())))
            .collect::<ecgnat::Result<Vec<_>>>()?;
        let logits = m.classify_batch(&p, &zs)?;
        let embs = zs
            .iter()
            .map(|&z| m.embed(z)?.reshape(&[1, 64]))
            .collect::<ecgnat::Result<Vec<_>>>()?;
        let (sc, _) = supcon_loss(ecgnat::autodiff::concat(&embs, 0)?, &labels, 0.5)?;
        total_loss(sc, ce_loss(logits, &labels)?, 0.5)
    })
    .unwrap();
    assert!(report.passed(gradcheck::REL_TOL), "{report:?}");
}
