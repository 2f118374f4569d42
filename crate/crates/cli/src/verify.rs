//! Self-verification: kernel oracle, gradient checks, loss identities,
//! metric oracles and a fault-injection sanity check.

use ecgnat::autodiff::{concat, neighborhood_attention};
use ecgnat::finetune::{ce_loss, cosine_sim, supcon_loss, total_loss};
use ecgnat::gradcheck::{self, GradCheckReport};
use ecgnat::metrics::{accuracy, binary_auroc, confusion, macro_f1};
use ecgnat::natten::{na_backward, na_forward, na_forward_saved, na_reference, NaSaved};
use ecgnat::pretrain::{recon_loss, MaskPlan};
use ecgnat::{Binder, EcgNat, Graph, ModelConfig, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Phase;
use crate::{CliError, CliResult, GlobalArgs, Level, VerifyArgs};

/// Denominator floor for whole-model checks, where central differences on
/// exactly-zero gradients carry noise near 1e-9.
pub const COMPOSITE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Default)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    pub failures: Vec<String>,
    pub elapsed: std::time::Duration,
}

impl SuiteResult {
    fn new(name: &'static str) -> Self {
        SuiteResult {
            name,
            ..Default::default()
        }
    }

    fn record(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.total += 1;
        if ok {
            self.passed += 1;
        } else {
            self.failures.push(what());
        }
    }

    fn record_result(&mut self, label: &str, r: Result<bool>) {
        match r {
            Ok(ok) => self.record(ok, || label.to_string()),
            Err(e) => self.record(false, || format!("{label}: {e}")),
        }
    }

    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub level: Level,
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.suites.iter().all(SuiteResult::ok)
    }

    pub fn render(&self) -> String {
        let mut s = format!("verify level={:?}\n", self.level).to_lowercase();
        for suite in &self.suites {
            s.push_str(&format!(
                "{:<20} {:>4}/{:<4} {:>7.1}s {}\n",
                suite.name,
                suite.passed,
                suite.total,
                suite.elapsed.as_secs_f64(),
                if suite.ok() { "ok" } else { "FAILED" }
            ));
            for f in &suite.failures {
                s.push_str(&format!("    {f}\n"));
            }
        }
        s.push_str(if self.ok() { "all suites passed\n" } else { "verification FAILED\n" });
        s
    }
}

pub fn cmd_verify(g: &GlobalArgs, a: &VerifyArgs) -> CliResult<VerifyReport> {
    let cfg = g.resolve(Phase::Other, None, Vec::new())?;
    let report = run_suites(a.level, cfg.seed);
    print!("{}", report.render());
    if report.ok() {
        Ok(report)
    } else {
        let failed: Vec<&str> = report.suites.iter().filter(|s| !s.ok()).map(|s| s.name).collect();
        Err(CliError::Verification(format!("failing suites: {}", failed.join(", "))))
    }
}

pub fn run_suites(level: Level, seed: u64) -> VerifyReport {
    let full = level == Level::Full;
    let timed = |f: &dyn Fn() -> SuiteResult| {
        let t = std::time::Instant::now();
        let mut s = f();
        s.elapsed = t.elapsed();
        s
    };
    VerifyReport {
        level,
        suites: vec![
            timed(&|| kernel_oracle(if full { 200 } else { 40 }, seed)),
            timed(&|| primitive_gradients(if full { 5 } else { 2 }, seed)),
            timed(&|| kernel_gradients(if full { 20 } else { 5 }, seed)),
            timed(&|| model_gradients(full, seed)),
            timed(&|| loss_identities(seed)),
            timed(&|| metric_oracles(seed)),
            timed(&|| fault_injection(seed)),
        ],
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches data")
}

/// Random `(q, k, v, bias)` for `heads×n×d` attention with window `k`.
fn na_case(rng: &mut ChaCha8Rng, heads: usize, n: usize, d: usize, k: usize) -> [Tensor<f64>; 4] {
    let s = [heads, n, d];
    [
        rand_tensor(rng, &s, 1.0),
        rand_tensor(rng, &s, 1.0),
        rand_tensor(rng, &s, 1.0),
        rand_tensor(rng, &[heads, 2 * k - 1], 1.0),
    ]
}

fn kernel_oracle(cases: usize, seed: u64) -> SuiteResult {
    let mut suite = SuiteResult::new("kernel_oracle");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a);
    for c in 0..cases {
        let k = [1, 3, 5, 7][rng.random_range(0..4)];
        let (n, d, h) = (rng.random_range(1..=64), rng.random_range(1..=16), rng.random_range(1..=4));
        let [q, kk, v, b] = na_case(&mut rng, h, n, d, k);
        let r = na_forward(&q, &kk, &v, &b, k)
            .and_then(|fast| Ok(fast.max_abs_diff(&na_reference(&q, &kk, &v, &b, k)?)));
        suite.record_result(
            &format!("case {c} (heads {h}, n {n}, d {d}, k {k})"),
            r.map(|diff| diff < 1e-12),
        );
    }
    suite
}

/// Contracts an output against a fixed random tensor so every element
/// reaches the scalar loss.
fn project<'g>(out: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = out.graph().constant(rand_tensor(&mut rng, &out.shape(), 1.0));
    Ok(out.mul(w)?.sum())
}

type Primitive = for<'g> fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>;

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Primitive)> {
    fn sh(s: &[&[usize]]) -> Vec<Vec<usize>> {
        s.iter().map(|x| x.to_vec()).collect()
    }
    vec![
        ("add", sh(&[&[3, 4], &[4]]), |_, v| v[0].add(v[1])),
        ("sub", sh(&[&[3, 4], &[3, 4]]), |_, v| v[0].sub(v[1])),
        ("mul", sh(&[&[2, 5], &[2, 5]]), |_, v| v[0].mul(v[1])),
        ("scalar", sh(&[&[5]]), |_, v| Ok(v[0].scale(-1.7).add_scalar(0.3))),
        ("relu", sh(&[&[4, 4]]), |_, v| Ok(v[0].relu())),
        ("gelu", sh(&[&[4, 4]]), |_, v| Ok(v[0].gelu())),
        ("exp", sh(&[&[4, 3]]), |_, v| Ok(v[0].exp())),
        ("log", sh(&[&[4, 3]]), |_, v| Ok(v[0].exp().add_scalar(0.5).log())),
        ("matmul", sh(&[&[3, 4], &[4, 2]]), |_, v| v[0].matmul(v[1])),
        ("bmm", sh(&[&[2, 3, 4], &[2, 4, 5]]), |_, v| v[0].bmm(v[1])),
        ("reshape", sh(&[&[3, 4]]), |_, v| v[0].reshape(&[2, 6])),
        ("permute", sh(&[&[2, 3, 4]]), |_, v| v[0].permute(&[2, 0, 1])),
        ("concat", sh(&[&[2, 3], &[2, 1]]), |_, v| concat(&[v[0], v[1]], 1)),
        ("index_select", sh(&[&[4, 3]]), |_, v| v[0].index_select(0, &[3, 0, 0, 2])),
        ("sum", sh(&[&[3, 4]]), |_, v| Ok(v[0].exp().sum())),
        ("mean_axis", sh(&[&[3, 4]]), |_, v| v[0].mean_axis(1)),
        ("softmax", sh(&[&[3, 5]]), |_, v| Ok(v[0].softmax())),
        ("log_softmax", sh(&[&[3, 5]]), |_, v| Ok(v[0].log_softmax())),
        ("layer_norm", sh(&[&[4, 6], &[6], &[6]]), |_, v| v[0].layer_norm(v[1], v[2], 1e-5)),
        ("l2_normalize", sh(&[&[3, 4]]), |_, v| Ok(v[0].l2_normalize())),
        ("conv1d", sh(&[&[3, 11], &[4, 3, 3], &[4]]), |_, v| v[0].conv1d(v[1], Some(v[2]), 2, 1)),
        ("conv_transpose1d", sh(&[&[3, 5], &[3, 2, 3], &[2]]), |_, v| {
            v[0].conv_transpose1d(v[1], Some(v[2]), 2, 0)
        }),
        ("neighborhood_attention", sh(&[&[2, 6, 2], &[2, 6, 2], &[2, 6, 2], &[2, 5]]), |_, v| {
            neighborhood_attention(v[0], v[1], v[2], v[3], 3)
        }),
    ]
}

fn primitive_gradients(trials: u64, seed: u64) -> SuiteResult {
    let mut suite = SuiteResult::new("grad_primitives");
    for (name, shapes, f) in primitives() {
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t));
            let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(&mut rng, s, 1.0)).collect();
            let r = gradcheck::check(&inputs, gradcheck::EPS, None, |g, v| project(f(g, v)?, t));
            suite.record_result(&format!("{name} trial {t}"), r.map(|rep| rep.passed(gradcheck::REL_TOL)));
        }
    }
    suite
}

type Backward = dyn Fn(&Tensor<f64>, &NaSaved<f64>) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>)>;

/// `backward` against central differences of `na_forward` on one random case.
pub fn kernel_gradcheck(backward: &Backward, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, n, d) = (rng.random_range(1..=3), rng.random_range(2..=12), rng.random_range(1..=4));
    let k = [1, 3, 5][rng.random_range(0..3)];
    let inputs = na_case(&mut rng, h, n, d, k);
    let w = rand_tensor(&mut rng, &[h, n, d], 1.0);
    let loss = |t: &[Tensor<f64>]| -> Result<f64> {
        let out = na_forward(&t[0], &t[1], &t[2], &t[3], k)?;
        Ok(out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
    };
    let (_, saved) = na_forward_saved(&inputs[0], &inputs[1], &inputs[2], &inputs[3], k)?;
    let (gq, gk, gv, gb) = backward(&w, &saved)?;
    let analytic = [gq, gk, gv, gb];
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    let eps = gradcheck::EPS;
    for ti in 0..4 {
        for ei in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let plus = loss(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let minus = loss(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].data()[ei];
            let err = gradcheck::relative_error(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, ei, a, numeric));
            }
        }
    }
    Ok(report)
}

fn kernel_gradients(trials: u64, seed: u64) -> SuiteResult {
    let mut suite = SuiteResult::new("grad_kernel");
    for t in 0..trials {
        let r = kernel_gradcheck(&na_backward, seed.wrapping_add(t));
        suite.record_result(&format!("na_backward trial {t}"), r.map(|rep| rep.passed(gradcheck::REL_TOL)));
    }
    suite
}

fn mini_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        stage_heads: vec![1, 2, 4, 8],
        input_len: 64,
        blocks_per_stage: 1,
        n_classes: 3,
        ..ModelConfig::default()
    }
}

/// Mini model and parameter values scaled up so every gradient sits well
/// above the finite-difference noise.
fn perturbed_mini(seed: u64) -> Result<(EcgNat<f64>, Vec<Tensor<f64>>)> {
    let m = EcgNat::new(mini_config(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let params = m
        .params
        .iter()
        .map(|(name, t)| {
            let mut r = rand_tensor(&mut rng, t.shape(), 0.5);
            if name.ends_with(".g") {
                r.data_mut().iter_mut().for_each(|v| *v += 1.0);
            }
            r
        })
        .collect();
    Ok((m, params))
}

fn model_gradients(full: bool, seed: u64) -> SuiteResult {
    let mut suite = SuiteResult::new("grad_model");
    let passed = |r: GradCheckReport| r.passed(gradcheck::REL_TOL);

    let block = perturbed_mini(seed).and_then(|(m, mut inputs)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        inputs.push(rand_tensor(&mut rng, &[16, 9], 1.0));
        let w = rand_tensor(&mut rng, &[16, 9], 1.0);
        gradcheck::check_floored(&inputs, gradcheck::EPS, None, COMPOSITE_FLOOR, |g, v| {
            let (params, u) = v.split_at(v.len() - 1);
            let p = Binder::from_vars(g, &m.params, params)?;
            let out = m.arch.stages[1][0].forward(&p, u[0])?;
            Ok(out.mul(g.constant(w.clone()))?.sum())
        })
    });
    suite.record_result("nat block", block.map(passed));
    if !full {
        return suite;
    }

    let recon = perturbed_mini(seed + 2).and_then(|(m, params)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let x = rand_tensor(&mut rng, &[12, 64], 1.0);
        let plan = MaskPlan::from_positions(vec![0, 3, 4, 9, 15], 16, 0.2)?;
        gradcheck::check_floored(&params, gradcheck::EPS, Some(8), COMPOSITE_FLOOR, |g, v| {
            let p = Binder::from_vars(g, &m.params, v)?;
            let xv = g.constant(x.clone());
            let xh = m.decode(&p, m.encode(&p, xv)?)?;
            recon_loss(xv, xh, &plan, m.config.token_stride())
        })
    });
    suite.record_result("encode -> decode -> recon_loss", recon.map(passed));

    let classify = perturbed_mini(seed + 4).and_then(|(m, params)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 5);
        let xs: Vec<_> = (0..4).map(|_| rand_tensor(&mut rng, &[12, 64], 1.0)).collect();
        let labels = [0, 1, 0, 1];
        gradcheck::check_floored(&params, gradcheck::EPS, Some(8), COMPOSITE_FLOOR, |g, v| {
            let p = Binder::from_vars(g, &m.params, v)?;
            let zs = xs
                .iter()
                .map(|x| m.encode(&p, g.constant(x.clone())))
                .collect::<Result<Vec<_>>>()?;
            let logits = m.classify_batch(&p, &zs)?;
            let embs = zs
                .iter()
                .map(|&z| m.embed(z)?.reshape(&[1, z.shape()[0]]))
                .collect::<Result<Vec<_>>>()?;
            let (sc, _) = supcon_loss(concat(&embs, 0)?, &labels, 0.5)?;
            total_loss(sc, ce_loss(logits, &labels)?, 0.5)
        })
    });
    suite.record_result("encode -> classify -> total_loss", classify.map(passed));
    suite
}

/// Direct transcription of the supervised contrastive loss, averaged over
/// anchors that have a positive.
fn supcon_oracle(emb: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let b = emb.len();
    let (mut total, mut anchors) = (0.0, 0usize);
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let denom: f64 = (0..b)
            .filter(|&j| j != i)
            .map(|j| (cosine_sim(&emb[i], &emb[j]) / tau).exp())
            .sum();
        total += pos
            .iter()
            .map(|&p| -((cosine_sim(&emb[i], &emb[p]) / tau).exp() / denom).ln())
            .sum::<f64>()
            / pos.len() as f64;
        anchors += 1;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

fn supcon_value(emb: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<f64> {
    let g = Graph::<f64>::new();
    let flat: Vec<f64> = emb.iter().flatten().copied().collect();
    let e = g.constant(Tensor::from_vec(&[emb.len(), emb[0].len()], flat)?);
    Ok(supcon_loss(e, labels, tau)?.0.item())
}

fn loss_identities(seed: u64) -> SuiteResult {
    let mut suite = SuiteResult::new("loss_identities");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x105);
    for t in 0..10 {
        let b = rng.random_range(2..=8);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let emb: Vec<Vec<f64>> = (0..b).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let logits = rand_tensor(&mut rng, &[b, 3], 2.0);
        let endpoints = (|| -> Result<(bool, bool)> {
            let g = Graph::<f64>::new();
            let flat: Vec<f64> = emb.iter().flatten().copied().collect();
            let (sc, _) = supcon_loss(g.constant(Tensor::from_vec(&[b, 5], flat)?), &labels, 0.07)?;
            let ce = ce_loss(g.constant(logits.clone()), &labels)?;
            let t0 = total_loss(sc, ce, 0.0)?.item();
            let t1 = total_loss(sc, ce, 1.0)?.item();
            Ok((t0 == ce.item(), t1 == sc.item()))
        })();
        match endpoints {
            Ok((a0, a1)) => {
                suite.record(a0, || format!("trial {t}: alpha=0 total != ce"));
                suite.record(a1, || format!("trial {t}: alpha=1 total != supcon"));
            }
            Err(e) => suite.record(false, || format!("trial {t}: {e}")),
        }
        let scaled: Vec<Vec<f64>> = emb
            .iter()
            .enumerate()
            .map(|(i, e)| e.iter().map(|v| v * (0.5 + i as f64)).collect())
            .collect();
        let r = supcon_value(&emb, &labels, 0.1)
            .and_then(|a| Ok((a - supcon_value(&scaled, &labels, 0.1)?).abs() < 1e-9));
        suite.record_result(&format!("trial {t}: supcon changes under rescaling"), r);
        let r = supcon_value(&emb, &labels, 0.2).map(|v| (v - supcon_oracle(&emb, &labels, 0.2)).abs() < 1e-9);
        suite.record_result(&format!("trial {t}: supcon differs from the brute-force oracle"), r);
    }
    let pair = vec![vec![0.3, -1.0, 2.0], vec![0.3, -1.0, 2.0]];
    let r = supcon_value(&pair, &[4, 4], 0.07).map(|v| v.abs() < 1e-12);
    suite.record_result("identical same-class pair is not zero", r);
    let three = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    let e = std::f64::consts::E;
    let oracle = supcon_oracle(&three, &[0, 0, 1], 1.0);
    suite.record((oracle - (-(e / (e + 1.0)).ln())).abs() < 1e-15, || {
        "three-sample oracle disagrees with -log(e/(e+1))".into()
    });
    let r = supcon_value(&three, &[0, 0, 1], 1.0).map(|v| (v - oracle).abs() < 1e-9);
    suite.record_result("three-sample hand case", r);
    suite
}

fn pairwise_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut credit, mut pairs) = (0.0, 0usize);
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1;
                credit += match scores[i].total_cmp(&scores[j]) {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (pairs > 0).then(|| credit / pairs as f64)
}

fn metric_oracles(seed: u64) -> SuiteResult {
    let mut suite = SuiteResult::new("metric_oracles");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa0c);
    for t in 0..100 {
        let n = rng.random_range(2..=50);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        suite.record(binary_auroc(&scores, &positive) == pairwise_auroc(&scores, &positive), || {
            format!("auroc instance {t} differs from pairwise enumeration")
        });
    }
    let pos = [false, false, true, true];
    suite.record(binary_auroc(&[0.1, 0.4, 0.35, 0.8], &pos) == Some(0.75), || {
        "(0.1,0.4,0.35,0.8) case is not 0.75".into()
    });
    let preds = [0, 0, 1, 2, 2, 1, 0];
    let labels = [0, 1, 1, 2, 0, 2, 0];
    let cm = confusion(&preds, &labels, 3).map(|cm| cm.iter().map(|m| (m.tp, m.fp, m.fn_, m.tn)).collect::<Vec<_>>());
    suite.record(cm.ok() == Some(vec![(2, 1, 1, 3), (1, 1, 1, 4), (1, 1, 1, 4)]), || {
        "hand confusion counts".into()
    });
    let f1 = macro_f1(&preds, &labels, 3).map(|f| (f - (2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
    suite.record(f1.unwrap_or(false), || "hand macro-F1".into());
    let acc = accuracy(&preds, &labels).map(|a| (a - 4.0 / 7.0).abs() < 1e-15);
    suite.record(acc.unwrap_or(false), || "hand accuracy".into());
    for code in 0..16usize {
        let labels = [0, 0, 1, 1];
        let preds: Vec<usize> = (0..4).map(|i| (code >> i) & 1).collect();
        let mut f = 0.0;
        for c in 0..2 {
            let count = |p: &dyn Fn(usize) -> bool| (0..4).filter(|&i| p(i)).count() as f64;
            let tp = count(&|i| preds[i] == c && labels[i] == c);
            let fp = count(&|i| preds[i] == c && labels[i] != c);
            let fneg = count(&|i| preds[i] != c && labels[i] == c);
            f += if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
        }
        let ok = macro_f1(&preds, &labels, 2).map(|v| (v - f / 2.0).abs() < 1e-15);
        suite.record(ok.unwrap_or(false), || format!("enumerated two-class case {preds:?}"));
    }
    suite
}

/// A backward pass with a small error planted in `dQ` must fail the check.
fn fault_injection(seed: u64) -> SuiteResult {
    let mut suite = SuiteResult::new("fault_injection");
    let faulty = |g: &Tensor<f64>, s: &NaSaved<f64>| {
        let (mut gq, gk, gv, gb) = na_backward(g, s)?;
        let last = gq.numel() - 1;
        gq.data_mut()[last] *= 1.001;
        gq.data_mut()[0] += 1e-4;
        Ok((gq, gk, gv, gb))
    };
    for t in 0..3 {
        let r = kernel_gradcheck(&faulty, seed.wrapping_add(t)).map(|rep| !rep.passed(gradcheck::REL_TOL));
        suite.record_result(&format!("perturbed na_backward trial {t} went undetected"), r);
    }
    suite
}
