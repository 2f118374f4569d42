//! 1D neighborhood attention.
//!
//! Each query attends to a contiguous window of `min(k, n)` keys centred on
//! itself, shifted inward at the sequence edges so every row has the same
//! support. Logits carry a learnable bias indexed by the relative offset
//! `i - j` and are scaled by `1/sqrt(d)` (bias included) before the softmax.
//!
//! [`na_forward`] runs in `O(heads·n·k·d)` and never builds an `n×n` buffer.
//! [`na_reference`] is the quadratic masked-global formulation used as a
//! test oracle and as the baseline in [`bench_scaling`].

use std::time::Instant;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborhoodSpec {
    pub window: usize,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl NeighborhoodSpec {
    pub fn new(window: usize, n_heads: usize, head_dim: usize) -> Result<Self> {
        check_window(window)?;
        if n_heads == 0 || head_dim == 0 {
            return Err(Error::Contract(
                "head count and head dimension must be positive".into(),
            ));
        }
        Ok(NeighborhoodSpec {
            window,
            n_heads,
            head_dim,
        })
    }

    /// Length of the per-head relative bias table.
    pub fn bias_len(&self) -> usize {
        2 * self.window - 1
    }
}

pub(crate) fn check_window(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Contract(format!(
            "neighborhood size must be odd and positive, got {k}"
        )));
    }
    Ok(())
}

/// First attended index for query `i`.
#[inline]
pub fn window_start(i: usize, k: usize, n: usize) -> usize {
    if k >= n {
        0
    } else {
        i.saturating_sub(k / 2).min(n - k)
    }
}

/// Position of the bias entry for query `i` attending key `j`.
#[inline]
pub fn bias_index(i: usize, j: usize, k: usize) -> usize {
    i + k - 1 - j
}

pub fn neighbor_indices(i: usize, k: usize, n: usize) -> Result<Vec<usize>> {
    check_window(k)?;
    if i >= n {
        return Err(Error::Index { index: i, len: n });
    }
    let start = window_start(i, k, n);
    Ok((start..start + k.min(n)).collect())
}

/// Materialized neighbor lists, for inspection and tests only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborMap {
    pub window: usize,
    pub lists: Vec<Vec<usize>>,
}

impl NeighborMap {
    pub fn new(k: usize, n: usize) -> Result<Self> {
        let lists = (0..n)
            .map(|i| neighbor_indices(i, k, n))
            .collect::<Result<_>>()?;
        Ok(NeighborMap { window: k, lists })
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NaDims {
    pub heads: usize,
    pub n: usize,
    pub d: usize,
    pub k: usize,
}

impl NaDims {
    pub fn span(&self) -> usize {
        self.k.min(self.n)
    }
}

pub(crate) fn na_dims(q: &[usize], k: &[usize], v: &[usize], bias: &[usize], window: usize) -> Result<NaDims> {
    check_window(window)?;
    if q.len() != 3 {
        return Err(Error::shape(
            "neighborhood_attention",
            format!("expected [heads×n×d], got {q:?}"),
        ));
    }
    for (name, s) in [("K", k), ("V", v)] {
        if s != q {
            return Err(Error::shape(
                "neighborhood_attention",
                format!("Q has shape {q:?} but {name} has shape {s:?}"),
            ));
        }
    }
    let want = [q[0], 2 * window - 1];
    if bias != want {
        return Err(Error::shape(
            "neighborhood_attention",
            format!("bias table must be {want:?}, got {bias:?}"),
        ));
    }
    Ok(NaDims {
        heads: q[0],
        n: q[1],
        d: q[2],
        k: window,
    })
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Returns `(output, attention weights [heads×n×min(k,n)])`.
pub(crate) fn forward_raw<T: Real>(
    dims: NaDims,
    q: &[T],
    k: &[T],
    v: &[T],
    bias: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); dims.heads * dims.n * dims.d];
    let mut attn = vec![T::zero(); dims.heads * dims.n * dims.span()];
    forward_into(dims, q, k, v, bias, &mut out, Some(&mut attn));
    (out, attn)
}

/// Writes the attention output into `out`, and the normalized weights into
/// `attn` when given. Without `attn` only one row of weights is live at a time.
fn forward_into<T: Real>(dims: NaDims, q: &[T], k: &[T], v: &[T], bias: &[T], out: &mut [T], mut attn: Option<&mut [T]>) {
    let NaDims { heads, n, d, k: win } = dims;
    let span = dims.span();
    let scale = T::one() / T::from_f(d as f64).sqrt();
    let nbias = 2 * win - 1;
    let mut scratch = vec![T::zero(); span];
    for h in 0..heads {
        let base = h * n * d;
        let (qh, kh, vh) = (&q[base..base + n * d], &k[base..base + n * d], &v[base..base + n * d]);
        let bh = &bias[h * nbias..(h + 1) * nbias];
        for i in 0..n {
            let start = window_start(i, win, n);
            let qi = &qh[i * d..(i + 1) * d];
            let row = match attn.as_deref_mut() {
                Some(a) => &mut a[(h * n + i) * span..(h * n + i + 1) * span],
                None => &mut scratch[..],
            };
            let mut max = T::neg_infinity();
            for (jj, slot) in row.iter_mut().enumerate() {
                let j = start + jj;
                let logit = (dot(qi, &kh[j * d..(j + 1) * d]) + bh[bias_index(i, j, win)]) * scale;
                *slot = logit;
                if logit > max {
                    max = logit;
                }
            }
            let mut denom = T::zero();
            for slot in row.iter_mut() {
                *slot = (*slot - max).exp();
                denom += *slot;
            }
            let inv = T::one() / denom;
            let oi = &mut out[base + i * d..base + (i + 1) * d];
            for (jj, slot) in row.iter_mut().enumerate() {
                *slot *= inv;
                let a = *slot;
                let vj = &vh[(start + jj) * d..(start + jj + 1) * d];
                for (o, &x) in oi.iter_mut().zip(vj) {
                    *o += a * x;
                }
            }
        }
    }
}

/// Adjoint of [`forward_raw`]; gradients are accumulated into the provided buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_raw<T: Real>(
    dims: NaDims,
    q: &[T],
    k: &[T],
    v: &[T],
    attn: &[T],
    grad_out: &[T],
    gq: &mut [T],
    gk: &mut [T],
    gv: &mut [T],
    gbias: &mut [T],
) {
    let NaDims { heads, n, d, k: win } = dims;
    let span = dims.span();
    let scale = T::one() / T::from_f(d as f64).sqrt();
    let nbias = 2 * win - 1;
    let mut dlogit = vec![T::zero(); span];
    for h in 0..heads {
        let base = h * n * d;
        for i in 0..n {
            let start = window_start(i, win, n);
            let row = &attn[(h * n + i) * span..(h * n + i + 1) * span];
            let go = &grad_out[base + i * d..base + (i + 1) * d];
            let mut weighted = T::zero();
            for (jj, &a) in row.iter().enumerate() {
                let j = start + jj;
                let vj = &v[base + j * d..base + (j + 1) * d];
                let da = dot(go, vj);
                dlogit[jj] = da;
                weighted += a * da;
                let gvj = &mut gv[base + j * d..base + (j + 1) * d];
                for (g, &o) in gvj.iter_mut().zip(go) {
                    *g += a * o;
                }
            }
            let qi = &q[base + i * d..base + (i + 1) * d];
            for (jj, &a) in row.iter().enumerate() {
                let j = start + jj;
                let dl = a * (dlogit[jj] - weighted) * scale;
                gbias[h * nbias + bias_index(i, j, win)] += dl;
                let kj = &k[base + j * d..base + (j + 1) * d];
                let gqi = &mut gq[base + i * d..base + (i + 1) * d];
                for (g, &x) in gqi.iter_mut().zip(kj) {
                    *g += dl * x;
                }
                let gkj = &mut gk[base + j * d..base + (j + 1) * d];
                for (g, &x) in gkj.iter_mut().zip(qi) {
                    *g += dl * x;
                }
            }
        }
    }
}

/// Forward state needed by [`na_backward`].
#[derive(Debug, Clone)]
pub struct NaSaved<T: Real> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub attn: Tensor<T>,
    pub window: usize,
}

/// Neighborhood attention over `[heads×n×d]` inputs with a `[heads×(2k−1)]` bias table.
pub fn na_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &Tensor<T>,
    window: usize,
) -> Result<Tensor<T>> {
    let dims = na_dims(q.shape(), k.shape(), v.shape(), bias.shape(), window)?;
    let mut out = vec![T::zero(); q.numel()];
    forward_into(dims, q.data(), k.data(), v.data(), bias.data(), &mut out, None);
    Tensor::from_vec(q.shape(), out)
}

pub fn na_forward_saved<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &Tensor<T>,
    window: usize,
) -> Result<(Tensor<T>, NaSaved<T>)> {
    let dims = na_dims(q.shape(), k.shape(), v.shape(), bias.shape(), window)?;
    let (out, attn) = forward_raw(dims, q.data(), k.data(), v.data(), bias.data());
    let saved = NaSaved {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        attn: Tensor::from_vec(&[dims.heads, dims.n, dims.span()], attn)?,
        window,
    };
    Ok((Tensor::from_vec(q.shape(), out)?, saved))
}

/// Gradients `(dQ, dK, dV, dBias)` for an upstream gradient on the output.
pub fn na_backward<T: Real>(
    grad_out: &Tensor<T>,
    saved: &NaSaved<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
    let heads = saved.q.shape().first().copied().unwrap_or(0);
    let bias_shape = [heads, 2 * saved.window - 1];
    let dims = na_dims(
        saved.q.shape(),
        saved.k.shape(),
        saved.v.shape(),
        &bias_shape,
        saved.window,
    )?;
    if grad_out.shape() != saved.q.shape() {
        return Err(Error::shape(
            "na_backward",
            format!("gradient {:?} vs output {:?}", grad_out.shape(), saved.q.shape()),
        ));
    }
    if saved.attn.shape() != [dims.heads, dims.n, dims.span()] {
        return Err(Error::Contract(
            "saved attention weights do not match the saved inputs".into(),
        ));
    }
    let numel = saved.q.numel();
    let (mut gq, mut gk, mut gv) = (
        vec![T::zero(); numel],
        vec![T::zero(); numel],
        vec![T::zero(); numel],
    );
    let mut gb = vec![T::zero(); bias_shape[0] * bias_shape[1]];
    backward_raw(
        dims,
        saved.q.data(),
        saved.k.data(),
        saved.v.data(),
        saved.attn.data(),
        grad_out.data(),
        &mut gq,
        &mut gk,
        &mut gv,
        &mut gb,
    );
    let shape = saved.q.shape();
    Ok((
        Tensor::from_vec(shape, gq)?,
        Tensor::from_vec(shape, gk)?,
        Tensor::from_vec(shape, gv)?,
        Tensor::from_vec(&bias_shape, gb)?,
    ))
}

/// Quadratic masked-global attention: every key is scored, out-of-window
/// logits are excluded from the softmax.
pub fn na_reference<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &Tensor<T>,
    window: usize,
) -> Result<Tensor<T>> {
    let dims = na_dims(q.shape(), k.shape(), v.shape(), bias.shape(), window)?;
    let NaDims { heads, n, d, k: win } = dims;
    let scale = T::one() / T::from_f(d as f64).sqrt();
    let nbias = 2 * win - 1;
    let (qd, kd, vd, bd) = (q.data(), k.data(), v.data(), bias.data());
    let mut out = vec![T::zero(); heads * n * d];
    let mut logits = vec![T::zero(); n];
    for h in 0..heads {
        let base = h * n * d;
        for i in 0..n {
            let start = window_start(i, win, n);
            let end = start + win.min(n);
            let qi = &qd[base + i * d..base + (i + 1) * d];
            let mut max = T::neg_infinity();
            for (j, slot) in logits.iter_mut().enumerate() {
                let s = dot(qi, &kd[base + j * d..base + (j + 1) * d]);
                *slot = if (start..end).contains(&j) {
                    let l = (s + bd[h * nbias + bias_index(i, j, win)]) * scale;
                    max = max.max(l);
                    l
                } else {
                    T::neg_infinity()
                };
            }
            let mut denom = T::zero();
            for slot in logits.iter_mut() {
                *slot = if slot.is_finite() {
                    (*slot - max).exp()
                } else {
                    T::zero()
                };
                denom += *slot;
            }
            let oi = &mut out[base + i * d..base + (i + 1) * d];
            for (j, &w) in logits.iter().enumerate() {
                let a = w / denom;
                for (o, &x) in oi.iter_mut().zip(&vd[base + j * d..base + (j + 1) * d]) {
                    *o += a * x;
                }
            }
        }
    }
    Tensor::from_vec(q.shape(), out)
}

/// The masked-global formulation built from generic autodiff primitives
/// (batched matmul, gather, softmax), giving an independent backward pass.
pub fn na_reference_graph<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    bias: Var<'g, T>,
    window: usize,
) -> Result<Var<'g, T>> {
    let dims = na_dims(&q.shape(), &k.shape(), &v.shape(), &bias.shape(), window)?;
    let NaDims { heads, n, d, k: win } = dims;
    let graph = q.graph();
    let scores = q.bmm(k.permute(&[0, 2, 1])?)?;
    // Full n×n bias via a gather from the flattened table; masked cells
    // point at entry 0 and are then pushed to a very negative logit.
    let nbias = 2 * win - 1;
    let mut gather = Vec::with_capacity(heads * n * n);
    let mut mask = Vec::with_capacity(n * n);
    for h in 0..heads {
        for i in 0..n {
            let start = window_start(i, win, n);
            let end = start + win.min(n);
            for j in 0..n {
                let inside = (start..end).contains(&j);
                gather.push(if inside { h * nbias + bias_index(i, j, win) } else { 0 });
                if h == 0 {
                    mask.push(if inside { T::zero() } else { T::min_value() / T::from_f(4.0) });
                }
            }
        }
    }
    let bias_full = bias
        .reshape(&[heads * nbias])?
        .index_select(0, &gather)?
        .reshape(&[heads, n, n])?;
    let mask = graph.constant(Tensor::from_vec(&[n, n], mask)?);
    let logits = scores
        .add(bias_full)?
        .scale(T::one() / T::from_f(d as f64).sqrt())
        .add(mask)?;
    logits.softmax().bmm(v)
}

/// FLOP estimate for one neighborhood-attention forward: `heads·n·k·(4d+5)`.
pub fn na_flops(heads: usize, n: usize, k: usize, d: usize) -> u64 {
    (heads * n * k.min(n) * (4 * d + 5)) as u64
}

/// FLOP estimate for the masked-global reference: `heads·n·n·(4d+5)`.
pub fn reference_flops(heads: usize, n: usize, d: usize) -> u64 {
    (heads * n * n * (4 * d + 5)) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchImpl {
    Neighborhood,
    Reference,
}

impl BenchImpl {
    pub fn name(self) -> &'static str {
        match self {
            BenchImpl::Neighborhood => "na_forward",
            BenchImpl::Reference => "na_reference",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub n: usize,
    pub imp: BenchImpl,
    pub flops_est: u64,
    pub samples_ms: Vec<f64>,
}

impl BenchRow {
    pub fn mean_ms(&self) -> f64 {
        self.samples_ms.iter().sum::<f64>() / self.samples_ms.len() as f64
    }

    pub fn std_ms(&self) -> f64 {
        let m = self.mean_ms();
        let var = self.samples_ms.iter().map(|x| (x - m).powi(2)).sum::<f64>()
            / self.samples_ms.len() as f64;
        var.sqrt()
    }

    pub fn median_ms(&self) -> f64 {
        let mut s = self.samples_ms.clone();
        s.sort_by(|a, b| a.total_cmp(b));
        let m = s.len() / 2;
        if s.len() % 2 == 0 {
            0.5 * (s[m - 1] + s[m])
        } else {
            s[m]
        }
    }
}

pub const BENCH_CSV_HEADER: &str = "n,impl,flops_est,mean_ms,std_ms";

/// Documents the FLOP columns; written as a comment line above the CSV header.
pub const BENCH_FLOP_NOTE: &str =
    "# flops_est: na_forward = heads*n*k*(4d+5), na_reference = heads*n*n*(4d+5)";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_FLOP_NOTE}\n{BENCH_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.n,
            r.imp.name(),
            r.flops_est,
            r.mean_ms(),
            r.std_ms()
        ));
    }
    s
}

/// Times both implementations at every length. Each sample is the mean of
/// enough inner iterations to span at least `min_sample_ms`.
pub fn bench_scaling(
    window: usize,
    lengths: &[usize],
    head_dim: usize,
    heads: usize,
    repeats: usize,
    min_sample_ms: f64,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    use rand::{Rng, SeedableRng};
    check_window(window)?;
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("bench lengths must be strictly ascending".into()));
    }
    if repeats == 0 {
        return Err(Error::Config("bench repeats must be >= 1".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rand_tensor = |shape: &[usize]| {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::<f32>::from_vec(shape, data)
    };
    let mut cases = Vec::new();
    for &n in lengths {
        let shape = [heads, n, head_dim];
        let qkv = [rand_tensor(&shape)?, rand_tensor(&shape)?, rand_tensor(&shape)?];
        let bias = rand_tensor(&[heads, 2 * window - 1])?;
        for imp in [BenchImpl::Neighborhood, BenchImpl::Reference] {
            cases.push((n, imp, qkv.clone(), bias.clone()));
        }
    }
    let run = |(_, imp, [q, k, v], bias): &(usize, BenchImpl, [Tensor<f32>; 3], Tensor<f32>)| match imp {
        BenchImpl::Neighborhood => na_forward(q, k, v, bias, window),
        BenchImpl::Reference => na_reference(q, k, v, bias, window),
    };
    // Warm-up sizes each inner loop. Samples are then taken round-robin over
    // all cases so slow drifts in machine speed hit every length alike.
    let mut inner = Vec::with_capacity(cases.len());
    for case in &cases {
        std::hint::black_box(run(case)?);
        let t0 = Instant::now();
        std::hint::black_box(run(case)?);
        let once = t0.elapsed().as_secs_f64() * 1e3;
        inner.push(((min_sample_ms / once.max(1e-6)).ceil() as usize).max(1));
    }
    let mut samples = vec![Vec::with_capacity(repeats); cases.len()];
    for _ in 0..repeats {
        for (c, case) in cases.iter().enumerate() {
            let t = Instant::now();
            for _ in 0..inner[c] {
                std::hint::black_box(run(case)?);
            }
            samples[c].push(t.elapsed().as_secs_f64() * 1e3 / inner[c] as f64);
        }
    }
    let rows = cases
        .iter()
        .zip(samples)
        .map(|(&(n, imp, _, _), samples_ms)| BenchRow {
            n,
            imp,
            flops_est: match imp {
                BenchImpl::Neighborhood => na_flops(heads, n, window, head_dim),
                BenchImpl::Reference => reference_flops(heads, n, head_dim),
            },
            samples_ms,
        })
        .collect();
    Ok(rows)
}
