//! Building blocks of the transformer: linear projections, layer
//! normalization, feed-forward blocks and multi-head attention, each with an
//! explicit backward pass that accumulates parameter gradients.
//!
//! Activations are packed as `[batch * padded_len, model_dim]` matrices;
//! per-item sequence lengths delimit the valid rows. Padded rows are never
//! attended to and carry zero loss weight, so their garbage values stay
//! isolated.

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Real;

/// Xavier-uniform initialisation; samples in f64 so the bit pattern of the
/// draw sequence is identical for every scalar type.
pub fn xavier<F: Real>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<F> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        F::from_f64(rng.gen_range(-bound..bound))
    })
}

/// Per-parameter tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub value: Array2<F>,
    pub grad: Array2<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: Array2<F>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Real> Linear<F> {
    pub fn new(dim_in: usize, dim_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Param::new(xavier(dim_in, dim_out, rng)),
            b: Param::new(Array2::zeros((1, dim_out))),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w.value);
        y += &self.b.value;
        y
    }

    /// `x` must be the input that produced the output being differentiated.
    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        self.w.grad += &x.t().dot(dy);
        let db = dy.sum_axis(ndarray::Axis(0));
        self.b.grad += &db.insert_axis(ndarray::Axis(0));
        dy.dot(&self.w.value.t())
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }

    pub fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.push(&self.w);
        out.push(&self.b);
    }
}

/// Row-wise layer normalisation with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    eps: F,
}

pub struct LayerNormCache<F> {
    normalized: Array2<F>,
    inv_std: Vec<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Array2::ones((1, dim))),
            beta: Param::new(Array2::zeros((1, dim))),
            eps: F::from_f64(1e-5),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let dim = x.ncols();
        let dim_f = F::from_f64(dim as f64);
        let mut normalized = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in normalized.rows_mut() {
            let mean = row.sum() / dim_f;
            let mut var = F::zero();
            for v in row.iter() {
                let d = *v - mean;
                var += d * d;
            }
            var = var / dim_f;
            let istd = F::one() / (var + self.eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * istd;
            }
            inv_std.push(istd);
        }
        let mut y = normalized.clone();
        y *= &self.gamma.value;
        y += &self.beta.value;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<F>, dy: &Array2<F>) -> Array2<F> {
        let dim_f = F::from_f64(dy.ncols() as f64);
        for (g, col) in self
            .gamma
            .grad
            .row_mut(0)
            .iter_mut()
            .zip(0..dy.ncols())
        {
            let mut acc = F::zero();
            for r in 0..dy.nrows() {
                acc += dy[[r, col]] * cache.normalized[[r, col]];
            }
            *g += acc;
        }
        self.beta.grad += &dy
            .sum_axis(ndarray::Axis(0))
            .insert_axis(ndarray::Axis(0));

        let mut dx = Array2::zeros(dy.raw_dim());
        for r in 0..dy.nrows() {
            // dxhat = dy * gamma; dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
            let mut mean_dxhat = F::zero();
            let mut mean_dxhat_xhat = F::zero();
            for c in 0..dy.ncols() {
                let dxhat = dy[[r, c]] * self.gamma.value[[0, c]];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * cache.normalized[[r, c]];
            }
            mean_dxhat = mean_dxhat / dim_f;
            mean_dxhat_xhat = mean_dxhat_xhat / dim_f;
            let istd = cache.inv_std[r];
            for c in 0..dy.ncols() {
                let dxhat = dy[[r, c]] * self.gamma.value[[0, c]];
                dx[[r, c]] =
                    istd * (dxhat - mean_dxhat - cache.normalized[[r, c]] * mean_dxhat_xhat);
            }
        }
        dx
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    pub fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }
}

/// Two-layer feed-forward block with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward<F> {
    pub lin1: Linear<F>,
    pub lin2: Linear<F>,
}

pub struct FeedForwardCache<F> {
    input: Array2<F>,
    hidden: Array2<F>,
}

impl<F: Real> FeedForward<F> {
    pub fn new(dim: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            lin1: Linear::new(dim, ffn_dim, rng),
            lin2: Linear::new(ffn_dim, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, FeedForwardCache<F>) {
        let mut hidden = self.lin1.forward(x);
        hidden.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
        let y = self.lin2.forward(&hidden);
        (
            y,
            FeedForwardCache {
                input: x.clone(),
                hidden,
            },
        )
    }

    pub fn backward(&mut self, cache: &FeedForwardCache<F>, dy: &Array2<F>) -> Array2<F> {
        let mut dhidden = self.lin2.backward(&cache.hidden, dy);
        ndarray::Zip::from(&mut dhidden)
            .and(&cache.hidden)
            .for_each(|d, &h| {
                if h <= F::zero() {
                    *d = F::zero();
                }
            });
        self.lin1.backward(&cache.input, &dhidden)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.lin1.collect_params(out);
        self.lin2.collect_params(out);
    }

    pub fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.lin1.collect_params_ref(out);
        self.lin2.collect_params_ref(out);
    }
}

/// Valid-row layout of a packed `[batch * padded_len, dim]` activation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub lens: Vec<usize>,
    pub padded_len: usize,
}

impl SeqLayout {
    pub fn new(lens: Vec<usize>) -> Self {
        let padded_len = lens.iter().copied().max().unwrap_or(0);
        SeqLayout { lens, padded_len }
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn rows(&self) -> usize {
        self.batch() * self.padded_len
    }

    /// Row range of item `b`'s valid positions.
    pub fn item(&self, b: usize) -> std::ops::Range<usize> {
        let start = b * self.padded_len;
        start..start + self.lens[b]
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<F> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    num_heads: usize,
}

pub struct AttentionCache<F> {
    q_input: Array2<F>,
    kv_input: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    context: Array2<F>,
    /// Soft attention weights per (item, head), `[q_len, k_len]` each.
    attn: Vec<Array2<F>>,
}

impl<F: Real> MultiHeadAttention<F> {
    pub fn new(dim: usize, num_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        MultiHeadAttention {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            num_heads,
        }
    }

    /// `queries` uses `q_layout`; `keys_values` uses `kv_layout`. With
    /// `causal`, query position i attends to key positions <= i.
    pub fn forward(
        &self,
        queries: &Array2<F>,
        keys_values: &Array2<F>,
        q_layout: &SeqLayout,
        kv_layout: &SeqLayout,
        causal: bool,
    ) -> (Array2<F>, AttentionCache<F>) {
        let dim = queries.ncols();
        let head_dim = dim / self.num_heads;
        let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());

        let q = self.wq.forward(queries);
        let k = self.wk.forward(keys_values);
        let v = self.wv.forward(keys_values);

        let mut context: Array2<F> = Array2::zeros(queries.raw_dim());
        let mut attn = Vec::with_capacity(q_layout.batch() * self.num_heads);
        for b in 0..q_layout.batch() {
            let q_rows = q_layout.item(b);
            let kv_rows = kv_layout.item(b);
            for h in 0..self.num_heads {
                let cols = h * head_dim..(h + 1) * head_dim;
                let qh = q.slice(s![q_rows.clone(), cols.clone()]);
                let kh = k.slice(s![kv_rows.clone(), cols.clone()]);
                let vh = v.slice(s![kv_rows.clone(), cols.clone()]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|x| x * scale);
                if causal {
                    for i in 0..scores.nrows() {
                        for j in (i + 1)..scores.ncols() {
                            scores[[i, j]] = F::from_f64(f64::NEG_INFINITY);
                        }
                    }
                }
                softmax_rows(&mut scores);
                let ctx = scores.dot(&vh);
                context
                    .slice_mut(s![q_rows.clone(), cols.clone()])
                    .assign(&ctx);
                attn.push(scores);
            }
        }
        let out = self.wo.forward(&context);
        (
            out,
            AttentionCache {
                q_input: queries.clone(),
                kv_input: keys_values.clone(),
                q,
                k,
                v,
                context,
                attn,
            },
        )
    }

    /// Returns `(d_queries, d_keys_values)`.
    pub fn backward(
        &mut self,
        cache: &AttentionCache<F>,
        q_layout: &SeqLayout,
        kv_layout: &SeqLayout,
        dy: &Array2<F>,
    ) -> (Array2<F>, Array2<F>) {
        let dim = dy.ncols();
        let head_dim = dim / self.num_heads;
        let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());

        let dcontext = self.wo.backward(&cache.context, dy);
        let mut dq: Array2<F> = Array2::zeros(cache.q.raw_dim());
        let mut dk: Array2<F> = Array2::zeros(cache.k.raw_dim());
        let mut dv: Array2<F> = Array2::zeros(cache.v.raw_dim());

        for b in 0..q_layout.batch() {
            let q_rows = q_layout.item(b);
            let kv_rows = kv_layout.item(b);
            for h in 0..self.num_heads {
                let cols = h * head_dim..(h + 1) * head_dim;
                let attn = &cache.attn[b * self.num_heads + h];
                let dctx = dcontext.slice(s![q_rows.clone(), cols.clone()]);
                let kh = cache.k.slice(s![kv_rows.clone(), cols.clone()]);
                let vh = cache.v.slice(s![kv_rows.clone(), cols.clone()]);
                let qh = cache.q.slice(s![q_rows.clone(), cols.clone()]);

                let mut dattn = dctx.dot(&vh.t());
                // softmax backward: ds = a * (da - rowsum(da * a))
                for i in 0..dattn.nrows() {
                    let mut dot = F::zero();
                    for j in 0..dattn.ncols() {
                        dot += dattn[[i, j]] * attn[[i, j]];
                    }
                    for j in 0..dattn.ncols() {
                        dattn[[i, j]] = attn[[i, j]] * (dattn[[i, j]] - dot);
                    }
                }
                dattn.mapv_inplace(|x| x * scale);
                dq.slice_mut(s![q_rows.clone(), cols.clone()])
                    .assign(&dattn.dot(&kh));
                dk.slice_mut(s![kv_rows.clone(), cols.clone()])
                    .assign(&dattn.t().dot(&qh));
                dv.slice_mut(s![kv_rows.clone(), cols.clone()])
                    .assign(&attn.t().dot(&dctx));
            }
        }

        let dq_in = self.wq.backward(&cache.q_input, &dq);
        let dk_in = self.wk.backward(&cache.kv_input, &dk);
        let dv_in = self.wv.backward(&cache.kv_input, &dv);
        (dq_in, dk_in + dv_in)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.wq.collect_params(out);
        self.wk.collect_params(out);
        self.wv.collect_params(out);
        self.wo.collect_params(out);
    }

    pub fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.wq.collect_params_ref(out);
        self.wk.collect_params_ref(out);
        self.wv.collect_params_ref(out);
        self.wo.collect_params_ref(out);
    }
}

/// In-place row softmax with max subtraction. Rows that are entirely
/// `-inf` (fully masked) become all zeros.
pub fn softmax_rows<F: Real>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let mut max = F::from_f64(f64::NEG_INFINITY);
        for v in row.iter() {
            if *v > max {
                max = *v;
            }
        }
        if max == F::from_f64(f64::NEG_INFINITY) {
            row.fill(F::zero());
            continue;
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Sinusoidal position encoding added in place to each item's valid rows.
pub fn add_positional<F: Real>(x: &mut Array2<F>, layout: &SeqLayout) {
    let dim = x.ncols();
    for b in 0..layout.batch() {
        let rows = layout.item(b);
        for (pos, r) in rows.enumerate() {
            for c in 0..dim {
                let exponent = (2 * (c / 2)) as f64 / dim as f64;
                let angle = pos as f64 / 10000f64.powf(exponent);
                let val = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                x[[r, c]] += F::from_f64(val);
            }
        }
    }
}

/// Inverted dropout; `keep` masks are cached for the backward pass.
pub struct DropoutMask<F> {
    mask: Option<Array2<F>>,
}

/// Applies dropout in place when `rng` is provided and the rate is positive.
pub fn dropout<F: Real>(
    x: &mut Array2<F>,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> DropoutMask<F> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let scale = F::from_f64(1.0 / keep);
            let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
                if rng.gen_range(0.0..1.0) < keep {
                    scale
                } else {
                    F::zero()
                }
            });
            *x *= &mask;
            DropoutMask { mask: Some(mask) }
        }
        _ => DropoutMask { mask: None },
    }
}

impl<F: Real> DropoutMask<F> {
    pub fn backward(&self, dx: &mut Array2<F>) {
        if let Some(mask) = &self.mask {
            *dx *= mask;
        }
    }
}
