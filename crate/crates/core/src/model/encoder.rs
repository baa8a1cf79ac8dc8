//! Encoder forward pass with cached activations, and its analytic backward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tensor::{
    add_assign, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward,
    matmul, matmul_nt, matmul_tn, LayerNormCache, Real,
};
use super::{layer_prefix, Model, Params};
use crate::batching::Batch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from `seed`.
    Train { seed: u64 },
    Eval,
}

/// Which sequence positions get MLM logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MlmRows {
    None,
    All,
    /// Positions with a label in the batch.
    Labeled,
    Rows(Vec<usize>),
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    x: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Softmax output, `[batch, heads, seq, seq]`, before dropout.
    probs: Vec<T>,
    probs_drop: Option<Vec<T>>,
    ctx: Vec<T>,
    attn_drop: Option<Vec<T>>,
    ln1: LayerNormCache<T>,
    h1: Vec<T>,
    f1: Vec<T>,
    g: Vec<T>,
    ffn_drop: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
}

#[derive(Debug, Clone)]
struct MlmCache<T> {
    h_rows: Vec<T>,
    t: Vec<T>,
    ln: LayerNormCache<T>,
    z: Vec<T>,
}

/// Activations needed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    batch_size: usize,
    seq_len: usize,
    tokens: Vec<u32>,
    positions: Vec<u32>,
    segments: Vec<u8>,
    emb_ln: LayerNormCache<T>,
    emb_drop: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    h_cls: Vec<T>,
    mlm_rows: Vec<usize>,
    mlm: Option<MlmCache<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Final hidden states, `[batch * seq, hidden]`.
    pub sequence: Vec<T>,
    /// `tanh(W h_cls + b)`, `[batch, hidden]`.
    pub pooled: Vec<T>,
    /// Flat positions the MLM logits belong to.
    pub mlm_rows: Vec<usize>,
    /// `[mlm_rows.len(), vocab]`.
    pub mlm_logits: Vec<T>,
    pub cache: ForwardCache<T>,
}

impl<T: Real> ForwardOutput<T> {
    /// Softmax attention weights of one layer, `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, layer: usize) -> &[T] {
        &self.cache.layers[layer].probs
    }
}

/// Upstream gradients for [`Model::backward`]. Any may be absent.
#[derive(Debug, Clone, Copy, Default)]
pub struct OutputGrads<'a, T> {
    pub mlm_logits: Option<&'a [T]>,
    pub pooled: Option<&'a [T]>,
    pub sequence: Option<&'a [T]>,
}

fn dropout_mask<T: Real>(len: usize, p: f64, mode: Mode, site: u64) -> Option<Vec<T>> {
    let Mode::Train { seed } = mode else {
        return None;
    };
    if p <= 0.0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(site);
    let keep = T::lit(1.0 / (1.0 - p));
    Some(
        (0..len)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect(),
    )
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

struct AttentionDims {
    batch: usize,
    seq: usize,
    hidden: usize,
    heads: usize,
}

impl AttentionDims {
    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Scaled dot-product attention over all (example, head) blocks.
/// Masked key columns get an additive `-inf` before the softmax.
fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    key_mask: &[bool],
    dims: &AttentionDims,
    probs_drop: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let (b_n, l, h, nh) = (dims.batch, dims.seq, dims.hidden, dims.heads);
    let dh = dims.head_dim();
    let scale = T::one() / T::lit(dh as f64).sqrt();

    let blocks: Vec<(Vec<T>, Vec<T>)> = (0..b_n * nh)
        .into_par_iter()
        .map(|bh| {
            let (b, hd) = (bh / nh, bh % nh);
            let row = |i: usize| b * l + i;
            let col0 = hd * dh;
            let mut probs = vec![T::zero(); l * l];
            for i in 0..l {
                let qi = &q[row(i) * h + col0..row(i) * h + col0 + dh];
                let prow = &mut probs[i * l..(i + 1) * l];
                let mut max = T::neg_infinity();
                for j in 0..l {
                    let s = if key_mask[row(j)] {
                        let kj = &k[row(j) * h + col0..row(j) * h + col0 + dh];
                        qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale
                    } else {
                        T::neg_infinity()
                    };
                    prow[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                if max == T::neg_infinity() {
                    prow.iter_mut().for_each(|p| *p = T::zero());
                    continue;
                }
                let mut total = T::zero();
                for p in prow.iter_mut() {
                    *p = (*p - max).exp();
                    total += *p;
                }
                for p in prow.iter_mut() {
                    *p /= total;
                }
            }
            let mut ctx = vec![T::zero(); l * dh];
            for i in 0..l {
                for j in 0..l {
                    let mut p = probs[i * l + j];
                    if let Some(dm) = probs_drop {
                        p *= dm[bh * l * l + i * l + j];
                    }
                    let vj = &v[row(j) * h + col0..row(j) * h + col0 + dh];
                    for (c, &vv) in ctx[i * dh..(i + 1) * dh].iter_mut().zip(vj) {
                        *c += p * vv;
                    }
                }
            }
            (probs, ctx)
        })
        .collect();

    let mut probs = Vec::with_capacity(b_n * nh * l * l);
    let mut ctx = vec![T::zero(); b_n * l * h];
    for (bh, (p, c)) in blocks.into_iter().enumerate() {
        let (b, hd) = (bh / nh, bh % nh);
        probs.extend(p);
        for i in 0..l {
            let dst = (b * l + i) * h + hd * dh;
            ctx[dst..dst + dh].copy_from_slice(&c[i * dh..(i + 1) * dh]);
        }
    }
    (probs, ctx)
}

/// Returns `(dq, dk, dv)`.
fn attention_backward<T: Real>(
    d_ctx: &[T],
    cache: &LayerCache<T>,
    dims: &AttentionDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b_n, l, h, nh) = (dims.batch, dims.seq, dims.hidden, dims.heads);
    let dh = dims.head_dim();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let (q, k, v) = (&cache.q, &cache.k, &cache.v);

    let blocks: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..b_n * nh)
        .into_par_iter()
        .map(|bh| {
            let b = bh / nh;
            let col0 = (bh % nh) * dh;
            let at = |m: &[T], i: usize, d: usize| m[(b * l + i) * h + col0 + d];
            let probs = &cache.probs[bh * l * l..(bh + 1) * l * l];
            let drop = cache.probs_drop.as_ref().map(|m| &m[bh * l * l..(bh + 1) * l * l]);

            let mut dq = vec![T::zero(); l * dh];
            let mut dk = vec![T::zero(); l * dh];
            let mut dv = vec![T::zero(); l * dh];
            let mut d_s = vec![T::zero(); l];
            for i in 0..l {
                // d(probs after dropout) for row i, then through the dropout mask
                for j in 0..l {
                    let mut dp = T::zero();
                    for d in 0..dh {
                        dp += at(d_ctx, i, d) * at(v, j, d);
                    }
                    let keep = drop.map_or(T::one(), |m| m[i * l + j]);
                    let pd = probs[i * l + j] * keep;
                    for d in 0..dh {
                        dv[j * dh + d] += pd * at(d_ctx, i, d);
                    }
                    d_s[j] = dp * keep;
                }
                let dot: T = (0..l).map(|j| probs[i * l + j] * d_s[j]).sum();
                for j in 0..l {
                    let ds = probs[i * l + j] * (d_s[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for d in 0..dh {
                        dq[i * dh + d] += ds * at(k, j, d);
                        dk[j * dh + d] += ds * at(q, i, d);
                    }
                }
            }
            (dq, dk, dv)
        })
        .collect();

    let mut dq = vec![T::zero(); b_n * l * h];
    let mut dk = vec![T::zero(); b_n * l * h];
    let mut dv = vec![T::zero(); b_n * l * h];
    for (bh, (bq, bk, bv)) in blocks.into_iter().enumerate() {
        let (b, hd) = (bh / nh, bh % nh);
        for i in 0..l {
            let dst = (b * l + i) * h + hd * dh;
            let src = i * dh..(i + 1) * dh;
            dq[dst..dst + dh].copy_from_slice(&bq[src.clone()]);
            dk[dst..dst + dh].copy_from_slice(&bk[src.clone()]);
            dv[dst..dst + dh].copy_from_slice(&bv[src]);
        }
    }
    (dq, dk, dv)
}

/// Dropout sites: 0 = embeddings, then three per layer.
fn site(layer: usize, which: u64) -> u64 {
    1 + 3 * layer as u64 + which
}

impl<T: Real> Model<T> {
    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let n = batch.batch_size * batch.seq_len;
        let c = &self.config;
        if batch.token_ids.len() != n
            || batch.position_ids.len() != n
            || batch.segment_ids.len() != n
            || batch.attention_mask.len() != n
            || batch.mlm_labels.len() != n
        {
            return Err(Error::Shape("batch arrays are not batch_size x seq_len".into()));
        }
        if let Some(&t) = batch.token_ids.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::Shape(format!("token id {t} >= vocab_size {}", c.vocab_size)));
        }
        if let Some(&p) = batch.position_ids.iter().find(|&&p| p as usize >= c.max_positions) {
            return Err(Error::Shape(format!(
                "position {p} >= max_positions {}",
                c.max_positions
            )));
        }
        if let Some(&s) = batch.segment_ids.iter().find(|&&s| s as usize >= c.num_segments) {
            return Err(Error::Shape(format!(
                "segment {s} >= num_segments {}",
                c.num_segments
            )));
        }
        Ok(())
    }

    fn dims(&self, batch: &Batch) -> AttentionDims {
        AttentionDims {
            batch: batch.batch_size,
            seq: batch.seq_len,
            hidden: self.config.hidden_size,
            heads: self.config.num_heads,
        }
    }

    pub fn forward(&self, batch: &Batch, mode: Mode, mlm: MlmRows) -> Result<ForwardOutput<T>> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let p = &self.params;
        let (h, f) = (cfg.hidden_size, cfg.ff_size);
        let n = batch.batch_size * batch.seq_len;
        let dims = self.dims(batch);
        let key_mask: Vec<bool> = batch.attention_mask.iter().map(|&m| m != 0).collect();
        let drop_p = cfg.dropout_prob;

        let word = p.data("embeddings.word.weight");
        let pos = p.data("embeddings.position.weight");
        let seg = p.data("embeddings.segment.weight");
        let mut e = vec![T::zero(); n * h];
        for r in 0..n {
            let (t, ps, sg) = (
                batch.token_ids[r] as usize,
                batch.position_ids[r] as usize,
                batch.segment_ids[r] as usize,
            );
            let dst = &mut e[r * h..(r + 1) * h];
            for j in 0..h {
                dst[j] = word[t * h + j] + pos[ps * h + j] + seg[sg * h + j];
            }
        }
        let (mut x, emb_ln) = layer_norm(
            &e,
            p.data("embeddings.layer_norm.gain"),
            p.data("embeddings.layer_norm.bias"),
            cfg.layer_norm_eps,
        );
        let emb_drop = dropout_mask(n * h, drop_p, mode, 0);
        apply_mask(&mut x, &emb_drop);

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for li in 0..cfg.num_layers {
            let pre = layer_prefix(li);
            let w = |s: &str| p.data(&format!("{pre}{s}"));
            let q = linear(&x, w("attention.query.weight"), w("attention.query.bias"), n, h, h);
            let k = linear(&x, w("attention.key.weight"), w("attention.key.bias"), n, h, h);
            let v = linear(&x, w("attention.value.weight"), w("attention.value.bias"), n, h, h);
            let probs_len = batch.batch_size * cfg.num_heads * batch.seq_len * batch.seq_len;
            let probs_drop = dropout_mask(probs_len, drop_p, mode, site(li, 0));
            let (probs, ctx) =
                attention_forward(&q, &k, &v, &key_mask, &dims, probs_drop.as_deref());
            let mut a = linear(&ctx, w("attention.output.weight"), w("attention.output.bias"), n, h, h);
            let attn_drop = dropout_mask(n * h, drop_p, mode, site(li, 1));
            apply_mask(&mut a, &attn_drop);
            add_assign(&mut a, &x);
            let (h1, ln1) = layer_norm(
                &a,
                w("attention.layer_norm.gain"),
                w("attention.layer_norm.bias"),
                cfg.layer_norm_eps,
            );
            let f1 = linear(&h1, w("ffn.intermediate.weight"), w("ffn.intermediate.bias"), n, h, f);
            let g: Vec<T> = f1.iter().map(|&v| gelu(v)).collect();
            let mut f2 = linear(&g, w("ffn.output.weight"), w("ffn.output.bias"), n, f, h);
            let ffn_drop = dropout_mask(n * h, drop_p, mode, site(li, 2));
            apply_mask(&mut f2, &ffn_drop);
            add_assign(&mut f2, &h1);
            let (out, ln2) = layer_norm(
                &f2,
                w("ffn.layer_norm.gain"),
                w("ffn.layer_norm.bias"),
                cfg.layer_norm_eps,
            );
            layers.push(LayerCache {
                x: std::mem::replace(&mut x, out),
                q,
                k,
                v,
                probs,
                probs_drop,
                ctx,
                attn_drop,
                ln1,
                h1,
                f1,
                g,
                ffn_drop,
                ln2,
            });
        }
        let sequence = x;

        // pooler on [CLS] (first position of each example)
        let mut h_cls = Vec::with_capacity(batch.batch_size * h);
        for b in 0..batch.batch_size {
            let r = b * batch.seq_len;
            h_cls.extend_from_slice(&sequence[r * h..(r + 1) * h]);
        }
        let pooled: Vec<T> = linear(
            &h_cls,
            p.data("pooler.dense.weight"),
            p.data("pooler.dense.bias"),
            batch.batch_size,
            h,
            h,
        )
        .into_iter()
        .map(|v| v.tanh())
        .collect();

        let mlm_rows: Vec<usize> = match mlm {
            MlmRows::None => Vec::new(),
            MlmRows::All => (0..n).collect(),
            MlmRows::Labeled => batch.labeled_positions(),
            MlmRows::Rows(r) => {
                if let Some(&bad) = r.iter().find(|&&i| i >= n) {
                    return Err(Error::Shape(format!("mlm row {bad} >= {n}")));
                }
                r
            }
        };
        let (mlm_logits, mlm_cache) = if mlm_rows.is_empty() {
            (Vec::new(), None)
        } else {
            let r = mlm_rows.len();
            let mut h_rows = Vec::with_capacity(r * h);
            for &i in &mlm_rows {
                h_rows.extend_from_slice(&sequence[i * h..(i + 1) * h]);
            }
            let t = linear(
                &h_rows,
                p.data("mlm.transform.weight"),
                p.data("mlm.transform.bias"),
                r,
                h,
                h,
            );
            let u: Vec<T> = t.iter().map(|&v| gelu(v)).collect();
            let (z, ln) = layer_norm(
                &u,
                p.data("mlm.layer_norm.gain"),
                p.data("mlm.layer_norm.bias"),
                cfg.layer_norm_eps,
            );
            let mut logits = matmul_nt(&z, word, r, h, cfg.vocab_size);
            super::tensor::add_row_bias(&mut logits, p.data("mlm.output.bias"));
            (logits, Some(MlmCache { h_rows, t, ln, z }))
        };

        Ok(ForwardOutput {
            sequence,
            pooled,
            mlm_rows: mlm_rows.clone(),
            mlm_logits,
            cache: ForwardCache {
                batch_size: batch.batch_size,
                seq_len: batch.seq_len,
                tokens: batch.token_ids.clone(),
                positions: batch.position_ids.clone(),
                segments: batch.segment_ids.clone(),
                emb_ln,
                emb_drop,
                layers,
                h_cls,
                mlm_rows,
                mlm: mlm_cache,
            },
        })
    }

    /// Exact gradients of every encoder parameter given upstream gradients
    /// of the forward outputs. Parameters a loss does not reach get zeros.
    pub fn backward(&self, out: &ForwardOutput<T>, grads: OutputGrads<'_, T>) -> Result<Params<T>> {
        let cache = &out.cache;
        let cfg = &self.config;
        let p = &self.params;
        let (h, f) = (cfg.hidden_size, cfg.ff_size);
        let (b_n, l) = (cache.batch_size, cache.seq_len);
        let n = b_n * l;
        if cache.layers.len() != cfg.num_layers {
            return Err(Error::Shape("forward cache does not match this model".into()));
        }
        let dims = AttentionDims {
            batch: b_n,
            seq: l,
            hidden: h,
            heads: cfg.num_heads,
        };
        let mut g = p.zeros_like();

        let mut d_x = match grads.sequence {
            Some(ds) => {
                if ds.len() != n * h {
                    return Err(Error::Shape("sequence gradient has wrong length".into()));
                }
                ds.to_vec()
            }
            None => vec![T::zero(); n * h],
        };

        if let Some(d_logits) = grads.mlm_logits {
            let r = cache.mlm_rows.len();
            let mc = cache
                .mlm
                .as_ref()
                .ok_or_else(|| Error::Shape("forward ran without MLM rows".into()))?;
            if d_logits.len() != r * cfg.vocab_size {
                return Err(Error::Shape("mlm logit gradient has wrong length".into()));
            }
            let word = p.data("embeddings.word.weight");
            let mut d_bias = vec![T::zero(); cfg.vocab_size];
            super::tensor::accumulate_column_sums(d_logits, cfg.vocab_size, &mut d_bias);
            g.accumulate("mlm.output.bias", &d_bias);
            g.accumulate(
                "embeddings.word.weight",
                &matmul_tn(d_logits, &mc.z, r, cfg.vocab_size, h),
            );
            let d_z = matmul(d_logits, word, r, cfg.vocab_size, h);
            let (mut d_gain, mut d_b) = (vec![T::zero(); h], vec![T::zero(); h]);
            let d_u = layer_norm_backward(&d_z, &mc.ln, p.data("mlm.layer_norm.gain"), &mut d_gain, &mut d_b);
            g.accumulate("mlm.layer_norm.gain", &d_gain);
            g.accumulate("mlm.layer_norm.bias", &d_b);
            let d_t: Vec<T> = d_u.iter().zip(&mc.t).map(|(&d, &t)| d * gelu_grad(t)).collect();
            let (mut dw, mut db) = (vec![T::zero(); h * h], vec![T::zero(); h]);
            let d_rows = linear_backward(&mc.h_rows, p.data("mlm.transform.weight"), &d_t, r, h, h, &mut dw, &mut db);
            g.accumulate("mlm.transform.weight", &dw);
            g.accumulate("mlm.transform.bias", &db);
            for (k, &row) in cache.mlm_rows.iter().enumerate() {
                add_assign(&mut d_x[row * h..(row + 1) * h], &d_rows[k * h..(k + 1) * h]);
            }
        }

        if let Some(d_pooled) = grads.pooled {
            if d_pooled.len() != b_n * h {
                return Err(Error::Shape("pooled gradient has wrong length".into()));
            }
            let d_pre: Vec<T> = d_pooled
                .iter()
                .zip(&out.pooled)
                .map(|(&d, &y)| d * (T::one() - y * y))
                .collect();
            let (mut dw, mut db) = (vec![T::zero(); h * h], vec![T::zero(); h]);
            let d_cls = linear_backward(&cache.h_cls, p.data("pooler.dense.weight"), &d_pre, b_n, h, h, &mut dw, &mut db);
            g.accumulate("pooler.dense.weight", &dw);
            g.accumulate("pooler.dense.bias", &db);
            for b in 0..b_n {
                let row = b * l;
                add_assign(&mut d_x[row * h..(row + 1) * h], &d_cls[b * h..(b + 1) * h]);
            }
        }

        for li in (0..cfg.num_layers).rev() {
            let lc = &cache.layers[li];
            let pre = layer_prefix(li);
            let name = |s: &str| format!("{pre}{s}");
            let w = |s: &str| p.data(&name(s));

            let (mut dg2, mut db2) = (vec![T::zero(); h], vec![T::zero(); h]);
            let d_r2 = layer_norm_backward(&d_x, &lc.ln2, w("ffn.layer_norm.gain"), &mut dg2, &mut db2);
            g.accumulate(&name("ffn.layer_norm.gain"), &dg2);
            g.accumulate(&name("ffn.layer_norm.bias"), &db2);

            let mut d_h1 = d_r2.clone();
            let mut d_f2 = d_r2;
            apply_mask(&mut d_f2, &lc.ffn_drop);
            let (mut dw, mut db) = (vec![T::zero(); f * h], vec![T::zero(); h]);
            let d_g = linear_backward(&lc.g, w("ffn.output.weight"), &d_f2, n, f, h, &mut dw, &mut db);
            g.accumulate(&name("ffn.output.weight"), &dw);
            g.accumulate(&name("ffn.output.bias"), &db);
            let d_f1: Vec<T> = d_g.iter().zip(&lc.f1).map(|(&d, &x)| d * gelu_grad(x)).collect();
            let (mut dw, mut db) = (vec![T::zero(); h * f], vec![T::zero(); f]);
            let d_h1_ffn = linear_backward(&lc.h1, w("ffn.intermediate.weight"), &d_f1, n, h, f, &mut dw, &mut db);
            g.accumulate(&name("ffn.intermediate.weight"), &dw);
            g.accumulate(&name("ffn.intermediate.bias"), &db);
            add_assign(&mut d_h1, &d_h1_ffn);

            let (mut dg1, mut db1) = (vec![T::zero(); h], vec![T::zero(); h]);
            let d_r1 = layer_norm_backward(&d_h1, &lc.ln1, w("attention.layer_norm.gain"), &mut dg1, &mut db1);
            g.accumulate(&name("attention.layer_norm.gain"), &dg1);
            g.accumulate(&name("attention.layer_norm.bias"), &db1);

            let mut d_in = d_r1.clone();
            let mut d_a = d_r1;
            apply_mask(&mut d_a, &lc.attn_drop);
            let (mut dw, mut db) = (vec![T::zero(); h * h], vec![T::zero(); h]);
            let d_ctx = linear_backward(&lc.ctx, w("attention.output.weight"), &d_a, n, h, h, &mut dw, &mut db);
            g.accumulate(&name("attention.output.weight"), &dw);
            g.accumulate(&name("attention.output.bias"), &db);

            let (dq, dk, dv) = attention_backward(&d_ctx, lc, &dims);
            for (m, dm) in [("query", &dq), ("key", &dk), ("value", &dv)] {
                let (mut dw, mut db) = (vec![T::zero(); h * h], vec![T::zero(); h]);
                let dx = linear_backward(&lc.x, w(&format!("attention.{m}.weight")), dm, n, h, h, &mut dw, &mut db);
                g.accumulate(&name(&format!("attention.{m}.weight")), &dw);
                g.accumulate(&name(&format!("attention.{m}.bias")), &db);
                add_assign(&mut d_in, &dx);
            }
            d_x = d_in;
        }

        apply_mask(&mut d_x, &cache.emb_drop);
        let (mut dge, mut dbe) = (vec![T::zero(); h], vec![T::zero(); h]);
        let d_e = layer_norm_backward(&d_x, &cache.emb_ln, p.data("embeddings.layer_norm.gain"), &mut dge, &mut dbe);
        g.accumulate("embeddings.layer_norm.gain", &dge);
        g.accumulate("embeddings.layer_norm.bias", &dbe);

        let mut d_word = vec![T::zero(); cfg.vocab_size * h];
        let mut d_pos = vec![T::zero(); cfg.max_positions * h];
        let mut d_seg = vec![T::zero(); cfg.num_segments * h];
        for r in 0..n {
            let src = &d_e[r * h..(r + 1) * h];
            let t = cache.tokens[r] as usize;
            let ps = cache.positions[r] as usize;
            let sg = cache.segments[r] as usize;
            add_assign(&mut d_word[t * h..(t + 1) * h], src);
            add_assign(&mut d_pos[ps * h..(ps + 1) * h], src);
            add_assign(&mut d_seg[sg * h..(sg + 1) * h], src);
        }
        g.accumulate("embeddings.word.weight", &d_word);
        g.accumulate("embeddings.position.weight", &d_pos);
        g.accumulate("embeddings.segment.weight", &d_seg);
        Ok(g)
    }
}
