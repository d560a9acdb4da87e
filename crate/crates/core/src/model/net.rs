//! Forward and backward kernels for the toy transformer.
//!
//! The inference path (`forward_logits`) runs on already-merged weights.
//! The training path (`train_pass`) keeps the LoRA factors as a separate
//! branch on each targeted projection so dropout can hit only the adapter
//! activations and gradients can be taken with respect to the factors
//! alone; the base stays frozen. Backward propagates activation gradients
//! through every block but materializes parameter gradients only for the
//! A/B factors.

use std::collections::BTreeMap;

use crate::rng::Rng;
use crate::tensor::{matmul, Matrix};

use super::{tokenizer, ModelConfig};

const NORM_EPS: f64 = 1e-5;

/// Trainable factors of one targeted projection.
#[derive(Debug, Clone)]
pub(super) struct LoraFactors {
    /// d_out x r
    pub a: Matrix,
    /// r x d_in
    pub b: Matrix,
    /// alpha / rank
    pub scaling: f64,
}

#[derive(Debug, Clone, Default)]
pub(super) struct LoraTensors {
    pub modules: BTreeMap<String, LoraFactors>,
}

/// Gradients w.r.t. the A and B factors, keyed like the state.
#[derive(Debug, Default)]
pub(super) struct LoraGrads {
    pub modules: BTreeMap<String, (Matrix, Matrix)>,
}

// ---- kernels ----

/// `x (n x k)` times `w (m x k)` transposed -> `n x m`.
fn linear_nt(x: &Matrix, w: &Matrix) -> Matrix {
    let (n, k) = x.shape();
    let (m, k2) = w.shape();
    debug_assert_eq!(k, k2, "linear_nt inner dims");
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let xr = x.row(i);
        for o in 0..m {
            let wr = w.row(o);
            let mut acc = 0.0;
            for j in 0..k {
                acc += xr[j] * wr[j];
            }
            out.set(i, o, acc);
        }
    }
    out
}

/// `a (n x m)` transposed times `b (n x k)` -> `m x k`.
fn mat_tn(a: &Matrix, b: &Matrix) -> Matrix {
    let (n, m) = a.shape();
    let (n2, k) = b.shape();
    debug_assert_eq!(n, n2, "mat_tn outer dims");
    let mut out = Matrix::zeros(m, k);
    for i in 0..n {
        let ar = a.row(i);
        let br = b.row(i);
        for p in 0..m {
            let av = ar[p];
            if av == 0.0 {
                continue;
            }
            for q in 0..k {
                let cur = out.get(p, q);
                out.set(p, q, cur + av * br[q]);
            }
        }
    }
    out
}

fn mat_nn(a: &Matrix, b: &Matrix) -> Matrix {
    matmul(a, b).expect("internal shapes agree")
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    debug_assert_eq!(dst.shape(), src.shape());
    let (rows, cols) = dst.shape();
    for r in 0..rows {
        for c in 0..cols {
            let v = dst.get(r, c) + src.get(r, c);
            dst.set(r, c, v);
        }
    }
}

/// RMS norm with a frozen per-channel gain; returns the output and the
/// per-row inverse RMS needed by the backward pass.
fn norm_forward(x: &Matrix, gain: &Matrix) -> (Matrix, Vec<f64>) {
    let (rows, cols) = x.shape();
    let g = gain.row(0);
    let mut out = Matrix::zeros(rows, cols);
    let mut ri = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = x.row(r);
        let ms: f64 = xr.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        ri.push(inv);
        for c in 0..cols {
            out.set(r, c, g[c] * xr[c] * inv);
        }
    }
    (out, ri)
}

fn norm_backward(dy: &Matrix, x: &Matrix, gain: &Matrix, ri: &[f64]) -> Matrix {
    let (rows, cols) = x.shape();
    let g = gain.row(0);
    let mut dx = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let inv = ri[r];
        // du = dy * gain; dx = inv*du - inv^3/n * (du . x) * x
        let mut dot = 0.0;
        for c in 0..cols {
            dot += dyr[c] * g[c] * xr[c];
        }
        let coef = inv * inv * inv * dot / cols as f64;
        for c in 0..cols {
            dx.set(r, c, inv * dyr[c] * g[c] - coef * xr[c]);
        }
    }
    dx
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Causal multi-head attention. Returns the context (seq x d) and the
/// per-head attention probabilities for backward.
fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    n_heads: usize,
) -> (Matrix, Vec<Matrix>) {
    let (seq, d) = q.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Matrix::zeros(seq, d);
    let mut all_probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let off = h * dh;
        let mut probs = Matrix::zeros(seq, seq);
        for i in 0..seq {
            let qi = &q.row(i)[off..off + dh];
            let mut scores = Vec::with_capacity(i + 1);
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k.row(j)[off..off + dh];
                let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(s);
                scores.push(s);
            }
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let p = s / denom;
                probs.set(i, j, p);
                let vj = &v.row(j)[off..off + dh];
                for c in 0..dh {
                    let cur = ctx.get(i, off + c);
                    ctx.set(i, off + c, cur + p * vj[c]);
                }
            }
        }
        all_probs.push(probs);
    }
    (ctx, all_probs)
}

fn attention_backward(
    g_ctx: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &[Matrix],
    n_heads: usize,
) -> (Matrix, Matrix, Matrix) {
    let (seq, d) = q.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Matrix::zeros(seq, d);
    let mut gk = Matrix::zeros(seq, d);
    let mut gv = Matrix::zeros(seq, d);
    for h in 0..n_heads {
        let off = h * dh;
        let p = &probs[h];
        for i in 0..seq {
            let gci = &g_ctx.row(i)[off..off + dh];
            // g_probs over j <= i, then softmax backward on the row
            let mut g_probs = Vec::with_capacity(i + 1);
            let mut inner = 0.0;
            for j in 0..=i {
                let vj = &v.row(j)[off..off + dh];
                let gp: f64 = gci.iter().zip(vj).map(|(a, b)| a * b).sum();
                inner += gp * p.get(i, j);
                g_probs.push(gp);
            }
            for (j, gp) in g_probs.iter().enumerate() {
                let pij = p.get(i, j);
                // dL/dV_j
                for c in 0..dh {
                    let cur = gv.get(j, off + c);
                    gv.set(j, off + c, cur + pij * gci[c]);
                }
                let gs = pij * (gp - inner) * scale;
                if gs == 0.0 {
                    continue;
                }
                let kj = &k.row(j)[off..off + dh];
                let qi = &q.row(i)[off..off + dh];
                for c in 0..dh {
                    let cur_q = gq.get(i, off + c);
                    gq.set(i, off + c, cur_q + gs * kj[c]);
                    let cur_k = gk.get(j, off + c);
                    gk.set(j, off + c, cur_k + gs * qi[c]);
                }
            }
        }
    }
    (gq, gk, gv)
}

fn embed(cfg: &ModelConfig, tensors: &BTreeMap<String, Matrix>, tokens: &[usize]) -> Matrix {
    let tok = &tensors["embed.tok"];
    let pos = &tensors["embed.pos"];
    let mut x = Matrix::zeros(tokens.len(), cfg.d_model);
    for (i, &t) in tokens.iter().enumerate() {
        let te = tok.row(t);
        let pe = pos.row(i);
        for c in 0..cfg.d_model {
            x.set(i, c, te[c] + pe[c]);
        }
    }
    x
}

/// Numerically stable negative log-likelihood of `target` in one logits
/// row.
pub(super) fn row_nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - row[target]
}

/// Inference forward on effective (already merged) weights.
pub(super) fn forward_logits(
    cfg: &ModelConfig,
    tensors: &BTreeMap<String, Matrix>,
    tokens: &[usize],
) -> Matrix {
    let mut x = embed(cfg, tensors, tokens);
    for layer in 0..cfg.n_layers {
        let (h1, _) = norm_forward(&x, &tensors[&format!("layer{layer}.norm.attn")]);
        let q = linear_nt(&h1, &tensors[&format!("layer{layer}.attn.q_proj")]);
        let k = linear_nt(&h1, &tensors[&format!("layer{layer}.attn.k_proj")]);
        let v = linear_nt(&h1, &tensors[&format!("layer{layer}.attn.v_proj")]);
        let (ctx, _) = attention_forward(&q, &k, &v, cfg.n_heads);
        let attn_out = linear_nt(&ctx, &tensors[&format!("layer{layer}.attn.o_proj")]);
        add_into(&mut x, &attn_out);

        let (h2, _) = norm_forward(&x, &tensors[&format!("layer{layer}.norm.mlp")]);
        let pre = linear_nt(&h2, &tensors[&format!("layer{layer}.mlp.fc1")]);
        let mut act = pre.clone();
        for v in act.data_mut() {
            *v = silu(*v);
        }
        let mlp_out = linear_nt(&act, &tensors[&format!("layer{layer}.mlp.fc2")]);
        add_into(&mut x, &mlp_out);
    }
    let (hf, _) = norm_forward(&x, &tensors["norm.final"]);
    linear_nt(&hf, &tensors["unembed"])
}

struct ProjCache {
    /// dense (alpha/rank)-scaled adapter delta, d_out x d_in
    delta: Option<Matrix>,
    /// dropout keep mask scaled by 1/(1-p), present only while training
    /// with dropout
    mask: Option<Matrix>,
}

struct LayerCache {
    x_in: Matrix,
    h1: Matrix,
    ri1: Vec<f64>,
    proj: [ProjCache; 3],
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    x_mid: Matrix,
    ri2: Vec<f64>,
    pre: Matrix,
}

/// One LM training pass over `tokens` (positions `0..n-1` predict
/// `1..n`). Returns the mean cross-entropy and, when `want_grads`, the
/// gradients of the LoRA factors. `dropout` carries the drop probability
/// and the RNG that draws the per-step masks; pass `None` to disable it
/// (inference-equivalent path, used by the finite-difference checks).
pub(super) fn train_pass(
    cfg: &ModelConfig,
    tensors: &BTreeMap<String, Matrix>,
    lora: &LoraTensors,
    tokens: &[usize],
    mut dropout: Option<(f64, &mut Rng)>,
    want_grads: bool,
) -> (f64, LoraGrads) {
    debug_assert!(tokens.len() >= 2, "need at least one (input, target) pair");
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    let n = inputs.len();

    let mut x = embed(cfg, tensors, inputs);
    let mut caches: Vec<LayerCache> = Vec::with_capacity(cfg.n_layers);

    for layer in 0..cfg.n_layers {
        let x_in = x.clone();
        let (h1, ri1) = norm_forward(&x, &tensors[&format!("layer{layer}.norm.attn")]);

        let mut proj_caches = Vec::with_capacity(3);
        let mut outs = Vec::with_capacity(3);
        for proj in ["q_proj", "k_proj", "v_proj"] {
            let module = format!("layer{layer}.attn.{proj}");
            let mut out = linear_nt(&h1, &tensors[&module]);
            let mut cache = ProjCache {
                delta: None,
                mask: None,
            };
            if let Some(factors) = lora.modules.get(&module) {
                let delta = mat_nn(&factors.a.scale(factors.scaling), &factors.b);
                let mut branch = linear_nt(&h1, &delta);
                if let Some((p, rng)) = dropout.as_mut() {
                    if *p > 0.0 {
                        let keep = 1.0 - *p;
                        let mut mask = Matrix::zeros(branch.rows(), branch.cols());
                        for r in 0..mask.rows() {
                            for c in 0..mask.cols() {
                                if rng.next_f64() >= *p {
                                    mask.set(r, c, 1.0 / keep);
                                }
                            }
                        }
                        branch = branch.hadamard(&mask).expect("same shape");
                        cache.mask = Some(mask);
                    }
                }
                add_into(&mut out, &branch);
                cache.delta = Some(delta);
            }
            proj_caches.push(cache);
            outs.push(out);
        }
        let v = outs.pop().expect("three projections");
        let k = outs.pop().expect("three projections");
        let q = outs.pop().expect("three projections");

        let (ctx, probs) = attention_forward(&q, &k, &v, cfg.n_heads);
        let attn_out = linear_nt(&ctx, &tensors[&format!("layer{layer}.attn.o_proj")]);
        add_into(&mut x, &attn_out);
        let x_mid = x.clone();

        let (h2, ri2) = norm_forward(&x, &tensors[&format!("layer{layer}.norm.mlp")]);
        let pre = linear_nt(&h2, &tensors[&format!("layer{layer}.mlp.fc1")]);
        let mut act = pre.clone();
        for value in act.data_mut() {
            *value = silu(*value);
        }
        let mlp_out = linear_nt(&act, &tensors[&format!("layer{layer}.mlp.fc2")]);
        add_into(&mut x, &mlp_out);

        let proj: [ProjCache; 3] = proj_caches
            .try_into()
            .unwrap_or_else(|_| unreachable!("exactly three projections"));
        caches.push(LayerCache {
            x_in,
            h1,
            ri1,
            proj,
            q,
            k,
            v,
            probs,
            x_mid,
            ri2,
            pre,
        });
    }

    let x_final = x.clone();
    let (hf, rif) = norm_forward(&x, &tensors["norm.final"]);
    let logits = linear_nt(&hf, &tensors["unembed"]);

    let mut loss = 0.0;
    for (row, &target) in targets.iter().enumerate() {
        loss += row_nll(logits.row(row), target);
    }
    loss /= n as f64;

    if !want_grads {
        return (loss, LoraGrads::default());
    }

    // dL/dlogits = (softmax - onehot) / n
    let mut dlogits = Matrix::zeros(n, cfg.vocab_size);
    for (row, &target) in targets.iter().enumerate() {
        let lr = logits.row(row);
        let max = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = lr.iter().map(|v| (v - max).exp()).sum();
        for c in 0..cfg.vocab_size {
            let p = (lr[c] - max).exp() / denom;
            let onehot = if c == target { 1.0 } else { 0.0 };
            dlogits.set(row, c, (p - onehot) / n as f64);
        }
    }

    let g_hf = mat_nn(&dlogits, &tensors["unembed"]);
    let mut g_x = norm_backward(&g_hf, &x_final, &tensors["norm.final"], &rif);

    let mut grads = LoraGrads::default();
    for layer in (0..cfg.n_layers).rev() {
        let cache = &caches[layer];

        // x_out = x_mid + silu(h2 W1^T) W2^T
        let mut g_x_mid = g_x.clone();
        let g_act = mat_nn(&g_x, &tensors[&format!("layer{layer}.mlp.fc2")]);
        let mut g_pre = g_act.clone();
        for (gp, pre_v) in g_pre.data_mut().iter_mut().zip(cache.pre.data()) {
            *gp *= silu_grad(*pre_v);
        }
        let g_h2 = mat_nn(&g_pre, &tensors[&format!("layer{layer}.mlp.fc1")]);
        let g_from_norm2 = norm_backward(
            &g_h2,
            &cache.x_mid,
            &tensors[&format!("layer{layer}.norm.mlp")],
            &cache.ri2,
        );
        add_into(&mut g_x_mid, &g_from_norm2);

        // x_mid = x_in + ctx Wo^T
        let mut g_x_in = g_x_mid.clone();
        let g_ctx = mat_nn(&g_x_mid, &tensors[&format!("layer{layer}.attn.o_proj")]);
        let (gq, gk, gv) =
            attention_backward(&g_ctx, &cache.q, &cache.k, &cache.v, &cache.probs, cfg.n_heads);

        let mut g_h1 = Matrix::zeros(n, cfg.d_model);
        for (idx, (proj, g_proj)) in ["q_proj", "k_proj", "v_proj"]
            .iter()
            .zip([&gq, &gk, &gv])
            .enumerate()
        {
            let module = format!("layer{layer}.attn.{proj}");
            add_into(&mut g_h1, &mat_nn(g_proj, &tensors[&module]));
            if let Some(factors) = lora.modules.get(&module) {
                let cache_p = &cache.proj[idx];
                let delta = cache_p.delta.as_ref().expect("delta cached for lora module");
                let gm = match &cache_p.mask {
                    Some(mask) => g_proj.hadamard(mask).expect("same shape"),
                    None => (*g_proj).clone(),
                };
                let g_delta = mat_tn(&gm, &cache.h1);
                add_into(&mut g_h1, &mat_nn(&gm, delta));
                let ga = mat_nn(&g_delta, &factors.b.transpose()).scale(factors.scaling);
                let gb = mat_tn(&factors.a, &g_delta).scale(factors.scaling);
                match grads.modules.get_mut(&module) {
                    Some((acc_a, acc_b)) => {
                        add_into(acc_a, &ga);
                        add_into(acc_b, &gb);
                    }
                    None => {
                        grads.modules.insert(module.clone(), (ga, gb));
                    }
                }
            }
        }
        let g_from_norm1 = norm_backward(
            &g_h1,
            &cache.x_in,
            &tensors[&format!("layer{layer}.norm.attn")],
            &cache.ri1,
        );
        add_into(&mut g_x_in, &g_from_norm1);
        g_x = g_x_in;
    }

    (loss, grads)
}

/// Build the full token sequence a language-model pass trains on.
pub(super) fn lm_tokens(cfg: &ModelConfig, text: &str) -> Result<Vec<usize>, super::ModelError> {
    let mut tokens = vec![tokenizer::BOS];
    tokens.extend(tokenizer::encode(text)?);
    tokens.push(tokenizer::EOS);
    if tokens.len() < 2 {
        return Err(super::ModelError::ExampleTooShort);
    }
    if tokens.len() > cfg.max_seq_len + 1 {
        // inputs use n-1 positions, so one extra token still fits
        return Err(super::ModelError::TooLong {
            len: tokens.len(),
            max: cfg.max_seq_len + 1,
        });
    }
    Ok(tokens)
}
