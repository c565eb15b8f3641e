//! Snippet embedding (self-attention over time) and prompt-augmented text
//! embedding with a learned background row.

use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, TextMode};
use crate::error::{Error, Result};
use crate::nn::{Bound, EncoderLayer, Init, Layout, Linear, MultiHeadAttention, ParamGroup, ParamId};
use crate::tensor::{lit, Real, Tensor};

/// Sinusoidal position table, `t_len x dim`.
pub fn sinusoidal_positions<T: Real>(t_len: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(t_len, dim, |t, c| {
        let i = (c / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
        lit(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Input projection followed by pre-norm transformer layers over snippets.
#[derive(Debug, Clone)]
pub struct VideoEncoder {
    pub proj: Linear,
    pub layers: Vec<EncoderLayer>,
    pub positional: bool,
    pub input_dim: usize,
    pub dim: usize,
}

impl VideoEncoder {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig, input_dim: usize) -> Self {
        let c = cfg.embed_dim;
        let mut s = init.with_group(ParamGroup::VideoEncoder, "video");
        let proj = Linear::new(&mut s, "proj", input_dim, c, Layout::TokenRows);
        let layers = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("layer{i}"), c, cfg.heads, c * cfg.ffn_ratio))
            .collect();
        Self {
            proj,
            layers,
            positional: cfg.positional_encoding,
            input_dim,
            dim: c,
        }
    }

    /// `e` is `C_in x T`; returns the snippet embedding token-major, `T x C`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, e: Var) -> Result<Var> {
        let (c_in, t_len) = g.shape(e);
        if c_in != self.input_dim {
            return Err(Error::Shape(format!(
                "features have {c_in} rows, encoder expects {}",
                self.input_dim
            )));
        }
        let tokens = g.transpose(e);
        let mut x = self.proj.forward(g, p, tokens);
        if self.positional {
            let pe = g.constant(sinusoidal_positions(t_len, self.dim));
            x = g.add(x, pe);
        }
        for layer in &self.layers {
            x = layer.forward(g, p, x, None);
        }
        Ok(x)
    }
}

/// Scaled dot-product attention per head over already-projected `q, k, v`.
fn attend<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Var {
    let d = g.shape(q).1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let s = g.matmul_t(qh, false, kh, true);
            let s = g.scale(s, scale);
            let a = g.softmax_rows_masked(s, mask);
            g.matmul(a, vh)
        })
        .collect();
    if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// Attention of each class row over the shared contexts plus itself: the
/// last position of a causal pass over `[contexts; class]`.
fn attend_final<T: Real>(
    g: &mut Graph<T>,
    (q, k_self, v_self): (Var, Var, Var),
    ctx: Option<(Var, Var)>,
    heads: usize,
) -> Var {
    let d = g.shape(q).1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let pick = |g: &mut Graph<T>, x: Var| {
            if heads == 1 {
                x
            } else {
                g.slice_cols(x, h * dh, dh)
            }
        };
        let qh = pick(g, q);
        let ksh = pick(g, k_self);
        let vsh = pick(g, v_self);
        let qk = g.mul(qh, ksh);
        let s_self = g.sum_cols(qk);
        let s_self = g.scale(s_self, scale);
        let out = match ctx {
            None => vsh,
            Some((kc, vc)) => {
                let kch = pick(g, kc);
                let vch = pick(g, vc);
                let s_ctx = g.matmul_t(qh, false, kch, true);
                let s_ctx = g.scale(s_ctx, scale);
                let n_ctx = g.shape(s_ctx).1;
                let s = g.concat_cols(&[s_ctx, s_self]);
                let a = g.softmax_rows(s);
                let a_ctx = g.slice_cols(a, 0, n_ctx);
                let a_self = g.slice_cols(a, n_ctx, 1);
                let from_ctx = g.matmul(a_ctx, vch);
                let from_self = g.mul_col(vsh, a_self);
                g.add(from_ctx, from_self)
            }
        };
        outs.push(out);
    }
    if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

/// Text side: learnable prompt contexts, a learnable background token and a
/// small causal transformer.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub mode: TextMode,
    pub contexts: Option<ParamId>,
    pub background: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub heads: usize,
    pub dim: usize,
    pub context_len: usize,
}

impl TextEncoder {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig, token_dim: usize) -> Result<Self> {
        if cfg.context_len + 1 > cfg.text_max_len {
            return Err(Error::Config(format!(
                "prompt of {} contexts plus a class token exceeds the maximum text length {}",
                cfg.context_len, cfg.text_max_len
            )));
        }
        if cfg.text_mode == TextMode::Transformer && !token_dim.is_multiple_of(cfg.text_heads) {
            return Err(Error::Config(format!(
                "token width {token_dim} is not divisible by {} text heads",
                cfg.text_heads
            )));
        }
        let mut prompt = init.with_group(ParamGroup::Prompt, "prompt");
        let contexts = (cfg.context_len > 0).then(|| prompt.normal("contexts", cfg.context_len, token_dim, 0.02));
        let background = prompt.normal("background", 1, token_dim, 0.02);
        let layers = match cfg.text_mode {
            TextMode::Transformer => {
                let mut s = init.with_group(ParamGroup::TextEncoder, "text");
                (0..cfg.text_layers)
                    .map(|i| {
                        EncoderLayer::new(
                            &mut s,
                            &format!("layer{i}"),
                            token_dim,
                            cfg.text_heads,
                            token_dim * cfg.ffn_ratio,
                        )
                    })
                    .collect()
            }
            TextMode::Additive => Vec::new(),
        };
        Ok(Self {
            mode: cfg.text_mode,
            contexts,
            background,
            layers,
            heads: cfg.text_heads,
            dim: token_dim,
            context_len: cfg.context_len,
        })
    }

    /// `tokens` is `K x C'`; returns `F_lan`, `(K+1) x C'` with the background last.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, tokens: Var) -> Result<Var> {
        let (k, d) = g.shape(tokens);
        if d != self.dim {
            return Err(Error::Shape(format!(
                "class tokens have width {d}, text encoder expects {}",
                self.dim
            )));
        }
        let bg = p[self.background];
        let mut cls = if k == 0 { bg } else { g.concat_rows(&[tokens, bg]) };
        let mut ctx = self.contexts.map(|id| p[id]);
        if self.mode == TextMode::Additive {
            if let Some(c) = ctx {
                let s = g.sum_rows(c);
                let mean = g.scale(s, 1.0 / self.context_len as f64);
                cls = g.add_row(cls, mean);
            }
            return Ok(cls);
        }
        let n_ctx = self.context_len;
        let n_cls = k + 1;
        let mask = causal_mask(n_ctx);
        for layer in &self.layers {
            let x = match ctx {
                Some(c) => g.concat_rows(&[c, cls]),
                None => cls,
            };
            let h = layer.ln_attn.forward(g, p, x);
            let attn: &MultiHeadAttention = &layer.attn;
            let q = attn.q.forward(g, p, h);
            let kk = attn.k.forward(g, p, h);
            let v = attn.v.forward(g, p, h);
            let split = |g: &mut Graph<T>, x: Var| {
                if n_ctx == 0 {
                    (None, x)
                } else {
                    (Some(g.slice_rows(x, 0, n_ctx)), g.slice_rows(x, n_ctx, n_cls))
                }
            };
            let (q_ctx, q_cls) = split(g, q);
            let (k_ctx, k_cls) = split(g, kk);
            let (v_ctx, v_cls) = split(g, v);
            let cls_heads = attend_final(g, (q_cls, k_cls, v_cls), k_ctx.zip(v_ctx), self.heads);
            let heads_out = match (q_ctx, k_ctx, v_ctx) {
                (Some(qc), Some(kc), Some(vc)) => {
                    let ctx_heads = attend(g, qc, kc, vc, self.heads, Some(&mask));
                    g.concat_rows(&[ctx_heads, cls_heads])
                }
                _ => cls_heads,
            };
            let a = attn.o.forward(g, p, heads_out);
            let x = g.add(x, a);
            let h = layer.ln_ffn.forward(g, p, x);
            let f = layer.ffn.forward(g, p, h);
            let x = g.add(x, f);
            let (c, rest) = split(g, x);
            ctx = c;
            cls = rest;
        }
        Ok(cls)
    }
}
