//! Parameter storage and the handful of layers the model is assembled from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::{lit, Real, Tensor};

/// Parameter groups; used for freezing and for per-group gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    VideoEncoder,
    TextEncoder,
    Prompt,
    MaskDecoder,
    CrossModal,
    Classifier,
    Localizer,
    Consistency,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::VideoEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::Prompt,
        ParamGroup::MaskDecoder,
        ParamGroup::CrossModal,
        ParamGroup::Classifier,
        ParamGroup::Localizer,
        ParamGroup::Consistency,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Put every parameter on the tape. Groups rejected by `trainable` become
    /// constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable(e.group) {
                    g.leaf(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a particular [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Initialization helper bound to a store, a group and a name prefix.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub group: ParamGroup,
    pub prefix: String,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, group: ParamGroup, prefix: &str) -> Self {
        Self {
            store,
            rng,
            group,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_, T> {
        let prefix = self.name(name);
        Init {
            store: self.store,
            rng: self.rng,
            group: self.group,
            prefix,
        }
    }

    pub fn with_group(&mut self, group: ParamGroup, name: &str) -> Init<'_, T> {
        let prefix = self.name(name);
        Init {
            store: self.store,
            rng: self.rng,
            group,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn normal(&mut self, leaf: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std.max(0.0)).expect("finite std");
        let t = Tensor::from_fn(rows, cols, |_, _| lit(dist.sample(self.rng)));
        self.store.add(self.name(leaf), self.group, t)
    }

    pub fn uniform(&mut self, leaf: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let t = Tensor::from_fn(rows, cols, |_, _| lit(self.rng.random_range(-bound..=bound)));
        self.store.add(self.name(leaf), self.group, t)
    }

    pub fn constant(&mut self, leaf: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store
            .add(self.name(leaf), self.group, Tensor::full(rows, cols, lit(v)))
    }
}

/// Which axis carries the features a [`Linear`] layer maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Tokens are rows: `x (n x in) -> x W + b`, `W: in x out`, `b: 1 x out`.
    TokenRows,
    /// Tokens are columns: `x (in x n) -> W x + b`, `W: out x in`, `b: out x 1`.
    TokenCols,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub layout: Layout,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, d_in: usize, d_out: usize, layout: Layout) -> Self {
        Self::with_bias(init, name, d_in, d_out, layout, true)
    }

    pub fn with_bias<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        layout: Layout,
        bias: bool,
    ) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let mut s = init.sub(name);
        let (w, b) = match layout {
            Layout::TokenRows => (
                s.uniform("weight", d_in, d_out, bound),
                bias.then(|| s.constant("bias", 1, d_out, 0.0)),
            ),
            Layout::TokenCols => (
                s.uniform("weight", d_out, d_in, bound),
                bias.then(|| s.constant("bias", d_out, 1, 0.0)),
            ),
        };
        Self {
            w,
            b,
            layout,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        match self.layout {
            Layout::TokenRows => {
                let y = g.matmul(x, p[self.w]);
                match self.b {
                    Some(b) => g.add_row(y, p[b]),
                    None => y,
                }
            }
            Layout::TokenCols => {
                let y = g.matmul(p[self.w], x);
                match self.b {
                    Some(b) => g.add_col(y, p[b]),
                    None => y,
                }
            }
        }
    }
}

/// Row-wise layer norm with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, d: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            gain: s.constant("gain", 1, d, 1.0),
            bias: s.constant("bias", 1, d, 0.0),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let n = g.layer_norm_rows(x, Self::EPS);
        let s = g.mul_row(n, p[self.gain]);
        g.add_row(s, p[self.bias])
    }
}

/// Multi-head scaled dot-product attention over token-major inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, d_model: usize, heads: usize) -> Self {
        assert!(
            heads >= 1 && d_model.is_multiple_of(heads),
            "d_model {d_model} not divisible by {heads} heads"
        );
        let mut s = init.sub(name);
        Self {
            q: Linear::new(&mut s, "q", d_model, d_model, Layout::TokenRows),
            k: Linear::new(&mut s, "k", d_model, d_model, Layout::TokenRows),
            v: Linear::new(&mut s, "v", d_model, d_model, Layout::TokenRows),
            o: Linear::new(&mut s, "o", d_model, d_model, Layout::TokenRows),
            heads,
            d_model,
        }
    }

    /// `query (n x d)` attends over `context (m x d)`. `mask` is `n x m`
    /// row-major; `false` entries are excluded.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        query: Var,
        context: Var,
        mask: Option<&[bool]>,
    ) -> Var {
        let q = self.q.forward(g, p, query);
        let k = self.k.forward(g, p, context);
        let v = self.v.forward(g, p, context);
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
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
            outs.push(g.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, p, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, d_model: usize, d_hidden: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            up: Linear::new(&mut s, "up", d_model, d_hidden, Layout::TokenRows),
            down: Linear::new(&mut s, "down", d_hidden, d_model, Layout::TokenRows),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let h = self.up.forward(g, p, x);
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, d_model: usize, heads: usize, d_hidden: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            ln_attn: LayerNorm::new(&mut s, "ln_attn", d_model),
            attn: MultiHeadAttention::new(&mut s, "attn", d_model, heads),
            ln_ffn: LayerNorm::new(&mut s, "ln_ffn", d_model),
            ffn: FeedForward::new(&mut s, "ffn", d_model, d_hidden),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, mask: Option<&[bool]>) -> Var {
        let h = self.ln_attn.forward(g, p, x);
        let a = self.attn.forward(g, p, h, h, mask);
        let x = g.add(x, a);
        let h = self.ln_ffn.forward(g, p, x);
        let f = self.ffn.forward(g, p, h);
        g.add(x, f)
    }
}

/// Pre-norm decoder block: self-attention, cross-attention, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, d_model: usize, heads: usize, d_hidden: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            ln_self: LayerNorm::new(&mut s, "ln_self", d_model),
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", d_model, heads),
            ln_cross: LayerNorm::new(&mut s, "ln_cross", d_model),
            cross_attn: MultiHeadAttention::new(&mut s, "cross_attn", d_model, heads),
            ln_ffn: LayerNorm::new(&mut s, "ln_ffn", d_model),
            ffn: FeedForward::new(&mut s, "ffn", d_model, d_hidden),
        }
    }

    /// `x (n x d)` queries, `memory (m x d)` keys/values; `memory_mask` has
    /// one entry per memory token.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        memory: Var,
        memory_mask: Option<&[bool]>,
    ) -> Var {
        let h = self.ln_self.forward(g, p, x);
        let a = self.self_attn.forward(g, p, h, h, None);
        let x = g.add(x, a);
        let h = self.ln_cross.forward(g, p, x);
        let n = g.shape(x).0;
        let full_mask: Option<Vec<bool>> = memory_mask.map(|m| {
            let mut v = Vec::with_capacity(n * m.len());
            for _ in 0..n {
                v.extend_from_slice(m);
            }
            v
        });
        let c = self.cross_attn.forward(g, p, h, memory, full_mask.as_deref());
        let x = g.add(x, c);
        let h = self.ln_ffn.forward(g, p, x);
        let f = self.ffn.forward(g, p, h);
        g.add(x, f)
    }
}
