//! Detection trunk: class-agnostic foreground masking, cross-modal
//! adaptation, the vision-language classifier and the dynamic mask localizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::encoder::{TextEncoder, VideoEncoder};
use crate::error::{Error, Result};
use crate::nn::{Bound, DecoderLayer, Init, LayerNorm, Layout, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::{lit, Real, Tensor};

/// Input widths fixed by the data rather than by the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    /// Feature rows of `E` (`2d` for two-stream input).
    pub input_dim: usize,
    /// Class-token width `C'`.
    pub token_dim: usize,
}

/// Query-based decoder producing per-query masks and the foreground score.
#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub queries: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub mask_hidden: Linear,
    pub mask_out: Linear,
    pub w_q: ParamId,
    pub b_q: ParamId,
}

impl MaskDecoder {
    fn new<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        let mut s = init.with_group(ParamGroup::MaskDecoder, "decoder");
        let queries = s.normal("queries", cfg.num_queries, c, 1.0);
        let layers = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(&mut s, &format!("layer{i}"), c, cfg.heads, c * cfg.ffn_ratio))
            .collect();
        let mask_hidden = Linear::new(&mut s, "mask_hidden", c, c, Layout::TokenRows);
        let mask_out = Linear::new(&mut s, "mask_out", c, c, Layout::TokenRows);
        let bound = 1.0 / (cfg.num_queries as f64).sqrt();
        let w_q = s.uniform("w_q", 1, cfg.num_queries, bound);
        let b_q = s.constant("b_q", 1, 1, 0.0);
        Self {
            queries,
            layers,
            mask_hidden,
            mask_out,
            w_q,
            b_q,
        }
    }

    /// Returns `(L_q: N_z x T, L_hat: 1 x T)` from `f_vis (T x C)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f_vis: Var) -> (Var, Var) {
        let c = g.shape(f_vis).1;
        let mut x = p[self.queries];
        for layer in &self.layers {
            x = layer.forward(g, p, x, f_vis, None);
        }
        let h = self.mask_hidden.forward(g, p, x);
        let h = g.gelu(h);
        let b_q = self.mask_out.forward(g, p, h);
        let logits = g.matmul_t(b_q, false, f_vis, true);
        let logits = g.scale(logits, 1.0 / (c as f64).sqrt());
        let l_q = g.sigmoid(logits);
        let z = g.matmul(p[self.w_q], l_q);
        let z = g.add_col(z, p[self.b_q]);
        (l_q, g.sigmoid(z))
    }
}

/// One cross-attention transformer layer plus the residual scale.
#[derive(Debug, Clone)]
pub struct CrossModal {
    /// Maps snippet features to the text width when `C != C'`; shared with the classifier.
    pub proj: Option<Linear>,
    pub layer: DecoderLayer,
    pub alpha: ParamId,
}

impl CrossModal {
    fn new<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig, token_dim: usize) -> Result<Self> {
        if !token_dim.is_multiple_of(cfg.text_heads) {
            return Err(Error::Config(format!(
                "token width {token_dim} is not divisible by {} heads",
                cfg.text_heads
            )));
        }
        let mut s = init.with_group(ParamGroup::CrossModal, "cross");
        let proj = (cfg.embed_dim != token_dim)
            .then(|| Linear::new(&mut s, "proj", cfg.embed_dim, token_dim, Layout::TokenRows));
        let layer = DecoderLayer::new(&mut s, "layer", token_dim, cfg.text_heads, token_dim * cfg.ffn_ratio);
        let alpha = s.constant("alpha", 1, token_dim, cfg.alpha_init);
        Ok(Self { proj, layer, alpha })
    }

    /// Snippet features in text width, token-major.
    pub fn project<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f_fg: Var) -> Var {
        match &self.proj {
            Some(l) => l.forward(g, p, f_fg),
            None => f_fg,
        }
    }

    /// Returns `(F_lan_hat, E_c)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f_lan: Var,
        f_fg_text: Var,
        keep: Option<&[bool]>,
    ) -> (Var, Var) {
        let e_c = self.layer.forward(g, p, f_lan, f_fg_text, keep);
        let scaled = g.mul_row(e_c, p[self.alpha]);
        (g.add(f_lan, scaled), e_c)
    }
}

/// Cosine classifier with a learned log inverse temperature.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub logit_scale: ParamId,
}

impl Classifier {
    fn new<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Self {
        let mut s = init.with_group(ParamGroup::Classifier, "classifier");
        Self {
            logit_scale: s.constant("logit_scale", 1, 1, (1.0 / cfg.tau_init).ln()),
        }
    }

    /// `f_lan_hat ((K+1) x C')` against `f_fg_text (T x C')`; returns `P ((K+1) x T)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f_lan_hat: Var, f_fg_text: Var) -> Var {
        let l = g.normalize_rows(f_lan_hat);
        let f = g.normalize_rows(f_fg_text);
        let s = g.matmul_t(l, false, f, true);
        let scale = g.exp(p[self.logit_scale]);
        let s = g.mul_scalar(s, scale);
        g.softmax_cols(s)
    }
}

/// Depthwise 1-D convolution whose taps are generated at every location.
#[derive(Debug, Clone)]
pub struct DynamicConv {
    pub controller: Linear,
    pub out: Linear,
    pub width: usize,
}

fn shifted(t_len: usize, offset: isize, replicate: bool) -> Vec<Option<usize>> {
    (0..t_len as isize)
        .map(|t| {
            let s = t + offset;
            if (0..t_len as isize).contains(&s) {
                Some(s as usize)
            } else if replicate {
                Some(s.clamp(0, t_len as isize - 1) as usize)
            } else {
                None
            }
        })
        .collect()
}

impl DynamicConv {
    fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c: usize, width: usize) -> Self {
        let mut s = init.sub(name);
        let controller = Linear::new(&mut s, "controller", c, width * c, Layout::TokenCols);
        // start near the identity filter: centre tap 1, dynamic part small
        let half = width / 2;
        if let Some(b) = controller.b {
            let bias = s.store.get_mut(b);
            for r in half * c..(half + 1) * c {
                bias.set(r, 0, T::one());
            }
        }
        let w = s.store.get_mut(controller.w);
        *w = w.scale(lit(0.1));
        let out = Linear::new(&mut s, "out", c, c, Layout::TokenCols);
        Self { controller, out, width }
    }

    /// `x` is `C x T`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let (c, t_len) = g.shape(x);
        let taps = self.controller.forward(g, p, x);
        let half = (self.width / 2) as isize;
        let mut acc = None;
        for j in 0..self.width {
            let k = g.slice_rows(taps, j * c, c);
            let xs = if j as isize == half {
                x
            } else {
                g.gather_cols(x, &shifted(t_len, j as isize - half, true))
            };
            let term = g.mul(k, xs);
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term),
            });
        }
        let y = self.out.forward(g, p, acc.expect("kernel width >= 1"));
        g.gelu(y)
    }
}

/// Two dynamic convolutions, then a per-location generated filter applied to
/// every position to give one mask per snippet.
#[derive(Debug, Clone)]
pub struct Localizer {
    pub norm: LayerNorm,
    pub convs: Vec<DynamicConv>,
    pub kernel: Linear,
    pub features: Linear,
    pub bias: ParamId,
}

impl Localizer {
    fn new<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        let mut s = init.with_group(ParamGroup::Localizer, "localizer");
        Self {
            norm: LayerNorm::new(&mut s, "norm", c),
            convs: (0..2)
                .map(|i| DynamicConv::new(&mut s, &format!("conv{i}"), c, cfg.localizer_kernel))
                .collect(),
            kernel: Linear::new(&mut s, "kernel", c, c, Layout::TokenCols),
            features: Linear::new(&mut s, "features", c, c, Layout::TokenCols),
            bias: s.constant("bias", 1, 1, 0.0),
        }
    }

    /// `f_vis (T x C)` to `M (T x T)`; column `t` is the mask generated at snippet `t`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f_vis: Var) -> Var {
        let (t_len, c) = g.shape(f_vis);
        let x = self.norm.forward(g, p, f_vis);
        let mut h = g.transpose(x);
        for conv in &self.convs {
            h = conv.forward(g, p, h);
        }
        let k = self.kernel.forward(g, p, h);
        let phi = self.features.forward(g, p, h);
        let logits = g.matmul_t(phi, true, k, false);
        let logits = g.scale(logits, 1.0 / (c as f64).sqrt());
        let ones = g.constant(Tensor::ones(t_len, 1));
        let b = g.matmul(ones, p[self.bias]);
        let logits = g.add_col(logits, b);
        g.sigmoid(logits)
    }
}

/// 3-tap zero-padded temporal convolution from the raw features.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub taps: Vec<Linear>,
    pub bias: ParamId,
}

impl Conv1d {
    fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c_in: usize, c_out: usize, width: usize) -> Self {
        let mut s = init.sub(name);
        let taps = (0..width)
            .map(|j| Linear::with_bias(&mut s, &format!("tap{j}"), c_in, c_out, Layout::TokenCols, false))
            .collect();
        let bias = s.constant("bias", c_out, 1, 0.0);
        Self { taps, bias }
    }

    /// `e` is `C_in x T`; returns `C_out x T`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, e: Var) -> Var {
        let t_len = g.shape(e).1;
        let half = (self.taps.len() / 2) as isize;
        let mut acc = None;
        for (j, tap) in self.taps.iter().enumerate() {
            let xs = if j as isize == half {
                e
            } else {
                g.gather_cols(e, &shifted(t_len, j as isize - half, false))
            };
            let y = tap.forward(g, p, xs);
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y),
            });
        }
        g.add_col(acc.expect("at least one tap"), p[self.bias])
    }
}

/// Feature projections used by the inter-branch consistency objective.
#[derive(Debug, Clone)]
pub struct ConsistencyHeads {
    pub class_branch: Conv1d,
    pub mask_branch: Conv1d,
}

impl ConsistencyHeads {
    fn new<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig, input_dim: usize) -> Self {
        let mut s = init.with_group(ParamGroup::Consistency, "consistency");
        Self {
            class_branch: Conv1d::new(&mut s, "class_branch", input_dim, cfg.consistency_dim, 3),
            mask_branch: Conv1d::new(&mut s, "mask_branch", input_dim, cfg.consistency_dim, 3),
        }
    }
}

/// Graph nodes of one video's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `T x C`.
    pub f_vis: Var,
    /// `N_z x T`.
    pub l_q: Var,
    /// `1 x T`.
    pub l_hat: Var,
    /// `1 x T`, binary.
    pub l_bin: Var,
    /// `T x C`, gated snippet features.
    pub f_fg: Var,
    /// `(K+1) x C'`.
    pub f_lan_hat: Var,
    /// `(K+1) x T`.
    pub p: Var,
    /// `T x T`.
    pub m: Var,
}

/// Plain-value forward result, converted to 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `(K+1) x T` class distributions, background last.
    pub p: Tensor<f64>,
    /// `T x T`; column `t` is the mask predicted by snippet `t`.
    pub m: Tensor<f64>,
    pub l_hat: Vec<f64>,
    pub l_q: Tensor<f64>,
    pub l_bin: Vec<f64>,
    /// `C x T`.
    pub f_fg: Tensor<f64>,
}

impl ModelOutput {
    pub fn num_classes(&self) -> usize {
        self.p.rows() - 1
    }

    pub fn num_snippets(&self) -> usize {
        self.p.cols()
    }
}

#[derive(Debug, Clone)]
pub struct Stale<T: Real> {
    pub cfg: ModelConfig,
    pub dims: ModelDims,
    pub params: ParamStore<T>,
    pub video: VideoEncoder,
    pub text: TextEncoder,
    pub decoder: MaskDecoder,
    pub cross: CrossModal,
    pub classifier: Classifier,
    pub localizer: Localizer,
    pub consistency: ConsistencyHeads,
}

impl<T: Real> Stale<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: &ModelConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if dims.input_dim == 0 || dims.token_dim == 0 {
            return Err(Error::Config("input and token widths must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut params, &mut rng, ParamGroup::VideoEncoder, "");
        let video = VideoEncoder::new(&mut init, cfg, dims.input_dim);
        let text = TextEncoder::new(&mut init, cfg, dims.token_dim)?;
        let decoder = MaskDecoder::new(&mut init, cfg);
        let cross = CrossModal::new(&mut init, cfg, dims.token_dim)?;
        let classifier = Classifier::new(&mut init, cfg);
        let localizer = Localizer::new(&mut init, cfg);
        let consistency = ConsistencyHeads::new(&mut init, cfg, dims.input_dim);
        Ok(Self {
            cfg: cfg.clone(),
            dims,
            params,
            video,
            text,
            decoder,
            cross,
            classifier,
            localizer,
            consistency,
        })
    }

    /// Whether `group` receives gradients under the current config.
    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::TextEncoder => self.cfg.finetune_text_encoder,
            _ => true,
        }
    }

    /// Places parameters on `g`, freezing groups per the config.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g, |grp| self.is_trainable(grp))
    }

    /// `F_lan` for the class tokens `tokens (K x C')`.
    pub fn text_embed(&self, g: &mut Graph<T>, p: &Bound, tokens: Var) -> Result<Var> {
        self.text.forward(g, p, tokens)
    }

    /// Binary foreground mask and gated features from `L_hat`.
    pub fn gate_foreground(&self, g: &mut Graph<T>, f_vis: Var, l_hat: Var) -> (Var, Var) {
        if !self.cfg.representation_masking {
            let t_len = g.shape(f_vis).0;
            return (g.constant(Tensor::ones(1, t_len)), f_vis);
        }
        gate_foreground(g, f_vis, l_hat, self.cfg.theta_bin)
    }

    /// Forward pass of one video against a text embedding on the same graph.
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &Bound, e: Var, f_lan: Var) -> Result<ForwardVars> {
        let (k1, d_lan) = g.shape(f_lan);
        if d_lan != self.dims.token_dim || k1 < 1 {
            return Err(Error::Shape(format!(
                "text embedding is {k1}x{d_lan}, expected (K+1)x{}",
                self.dims.token_dim
            )));
        }
        let f_vis = self.video.forward(g, p, e)?;
        let (l_q, l_hat) = self.decoder.forward(g, p, f_vis);
        let (l_bin, f_fg) = self.gate_foreground(g, f_vis, l_hat);
        let keep: Option<Vec<bool>> = self
            .cfg
            .representation_masking
            .then(|| g.value(l_bin).data().iter().map(|&b| b > T::zero()).collect());
        let f_fg_text = self.cross.project(g, p, f_fg);
        let (f_lan_hat, _) = self.cross.forward(g, p, f_lan, f_fg_text, keep.as_deref());
        let p_cls = self.classifier.forward(g, p, f_lan_hat, f_fg_text);
        let m = self.localizer.forward(g, p, f_vis);
        Ok(ForwardVars {
            f_vis,
            l_q,
            l_hat,
            l_bin,
            f_fg,
            f_lan_hat,
            p: p_cls,
            m,
        })
    }

    /// `F_lan` as plain values, for reuse across many videos.
    pub fn text_table(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let t = g.constant(tokens.clone());
        let f = self.text_embed(&mut g, &p, t)?;
        Ok(g.value(f).clone())
    }

    /// Inference forward for `e (C_in x T)` given a precomputed `F_lan`.
    pub fn forward_with_text(&self, e: &Tensor<T>, f_lan: &Tensor<T>) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let ev = g.constant(e.clone());
        let fl = g.constant(f_lan.clone());
        let v = self.forward_graph(&mut g, &p, ev, fl)?;
        Ok(ModelOutput {
            p: g.value(v.p).cast(),
            m: g.value(v.m).cast(),
            l_hat: g.value(v.l_hat).to_f64_vec(),
            l_q: g.value(v.l_q).cast(),
            l_bin: g.value(v.l_bin).to_f64_vec(),
            f_fg: g.value(v.f_fg).transpose().cast(),
        })
    }

    pub fn forward(&self, e: &Tensor<T>, tokens: &Tensor<T>) -> Result<ModelOutput> {
        let f_lan = self.text_table(tokens)?;
        self.forward_with_text(e, &f_lan)
    }
}

/// `L_bin = 1[L_hat >= theta]` with a straight-through backward, and the
/// snippet features scaled column-wise by it.
pub fn gate_foreground<T: Real>(g: &mut Graph<T>, f_vis: Var, l_hat: Var, theta_bin: f64) -> (Var, Var) {
    let l_bin = g.straight_through_step(l_hat, theta_bin);
    let col = g.transpose(l_bin);
    let f_fg = g.mul_col(f_vis, col);
    (l_bin, f_fg)
}
