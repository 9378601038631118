//! The frozen toy transformer and the trainable soft parameters.
//!
//! Everything is scalar f64 with explicit loops. Attention is computed
//! against exactly the key set a plan allows for each row, in a fixed
//! order (prompt prefix entries first, then allowed slots ascending), so
//! two plans that allow the same keys for a row produce bit-identical
//! outputs for that row.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::plan::{FlatPlan, PlanError, Role, Token};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("inconsistent plan: {0}")]
    InvalidPlan(String),
    #[error("token {0} out of range for vocab {1}")]
    TokenOutOfRange(Token, usize),
    #[error("mask index {0} out of range: soft params hold {1} mask embeddings")]
    MaskIndexOutOfRange(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("soft params sized for {got} layers, model has {expected}")]
    LayerMismatch { got: usize, expected: usize },
    #[error("soft params dim {got}, model dim {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("loss {loss} still above threshold {threshold} after {steps} steps")]
    ThresholdNotReached { loss: f64, threshold: f64, steps: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no labeled slots")]
    NoLabeledSlots,
    #[error("label attached to non-mask slot {0}")]
    LabelOnNonMaskSlot(usize),
}

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// y = x * W + b, where x is `W.rows` long and y is `W.cols` long.
fn affine(x: &[f64], w: &Mat, b: &[f64], y: &mut [f64]) {
    y.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        let wrow = w.row(i);
        for (yj, &wij) in y.iter_mut().zip(wrow) {
            *yj += xi * wij;
        }
    }
}

/// Backward of `affine`: accumulates dW, db and returns dx.
fn affine_back(x: &[f64], w: &Mat, dy: &[f64], dw: &mut Mat, db: &mut [f64], dx: &mut [f64]) {
    for (dbj, &dyj) in db.iter_mut().zip(dy) {
        *dbj += dyj;
    }
    for (i, &xi) in x.iter().enumerate() {
        let wrow = w.row(i);
        let dwrow = dw.row_mut(i);
        let mut acc = 0.0;
        for j in 0..dy.len() {
            dwrow[j] += xi * dy[j];
            acc += wrow[j] * dy[j];
        }
        dx[i] += acc;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

/// Pre-LN transformer: x + MHA(LN(x)), x + MLP(LN(x)), final LN, linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub cfg: ModelConfig,
    pub token_emb: Mat,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub head: Mat,
    pub head_b: Vec<f64>,
}

impl LayerWeights {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let h = cfg.hidden;
        LayerWeights {
            ln1_g: vec![1.0; d],
            ln1_b: vec![0.0; d],
            wq: Mat::zeros(d, d),
            bq: vec![0.0; d],
            wk: Mat::zeros(d, d),
            bk: vec![0.0; d],
            wv: Mat::zeros(d, d),
            bv: vec![0.0; d],
            wo: Mat::zeros(d, d),
            bo: vec![0.0; d],
            ln2_g: vec![1.0; d],
            ln2_b: vec![0.0; d],
            w1: Mat::zeros(d, h),
            b1: vec![0.0; h],
            w2: Mat::zeros(h, d),
            b2: vec![0.0; d],
        }
    }
}

impl ModelWeights {
    pub fn zeros(cfg: ModelConfig) -> Self {
        assert!(cfg.dim % cfg.n_heads == 0, "dim must divide into heads");
        ModelWeights {
            token_emb: Mat::zeros(cfg.vocab, cfg.dim),
            layers: (0..cfg.n_layers).map(|_| LayerWeights::zeros(&cfg)).collect(),
            lnf_g: vec![1.0; cfg.dim],
            lnf_b: vec![0.0; cfg.dim],
            head: Mat::zeros(cfg.dim, cfg.vocab),
            head_b: vec![0.0; cfg.vocab],
            cfg,
        }
    }

    pub fn random(cfg: ModelConfig, seed: u64) -> Self {
        let mut w = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        let mut fill = |v: &mut [f64]| {
            for x in v {
                *x = normal.sample(&mut rng);
            }
        };
        fill(&mut w.token_emb.data);
        for l in &mut w.layers {
            fill(&mut l.wq.data);
            fill(&mut l.wk.data);
            fill(&mut l.wv.data);
            fill(&mut l.wo.data);
            fill(&mut l.w1.data);
            fill(&mut l.w2.data);
        }
        fill(&mut w.head.data);
        w
    }

    /// A zeroed copy, used as a gradient or optimizer-moment buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.cfg);
        for l in &mut z.layers {
            l.ln1_g.iter_mut().for_each(|x| *x = 0.0);
            l.ln2_g.iter_mut().for_each(|x| *x = 0.0);
        }
        z.lnf_g.iter_mut().for_each(|x| *x = 0.0);
        z
    }

    /// All parameter tensors in a fixed order (for flat optimizer state).
    pub fn flat_parts(&mut self) -> Vec<&mut Vec<f64>> {
        let mut parts: Vec<&mut Vec<f64>> = vec![&mut self.token_emb.data];
        for l in &mut self.layers {
            parts.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.wq.data,
                &mut l.bq,
                &mut l.wk.data,
                &mut l.bk,
                &mut l.wv.data,
                &mut l.bv,
                &mut l.wo.data,
                &mut l.bo,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w1.data,
                &mut l.b1,
                &mut l.w2.data,
                &mut l.b2,
            ]);
        }
        parts.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head.data, &mut self.head_b]);
        parts
    }
}

/// How the trainable prompt reaches the attention layers.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptKind {
    /// No prompt prefix; only mask embeddings are trained.
    MaskOnly,
    /// One input-level array, projected through each layer's Wk/Wv.
    Shallow { prompt: Mat },
    /// Direct per-layer key and value prefixes.
    Deep { kv: Vec<(Mat, Mat)> },
}

/// The trainable adapter: mask-token embeddings plus an optional prompt
/// prefix visible only to mask rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftParams {
    pub mask_emb: Mat,
    pub prompt: PromptKind,
}

impl SoftParams {
    /// No masks, no prompt: plain autoregressive use of the base model.
    pub fn empty(dim: usize) -> Self {
        SoftParams {
            mask_emb: Mat::zeros(0, dim),
            prompt: PromptKind::MaskOnly,
        }
    }

    pub fn n_masks(&self) -> usize {
        self.mask_emb.rows
    }

    pub fn prefix_len(&self) -> usize {
        match &self.prompt {
            PromptKind::MaskOnly => 0,
            PromptKind::Shallow { prompt } => prompt.rows,
            PromptKind::Deep { kv } => kv.first().map_or(0, |(k, _)| k.rows),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SoftParams {
            mask_emb: Mat::zeros(self.mask_emb.rows, self.mask_emb.cols),
            prompt: match &self.prompt {
                PromptKind::MaskOnly => PromptKind::MaskOnly,
                PromptKind::Shallow { prompt } => PromptKind::Shallow {
                    prompt: Mat::zeros(prompt.rows, prompt.cols),
                },
                PromptKind::Deep { kv } => PromptKind::Deep {
                    kv: kv.iter().map(|(k, _)| (Mat::zeros(k.rows, k.cols), Mat::zeros(k.rows, k.cols))).collect(),
                },
            },
        }
    }

    pub fn flat_parts(&mut self) -> Vec<&mut Vec<f64>> {
        let mut parts = vec![&mut self.mask_emb.data];
        match &mut self.prompt {
            PromptKind::MaskOnly => {}
            PromptKind::Shallow { prompt } => parts.push(&mut prompt.data),
            PromptKind::Deep { kv } => {
                for (k, v) in kv {
                    parts.push(&mut k.data);
                    parts.push(&mut v.data);
                }
            }
        }
        parts
    }

    fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        if self.mask_emb.cols != cfg.dim {
            return Err(ModelError::DimMismatch { got: self.mask_emb.cols, expected: cfg.dim });
        }
        match &self.prompt {
            PromptKind::MaskOnly => Ok(()),
            PromptKind::Shallow { prompt } => {
                if prompt.cols != cfg.dim {
                    return Err(ModelError::DimMismatch { got: prompt.cols, expected: cfg.dim });
                }
                Ok(())
            }
            PromptKind::Deep { kv } => {
                if kv.len() != cfg.n_layers {
                    return Err(ModelError::LayerMismatch { got: kv.len(), expected: cfg.n_layers });
                }
                for (k, v) in kv {
                    if k.cols != cfg.dim || v.cols != cfg.dim {
                        return Err(ModelError::DimMismatch { got: k.cols, expected: cfg.dim });
                    }
                }
                Ok(())
            }
        }
    }
}

/// Sinusoidal absolute position encoding for a single position index.
pub fn posenc(pos: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = pos as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

/// Per-slot output logits of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    rows: Vec<Vec<f64>>,
}

impl Logits {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        Logits { rows }
    }

    pub fn n_slots(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, slot: usize) -> &[f64] {
        &self.rows[slot]
    }
}

pub type Picker = fn(&[f64]) -> Token;

/// Greedy argmax; ties break toward the lower token id.
pub fn greedy_pick(row: &[f64]) -> Option<Token> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in row.iter().enumerate() {
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i as Token)
}

pub fn pick_greedy(row: &[f64]) -> Token {
    greedy_pick(row).expect("empty logit row")
}

/// Deliberately wrong tie-break (highest id wins) for fault injection.
pub fn pick_greedy_inverted(row: &[f64]) -> Token {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v >= row[best] {
            best = i;
        }
    }
    best as Token
}

struct LnCache {
    rstd: Vec<f64>,
    xhat: Vec<Vec<f64>>,
}

fn layernorm(xs: &[Vec<f64>], g: &[f64], b: &[f64]) -> (Vec<Vec<f64>>, LnCache) {
    let d = g.len();
    let mut out = Vec::with_capacity(xs.len());
    let mut rstds = Vec::with_capacity(xs.len());
    let mut xhats = Vec::with_capacity(xs.len());
    for x in xs {
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
        out.push(xhat.iter().zip(g.iter().zip(b)).map(|(&xh, (&gi, &bi))| gi * xh + bi).collect());
        rstds.push(rstd);
        xhats.push(xhat);
    }
    (out, LnCache { rstd: rstds, xhat: xhats })
}

/// Backward through layernorm for one row; returns dx and accumulates dg/db.
fn layernorm_back_row(
    dy: &[f64],
    xhat: &[f64],
    rstd: f64,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let d = dy.len() as f64;
    let mut dxhat = vec![0.0; dy.len()];
    for i in 0..dy.len() {
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
        dxhat[i] = dy[i] * g[i];
    }
    let sum_dxhat: f64 = dxhat.iter().sum();
    let sum_dxhat_xhat: f64 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
    dxhat
        .iter()
        .zip(xhat)
        .map(|(&dxh, &xh)| rstd * (dxh - sum_dxhat / d - xh * sum_dxhat_xhat / d))
        .collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_back(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

struct LayerCache {
    ln1: LnCache,
    y1: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    k_pref: Vec<Vec<f64>>,
    v_pref: Vec<Vec<f64>>,
    /// Per query row, per head: softmax probabilities over that row's keys.
    probs: Vec<Vec<Vec<f64>>>,
    attn_cat: Vec<Vec<f64>>,
    ln2: LnCache,
    y2: Vec<Vec<f64>>,
    h_pre: Vec<Vec<f64>>,
    h_act: Vec<Vec<f64>>,
}

struct Cache {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    yf: Vec<Vec<f64>>,
}

/// Key slots a query row may attend to, ascending.
fn allowed_keys(plan: &FlatPlan, q: usize) -> Vec<usize> {
    (0..plan.n_slots()).filter(|&k| plan.attends(q, k)).collect()
}

fn embed(w: &ModelWeights, soft: &SoftParams, plan: &FlatPlan) -> Result<Vec<Vec<f64>>, ModelError> {
    let d = w.cfg.dim;
    let mut xs = Vec::with_capacity(plan.n_slots());
    for slot in &plan.slots {
        let mut x = match slot.role {
            Role::Context { token } | Role::Candidate { token, .. } => {
                if token as usize >= w.cfg.vocab {
                    return Err(ModelError::TokenOutOfRange(token, w.cfg.vocab));
                }
                w.token_emb.row(token as usize).to_vec()
            }
            Role::Mask { mask_idx, .. } => {
                if mask_idx >= soft.n_masks() {
                    return Err(ModelError::MaskIndexOutOfRange(mask_idx, soft.n_masks()));
                }
                soft.mask_emb.row(mask_idx).to_vec()
            }
        };
        let pe = posenc(slot.position, d);
        for (xi, pi) in x.iter_mut().zip(&pe) {
            *xi += pi;
        }
        xs.push(x);
    }
    Ok(xs)
}

fn forward_cached(w: &ModelWeights, soft: &SoftParams, plan: &FlatPlan) -> Result<(Logits, Cache), ModelError> {
    plan.validate().map_err(ModelError::InvalidPlan)?;
    soft.check(&w.cfg)?;
    let cfg = &w.cfg;
    let d = cfg.dim;
    let hd = d / cfg.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let s = plan.n_slots();
    let p = soft.prefix_len();

    let emb = embed(w, soft, plan)?;
    let mut x = emb.clone();
    let mut layer_caches = Vec::with_capacity(cfg.n_layers);

    for (li, lw) in w.layers.iter().enumerate() {
        let x_in = x.clone();
        let (y1, ln1) = layernorm(&x, &lw.ln1_g, &lw.ln1_b);

        let mut q = vec![vec![0.0; d]; s];
        let mut k = vec![vec![0.0; d]; s];
        let mut v = vec![vec![0.0; d]; s];
        for i in 0..s {
            affine(&y1[i], &lw.wq, &lw.bq, &mut q[i]);
            affine(&y1[i], &lw.wk, &lw.bk, &mut k[i]);
            affine(&y1[i], &lw.wv, &lw.bv, &mut v[i]);
        }

        // Prompt prefix keys/values for this layer.
        let (k_pref, v_pref): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match &soft.prompt {
            PromptKind::MaskOnly => (vec![], vec![]),
            PromptKind::Shallow { prompt } => {
                let mut kp = vec![vec![0.0; d]; p];
                let mut vp = vec![vec![0.0; d]; p];
                for i in 0..p {
                    affine(prompt.row(i), &lw.wk, &lw.bk, &mut kp[i]);
                    affine(prompt.row(i), &lw.wv, &lw.bv, &mut vp[i]);
                }
                (kp, vp)
            }
            PromptKind::Deep { kv } => {
                let (kp, vp) = &kv[li];
                (
                    (0..p).map(|i| kp.row(i).to_vec()).collect(),
                    (0..p).map(|i| vp.row(i).to_vec()).collect(),
                )
            }
        };

        let mut probs = Vec::with_capacity(s);
        let mut attn_cat = vec![vec![0.0; d]; s];
        for qi in 0..s {
            let keys = allowed_keys(plan, qi);
            let use_pref = p > 0 && plan.prompt_visible[qi];
            let n_keys = keys.len() + if use_pref { p } else { 0 };
            let mut row_probs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let hs = h * hd..(h + 1) * hd;
                let qh = &q[qi][hs.clone()];
                let mut scores = Vec::with_capacity(n_keys);
                if use_pref {
                    for kp in &k_pref {
                        scores.push(dot(qh, &kp[hs.clone()]) * scale);
                    }
                }
                for &kj in &keys {
                    scores.push(dot(qh, &k[kj][hs.clone()]) * scale);
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut ps: Vec<f64> = scores.iter().map(|&sc| (sc - max).exp()).collect();
                let sum: f64 = ps.iter().sum();
                for pv in &mut ps {
                    *pv /= sum;
                }
                let out = &mut attn_cat[qi][hs.clone()];
                let mut idx = 0;
                if use_pref {
                    for vp in &v_pref {
                        let pj = ps[idx];
                        for (o, &vv) in out.iter_mut().zip(&vp[hs.clone()]) {
                            *o += pj * vv;
                        }
                        idx += 1;
                    }
                }
                for &kj in &keys {
                    let pj = ps[idx];
                    for (o, &vv) in out.iter_mut().zip(&v[kj][hs.clone()]) {
                        *o += pj * vv;
                    }
                    idx += 1;
                }
                row_probs.push(ps);
            }
            probs.push(row_probs);
        }

        let mut x2 = vec![vec![0.0; d]; s];
        for i in 0..s {
            let mut proj = vec![0.0; d];
            affine(&attn_cat[i], &lw.wo, &lw.bo, &mut proj);
            for j in 0..d {
                x2[i][j] = x_in[i][j] + proj[j];
            }
        }

        let (y2, ln2) = layernorm(&x2, &lw.ln2_g, &lw.ln2_b);
        let mut h_pre = vec![vec![0.0; cfg.hidden]; s];
        let mut h_act = vec![vec![0.0; cfg.hidden]; s];
        let mut x_out = vec![vec![0.0; d]; s];
        for i in 0..s {
            affine(&y2[i], &lw.w1, &lw.b1, &mut h_pre[i]);
            for j in 0..cfg.hidden {
                h_act[i][j] = silu(h_pre[i][j]);
            }
            let mut mlp_out = vec![0.0; d];
            affine(&h_act[i], &lw.w2, &lw.b2, &mut mlp_out);
            for j in 0..d {
                x_out[i][j] = x2[i][j] + mlp_out[j];
            }
        }

        layer_caches.push(LayerCache {
            ln1,
            y1,
            q,
            k,
            v,
            k_pref,
            v_pref,
            probs,
            attn_cat,
            ln2,
            y2,
            h_pre,
            h_act,
        });
        x = x_out;
    }

    let (yf, lnf) = layernorm(&x, &w.lnf_g, &w.lnf_b);
    let mut rows = Vec::with_capacity(s);
    for i in 0..s {
        let mut lr = vec![0.0; cfg.vocab];
        affine(&yf[i], &w.head, &w.head_b, &mut lr);
        if lr.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("logits"));
        }
        rows.push(lr);
    }
    Ok((Logits::from_rows(rows), Cache { layers: layer_caches, lnf, yf }))
}

pub fn forward(w: &ModelWeights, soft: &SoftParams, plan: &FlatPlan) -> Result<Logits, ModelError> {
    forward_cached(w, soft, plan).map(|(l, _)| l)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean cross-entropy over the given (slot, label) targets, plus the
/// per-slot logit gradients (zero rows for untargeted slots).
pub fn ce_loss(logits: &Logits, targets: &[(usize, Token)]) -> (f64, Vec<Vec<f64>>) {
    ce_loss_scaled(logits, targets, 1.0 / targets.len() as f64)
}

/// Summed (unscaled) cross-entropy over the targets: the per-sample SAR
/// loss is the sum of the mask slots' negative log-likelihoods.
pub fn ce_loss_sum(logits: &Logits, targets: &[(usize, Token)]) -> (f64, Vec<Vec<f64>>) {
    ce_loss_scaled(logits, targets, 1.0)
}

fn ce_loss_scaled(logits: &Logits, targets: &[(usize, Token)], scale: f64) -> (f64, Vec<Vec<f64>>) {
    let vocab = logits.row(0).len();
    let mut d = vec![vec![0.0; vocab]; logits.n_slots()];
    let mut loss = 0.0;
    for &(slot, label) in targets {
        let row = logits.row(slot);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += scale * (sum.ln() + max - row[label as usize]);
        for j in 0..vocab {
            d[slot][j] += scale * (exps[j] / sum - if j == label as usize { 1.0 } else { 0.0 });
        }
    }
    (loss, d)
}

/// Backward pass: given d(logits), accumulate gradients for the base
/// weights and the soft parameters.
fn backward(
    w: &ModelWeights,
    soft: &SoftParams,
    plan: &FlatPlan,
    cache: &Cache,
    d_logits: &[Vec<f64>],
    gw: &mut ModelWeights,
    gs: &mut SoftParams,
) {
    let cfg = &w.cfg;
    let d = cfg.dim;
    let hd = d / cfg.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let s = plan.n_slots();
    let p = soft.prefix_len();

    // Head and final LN.
    let mut dx = vec![vec![0.0; d]; s];
    for i in 0..s {
        let mut dyf = vec![0.0; d];
        affine_back(&cache.yf[i], &w.head, &d_logits[i], &mut gw.head, &mut gw.head_b, &mut dyf);
        let dxi = layernorm_back_row(&dyf, &cache.lnf.xhat[i], cache.lnf.rstd[i], &w.lnf_g, &mut gw.lnf_g, &mut gw.lnf_b);
        dx[i] = dxi;
    }

    for (li, lw) in w.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let glw = &mut gw.layers[li];

        // MLP block backward: x_out = x2 + W2(silu(W1(y2))).
        let mut dx2 = vec![vec![0.0; d]; s];
        for i in 0..s {
            let mut dh_act = vec![0.0; cfg.hidden];
            affine_back(&lc.h_act[i], &lw.w2, &dx[i], &mut glw.w2, &mut glw.b2, &mut dh_act);
            let dh_pre: Vec<f64> = dh_act
                .iter()
                .zip(&lc.h_pre[i])
                .map(|(&da, &hp)| da * silu_back(hp))
                .collect();
            let mut dy2 = vec![0.0; d];
            affine_back(&lc.y2[i], &lw.w1, &dh_pre, &mut glw.w1, &mut glw.b1, &mut dy2);
            let dln = layernorm_back_row(&dy2, &lc.ln2.xhat[i], lc.ln2.rstd[i], &lw.ln2_g, &mut glw.ln2_g, &mut glw.ln2_b);
            for j in 0..d {
                dx2[i][j] = dx[i][j] + dln[j];
            }
        }

        // Attention block backward: x2 = x_in + Wo(attn_cat).
        let mut d_attn_cat = vec![vec![0.0; d]; s];
        let mut dx_in = vec![vec![0.0; d]; s];
        for i in 0..s {
            affine_back(&lc.attn_cat[i], &lw.wo, &dx2[i], &mut glw.wo, &mut glw.bo, &mut d_attn_cat[i]);
            dx_in[i].copy_from_slice(&dx2[i]);
        }

        let mut dq = vec![vec![0.0; d]; s];
        let mut dk = vec![vec![0.0; d]; s];
        let mut dv = vec![vec![0.0; d]; s];
        let mut dk_pref = vec![vec![0.0; d]; p];
        let mut dv_pref = vec![vec![0.0; d]; p];
        for qi in 0..s {
            let keys = allowed_keys(plan, qi);
            let use_pref = p > 0 && plan.prompt_visible[qi];
            for h in 0..cfg.n_heads {
                let hs = h * hd..(h + 1) * hd;
                let ps = &lc.probs[qi][h];
                let dout = &d_attn_cat[qi][hs.clone()];
                // dv and dp.
                let n_keys = ps.len();
                let mut dp = vec![0.0; n_keys];
                let mut idx = 0;
                if use_pref {
                    for j in 0..p {
                        dp[idx] = dot(dout, &lc.v_pref[j][hs.clone()]);
                        for (dvj, &o) in dv_pref[j][hs.clone()].iter_mut().zip(dout) {
                            *dvj += ps[idx] * o;
                        }
                        idx += 1;
                    }
                }
                for &kj in &keys {
                    dp[idx] = dot(dout, &lc.v[kj][hs.clone()]);
                    for (dvj, &o) in dv[kj][hs.clone()].iter_mut().zip(dout) {
                        *dvj += ps[idx] * o;
                    }
                    idx += 1;
                }
                // Softmax backward.
                let dsum: f64 = ps.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let ds: Vec<f64> = ps.iter().zip(&dp).map(|(&pj, &dpj)| pj * (dpj - dsum)).collect();
                // Scores: s_j = q·k_j * scale.
                let qh: Vec<f64> = lc.q[qi][hs.clone()].to_vec();
                let mut idx = 0;
                if use_pref {
                    for j in 0..p {
                        let c = ds[idx] * scale;
                        for (dqv, &kv) in dq[qi][hs.clone()].iter_mut().zip(&lc.k_pref[j][hs.clone()]) {
                            *dqv += c * kv;
                        }
                        for (dkv, &qv) in dk_pref[j][hs.clone()].iter_mut().zip(&qh) {
                            *dkv += c * qv;
                        }
                        idx += 1;
                    }
                }
                for &kj in &keys {
                    let c = ds[idx] * scale;
                    for (dqv, &kv) in dq[qi][hs.clone()].iter_mut().zip(&lc.k[kj][hs.clone()]) {
                        *dqv += c * kv;
                    }
                    for (dkv, &qv) in dk[kj][hs.clone()].iter_mut().zip(&qh) {
                        *dkv += c * qv;
                    }
                    idx += 1;
                }
            }
        }

        // Prefix grads flow to the soft params.
        if p > 0 {
            match (&soft.prompt, &mut gs.prompt) {
                (PromptKind::Deep { .. }, PromptKind::Deep { kv: gkv }) => {
                    for j in 0..p {
                        for c in 0..d {
                            gkv[li].0.row_mut(j)[c] += dk_pref[j][c];
                            gkv[li].1.row_mut(j)[c] += dv_pref[j][c];
                        }
                    }
                }
                (PromptKind::Shallow { prompt }, PromptKind::Shallow { prompt: gp }) => {
                    for j in 0..p {
                        let mut dprow = vec![0.0; d];
                        affine_back(prompt.row(j), &lw.wk, &dk_pref[j], &mut glw.wk, &mut glw.bk, &mut dprow);
                        affine_back(prompt.row(j), &lw.wv, &dv_pref[j], &mut glw.wv, &mut glw.bv, &mut dprow);
                        for (gpv, dpv) in gp.row_mut(j).iter_mut().zip(&dprow) {
                            *gpv += dpv;
                        }
                    }
                }
                _ => {}
            }
        }

        // Q/K/V projections back to y1, then LN1 back to x_in.
        for i in 0..s {
            let mut dy1 = vec![0.0; d];
            affine_back(&lc.y1[i], &lw.wq, &dq[i], &mut glw.wq, &mut glw.bq, &mut dy1);
            affine_back(&lc.y1[i], &lw.wk, &dk[i], &mut glw.wk, &mut glw.bk, &mut dy1);
            affine_back(&lc.y1[i], &lw.wv, &dv[i], &mut glw.wv, &mut glw.bv, &mut dy1);
            let dln = layernorm_back_row(&dy1, &lc.ln1.xhat[i], lc.ln1.rstd[i], &lw.ln1_g, &mut glw.ln1_g, &mut glw.ln1_b);
            for j in 0..d {
                dx_in[i][j] += dln[j];
            }
        }
        dx = dx_in;
    }

    // Input embedding grads: tokens to the base table, masks to soft params.
    for (i, slot) in plan.slots.iter().enumerate() {
        match slot.role {
            Role::Context { token } | Role::Candidate { token, .. } => {
                for (g, &dv) in gw.token_emb.row_mut(token as usize).iter_mut().zip(&dx[i]) {
                    *g += dv;
                }
            }
            Role::Mask { mask_idx, .. } => {
                for (g, &dv) in gs.mask_emb.row_mut(mask_idx).iter_mut().zip(&dx[i]) {
                    *g += dv;
                }
            }
        }
    }
}

/// Loss and base-weight gradients for one plan (soft params held fixed).
pub fn grad_weights(
    w: &ModelWeights,
    soft: &SoftParams,
    plan: &FlatPlan,
    targets: &[(usize, Token)],
) -> Result<(f64, ModelWeights), ModelError> {
    let (logits, cache) = forward_cached(w, soft, plan)?;
    let (loss, d_logits) = ce_loss(&logits, targets);
    let mut gw = w.zeros_like();
    let mut gs = soft.zeros_like();
    backward(w, soft, plan, &cache, &d_logits, &mut gw, &mut gs);
    Ok((loss, gw))
}

/// Loss and soft-parameter gradients for one plan (base weights frozen).
/// The loss is the sum over the labeled mask slots of the negative
/// log-softmax of the label.
pub fn grad_soft(
    w: &ModelWeights,
    soft: &SoftParams,
    plan: &FlatPlan,
    targets: &[(usize, Token)],
) -> Result<(f64, SoftParams), ModelError> {
    if targets.is_empty() {
        return Err(ModelError::NoLabeledSlots);
    }
    for &(slot, label) in targets {
        if !plan.slots[slot].role.is_mask() {
            return Err(ModelError::LabelOnNonMaskSlot(slot));
        }
        if label as usize >= w.cfg.vocab {
            return Err(ModelError::TokenOutOfRange(label, w.cfg.vocab));
        }
    }
    let (logits, cache) = forward_cached(w, soft, plan)?;
    let (loss, d_logits) = ce_loss_sum(&logits, targets);
    let mut gw = w.zeros_like();
    let mut gs = soft.zeros_like();
    backward(w, soft, plan, &cache, &d_logits, &mut gw, &mut gs);
    Ok((loss, gs))
}

/// Mean next-token cross-entropy (nats/token) over a held-out corpus.
pub fn corpus_loss(w: &ModelWeights, seqs: &[Vec<Token>]) -> Result<f64, ModelError> {
    let soft = SoftParams::empty(w.cfg.dim);
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs.iter().filter(|s| s.len() >= 2) {
        let plan = crate::plan::build_causal_plan(s)?;
        let logits = forward(w, &soft, &plan)?;
        let targets: Vec<(usize, Token)> = (0..s.len() - 1).map(|i| (i, s[i + 1])).collect();
        let (loss, _) = ce_loss_sum(&logits, &targets);
        total += loss;
        count += targets.len();
    }
    if count == 0 {
        return Err(ModelError::EmptyCorpus);
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_steps: usize,
    pub loss_threshold: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            max_steps: 2000,
            loss_threshold: 0.05,
            log_every: 100,
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + EPS);
        }
    }
}

fn flatten(parts: &[&mut Vec<f64>]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn unflatten(parts: &mut [&mut Vec<f64>], flat: &[f64]) {
    let mut off = 0;
    for p in parts {
        let len = p.len();
        p.copy_from_slice(&flat[off..off + len]);
        off += len;
    }
}

/// Full-batch next-token training of the base model on a token corpus.
/// Returns the per-step loss history; errors on divergence or if the
/// threshold is still unmet after `max_steps`.
pub fn train_base_lm(
    w: &mut ModelWeights,
    corpus: &[Vec<Token>],
    cfg: &TrainConfig,
    mut log: impl FnMut(usize, f64),
) -> Result<Vec<f64>, ModelError> {
    if corpus.is_empty() || corpus.iter().all(|s| s.len() < 2) {
        return Err(ModelError::EmptyCorpus);
    }
    let soft = SoftParams::empty(w.cfg.dim);
    let plans: Vec<(crate::plan::FlatPlan, Vec<(usize, Token)>)> = corpus
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| {
            let plan = crate::plan::build_causal_plan(s).expect("non-empty sequence");
            let targets = (0..s.len() - 1).map(|i| (i, s[i + 1])).collect();
            (plan, targets)
        })
        .collect();

    let n_params: usize = {
        let mut wc = w.clone();
        wc.flat_parts().iter().map(|p| p.len()).sum()
    };
    let mut adam = Adam::new(n_params);
    let mut history = Vec::new();
    for step in 0..cfg.max_steps {
        let mut total_loss = 0.0;
        let mut grad_acc = w.zeros_like();
        for (plan, targets) in &plans {
            let (loss, gw) = grad_weights(w, &soft, plan, targets)?;
            total_loss += loss;
            let mut ga_parts = grad_acc.flat_parts();
            let mut gw_owned = gw;
            let gw_parts = gw_owned.flat_parts();
            for (a, g) in ga_parts.iter_mut().zip(gw_parts) {
                for (av, gv) in a.iter_mut().zip(g.iter()) {
                    *av += gv;
                }
            }
        }
        let n = plans.len() as f64;
        let loss = total_loss / n;
        if !loss.is_finite() {
            return Err(ModelError::Diverged { step, loss });
        }
        history.push(loss);
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log(step, loss);
        }
        if loss <= cfg.loss_threshold {
            return Ok(history);
        }
        let ga = grad_acc.flat_parts();
        let mut gflat = flatten(&ga);
        for g in &mut gflat {
            *g /= n;
        }
        drop(ga);
        let mut wparts = w.flat_parts();
        let mut wflat = flatten(&wparts);
        adam.step(&mut wflat, &gflat, cfg.lr);
        unflatten(&mut wparts, &wflat);
    }
    let last = *history.last().unwrap();
    if last <= cfg.loss_threshold {
        Ok(history)
    } else {
        Err(ModelError::ThresholdNotReached {
            loss: last,
            threshold: cfg.loss_threshold,
            steps: cfg.max_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{build_causal_plan, build_training_plan, build_tree_plan};
    use crate::tree::build_efficient_tree;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { vocab: 11, dim: 8, n_layers: 2, n_heads: 2, hidden: 16 }
    }

    fn soft_with(cfg: &ModelConfig, m: usize, p: usize, kind: &str, seed: u64) -> SoftParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut fill = |mat: &mut Mat| {
            for x in &mut mat.data {
                *x = normal.sample(&mut rng);
            }
        };
        let mut mask_emb = Mat::zeros(m, cfg.dim);
        fill(&mut mask_emb);
        let prompt = match kind {
            "mask_only" => PromptKind::MaskOnly,
            "shallow" => {
                let mut pm = Mat::zeros(p, cfg.dim);
                fill(&mut pm);
                PromptKind::Shallow { prompt: pm }
            }
            "deep" => {
                let kv = (0..cfg.n_layers)
                    .map(|_| {
                        let mut k = Mat::zeros(p, cfg.dim);
                        let mut v = Mat::zeros(p, cfg.dim);
                        fill(&mut k);
                        fill(&mut v);
                        (k, v)
                    })
                    .collect();
                PromptKind::Deep { kv }
            }
            _ => unreachable!(),
        };
        SoftParams { mask_emb, prompt }
    }

    #[test]
    fn posenc_known_values() {
        let pe = posenc(0, 4);
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0]);
        let pe3 = posenc(3, 4);
        assert!((pe3[0] - 3f64.sin()).abs() < 1e-15);
        assert!((pe3[1] - 3f64.cos()).abs() < 1e-15);
        assert!((pe3[2] - (3.0 / 100f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn greedy_pick_tie_breaks_low() {
        assert_eq!(greedy_pick(&[0.5, 1.0, 1.0, 0.2]), Some(1));
        assert_eq!(greedy_pick(&[]), None);
        assert_eq!(pick_greedy_inverted(&[0.5, 1.0, 1.0, 0.2]), 2);
    }

    #[test]
    fn forward_is_deterministic() {
        let w = ModelWeights::random(tiny_cfg(), 7);
        let soft = soft_with(&tiny_cfg(), 3, 4, "deep", 9);
        let plan = build_training_plan(&[1, 2, 3, 4], 3).unwrap();
        let a = forward(&w, &soft, &plan).unwrap();
        let b = forward(&w, &soft, &plan).unwrap();
        assert_eq!(a, b);
    }

    // The losslessness lemma: a candidate row in a tree plan sees exactly
    // its autoregressive prefix, so its logits are bit-identical to the
    // last row of the equivalent causal plan.
    #[test]
    fn candidate_rows_match_causal_rows_bitwise() {
        let cfg = tiny_cfg();
        let w = ModelWeights::random(cfg, 3);
        let soft = soft_with(&cfg, 4, 4, "deep", 5);
        let ctx: Vec<Token> = vec![1, 4, 2, 9, 3];
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..cfg.vocab).map(|v| ((v * 7 + i * 3) % 10) as f64 * 0.1).collect())
            .collect();
        let tree = build_efficient_tree(&rows, 2).unwrap();
        let plan = build_tree_plan(&ctx, &tree, 3).unwrap();
        let logits = forward(&w, &soft, &plan).unwrap();

        let ar_soft = SoftParams::empty(cfg.dim);
        // Last context row equals the plain causal run over the context.
        let causal = build_causal_plan(&ctx).unwrap();
        let ar_logits = forward(&w, &ar_soft, &causal).unwrap();
        assert_eq!(logits.row(ctx.len() - 1), ar_logits.row(ctx.len() - 1));

        for node in &tree.nodes {
            let mut prefix = ctx.clone();
            for a in tree.ancestors(node.id) {
                prefix.push(tree.nodes[a].token);
            }
            prefix.push(node.token);
            let cplan = build_causal_plan(&prefix).unwrap();
            let clog = forward(&w, &ar_soft, &cplan).unwrap();
            let slot = plan.candidate_slot(node.id).unwrap();
            assert_eq!(logits.row(slot), clog.row(prefix.len() - 1), "node {}", node.id);
        }
    }

    fn fd_check_soft(kind: &str) {
        let cfg = tiny_cfg();
        let w = ModelWeights::random(cfg, 11);
        let mut soft = soft_with(&cfg, 3, 2, kind, 13);
        let plan = build_training_plan(&[5, 1, 8, 2], 3).unwrap();
        let targets: Vec<(usize, Token)> = vec![(4, 6), (5, 2), (6, 9)];
        let (_, gs) = grad_soft(&w, &soft, &plan, &targets).unwrap();
        let mut gs_owned = gs;
        let gparts = gs_owned.flat_parts();
        let gflat = flatten(&gparts);
        drop(gparts);

        let eps = 1e-5;
        let mut idx = 0;
        let n_parts = soft.flat_parts().len();
        for part in 0..n_parts {
            let len = soft.flat_parts()[part].len();
            for i in (0..len).step_by(7) {
                let orig = soft.flat_parts()[part][i];
                soft.flat_parts()[part][i] = orig + eps;
                let lp = ce_loss_sum(&forward(&w, &soft, &plan).unwrap(), &targets).0;
                soft.flat_parts()[part][i] = orig - eps;
                let lm = ce_loss_sum(&forward(&w, &soft, &plan).unwrap(), &targets).0;
                soft.flat_parts()[part][i] = orig;
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = gflat[idx + i];
                assert!(
                    (numeric - analytic).abs() < 1e-6 * (1.0 + numeric.abs().max(analytic.abs())),
                    "{kind} part {part} idx {i}: numeric {numeric} analytic {analytic}"
                );
            }
            idx += len;
        }
    }

    #[test]
    fn soft_grads_match_finite_differences_mask_only() {
        fd_check_soft("mask_only");
    }

    #[test]
    fn soft_grads_match_finite_differences_shallow() {
        fd_check_soft("shallow");
    }

    #[test]
    fn soft_grads_match_finite_differences_deep() {
        fd_check_soft("deep");
    }

    #[test]
    fn uniform_logits_loss_is_labels_times_ln_vocab() {
        // An all-zero model emits identical logits everywhere, so the
        // summed loss over 3 labeled mask slots is exactly 3 ln 8.
        let cfg = ModelConfig { vocab: 8, dim: 8, n_layers: 1, n_heads: 1, hidden: 8 };
        let w = ModelWeights::zeros(cfg);
        let soft = soft_with(&cfg, 3, 0, "mask_only", 1);
        let plan = build_training_plan(&[1, 2], 3).unwrap();
        let targets: Vec<(usize, Token)> = vec![(2, 0), (3, 5), (4, 7)];
        let (loss, _) = grad_soft(&w, &soft, &plan, &targets).unwrap();
        assert!((loss - 3.0 * 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn grad_soft_rejects_bad_labels() {
        let cfg = tiny_cfg();
        let w = ModelWeights::random(cfg, 3);
        let soft = soft_with(&cfg, 3, 0, "mask_only", 4);
        let plan = build_training_plan(&[1, 2], 3).unwrap();
        assert!(matches!(grad_soft(&w, &soft, &plan, &[]), Err(ModelError::NoLabeledSlots)));
        assert!(matches!(
            grad_soft(&w, &soft, &plan, &[(0, 1)]),
            Err(ModelError::LabelOnNonMaskSlot(0))
        ));
        assert!(matches!(
            grad_soft(&w, &soft, &plan, &[(2, 99)]),
            Err(ModelError::TokenOutOfRange(99, 11))
        ));
    }

    #[test]
    fn weight_grads_match_finite_differences_spot() {
        let cfg = tiny_cfg();
        let mut w = ModelWeights::random(cfg, 17);
        let soft = SoftParams::empty(cfg.dim);
        let seq: Vec<Token> = vec![3, 1, 4, 1, 5];
        let plan = build_causal_plan(&seq).unwrap();
        let targets: Vec<(usize, Token)> = (0..4).map(|i| (i, seq[i + 1])).collect();
        let (_, gw) = grad_weights(&w, &soft, &plan, &targets).unwrap();
        let mut gw_owned = gw;
        let gflat = flatten(&gw_owned.flat_parts());

        let eps = 1e-5;
        let n_parts = w.clone().flat_parts().len();
        let mut idx = 0;
        for part in 0..n_parts {
            let len = w.flat_parts()[part].len();
            // A few entries per tensor keeps this fast.
            for i in (0..len).step_by(len.max(3) / 3) {
                let orig = w.flat_parts()[part][i];
                w.flat_parts()[part][i] = orig + eps;
                let lp = ce_loss(&forward(&w, &soft, &plan).unwrap(), &targets).0;
                w.flat_parts()[part][i] = orig - eps;
                let lm = ce_loss(&forward(&w, &soft, &plan).unwrap(), &targets).0;
                w.flat_parts()[part][i] = orig;
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = gflat[idx + i];
                assert!(
                    (numeric - analytic).abs() < 1e-6 * (1.0 + numeric.abs().max(analytic.abs())),
                    "part {part} idx {i}: numeric {numeric} analytic {analytic}"
                );
            }
            idx += len;
        }
    }

    #[test]
    fn train_base_lm_reaches_threshold_on_trivial_corpus() {
        let cfg = ModelConfig { vocab: 8, dim: 8, n_layers: 1, n_heads: 2, hidden: 16 };
        let mut w = ModelWeights::random(cfg, 23);
        let corpus: Vec<Vec<Token>> = vec![vec![1, 2, 3, 4], vec![2, 3, 4, 5]];
        let tc = TrainConfig { lr: 1e-2, max_steps: 800, loss_threshold: 0.1, log_every: 0 };
        let history = train_base_lm(&mut w, &corpus, &tc, |_, _| {}).unwrap();
        assert!(history.last().unwrap() <= &0.1);
        assert!(history[0] > *history.last().unwrap());
    }

    #[test]
    fn train_base_lm_rejects_empty_corpus() {
        let cfg = tiny_cfg();
        let mut w = ModelWeights::random(cfg, 1);
        let err = train_base_lm(&mut w, &[], &TrainConfig::default(), |_, _| {});
        assert!(matches!(err, Err(ModelError::EmptyCorpus)));
    }

    #[test]
    fn mask_index_out_of_range_is_rejected() {
        let cfg = tiny_cfg();
        let w = ModelWeights::random(cfg, 2);
        let soft = soft_with(&cfg, 2, 0, "mask_only", 3);
        let plan = build_training_plan(&[1, 2], 3).unwrap();
        assert!(matches!(
            forward(&w, &soft, &plan),
            Err(ModelError::MaskIndexOutOfRange(2, 2))
        ));
    }

    #[test]
    fn token_out_of_range_is_rejected() {
        let cfg = tiny_cfg();
        let w = ModelWeights::random(cfg, 2);
        let soft = SoftParams::empty(cfg.dim);
        let plan = build_causal_plan(&[1, 200]).unwrap();
        assert!(matches!(
            forward(&w, &soft, &plan),
            Err(ModelError::TokenOutOfRange(200, 11))
        ));
    }
}
