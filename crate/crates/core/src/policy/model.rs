//! A pre-norm causal transformer over state tokens with exact reverse-mode
//! gradients. Parameters live in one flat `f64` vector; after every update
//! they are rounded to `f32` so that checkpoints round-trip exactly.

use super::tokens::{position_features, Frame, PosFeatures, Token, N_ROLES, VOCAB};
use super::PolicyError;
use crate::rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Largest grid side the positional tables cover.
    pub max_size: usize,
    /// Most states a context may hold, including the one being generated.
    pub max_states: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 48,
            n_layers: 2,
            n_heads: 4,
            d_ff: 96,
            max_size: 12,
            max_states: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err("model dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return Err("d_model must be divisible by n_heads".into());
        }
        if self.max_size == 0 || self.max_states < 2 {
            return Err("max_size must be positive and max_states at least 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy)]
struct PosTables {
    role: usize,
    row: usize,
    col: usize,
    step: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerOff {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    tok: usize,
    pos_in: PosTables,
    pos_query: PosTables,
    echo: usize,
    layers: Vec<LayerOff>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
    total: usize,
}

struct Alloc(usize);

impl Alloc {
    fn take(&mut self, n: usize) -> usize {
        let at = self.0;
        self.0 += n;
        at
    }
}

impl Offsets {
    fn new(c: &ModelConfig) -> Offsets {
        let d = c.d_model;
        let mut a = Alloc(0);
        let tables = |a: &mut Alloc| PosTables {
            role: a.take(N_ROLES * d),
            row: a.take(c.max_size * d),
            col: a.take(c.max_size * d),
            step: a.take((c.max_states + 1) * d),
        };
        let tok = a.take(VOCAB * d);
        let pos_in = tables(&mut a);
        let pos_query = tables(&mut a);
        let echo = a.take((VOCAB + 1) * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerOff {
                ln1_g: a.take(d),
                ln1_b: a.take(d),
                wq: a.take(d * d),
                wk: a.take(d * d),
                wv: a.take(d * d),
                wo: a.take(d * d),
                ln2_g: a.take(d),
                ln2_b: a.take(d),
                w1: a.take(d * c.d_ff),
                b1: a.take(c.d_ff),
                w2: a.take(c.d_ff * d),
                b2: a.take(d),
            })
            .collect();
        let lnf_g = a.take(d);
        let lnf_b = a.take(d);
        let w_out = a.take(d * VOCAB);
        let b_out = a.take(VOCAB);
        Offsets {
            tok,
            pos_in,
            pos_query,
            echo,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total: a.0,
        }
    }
}

/// Learnable weights. Snapshots are plain clones.
#[derive(Debug, Clone)]
pub struct Params {
    pub config: ModelConfig,
    pub data: Vec<f64>,
    off: Offsets,
}

impl PartialEq for Params {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl Params {
    /// Random initialization with a zero unembedding, so every conditional
    /// starts uniform over the alphabet.
    pub fn init(config: ModelConfig) -> Params {
        let off = Offsets::new(&config);
        let mut data = vec![0.0; off.total];
        let mut r = rng::rng_at(config.seed, &[0x1417]);
        let normal = |std: f64| Normal::new(0.0, std).expect("positive std");
        let base = normal(0.02);
        let resid = normal(0.02 / (2.0 * config.n_layers as f64).sqrt());
        let d = config.d_model;
        let mut fill = |data: &mut Vec<f64>, at: usize, n: usize, dist: &Normal<f64>| {
            for x in &mut data[at..at + n] {
                *x = dist.sample(&mut r);
            }
        };
        fill(&mut data, off.tok, VOCAB * d, &base);
        for t in [off.pos_in, off.pos_query] {
            let n = t.step + (config.max_states + 1) * d - t.role;
            fill(&mut data, t.role, n, &base);
        }
        fill(&mut data, off.echo, (VOCAB + 1) * d, &base);
        for l in &off.layers {
            for w in [l.wq, l.wk, l.wv] {
                fill(&mut data, w, d * d, &base);
            }
            fill(&mut data, l.wo, d * d, &resid);
            fill(&mut data, l.w1, d * config.d_ff, &base);
            fill(&mut data, l.w2, config.d_ff * d, &resid);
            data[l.ln1_g..l.ln1_g + d].fill(1.0);
            data[l.ln2_g..l.ln2_g + d].fill(1.0);
        }
        data[off.lnf_g..off.lnf_g + d].fill(1.0);
        let mut p = Params { config, data, off };
        p.quantize();
        p
    }

    pub fn from_data(config: ModelConfig, data: Vec<f64>) -> Result<Params, PolicyError> {
        let off = Offsets::new(&config);
        if data.len() != off.total {
            return Err(PolicyError::Shape {
                expected: off.total,
                found: data.len(),
            });
        }
        Ok(Params { config, data, off })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Round every weight to the nearest `f32`.
    pub fn quantize(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }

    /// Which coordinates belong to weight matrices (subject to weight decay).
    pub fn decay_mask(&self) -> Vec<bool> {
        let c = &self.config;
        let d = c.d_model;
        let mut m = vec![false; self.data.len()];
        let mut mark = |at: usize, n: usize| m[at..at + n].fill(true);
        for l in &self.off.layers {
            for w in [l.wq, l.wk, l.wv, l.wo] {
                mark(w, d * d);
            }
            mark(l.w1, d * c.d_ff);
            mark(l.w2, c.d_ff * d);
        }
        mark(self.off.w_out, d * VOCAB);
        m
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Fill the unembedding with small random values (used to leave the
    /// uniform starting point, e.g. in gradient checks).
    pub fn randomize_output(&mut self, seed: u64, std: f64) {
        let mut r = rng::rng(seed);
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = self.config.d_model * VOCAB + VOCAB;
        for x in &mut self.data[self.off.w_out..self.off.w_out + n] {
            *x = dist.sample(&mut r);
        }
    }

    fn embed(&self, token: Token, echo: Option<Token>, here: PosFeatures, next: PosFeatures, out: &mut [f64]) {
        let d = self.config.d_model;
        let row = |at: usize, i: usize| &self.data[at + i * d..at + (i + 1) * d];
        let step_cap = self.config.max_states;
        out.copy_from_slice(row(self.off.tok, token as usize));
        for (o, x) in out.iter_mut().zip(row(self.off.echo, echo.map_or(VOCAB, |e| e as usize))) {
            *o += x;
        }
        for (t, f) in [(self.off.pos_in, here), (self.off.pos_query, next)] {
            for v in [
                row(t.role, f.role as usize),
                row(t.row, f.row),
                row(t.col, f.col),
                row(t.step, f.step.min(step_cap)),
            ] {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += x;
                }
            }
        }
    }

    fn embed_grad(
        &self,
        token: Token,
        echo: Option<Token>,
        here: PosFeatures,
        next: PosFeatures,
        dx: &[f64],
        grad: &mut [f64],
    ) {
        let d = self.config.d_model;
        let step_cap = self.config.max_states;
        let mut add = |at: usize, i: usize| {
            for (g, x) in grad[at + i * d..at + (i + 1) * d].iter_mut().zip(dx) {
                *g += x;
            }
        };
        add(self.off.tok, token as usize);
        add(self.off.echo, echo.map_or(VOCAB, |e| e as usize));
        for (t, f) in [(self.off.pos_in, here), (self.off.pos_query, next)] {
            add(t.role, f.role as usize);
            add(t.row, f.row);
            add(t.col, f.col);
            add(t.step, f.step.min(step_cap));
        }
    }

    fn check_frame(&self, frame: Frame, len: usize) -> Result<(), PolicyError> {
        if frame.size > self.config.max_size {
            return Err(PolicyError::GridTooLarge {
                size: frame.size,
                max: self.config.max_size,
            });
        }
        let cap = frame.context_len(self.config.max_states);
        if len > cap {
            return Err(PolicyError::ContextOverflow { len, cap });
        }
        Ok(())
    }
}

// ---- dense kernels ------------------------------------------------------

/// `y[rows x m] = x[rows x n] * w[n x m]`
fn matmul(x: &[f64], w: &[f64], rows: usize, n: usize, m: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * m];
    for i in 0..rows {
        let yr = &mut y[i * m..(i + 1) * m];
        for k in 0..n {
            let a = x[i * n + k];
            if a == 0.0 {
                continue;
            }
            for (o, wv) in yr.iter_mut().zip(&w[k * m..(k + 1) * m]) {
                *o += a * wv;
            }
        }
    }
    y
}

/// Accumulate `dx += dy * w^T` and `dw += x^T * dy`.
#[allow(clippy::too_many_arguments)]
/// Dot product with four interleaved accumulators (vectorizes; the
/// summation order is fixed, so results stay deterministic).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn matmul_back(x: &[f64], w: &[f64], dy: &[f64], rows: usize, n: usize, m: usize, dx: &mut [f64], dw: &mut [f64]) {
    for i in 0..rows {
        let dyr = &dy[i * m..(i + 1) * m];
        for k in 0..n {
            let wr = &w[k * m..(k + 1) * m];
            dx[i * n + k] += dot(dyr, wr);
            let a = x[i * n + k];
            if a != 0.0 {
                for (g, v) in dw[k * m..(k + 1) * m].iter_mut().zip(dyr) {
                    *g += a * v;
                }
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;

struct LnTrace {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], d: usize) -> (Vec<f64>, LnTrace) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for i in 0..rows {
        let xr = &x[i * d..(i + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[i * d + j] = h;
            y[i * d + j] = h * g[j] + b[j];
        }
    }
    (y, LnTrace { xhat, rstd })
}

/// Accumulate into `dx`, `dg`, `db`.
fn layer_norm_back(dy: &[f64], tr: &LnTrace, g: &[f64], d: usize, dx: &mut [f64], dg: &mut [f64], db: &mut [f64]) {
    let rows = dy.len() / d;
    let mut dxhat = vec![0.0; d];
    for i in 0..rows {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &tr.xhat[i * d..(i + 1) * d];
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[i * d + j] += tr.rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

// ---- full-sequence pass ---------------------------------------------------

struct LayerTrace {
    ln1: LnTrace,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LnTrace,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

struct Trace {
    feats: Vec<PosFeatures>,
    layers: Vec<LayerTrace>,
    lnf: LnTrace,
    f: Vec<f64>,
}

fn forward(p: &Params, frame: Frame, tokens: &[Token]) -> Trace {
    let c = &p.config;
    let (d, t, nh, dh) = (c.d_model, tokens.len(), c.n_heads, c.head_dim());
    let feats: Vec<PosFeatures> = (0..=t).map(|i| position_features(frame, i)).collect();
    let mut x = vec![0.0; t * d];
    for i in 0..t {
        p.embed(tokens[i], echo_token(frame, tokens, i), feats[i], feats[i + 1], &mut x[i * d..(i + 1) * d]);
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in &p.off.layers {
        let w = |at: usize, n: usize| &p.data[at..at + n];
        let (a, ln1) = layer_norm(&x, w(l.ln1_g, d), w(l.ln1_b, d), d);
        let q = matmul(&a, w(l.wq, d * d), t, d, d);
        let k = matmul(&a, w(l.wk, d * d), t, d, d);
        let v = matmul(&a, w(l.wv, d * d), t, d, d);
        let mut probs = vec![0.0; nh * t * t];
        let mut o = vec![0.0; t * d];
        for hd in 0..nh {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..t {
                let qi = &q[i * d..][cols.clone()];
                let row = &mut probs[(hd * t + i) * t..(hd * t + i + 1) * t];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[j * d..][cols.clone()];
                    let s = scale * dot(qi, kj);
                    row[j] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for e in row[..=i].iter_mut() {
                    *e = (*e - mx).exp();
                    z += *e;
                }
                for e in row[..=i].iter_mut() {
                    *e /= z;
                }
                let oi = &mut o[i * d..][cols.clone()];
                for j in 0..=i {
                    let pj = row[j];
                    for (acc, vv) in oi.iter_mut().zip(&v[j * d..][cols.clone()]) {
                        *acc += pj * vv;
                    }
                }
            }
        }
        let attn = matmul(&o, w(l.wo, d * d), t, d, d);
        let h: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let (b, ln2) = layer_norm(&h, w(l.ln2_g, d), w(l.ln2_b, d), d);
        let mut u = matmul(&b, w(l.w1, d * c.d_ff), t, d, c.d_ff);
        for i in 0..t {
            for (uu, bb) in u[i * c.d_ff..(i + 1) * c.d_ff].iter_mut().zip(w(l.b1, c.d_ff)) {
                *uu += bb;
            }
        }
        let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
        let mlp = matmul(&g, w(l.w2, c.d_ff * d), t, c.d_ff, d);
        let mut next = h.clone();
        for i in 0..t {
            for j in 0..d {
                next[i * d + j] += mlp[i * d + j] + p.data[l.b2 + j];
            }
        }
        x = next;
        layers.push(LayerTrace {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            b,
            u,
            g,
        });
    }
    let (f, lnf) = layer_norm(&x, &p.data[p.off.lnf_g..p.off.lnf_g + d], &p.data[p.off.lnf_b..p.off.lnf_b + d], d);
    Trace { feats, layers, lnf, f }
}

fn logits_row(p: &Params, f: &[f64]) -> Vec<f64> {
    let d = p.config.d_model;
    let mut out = p.data[p.off.b_out..p.off.b_out + VOCAB].to_vec();
    for (k, &a) in f.iter().enumerate().take(d) {
        for (o, w) in out.iter_mut().zip(&p.data[p.off.w_out + k * VOCAB..p.off.w_out + (k + 1) * VOCAB]) {
            *o += a * w;
        }
    }
    out
}

/// Gradient w.r.t. the weights, given `df` = d(objective)/d(final LN output).
fn backward(p: &Params, frame: Frame, tokens: &[Token], tr: &Trace, df: &[f64], grad: &mut [f64]) {
    let c = &p.config;
    let (d, t, nh, dh) = (c.d_model, tokens.len(), c.n_heads, c.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dx = vec![0.0; t * d];
    {
        let (g_part, rest) = grad.split_at_mut(p.off.lnf_b);
        layer_norm_back(
            df,
            &tr.lnf,
            &p.data[p.off.lnf_g..p.off.lnf_g + d],
            d,
            &mut dx,
            &mut g_part[p.off.lnf_g..p.off.lnf_g + d],
            &mut rest[..d],
        );
    }
    for (l, lt) in p.off.layers.iter().zip(&tr.layers).rev() {
        let w = |at: usize, n: usize| &p.data[at..at + n];
        // MLP branch: next = h + g W2 + b2
        let dnext = dx;
        let mut dh_res = dnext.clone();
        for i in 0..t {
            for j in 0..d {
                grad[l.b2 + j] += dnext[i * d + j];
            }
        }
        let mut dg = vec![0.0; t * c.d_ff];
        matmul_back(&lt.g, w(l.w2, c.d_ff * d), &dnext, t, c.d_ff, d, &mut dg, &mut grad[l.w2..l.w2 + c.d_ff * d]);
        let du: Vec<f64> = dg.iter().zip(&lt.u).map(|(g, &u)| g * gelu_grad(u)).collect();
        for i in 0..t {
            for j in 0..c.d_ff {
                grad[l.b1 + j] += du[i * c.d_ff + j];
            }
        }
        let mut db = vec![0.0; t * d];
        matmul_back(&lt.b, w(l.w1, d * c.d_ff), &du, t, d, c.d_ff, &mut db, &mut grad[l.w1..l.w1 + d * c.d_ff]);
        let (mut dg2, mut db2) = (vec![0.0; d], vec![0.0; d]);
        layer_norm_back(&db, &lt.ln2, w(l.ln2_g, d), d, &mut dh_res, &mut dg2, &mut db2);
        add_into(grad, l.ln2_g, &dg2);
        add_into(grad, l.ln2_b, &db2);
        // attention branch: h = x + o Wo
        let dh_total = dh_res;
        let mut dx_res = dh_total.clone();
        let mut do_ = vec![0.0; t * d];
        matmul_back(&lt.o, w(l.wo, d * d), &dh_total, t, d, d, &mut do_, &mut grad[l.wo..l.wo + d * d]);
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for hd in 0..nh {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..t {
                let row = &lt.probs[(hd * t + i) * t..(hd * t + i + 1) * t];
                let doi = &do_[i * d..][cols.clone()];
                let mut pd = 0.0;
                for j in 0..=i {
                    let vj = &lt.v[j * d..][cols.clone()];
                    dp[j] = dot(doi, vj);
                    pd += row[j] * dp[j];
                    for (g, a) in dv[j * d..][cols.clone()].iter_mut().zip(doi) {
                        *g += row[j] * a;
                    }
                }
                for j in 0..=i {
                    let ds = row[j] * (dp[j] - pd) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for (g, kk) in dq[i * d..][cols.clone()].iter_mut().zip(&lt.k[j * d..][cols.clone()]) {
                        *g += ds * kk;
                    }
                    for (g, qq) in dk[j * d..][cols.clone()].iter_mut().zip(&lt.q[i * d..][cols.clone()]) {
                        *g += ds * qq;
                    }
                }
            }
        }
        let mut da = vec![0.0; t * d];
        matmul_back(&lt.a, w(l.wq, d * d), &dq, t, d, d, &mut da, &mut grad[l.wq..l.wq + d * d]);
        matmul_back(&lt.a, w(l.wk, d * d), &dk, t, d, d, &mut da, &mut grad[l.wk..l.wk + d * d]);
        matmul_back(&lt.a, w(l.wv, d * d), &dv, t, d, d, &mut da, &mut grad[l.wv..l.wv + d * d]);
        let (mut dg1, mut db1) = (vec![0.0; d], vec![0.0; d]);
        layer_norm_back(&da, &lt.ln1, w(l.ln1_g, d), d, &mut dx_res, &mut dg1, &mut db1);
        add_into(grad, l.ln1_g, &dg1);
        add_into(grad, l.ln1_b, &db1);
        dx = dx_res;
    }
    for i in 0..t {
        p.embed_grad(
            tokens[i],
            echo_token(frame, tokens, i),
            tr.feats[i],
            tr.feats[i + 1],
            &dx[i * d..(i + 1) * d],
            grad,
        );
    }
}

/// Token of the previous state at the cell the next position will fill, so
/// every prediction sees what that cell held one step earlier.
fn echo_token(frame: Frame, tokens: &[Token], i: usize) -> Option<Token> {
    let block = frame.state_len() + 1;
    let target = i + 1;
    if target <= block || (target - 1) % block == frame.state_len() {
        return None;
    }
    tokens.get(target - block).copied()
}

fn add_into(grad: &mut [f64], at: usize, v: &[f64]) {
    for (g, x) in grad[at..at + v.len()].iter_mut().zip(v) {
        *g += x;
    }
}

/// Per-token log-probabilities of `tokens[first..]`, and optionally the
/// gradient of `Σ weights[j] * logp[j]` over those tokens.
pub(crate) fn score(
    p: &Params,
    frame: Frame,
    tokens: &[Token],
    first: usize,
    weights: Option<&[f64]>,
) -> Result<(Vec<f64>, Option<Vec<f64>>), PolicyError> {
    if first == 0 || first > tokens.len() {
        return Err(PolicyError::EmptyPrefix);
    }
    p.check_frame(frame, tokens.len())?;
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= VOCAB) {
        return Err(PolicyError::BadToken(bad));
    }
    let d = p.config.d_model;
    let n = tokens.len() - first;
    if let Some(w) = weights {
        if w.len() != n || w.iter().any(|x| !x.is_finite()) {
            return Err(PolicyError::NonFinite("token weights".into()));
        }
    }
    let tr = forward(p, frame, tokens);
    let mut logps = Vec::with_capacity(n);
    let mut dlogits = Vec::with_capacity(if weights.is_some() { n } else { 0 });
    for j in first..tokens.len() {
        let lp = log_softmax(&logits_row(p, &tr.f[(j - 1) * d..j * d]));
        let target = tokens[j] as usize;
        logps.push(lp[target]);
        if let Some(w) = weights {
            let wj = w[j - first];
            let mut dl: Vec<f64> = lp.iter().map(|v| -wj * v.exp()).collect();
            dl[target] += wj;
            dlogits.push(dl);
        }
    }
    if logps.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::NonFinite("log-probability".into()));
    }
    if weights.is_none() {
        return Ok((logps, None));
    }
    let mut grad = vec![0.0; p.len()];
    let mut df = vec![0.0; tokens.len() * d];
    for (idx, j) in (first..tokens.len()).enumerate() {
        let f = &tr.f[(j - 1) * d..j * d];
        let dl = &dlogits[idx];
        for k in 0..d {
            let wrow = &p.data[p.off.w_out + k * VOCAB..p.off.w_out + (k + 1) * VOCAB];
            df[(j - 1) * d + k] = dot(wrow, dl);
            for (g, v) in grad[p.off.w_out + k * VOCAB..p.off.w_out + (k + 1) * VOCAB].iter_mut().zip(dl) {
                *g += f[k] * v;
            }
        }
        add_into(&mut grad, p.off.b_out, dl);
    }
    backward(p, frame, tokens, &tr, &df, &mut grad);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(PolicyError::NonFinite("gradient".into()));
    }
    Ok((logps, Some(grad)))
}

// ---- incremental decoding -------------------------------------------------

/// Key/value cache for left-to-right decoding.
#[derive(Clone)]
pub struct Decoder<'a> {
    p: &'a Params,
    frame: Frame,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    tokens: Vec<Token>,
    logits: Vec<f64>,
}

impl<'a> Decoder<'a> {
    pub fn new(p: &'a Params, frame: Frame) -> Decoder<'a> {
        Decoder {
            p,
            frame,
            keys: vec![Vec::new(); p.config.n_layers],
            values: vec![Vec::new(); p.config.n_layers],
            len: 0,
            tokens: Vec::new(),
            logits: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Logits for the token following everything pushed so far.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn push(&mut self, token: Token) -> Result<(), PolicyError> {
        let p = self.p;
        p.check_frame(self.frame, self.len + 1)?;
        if token as usize >= VOCAB {
            return Err(PolicyError::BadToken(token));
        }
        let c = &p.config;
        let (d, nh, dh) = (c.d_model, c.n_heads, c.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = vec![0.0; d];
        self.tokens.push(token);
        p.embed(
            token,
            echo_token(self.frame, &self.tokens, self.len),
            position_features(self.frame, self.len),
            position_features(self.frame, self.len + 1),
            &mut x,
        );
        let n = self.len + 1;
        for (li, l) in p.off.layers.iter().enumerate() {
            let w = |at: usize, k: usize| &p.data[at..at + k];
            let (a, _) = layer_norm(&x, w(l.ln1_g, d), w(l.ln1_b, d), d);
            let q = matmul(&a, w(l.wq, d * d), 1, d, d);
            self.keys[li].extend(matmul(&a, w(l.wk, d * d), 1, d, d));
            self.values[li].extend(matmul(&a, w(l.wv, d * d), 1, d, d));
            let (ks, vs) = (&self.keys[li], &self.values[li]);
            let mut o = vec![0.0; d];
            let mut s = vec![0.0; n];
            for hd in 0..nh {
                let cols = hd * dh..(hd + 1) * dh;
                let qh = &q[cols.clone()];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    s[j] = scale * dot(qh, &ks[j * d..][cols.clone()]);
                    mx = mx.max(s[j]);
                }
                let mut z = 0.0;
                for e in s.iter_mut() {
                    *e = (*e - mx).exp();
                    z += *e;
                }
                for j in 0..n {
                    let pj = s[j] / z;
                    for (acc, vv) in o[cols.clone()].iter_mut().zip(&vs[j * d..][cols.clone()]) {
                        *acc += pj * vv;
                    }
                }
            }
            let attn = matmul(&o, w(l.wo, d * d), 1, d, d);
            for (xx, a) in x.iter_mut().zip(&attn) {
                *xx += a;
            }
            let (b, _) = layer_norm(&x, w(l.ln2_g, d), w(l.ln2_b, d), d);
            let mut u = matmul(&b, w(l.w1, d * c.d_ff), 1, d, c.d_ff);
            for (uu, bb) in u.iter_mut().zip(w(l.b1, c.d_ff)) {
                *uu = gelu(*uu + bb);
            }
            let mlp = matmul(&u, w(l.w2, c.d_ff * d), 1, c.d_ff, d);
            for j in 0..d {
                x[j] += mlp[j] + p.data[l.b2 + j];
            }
        }
        let (f, _) = layer_norm(&x, &p.data[p.off.lnf_g..p.off.lnf_g + d], &p.data[p.off.lnf_b..p.off.lnf_b + d], d);
        self.logits = logits_row(p, &f);
        self.len = n;
        Ok(())
    }
}

pub(crate) fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    log_softmax(&scaled).into_iter().map(f64::exp).collect()
}
