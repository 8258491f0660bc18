//! Reference encoder-decoder: token embeddings, a GRU encoder, a GRU decoder
//! with dot-product attention over encoder states, and an output projection
//! tied to the embedding matrix.
//!
//! All parameters live in one flat vector; [`Layout`] maps named tensors to
//! offsets. The backward pass is written out by hand and checked against
//! central finite differences in the tests.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{log_softmax, Seq2Seq};
use crate::corpus::{ExamplePair, TokenId, BOS, EOS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    /// Embedding and hidden width (they are equal because the output
    /// projection reuses the embedding matrix).
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Mat {
    off: usize,
    rows: usize,
    cols: usize,
}

impl Mat {
    /// out += W x
    fn mul_add(&self, p: &[f64], x: &[f64], out: &mut [f64]) {
        let w = &p[self.off..self.off + self.rows * self.cols];
        for (o, row) in out.iter_mut().zip(w.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// out += Wᵀ y
    fn mul_t_add(&self, p: &[f64], y: &[f64], out: &mut [f64]) {
        let w = &p[self.off..self.off + self.rows * self.cols];
        for (&yi, row) in y.iter().zip(w.chunks_exact(self.cols)) {
            axpy(yi, row, out);
        }
    }

    /// G += y xᵀ
    fn outer_add(&self, g: &mut [f64], y: &[f64], x: &[f64]) {
        let w = &mut g[self.off..self.off + self.rows * self.cols];
        for (&yi, row) in y.iter().zip(w.chunks_exact_mut(self.cols)) {
            axpy(yi, x, row);
        }
    }

    fn row<'p>(&self, p: &'p [f64], r: usize) -> &'p [f64] {
        &p[self.off + r * self.cols..self.off + (r + 1) * self.cols]
    }

    fn row_mut<'p>(&self, p: &'p mut [f64], r: usize) -> &'p mut [f64] {
        &mut p[self.off + r * self.cols..self.off + (r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy)]
struct Vector {
    off: usize,
    len: usize,
}

impl Vector {
    fn get<'p>(&self, p: &'p [f64]) -> &'p [f64] {
        &p[self.off..self.off + self.len]
    }

    fn add(&self, g: &mut [f64], v: &[f64]) {
        axpy(1.0, v, &mut g[self.off..self.off + self.len]);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy)]
struct GruLayout {
    wz: Mat,
    wr: Mat,
    wn: Mat,
    uz: Mat,
    ur: Mat,
    un: Mat,
    bz: Vector,
    br: Vector,
    bn: Vector,
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: Mat,
    encoder: GruLayout,
    decoder: GruLayout,
    combine_w: Mat,
    combine_b: Vector,
    out_b: Vector,
    specs: Vec<TensorSpec>,
    total: usize,
}

impl Layout {
    fn new(dims: ModelDims) -> Self {
        let (v, d) = (dims.vocab, dims.hidden);
        let mut specs = Vec::new();
        let mut off = 0;
        let mut mat = |name: &str, rows: usize, cols: usize| {
            specs.push(TensorSpec {
                name: name.to_string(),
                shape: if cols == 0 { vec![rows] } else { vec![rows, cols] },
            });
            let m = Mat { off, rows, cols: cols.max(1) };
            off += rows * cols.max(1);
            m
        };
        let embedding = mat("embedding", v, d);
        let mut gru = |prefix: &str| {
            let mut g = |n: &str, cols: usize| mat(&format!("{prefix}.{n}"), d, cols);
            let (wz, wr, wn) = (g("w_z", d), g("w_r", d), g("w_n", d));
            let (uz, ur, un) = (g("u_z", d), g("u_r", d), g("u_n", d));
            let vec = |m: Mat| Vector { off: m.off, len: m.rows };
            let (bz, br, bn) = (vec(g("b_z", 0)), vec(g("b_r", 0)), vec(g("b_n", 0)));
            GruLayout { wz, wr, wn, uz, ur, un, bz, br, bn }
        };
        let encoder = gru("encoder");
        let decoder = gru("decoder");
        let combine_w = mat("combine.w", d, 2 * d);
        let cb = mat("combine.b", d, 0);
        let ob = mat("output.b", v, 0);
        Layout {
            embedding,
            encoder,
            decoder,
            combine_w,
            combine_b: Vector { off: cb.off, len: d },
            out_b: Vector { off: ob.off, len: v },
            specs,
            total: off,
        }
    }
}

/// Forward values of one GRU step, kept for the backward pass.
#[derive(Debug, Clone)]
struct GruStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    /// U_n h_prev
    u: Vec<f64>,
    n: Vec<f64>,
    h: Vec<f64>,
}

fn gru_forward(g: &GruLayout, p: &[f64], x: &[f64], h_prev: &[f64]) -> GruStep {
    let d = h_prev.len();
    let gate = |w: Mat, u: Mat, b: Vector| {
        let mut a = b.get(p).to_vec();
        w.mul_add(p, x, &mut a);
        u.mul_add(p, h_prev, &mut a);
        a.iter().map(|&v| sigmoid(v)).collect::<Vec<_>>()
    };
    let z = gate(g.wz, g.uz, g.bz);
    let r = gate(g.wr, g.ur, g.br);
    let mut u = vec![0.0; d];
    g.un.mul_add(p, h_prev, &mut u);
    let mut n = g.bn.get(p).to_vec();
    g.wn.mul_add(p, x, &mut n);
    for i in 0..d {
        n[i] = (n[i] + r[i] * u[i]).tanh();
    }
    let h = (0..d).map(|i| (1.0 - z[i]) * n[i] + z[i] * h_prev[i]).collect();
    GruStep {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        z,
        r,
        u,
        n,
        h,
    }
}

/// Accumulates parameter gradients into `grad`; returns (dx, dh_prev).
fn gru_backward(
    g: &GruLayout,
    p: &[f64],
    grad: &mut [f64],
    s: &GruStep,
    dh: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = dh.len();
    let mut dx = vec![0.0; s.x.len()];
    let mut dh_prev: Vec<f64> = (0..d).map(|i| dh[i] * s.z[i]).collect();

    let dn_pre: Vec<f64> = (0..d)
        .map(|i| dh[i] * (1.0 - s.z[i]) * (1.0 - s.n[i] * s.n[i]))
        .collect();
    let dz_pre: Vec<f64> = (0..d)
        .map(|i| dh[i] * (s.h_prev[i] - s.n[i]) * s.z[i] * (1.0 - s.z[i]))
        .collect();
    let dr_pre: Vec<f64> = (0..d)
        .map(|i| dn_pre[i] * s.u[i] * s.r[i] * (1.0 - s.r[i]))
        .collect();
    let du: Vec<f64> = (0..d).map(|i| dn_pre[i] * s.r[i]).collect();

    g.wn.outer_add(grad, &dn_pre, &s.x);
    g.bn.add(grad, &dn_pre);
    g.wn.mul_t_add(p, &dn_pre, &mut dx);
    g.un.outer_add(grad, &du, &s.h_prev);
    g.un.mul_t_add(p, &du, &mut dh_prev);

    for (w, u, b, pre) in [(g.wr, g.ur, g.br, &dr_pre), (g.wz, g.uz, g.bz, &dz_pre)] {
        w.outer_add(grad, pre, &s.x);
        u.outer_add(grad, pre, &s.h_prev);
        b.add(grad, pre);
        w.mul_t_add(p, pre, &mut dx);
        u.mul_t_add(p, pre, &mut dh_prev);
    }
    (dx, dh_prev)
}

/// Forward values of one decoder output step.
#[derive(Debug, Clone)]
struct OutStep {
    alpha: Vec<f64>,
    /// [s; context]
    joined: Vec<f64>,
    o: Vec<f64>,
    logprobs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RnnModel {
    dims: ModelDims,
    params: Vec<f64>,
    layout: Layout,
}

impl PartialEq for RnnModel {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.params == other.params
    }
}

/// Decoder state for incremental decoding.
#[derive(Debug, Clone)]
pub struct RnnState {
    encoded: Arc<Vec<Vec<f64>>>,
    hidden: Vec<f64>,
}

impl RnnModel {
    /// Seeded random initialization (the desk-scale "pretrained" stage).
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.vocab < 5 || dims.hidden == 0 {
            return Err(Error::Config(format!("invalid model dims {dims:?}")));
        }
        let layout = Layout::new(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.hidden as f64;
        let mut params = vec![0.0; layout.total];
        let mut fill = |m: Mat, scale: f64| {
            for v in &mut params[m.off..m.off + m.rows * m.cols] {
                *v = rng.gen_range(-scale..scale);
            }
        };
        fill(layout.embedding, 0.5 / d.sqrt());
        for g in [layout.encoder, layout.decoder] {
            for m in [g.wz, g.wr, g.wn, g.uz, g.ur, g.un] {
                fill(m, 1.0 / d.sqrt());
            }
        }
        fill(layout.combine_w, 1.0 / (2.0 * d).sqrt());
        Ok(RnnModel {
            dims,
            params,
            layout,
        })
    }

    pub fn from_params(dims: ModelDims, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(dims);
        if params.len() != layout.total {
            return Err(Error::Data(format!(
                "expected {} parameters for {dims:?}, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(RnnModel {
            dims,
            params,
            layout,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Replaces the parameters; the length must not change.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn manifest(dims: ModelDims) -> Vec<TensorSpec> {
        Layout::new(dims).specs
    }

    pub fn num_params(dims: ModelDims) -> usize {
        Layout::new(dims).total
    }

    fn embed(&self, layout: &Layout, p: &[f64], tok: TokenId) -> Vec<f64> {
        layout.embedding.row(p, tok as usize).to_vec()
    }

    fn encode(&self, layout: &Layout, p: &[f64], source: &[TokenId]) -> Vec<GruStep> {
        let mut h = vec![0.0; self.dims.hidden];
        let mut steps = Vec::with_capacity(source.len());
        for &tok in source {
            let x = self.embed(layout, p, tok);
            let step = gru_forward(&layout.encoder, p, &x, &h);
            h = step.h.clone();
            steps.push(step);
        }
        steps
    }

    fn output(&self, layout: &Layout, p: &[f64], s: &[f64], encoded: &[Vec<f64>]) -> OutStep {
        let d = self.dims.hidden;
        let scores: Vec<f64> = encoded.iter().map(|h| dot(s, h)).collect();
        let alpha = if scores.is_empty() {
            Vec::new()
        } else {
            log_softmax(&scores).into_iter().map(f64::exp).collect()
        };
        let mut joined = s.to_vec();
        joined.resize(2 * d, 0.0);
        for (a, h) in alpha.iter().zip(encoded) {
            axpy(*a, h, &mut joined[d..]);
        }
        let mut o = layout.combine_b.get(p).to_vec();
        layout.combine_w.mul_add(p, &joined, &mut o);
        o.iter_mut().for_each(|v| *v = v.tanh());
        let mut logits = layout.out_b.get(p).to_vec();
        layout.embedding.mul_add(p, &o, &mut logits);
        OutStep {
            alpha,
            joined,
            o,
            logprobs: log_softmax(&logits),
        }
    }

    fn initial_hidden(&self, encoded: &[Vec<f64>]) -> Vec<f64> {
        encoded
            .last()
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.dims.hidden])
    }

    /// Total teacher-forced NLL of a batch (EOS included) and the number of
    /// predicted tokens. With `grad` set, accumulates the gradient of the
    /// total NLL into it.
    pub(crate) fn batch_nll(
        &self,
        params: &[f64],
        batch: &[ExamplePair],
        mut grad: Option<&mut [f64]>,
    ) -> Result<(f64, usize)> {
        let layout = &self.layout;
        let mut total = 0.0;
        let mut count = 0;
        for ex in batch {
            if ex.target.is_empty() {
                return Err(Error::Contract(format!("example {}: empty target", ex.index)));
            }
            let vocab = self.dims.vocab;
            if let Some(id) = ex
                .source
                .ids()
                .iter()
                .chain(ex.target.ids())
                .find(|&&id| id as usize >= vocab)
            {
                return Err(Error::VocabMismatch(format!(
                    "example {}: token id {id} outside a vocabulary of {vocab}",
                    ex.index
                )));
            }
            let nll = self.example_nll(layout, params, ex, grad.as_deref_mut());
            total += nll;
            count += ex.target.len() + 1;
        }
        Ok((total, count))
    }

    fn example_nll(
        &self,
        layout: &Layout,
        p: &[f64],
        ex: &ExamplePair,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let d = self.dims.hidden;
        let enc_steps = self.encode(layout, p, ex.source.ids());
        let encoded: Vec<Vec<f64>> = enc_steps.iter().map(|s| s.h.clone()).collect();
        let inputs: Vec<TokenId> = std::iter::once(BOS).chain(ex.target.ids().iter().copied()).collect();
        let outputs: Vec<TokenId> = ex.target.ids().iter().copied().chain([EOS]).collect();

        let mut s = self.initial_hidden(&encoded);
        let mut dec_steps = Vec::with_capacity(inputs.len());
        let mut out_steps = Vec::with_capacity(inputs.len());
        let mut nll = 0.0;
        for (&inp, &tgt) in inputs.iter().zip(&outputs) {
            let x = self.embed(layout, p, inp);
            let step = gru_forward(&layout.decoder, p, &x, &s);
            s = step.h.clone();
            let out = self.output(layout, p, &s, &encoded);
            nll -= out.logprobs[tgt as usize];
            dec_steps.push(step);
            out_steps.push(out);
        }

        let Some(g) = grad else {
            return nll;
        };

        let mut d_enc = vec![vec![0.0; d]; encoded.len()];
        let mut ds_carry = vec![0.0; d];
        for t in (0..inputs.len()).rev() {
            let out = &out_steps[t];
            let step = &dec_steps[t];
            let mut dlogits: Vec<f64> = out.logprobs.iter().map(|lp| lp.exp()).collect();
            dlogits[outputs[t] as usize] -= 1.0;

            layout.out_b.add(g, &dlogits);
            let mut d_o = vec![0.0; d];
            for (v, &dl) in dlogits.iter().enumerate() {
                axpy(dl, &out.o, layout.embedding.row_mut(g, v));
                axpy(dl, layout.embedding.row(p, v), &mut d_o);
            }
            let d_pre: Vec<f64> = d_o
                .iter()
                .zip(&out.o)
                .map(|(g_, o)| g_ * (1.0 - o * o))
                .collect();
            layout.combine_w.outer_add(g, &d_pre, &out.joined);
            layout.combine_b.add(g, &d_pre);
            let mut d_joined = vec![0.0; 2 * d];
            layout.combine_w.mul_t_add(p, &d_pre, &mut d_joined);
            let (ds_out, d_ctx) = d_joined.split_at(d);

            let mut ds: Vec<f64> = ds_out.to_vec();
            if !encoded.is_empty() {
                let d_alpha: Vec<f64> = encoded.iter().map(|h| dot(d_ctx, h)).collect();
                let mean: f64 = out.alpha.iter().zip(&d_alpha).map(|(a, da)| a * da).sum();
                for (i, h) in encoded.iter().enumerate() {
                    let a = out.alpha[i];
                    axpy(a, d_ctx, &mut d_enc[i]);
                    let d_score = a * (d_alpha[i] - mean);
                    axpy(d_score, h, &mut ds);
                    axpy(d_score, &step.h, &mut d_enc[i]);
                }
            }
            axpy(1.0, &ds_carry, &mut ds);
            let (dx, dh_prev) = gru_backward(&layout.decoder, p, g, step, &ds);
            axpy(1.0, &dx, layout.embedding.row_mut(g, inputs[t] as usize));
            ds_carry = dh_prev;
        }

        if let Some(last) = d_enc.last_mut() {
            axpy(1.0, &ds_carry, last);
        }
        let mut dh_carry = vec![0.0; d];
        for (i, step) in enc_steps.iter().enumerate().rev() {
            let mut dh = d_enc[i].clone();
            axpy(1.0, &dh_carry, &mut dh);
            let (dx, dh_prev) = gru_backward(&layout.encoder, p, g, step, &dh);
            axpy(1.0, &dx, layout.embedding.row_mut(g, ex.source.ids()[i] as usize));
            dh_carry = dh_prev;
        }
        nll
    }

    fn step(&self, layout: &Layout, encoded: &Arc<Vec<Vec<f64>>>, hidden: &[f64], token: TokenId) -> (RnnState, Vec<f64>) {
        let p = &self.params;
        let x = self.embed(layout, p, token);
        let g = gru_forward(&layout.decoder, p, &x, hidden);
        let out = self.output(layout, p, &g.h, encoded);
        (
            RnnState {
                encoded: Arc::clone(encoded),
                hidden: g.h,
            },
            out.logprobs,
        )
    }
}

impl Seq2Seq for RnnModel {
    type State = RnnState;

    fn vocab_size(&self) -> usize {
        self.dims.vocab
    }

    fn start(&self, source: &[TokenId]) -> Result<(RnnState, Vec<f64>)> {
        super::check_ids(self.dims.vocab, source, "source")?;
        let layout = &self.layout;
        let encoded: Vec<Vec<f64>> = self
            .encode(layout, &self.params, source)
            .into_iter()
            .map(|s| s.h)
            .collect();
        let hidden = self.initial_hidden(&encoded);
        Ok(self.step(layout, &Arc::new(encoded), &hidden, BOS))
    }

    fn advance(&self, state: &RnnState, token: TokenId) -> (RnnState, Vec<f64>) {
        self.step(&self.layout, &state.encoded, &state.hidden, token)
    }
}
