//! Frozen inference path.
//!
//! [`ModelSnapshot`] holds plain weight vectors extracted from a
//! [`ParamSet`]; it is immutable, `Sync`, and shared by parallel rollout
//! workers. Every operation mirrors the tape builders in [`super::graph`]
//! op-for-op using the same kernels, so the two paths agree bitwise (there
//! is a test for that).

use crate::autodiff::kernels::{layer_norm_row, mm, sigmoid, softmax_row, softplus};
use crate::nn::ParamSet;

use super::{
    ContextVector, GaussianTransition, ModelConfig, ADM_OUT_DIM, ADM_STATE_FEAT_DIM, DELTA_NORM,
    FEATURE_NORM, STATE_DELTA_DIM, TRANSITION_FEAT_DIM,
};

#[derive(Debug, Clone)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn from_param(ps: &ParamSet, name: &str) -> Mat {
        let t = ps.get(name);
        let (rows, cols) = t.rows_cols();
        Mat { rows, cols, data: t.data.clone() }
    }
}

/// `x [n x in] * w [in x out] + b`, row-major.
fn linear(x: &[f64], n: usize, w: &Mat, b: &Mat, out: &mut Vec<f64>) {
    out.resize(n * w.cols, 0.0);
    mm(x, &w.data, n, w.rows, w.cols, out);
    for row in out.chunks_mut(w.cols) {
        for (o, &bv) in row.iter_mut().zip(b.data.iter()) {
            *o += bv;
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayerW {
    wq: Mat,
    bq: Mat,
    wk: Mat,
    bk: Mat,
    wv: Mat,
    bv: Mat,
    wo: Mat,
    bo: Mat,
    ln1_g: Mat,
    ln1_b: Mat,
    ff1_w: Mat,
    ff1_b: Mat,
    ff2_w: Mat,
    ff2_b: Mat,
    ln2_g: Mat,
    ln2_b: Mat,
}

impl EncoderLayerW {
    fn from_params(ps: &ParamSet, prefix: &str) -> Self {
        let m = |suffix: &str| Mat::from_param(ps, &format!("{prefix}.{suffix}"));
        EncoderLayerW {
            wq: m("attn.q.w"),
            bq: m("attn.q.b"),
            wk: m("attn.k.w"),
            bk: m("attn.k.b"),
            wv: m("attn.v.w"),
            bv: m("attn.v.b"),
            wo: m("attn.o.w"),
            bo: m("attn.o.b"),
            ln1_g: m("ln1.g"),
            ln1_b: m("ln1.b"),
            ff1_w: m("ff1.w"),
            ff1_b: m("ff1.b"),
            ff2_w: m("ff2.w"),
            ff2_b: m("ff2.b"),
            ln2_g: m("ln2.g"),
            ln2_b: m("ln2.b"),
        }
    }
}

/// Immutable weights of both networks plus the architecture they assume.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    pub cfg: ModelConfig,
    embed_w: Mat,
    embed_b: Mat,
    sys: Mat,
    layers: Vec<EncoderLayerW>,
    ctx_w: Mat,
    ctx_b: Mat,
    lstm_w: Mat,
    lstm_b: Mat,
    head1_w: Mat,
    head1_b: Mat,
    head2_w: Mat,
    head2_b: Mat,
}

impl ModelSnapshot {
    pub fn from_params(cfg: &ModelConfig, ps: &ParamSet) -> Self {
        ModelSnapshot {
            cfg: cfg.clone(),
            embed_w: Mat::from_param(ps, "sit.embed.w"),
            embed_b: Mat::from_param(ps, "sit.embed.b"),
            sys: Mat::from_param(ps, "sit.sys"),
            layers: (0..cfg.sit_layers)
                .map(|l| EncoderLayerW::from_params(ps, &format!("sit.l{l}")))
                .collect(),
            ctx_w: Mat::from_param(ps, "sit.ctx.w"),
            ctx_b: Mat::from_param(ps, "sit.ctx.b"),
            lstm_w: Mat::from_param(ps, "adm.lstm.w"),
            lstm_b: Mat::from_param(ps, "adm.lstm.b"),
            head1_w: Mat::from_param(ps, "adm.head1.w"),
            head1_b: Mat::from_param(ps, "adm.head1.b"),
            head2_w: Mat::from_param(ps, "adm.head2.w"),
            head2_b: Mat::from_param(ps, "adm.head2.b"),
        }
    }

    /// Encodes a capped feature sequence into a context vector. Exactly
    /// permutation-invariant up to floating-point summation order.
    pub fn sit_encode(&self, feats: &[[f64; TRANSITION_FEAT_DIM]]) -> ContextVector {
        let d = self.cfg.sit_width;
        let mut seq: Vec<f64>;
        let n;
        if feats.is_empty() {
            seq = self.sys.data.clone();
            n = 1;
        } else {
            let inv: Vec<f64> = FEATURE_NORM.iter().map(|s| 1.0 / s).collect();
            let flat: Vec<f64> = feats
                .iter()
                .flat_map(|row| row.iter().zip(inv.iter()).map(|(&v, &s)| v * s))
                .collect();
            let mut embedded = Vec::new();
            linear(&flat, feats.len(), &self.embed_w, &self.embed_b, &mut embedded);
            n = feats.len() + 1;
            seq = Vec::with_capacity(n * d);
            seq.extend_from_slice(&self.sys.data);
            seq.extend_from_slice(&embedded);
        }
        for layer in &self.layers {
            seq = self.encoder_layer(&seq, n, layer);
        }
        // Mean pool over rows, then project to the context width.
        let mut pooled = vec![0.0; d];
        for row in seq.chunks(d) {
            for (o, &v) in pooled.iter_mut().zip(row.iter()) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        for o in pooled.iter_mut() {
            *o *= inv;
        }
        let mut ctx = Vec::new();
        linear(&pooled, 1, &self.ctx_w, &self.ctx_b, &mut ctx);
        for v in ctx.iter_mut() {
            *v = v.tanh();
        }
        ContextVector(ctx)
    }

    fn encoder_layer(&self, x: &[f64], n: usize, w: &EncoderLayerW) -> Vec<f64> {
        let d = self.cfg.sit_width;
        let heads = self.cfg.sit_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        linear(x, n, &w.wq, &w.bq, &mut q);
        linear(x, n, &w.wk, &w.bk, &mut k);
        linear(x, n, &w.wv, &w.bv, &mut v);

        let mut merged = vec![0.0; n * d];
        let mut qh = vec![0.0; n * dh];
        let mut kh = vec![0.0; n * dh];
        let mut vh = vec![0.0; n * dh];
        let mut kt = vec![0.0; dh * n];
        let mut scores = vec![0.0; n * n];
        let mut oh = vec![0.0; n * dh];
        for h in 0..heads {
            for i in 0..n {
                qh[i * dh..(i + 1) * dh].copy_from_slice(&q[i * d + h * dh..i * d + (h + 1) * dh]);
                kh[i * dh..(i + 1) * dh].copy_from_slice(&k[i * d + h * dh..i * d + (h + 1) * dh]);
                vh[i * dh..(i + 1) * dh].copy_from_slice(&v[i * d + h * dh..i * d + (h + 1) * dh]);
            }
            for i in 0..n {
                for j in 0..dh {
                    kt[j * n + i] = kh[i * dh + j];
                }
            }
            mm(&qh, &kt, n, dh, n, &mut scores);
            for s in scores.iter_mut() {
                *s *= scale;
            }
            for row in scores.chunks_mut(n) {
                softmax_row(row);
            }
            mm(&scores, &vh, n, n, dh, &mut oh);
            for i in 0..n {
                merged[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
        }
        let mut attn_out = Vec::new();
        linear(&merged, n, &w.wo, &w.bo, &mut attn_out);

        // Residual + layer norm, FFN, residual + layer norm (post-norm).
        let mut x1 = vec![0.0; n * d];
        for ((o, &a), &b) in x1.iter_mut().zip(x.iter()).zip(attn_out.iter()) {
            *o = a + b;
        }
        let mut normed1 = vec![0.0; n * d];
        for (orow, xrow) in normed1.chunks_mut(d).zip(x1.chunks(d)) {
            layer_norm_row(xrow, &w.ln1_g.data, &w.ln1_b.data, orow);
        }
        let mut f1 = Vec::new();
        linear(&normed1, n, &w.ff1_w, &w.ff1_b, &mut f1);
        for v in f1.iter_mut() {
            *v = v.tanh();
        }
        let mut f2 = Vec::new();
        linear(&f1, n, &w.ff2_w, &w.ff2_b, &mut f2);
        let mut x2 = vec![0.0; n * d];
        for ((o, &a), &b) in x2.iter_mut().zip(normed1.iter()).zip(f2.iter()) {
            *o = a + b;
        }
        let mut out = vec![0.0; n * d];
        for (orow, xrow) in out.chunks_mut(d).zip(x2.chunks(d)) {
            layer_norm_row(xrow, &w.ln2_g.data, &w.ln2_b.data, orow);
        }
        out
    }

    /// One dynamics prediction. The recurrent state belongs to the caller
    /// (one per rollout) and starts at zeros.
    pub fn adm_predict(
        &self,
        sa_feats: &[f64; ADM_STATE_FEAT_DIM],
        ctx: &ContextVector,
        hidden: &mut AdmHidden,
    ) -> GaussianTransition {
        let hd = self.cfg.adm_hidden;
        let in_dim = self.cfg.adm_input_dim();
        debug_assert_eq!(ctx.dim(), self.cfg.context_dim);

        // cat = [normalized state-action feats | context | h]
        let inv: Vec<f64> = FEATURE_NORM.iter().map(|s| 1.0 / s).collect();
        let mut cat = Vec::with_capacity(in_dim + hd);
        cat.extend(sa_feats.iter().zip(inv.iter()).map(|(&v, &s)| v * s));
        cat.extend_from_slice(&ctx.0);
        cat.extend_from_slice(&hidden.h);

        let mut gates = Vec::new();
        linear(&cat, 1, &self.lstm_w, &self.lstm_b, &mut gates);
        for i in 0..hd {
            let ig = sigmoid(gates[i]);
            let fg = sigmoid(gates[hd + i]);
            let gg = gates[2 * hd + i].tanh();
            let og = sigmoid(gates[3 * hd + i]);
            let c_next = fg * hidden.c[i] + ig * gg;
            hidden.c[i] = c_next;
            hidden.h[i] = og * c_next.tanh();
        }

        let mut z1 = Vec::new();
        linear(&hidden.h, 1, &self.head1_w, &self.head1_b, &mut z1);
        for v in z1.iter_mut() {
            *v = v.tanh();
        }
        let mut out = Vec::new();
        linear(&z1, 1, &self.head2_w, &self.head2_b, &mut out);
        debug_assert_eq!(out.len(), ADM_OUT_DIM);

        // Head outputs live in normalized delta space; convert back.
        let k = STATE_DELTA_DIM;
        let mut mean = [0.0; STATE_DELTA_DIM];
        for i in 0..k {
            mean[i] = out[i] * DELTA_NORM[i];
        }
        let mut tril = [0.0; STATE_DELTA_DIM * STATE_DELTA_DIM];
        for i in 0..k {
            tril[i * k + i] = softplus(out[k + i]) * DELTA_NORM[i] + self.cfg.scale_floor;
        }
        let mut b = 2 * k;
        for i in 1..k {
            for j in 0..i {
                tril[i * k + j] = out[b] * DELTA_NORM[i];
                b += 1;
            }
        }
        GaussianTransition { mean, scale_tril: tril }
    }
}

/// Per-rollout recurrent state of the dynamics model.
#[derive(Debug, Clone)]
pub struct AdmHidden {
    h: Vec<f64>,
    c: Vec<f64>,
}

impl AdmHidden {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        AdmHidden { h: vec![0.0; cfg.adm_hidden], c: vec![0.0; cfg.adm_hidden] }
    }
}
