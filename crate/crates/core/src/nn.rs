//! Neural-network building blocks on top of the autodiff tape: a named
//! parameter registry, layer graph builders (linear, layer norm, multi-head
//! self-attention, LSTM cell), the Adam optimizer, and checkpoint I/O.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors. Iteration order is the
/// name order (BTreeMap), which keeps optimizer updates and checkpoints
/// deterministic.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.params.contains_key(&name), "duplicate parameter {name}");
        self.params.insert(name, t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Binds a parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> NodeId {
        tape.param(name, self.get(name))
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    /// Accumulates the tape's parameter gradients into this set.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (name, grad) in tape.param_grads() {
            let t = self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
            let buf = t.grad_mut();
            for (o, &g) in buf.iter_mut().zip(grad.iter()) {
                *o += g;
            }
        }
    }

    /// Adds a raw gradient vector for one parameter (used when gradients are
    /// computed on worker tapes and merged in a fixed order).
    pub fn accumulate_grad_vec(&mut self, name: &str, grad: &[f64]) {
        let t = self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        let buf = t.grad_mut();
        for (o, &g) in buf.iter_mut().zip(grad.iter()) {
            *o += g;
        }
    }

    /// Copies values from another set with the exact same layout.
    pub fn load_values(&mut self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: expected {}, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (name, t) in &mut self.params {
            let src = other
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: expected {:?}, found {:?}",
                    t.shape, src.shape
                )));
            }
            t.data.clone_from(&src.data);
        }
        Ok(())
    }
}

// ---- initialization ---------------------------------------------------------

/// Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_fanin(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data)
}

pub fn zeros_row(cols: usize) -> Tensor {
    Tensor::zeros(vec![1, cols])
}

pub fn ones_row(cols: usize) -> Tensor {
    Tensor::new(vec![1, cols], vec![1.0; cols])
}

/// Registers `{prefix}.w` ([in x out]) and `{prefix}.b` ([1 x out]).
pub fn init_linear(ps: &mut ParamSet, rng: &mut impl Rng, prefix: &str, fan_in: usize, out: usize) {
    ps.insert(format!("{prefix}.w"), uniform_fanin(rng, fan_in, out));
    ps.insert(format!("{prefix}.b"), zeros_row(out));
}

// ---- layer graph builders ----------------------------------------------------

/// Bound nodes of a linear layer.
#[derive(Clone, Copy)]
pub struct LinearNodes {
    pub w: NodeId,
    pub b: NodeId,
}

impl LinearNodes {
    pub fn bind(tape: &mut Tape, ps: &ParamSet, prefix: &str) -> Self {
        LinearNodes {
            w: ps.bind(tape, &format!("{prefix}.w")),
            b: ps.bind(tape, &format!("{prefix}.b")),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let y = tape.matmul(x, self.w);
        tape.add_row(y, self.b)
    }
}

/// Bound nodes of a multi-head self-attention sub-layer.
#[derive(Clone, Copy)]
pub struct AttentionNodes {
    pub q: LinearNodes,
    pub k: LinearNodes,
    pub v: LinearNodes,
    pub o: LinearNodes,
}

impl AttentionNodes {
    pub fn bind(tape: &mut Tape, ps: &ParamSet, prefix: &str) -> Self {
        AttentionNodes {
            q: LinearNodes::bind(tape, ps, &format!("{prefix}.q")),
            k: LinearNodes::bind(tape, ps, &format!("{prefix}.k")),
            v: LinearNodes::bind(tape, ps, &format!("{prefix}.v")),
            o: LinearNodes::bind(tape, ps, &format!("{prefix}.o")),
        }
    }

    pub fn init(ps: &mut ParamSet, rng: &mut impl Rng, prefix: &str, width: usize) {
        init_linear(ps, rng, &format!("{prefix}.q"), width, width);
        init_linear(ps, rng, &format!("{prefix}.k"), width, width);
        init_linear(ps, rng, &format!("{prefix}.v"), width, width);
        init_linear(ps, rng, &format!("{prefix}.o"), width, width);
    }
}

/// Multi-head self-attention over a `[len x width]` sequence. Content-only:
/// no positional encoding anywhere, so the layer is permutation-equivariant.
/// Panics if the sequence is empty or `width` is not divisible by `heads`
/// (both are checked at configuration time by the callers).
pub fn multi_head_self_attention(
    tape: &mut Tape,
    x: NodeId,
    attn: &AttentionNodes,
    heads: usize,
) -> NodeId {
    let (len, width) = tape.shape(x);
    assert!(len >= 1, "attention requires a non-empty sequence");
    assert_eq!(width % heads, 0, "width {} not divisible by {} heads", width, heads);
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = attn.q.apply(tape, x);
    let k = attn.k.apply(tape, x);
    let v = attn.v.apply(tape, x);

    let mut merged: Option<NodeId> = None;
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.affine(scores, scale, 0.0);
        let weights = tape.softmax_rows(scaled);
        let out = tape.matmul(weights, vh);
        merged = Some(match merged {
            None => out,
            Some(m) => tape.concat_cols(m, out),
        });
    }
    attn.o.apply(tape, merged.expect("at least one head"))
}

/// Bound nodes of one transformer encoder layer (post-norm, as in the
/// original encoder: `x = LN(x + Attn(x))`, `x = LN(x + FFN(x))`).
#[derive(Clone, Copy)]
pub struct EncoderLayerNodes {
    pub attn: AttentionNodes,
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub ff1: LinearNodes,
    pub ff2: LinearNodes,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
}

impl EncoderLayerNodes {
    pub fn bind(tape: &mut Tape, ps: &ParamSet, prefix: &str) -> Self {
        EncoderLayerNodes {
            attn: AttentionNodes::bind(tape, ps, &format!("{prefix}.attn")),
            ln1_g: ps.bind(tape, &format!("{prefix}.ln1.g")),
            ln1_b: ps.bind(tape, &format!("{prefix}.ln1.b")),
            ff1: LinearNodes::bind(tape, ps, &format!("{prefix}.ff1")),
            ff2: LinearNodes::bind(tape, ps, &format!("{prefix}.ff2")),
            ln2_g: ps.bind(tape, &format!("{prefix}.ln2.g")),
            ln2_b: ps.bind(tape, &format!("{prefix}.ln2.b")),
        }
    }

    pub fn init(ps: &mut ParamSet, rng: &mut impl Rng, prefix: &str, width: usize, ffn: usize) {
        AttentionNodes::init(ps, rng, &format!("{prefix}.attn"), width);
        ps.insert(format!("{prefix}.ln1.g"), ones_row(width));
        ps.insert(format!("{prefix}.ln1.b"), zeros_row(width));
        init_linear(ps, rng, &format!("{prefix}.ff1"), width, ffn);
        init_linear(ps, rng, &format!("{prefix}.ff2"), ffn, width);
        ps.insert(format!("{prefix}.ln2.g"), ones_row(width));
        ps.insert(format!("{prefix}.ln2.b"), zeros_row(width));
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId, heads: usize) -> NodeId {
        let a = multi_head_self_attention(tape, x, &self.attn, heads);
        let res1 = tape.add(x, a);
        let x1 = tape.layer_norm_rows(res1, self.ln1_g, self.ln1_b);
        let f1 = self.ff1.apply(tape, x1);
        let f1a = tape.tanh(f1);
        let f2 = self.ff2.apply(tape, f1a);
        let res2 = tape.add(x1, f2);
        tape.layer_norm_rows(res2, self.ln2_g, self.ln2_b)
    }
}

/// Bound nodes of an LSTM cell. Weights are packed `[(input+hidden) x 4h]`
/// with gate order input, forget, cell, output.
#[derive(Clone, Copy)]
pub struct LstmNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub hidden: usize,
}

impl LstmNodes {
    pub fn bind(tape: &mut Tape, ps: &ParamSet, prefix: &str, hidden: usize) -> Self {
        LstmNodes {
            w: ps.bind(tape, &format!("{prefix}.w")),
            b: ps.bind(tape, &format!("{prefix}.b")),
            hidden,
        }
    }

    /// Forget-gate bias starts at 1 so early training does not erase state.
    pub fn init(ps: &mut ParamSet, rng: &mut impl Rng, prefix: &str, input: usize, hidden: usize) {
        ps.insert(format!("{prefix}.w"), uniform_fanin(rng, input + hidden, 4 * hidden));
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        ps.insert(format!("{prefix}.b"), Tensor::new(vec![1, 4 * hidden], bias));
    }
}

/// One LSTM step: `(x, h, c) -> (h', c')` with the standard gate equations.
/// `h'` is elementwise bounded in (-1, 1) by construction (tanh times
/// sigmoid).
pub fn lstm_cell(
    tape: &mut Tape,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    lstm: &LstmNodes,
) -> (NodeId, NodeId) {
    let hidden = lstm.hidden;
    let cat = tape.concat_cols(x, h);
    let lin = tape.matmul(cat, lstm.w);
    let gates = tape.add_row(lin, lstm.b);
    let i_raw = tape.slice_cols(gates, 0, hidden);
    let f_raw = tape.slice_cols(gates, hidden, hidden);
    let g_raw = tape.slice_cols(gates, 2 * hidden, hidden);
    let o_raw = tape.slice_cols(gates, 3 * hidden, hidden);
    let i = tape.sigmoid(i_raw);
    let f = tape.sigmoid(f_raw);
    let g = tape.tanh(g_raw);
    let o = tape.sigmoid(o_raw);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_next = tape.add(fc, ig);
    let c_act = tape.tanh(c_next);
    let h_next = tape.mul(o, c_act);
    (h_next, c_next)
}

// ---- Adam ---------------------------------------------------------------------

/// Adam optimizer state: per-parameter moment buffers plus the shared step
/// counter and hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update over every parameter that has a
    /// gradient buffer. Aborts without touching anything if any gradient is
    /// non-finite.
    pub fn step(&mut self, ps: &mut ParamSet) -> Result<()> {
        for (name, t) in ps.iter() {
            if let Some(g) = t.grad.as_ref() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite gradient in {name}")));
                }
            }
        }
        self.step += 1;
        let t_f = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t_f);
        let bc2 = 1.0 - self.beta2.powf(t_f);
        for (name, tensor) in ps.iter_mut() {
            let Some(grad) = tensor.grad.as_ref() else { continue };
            let n = grad.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            debug_assert_eq!(m.len(), n);
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

// ---- checkpoints ----------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: a versioned JSON container mapping parameter names to
/// shape plus row-major values, with free-form metadata (model dimensions,
/// training provenance).
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

pub fn save_checkpoint(path: &Path, ps: &ParamSet, meta: serde_json::Value) -> Result<()> {
    let file = Checkpoint { format_version: CHECKPOINT_VERSION, meta, params: ps.clone() };
    let json = serde_json::to_string(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let file: Checkpoint = serde_json::from_str(&text)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            file.format_version
        )));
    }
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{central_diff, grads_match};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut ps = ParamSet::new();
        let mut t = Tensor::new(vec![1], vec![2.0]);
        t.grad = Some(vec![3.0]);
        ps.insert("p", t);
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut ps).unwrap();
        let delta = ps.get("p").data[0] - 2.0;
        // Bias-corrected first step moves by ~ -lr * sign(g).
        assert!((delta + 1e-3).abs() < 1e-8, "delta {delta}");
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut ps = ParamSet::new();
        let mut t = Tensor::new(vec![2], vec![1.5, -0.5]);
        t.grad = Some(vec![0.0, 0.0]);
        ps.insert("p", t);
        let mut adam = AdamState::new(1e-2);
        adam.step(&mut ps).unwrap();
        assert_eq!(ps.get("p").data, vec![1.5, -0.5]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut ps = ParamSet::new();
            let mut t = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]);
            t.grad = Some(vec![0.5, -0.25, 0.125]);
            ps.insert("p", t);
            let mut adam = AdamState::new(1e-3);
            adam.step(&mut ps).unwrap();
            adam.step(&mut ps).unwrap();
            ps.get("p").data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut ps = ParamSet::new();
        let mut t = Tensor::new(vec![1], vec![1.0]);
        t.grad = Some(vec![f64::NAN]);
        ps.insert("p", t);
        let mut adam = AdamState::new(1e-3);
        assert!(adam.step(&mut ps).is_err());
        assert_eq!(ps.get("p").data[0], 1.0);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn lstm_zero_everything_gives_zero_hidden() {
        let mut ps = ParamSet::new();
        let (input, hidden) = (3, 4);
        ps.insert("lstm.w", Tensor::zeros(vec![input + hidden, 4 * hidden]));
        ps.insert("lstm.b", Tensor::zeros(vec![1, 4 * hidden]));
        let mut tape = Tape::new();
        let lstm = LstmNodes::bind(&mut tape, &ps, "lstm", hidden);
        let x = tape.leaf_row(&vec![0.0; input]);
        let h = tape.leaf_row(&vec![0.0; hidden]);
        let c = tape.leaf_row(&vec![0.0; hidden]);
        let (h1, _) = lstm_cell(&mut tape, x, h, c, &lstm);
        assert!(tape.value(h1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_hidden_is_bounded() {
        let mut rng = test_rng(11);
        let (input, hidden) = (5, 6);
        let mut ps = ParamSet::new();
        LstmNodes::init(&mut ps, &mut rng, "lstm", input, hidden);
        for trial in 0..20 {
            let mut tape = Tape::new();
            let lstm = LstmNodes::bind(&mut tape, &ps, "lstm", hidden);
            let xv: Vec<f64> = (0..input).map(|_| rng.random_range(-5.0..5.0)).collect();
            let hv: Vec<f64> = (0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cv: Vec<f64> = (0..hidden).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x = tape.leaf_row(&xv);
            let h = tape.leaf_row(&hv);
            let c = tape.leaf_row(&cv);
            let (h1, _) = lstm_cell(&mut tape, x, h, c, &lstm);
            assert!(
                tape.value(h1).iter().all(|&v| v.abs() < 1.0),
                "trial {trial}: hidden out of (-1,1)"
            );
        }
    }

    #[test]
    fn lstm_input_gradient_matches_finite_differences() {
        let mut rng = test_rng(3);
        let (input, hidden) = (4, 3);
        let mut ps = ParamSet::new();
        LstmNodes::init(&mut ps, &mut rng, "lstm", input, hidden);
        let x0: Vec<f64> = (0..input).map(|_| rng.random_range(-1.0..1.0)).collect();
        let build = |xv: &[f64]| {
            let mut tape = Tape::new();
            let lstm = LstmNodes::bind(&mut tape, &ps, "lstm", hidden);
            let x = tape.leaf_row(xv);
            let h = tape.leaf_row(&[0.2, -0.1, 0.3]);
            let c = tape.leaf_row(&[0.0, 0.5, -0.5]);
            let (h1, _) = lstm_cell(&mut tape, x, h, c, &lstm);
            let loss = tape.sum_all(h1);
            (tape, x, loss)
        };
        let (mut tape, x, loss) = build(&x0);
        tape.backward(loss);
        let f = |xv: &[f64]| {
            let (tape, _, loss) = build(xv);
            tape.scalar(loss)
        };
        let numeric = central_diff(&f, &x0, 1e-6);
        assert!(grads_match(tape.grad(x), &numeric, 1e-5));
    }

    #[test]
    fn attention_single_token_passes_value_through() {
        // With one token the attention weight matrix is [[1.0]], so the
        // output must equal W_o(W_v x + b_v) + b_o exactly.
        let mut rng = test_rng(5);
        let width = 8;
        let mut ps = ParamSet::new();
        AttentionNodes::init(&mut ps, &mut rng, "attn", width);
        let xv: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let attn = AttentionNodes::bind(&mut tape, &ps, "attn");
        let x = tape.leaf(1, width, xv.clone());
        let out = multi_head_self_attention(&mut tape, x, &attn, 2);

        let mut tape2 = Tape::new();
        let attn2 = AttentionNodes::bind(&mut tape2, &ps, "attn");
        let x2 = tape2.leaf(1, width, xv);
        let v = attn2.v.apply(&mut tape2, x2);
        let expected = attn2.o.apply(&mut tape2, v);

        for (a, b) in tape.value(out).iter().zip(tape2.value(expected)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = test_rng(9);
        let (len, width, heads) = (5, 8, 4);
        let mut ps = ParamSet::new();
        AttentionNodes::init(&mut ps, &mut rng, "attn", width);
        let xv: Vec<f64> = (0..len * width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = vec![0.0; len * width];
        for (dst, &src) in perm.iter().enumerate() {
            xp[dst * width..(dst + 1) * width]
                .copy_from_slice(&xv[src * width..(src + 1) * width]);
        }
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let attn = AttentionNodes::bind(&mut tape, &ps, "attn");
            let x = tape.leaf(len, width, data);
            let out = multi_head_self_attention(&mut tape, x, &attn, heads);
            tape.value(out).to_vec()
        };
        let base = run(xv);
        let permuted = run(xp);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..width {
                let diff = (permuted[dst * width + j] - base[src * width + j]).abs();
                assert!(diff < 1e-9, "row {dst} col {j} differs by {diff}");
            }
        }
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let mut rng = test_rng(21);
        let (len, width, heads) = (3, 4, 2);
        let mut ps = ParamSet::new();
        AttentionNodes::init(&mut ps, &mut rng, "attn", width);
        let x0: Vec<f64> = (0..len * width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let build = |xv: &[f64]| {
            let mut tape = Tape::new();
            let attn = AttentionNodes::bind(&mut tape, &ps, "attn");
            let x = tape.leaf(len, width, xv.to_vec());
            let out = multi_head_self_attention(&mut tape, x, &attn, heads);
            let t = tape.tanh(out);
            let loss = tape.sum_all(t);
            (tape, x, loss)
        };
        let (mut tape, x, loss) = build(&x0);
        tape.backward(loss);
        let f = |xv: &[f64]| {
            let (tape, _, loss) = build(xv);
            tape.scalar(loss)
        };
        let numeric = central_diff(&f, &x0, 1e-6);
        assert!(grads_match(tape.grad(x), &numeric, 1e-5));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut rng = test_rng(2);
        let mut ps = ParamSet::new();
        init_linear(&mut ps, &mut rng, "layer", 7, 3);
        let dir = std::env::temp_dir().join("apex_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt.json");
        save_checkpoint(&path, &ps, serde_json::json!({"kind": "test"})).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta["kind"], "test");
        for (name, t) in ps.iter() {
            let lt = loaded.params.get(name);
            assert_eq!(lt.shape, t.shape);
            assert_eq!(lt.data, t.data, "values must round-trip bit-exactly");
        }
        std::fs::remove_file(&path).ok();
    }
}
