//! The two learned components and their probabilistic rollout machinery.
//!
//! The system encoder turns an unordered set of state-transition
//! observations into a fixed-width context vector (transformer encoder, no
//! positional encoding, mean-pooled). The adaptive dynamics model is an LSTM
//! followed by a fully connected head that emits a Gaussian distribution
//! over the next body-frame state delta, conditioned on state features,
//! action, and the context vector.
//!
//! Training runs through the autodiff tape ([`graph`]); control runs through
//! frozen, allocation-light kernels ([`snapshot`]) that share the tape's
//! numeric primitives and are tested to agree with it exactly.

pub mod graph;
pub mod rollout;
pub mod snapshot;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ParamSet};
use crate::rng::substream;
use crate::sim::{wrap_angle, Action, Transition, VehicleState};

/// Number of state components predicted per step (body-frame deltas).
pub const STATE_DELTA_DIM: usize = 6;

/// Typical per-step magnitude of each delta component (dx, dy, dyaw,
/// dv_long, dv_lat, dyaw_rate). Both networks operate on deltas divided by
/// these, and the dynamics head emits means and scales in the normalized
/// space (converted back before anything leaves the model). Desk-scale
/// deltas span two orders of magnitude across components; without this the
/// variance head crawls toward millimeter scales. Yaw rate swings hard at
/// 10 Hz with these inertias, hence its large scale.
pub const DELTA_NORM: [f64; STATE_DELTA_DIM] = [0.3, 0.05, 0.2, 0.15, 0.08, 1.0];

/// Normalizers for the transition features ([`featurize_transition`]
/// ordering): source-state velocities, action channels, then the delta
/// block.
pub const FEATURE_NORM: [f64; TRANSITION_FEAT_DIM] = [
    3.0, 1.0, 2.0, 1.0, 1.0, DELTA_NORM[0], DELTA_NORM[1], DELTA_NORM[2], DELTA_NORM[3],
    DELTA_NORM[4], DELTA_NORM[5],
];
/// Pose-invariant features of one transition (see [`featurize_transition`]).
pub const TRANSITION_FEAT_DIM: usize = 11;
/// Pose-invariant state + action features fed to the dynamics model.
pub const ADM_STATE_FEAT_DIM: usize = 5;
/// Raw head outputs: 6 mean + 6 diagonal + 15 strictly-lower entries.
pub const ADM_OUT_DIM: usize = STATE_DELTA_DIM + STATE_DELTA_DIM + TRIL_BELOW_DIM;
pub const TRIL_BELOW_DIM: usize = STATE_DELTA_DIM * (STATE_DELTA_DIM - 1) / 2;

/// Architecture hyperparameters for both networks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of the context vector.
    pub context_dim: usize,
    pub sit_layers: usize,
    pub sit_heads: usize,
    pub sit_width: usize,
    pub sit_ffn: usize,
    pub adm_hidden: usize,
    pub adm_head_hidden: usize,
    /// Histories longer than this are uniformly subsampled before encoding.
    pub history_cap: usize,
    /// Lower bound on the predicted scale diagonal.
    pub scale_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            context_dim: 32,
            sit_layers: 2,
            sit_heads: 4,
            sit_width: 64,
            sit_ffn: 128,
            adm_hidden: 64,
            adm_head_hidden: 64,
            history_cap: 512,
            scale_floor: 1e-4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("context_dim", self.context_dim),
            ("sit_layers", self.sit_layers),
            ("sit_heads", self.sit_heads),
            ("sit_width", self.sit_width),
            ("sit_ffn", self.sit_ffn),
            ("adm_hidden", self.adm_hidden),
            ("adm_head_hidden", self.adm_head_hidden),
            ("history_cap", self.history_cap),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.sit_width % self.sit_heads != 0 {
            return Err(Error::config(format!(
                "sit_width {} must be divisible by sit_heads {}",
                self.sit_width, self.sit_heads
            )));
        }
        if !(self.scale_floor >= 0.0 && self.scale_floor.is_finite()) {
            return Err(Error::config("scale_floor must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn adm_input_dim(&self) -> usize {
        ADM_STATE_FEAT_DIM + self.context_dim
    }
}

/// Fixed-width latent summary of a target system's dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextVector(pub Vec<f64>);

impl ContextVector {
    pub fn zeros(dim: usize) -> Self {
        ContextVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Gaussian over the next state delta: mean plus the lower-triangular scale
/// factor (positive diagonal), so the covariance `L L^T` is symmetric
/// positive definite by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianTransition {
    pub mean: [f64; STATE_DELTA_DIM],
    /// Row-major 6x6, strictly lower plus diagonal; upper entries are zero.
    pub scale_tril: [f64; STATE_DELTA_DIM * STATE_DELTA_DIM],
}

impl GaussianTransition {
    pub fn diag(&self) -> [f64; STATE_DELTA_DIM] {
        let mut d = [0.0; STATE_DELTA_DIM];
        for (i, v) in d.iter_mut().enumerate() {
            *v = self.scale_tril[i * STATE_DELTA_DIM + i];
        }
        d
    }

    /// Draws `mean + L z` with `z` standard normal.
    pub fn sample(&self, rng: &mut impl Rng) -> [f64; STATE_DELTA_DIM] {
        let k = STATE_DELTA_DIM;
        let mut z = [0.0; STATE_DELTA_DIM];
        for v in &mut z {
            *v = rng.sample(rand_distr::StandardNormal);
        }
        let mut out = self.mean;
        for i in 0..k {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.scale_tril[i * k + j] * z[j];
            }
            out[i] += acc;
        }
        out
    }

    /// Negative log-likelihood of a delta under this Gaussian.
    pub fn nll(&self, target: &[f64; STATE_DELTA_DIM]) -> f64 {
        let k = STATE_DELTA_DIM;
        let l = &self.scale_tril;
        let mut z = [0.0; STATE_DELTA_DIM];
        for i in 0..k {
            let mut s = target[i] - self.mean[i];
            for j in 0..i {
                s -= l[i * k + j] * z[j];
            }
            z[i] = s / l[i * k + i];
        }
        let mut val = 0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln();
        for i in 0..k {
            val += l[i * k + i].ln();
        }
        val + 0.5 * z.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite()) && self.scale_tril.iter().all(|v| v.is_finite())
    }
}

/// Pose-invariant encoding of one transition: body-frame velocities of the
/// source state, the action, and the state delta expressed in the source
/// state's frame.
///
/// Ordering: `[v_long, v_lat, yaw_rate, steer, throttle,
/// dx_body, dy_body, dyaw, dv_long, dv_lat, dyaw_rate]`.
pub fn featurize_transition(t: &Transition) -> [f64; TRANSITION_FEAT_DIM] {
    let d = transition_delta(t);
    [
        t.s.v_long,
        t.s.v_lat,
        t.s.yaw_rate,
        t.a.steer,
        t.a.throttle,
        d[0],
        d[1],
        d[2],
        d[3],
        d[4],
        d[5],
    ]
}

/// State + action features fed to the dynamics model each step.
pub fn state_action_features(s: &VehicleState, a: &Action) -> [f64; ADM_STATE_FEAT_DIM] {
    [s.v_long, s.v_lat, s.yaw_rate, a.steer, a.throttle]
}

/// Body-frame state delta `s_next (-) s`, the quantity the dynamics model
/// predicts: position delta rotated into the source frame, wrapped heading
/// delta, and velocity deltas.
pub fn transition_delta(t: &Transition) -> [f64; STATE_DELTA_DIM] {
    let (sin_y, cos_y) = t.s.yaw.sin_cos();
    let dxw = t.s_next.x - t.s.x;
    let dyw = t.s_next.y - t.s.y;
    [
        cos_y * dxw + sin_y * dyw,
        -sin_y * dxw + cos_y * dyw,
        wrap_angle(t.s_next.yaw - t.s.yaw),
        t.s_next.v_long - t.s.v_long,
        t.s_next.v_lat - t.s.v_lat,
        t.s_next.yaw_rate - t.s.yaw_rate,
    ]
}

/// Applies a body-frame delta to a state; the inverse of
/// [`transition_delta`].
pub fn apply_delta(s: &VehicleState, d: &[f64; STATE_DELTA_DIM]) -> VehicleState {
    let (sin_y, cos_y) = s.yaw.sin_cos();
    VehicleState {
        x: s.x + cos_y * d[0] - sin_y * d[1],
        y: s.y + sin_y * d[0] + cos_y * d[1],
        yaw: wrap_angle(s.yaw + d[2]),
        v_long: s.v_long + d[3],
        v_lat: s.v_lat + d[4],
        yaw_rate: s.yaw_rate + d[5],
    }
}

/// Growing sequence of transitions observed on one target system. All
/// entries must come from a single system; the harness owns that provenance.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct History {
    transitions: Vec<Transition>,
}

impl History {
    pub fn new() -> Self {
        History { transitions: Vec::new() }
    }

    pub fn from_transitions(transitions: Vec<Transition>) -> Self {
        History { transitions }
    }

    pub fn push(&mut self, t: Transition) {
        self.transitions.push(t);
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn truncated(&self, len: usize) -> History {
        History { transitions: self.transitions[..len.min(self.transitions.len())].to_vec() }
    }

    /// Feature matrix after the cap: all transitions when short enough,
    /// otherwise a uniform random subsample of `cap` of them (attention cost
    /// is quadratic in the sequence). Deterministic per rng state.
    pub fn capped_features(&self, cap: usize, rng: &mut impl Rng) -> Vec<[f64; TRANSITION_FEAT_DIM]> {
        if self.transitions.len() <= cap {
            self.transitions.iter().map(featurize_transition).collect()
        } else {
            let mut idx: Vec<usize> =
                index_sample(rng, self.transitions.len(), cap).into_iter().collect();
            idx.sort_unstable();
            idx.iter().map(|&i| featurize_transition(&self.transitions[i])).collect()
        }
    }
}

/// Initializes both networks' parameters (deterministic per seed).
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = substream(seed, &[0x1417]);
    let mut ps = ParamSet::new();

    nn::init_linear(&mut ps, &mut rng, "sit.embed", TRANSITION_FEAT_DIM, cfg.sit_width);
    ps.insert("sit.sys", nn::uniform_fanin(&mut rng, 1, cfg.sit_width));
    for layer in 0..cfg.sit_layers {
        nn::EncoderLayerNodes::init(
            &mut ps,
            &mut rng,
            &format!("sit.l{layer}"),
            cfg.sit_width,
            cfg.sit_ffn,
        );
    }
    nn::init_linear(&mut ps, &mut rng, "sit.ctx", cfg.sit_width, cfg.context_dim);

    nn::LstmNodes::init(&mut ps, &mut rng, "adm.lstm", cfg.adm_input_dim(), cfg.adm_hidden);
    nn::init_linear(&mut ps, &mut rng, "adm.head1", cfg.adm_hidden, cfg.adm_head_hidden);
    nn::init_linear(&mut ps, &mut rng, "adm.head2", cfg.adm_head_hidden, ADM_OUT_DIM);
    // Start the predicted scale diagonal near softplus(-2) ~ 0.13 rather
    // than softplus(0) ~ 0.69: desk-scale state deltas are centimeters, and
    // an untrained model whose samples jump by meters cannot bootstrap.
    let head_bias = ps.get_mut("adm.head2.b");
    for i in STATE_DELTA_DIM..2 * STATE_DELTA_DIM {
        head_bias.data[i] = -2.0;
    }
    Ok(ps)
}
