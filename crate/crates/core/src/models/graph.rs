//! Tape-side graph builders for the two networks; this is the training path.

use crate::autodiff::{NodeId, Tape};
use crate::nn::{lstm_cell, EncoderLayerNodes, LinearNodes, LstmNodes, ParamSet};
use crate::sim::Transition;

use super::{
    state_action_features, transition_delta, ModelConfig, ADM_OUT_DIM, DELTA_NORM, FEATURE_NORM,
    STATE_DELTA_DIM, TRANSITION_FEAT_DIM, TRIL_BELOW_DIM,
};

/// Row-major strictly-lower scale factors: entry (i, j) carries row i's
/// delta normalizer.
fn below_norm() -> Vec<f64> {
    let mut v = Vec::with_capacity(TRIL_BELOW_DIM);
    for i in 1..STATE_DELTA_DIM {
        for _ in 0..i {
            v.push(DELTA_NORM[i]);
        }
    }
    v
}

fn inv_feature_norm() -> Vec<f64> {
    FEATURE_NORM.iter().map(|s| 1.0 / s).collect()
}

/// System-encoder parameters bound to a tape.
pub struct SitGraph {
    embed: LinearNodes,
    sys: NodeId,
    layers: Vec<EncoderLayerNodes>,
    ctx: LinearNodes,
    heads: usize,
}

impl SitGraph {
    pub fn bind(tape: &mut Tape, ps: &ParamSet, cfg: &ModelConfig) -> Self {
        SitGraph {
            embed: LinearNodes::bind(tape, ps, "sit.embed"),
            sys: ps.bind(tape, "sit.sys"),
            layers: (0..cfg.sit_layers)
                .map(|l| EncoderLayerNodes::bind(tape, ps, &format!("sit.l{l}")))
                .collect(),
            ctx: LinearNodes::bind(tape, ps, "sit.ctx"),
            heads: cfg.sit_heads,
        }
    }

    /// Encodes a (possibly empty) feature sequence into a context node. A
    /// learned token is prepended so the empty history is well-defined; the
    /// final-layer outputs are mean-pooled and projected to the context
    /// width.
    pub fn encode(&self, tape: &mut Tape, feats: &[[f64; TRANSITION_FEAT_DIM]]) -> NodeId {
        let seq = if feats.is_empty() {
            self.sys
        } else {
            let inv = inv_feature_norm();
            let flat: Vec<f64> = feats
                .iter()
                .flat_map(|row| row.iter().zip(inv.iter()).map(|(&v, &s)| v * s))
                .collect();
            let x = tape.leaf(feats.len(), TRANSITION_FEAT_DIM, flat);
            let embedded = self.embed.apply(tape, x);
            tape.concat_rows(self.sys, embedded)
        };
        let mut h = seq;
        for layer in &self.layers {
            h = layer.apply(tape, h, self.heads);
        }
        let pooled = tape.mean_rows(h);
        let projected = self.ctx.apply(tape, pooled);
        // Bounded context: the dynamics model consumes this alongside O(1)
        // features, and an unbounded projection saturates its gates.
        tape.tanh(projected)
    }
}

/// Dynamics-model parameters bound to a tape.
pub struct AdmGraph {
    lstm: LstmNodes,
    head1: LinearNodes,
    head2: LinearNodes,
    hidden: usize,
    scale_floor: f64,
}

impl AdmGraph {
    pub fn bind(tape: &mut Tape, ps: &ParamSet, cfg: &ModelConfig) -> Self {
        AdmGraph {
            lstm: LstmNodes::bind(tape, ps, "adm.lstm", cfg.adm_hidden),
            head1: LinearNodes::bind(tape, ps, "adm.head1"),
            head2: LinearNodes::bind(tape, ps, "adm.head2"),
            hidden: cfg.adm_hidden,
            scale_floor: cfg.scale_floor,
        }
    }

    /// Zero-initialized recurrent state (one per rollout or window).
    pub fn init_hidden(&self, tape: &mut Tape) -> (NodeId, NodeId) {
        let h = tape.leaf(1, self.hidden, vec![0.0; self.hidden]);
        let c = tape.leaf(1, self.hidden, vec![0.0; self.hidden]);
        (h, c)
    }

    /// One prediction step: consumes `[state features, action, context]`,
    /// advances the recurrent state, and emits the Gaussian parameters
    /// (mean node `1x6`, scale node `6x6` lower-triangular with softplus +
    /// floor diagonal).
    pub fn step(
        &self,
        tape: &mut Tape,
        sa_feats: &[f64],
        ctx: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> AdmStepNodes {
        let inv = inv_feature_norm();
        let scaled: Vec<f64> =
            sa_feats.iter().zip(inv.iter()).map(|(&v, &s)| v * s).collect();
        let sa = tape.leaf_row(&scaled);
        let input = tape.concat_cols(sa, ctx);
        let (h_next, c_next) = lstm_cell(tape, input, h, c, &self.lstm);
        let z1 = self.head1.apply(tape, h_next);
        let z1a = tape.tanh(z1);
        let out = self.head2.apply(tape, z1a);
        debug_assert_eq!(tape.shape(out), (1, ADM_OUT_DIM));
        // The head works in normalized delta space; convert the Gaussian
        // back to physical units (row i of L scales with its component).
        let mean_raw = tape.slice_cols(out, 0, STATE_DELTA_DIM);
        let diag_raw = tape.slice_cols(out, STATE_DELTA_DIM, STATE_DELTA_DIM);
        let below_raw = tape.slice_cols(out, 2 * STATE_DELTA_DIM, TRIL_BELOW_DIM);
        let mean_scale = tape.leaf_row(&DELTA_NORM);
        let mean = tape.mul(mean_raw, mean_scale);
        let sp = tape.softplus(diag_raw);
        let diag_scale = tape.leaf_row(&DELTA_NORM);
        let sp_scaled = tape.mul(sp, diag_scale);
        let diag = tape.affine(sp_scaled, 1.0, self.scale_floor);
        let below_scale = tape.leaf_row(&below_norm());
        let below = tape.mul(below_raw, below_scale);
        let tril = tape.assemble_tril(diag, below, STATE_DELTA_DIM);
        AdmStepNodes { mean, tril, h: h_next, c: c_next }
    }
}

pub struct AdmStepNodes {
    pub mean: NodeId,
    pub tril: NodeId,
    pub h: NodeId,
    pub c: NodeId,
}

/// Builds the full training loss for one sample: encode the history prefix,
/// then predict a window of consecutive transitions with the recurrent state
/// carried across the window; the loss node is the mean Gaussian NLL of the
/// observed deltas. With `zero_context` the encoder is skipped and the
/// context is a constant zero vector (the from-scratch baseline).
pub fn window_nll(
    tape: &mut Tape,
    ps: &ParamSet,
    cfg: &ModelConfig,
    history_feats: &[[f64; TRANSITION_FEAT_DIM]],
    window: &[Transition],
    zero_context: bool,
) -> NodeId {
    assert!(!window.is_empty(), "loss window must contain at least one transition");
    let ctx = if zero_context {
        tape.leaf(1, cfg.context_dim, vec![0.0; cfg.context_dim])
    } else {
        let sit = SitGraph::bind(tape, ps, cfg);
        sit.encode(tape, history_feats)
    };
    let adm = AdmGraph::bind(tape, ps, cfg);
    let (mut h, mut c) = adm.init_hidden(tape);
    let mut total: Option<NodeId> = None;
    for t in window {
        let sa = state_action_features(&t.s, &t.a);
        let step = adm.step(tape, &sa, ctx, h, c);
        h = step.h;
        c = step.c;
        let target = transition_delta(t);
        let nll = tape.gaussian_nll(step.mean, step.tril, &target);
        total = Some(match total {
            None => nll,
            Some(acc) => tape.add(acc, nll),
        });
    }
    let sum = total.expect("non-empty window");
    tape.affine(sum, 1.0 / window.len() as f64, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{central_diff, max_rel_err};
    use crate::models::init_params;
    use crate::rng::substream;
    use crate::sim::{Action, VehicleState};
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            context_dim: 4,
            sit_layers: 1,
            sit_heads: 2,
            sit_width: 8,
            sit_ffn: 12,
            adm_hidden: 6,
            adm_head_hidden: 8,
            history_cap: 16,
            scale_floor: 1e-4,
        }
    }

    fn random_window(rng: &mut impl Rng, n: usize) -> Vec<Transition> {
        let mut s = VehicleState::origin();
        (0..n)
            .map(|_| {
                let a = Action::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let s_next = VehicleState {
                    x: s.x + rng.random_range(-0.3..0.3),
                    y: s.y + rng.random_range(-0.3..0.3),
                    yaw: crate::sim::wrap_angle(s.yaw + rng.random_range(-0.2..0.2)),
                    v_long: s.v_long + rng.random_range(-0.2..0.2),
                    v_lat: s.v_lat + rng.random_range(-0.1..0.1),
                    yaw_rate: s.yaw_rate + rng.random_range(-0.2..0.2),
                };
                let t = Transition { s, a, s_next };
                s = s_next;
                t
            })
            .collect()
    }

    /// End-to-end gradient check through encoder, recurrent model, and NLL:
    /// every parameter of both networks against central finite differences.
    #[test]
    fn full_pipeline_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let mut ps = init_params(&cfg, 7).unwrap();
        let mut rng = substream(9, &[]);
        let hist: Vec<[f64; TRANSITION_FEAT_DIM]> =
            random_window(&mut rng, 6).iter().map(crate::models::featurize_transition).collect();
        let window = random_window(&mut rng, 3);

        let mut tape = Tape::new();
        let loss = window_nll(&mut tape, &ps, &cfg, &hist, &window, false);
        tape.backward(loss);
        ps.zero_grads();
        ps.accumulate_grads(&tape);

        let names: Vec<String> = ps.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let base = ps.get(&name).data.clone();
            let f = |vals: &[f64]| {
                let mut ps2 = ps.clone();
                ps2.get_mut(&name).data = vals.to_vec();
                let mut tape = Tape::new();
                let loss = window_nll(&mut tape, &ps2, &cfg, &hist, &window, false);
                tape.scalar(loss)
            };
            // h = 1e-5 keeps the difference-quotient roundoff an order of
            // magnitude under the tolerance; everything here is smooth.
            let numeric = central_diff(&f, &base, 1e-5);
            let analytic = ps.get(&name).grad.as_ref().unwrap();
            let err = max_rel_err(analytic, &numeric);
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn zero_context_ignores_encoder_params() {
        let cfg = tiny_config();
        let mut ps = init_params(&cfg, 3).unwrap();
        let mut rng = substream(5, &[]);
        let window = random_window(&mut rng, 2);
        let mut tape = Tape::new();
        let loss = window_nll(&mut tape, &ps, &cfg, &[], &window, true);
        tape.backward(loss);
        ps.zero_grads();
        ps.accumulate_grads(&tape);
        for (name, t) in ps.iter() {
            if name.starts_with("sit.") {
                assert!(t.grad.is_none() || t.grad.as_ref().unwrap().iter().all(|&g| g == 0.0));
            }
        }
        assert!(ps.get("adm.lstm.w").grad.as_ref().unwrap().iter().any(|&g| g != 0.0));
    }
}
