//! Ground-truth world: a planar dynamic bicycle model whose physical
//! parameters are randomized per system.
//!
//! Each sampled [`SystemParams`] defines one target system. The state is the
//! planar pose plus body-frame velocities; actions are normalized steer and
//! throttle commands. Steering passes through a per-system scale, bias, and
//! command delay; the longitudinal channel responds as a first-order lag
//! toward a throttle-set speed; lateral tire forces are linear in slip angle
//! and saturate at the friction limit. Process noise is additive Gaussian,
//! drawn deterministically from a per-step seed.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::child_seed;

/// Control period in seconds. Lap times are counted in these steps.
pub const DT: f64 = 0.1;

pub const GRAVITY: f64 = 9.81;

/// Speed-proportional resistance (N s/m) converting drive force into a
/// finite terminal speed: at full throttle a system settles at
/// `throttle_gain / LONG_DRAG` m/s.
pub const LONG_DRAG: f64 = 4.0;

/// Below this longitudinal speed the tire model ramps out; it also guards
/// the slip-angle denominators.
const V_SLIP_GUARD: f64 = 0.3;

/// Per-state standard deviations multiplied by the sampled noise scale
/// (order: x, y, yaw, v_long, v_lat, yaw_rate). Stochasticity lives mostly
/// in the velocity states: direct position noise passes through the
/// second-difference lateral-acceleration metric amplified by sqrt(6)/DT^2,
/// so even millimeters there would read as phantom m/s^2.
pub const NOISE_BASE: [f64; 6] = [0.0005, 0.0005, 0.001, 0.010, 0.008, 0.020];

/// Divergence guards; anything outside is a simulation failure.
const MAX_POS: f64 = 1.0e6;
const MAX_VEL: f64 = 1.0e3;

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r - std::f64::consts::TAU
    } else {
        r
    }
}

/// Planar pose plus body-frame velocities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// World position (m).
    pub x: f64,
    pub y: f64,
    /// Heading, normalized to (-pi, pi].
    pub yaw: f64,
    /// Body-frame longitudinal velocity (m/s).
    pub v_long: f64,
    /// Body-frame lateral velocity (m/s).
    pub v_lat: f64,
    /// Yaw rate (rad/s).
    pub yaw_rate: f64,
}

impl VehicleState {
    pub fn at_rest(x: f64, y: f64, yaw: f64) -> Self {
        VehicleState { x, y, yaw: wrap_angle(yaw), v_long: 0.0, v_lat: 0.0, yaw_rate: 0.0 }
    }

    pub fn origin() -> Self {
        Self::at_rest(0.0, 0.0, 0.0)
    }

    pub fn speed(&self) -> f64 {
        self.v_long.hypot(self.v_lat)
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.yaw, self.v_long, self.v_lat, self.yaw_rate]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        VehicleState { x: a[0], y: a[1], yaw: a[2], v_long: a[3], v_lat: a[4], yaw_rate: a[5] }
    }

    pub fn is_sane(&self) -> bool {
        let a = self.to_array();
        a.iter().all(|v| v.is_finite())
            && self.x.abs() <= MAX_POS
            && self.y.abs() <= MAX_POS
            && self.v_long.abs() <= MAX_VEL
            && self.v_lat.abs() <= MAX_VEL
            && self.yaw_rate.abs() <= MAX_VEL
    }
}

/// Normalized control command; both channels clamp to [-1, 1] at the
/// simulator boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub steer: f64,
    pub throttle: f64,
}

impl Action {
    pub fn new(steer: f64, throttle: f64) -> Self {
        Action { steer, throttle }
    }

    pub fn zero() -> Self {
        Action { steer: 0.0, throttle: 0.0 }
    }

    pub fn clamped(&self) -> Self {
        Action { steer: self.steer.clamp(-1.0, 1.0), throttle: self.throttle.clamp(-1.0, 1.0) }
    }
}

/// One sampled dynamics function: the physical and actuator parameters of a
/// single target system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// kg
    pub mass: f64,
    /// kg m^2
    pub yaw_inertia: f64,
    /// m
    pub wheelbase: f64,
    /// Distance from center of gravity to the front axle (m), < wheelbase.
    pub cg_to_front: f64,
    /// N/rad
    pub cornering_stiffness_front: f64,
    pub cornering_stiffness_rear: f64,
    pub friction_coeff: f64,
    /// rad of road-wheel angle per unit steer command.
    pub steer_scale: f64,
    /// rad, any sign.
    pub steer_bias: f64,
    /// N per unit throttle command.
    pub throttle_gain: f64,
    /// s; the longitudinal response time constant.
    pub motor_time_constant: f64,
    /// Steering commands arrive this many steps late.
    pub actuation_delay_steps: usize,
    /// Additive process-noise standard deviation per state component.
    pub process_noise_scale: [f64; 6],
}

impl SystemParams {
    /// Terminal speed at full throttle (m/s).
    pub fn top_speed(&self) -> f64 {
        self.throttle_gain / LONG_DRAG
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("wheelbase", self.wheelbase),
            ("cg_to_front", self.cg_to_front),
            ("cornering_stiffness_front", self.cornering_stiffness_front),
            ("cornering_stiffness_rear", self.cornering_stiffness_rear),
            ("friction_coeff", self.friction_coeff),
            ("steer_scale", self.steer_scale),
            ("throttle_gain", self.throttle_gain),
            ("motor_time_constant", self.motor_time_constant),
        ];
        for (name, v) in positives {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.cg_to_front >= self.wheelbase {
            return Err(Error::config("cg_to_front must be smaller than wheelbase"));
        }
        Ok(())
    }
}

/// One simulator step: the element of a history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: VehicleState,
    pub a: Action,
    pub s_next: VehicleState,
}

/// A `[lo, hi]` interval for one randomized parameter.
pub type Range = [f64; 2];

/// Randomization intervals for [`sample_system`]. Stiffness, drive gain,
/// and friction are drawn log-uniformly; everything else uniformly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomizationRanges {
    pub mass: Range,
    pub yaw_inertia: Range,
    pub wheelbase: Range,
    /// cg_to_front as a fraction of the wheelbase (keeps the cg inside).
    pub cg_frac: Range,
    pub cornering_stiffness_front: Range,
    pub cornering_stiffness_rear: Range,
    pub friction_coeff: Range,
    pub steer_scale: Range,
    pub steer_bias: Range,
    pub throttle_gain: Range,
    pub motor_time_constant: Range,
    pub actuation_delay_steps: [usize; 2],
    /// Multiplier applied to [`NOISE_BASE`].
    pub process_noise: Range,
}

impl Default for RandomizationRanges {
    fn default() -> Self {
        RandomizationRanges {
            mass: [2.0, 6.0],
            yaw_inertia: [0.02, 0.20],
            wheelbase: [0.25, 0.40],
            cg_frac: [0.35, 0.65],
            cornering_stiffness_front: [20.0, 80.0],
            cornering_stiffness_rear: [20.0, 80.0],
            friction_coeff: [0.4, 1.2],
            steer_scale: [0.25, 0.55],
            steer_bias: [-0.05, 0.05],
            throttle_gain: [8.0, 30.0],
            motor_time_constant: [0.05, 0.5],
            actuation_delay_steps: [0, 3],
            process_noise: [0.5, 2.0],
        }
    }
}

impl RandomizationRanges {
    pub fn validate(&self) -> Result<()> {
        let intervals = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("wheelbase", self.wheelbase),
            ("cg_frac", self.cg_frac),
            ("cornering_stiffness_front", self.cornering_stiffness_front),
            ("cornering_stiffness_rear", self.cornering_stiffness_rear),
            ("friction_coeff", self.friction_coeff),
            ("steer_scale", self.steer_scale),
            ("steer_bias", self.steer_bias),
            ("throttle_gain", self.throttle_gain),
            ("motor_time_constant", self.motor_time_constant),
            ("process_noise", self.process_noise),
        ];
        for (name, [lo, hi]) in intervals {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(format!("inverted or invalid interval for {name}")));
            }
        }
        let log_uniform = [
            ("cornering_stiffness_front", self.cornering_stiffness_front),
            ("cornering_stiffness_rear", self.cornering_stiffness_rear),
            ("friction_coeff", self.friction_coeff),
            ("throttle_gain", self.throttle_gain),
        ];
        for (name, [lo, _]) in log_uniform {
            if lo <= 0.0 {
                return Err(Error::config(format!("{name} is log-uniform and needs lo > 0")));
            }
        }
        if self.actuation_delay_steps[0] > self.actuation_delay_steps[1] {
            return Err(Error::config("inverted interval for actuation_delay_steps"));
        }
        Ok(())
    }

    /// The midpoint system; used for the fixed-nominal baseline.
    pub fn nominal(&self) -> SystemParams {
        let mid = |[lo, hi]: Range| 0.5 * (lo + hi);
        let gmid = |[lo, hi]: Range| (0.5 * (lo.ln() + hi.ln())).exp();
        let wheelbase = mid(self.wheelbase);
        SystemParams {
            mass: mid(self.mass),
            yaw_inertia: mid(self.yaw_inertia),
            wheelbase,
            cg_to_front: mid(self.cg_frac) * wheelbase,
            cornering_stiffness_front: gmid(self.cornering_stiffness_front),
            cornering_stiffness_rear: gmid(self.cornering_stiffness_rear),
            friction_coeff: gmid(self.friction_coeff),
            steer_scale: mid(self.steer_scale),
            steer_bias: mid(self.steer_bias),
            throttle_gain: gmid(self.throttle_gain),
            motor_time_constant: mid(self.motor_time_constant),
            actuation_delay_steps: (self.actuation_delay_steps[0] + self.actuation_delay_steps[1])
                / 2,
            process_noise_scale: scaled_noise(mid(self.process_noise)),
        }
    }

    /// Collapses every interval to its nominal point (zero-width ranges);
    /// used to train the fixed-nominal baseline without randomization.
    pub fn collapsed_to_nominal(&self) -> RandomizationRanges {
        let p = self.nominal();
        let noise_mid = 0.5 * (self.process_noise[0] + self.process_noise[1]);
        RandomizationRanges {
            mass: [p.mass, p.mass],
            yaw_inertia: [p.yaw_inertia, p.yaw_inertia],
            wheelbase: [p.wheelbase, p.wheelbase],
            cg_frac: [p.cg_to_front / p.wheelbase, p.cg_to_front / p.wheelbase],
            cornering_stiffness_front: [
                p.cornering_stiffness_front,
                p.cornering_stiffness_front,
            ],
            cornering_stiffness_rear: [p.cornering_stiffness_rear, p.cornering_stiffness_rear],
            friction_coeff: [p.friction_coeff, p.friction_coeff],
            steer_scale: [p.steer_scale, p.steer_scale],
            steer_bias: [p.steer_bias, p.steer_bias],
            throttle_gain: [p.throttle_gain, p.throttle_gain],
            motor_time_constant: [p.motor_time_constant, p.motor_time_constant],
            actuation_delay_steps: [p.actuation_delay_steps, p.actuation_delay_steps],
            process_noise: [noise_mid, noise_mid],
        }
    }
}

fn scaled_noise(mult: f64) -> [f64; 6] {
    let mut out = NOISE_BASE;
    for v in &mut out {
        *v *= mult;
    }
    out
}

/// Draws one system from the randomization ranges. Deterministic per seed;
/// the draw order is fixed and must not change.
pub fn sample_system(seed: u64, ranges: &RandomizationRanges) -> Result<SystemParams> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[0x5157]));
    let mut uniform = |[lo, hi]: Range| if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let mass = uniform(ranges.mass);
    let yaw_inertia = uniform(ranges.yaw_inertia);
    let wheelbase = uniform(ranges.wheelbase);
    let cg_frac = uniform(ranges.cg_frac);
    let steer_scale = uniform(ranges.steer_scale);
    let steer_bias = uniform(ranges.steer_bias);
    let motor_time_constant = uniform(ranges.motor_time_constant);
    let noise_mult = uniform(ranges.process_noise);
    let mut log_uniform = |[lo, hi]: Range| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo.ln()..=hi.ln()).exp()
        }
    };
    let csf = log_uniform(ranges.cornering_stiffness_front);
    let csr = log_uniform(ranges.cornering_stiffness_rear);
    let friction = log_uniform(ranges.friction_coeff);
    let gain = log_uniform(ranges.throttle_gain);
    let [dlo, dhi] = ranges.actuation_delay_steps;
    let delay = if dlo == dhi { dlo } else { rng.random_range(dlo..=dhi) };

    let params = SystemParams {
        mass,
        yaw_inertia,
        wheelbase,
        cg_to_front: cg_frac * wheelbase,
        cornering_stiffness_front: csf,
        cornering_stiffness_rear: csr,
        friction_coeff: friction,
        steer_scale,
        steer_bias,
        throttle_gain: gain,
        motor_time_constant,
        actuation_delay_steps: delay,
        process_noise_scale: scaled_noise(noise_mult),
    };
    params.validate()?;
    Ok(params)
}

/// Saturated linear lateral tire forces (front, rear) for the given
/// effective road-wheel angle. Forces ramp out below [`V_SLIP_GUARD`] so a
/// parked vehicle generates none, and each axle is capped both by its
/// friction budget and by the force that would cancel its slip within one
/// step (explicit integration at 10 Hz overshoots without the latter).
pub fn lateral_forces(s: &VehicleState, steer: f64, p: &SystemParams) -> (f64, f64) {
    let lf = p.cg_to_front;
    let lr = p.wheelbase - lf;
    let v_guard = s.v_long.abs().max(V_SLIP_GUARD);
    let ramp = (s.v_long.abs() / V_SLIP_GUARD).min(1.0);

    let alpha_f = steer - (s.v_lat + lf * s.yaw_rate).atan2(v_guard);
    let alpha_r = -(s.v_lat - lr * s.yaw_rate).atan2(v_guard);

    let fz_front = p.mass * GRAVITY * lr / p.wheelbase;
    let fz_rear = p.mass * GRAVITY * lf / p.wheelbase;
    let max_f = p.friction_coeff * fz_front;
    let max_r = p.friction_coeff * fz_rear;

    // Force that would cancel the axle slip in one step, through both the
    // translational and rotational response.
    let relax_f = (alpha_f.abs() * v_guard) / (DT * (1.0 / p.mass + lf * lf / p.yaw_inertia));
    let relax_r = (alpha_r.abs() * v_guard) / (DT * (1.0 / p.mass + lr * lr / p.yaw_inertia));

    let fy_f = (p.cornering_stiffness_front * alpha_f)
        .clamp(-max_f, max_f)
        .clamp(-relax_f, relax_f)
        * ramp;
    let fy_r = (p.cornering_stiffness_rear * alpha_r)
        .clamp(-max_r, max_r)
        .clamp(-relax_r, relax_r)
        * ramp;
    (fy_f, fy_r)
}

/// One simulator step of [`DT`] seconds. `a.steer` is the steering command
/// arriving at the wheels this step (the per-system delay queue lives in
/// [`VehicleSim`]); scale and bias are applied here. Deterministic given
/// `noise_seed`.
pub fn step(s: &VehicleState, a: Action, p: &SystemParams, noise_seed: u64) -> Result<VehicleState> {
    let a = a.clamped();
    let steer = p.steer_scale * a.steer + p.steer_bias;
    let (fy_f, fy_r) = lateral_forces(s, steer, p);
    let lf = p.cg_to_front;
    let lr = p.wheelbase - lf;

    // Yaw rate from the tire torques.
    let yaw_rate = s.yaw_rate + DT * (lf * fy_f * steer.cos() - lr * fy_r) / p.yaw_inertia;

    // Re-express the body velocity in the rotated frame (exact, so the
    // Coriolis coupling cannot inject energy), then apply accelerations.
    let dyaw = DT * yaw_rate;
    let (sin_d, cos_d) = dyaw.sin_cos();
    let v_long_rot = cos_d * s.v_long + sin_d * s.v_lat;
    let v_lat_rot = -sin_d * s.v_long + cos_d * s.v_lat;

    // First-order lag toward the throttle-set speed, friction-limited. The
    // exponential form is exact for the lag ODE, so the response stays
    // monotonic even for time constants below DT.
    let v_cmd = p.throttle_gain * a.throttle / LONG_DRAG;
    let lag = 1.0 - (-DT / p.motor_time_constant).exp();
    let max_dv = p.friction_coeff * GRAVITY * DT;
    let dv_motor = ((v_cmd - v_long_rot) * lag).clamp(-max_dv, max_dv);

    let v_long = v_long_rot + dv_motor;
    let mut v_lat = v_lat_rot + DT * (fy_f * steer.cos() + fy_r) / p.mass;

    // With no drive input the tires may redirect the velocity but not grow
    // it: near-standstill spin states would otherwise pump yaw motion into
    // translation through the discrete step.
    if a.throttle == 0.0 {
        let allowed2 = v_long_rot * v_long_rot + v_lat_rot * v_lat_rot - v_long * v_long;
        if v_lat * v_lat > allowed2 {
            v_lat = v_lat.signum() * allowed2.max(0.0).sqrt();
        }
    }

    // Semi-implicit: pose advances with the updated velocities.
    let (sin_y, cos_y) = s.yaw.sin_cos();
    let x = s.x + DT * (v_long * cos_y - v_lat * sin_y);
    let y = s.y + DT * (v_long * sin_y + v_lat * cos_y);
    let yaw = wrap_angle(s.yaw + DT * yaw_rate);

    let mut out = VehicleState { x, y, yaw, v_long, v_lat, yaw_rate };

    if p.process_noise_scale.iter().any(|&n| n > 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut arr = out.to_array();
        for (v, &scale) in arr.iter_mut().zip(p.process_noise_scale.iter()) {
            let z: f64 = rng.sample(StandardNormal);
            *v += scale * z;
        }
        arr[2] = wrap_angle(arr[2]);
        out = VehicleState::from_array(arr);
    }

    if out.is_sane() {
        Ok(out)
    } else {
        Err(Error::SimDiverged { step: 0 })
    }
}

/// Stateful wrapper owning the steering delay queue and the per-trial noise
/// stream. [`SystemParams`] are immutable after sampling; this struct holds
/// the only mutable simulator state.
#[derive(Debug, Clone)]
pub struct VehicleSim {
    params: SystemParams,
    state: VehicleState,
    steer_queue: VecDeque<f64>,
    step_index: u64,
    noise_seed: u64,
}

impl VehicleSim {
    pub fn new(params: SystemParams, initial: VehicleState, noise_seed: u64) -> Self {
        let steer_queue = std::iter::repeat(0.0).take(params.actuation_delay_steps).collect();
        VehicleSim { params, state: initial, steer_queue, step_index: 0, noise_seed }
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_index
    }

    /// Executes one action; returns the transition actually taken. The
    /// recorded action is the commanded one — the delay is part of the
    /// system dynamics the models must identify.
    pub fn step(&mut self, a: Action) -> Result<Transition> {
        let a = a.clamped();
        let arrived = if self.params.actuation_delay_steps == 0 {
            a.steer
        } else {
            self.steer_queue.push_back(a.steer);
            self.steer_queue.pop_front().expect("queue is non-empty by construction")
        };
        let seed = child_seed(self.noise_seed, &[self.step_index]);
        let effective = Action { steer: arrived, throttle: a.throttle };
        let s = self.state;
        let s_next = step(&s, effective, &self.params, seed)
            .map_err(|_| Error::SimDiverged { step: self.step_index as usize })?;
        self.state = s_next;
        self.step_index += 1;
        Ok(Transition { s, a, s_next })
    }

    /// Teleports the vehicle (used by track resets). The steering queue is
    /// flushed; the noise stream continues.
    pub fn reset_to(&mut self, state: VehicleState) {
        self.state = state;
        for v in self.steer_queue.iter_mut() {
            *v = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(mut p: SystemParams) -> SystemParams {
        p.process_noise_scale = [0.0; 6];
        p
    }

    fn default_system(seed: u64) -> SystemParams {
        sample_system(seed, &RandomizationRanges::default()).unwrap()
    }

    #[test]
    fn sampling_is_deterministic() {
        let r = RandomizationRanges::default();
        assert_eq!(sample_system(42, &r).unwrap(), sample_system(42, &r).unwrap());
    }

    #[test]
    fn samples_respect_bounds() {
        let r = RandomizationRanges::default();
        for seed in 0..1000 {
            let p = sample_system(seed, &r).unwrap();
            assert!(p.mass >= r.mass[0] && p.mass <= r.mass[1]);
            assert!(
                p.friction_coeff >= r.friction_coeff[0] && p.friction_coeff <= r.friction_coeff[1]
            );
            assert!(p.throttle_gain >= r.throttle_gain[0] && p.throttle_gain <= r.throttle_gain[1]);
            assert!(p.steer_bias >= r.steer_bias[0] && p.steer_bias <= r.steer_bias[1]);
            assert!(p.actuation_delay_steps >= r.actuation_delay_steps[0]);
            assert!(p.actuation_delay_steps <= r.actuation_delay_steps[1]);
            assert!(p.cg_to_front < p.wheelbase);
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_systems() {
        let r = RandomizationRanges::default();
        for seed in 0..1000u64 {
            let a = sample_system(2 * seed, &r).unwrap();
            let b = sample_system(2 * seed + 1, &r).unwrap();
            assert_ne!(a, b, "seed pair {seed} collided");
        }
    }

    #[test]
    fn inverted_interval_is_rejected() {
        let mut r = RandomizationRanges::default();
        r.mass = [6.0, 2.0];
        assert!(sample_system(0, &r).is_err());
    }

    #[test]
    fn rest_is_an_equilibrium() {
        let p = quiet(default_system(3));
        let s = VehicleState::origin();
        let next = step(&s, Action::zero(), &p, 0).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn symmetric_straight_line_stays_straight() {
        let mut p = quiet(default_system(5));
        p.steer_bias = 0.0;
        let mut s = VehicleState::origin();
        for k in 0..200 {
            s = step(&s, Action::new(0.0, 0.6), &p, k).unwrap();
            assert_eq!(s.y, 0.0);
            assert_eq!(s.yaw, 0.0);
            assert_eq!(s.v_lat, 0.0);
            assert_eq!(s.yaw_rate, 0.0);
        }
        assert!(s.x > 0.0);
    }

    #[test]
    fn spin_up_matches_first_order_lag_closed_form() {
        let mut p = quiet(default_system(7));
        p.steer_bias = 0.0;
        p.motor_time_constant = 0.3;
        p.throttle_gain = 10.0;
        p.friction_coeff = 1.0;
        let throttle = 0.3;
        let v_ss = p.throttle_gain * throttle / LONG_DRAG;
        let lag = 1.0 - (-DT / p.motor_time_constant).exp();
        // Small enough that the friction clamp never binds.
        assert!(v_ss * lag < p.friction_coeff * GRAVITY * DT);
        let mut s = VehicleState::origin();
        let mut prev_v = 0.0;
        for k in 1..=100u32 {
            s = step(&s, Action::new(0.0, throttle), &p, u64::from(k)).unwrap();
            let expected = v_ss * (1.0 - (1.0 - lag).powi(k as i32));
            assert!(
                (s.v_long - expected).abs() < 1e-6,
                "step {k}: {} vs closed form {}",
                s.v_long,
                expected
            );
            assert!(s.v_long >= prev_v, "spin-up must be monotonic");
            prev_v = s.v_long;
        }
        assert!((prev_v - v_ss).abs() < 0.01 * v_ss);
    }

    #[test]
    fn determinism_is_bitwise() {
        let p = default_system(11);
        let s = VehicleState { x: 1.0, y: -0.5, yaw: 0.3, v_long: 2.0, v_lat: 0.1, yaw_rate: 0.4 };
        let a = Action::new(0.4, 0.8);
        let s1 = step(&s, a, &p, 99).unwrap();
        let s2 = step(&s, a, &p, 99).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1, step(&s, a, &p, 100).unwrap());
    }

    #[test]
    fn lateral_force_respects_friction_budget() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..500 {
            let p = default_system(trial);
            let s = VehicleState {
                x: 0.0,
                y: 0.0,
                yaw: 0.0,
                v_long: rng.random_range(-5.0..8.0),
                v_lat: rng.random_range(-3.0..3.0),
                yaw_rate: rng.random_range(-4.0..4.0),
            };
            let steer = rng.random_range(-0.6..0.6);
            let (fy_f, fy_r) = lateral_forces(&s, steer, &p);
            let budget = p.friction_coeff * p.mass * GRAVITY;
            assert!(
                fy_f.abs() + fy_r.abs() <= budget + 1e-9,
                "trial {trial}: total lateral force {} exceeds {}",
                fy_f.abs() + fy_r.abs(),
                budget
            );
        }
    }

    #[test]
    fn coasting_speed_is_non_increasing() {
        // Drive into a moving state, then cut throttle (steering free).
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..50 {
            let p = quiet(default_system(1000 + trial));
            let mut sim = VehicleSim::new(p, VehicleState::origin(), 0);
            for _ in 0..30 {
                let a = Action::new(rng.random_range(-1.0..1.0), rng.random_range(0.3..1.0));
                sim.step(a).unwrap();
            }
            let mut speed = sim.state().speed();
            for _ in 0..60 {
                let steer = rng.random_range(-1.0..1.0);
                sim.step(Action::new(steer, 0.0)).unwrap();
                let now = sim.state().speed();
                assert!(
                    now <= speed + 1e-9,
                    "trial {trial}: speed rose from {speed} to {now} while coasting"
                );
                speed = now;
            }
        }
    }

    #[test]
    fn steering_delay_shifts_response() {
        let mut p = quiet(default_system(31));
        p.steer_bias = 0.0;
        p.actuation_delay_steps = 2;
        let mut sim = VehicleSim::new(p, VehicleState::origin(), 0);
        for _ in 0..20 {
            sim.step(Action::new(0.0, 0.8)).unwrap();
        }
        // With delay 2 the yaw response must stay zero for two more steps.
        let t1 = sim.step(Action::new(1.0, 0.8)).unwrap();
        assert_eq!(t1.s_next.yaw_rate, 0.0);
        let t2 = sim.step(Action::new(1.0, 0.8)).unwrap();
        assert_eq!(t2.s_next.yaw_rate, 0.0);
        let t3 = sim.step(Action::new(1.0, 0.8)).unwrap();
        assert!(t3.s_next.yaw_rate.abs() > 1e-6);
    }

    #[test]
    fn params_serialize_roundtrip() {
        let p = default_system(13);
        let json = serde_json::to_string(&p).unwrap();
        let back: SystemParams = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }
}
