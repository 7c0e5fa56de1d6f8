//! Track generation and the geometric functionals of the driving task:
//! progress along the centerline, offset from it, and the lateral
//! acceleration metric used by the rollover constraint.
//!
//! Tracks are open polylines (start to finish) sampled at uniform arclength.
//! A centerline is generated by a bounded-curvature random walk; tracks that
//! fold back onto themselves within a couple of widths are rejected and
//! regenerated deterministically.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::sim::{VehicleState, DT};

/// Track generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    /// Sampled track length interval (m).
    pub min_length: f64,
    pub max_length: f64,
    /// Lateral corridor half-width... no: the full allowed distance from the
    /// centerline (m); the on-track constraint is `offset <= width`.
    pub width: f64,
    /// Curvature bound (1/m); 0 gives a straight line.
    pub max_curvature: f64,
    /// Waypoint spacing (m).
    pub spacing: f64,
    /// Stationary curvature std as a fraction of the bound.
    pub curvature_std_frac: f64,
    /// Curvature persistence length (m) of the random walk.
    pub persistence: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            min_length: 15.0,
            max_length: 25.0,
            width: 1.0,
            max_curvature: 0.65,
            spacing: 0.25,
            curvature_std_frac: 0.5,
            persistence: 3.0,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::config("track spacing must be positive"));
        }
        if !(self.width > 0.0) {
            return Err(Error::config("track width must be positive"));
        }
        if !(self.min_length <= self.max_length) {
            return Err(Error::config("inverted track length interval"));
        }
        if self.min_length < 2.0 * self.spacing {
            return Err(Error::config("track too short for its waypoint spacing"));
        }
        if self.max_curvature < 0.0 || !self.max_curvature.is_finite() {
            return Err(Error::config("max_curvature must be finite and non-negative"));
        }
        if self.persistence <= 0.0 {
            return Err(Error::config("persistence must be positive"));
        }
        Ok(())
    }
}

/// Nearest-point query result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    /// Arclength of the closest centerline point (m).
    pub progress: f64,
    /// Unsigned distance to the centerline (m).
    pub offset: f64,
    /// Index of the closest segment; feed back as a hint for local queries.
    pub segment: usize,
}

/// Open track: centerline waypoints at uniform arclength plus a width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Track {
    points: Vec<[f64; 2]>,
    /// Cumulative arclength per waypoint; strictly increasing from 0.
    cum: Vec<f64>,
    width: f64,
    total_length: f64,
}

impl Track {
    /// Builds a track from explicit waypoints (replay, tests, transforms).
    pub fn from_waypoints(points: Vec<[f64; 2]>, width: f64) -> Result<Track> {
        if points.len() < 2 {
            return Err(Error::config("a track needs at least two waypoints"));
        }
        if !(width > 0.0) {
            return Err(Error::config("track width must be positive"));
        }
        let mut cum = Vec::with_capacity(points.len());
        cum.push(0.0);
        for w in points.windows(2) {
            let d = dist(w[0], w[1]);
            if d <= 1e-12 {
                return Err(Error::config("consecutive waypoints must be distinct"));
            }
            cum.push(cum.last().unwrap() + d);
        }
        let total_length = *cum.last().unwrap();
        Ok(Track { points, cum, width, total_length })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn waypoints(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn segment_count(&self) -> usize {
        self.points.len() - 1
    }

    /// Centerline point and tangent heading at arclength `s` (clamped to the
    /// track extent).
    pub fn point_at(&self, s: f64) -> ([f64; 2], f64) {
        let s = s.clamp(0.0, self.total_length);
        let idx = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.segment_count() - 1),
            Err(i) => (i - 1).min(self.segment_count() - 1),
        };
        let a = self.points[idx];
        let b = self.points[idx + 1];
        let seg_len = self.cum[idx + 1] - self.cum[idx];
        let t = ((s - self.cum[idx]) / seg_len).clamp(0.0, 1.0);
        let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
        (p, heading)
    }

    /// Nearest-segment projection over the whole polyline. Ties break toward
    /// greater arclength.
    pub fn locate(&self, x: f64, y: f64) -> Location {
        self.locate_range(x, y, 0, self.segment_count())
    }

    /// Projection restricted to segments near `hint` (for per-step queries
    /// along rollouts, where the previous segment index is known).
    pub fn locate_near(&self, x: f64, y: f64, hint: usize, window: usize) -> Location {
        let lo = hint.saturating_sub(window);
        let hi = (hint + window + 1).min(self.segment_count());
        self.locate_range(x, y, lo, hi)
    }

    fn locate_range(&self, x: f64, y: f64, lo: usize, hi: usize) -> Location {
        debug_assert!(lo < hi);
        let mut best = Location { progress: 0.0, offset: f64::INFINITY, segment: lo };
        for i in lo..hi {
            let a = self.points[i];
            let b = self.points[i + 1];
            let abx = b[0] - a[0];
            let aby = b[1] - a[1];
            let len2 = abx * abx + aby * aby;
            let t = (((x - a[0]) * abx + (y - a[1]) * aby) / len2).clamp(0.0, 1.0);
            let px = a[0] + t * abx;
            let py = a[1] + t * aby;
            let d2 = (x - px) * (x - px) + (y - py) * (y - py);
            // `<=` so equal distances resolve to the later segment.
            if d2 <= best.offset {
                best = Location {
                    progress: self.cum[i] + t * len2.sqrt(),
                    offset: d2,
                    segment: i,
                };
            }
        }
        best.offset = best.offset.sqrt();
        best
    }

    /// Arclength of the closest centerline point.
    pub fn progress(&self, s: &VehicleState) -> f64 {
        self.locate(s.x, s.y).progress
    }

    /// Unsigned distance from the centerline.
    pub fn offset(&self, s: &VehicleState) -> f64 {
        self.locate(s.x, s.y).offset
    }

    /// The on-track constraint predicate.
    pub fn on_track(&self, s: &VehicleState) -> bool {
        self.offset(s) <= self.width
    }

    /// State placed on the centerline at arclength `s`, heading along the
    /// track, at rest. Used for resets.
    pub fn centered_state(&self, s: f64) -> VehicleState {
        let (p, heading) = self.point_at(s);
        VehicleState::at_rest(p[0], p[1], heading)
    }
}

/// Generates a random drivable track. Deterministic per seed. Fails if no
/// self-avoiding track satisfying the curvature bound can be found.
pub fn generate_track(seed: u64, cfg: &TrackConfig) -> Result<Track> {
    cfg.validate()?;
    const MAX_ATTEMPTS: u64 = 64;
    for attempt in 0..MAX_ATTEMPTS {
        let track = generate_once(seed, attempt, cfg);
        if is_self_avoiding(&track, cfg) {
            return Ok(track);
        }
    }
    Err(Error::config(format!(
        "no self-avoiding track found in {MAX_ATTEMPTS} attempts; curvature/length \
         combination is likely unsatisfiable"
    )))
}

fn generate_once(seed: u64, attempt: u64, cfg: &TrackConfig) -> Track {
    let mut rng = substream(seed, &[0x7261, attempt]);
    let length = if cfg.min_length == cfg.max_length {
        cfg.min_length
    } else {
        rng.random_range(cfg.min_length..=cfg.max_length)
    };
    let n_seg = (length / cfg.spacing).ceil() as usize;
    let ds = length / n_seg as f64;

    // Bounded-curvature random walk: an AR(1) process in curvature, clamped
    // to the bound, drives the heading.
    let rho = (-ds / cfg.persistence).exp();
    let stationary_std = cfg.curvature_std_frac * cfg.max_curvature;
    let step_std = stationary_std * (1.0 - rho * rho).sqrt();

    let mut points = Vec::with_capacity(n_seg + 1);
    let mut heading = 0.0_f64;
    let mut kappa = 0.0_f64;
    let mut p = [0.0_f64, 0.0_f64];
    points.push(p);
    for _ in 0..n_seg {
        p = [p[0] + ds * heading.cos(), p[1] + ds * heading.sin()];
        points.push(p);
        let z: f64 = rng.sample(StandardNormal);
        kappa = (rho * kappa + step_std * z).clamp(-cfg.max_curvature, cfg.max_curvature);
        heading += kappa * ds;
    }
    Track::from_waypoints(points, cfg.width).expect("generated waypoints are valid")
}

/// Rejects tracks whose centerline passes within two widths of itself at
/// distant arclengths; nearest-point projection is unambiguous on the rest.
fn is_self_avoiding(track: &Track, cfg: &TrackConfig) -> bool {
    let pts = track.waypoints();
    let min_sep = 2.0 * cfg.width;
    let min_arc_gap = 4.0 * cfg.width;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            if track.cum[j] - track.cum[i] < min_arc_gap {
                continue;
            }
            if dist(pts[i], pts[j]) < min_sep {
                return false;
            }
        }
    }
    true
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Lateral acceleration from the last three states: second central
/// difference of position, projected onto the body lateral axis of the
/// middle state. `None` with fewer than three states (callers report 0 for
/// the first two steps of a run).
pub fn lateral_accel(states: &[VehicleState]) -> Option<f64> {
    if states.len() < 3 {
        return None;
    }
    let [s0, s1, s2] = [
        &states[states.len() - 3],
        &states[states.len() - 2],
        &states[states.len() - 1],
    ];
    let ax = (s2.x - 2.0 * s1.x + s0.x) / (DT * DT);
    let ay = (s2.y - 2.0 * s1.y + s0.y) / (DT * DT);
    let (sin_y, cos_y) = s1.yaw.sin_cos();
    Some(-sin_y * ax + cos_y * ay)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::wrap_angle;

    fn straight(len: f64, width: f64) -> Track {
        let n = (len / 0.25) as usize;
        let pts = (0..=n).map(|i| [i as f64 * 0.25, 0.0]).collect();
        Track::from_waypoints(pts, width).unwrap()
    }

    fn state_at(x: f64, y: f64) -> VehicleState {
        VehicleState::at_rest(x, y, 0.0)
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = TrackConfig::default();
        let a = generate_track(9, &cfg).unwrap();
        let b = generate_track(9, &cfg).unwrap();
        assert_eq!(a.waypoints(), b.waypoints());
        assert_ne!(
            generate_track(9, &cfg).unwrap().waypoints(),
            generate_track(10, &cfg).unwrap().waypoints()
        );
    }

    #[test]
    fn generated_tracks_respect_the_curvature_bound() {
        let cfg = TrackConfig::default();
        for seed in 0..50 {
            let t = generate_track(seed, &cfg).unwrap();
            let pts = t.waypoints();
            let mut prev_heading: Option<f64> = None;
            for w in pts.windows(2) {
                let heading = (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]);
                let ds = dist(w[0], w[1]);
                if let Some(ph) = prev_heading {
                    let dk = wrap_angle(heading - ph).abs() / ds;
                    assert!(
                        dk <= cfg.max_curvature + 1e-9,
                        "seed {seed}: curvature {dk} over bound"
                    );
                }
                prev_heading = Some(heading);
            }
            assert!(t.total_length() >= cfg.min_length - 1e-6);
            assert!(t.total_length() <= cfg.max_length + 1e-6);
        }
    }

    #[test]
    fn zero_curvature_gives_a_straight_line() {
        let cfg = TrackConfig {
            max_curvature: 0.0,
            min_length: 12.0,
            max_length: 12.0,
            ..TrackConfig::default()
        };
        let t = generate_track(3, &cfg).unwrap();
        for p in t.waypoints() {
            assert_eq!(p[1], 0.0);
        }
        assert!((t.total_length() - 12.0).abs() < 1e-9);
    }

    #[test]
    fn straight_track_progress_and_offset() {
        let t = straight(10.0, 1.0);
        assert!((t.progress(&state_at(3.0, 0.0)) - 3.0).abs() < 1e-12);
        assert!((t.progress(&state_at(3.0, 0.4)) - 3.0).abs() < 1e-12);
        assert!(t.offset(&state_at(3.0, 0.0)) < 1e-12);
        assert!((t.offset(&state_at(3.0, 0.4)) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn ties_break_toward_greater_arclength() {
        // U-shaped polyline; (0, 0.5) is equidistant from the first and
        // last leg, so it must project onto the later one.
        let t = Track::from_waypoints(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            0.6,
        )
        .unwrap();
        let loc = t.locate(0.0, 0.5);
        assert!((loc.progress - 3.0).abs() < 1e-12, "progress {}", loc.progress);
        assert!((loc.offset - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dense_scan_oracle_agrees() {
        // Independent oracle: resample the centerline at 1 mm and take the
        // closest sample by brute force.
        let cfg = TrackConfig::default();
        for seed in 0..5 {
            let t = generate_track(seed, &cfg).unwrap();
            let mut rng = crate::rng::substream(seed, &[0xdead]);
            for _ in 0..40 {
                let s = rng.random_range(0.0..t.total_length());
                let (p, heading) = t.point_at(s);
                let off = rng.random_range(-1.5..1.5);
                let (x, y) = (p[0] - off * heading.sin(), p[1] + off * heading.cos());

                let mut best = (f64::INFINITY, 0.0);
                let mut arc = 0.0;
                while arc <= t.total_length() {
                    let (q, _) = t.point_at(arc);
                    let d = (x - q[0]).hypot(y - q[1]);
                    if d < best.0 {
                        best = (d, arc);
                    }
                    arc += 0.001;
                }
                let loc = t.locate(x, y);
                assert!(
                    (loc.offset - best.0).abs() < 5e-3,
                    "offset {} vs oracle {}",
                    loc.offset,
                    best.0
                );
                assert!(
                    (loc.progress - best.1).abs() < 5e-3,
                    "progress {} vs oracle {}",
                    loc.progress,
                    best.1
                );
            }
        }
    }

    #[test]
    fn progress_is_monotone_along_the_centerline() {
        let cfg = TrackConfig::default();
        let t = generate_track(21, &cfg).unwrap();
        let mut prev = -1.0;
        let mut arc = 0.0;
        while arc <= t.total_length() {
            let (p, _) = t.point_at(arc);
            let prog = t.progress(&state_at(p[0], p[1]));
            assert!(prog >= prev - 1e-9, "progress regressed at arclength {arc}");
            prev = prog;
            arc += 0.05;
        }
    }

    #[test]
    fn progress_offset_invariant_under_rigid_motion() {
        let cfg = TrackConfig::default();
        let t = generate_track(33, &cfg).unwrap();
        let (theta, tx, ty) = (0.83_f64, -4.2, 7.5);
        let rot = |p: [f64; 2]| {
            [
                p[0] * theta.cos() - p[1] * theta.sin() + tx,
                p[0] * theta.sin() + p[1] * theta.cos() + ty,
            ]
        };
        let t2 = Track::from_waypoints(t.waypoints().iter().map(|&p| rot(p)).collect(), t.width())
            .unwrap();
        let mut rng = crate::rng::substream(1, &[]);
        for _ in 0..50 {
            let x = rng.random_range(-2.0..20.0);
            let y = rng.random_range(-5.0..5.0);
            let q = rot([x, y]);
            let a = t.locate(x, y);
            let b = t2.locate(q[0], q[1]);
            assert!((a.progress - b.progress).abs() < 1e-9);
            assert!((a.offset - b.offset).abs() < 1e-9);
        }
    }

    #[test]
    fn locate_near_matches_full_scan_along_a_drive() {
        let cfg = TrackConfig::default();
        let t = generate_track(55, &cfg).unwrap();
        let mut hint = 0;
        let mut arc = 0.0;
        while arc <= t.total_length() {
            let (p, heading) = t.point_at(arc);
            let x = p[0] - 0.2 * heading.sin();
            let y = p[1] + 0.2 * heading.cos();
            let full = t.locate(x, y);
            let near = t.locate_near(x, y, hint, 8);
            assert!((full.progress - near.progress).abs() < 1e-9);
            assert!((full.offset - near.offset).abs() < 1e-9);
            hint = near.segment;
            arc += 0.3;
        }
    }

    #[test]
    fn lateral_accel_zero_for_uniform_motion() {
        let states: Vec<VehicleState> = (0..5)
            .map(|i| VehicleState {
                x: i as f64 * 0.2,
                y: 1.0,
                yaw: 0.0,
                v_long: 2.0,
                v_lat: 0.0,
                yaw_rate: 0.0,
            })
            .collect();
        assert!(lateral_accel(&states).unwrap().abs() < 1e-9);
        // Stationary states too.
        let rest = vec![VehicleState::origin(); 3];
        assert!(lateral_accel(&rest).unwrap().abs() < 1e-9);
        // Fewer than three: undefined.
        assert!(lateral_accel(&rest[..2]).is_none());
    }

    #[test]
    fn lateral_accel_matches_circular_motion() {
        // v = 2 m/s on r = 4 m: analytic centripetal acceleration 1 m/s^2.
        let (v, r) = (2.0, 4.0);
        let omega = v / r;
        let states: Vec<VehicleState> = (0..4)
            .map(|i| {
                let t = i as f64 * DT;
                VehicleState {
                    x: r * (omega * t).sin(),
                    y: r * (1.0 - (omega * t).cos()),
                    yaw: wrap_angle(omega * t),
                    v_long: v,
                    v_lat: 0.0,
                    yaw_rate: omega,
                }
            })
            .collect();
        let a = lateral_accel(&states[..3]).unwrap();
        assert!((a - v * v / r).abs() < 0.02 * (v * v / r), "lateral accel {a}");
    }

    #[test]
    fn serialization_roundtrip() {
        let t = generate_track(2, &TrackConfig::default()).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: Track = serde_json::from_str(&json).unwrap();
        assert_eq!(t.waypoints(), back.waypoints());
        assert_eq!(t.width(), back.width());
    }
}
