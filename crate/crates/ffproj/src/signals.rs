//! Sampled references and backward-difference derivative stacks.
//!
//! A trajectory is a uniformly sampled scalar signal r(k), k = 1..N, with the
//! pre-window convention r(k) = 0 for k <= 0 unless an explicit history is
//! supplied. Discrete derivatives are backward differences scaled by the
//! sample rate, so an order-n column of a stack is exactly n repeated first
//! differences of the position column.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Uniformly sampled scalar signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl Trajectory {
    /// Builds a trajectory from samples taken at `sample_rate` Hz.
    ///
    /// Requires at least 2 samples, a positive sample rate, and finite values.
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sample rate must be positive and finite, got {sample_rate}"
            )));
        }
        if let Some(bad) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("trajectory sample {bad}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// All-zero trajectory of length `n`.
    pub fn zeros(n: usize, sample_rate: f64) -> Result<Self> {
        Self::new(vec![0.0; n], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Root-mean-square of the samples.
    pub fn rms(&self) -> f64 {
        let ss: f64 = self.samples.iter().map(|x| x * x).sum();
        (ss / self.samples.len() as f64).sqrt()
    }

    /// Writes `k,r` rows plus a `.json` sidecar carrying the sample rate.
    ///
    /// Sample indices are 1-based. Floats are written in shortest
    /// round-trip form, so rewriting the same trajectory is byte-identical.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("k,r\n");
        for (i, r) in self.samples.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, r));
        }
        std::fs::write(path, out)?;
        let sidecar = path.with_extension("json");
        let meta = serde_json::json!({ "sample_rate_hz": self.sample_rate });
        std::fs::write(sidecar, format!("{:#}\n", meta))?;
        Ok(())
    }

    /// Reads a trajectory written by [`Trajectory::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let malformed = |detail: &str| Error::Malformed {
            path: path.display().to_string(),
            detail: detail.to_string(),
        };
        let mut lines = text.lines();
        match lines.next() {
            Some("k,r") => {}
            _ => return Err(malformed("expected header 'k,r'")),
        }
        let mut samples = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let (_, r) = line
                .split_once(',')
                .ok_or_else(|| malformed("expected 'k,r' row"))?;
            samples.push(
                r.parse::<f64>()
                    .map_err(|e| malformed(&format!("bad sample: {e}")))?,
            );
        }
        let sidecar = path.with_extension("json");
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?;
        let rate = meta
            .get("sample_rate_hz")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Malformed {
                path: sidecar.display().to_string(),
                detail: "missing sample_rate_hz".to_string(),
            })?;
        Self::new(samples, rate)
    }
}

/// Backward-difference derivative of `traj`.
///
/// `initial_history[n]` is the value of the n-th derivative at the pre-window
/// sample k = 0; missing entries are taken as 0 (signal at rest before the
/// window). Order 0 returns the trajectory unchanged.
pub fn derivative(traj: &Trajectory, order: usize, initial_history: &[f64]) -> Trajectory {
    let fs = traj.sample_rate;
    let mut cur = traj.samples.clone();
    for level in 0..order {
        let mut prev = initial_history.get(level).copied().unwrap_or(0.0);
        for x in cur.iter_mut() {
            let next_prev = *x;
            *x = fs * (*x - prev);
            prev = next_prev;
        }
    }
    Trajectory {
        samples: cur,
        sample_rate: fs,
    }
}

/// Matrix of derivative columns 0..=max_order for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeStack {
    columns: DMatrix<f64>,
    sample_rate: f64,
}

impl DerivativeStack {
    /// N x (max_order + 1) matrix; column n holds the order-n derivative.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    /// Order-n derivative column as a vector.
    pub fn column(&self, order: usize) -> Vec<f64> {
        self.columns.column(order).iter().copied().collect()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.columns.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.nrows() == 0
    }

    pub fn max_order(&self) -> usize {
        self.columns.ncols() - 1
    }
}

/// Stacks derivatives of orders 0..=max_order, zero pre-window history.
pub fn build_stack(traj: &Trajectory, max_order: usize) -> DerivativeStack {
    let n = traj.len();
    let mut columns = DMatrix::zeros(n, max_order + 1);
    let mut cur = traj.clone();
    columns.column_mut(0).copy_from_slice(cur.samples());
    for order in 1..=max_order {
        cur = derivative(&cur, 1, &[]);
        columns.column_mut(order).copy_from_slice(cur.samples());
    }
    DerivativeStack {
        columns,
        sample_rate: traj.sample_rate,
    }
}

/// Point-to-point motion profile request.
///
/// Bounds apply to the discrete derivatives of the generated trajectory:
/// velocity, acceleration, jerk, and snap in turn. `dwell_samples` rest
/// samples are prepended and appended around the motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub displacement: f64,
    pub max_velocity: f64,
    pub max_acceleration: f64,
    pub max_jerk: f64,
    pub max_snap: f64,
    pub sample_rate_hz: f64,
    #[serde(default)]
    pub dwell_samples: usize,
}

impl ReferenceSpec {
    fn validate(&self) -> Result<()> {
        let bounds = [
            ("max_velocity", self.max_velocity),
            ("max_acceleration", self.max_acceleration),
            ("max_jerk", self.max_jerk),
            ("max_snap", self.max_snap),
            ("sample_rate_hz", self.sample_rate_hz),
        ];
        for (name, value) in bounds {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InfeasibleReference(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if !self.displacement.is_finite() {
            return Err(Error::InfeasibleReference(format!(
                "displacement must be finite, got {}",
                self.displacement
            )));
        }
        Ok(())
    }
}

/// Snap-limited symmetric profile: piecewise-constant snap integrated through
/// jerk, acceleration, and velocity. Segment durations per phase.
struct ProfileTimes {
    t1: f64, // constant-snap
    t2: f64, // constant-jerk
    t3: f64, // constant-acceleration
    t4: f64, // constant-velocity
}

/// Largest x in [0, hi] with g(x) <= target, for increasing g with
/// g(0) <= target. Expands hi until g(hi) >= target, then bisects.
fn bisect_largest(mut hi: f64, target: f64, g: impl Fn(f64) -> f64) -> f64 {
    if g(hi) < target {
        for _ in 0..200 {
            hi *= 2.0;
            if g(hi) >= target {
                break;
            }
        }
        if g(hi) < target {
            return hi;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn profile_times(d: f64, spec: &ReferenceSpec) -> Result<ProfileTimes> {
    let (v, a, j, s) = (
        spec.max_velocity,
        spec.max_acceleration,
        spec.max_jerk,
        spec.max_snap,
    );
    // Constant-snap duration: saturate whichever bound binds first when all
    // hold segments are zero. Peak jerk s*t1, accel s*t1^2, velocity
    // 2*s*t1^3, displacement 8*s*t1^4.
    let t1 = (j / s)
        .min((a / s).sqrt())
        .min((v / (2.0 * s)).cbrt())
        .min((d / (8.0 * s)).powf(0.25));
    if !(t1 > 0.0 && t1.is_finite()) {
        return Err(Error::InfeasibleReference(format!(
            "degenerate snap segment duration {t1}"
        )));
    }
    let jp = s * t1;
    // Constant-jerk duration: accel cap in closed form, velocity cap via its
    // quadratic root, displacement cap by bisection (monotone in t2).
    let t2_acc = (a / jp - t1).max(0.0);
    let t2_vel = 0.5 * (-3.0 * t1 + (t1 * t1 + 4.0 * v / jp).sqrt()).max(0.0);
    let t2_disp = bisect_largest(t1.max(1.0), d, |t2| {
        2.0 * jp * (t1 + t2) * (2.0 * t1 + t2) * (2.0 * t1 + t2)
    });
    let t2 = t2_acc.min(t2_vel).min(t2_disp);
    let ap = jp * (t1 + t2);
    // Constant-acceleration duration: velocity cap closed form, displacement
    // cap by bisection.
    let t3_vel = (v / ap - (2.0 * t1 + t2)).max(0.0);
    let t3_disp = bisect_largest(t1.max(1.0), d, |t3| {
        ap * (2.0 * t1 + t2 + t3) * (4.0 * t1 + 2.0 * t2 + t3)
    });
    let t3 = t3_vel.min(t3_disp);
    let vp = ap * (2.0 * t1 + t2 + t3);
    // Cruise duration closes the displacement exactly.
    let t4 = (d / vp - (4.0 * t1 + 2.0 * t2 + t3)).max(0.0);
    Ok(ProfileTimes { t1, t2, t3, t4 })
}

/// Closed-form state (jerk, accel, velocity, position) integration of a
/// piecewise-constant snap sequence.
struct SnapProfile {
    // (start time, duration, snap, state at segment start)
    segments: Vec<(f64, f64, f64, [f64; 4])>,
    total_time: f64,
    final_position: f64,
}

impl SnapProfile {
    fn build(times: &ProfileTimes, snap: f64) -> Self {
        let ProfileTimes { t1, t2, t3, t4 } = *times;
        let pattern = [
            (t1, snap),
            (t2, 0.0),
            (t1, -snap),
            (t3, 0.0),
            (t1, -snap),
            (t2, 0.0),
            (t1, snap),
            (t4, 0.0),
            (t1, -snap),
            (t2, 0.0),
            (t1, snap),
            (t3, 0.0),
            (t1, snap),
            (t2, 0.0),
            (t1, -snap),
        ];
        let mut segments = Vec::with_capacity(pattern.len());
        let mut state = [0.0f64; 4];
        let mut t0 = 0.0;
        for (dur, sn) in pattern {
            if dur > 0.0 {
                segments.push((t0, dur, sn, state));
                state = Self::advance(&state, sn, dur);
                t0 += dur;
            }
        }
        SnapProfile {
            segments,
            total_time: t0,
            final_position: state[3],
        }
    }

    fn advance(state: &[f64; 4], snap: f64, tau: f64) -> [f64; 4] {
        let [j, a, v, p] = *state;
        [
            j + snap * tau,
            a + j * tau + snap * tau * tau / 2.0,
            v + a * tau + j * tau * tau / 2.0 + snap * tau * tau * tau / 6.0,
            p + v * tau + a * tau * tau / 2.0 + j * tau * tau * tau / 6.0
                + snap * tau * tau * tau * tau / 24.0,
        ]
    }

    fn position(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= self.total_time {
            return self.final_position;
        }
        for &(t0, dur, snap, state) in self.segments.iter().rev() {
            if t >= t0 {
                let tau = (t - t0).min(dur);
                return Self::advance(&state, snap, tau)[3];
            }
        }
        0.0
    }
}

/// Generates a symmetric snap-limited point-to-point reference.
///
/// The motion starts from rest at 0 and settles at `displacement`; bounds on
/// the discrete velocity, acceleration, jerk, and snap hold with margin
/// because each discrete difference averages the continuous derivative.
/// Zero displacement yields an all-zero trajectory.
pub fn generate_reference(spec: &ReferenceSpec) -> Result<Trajectory> {
    spec.validate()?;
    let fs = spec.sample_rate_hz;
    let dwell = spec.dwell_samples;
    if spec.displacement == 0.0 {
        return Trajectory::zeros((2 * dwell + 2).max(2), fs);
    }
    let d_abs = spec.displacement.abs();
    let sign = spec.displacement.signum();
    let times = profile_times(d_abs, spec)?;
    let profile = SnapProfile::build(&times, spec.max_snap);
    if !(profile.final_position > 0.0 && profile.final_position.is_finite()) {
        return Err(Error::InfeasibleReference(format!(
            "profile integration produced position {}",
            profile.final_position
        )));
    }
    let n_motion = (profile.total_time * fs).ceil() as usize + 1;
    let n = dwell + n_motion + dwell;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        // Sample k = i + 1 sits at t = (k - dwell)/fs; motion starts at t = 0.
        let t = (i + 1) as f64 / fs - dwell as f64 / fs;
        let p = if t >= profile.total_time {
            profile.final_position
        } else {
            profile.position(t)
        };
        samples.push(sign * (p / profile.final_position) * d_abs);
    }
    Trajectory::new(samples, fs)
}

// ─── Tests ──────────────────────────────────────────────────────────────────
