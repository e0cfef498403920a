//! Mass-damper plant with a velocity-dependent Stribeck friction term.
//!
//! Dynamics in discrete form, with y^(n) the backward-difference derivative:
//!
//!   m*y^(2)(k) + c1*y^(1)(k) + g(y^(1)(k)) = f(k),
//!   g(v) = (c2 - c1) * v / cosh(alpha * v)
//!
//! The linear part is exactly a*[y, y^(1), y^(2)] with a = [0, c1, m]; the
//! Stribeck term decays so fast that the plant behaves linearly once
//! velocities leave the low-speed band.

use crate::error::{Error, Result};
use crate::parallel;
use crate::signals::{build_stack, generate_reference, ReferenceSpec, Trajectory};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StribeckPlant {
    mass: f64,
    c1: f64,
    c2: f64,
    alpha: f64,
    sample_rate: f64,
}

/// Newton iteration cap for one implicit step.
const STEP_MAX_ITERATIONS: usize = 100;

/// Relative residual target for one implicit step, well inside the
/// 1e-10 round-trip budget.
const STEP_TOLERANCE: f64 = 1e-12;

/// Residual bound the solve must certify even when float granularity stops
/// progress short of the target: one ulp of position moves the residual by
/// about m*fs^2*ulp(y), which can exceed the 1e-12 target.
const STEP_GUARANTEE: f64 = 1e-10;

impl StribeckPlant {
    /// Requires m > 0, c2 >= c1 > 0, alpha > 0, positive sample rate.
    pub fn new(mass: f64, c1: f64, c2: f64, alpha: f64, sample_rate: f64) -> Result<Self> {
        let checks = [
            ("mass", mass > 0.0 && mass.is_finite()),
            ("c1", c1 > 0.0 && c1.is_finite()),
            ("c2", c2 >= c1 && c2.is_finite()),
            ("alpha", alpha > 0.0 && alpha.is_finite()),
            (
                "sample_rate",
                sample_rate > 0.0 && sample_rate.is_finite(),
            ),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "plant parameter {name} out of range"
                )));
            }
        }
        Ok(Self {
            mass,
            c1,
            c2,
            alpha,
            sample_rate,
        })
    }

    /// Benchmark parameters: m = 5, c1 = 1, c2 = 20, alpha = 20.
    pub fn standard(sample_rate: f64) -> Self {
        Self::new(5.0, 1.0, 20.0, 20.0, sample_rate).expect("standard parameters are valid")
    }

    /// Same plant with the friction nonlinearity removed (c2 = c1).
    pub fn linearized(&self) -> Self {
        Self {
            c2: self.c1,
            ..*self
        }
    }

    pub fn is_linear(&self) -> bool {
        self.c2 == self.c1
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// True linear coefficients over [y, y^(1), y^(2)].
    pub fn coefficients(&self) -> [f64; 3] {
        [0.0, self.c1, self.mass]
    }

    /// Stribeck excess friction g(v); odd in v, zero at rest, decays like
    /// v*exp(-alpha*|v|) at speed.
    pub fn friction_nonlinearity(&self, v: f64) -> f64 {
        (self.c2 - self.c1) * v / (self.alpha * v).cosh()
    }

    /// dg/dv, used by the implicit step's Newton iteration.
    fn friction_slope(&self, v: f64) -> f64 {
        let av = self.alpha * v;
        let sech = 1.0 / av.cosh();
        (self.c2 - self.c1) * sech * (1.0 - av * av.tanh())
    }

    fn check_rate(&self, traj: &Trajectory) -> Result<()> {
        if traj.sample_rate() != self.sample_rate {
            return Err(Error::DimensionMismatch(format!(
                "trajectory sampled at {} Hz, plant at {} Hz",
                traj.sample_rate(),
                self.sample_rate
            )));
        }
        Ok(())
    }

    /// Force that reproduces `reference` exactly: the dynamics evaluated at
    /// y = r using discrete derivatives with zero pre-window history.
    pub fn exact_inverse(&self, reference: &Trajectory) -> Result<Trajectory> {
        self.check_rate(reference)?;
        let stack = build_stack(reference, 2);
        let [a0, a1, a2] = self.coefficients();
        let r0 = stack.column(0);
        let r1 = stack.column(1);
        let r2 = stack.column(2);
        let f: Vec<f64> = (0..reference.len())
            .map(|k| a0 * r0[k] + a1 * r1[k] + a2 * r2[k] + self.friction_nonlinearity(r1[k]))
            .collect();
        Trajectory::new(f, self.sample_rate)
    }

    /// Position response to a force input from rest, resolving each
    /// implicit step with safeguarded Newton (bisection fallback).
    pub fn forward_simulate(&self, force: &Trajectory) -> Result<Trajectory> {
        self.check_rate(force)?;
        let fs = self.sample_rate;
        let [a0, a1, a2] = self.coefficients();
        let mut y = Vec::with_capacity(force.len());
        let mut y_prev = 0.0;
        let mut v_prev = 0.0;
        for (step, &fk) in force.samples().iter().enumerate() {
            let residual = |yk: f64| {
                let v = fs * (yk - y_prev);
                let acc = fs * (v - v_prev);
                a0 * yk + a1 * v + a2 * acc + self.friction_nonlinearity(v) - fk
            };
            let slope = |yk: f64| {
                let v = fs * (yk - y_prev);
                a0 + a1 * fs + a2 * fs * fs + self.friction_slope(v) * fs
            };
            // Start from the solution of the linear part with friction frozen
            // at the previous velocity.
            let v_guess =
                (fk - self.friction_nonlinearity(v_prev) - a0 * y_prev + a2 * fs * v_prev)
                    / (a0 / fs + a1 + a2 * fs);
            let guess = y_prev + v_guess / fs;
            let tol = STEP_TOLERANCE * fk.abs().max(1.0);
            let yk = solve_step(residual, slope, guess, 1.0 / fs, tol).map_err(
                |(iterations, residual)| Error::StepNonconvergence {
                    step: step + 1,
                    iterations,
                    residual,
                },
            )?;
            let v = fs * (yk - y_prev);
            y.push(yk);
            y_prev = yk;
            v_prev = v;
        }
        Trajectory::new(y, fs)
    }
}

/// Scalar root solve: Newton constrained to an expanding bracket, bisection
/// when Newton stalls or escapes. The residual is monotone increasing in y
/// for any valid plant, so a sign-changing bracket always exists.
fn solve_step(
    residual: impl Fn(f64) -> f64,
    slope: impl Fn(f64) -> f64,
    guess: f64,
    scale: f64,
    tol: f64,
) -> std::result::Result<f64, (usize, f64)> {
    let mut y = guess;
    let mut r = residual(y);
    if r.abs() <= tol {
        return Ok(y);
    }
    // Bracket the root: residual increasing, so walk down when positive.
    let mut step = scale.max(1e-9 * (1.0 + guess.abs()));
    let (mut lo, mut hi) = (y, y);
    if r > 0.0 {
        for _ in 0..200 {
            lo -= step;
            step *= 2.0;
            if residual(lo) <= 0.0 {
                break;
            }
            hi = lo;
        }
    } else {
        for _ in 0..200 {
            hi += step;
            step *= 2.0;
            if residual(hi) >= 0.0 {
                break;
            }
            lo = hi;
        }
    }
    for iteration in 0..STEP_MAX_ITERATIONS {
        let d = slope(y);
        let newton = if d.is_finite() && d > 0.0 {
            y - r / d
        } else {
            f64::NAN
        };
        y = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        r = residual(y);
        if r.abs() <= tol {
            return Ok(y);
        }
        if r > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        if hi - lo <= f64::EPSILON * (1.0 + y.abs()) {
            // Bracket collapsed to adjacent floats: the residual target is
            // not representable. Accept the better end if it still meets the
            // certified bound.
            let (rl, rh) = (residual(lo).abs(), residual(hi).abs());
            let best = if rl <= rh { lo } else { hi };
            let rb = residual(best).abs();
            if rb <= tol * (STEP_GUARANTEE / STEP_TOLERANCE) {
                return Ok(best);
            }
            return Err((iteration + 1, rb));
        }
    }
    Err((STEP_MAX_ITERATIONS, r.abs()))
}

/// One reference/target pair: the target is the exact inverse force.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub reference: Trajectory,
    pub target: Trajectory,
}

/// Training corpus of reference/force pairs from a single plant.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    entries: Vec<DatasetEntry>,
    model_order_hint: usize,
}

impl Dataset {
    /// Validates pairing: nonempty, per-entry equal lengths and rates, and
    /// every entry longer than the model order hint.
    pub fn new(entries: Vec<DatasetEntry>, model_order_hint: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("dataset has no entries".into()));
        }
        if model_order_hint == 0 {
            return Err(Error::InvalidArgument("model order hint must be >= 1".into()));
        }
        for (j, e) in entries.iter().enumerate() {
            if e.reference.len() != e.target.len() {
                return Err(Error::DimensionMismatch(format!(
                    "entry {j}: reference length {} vs target length {}",
                    e.reference.len(),
                    e.target.len()
                )));
            }
            if e.reference.sample_rate() != e.target.sample_rate() {
                return Err(Error::DimensionMismatch(format!(
                    "entry {j}: mismatched sample rates"
                )));
            }
            if e.reference.len() <= model_order_hint {
                return Err(Error::InvalidArgument(format!(
                    "entry {j}: {} samples cannot support {} model parameters",
                    e.reference.len(),
                    model_order_hint
                )));
            }
        }
        Ok(Self {
            entries,
            model_order_hint,
        })
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn model_order_hint(&self) -> usize {
        self.model_order_hint
    }

    pub fn sample_rate(&self) -> f64 {
        self.entries[0].reference.sample_rate()
    }
}

/// Generates each reference and pairs it with its exact inverse force.
pub fn synthesize_dataset(plant: &StribeckPlant, specs: &[ReferenceSpec]) -> Result<Dataset> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no reference specs given".into()));
    }
    let results = parallel::map_items(specs, |spec| -> Result<DatasetEntry> {
        let mut spec = *spec;
        spec.sample_rate_hz = plant.sample_rate();
        let reference = generate_reference(&spec)?;
        let target = plant.exact_inverse(&reference)?;
        Ok(DatasetEntry { reference, target })
    });
    let entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    Dataset::new(entries, plant.coefficients().len())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    mass: f64,
    c1: f64,
    c2: f64,
    alpha: f64,
    sample_rate_hz: f64,
    n_entries: usize,
    n_theta: usize,
}

/// Writes `meta.json` plus `entry_<j>.csv` files with `k,r,f_hat` rows.
pub fn write_dataset_dir(dataset: &Dataset, plant: &StribeckPlant, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        mass: plant.mass(),
        c1: plant.c1(),
        c2: plant.c2(),
        alpha: plant.alpha(),
        sample_rate_hz: plant.sample_rate(),
        n_entries: dataset.len(),
        n_theta: dataset.model_order_hint(),
    };
    std::fs::write(
        dir.join("meta.json"),
        format!("{}\n", serde_json::to_string_pretty(&meta)?),
    )?;
    for (j, e) in dataset.entries().iter().enumerate() {
        let mut out = String::from("k,r,f_hat\n");
        for k in 0..e.reference.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                k + 1,
                e.reference.samples()[k],
                e.target.samples()[k]
            ));
        }
        std::fs::write(dir.join(format!("entry_{j}.csv")), out)?;
    }
    Ok(())
}

/// Reads a directory written by [`write_dataset_dir`] and rebuilds the plant.
pub fn read_dataset_dir(dir: &Path) -> Result<(Dataset, StribeckPlant)> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    let plant = StribeckPlant::new(meta.mass, meta.c1, meta.c2, meta.alpha, meta.sample_rate_hz)?;
    let mut entries = Vec::with_capacity(meta.n_entries);
    for j in 0..meta.n_entries {
        let path = dir.join(format!("entry_{j}.csv"));
        let text = std::fs::read_to_string(&path)?;
        let malformed = |detail: String| Error::Malformed {
            path: path.display().to_string(),
            detail,
        };
        let mut lines = text.lines();
        match lines.next() {
            Some("k,r,f_hat") => {}
            _ => return Err(malformed("expected header 'k,r,f_hat'".into())),
        }
        let mut r = Vec::new();
        let mut f = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let _k = cols.next();
            let rv = cols
                .next()
                .ok_or_else(|| malformed("missing r column".into()))?;
            let fv = cols
                .next()
                .ok_or_else(|| malformed("missing f_hat column".into()))?;
            r.push(
                rv.parse::<f64>()
                    .map_err(|e| malformed(format!("bad r value: {e}")))?,
            );
            f.push(
                fv.parse::<f64>()
                    .map_err(|e| malformed(format!("bad f_hat value: {e}")))?,
            );
        }
        entries.push(DatasetEntry {
            reference: Trajectory::new(r, meta.sample_rate_hz)?,
            target: Trajectory::new(f, meta.sample_rate_hz)?,
        });
    }
    Ok((Dataset::new(entries, meta.n_theta)?, plant))
}

// ─── Tests ──────────────────────────────────────────────────────────────────
