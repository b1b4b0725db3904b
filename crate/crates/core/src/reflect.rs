//! Euler discretization of the semimartingale reflecting Brownian motion on
//! the orthant. Each step solves a small Skorokhod problem posed as a linear
//! complementarity problem; its multiplier is the local-time increment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{validate_model, ModelSpec};
use crate::scalar::Scalar;

/// Fixed-point sweeps before the active-set fallback is tried.
pub const LCP_MAX_ITER: usize = 10_000;
pub const LCP_TOL: f64 = 1e-12;
/// Largest dimension for which the active-set enumeration fallback runs.
pub const ENUMERATION_MAX_DIM: usize = 8;
/// Non-finite state scan period, in steps.
pub const NAN_CHECK_PERIOD: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    /// Physical-clock duration of each replica.
    pub horizon: f64,
    pub seed: u64,
    pub replicas: usize,
    pub z0: Vec<f64>,
    /// Discard window, measured on the sticky clock.
    pub burn_in: f64,
}

impl SimConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.horizon > self.dt && self.horizon.is_finite()) {
            return Err(Error::Config(format!(
                "horizon = {} must exceed dt = {}",
                self.horizon, self.dt
            )));
        }
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be positive".into()));
        }
        if self.z0.len() != d {
            return Err(Error::Config(format!(
                "z0 has {} entries, expected {d}",
                self.z0.len()
            )));
        }
        if self.z0.iter().any(|&z| !(z >= 0.0 && z.is_finite())) {
            return Err(Error::Config("z0 must be finite and non-negative".into()));
        }
        if !(self.burn_in >= 0.0 && self.burn_in < self.horizon) {
            return Err(Error::Config(format!(
                "burn_in = {} must lie in [0, horizon)",
                self.burn_in
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        (self.horizon / self.dt).round() as u64
    }
}

/// Independent, reproducible stream for one replica.
pub fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// Allocation-free solver for `z + dx + R·dL ≥ 0`, `dL ≥ 0`, complementarity.
#[derive(Debug, Clone)]
pub struct SkorokhodSolver<T> {
    r: Matrix<T>,
    diag_inv: Vec<T>,
    tol: T,
    w: Vec<T>,
}

impl<T: Scalar> SkorokhodSolver<T> {
    pub fn new(r: &Matrix<T>) -> Result<Self> {
        if !r.is_square() {
            return Err(Error::Config("reflection matrix must be square".into()));
        }
        let diag_inv = r
            .diag()
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                if v > T::zero() {
                    Ok(T::one() / v)
                } else {
                    Err(Error::DegenerateReflection { index: i })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            r: r.clone(),
            diag_inv,
            tol: T::solve_tol(LCP_TOL),
            w: vec![T::zero(); r.rows()],
        })
    }

    pub fn dim(&self) -> usize {
        self.r.rows()
    }

    /// Writes the reflected state and the pushing increment. Coordinates that
    /// were pushed are set to exactly zero.
    pub fn solve(&mut self, z: &[T], dx: &[T], z_next: &mut [T], dl: &mut [T]) -> Result<usize> {
        let d = self.dim();
        let mut inside = true;
        for i in 0..d {
            self.w[i] = z[i] + dx[i];
            if self.w[i] < T::zero() {
                inside = false;
            }
        }
        dl.iter_mut().for_each(|v| *v = T::zero());
        if inside {
            z_next.copy_from_slice(&self.w);
            return Ok(0);
        }
        let scale = T::one().max(self.w.iter().fold(T::zero(), |m, &v| m.max(v.abs())));
        let tol = self.tol * scale;

        // projected Gauss-Seidel: dl_i <- max(0, dl_i - (w + R dl)_i / r_ii)
        let mut iterations = 0;
        let mut converged = false;
        while iterations < LCP_MAX_ITER {
            iterations += 1;
            let mut change = T::zero();
            for i in 0..d {
                let row = self.r.row(i);
                let mut s = self.w[i];
                for j in 0..d {
                    s += row[j] * dl[j];
                }
                let next = (dl[i] - s * self.diag_inv[i]).max(T::zero());
                change = change.max((next - dl[i]).abs());
                dl[i] = next;
            }
            if change <= tol {
                converged = true;
                break;
            }
        }
        if converged {
            self.finish(dl, z_next);
            if z_next.iter().all(|&v| v >= -tol) {
                clamp_state(z_next, dl);
                return Ok(iterations);
            }
        }
        if d <= ENUMERATION_MAX_DIM && self.enumerate(dl, tol) {
            self.finish(dl, z_next);
            clamp_state(z_next, dl);
            return Ok(iterations);
        }
        Err(Error::StepFailure {
            state: z.iter().map(|v| v.to_f64_lossy()).collect(),
            increment: dx.iter().map(|v| v.to_f64_lossy()).collect(),
            iterations,
        })
    }

    fn finish(&self, dl: &[T], z_next: &mut [T]) {
        let d = self.dim();
        for i in 0..d {
            let row = self.r.row(i);
            let mut s = self.w[i];
            for j in 0..d {
                s += row[j] * dl[j];
            }
            z_next[i] = s;
        }
    }

    /// Tries active sets in order of increasing size; the first complementary
    /// solution wins.
    fn enumerate(&self, dl: &mut [T], tol: T) -> bool {
        let d = self.dim();
        let mut masks: Vec<u32> = (1u32..(1 << d)).collect();
        masks.sort_by_key(|m| (m.count_ones(), *m));
        for mask in masks {
            let idx: Vec<usize> = (0..d).filter(|&i| mask & (1 << i) != 0).collect();
            let sub = self.r.select(&idx, &idx);
            let rhs: Vec<T> = idx.iter().map(|&i| -self.w[i]).collect();
            let Ok(sol) = sub.solve(&rhs) else { continue };
            if sol.iter().any(|&v| v < -tol) {
                continue;
            }
            dl.iter_mut().for_each(|v| *v = T::zero());
            for (&i, &v) in idx.iter().zip(&sol) {
                dl[i] = v.max(T::zero());
            }
            let ok = (0..d).all(|i| {
                let s = self.w[i] + (0..d).map(|j| self.r[(i, j)] * dl[j]).sum::<T>();
                s >= -tol
            });
            if ok {
                return true;
            }
        }
        false
    }
}

fn clamp_state<T: Scalar>(z_next: &mut [T], dl: &[T]) {
    for (z, &l) in z_next.iter_mut().zip(dl) {
        if l > T::zero() || *z < T::zero() {
            *z = T::zero();
        }
    }
}

/// One discrete Skorokhod problem: returns `(z_next, dL)`.
pub fn skorokhod_step<T: Scalar>(z: &[T], dx: &[T], r: &Matrix<T>) -> Result<(Vec<T>, Vec<T>)> {
    if z.len() != r.rows() || dx.len() != r.rows() {
        return Err(Error::Config(
            "state, increment and R dimensions differ".into(),
        ));
    }
    let mut solver = SkorokhodSolver::new(r)?;
    let mut z_next = vec![T::zero(); z.len()];
    let mut dl = vec![T::zero(); z.len()];
    solver.solve(z, dx, &mut z_next, &mut dl)?;
    Ok((z_next, dl))
}

/// Violation counters for the per-step path invariants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct InvariantStats {
    pub steps: u64,
    pub negativity: u64,
    pub local_time_decrease: u64,
    pub complementarity: u64,
    pub reconstruction: u64,
    pub max_reconstruction_error: f64,
}

impl InvariantStats {
    pub fn violations(&self) -> u64 {
        self.negativity + self.local_time_decrease + self.complementarity + self.reconstruction
    }

    pub fn merge(&mut self, other: &InvariantStats) {
        self.steps += other.steps;
        self.negativity += other.negativity;
        self.local_time_decrease += other.local_time_decrease;
        self.complementarity += other.complementarity;
        self.reconstruction += other.reconstruction;
        self.max_reconstruction_error = self
            .max_reconstruction_error
            .max(other.max_reconstruction_error);
    }
}

pub const NEGATIVITY_TOL: f64 = 1e-12;
pub const LOCAL_TIME_TOL: f64 = 1e-15;
pub const FACE_TOL: f64 = 1e-8;
pub const PUSH_TOL: f64 = 1e-12;
pub const RECONSTRUCTION_TOL: f64 = 1e-8;

enum Driver<T> {
    Gaussian {
        rng: ChaCha8Rng,
        chol: Matrix<T>,
        sqrt_dt: T,
    },
    Given {
        increments: Vec<T>,
        pos: usize,
    },
}

/// Borrowed view of one completed step `k → k+1`.
#[derive(Debug, Clone, Copy)]
pub struct StepView<'a, T> {
    /// Index of the step's starting grid point.
    pub k: u64,
    pub t_prev: T,
    pub t_next: T,
    pub z_prev: &'a [T],
    pub z_next: &'a [T],
    pub l_prev: &'a [T],
    pub l_next: &'a [T],
    pub dl: &'a [T],
}

/// Streaming SRBM integrator. Holds the current state, cumulative local time
/// and cumulative driving process.
pub struct SrbmStepper<T> {
    d: usize,
    dt: T,
    drift_dt: Vec<T>,
    refl: Matrix<T>,
    z0: Vec<T>,
    solver: SkorokhodSolver<T>,
    driver: Driver<T>,
    k: u64,
    z: Vec<T>,
    z_prev: Vec<T>,
    l: Vec<T>,
    l_prev: Vec<T>,
    x: Vec<T>,
    dx: Vec<T>,
    dl: Vec<T>,
    xi: Vec<T>,
    monitor: Option<InvariantStats>,
}

impl<T: Scalar> SrbmStepper<T> {
    /// Gaussian driver with the replica's own stream.
    pub fn new(spec: &ModelSpec<T>, z0: &[T], dt: T, seed: u64, replica: u64) -> Result<Self> {
        let chol = spec
            .sigma
            .cholesky()
            .ok_or_else(|| Error::Precondition("sigma is not positive definite".into()))?;
        let driver = Driver::Gaussian {
            rng: replica_rng(seed, replica),
            chol,
            sqrt_dt: dt.sqrt(),
        };
        Self::build(spec, z0, dt, driver)
    }

    /// Deterministic driver: `increments` holds the free-path increments `dx`
    /// of each step, `d` values per step.
    pub fn with_increments(
        spec: &ModelSpec<T>,
        z0: &[T],
        dt: T,
        increments: Vec<T>,
    ) -> Result<Self> {
        if !increments.len().is_multiple_of(spec.d) {
            return Err(Error::Config(
                "increment record length is not a multiple of d".into(),
            ));
        }
        Self::build(spec, z0, dt, Driver::Given { increments, pos: 0 })
    }

    fn build(spec: &ModelSpec<T>, z0: &[T], dt: T, driver: Driver<T>) -> Result<Self> {
        let d = spec.d;
        if z0.len() != d {
            return Err(Error::Config(format!(
                "z0 has {} entries, expected {d}",
                z0.len()
            )));
        }
        if z0.iter().any(|&v| !(v >= T::zero())) {
            return Err(Error::Config("z0 must be non-negative".into()));
        }
        if !(dt > T::zero()) {
            return Err(Error::Config("dt must be positive".into()));
        }
        Ok(Self {
            d,
            dt,
            drift_dt: spec.mu.iter().map(|&m| m * dt).collect(),
            refl: spec.refl.clone(),
            z0: z0.to_vec(),
            solver: SkorokhodSolver::new(&spec.refl)?,
            driver,
            k: 0,
            z: z0.to_vec(),
            z_prev: z0.to_vec(),
            l: vec![T::zero(); d],
            l_prev: vec![T::zero(); d],
            x: vec![T::zero(); d],
            dx: vec![T::zero(); d],
            dl: vec![T::zero(); d],
            xi: vec![T::zero(); d],
            monitor: None,
        })
    }

    /// Enables per-step invariant counting.
    pub fn monitored(mut self) -> Self {
        self.monitor = Some(InvariantStats::default());
        self
    }

    pub fn invariant_stats(&self) -> Option<InvariantStats> {
        self.monitor
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn steps_taken(&self) -> u64 {
        self.k
    }

    pub fn time(&self) -> T {
        grid_time(self.k, self.dt)
    }

    pub fn state(&self) -> &[T] {
        &self.z
    }

    pub fn local_time(&self) -> &[T] {
        &self.l
    }

    pub fn noise(&self) -> &[T] {
        &self.x
    }

    /// Advances one step and returns a view of it.
    pub fn step(&mut self) -> Result<StepView<'_, T>> {
        let d = self.d;
        match &mut self.driver {
            Driver::Gaussian { rng, chol, sqrt_dt } => {
                for v in self.xi.iter_mut() {
                    let s: f64 = StandardNormal.sample(rng);
                    *v = T::lit(s);
                }
                chol.mul_vec_into(&self.xi, &mut self.dx);
                for i in 0..d {
                    self.dx[i] = self.drift_dt[i] + *sqrt_dt * self.dx[i];
                }
            }
            Driver::Given { increments, pos } => {
                if *pos + d > increments.len() {
                    return Err(Error::Config("increment record exhausted".into()));
                }
                self.dx.copy_from_slice(&increments[*pos..*pos + d]);
                *pos += d;
            }
        }
        self.z_prev.copy_from_slice(&self.z);
        self.l_prev.copy_from_slice(&self.l);
        self.solver
            .solve(&self.z_prev, &self.dx, &mut self.z, &mut self.dl)?;
        for i in 0..d {
            self.l[i] += self.dl[i];
            self.x[i] += self.dx[i];
        }
        self.k += 1;
        if self.k.is_multiple_of(NAN_CHECK_PERIOD) && self.z.iter().chain(&self.l).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: self.k });
        }
        if self.monitor.is_some() {
            self.record_invariants();
        }
        Ok(StepView {
            k: self.k - 1,
            t_prev: grid_time(self.k - 1, self.dt),
            t_next: grid_time(self.k, self.dt),
            z_prev: &self.z_prev,
            z_next: &self.z,
            l_prev: &self.l_prev,
            l_next: &self.l,
            dl: &self.dl,
        })
    }

    fn record_invariants(&mut self) {
        let d = self.d;
        let mut recon = 0.0f64;
        for i in 0..d {
            let pushed: T = (0..d).map(|j| self.refl[(i, j)] * self.l[j]).sum();
            let expected = self.z0[i] + self.x[i] + pushed;
            recon = recon.max((self.z[i] - expected).abs().to_f64_lossy());
        }
        let neg = self.z.iter().any(|v| v.to_f64_lossy() < -NEGATIVITY_TOL);
        let dec = self.dl.iter().any(|v| v.to_f64_lossy() < -LOCAL_TIME_TOL);
        let comp = self
            .dl
            .iter()
            .zip(&self.z)
            .any(|(l, z)| l.to_f64_lossy() > PUSH_TOL && z.to_f64_lossy() >= FACE_TOL);
        let m = self.monitor.as_mut().expect("monitor enabled");
        m.steps += 1;
        m.negativity += neg as u64;
        m.local_time_decrease += dec as u64;
        m.complementarity += comp as u64;
        m.reconstruction += (recon >= RECONSTRUCTION_TOL) as u64;
        m.max_reconstruction_error = m.max_reconstruction_error.max(recon);
    }
}

#[inline]
pub(crate) fn grid_time<T: Scalar>(k: u64, dt: T) -> T {
    T::lit(k as f64) * dt
}

/// A stored discretized reflected path on the grid `t_k = k·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SrbmPath<T> {
    pub d: usize,
    pub dt: T,
    pub times: Vec<T>,
    /// Reflected state, `d` values per grid point.
    pub z: Vec<T>,
    /// Cumulative local time, `d` values per grid point.
    pub local_time: Vec<T>,
    /// Cumulative driving process `X(t_k)`, `d` values per grid point.
    pub noise: Vec<T>,
}

impl<T: Scalar> SrbmPath<T> {
    fn start(d: usize, dt: T, z0: &[T]) -> Self {
        Self {
            d,
            dt,
            times: vec![T::zero()],
            z: z0.to_vec(),
            local_time: vec![T::zero(); d],
            noise: vec![T::zero(); d],
        }
    }

    fn push_from(&mut self, stepper: &SrbmStepper<T>) {
        self.times.push(stepper.time());
        self.z.extend_from_slice(stepper.state());
        self.local_time.extend_from_slice(stepper.local_time());
        self.noise.extend_from_slice(stepper.noise());
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.len().saturating_sub(1)
    }

    pub fn z_at(&self, k: usize) -> &[T] {
        &self.z[k * self.d..(k + 1) * self.d]
    }

    pub fn local_time_at(&self, k: usize) -> &[T] {
        &self.local_time[k * self.d..(k + 1) * self.d]
    }

    pub fn noise_at(&self, k: usize) -> &[T] {
        &self.noise[k * self.d..(k + 1) * self.d]
    }

    pub fn horizon(&self) -> T {
        *self.times.last().expect("path has a starting point")
    }

    /// Replays the stored steps as views, in order.
    pub fn for_each_step(&self, mut f: impl FnMut(&StepView<'_, T>)) {
        let d = self.d;
        let mut dl = vec![T::zero(); d];
        for k in 0..self.steps() {
            let l_prev = self.local_time_at(k);
            let l_next = self.local_time_at(k + 1);
            for i in 0..d {
                dl[i] = l_next[i] - l_prev[i];
            }
            f(&StepView {
                k: k as u64,
                t_prev: self.times[k],
                t_next: self.times[k + 1],
                z_prev: self.z_at(k),
                z_next: self.z_at(k + 1),
                l_prev,
                l_next,
                dl: &dl,
            });
        }
    }

    /// Checks the stored path against the reflected-path invariants.
    pub fn check_invariants(&self, refl: &Matrix<T>) -> InvariantStats {
        let d = self.d;
        let z0 = self.z_at(0);
        let mut stats = InvariantStats::default();
        for k in 1..self.len() {
            let z = self.z_at(k);
            let l = self.local_time_at(k);
            let lp = self.local_time_at(k - 1);
            let x = self.noise_at(k);
            let mut recon = 0.0f64;
            for i in 0..d {
                let pushed: T = (0..d).map(|j| refl[(i, j)] * l[j]).sum();
                recon = recon.max((z[i] - (z0[i] + x[i] + pushed)).abs().to_f64_lossy());
            }
            stats.steps += 1;
            stats.negativity += z.iter().any(|v| v.to_f64_lossy() < -NEGATIVITY_TOL) as u64;
            stats.local_time_decrease +=
                (0..d).any(|i| (l[i] - lp[i]).to_f64_lossy() < -LOCAL_TIME_TOL) as u64;
            stats.complementarity += (0..d).any(|i| {
                (l[i] - lp[i]).to_f64_lossy() > PUSH_TOL && z[i].to_f64_lossy() >= FACE_TOL
            }) as u64;
            stats.reconstruction += (recon >= RECONSTRUCTION_TOL) as u64;
            stats.max_reconstruction_error = stats.max_reconstruction_error.max(recon);
        }
        stats
    }

    /// Linear resampling on the grid `s_j = j·grid_dt`, for `first ≤ j` and
    /// `s_j < horizon`. Returns `d` values per sample.
    pub fn resample(&self, grid_dt: T, first: u64) -> Vec<T> {
        let d = self.d;
        let mut out = Vec::new();
        let mut k = 0usize;
        let n = self.len();
        let mut j = first;
        loop {
            let s = grid_time(j, grid_dt);
            if s >= self.horizon() {
                break;
            }
            while k + 1 < n && self.times[k + 1] <= s {
                k += 1;
            }
            let frac = (s - self.times[k]) / (self.times[k + 1] - self.times[k]);
            let (a, b) = (self.z_at(k), self.z_at(k + 1));
            for i in 0..d {
                out.push(lerp(a[i], b[i], frac));
            }
            j += 1;
        }
        out
    }

    /// CSV dump with columns `t, z_1..z_d, L_1..L_d`, every `decimation`-th
    /// grid point.
    pub fn write_csv<W: Write>(&self, mut out: W, decimation: usize) -> std::io::Result<()> {
        let d = self.d;
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("z_{i}")));
        header.extend((1..=d).map(|i| format!("L_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for k in (0..self.len()).step_by(decimation.max(1)) {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.z_at(k).iter().map(|v| v.to_string()));
            row.extend(self.local_time_at(k).iter().map(|v| v.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn lerp<T: Scalar>(a: T, b: T, frac: T) -> T {
    a + frac * (b - a)
}

fn check_simulable<T: Scalar>(spec: &ModelSpec<T>) -> Result<()> {
    let report = validate_model(spec);
    if !report.spd_ok {
        return Err(Error::Precondition(
            "sigma must be symmetric positive definite".into(),
        ));
    }
    if !report.completely_s_ok {
        return Err(Error::Precondition("R must be completely-S".into()));
    }
    Ok(())
}

/// Simulates replica `replica` of the configuration and stores the full path.
pub fn simulate_srbm<T: Scalar>(
    spec: &ModelSpec<T>,
    cfg: &SimConfig,
    replica: u64,
) -> Result<SrbmPath<T>> {
    cfg.validate(spec.d)?;
    check_simulable(spec)?;
    let z0: Vec<T> = cfg.z0.iter().map(|&v| T::lit(v)).collect();
    let dt = T::lit(cfg.dt);
    let mut stepper = SrbmStepper::new(spec, &z0, dt, cfg.seed, replica)?;
    run_stored(&mut stepper, cfg.steps(), &z0)
}

/// Simulates a path driven by the given free increments (`d` per step).
pub fn simulate_srbm_with_increments<T: Scalar>(
    spec: &ModelSpec<T>,
    z0: &[T],
    dt: T,
    increments: Vec<T>,
) -> Result<SrbmPath<T>> {
    let steps = (increments.len() / spec.d) as u64;
    let mut stepper = SrbmStepper::with_increments(spec, z0, dt, increments)?;
    run_stored(&mut stepper, steps, z0)
}

fn run_stored<T: Scalar>(
    stepper: &mut SrbmStepper<T>,
    steps: u64,
    z0: &[T],
) -> Result<SrbmPath<T>> {
    let mut path = SrbmPath::start(stepper.dim(), stepper.dt(), z0);
    let d = stepper.dim();
    path.times.reserve(steps as usize);
    path.z.reserve(steps as usize * d);
    path.local_time.reserve(steps as usize * d);
    path.noise.reserve(steps as usize * d);
    for _ in 0..steps {
        stepper.step()?;
        path.push_from(stepper);
    }
    if path.z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step: steps });
    }
    Ok(path)
}

/// All replicas of a configuration, in replica order.
pub fn simulate_replicas<T: Scalar>(
    spec: &ModelSpec<T>,
    cfg: &SimConfig,
) -> Result<Vec<SrbmPath<T>>> {
    (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|r| simulate_srbm(spec, cfg, r))
        .collect()
}
