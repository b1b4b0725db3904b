//! Random time change `S(t) = t + Σ uᵢ Lᵢ(t)`, its inverse `T`, and the
//! sticky path `Z(s) = Z̃(T(s))`.
//!
//! On each Euler step the discrete clock is split in two pieces. While the
//! free increment moves the state, `S` runs at slope one. The local-time
//! push `dL` is then spent as a pause of length `Σ uᵢ dLᵢ`, during which
//! `T` is flat and the sticky path rests at the reflected state. Sticky time
//! spent in pauses is the boundary atom.

use serde::Serialize;
use std::io::Write;

use crate::error::{Error, Result};
use crate::reflect::{grid_time, lerp, SrbmPath, StepView};
use crate::scalar::{KahanSum, Scalar};

#[inline]
fn clock_value<T: Scalar>(t: T, u: &[T], l: &[T]) -> T {
    let mut push = T::zero();
    for (&ui, &li) in u.iter().zip(l) {
        push += ui * li;
    }
    t + push
}

fn check_stickiness<T: Scalar>(u: &[T], d: usize) -> Result<()> {
    if u.len() != d {
        return Err(Error::Config(format!(
            "u has {} entries, expected {d}",
            u.len()
        )));
    }
    if u.iter().any(|&v| !(v >= T::zero() && v.is_finite())) {
        return Err(Error::Config(
            "stickiness parameters must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

/// The clock on the physical grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeChange<T> {
    pub grid: Vec<T>,
    /// `S(t_k)`.
    pub clock: Vec<T>,
    /// `S(t_k−)`: the clock at the end of the move phase of step `k−1`,
    /// before that step's push is added. Equal to `clock[0]` at `k = 0`.
    pub clock_before: Vec<T>,
}

impl<T: Scalar> TimeChange<T> {
    pub fn sticky_horizon(&self) -> T {
        *self.clock.last().expect("non-empty clock")
    }
}

pub fn clock_forward<T: Scalar>(path: &SrbmPath<T>, u: &[T]) -> Result<TimeChange<T>> {
    check_stickiness(u, path.d)?;
    let n = path.len();
    let mut clock = Vec::with_capacity(n);
    let mut clock_before = Vec::with_capacity(n);
    for k in 0..n {
        clock.push(clock_value(path.times[k], u, path.local_time_at(k)));
        let before = if k == 0 {
            clock[0]
        } else {
            clock_value(path.times[k], u, path.local_time_at(k - 1))
        };
        clock_before.push(before);
        if k > 0 && !(before > clock[k - 1] && clock[k] >= before) {
            return Err(Error::Integrity(format!(
                "clock is not increasing at step {k}"
            )));
        }
    }
    Ok(TimeChange {
        grid: path.times.clone(),
        clock,
        clock_before,
    })
}

/// `T(s)`: linear on move phases, flat on pauses.
pub fn clock_inverse<T: Scalar>(tc: &TimeChange<T>, s: T) -> Result<T> {
    let last = tc.sticky_horizon();
    if !(s >= T::zero() && s <= last) {
        return Err(Error::OutOfRange {
            value: s.to_f64_lossy(),
            lo: 0.0,
            hi: last.to_f64_lossy(),
        });
    }
    let n = tc.clock.len();
    let k = tc.clock.partition_point(|&c| c <= s) - 1;
    if k + 1 == n {
        return Ok(tc.grid[k]);
    }
    let a = tc.clock[k];
    let b = tc.clock_before[k + 1];
    if s < b {
        let frac = (s - a) / (b - a);
        Ok(lerp(tc.grid[k], tc.grid[k + 1], frac))
    } else {
        Ok(tc.grid[k + 1])
    }
}

/// Samples of the sticky path on the uniform sticky grid
/// `s_j = (first_index + j)·sticky_dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct StickyPath<T> {
    pub d: usize,
    pub sticky_dt: T,
    pub first_index: u64,
    /// `d` values per sample.
    pub z: Vec<T>,
    /// Whether the sample falls inside a pause, i.e. on the boundary atom.
    pub paused: Vec<bool>,
    /// `T(s_j)`. Empty when the clock was not recorded.
    pub t_of: Vec<T>,
    /// `L(T(s_j))`, `d` values per sample. Empty when the clock was not recorded.
    pub local_time: Vec<T>,
}

impl<T: Scalar> StickyPath<T> {
    pub fn len(&self) -> usize {
        self.paused.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paused.is_empty()
    }

    pub fn has_clock(&self) -> bool {
        self.t_of.len() == self.len()
    }

    pub fn sticky_time(&self, j: usize) -> T {
        grid_time(self.first_index + j as u64, self.sticky_dt)
    }

    pub fn sticky_times(&self) -> Vec<T> {
        (0..self.len()).map(|j| self.sticky_time(j)).collect()
    }

    pub fn z_at(&self, j: usize) -> &[T] {
        &self.z[j * self.d..(j + 1) * self.d]
    }

    pub fn local_time_at(&self, j: usize) -> &[T] {
        &self.local_time[j * self.d..(j + 1) * self.d]
    }

    /// Largest `|T(s) − (s − Σ uᵢ Lᵢ(T(s)))|`, count of `T(s) > s`, and count
    /// of negative coordinates.
    pub fn check_invariants(&self, u: &[T]) -> Result<StickyInvariants> {
        if !self.has_clock() {
            return Err(Error::IncompleteInput(
                "sticky path was sampled without its clock".into(),
            ));
        }
        let mut out = StickyInvariants::default();
        for j in 0..self.len() {
            let s = self.sticky_time(j);
            let t = self.t_of[j];
            let identity = s - clock_value(T::zero(), u, self.local_time_at(j));
            out.max_identity_error = out
                .max_identity_error
                .max((t - identity).abs().to_f64_lossy());
            out.dominance_violations += (t > s) as u64;
            out.negativity += self.z_at(j).iter().any(|&v| v < T::zero()) as u64;
        }
        Ok(out)
    }

    /// CSV with columns `s, T(s), z_1..z_d`.
    pub fn write_csv<W: Write>(&self, mut out: W, decimation: usize) -> std::io::Result<()> {
        let mut header = vec!["s".to_string(), "T".to_string()];
        header.extend((1..=self.d).map(|i| format!("z_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for j in (0..self.len()).step_by(decimation.max(1)) {
            let mut row = vec![self.sticky_time(j).to_string()];
            row.push(self.t_of.get(j).map(|v| v.to_string()).unwrap_or_default());
            row.extend(self.z_at(j).iter().map(|v| v.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StickyInvariants {
    pub max_identity_error: f64,
    pub dominance_violations: u64,
    pub negativity: u64,
}

/// Streaming sticky-grid sampler fed one SRBM step at a time.
#[derive(Debug, Clone)]
pub struct StickySampler<T> {
    u: Vec<T>,
    next: u64,
    end: Option<T>,
    record_clock: bool,
    path: StickyPath<T>,
}

impl<T: Scalar> StickySampler<T> {
    pub fn new(
        u: &[T],
        sticky_dt: T,
        first_index: u64,
        end: Option<T>,
        record_clock: bool,
    ) -> Result<Self> {
        check_stickiness(u, u.len())?;
        if !(sticky_dt > T::zero()) {
            return Err(Error::Config("sticky_dt must be positive".into()));
        }
        Ok(Self {
            u: u.to_vec(),
            next: first_index,
            end,
            record_clock,
            path: StickyPath {
                d: u.len(),
                sticky_dt,
                first_index,
                z: Vec::new(),
                paused: Vec::new(),
                t_of: Vec::new(),
                local_time: Vec::new(),
            },
        })
    }

    pub fn on_step(&mut self, step: &StepView<'_, T>) {
        let u = &self.u;
        let s_a = clock_value(step.t_prev, u, step.l_prev);
        let s_b = clock_value(step.t_next, u, step.l_prev);
        let s_c = clock_value(step.t_next, u, step.l_next);
        let dt = self.path.sticky_dt;
        loop {
            let s = grid_time(self.next, dt);
            if s >= s_b || self.past_end(s) {
                break;
            }
            let frac = (s - s_a) / (s_b - s_a);
            for i in 0..self.path.d {
                self.path.z.push(lerp(step.z_prev[i], step.z_next[i], frac));
            }
            self.path.paused.push(false);
            if self.record_clock {
                self.path.t_of.push(lerp(step.t_prev, step.t_next, frac));
                self.path.local_time.extend_from_slice(step.l_prev);
            }
            self.next += 1;
        }
        loop {
            let s = grid_time(self.next, dt);
            if s >= s_c || self.past_end(s) {
                break;
            }
            let frac = (s - s_b) / (s_c - s_b);
            self.path.z.extend_from_slice(step.z_next);
            self.path.paused.push(true);
            if self.record_clock {
                self.path.t_of.push(step.t_next);
                for i in 0..self.path.d {
                    self.path
                        .local_time
                        .push(lerp(step.l_prev[i], step.l_next[i], frac));
                }
            }
            self.next += 1;
        }
    }

    fn past_end(&self, s: T) -> bool {
        self.end.is_some_and(|e| s >= e)
    }

    pub fn finish(self) -> StickyPath<T> {
        self.path
    }
}

/// `Z(s) = Z̃(T(s))` on the sticky grid `s_j = j·sticky_dt < horizon`.
/// Without a horizon the whole clock range is sampled.
pub fn build_sticky_path<T: Scalar>(
    path: &SrbmPath<T>,
    u: &[T],
    sticky_dt: T,
    horizon: Option<T>,
) -> Result<StickyPath<T>> {
    let tc = clock_forward(path, u)?;
    if let Some(h) = horizon {
        if h > tc.sticky_horizon() {
            return Err(Error::OutOfRange {
                value: h.to_f64_lossy(),
                lo: 0.0,
                hi: tc.sticky_horizon().to_f64_lossy(),
            });
        }
    }
    let mut sampler = StickySampler::new(u, sticky_dt, 0, horizon, true)?;
    path.for_each_step(|step| sampler.on_step(step));
    Ok(sampler.finish())
}

/// States with weights, `d` values per sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WeightedSamples {
    pub d: usize,
    pub states: Vec<f64>,
    pub weights: Vec<f64>,
}

impl WeightedSamples {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn push<T: Scalar>(&mut self, state: &[T], weight: f64) {
        self.states.extend(state.iter().map(|v| v.to_f64_lossy()));
        self.weights.push(weight);
    }

    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.d..(j + 1) * self.d]
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().copied().collect::<KahanSum>().value()
    }
}

/// Time-change and boundary measures over a sticky-time window, normalized
/// per unit of sticky time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryMeasures {
    pub window_start: f64,
    pub window: f64,
    /// Estimates `E[T(1)]`.
    pub v0_mass: f64,
    /// Estimates `E[Lᵢ(T(1))]`.
    pub v_masses: Vec<f64>,
    /// States weighted by `dT`.
    #[serde(skip)]
    pub v0_samples: WeightedSamples,
    /// States weighted by `dLᵢ`, one set per face.
    #[serde(skip)]
    pub face_samples: Vec<WeightedSamples>,
}

impl BoundaryMeasures {
    /// `v0 + Σ uᵢ vᵢ − 1`.
    pub fn clock_identity_residual(&self, u: &[f64]) -> f64 {
        let pushed: f64 = u.iter().zip(&self.v_masses).map(|(a, b)| a * b).sum();
        self.v0_mass + pushed - 1.0
    }

    /// The measures normalized to probability distributions.
    pub fn normalized_v0(&self) -> WeightedSamples {
        normalize(&self.v0_samples)
    }

    pub fn normalized_face(&self, i: usize) -> WeightedSamples {
        normalize(&self.face_samples[i])
    }
}

fn normalize(s: &WeightedSamples) -> WeightedSamples {
    let total = s.total_weight();
    let mut out = s.clone();
    if total > 0.0 {
        out.weights.iter_mut().for_each(|w| *w /= total);
    }
    out
}

/// Streaming accumulator for the measures over `[start, end)` in sticky
/// time. `end = None` runs to the end of the path.
#[derive(Debug, Clone)]
pub struct BoundaryAccumulator<T> {
    u: Vec<T>,
    start: f64,
    end: Option<f64>,
    v0_stride: u64,
    block_state: Vec<T>,
    block_weight: f64,
    time: KahanSum,
    local: Vec<KahanSum>,
    v0_samples: WeightedSamples,
    face_samples: Vec<WeightedSamples>,
    last_clock: f64,
}

impl<T: Scalar> BoundaryAccumulator<T> {
    pub fn new(u: &[T], start: f64, end: Option<f64>, v0_stride: u64) -> Result<Self> {
        check_stickiness(u, u.len())?;
        if end.is_some_and(|e| e <= start) {
            return Err(Error::Config("empty boundary-measure window".into()));
        }
        let d = u.len();
        Ok(Self {
            u: u.to_vec(),
            start,
            end,
            v0_stride: v0_stride.max(1),
            block_state: vec![T::zero(); d],
            block_weight: 0.0,
            time: KahanSum::new(),
            local: vec![KahanSum::new(); d],
            v0_samples: WeightedSamples::new(d),
            face_samples: (0..d).map(|_| WeightedSamples::new(d)).collect(),
            last_clock: 0.0,
        })
    }

    fn overlap(&self, a: f64, b: f64) -> f64 {
        let hi = self.end.map_or(b, |e| b.min(e));
        (hi - a.max(self.start)).max(0.0)
    }

    fn contains(&self, s: f64) -> bool {
        s >= self.start && self.end.is_none_or(|e| s < e)
    }

    pub fn on_step(&mut self, step: &StepView<'_, T>) {
        let s_a = clock_value(step.t_prev, &self.u, step.l_prev).to_f64_lossy();
        let s_b = clock_value(step.t_next, &self.u, step.l_prev).to_f64_lossy();
        let s_c = clock_value(step.t_next, &self.u, step.l_next).to_f64_lossy();
        self.last_clock = s_c;

        // move phase: dT = ds. Every block of v0_stride steps contributes one
        // V0 sample at its first state, carrying the block's time.
        let moved = self.overlap(s_a, s_b);
        self.time.add(moved);
        if step.k.is_multiple_of(self.v0_stride) {
            self.flush_block();
            self.block_state.copy_from_slice(step.z_prev);
        }
        self.block_weight += moved;

        // pause phase: dL spread uniformly over [s_b, s_c]
        if step.dl.iter().all(|&v| v <= T::zero()) {
            return;
        }
        let g = if s_c > s_b {
            self.overlap(s_b, s_c) / (s_c - s_b)
        } else if self.contains(s_b) {
            1.0
        } else {
            0.0
        };
        if g == 0.0 {
            return;
        }
        for i in 0..self.u.len() {
            let dl = step.dl[i].to_f64_lossy();
            if dl > 0.0 {
                self.local[i].add(g * dl);
                self.face_samples[i].push(step.z_next, g * dl);
            }
        }
    }

    fn flush_block(&mut self) {
        if self.block_weight > 0.0 {
            self.v0_samples.push(&self.block_state, self.block_weight);
        }
        self.block_weight = 0.0;
    }

    pub fn finish(mut self) -> Result<BoundaryMeasures> {
        self.flush_block();
        let hi = self.end.map_or(self.last_clock, |e| e.min(self.last_clock));
        let window = hi - self.start;
        if !(window > 0.0) {
            return Err(Error::Config("empty boundary-measure window".into()));
        }
        Ok(BoundaryMeasures {
            window_start: self.start,
            window,
            v0_mass: self.time.value() / window,
            v_masses: self.local.iter().map(|k| k.value() / window).collect(),
            v0_samples: self.v0_samples,
            face_samples: self.face_samples,
        })
    }
}

/// Measures over the sticky window `[start, start + window)`.
pub fn accumulate_boundary_measures<T: Scalar>(
    path: &SrbmPath<T>,
    tc: &TimeChange<T>,
    u: &[T],
    start: f64,
    window: f64,
) -> Result<BoundaryMeasures> {
    if !(window > 0.0) {
        return Err(Error::Config("empty boundary-measure window".into()));
    }
    let last = tc.sticky_horizon().to_f64_lossy();
    if start < 0.0 || start + window > last {
        return Err(Error::OutOfRange {
            value: start + window,
            lo: 0.0,
            hi: last,
        });
    }
    let mut acc = BoundaryAccumulator::new(u, start, Some(start + window), 1)?;
    path.for_each_step(|step| acc.on_step(step));
    acc.finish()
}
