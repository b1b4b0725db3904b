//! Streaming replica runner: simulates each replica without storing the
//! physical path, feeding the sticky sampler and boundary accumulator step
//! by step. Replicas run in parallel and are collected in replica order.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{validate_model, ModelSpec};
use crate::reflect::{InvariantStats, SimConfig, SrbmStepper};
use crate::scalar::Scalar;
use crate::stationary::{estimate_stationary, EmpiricalDist};
use crate::sticky::{BoundaryAccumulator, BoundaryMeasures, StickyPath, StickySampler};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleOptions {
    pub sticky_dt: f64,
    /// Physical steps per V₀ sample.
    pub v0_stride: u64,
    /// Count per-step invariant violations.
    pub monitor: bool,
    /// Keep `T(s)` and `L(T(s))` with every sticky sample.
    pub record_clock: bool,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            sticky_dt: 0.05,
            v0_stride: 10,
            monitor: false,
            record_clock: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplicaResult<T> {
    pub replica: u64,
    pub sticky: StickyPath<T>,
    pub boundary: BoundaryMeasures,
    pub invariants: Option<InvariantStats>,
    pub steps: u64,
    /// `S` at the physical horizon.
    pub sticky_horizon: f64,
    pub final_state: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct EnsembleResult<T> {
    pub burn_in: f64,
    pub replicas: Vec<ReplicaResult<T>>,
}

impl<T: Scalar> EnsembleResult<T> {
    pub fn boundary(&self) -> Vec<BoundaryMeasures> {
        self.replicas.iter().map(|r| r.boundary.clone()).collect()
    }

    pub fn sticky_paths(&self) -> Vec<StickyPath<T>> {
        self.replicas.iter().map(|r| r.sticky.clone()).collect()
    }

    pub fn stationary(&self, near_face_eps: f64) -> Result<EmpiricalDist> {
        let paths: Vec<StickyPath<T>> = self.sticky_paths();
        estimate_stationary(&paths, self.burn_in, near_face_eps)
    }

    pub fn invariant_totals(&self) -> Option<InvariantStats> {
        let mut total = InvariantStats::default();
        for r in &self.replicas {
            total.merge(r.invariants.as_ref()?);
        }
        Some(total)
    }

    pub fn total_steps(&self) -> u64 {
        self.replicas.iter().map(|r| r.steps).sum()
    }
}

/// Runs one replica of the configuration. Burn-in is measured on the
/// sticky clock.
pub fn run_replica<T: Scalar>(
    spec: &ModelSpec<T>,
    cfg: &SimConfig,
    opts: &EnsembleOptions,
    replica: u64,
) -> Result<ReplicaResult<T>> {
    let z0: Vec<T> = cfg.z0.iter().map(|&v| T::lit(v)).collect();
    let mut stepper = SrbmStepper::new(spec, &z0, T::lit(cfg.dt), cfg.seed, replica)?;
    if opts.monitor {
        stepper = stepper.monitored();
    }
    let first = (cfg.burn_in / opts.sticky_dt).ceil() as u64;
    let mut sampler = StickySampler::new(
        &spec.stickiness,
        T::lit(opts.sticky_dt),
        first,
        None,
        opts.record_clock,
    )?;
    let mut acc = BoundaryAccumulator::new(&spec.stickiness, cfg.burn_in, None, opts.v0_stride)?;
    let steps = cfg.steps();
    for _ in 0..steps {
        let view = stepper.step()?;
        sampler.on_step(&view);
        acc.on_step(&view);
    }
    if stepper.state().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step: steps });
    }
    let pushed: T = spec
        .stickiness
        .iter()
        .zip(stepper.local_time())
        .map(|(&u, &l)| u * l)
        .sum();
    let sticky_horizon = (stepper.time() + pushed).to_f64_lossy();
    if sticky_horizon <= cfg.burn_in {
        return Err(Error::Config(format!(
            "burn-in {} exceeds the sticky horizon {sticky_horizon} reached by replica {replica}",
            cfg.burn_in
        )));
    }
    Ok(ReplicaResult {
        replica,
        sticky: sampler.finish(),
        boundary: acc.finish()?,
        invariants: stepper.invariant_stats(),
        steps,
        sticky_horizon,
        final_state: stepper.state().to_vec(),
    })
}

pub fn run_ensemble<T: Scalar>(
    spec: &ModelSpec<T>,
    cfg: &SimConfig,
    opts: &EnsembleOptions,
) -> Result<EnsembleResult<T>> {
    cfg.validate(spec.d)?;
    if !(opts.sticky_dt > 0.0) {
        return Err(Error::Config("sticky_dt must be positive".into()));
    }
    let report = validate_model(spec);
    if !report.spd_ok || !report.completely_s_ok {
        return Err(Error::Precondition(report.messages.join("; ")));
    }
    let replicas = (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|r| run_replica(spec, cfg, opts, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleResult {
        burn_in: cfg.burn_in,
        replicas,
    })
}
