//! Empirical stationary law, moment generating functions of the stationary
//! and boundary measures, and the adjoint-relation residuals.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    check_skew_symmetry, expected_local_times, expected_local_times_transposed, levy_exponent,
    product_form_rates, ModelSpec,
};
use crate::scalar::{KahanSum, Scalar};
use crate::sticky::{BoundaryMeasures, StickyPath, WeightedSamples};

/// Exceedance probabilities at which the survival tables are tabulated,
/// log-spaced from 1 down to this floor.
pub const SURVIVAL_FLOOR: f64 = 1e-5;
pub const SURVIVAL_POINTS: usize = 151;
/// Denominator floor for relative residuals.
pub const REL_FLOOR: f64 = 1e-8;

/// Marginal survival `P(Zᵢ ≥ x)` tabulated at thresholds that sit at
/// log-spaced exceedance levels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalTable {
    pub thresholds: Vec<f64>,
    pub survival: Vec<f64>,
}

/// One coordinate sorted ascending, with suffix sums of the weights.
#[derive(Debug, Clone, PartialEq)]
struct Marginal {
    values: Vec<f64>,
    tail: Vec<f64>,
}

impl Marginal {
    fn new(values: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut pairs: Vec<(f64, f64)> = values.collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut tail = vec![0.0; pairs.len() + 1];
        let mut acc = KahanSum::new();
        for j in (0..pairs.len()).rev() {
            acc.add(pairs[j].1);
            tail[j] = acc.value();
        }
        Self {
            values: pairs.iter().map(|p| p.0).collect(),
            tail,
        }
    }

    fn survival(&self, x: f64) -> f64 {
        let j = self.values.partition_point(|&v| v < x);
        self.tail[j]
    }

    fn quantile(&self, p: f64) -> f64 {
        let total = self.tail[0];
        // smallest value with P(Z ≤ v) ≥ p, i.e. P(Z > v) ≤ 1 − p
        let target = (1.0 - p) * total;
        let j = self.tail[1..].partition_point(|&t| t > target + 1e-15 * total);
        self.values[j.min(self.values.len() - 1)]
    }
}

/// Weighted empirical law of the sticky process pooled over replicas.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDist {
    pub d: usize,
    /// `d` values per sample.
    pub states: Vec<f64>,
    /// Sum to one.
    pub weights: Vec<f64>,
    pub paused: Vec<bool>,
    /// Sample index ranges per replica, `replicas + 1` entries.
    pub replica_offsets: Vec<usize>,
    /// Mass of the boundary atom `{zᵢ = 0}` carried by pauses.
    pub atom_estimates: Vec<f64>,
    /// Mass of `{zᵢ < near_face_eps}`. Diagnostic only.
    pub near_face: Vec<f64>,
    pub near_face_eps: f64,
    pub survival: Vec<SurvivalTable>,
    marginals: Vec<Marginal>,
}

impl EmpiricalDist {
    /// Builds the law from raw samples. Weights are normalized; an empty
    /// `paused` marks no sample as paused.
    pub fn from_samples(
        d: usize,
        states: Vec<f64>,
        weights: Vec<f64>,
        paused: Vec<bool>,
        replica_offsets: Vec<usize>,
        near_face_eps: f64,
    ) -> Result<Self> {
        let n = weights.len();
        if d == 0 || states.len() != n * d {
            return Err(Error::Config("state and weight lengths disagree".into()));
        }
        if n == 0 {
            return Err(Error::EmptyEstimate("no samples".into()));
        }
        let paused = if paused.is_empty() {
            vec![false; n]
        } else {
            paused
        };
        if paused.len() != n {
            return Err(Error::Config("paused flags and weights disagree".into()));
        }
        if replica_offsets.first() != Some(&0)
            || replica_offsets.last() != Some(&n)
            || replica_offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Config(
                "replica offsets must run from 0 to the sample count".into(),
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total = weights.iter().copied().collect::<KahanSum>().value();
        if !(total > 0.0) {
            return Err(Error::EmptyEstimate("all weights are zero".into()));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();

        let mut atom = vec![KahanSum::new(); d];
        let mut near = vec![KahanSum::new(); d];
        for j in 0..n {
            let z = &states[j * d..(j + 1) * d];
            for i in 0..d {
                if paused[j] && z[i] == 0.0 {
                    atom[i].add(weights[j]);
                }
                if z[i] < near_face_eps {
                    near[i].add(weights[j]);
                }
            }
        }
        let marginals: Vec<Marginal> = (0..d)
            .map(|i| Marginal::new((0..n).map(|j| (states[j * d + i], weights[j]))))
            .collect();
        let survival = marginals.iter().map(survival_table).collect();
        Ok(Self {
            d,
            states,
            weights,
            paused,
            replica_offsets,
            atom_estimates: atom.iter().map(|k| k.value()).collect(),
            near_face: near.iter().map(|k| k.value()).collect(),
            near_face_eps,
            survival,
            marginals,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn replicas(&self) -> usize {
        self.replica_offsets.len() - 1
    }

    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.d..(j + 1) * self.d]
    }

    /// Effective sample size `(Σw)² / Σw²`.
    pub fn effective_size(&self) -> f64 {
        let sq: f64 = self.weights.iter().map(|w| w * w).sum();
        1.0 / sq
    }

    /// `P(Zᵢ ≥ x)`.
    pub fn marginal_survival(&self, i: usize, x: f64) -> f64 {
        self.marginals[i].survival(x)
    }

    /// Smallest `x` with `P(Zᵢ ≤ x) ≥ p`.
    pub fn quantile(&self, i: usize, p: f64) -> f64 {
        self.marginals[i].quantile(p)
    }

    /// `P(Zᵢ ≥ xᵢ for every listed (i, xᵢ))`.
    pub fn joint_survival(&self, bounds: &[(usize, f64)]) -> f64 {
        self.joint_survival_in(bounds, 0, self.len())
    }

    fn joint_survival_in(&self, bounds: &[(usize, f64)], lo: usize, hi: usize) -> f64 {
        let mut acc = KahanSum::new();
        for j in lo..hi {
            let z = self.state(j);
            if bounds.iter().all(|&(i, x)| z[i] >= x) {
                acc.add(self.weights[j]);
            }
        }
        acc.value()
    }

    /// Per-replica `(Σ w·[pred], Σ w)`.
    pub fn replica_sums(&self, pred: impl Fn(&[f64]) -> bool + Sync) -> Vec<(f64, f64)> {
        (0..self.replicas())
            .map(|r| {
                let (lo, hi) = (self.replica_offsets[r], self.replica_offsets[r + 1]);
                let mut num = KahanSum::new();
                let mut den = KahanSum::new();
                for j in lo..hi {
                    den.add(self.weights[j]);
                    if pred(self.state(j)) {
                        num.add(self.weights[j]);
                    }
                }
                (num.value(), den.value())
            })
            .collect()
    }
}

fn survival_table(m: &Marginal) -> SurvivalTable {
    let mut thresholds = Vec::new();
    let mut survival = Vec::new();
    let span = SURVIVAL_FLOOR.log10();
    for q in 0..SURVIVAL_POINTS {
        let level = 10f64.powf(span * q as f64 / (SURVIVAL_POINTS - 1) as f64);
        let x = m.quantile(1.0 - level);
        if thresholds.last().is_some_and(|&last| x <= last) {
            continue;
        }
        thresholds.push(x);
        survival.push(m.survival(x));
    }
    SurvivalTable {
        thresholds,
        survival,
    }
}

/// Pools the sticky-grid samples with `s ≥ burn_in`, one replica per path,
/// with equal weights per sample.
pub fn estimate_stationary<T: Scalar>(
    paths: &[StickyPath<T>],
    burn_in: f64,
    near_face_eps: f64,
) -> Result<EmpiricalDist> {
    let d = paths
        .first()
        .ok_or_else(|| Error::EmptyEstimate("no sticky paths".into()))?
        .d;
    let mut states = Vec::new();
    let mut paused = Vec::new();
    let mut offsets = vec![0];
    for p in paths {
        if p.d != d {
            return Err(Error::Config("sticky paths of different dimensions".into()));
        }
        for j in 0..p.len() {
            if p.sticky_time(j).to_f64_lossy() >= burn_in {
                states.extend(p.z_at(j).iter().map(|v| v.to_f64_lossy()));
                paused.push(p.paused[j]);
            }
        }
        offsets.push(paused.len());
    }
    if paused.is_empty() {
        return Err(Error::EmptyEstimate(
            "every sample lies inside the burn-in".into(),
        ));
    }
    let weights = vec![1.0; paused.len()];
    EmpiricalDist::from_samples(d, states, weights, paused, offsets, near_face_eps)
}

/// Leave-one-replica-out estimate of the ratio `Σ num / Σ den`.
pub fn jackknife_ratio(parts: &[(f64, f64)]) -> (f64, Option<f64>) {
    let num: f64 = parts.iter().map(|p| p.0).collect::<KahanSum>().value();
    let den: f64 = parts.iter().map(|p| p.1).collect::<KahanSum>().value();
    let est = num / den;
    let r = parts.len();
    if r < 2 {
        return (est, None);
    }
    let loo: Vec<f64> = parts.iter().map(|p| (num - p.0) / (den - p.1)).collect();
    let mean = loo.iter().sum::<f64>() / r as f64;
    let var = loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (r - 1) as f64 / r as f64;
    (est, Some(var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MgfValue {
    pub value: f64,
    pub stderr: Option<f64>,
}

impl MgfValue {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            stderr: None,
        }
    }
}

/// MGF estimates on a θ grid; missing components are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MgfEstimate {
    pub theta_grid: Vec<Vec<f64>>,
    pub phi: Option<Vec<MgfValue>>,
    pub phi0: Option<Vec<MgfValue>>,
    /// Per θ, one value per face.
    pub phi_i: Option<Vec<Vec<MgfValue>>>,
}

fn check_theta_grid(grid: &[Vec<f64>], d: usize) -> Result<()> {
    for th in grid {
        if th.len() != d {
            return Err(Error::Config(format!(
                "theta {th:?} does not have {d} entries"
            )));
        }
        if th.iter().any(|&v| !(v <= 0.0)) {
            return Err(Error::Domain(format!(
                "theta {th:?} has a positive or undefined component"
            )));
        }
    }
    Ok(())
}

fn exp_dot(theta: &[f64], z: &[f64]) -> f64 {
    theta.iter().zip(z).map(|(a, b)| a * b).sum::<f64>().exp()
}

fn weighted_mgf_parts(samples: &WeightedSamples, theta: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for j in 0..samples.len() {
        acc.add(samples.weights[j] * exp_dot(theta, samples.state(j)));
    }
    acc.value()
}

/// `Φ` from the pooled law, `Φ₀` and `Φᵢ` from per-replica boundary
/// measures (unnormalized, per unit sticky time). Either source may be
/// omitted.
pub fn empirical_mgf(
    dist: Option<&EmpiricalDist>,
    boundary: &[BoundaryMeasures],
    theta_grid: &[Vec<f64>],
) -> Result<MgfEstimate> {
    let d = match (dist, boundary.first()) {
        (Some(dist), _) => dist.d,
        (None, Some(b)) => b.v_masses.len(),
        (None, None) => return Err(Error::IncompleteInput("no samples to estimate from".into())),
    };
    check_theta_grid(theta_grid, d)?;

    let phi = dist.map(|dist| {
        theta_grid
            .par_iter()
            .map(|th| {
                let parts: Vec<(f64, f64)> = (0..dist.replicas())
                    .map(|r| {
                        let mut num = KahanSum::new();
                        let mut den = KahanSum::new();
                        for j in dist.replica_offsets[r]..dist.replica_offsets[r + 1] {
                            num.add(dist.weights[j] * exp_dot(th, dist.state(j)));
                            den.add(dist.weights[j]);
                        }
                        (num.value(), den.value())
                    })
                    .collect();
                let (value, stderr) = jackknife_ratio(&parts);
                MgfValue { value, stderr }
            })
            .collect::<Vec<_>>()
    });

    let (phi0, phi_i) = if boundary.is_empty() {
        (None, None)
    } else {
        let rows: Vec<(MgfValue, Vec<MgfValue>)> = theta_grid
            .par_iter()
            .map(|th| {
                let v0: Vec<(f64, f64)> = boundary
                    .iter()
                    .map(|b| (weighted_mgf_parts(&b.v0_samples, th), b.window))
                    .collect();
                let (value, stderr) = jackknife_ratio(&v0);
                let faces = (0..d)
                    .map(|i| {
                        let parts: Vec<(f64, f64)> = boundary
                            .iter()
                            .map(|b| (weighted_mgf_parts(&b.face_samples[i], th), b.window))
                            .collect();
                        let (value, stderr) = jackknife_ratio(&parts);
                        MgfValue { value, stderr }
                    })
                    .collect();
                (MgfValue { value, stderr }, faces)
            })
            .collect();
        let (a, b): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        (Some(a), Some(b))
    };

    Ok(MgfEstimate {
        theta_grid: theta_grid.to_vec(),
        phi,
        phi0,
        phi_i,
    })
}

/// Pooled `(v0_mass, v_masses)` over replicas, weighted by window length.
pub fn pooled_masses(boundary: &[BoundaryMeasures]) -> Result<(f64, Vec<f64>)> {
    let first = boundary
        .first()
        .ok_or_else(|| Error::IncompleteInput("no boundary measures".into()))?;
    let window: f64 = boundary
        .iter()
        .map(|b| b.window)
        .collect::<KahanSum>()
        .value();
    let v0 = boundary
        .iter()
        .map(|b| b.v0_mass * b.window)
        .collect::<KahanSum>()
        .value()
        / window;
    let v = (0..first.v_masses.len())
        .map(|i| {
            boundary
                .iter()
                .map(|b| b.v_masses[i] * b.window)
                .collect::<KahanSum>()
                .value()
                / window
        })
        .collect();
    Ok((v0, v))
}

/// Stationary MGFs of the skew-symmetric (product-form) model in closed
/// form. One dimension is always product form.
pub fn closed_form_mgf(spec: &ModelSpec<f64>, theta_grid: &[Vec<f64>]) -> Result<MgfEstimate> {
    check_theta_grid(theta_grid, spec.d)?;
    if !check_skew_symmetry(spec)?.holds {
        return Err(Error::Precondition(
            "closed-form MGFs need skew symmetry".into(),
        ));
    }
    let eta = product_form_rates(spec)?;
    let lt = expected_local_times(spec)?;
    let time_mass = lt.time_mass(&spec.stickiness);
    let d = spec.d;
    let mut phi = Vec::new();
    let mut phi0 = Vec::new();
    let mut phi_i = Vec::new();
    for th in theta_grid {
        let factors: Vec<f64> = (0..d).map(|k| eta[k] / (eta[k] - th[k])).collect();
        let all: f64 = factors.iter().product();
        let p0 = time_mass * all;
        let faces: Vec<f64> = (0..d)
            .map(|i| {
                let others: f64 = (0..d).filter(|&k| k != i).map(|k| factors[k]).product();
                lt.values[i] * others
            })
            .collect();
        let p = p0
            + faces
                .iter()
                .zip(&spec.stickiness)
                .map(|(f, u)| u * f)
                .sum::<f64>();
        phi.push(MgfValue::exact(p));
        phi0.push(MgfValue::exact(p0));
        phi_i.push(faces.into_iter().map(MgfValue::exact).collect());
    }
    Ok(MgfEstimate {
        theta_grid: theta_grid.to_vec(),
        phi: Some(phi),
        phi0: Some(phi0),
        phi_i: Some(phi_i),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BarMode {
    /// `−Ψ Φ = Σ Φᵢ (⟨θ,Rᵢ⟩ − uᵢ Ψ)`.
    Sticky,
    /// `−Ψ Φ₀ = Σ Φᵢ ⟨θ,Rᵢ⟩`.
    Srbm,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BarRow {
    pub theta: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_resid: f64,
    pub rel_resid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BarReport {
    pub mode: BarMode,
    pub rows: Vec<BarRow>,
    pub max_abs_resid: f64,
    pub max_rel_resid: f64,
    /// θ of the largest relative residual.
    pub worst_theta: Vec<f64>,
}

pub fn bar_residual(spec: &ModelSpec<f64>, mgf: &MgfEstimate, mode: BarMode) -> Result<BarReport> {
    let faces = mgf
        .phi_i
        .as_ref()
        .ok_or_else(|| Error::IncompleteInput("boundary MGFs are missing".into()))?;
    let left = match mode {
        BarMode::Sticky => mgf.phi.as_ref(),
        BarMode::Srbm => mgf.phi0.as_ref(),
    }
    .ok_or_else(|| Error::IncompleteInput(format!("{mode:?} mode needs its stationary MGF")))?;
    if left.len() != mgf.theta_grid.len() || faces.len() != mgf.theta_grid.len() {
        return Err(Error::IncompleteInput(
            "MGF estimates do not cover the theta grid".into(),
        ));
    }
    let d = spec.d;
    let mut rows = Vec::with_capacity(mgf.theta_grid.len());
    for (t, th) in mgf.theta_grid.iter().enumerate() {
        if th.len() != d {
            return Err(Error::Config(format!(
                "theta {th:?} does not have {d} entries"
            )));
        }
        let psi = levy_exponent(spec, th);
        let lhs = -psi * left[t].value;
        let mut rhs = 0.0;
        for i in 0..d {
            let push: f64 = (0..d).map(|k| th[k] * spec.refl[(k, i)]).sum();
            let coef = match mode {
                BarMode::Sticky => push - spec.stickiness[i] * psi,
                BarMode::Srbm => push,
            };
            rhs += faces[t][i].value * coef;
        }
        let abs_resid = (lhs - rhs).abs();
        let rel_resid = abs_resid / lhs.abs().max(rhs.abs()).max(REL_FLOOR);
        rows.push(BarRow {
            theta: th.clone(),
            lhs,
            rhs,
            abs_resid,
            rel_resid,
        });
    }
    let worst = rows
        .iter()
        .max_by(|a, b| a.rel_resid.total_cmp(&b.rel_resid))
        .map(|r| r.theta.clone())
        .unwrap_or_default();
    Ok(BarReport {
        mode,
        max_abs_resid: rows.iter().map(|r| r.abs_resid).fold(0.0, f64::max),
        max_rel_resid: rows.iter().map(|r| r.rel_resid).fold(0.0, f64::max),
        worst_theta: worst,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MassIdentityReport {
    pub simulated_v: Vec<f64>,
    pub expected_v: Vec<f64>,
    pub rel_err_v: Vec<f64>,
    pub simulated_v0: f64,
    pub expected_v0: f64,
    pub rel_err_v0: f64,
    /// Solution of the system with `R` transposed, for reference.
    pub transposed_v: Vec<f64>,
    /// `v0 + Σ uᵢ vᵢ − 1` of the simulated masses.
    pub clock_identity_residual: f64,
}

fn rel_err(sim: f64, exact: f64) -> f64 {
    (sim - exact).abs() / exact.abs().max(REL_FLOOR)
}

pub fn mass_identity_check(
    spec: &ModelSpec<f64>,
    v0_mass: f64,
    v_masses: &[f64],
) -> Result<MassIdentityReport> {
    if v_masses.len() != spec.d {
        return Err(Error::Config("mass vector has the wrong dimension".into()));
    }
    let lt = expected_local_times(spec)?;
    let transposed = expected_local_times_transposed(spec)?;
    let expected_v0 = lt.time_mass(&spec.stickiness);
    let pushed: f64 = spec
        .stickiness
        .iter()
        .zip(v_masses)
        .map(|(u, v)| u * v)
        .sum();
    Ok(MassIdentityReport {
        rel_err_v: v_masses
            .iter()
            .zip(&lt.values)
            .map(|(&s, &e)| rel_err(s, e))
            .collect(),
        simulated_v: v_masses.to_vec(),
        expected_v: lt.values,
        simulated_v0: v0_mass,
        expected_v0,
        rel_err_v0: rel_err(v0_mass, expected_v0),
        transposed_v: transposed.values,
        clock_identity_residual: v0_mass + pushed - 1.0,
    })
}

/// `π(B)` against `V₀(B) + Σ uᵢ Vᵢ(B)` for `B = Π [0, bᵢ]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionCheck {
    pub corner: Vec<f64>,
    pub pi: f64,
    pub decomposed: f64,
    pub difference: f64,
    pub stderr: Option<f64>,
}

pub fn decomposition_check(
    dist: &EmpiricalDist,
    boundary: &[BoundaryMeasures],
    u: &[f64],
    corner: &[f64],
) -> Result<DecompositionCheck> {
    let d = dist.d;
    if boundary.len() != dist.replicas() {
        return Err(Error::Config(
            "one boundary measure per replica is required".into(),
        ));
    }
    if corner.len() != d || u.len() != d {
        return Err(Error::Config("corner and stickiness need d entries".into()));
    }
    let inside = |z: &[f64]| z.iter().zip(corner).all(|(a, b)| *a <= *b);
    let restricted = |s: &WeightedSamples| {
        let mut acc = KahanSum::new();
        for j in 0..s.len() {
            if inside(s.state(j)) {
                acc.add(s.weights[j]);
            }
        }
        acc.value()
    };
    let pi_parts = dist.replica_sums(inside);
    let dec_parts: Vec<f64> = boundary
        .iter()
        .map(|b| {
            let faces: f64 = (0..d).map(|i| u[i] * restricted(&b.face_samples[i])).sum();
            (restricted(&b.v0_samples) + faces) / b.window
        })
        .collect();
    let windows: Vec<f64> = boundary.iter().map(|b| b.window).collect();
    let pooled = |vals: &[f64], skip: Option<usize>| {
        let mut num = 0.0;
        let mut den = 0.0;
        for (r, (&v, &w)) in vals.iter().zip(&windows).enumerate() {
            if Some(r) != skip {
                num += v * w;
                den += w;
            }
        }
        num / den
    };
    let (pi, _) = jackknife_ratio(&pi_parts);
    let decomposed = pooled(&dec_parts, None);
    let difference = pi - decomposed;
    let r = boundary.len();
    let stderr = (r >= 2).then(|| {
        let loo: Vec<f64> = (0..r)
            .map(|k| {
                let mut num = 0.0;
                let mut den = 0.0;
                for (j, p) in pi_parts.iter().enumerate() {
                    if j != k {
                        num += p.0;
                        den += p.1;
                    }
                }
                num / den - pooled(&dec_parts, Some(k))
            })
            .collect();
        let mean = loo.iter().sum::<f64>() / r as f64;
        (loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (r - 1) as f64 / r as f64).sqrt()
    });
    Ok(DecompositionCheck {
        corner: corner.to_vec(),
        pi,
        decomposed,
        difference,
        stderr,
    })
}
