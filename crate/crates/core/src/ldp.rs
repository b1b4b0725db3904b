//! Large-deviation rate of the reflected process at a terminal point, by
//! direct minimisation of the piecewise-constant-velocity action over paths
//! whose discrete Skorokhod image ends at the target.
//!
//! The last segment is not a free variable. Its velocity is solved from the
//! terminal condition, with one nonnegative push magnitude per zero
//! coordinate of the target left free, so every candidate is feasible.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{validate_model, ModelSpec};
use crate::reflect::{replica_rng, SkorokhodSolver};
use crate::scalar::{dot, max_abs, Scalar};

const GOLDEN: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathVariable<T> {
    pub tau: T,
    pub segments: usize,
    pub d: usize,
    /// Row-major `segments × d` free-path velocities.
    pub increments: Vec<T>,
}

impl<T: Scalar> PathVariable<T> {
    pub fn new(tau: T, d: usize, increments: Vec<T>) -> Result<Self> {
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(Error::Domain(format!(
                "path horizon must be positive, got {tau}"
            )));
        }
        if d == 0 || !increments.len().is_multiple_of(d) || increments.len() / d < 2 {
            return Err(Error::Domain(format!(
                "path needs at least 2 segments of dimension {d}, got {} values",
                increments.len()
            )));
        }
        Ok(Self {
            tau,
            segments: increments.len() / d,
            d,
            increments,
        })
    }

    pub fn velocity(&self, k: usize) -> &[T] {
        &self.increments[k * self.d..(k + 1) * self.d]
    }

    pub fn segment_length(&self) -> T {
        self.tau / T::from_count(self.segments)
    }

    /// Reflected positions at the segment ends, `(segments + 1) × d`, from 0.
    pub fn reflected(&self, refl: &Matrix<T>) -> Result<Vec<T>> {
        let mut solver = SkorokhodSolver::new(refl)?;
        let h = self.segment_length();
        let d = self.d;
        let mut out = vec![T::zero(); (self.segments + 1) * d];
        let mut dx = vec![T::zero(); d];
        let mut next = vec![T::zero(); d];
        let mut dl = vec![T::zero(); d];
        for k in 0..self.segments {
            for (o, &b) in dx.iter_mut().zip(self.velocity(k)) {
                *o = b * h;
            }
            solver.solve(&out[k * d..(k + 1) * d], &dx, &mut next, &mut dl)?;
            out[(k + 1) * d..(k + 2) * d].copy_from_slice(&next);
        }
        Ok(out)
    }

    pub fn endpoint(&self, refl: &Matrix<T>) -> Result<Vec<T>> {
        let all = self.reflected(refl)?;
        Ok(all[self.segments * self.d..].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateResult<T> {
    pub target: Vec<T>,
    pub value: T,
    /// `None` for the zero target.
    pub path: Option<PathVariable<T>>,
    pub terminal_error: T,
    pub straight_line_bound: T,
    pub restarts: usize,
    pub best_restart: usize,
    pub evaluations: usize,
    /// Which rate is reported. Always `"srbm"`: the sticky rate is taken equal to it.
    pub label: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateOptions {
    pub segments: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Horizon bracket as multiples of `‖x‖/‖μ‖`.
    pub tau_bracket: (f64, f64),
    /// Relative width at which the horizon search stops.
    pub tau_tol: f64,
    /// Final pattern step, relative to the initial one.
    pub step_tol: f64,
    pub max_evals: usize,
}

impl Default for RateOptions {
    fn default() -> Self {
        Self {
            segments: 32,
            restarts: 8,
            seed: 0,
            tau_bracket: (0.05, 20.0),
            tau_tol: 1e-3,
            step_tol: 1e-7,
            max_evals: 400_000,
        }
    }
}

fn quad_form<T: Scalar>(m: &Matrix<T>, v: &[T], scratch: &mut [T]) -> T {
    m.mul_vec_into(v, scratch);
    dot(v, scratch)
}

fn sigma_inverse<T: Scalar>(spec: &ModelSpec<T>) -> Result<Matrix<T>> {
    if spec.sigma.cholesky().is_none() {
        return Err(Error::Precondition(
            "covariance is not positive definite".into(),
        ));
    }
    spec.sigma.inverse()
}

pub fn action<T: Scalar>(spec: &ModelSpec<T>, pv: &PathVariable<T>) -> Result<T> {
    if pv.d != spec.d {
        return Err(Error::Domain(format!(
            "path dimension {} for a {}-dimensional model",
            pv.d, spec.d
        )));
    }
    let si = sigma_inverse(spec)?;
    let mut dev = vec![T::zero(); spec.d];
    let mut scratch = vec![T::zero(); spec.d];
    let mut total = T::zero();
    for k in 0..pv.segments {
        for ((o, &b), &m) in dev.iter_mut().zip(pv.velocity(k)).zip(&spec.mu) {
            *o = b - m;
        }
        total += quad_form(&si, &dev, &mut scratch);
    }
    Ok(total * T::lit(0.5) * pv.segment_length())
}

fn check_target<T: Scalar>(spec: &ModelSpec<T>, x: &[T]) -> Result<()> {
    if x.len() != spec.d {
        return Err(Error::Domain(format!(
            "target has {} coordinates, model has {}",
            x.len(),
            spec.d
        )));
    }
    if x.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
        return Err(Error::Domain(format!(
            "target must be finite and nonnegative, got {x:?}"
        )));
    }
    Ok(())
}

/// Best constant-velocity path along the ray of `x`: `‖x‖(√(ac) − b)` with
/// `a = x̂'Σ⁻¹x̂`, `b = x̂'Σ⁻¹μ`, `c = μ'Σ⁻¹μ`, reached at speed `√(c/a)`.
pub fn straight_line_bound<T: Scalar>(spec: &ModelSpec<T>, x: &[T]) -> Result<T> {
    Ok(straight_line(spec, x)?.map_or(T::zero(), |(v, _)| v))
}

/// `(bound, speed)` or `None` at the origin.
fn straight_line<T: Scalar>(spec: &ModelSpec<T>, x: &[T]) -> Result<Option<(T, T)>> {
    check_target(spec, x)?;
    let norm = dot(x, x).sqrt();
    if norm == T::zero() {
        return Ok(None);
    }
    let si = sigma_inverse(spec)?;
    let dir: Vec<T> = x.iter().map(|&v| v / norm).collect();
    let mut scratch = vec![T::zero(); spec.d];
    let a = quad_form(&si, &dir, &mut scratch);
    let c = quad_form(&si, &spec.mu, &mut scratch);
    si.mul_vec_into(&spec.mu, &mut scratch);
    let b = dot(&dir, &scratch);
    if !(c > T::zero()) {
        return Err(Error::Precondition(
            "zero drift has no finite-horizon optimum".into(),
        ));
    }
    let value = norm * ((a * c).sqrt() - b);
    Ok(Some((value.max(T::zero()), (c / a).sqrt())))
}

/// Inner problem at a fixed horizon.
struct Problem<'a, T> {
    spec: &'a ModelSpec<T>,
    si: &'a Matrix<T>,
    x: &'a [T],
    n: usize,
    /// Coordinates where the target is zero and a final push is allowed.
    zero: Vec<usize>,
}

struct Workspace<T> {
    solver: SkorokhodSolver<T>,
    z: Vec<T>,
    next: Vec<T>,
    dx: Vec<T>,
    dl: Vec<T>,
    dev: Vec<T>,
    scratch: Vec<T>,
    last: Vec<T>,
}

impl<'a, T: Scalar> Problem<'a, T> {
    fn free_len(&self) -> usize {
        (self.n - 1) * self.spec.d + self.zero.len()
    }

    fn workspace(&self) -> Result<Workspace<T>> {
        let d = self.spec.d;
        Ok(Workspace {
            solver: SkorokhodSolver::new(&self.spec.refl)?,
            z: vec![T::zero(); d],
            next: vec![T::zero(); d],
            dx: vec![T::zero(); d],
            dl: vec![T::zero(); d],
            dev: vec![T::zero(); d],
            scratch: vec![T::zero(); d],
            last: vec![T::zero(); d],
        })
    }

    fn segment_cost(&self, beta: &[T], ws_dev: &mut [T], scratch: &mut [T]) -> T {
        for ((o, &b), &m) in ws_dev.iter_mut().zip(beta).zip(&self.spec.mu) {
            *o = b - m;
        }
        quad_form(self.si, ws_dev, scratch)
    }

    /// Action of the path encoded by `vars`; the final velocity is left in `ws.last`.
    fn eval(&self, vars: &[T], tau: T, ws: &mut Workspace<T>) -> T {
        let d = self.spec.d;
        let h = tau / T::from_count(self.n);
        ws.z.iter_mut().for_each(|v| *v = T::zero());
        let mut total = T::zero();
        for k in 0..self.n - 1 {
            let beta = &vars[k * d..(k + 1) * d];
            for (o, &b) in ws.dx.iter_mut().zip(beta) {
                *o = b * h;
            }
            if ws
                .solver
                .solve(&ws.z, &ws.dx, &mut ws.next, &mut ws.dl)
                .is_err()
            {
                return T::infinity();
            }
            std::mem::swap(&mut ws.z, &mut ws.next);
            total += self.segment_cost(beta, &mut ws.dev, &mut ws.scratch);
        }
        let push = &vars[(self.n - 1) * d..];
        for i in 0..d {
            let mut target = self.x[i] - ws.z[i];
            for (p, &j) in self.zero.iter().enumerate() {
                target -= self.spec.refl[(i, j)] * push[p].abs() * h;
            }
            ws.last[i] = target / h;
        }
        let last = std::mem::take(&mut ws.last);
        total += self.segment_cost(&last, &mut ws.dev, &mut ws.scratch);
        ws.last = last;
        total * T::lit(0.5) * h
    }

    fn path(&self, vars: &[T], tau: T, ws: &mut Workspace<T>) -> Result<PathVariable<T>> {
        self.eval(vars, tau, ws);
        let d = self.spec.d;
        let mut inc = vars[..(self.n - 1) * d].to_vec();
        inc.extend_from_slice(&ws.last);
        PathVariable::new(tau, d, inc)
    }

    fn initial(&self, tau: T) -> Vec<T> {
        let d = self.spec.d;
        let mut v = vec![T::zero(); self.free_len()];
        for k in 0..self.n - 1 {
            for i in 0..d {
                v[k * d + i] = self.x[i] / tau;
            }
        }
        v
    }

    fn step_scale(&self, tau: T) -> T {
        (max_abs(&self.spec.mu) + max_abs(self.x) / tau) * T::lit(0.25)
    }

    fn search(
        &self,
        start: Vec<T>,
        tau: T,
        opts: &RateOptions,
        ws: &mut Workspace<T>,
    ) -> (Vec<T>, T, usize) {
        let step = self.step_scale(tau);
        let min_step = step * T::lit(opts.step_tol);
        hooke_jeeves(
            |v| self.eval(v, tau, ws),
            start,
            step,
            min_step,
            opts.max_evals,
        )
    }
}

fn explore<T: Scalar>(
    f: &mut impl FnMut(&[T]) -> T,
    x: &mut [T],
    mut fx: T,
    step: T,
    evals: &mut usize,
) -> T {
    for i in 0..x.len() {
        let orig = x[i];
        for cand in [orig + step, orig - step] {
            x[i] = cand;
            let v = f(x);
            *evals += 1;
            if v < fx {
                fx = v;
                break;
            }
            x[i] = orig;
        }
    }
    fx
}

/// Pattern search with exploratory coordinate moves and pattern extrapolation.
fn hooke_jeeves<T: Scalar>(
    mut f: impl FnMut(&[T]) -> T,
    x0: Vec<T>,
    step0: T,
    min_step: T,
    max_evals: usize,
) -> (Vec<T>, T, usize) {
    let mut evals = 1;
    let mut base = x0;
    let mut fb = f(&base);
    let mut step = step0;
    while step > min_step && evals < max_evals {
        let mut x1 = base.clone();
        let f1 = explore(&mut f, &mut x1, fb, step, &mut evals);
        if f1 < fb {
            let mut prev = std::mem::replace(&mut base, x1);
            fb = f1;
            while evals < max_evals {
                let mut xp: Vec<T> = base.iter().zip(&prev).map(|(&b, &p)| b + (b - p)).collect();
                let f0 = f(&xp);
                evals += 1;
                let fp = explore(&mut f, &mut xp, f0, step, &mut evals);
                if fp < fb {
                    prev = std::mem::replace(&mut base, xp);
                    fb = fp;
                } else {
                    break;
                }
            }
        } else {
            step *= T::lit(0.5);
        }
    }
    (base, fb, evals)
}

pub fn rate_function<T: Scalar>(
    spec: &ModelSpec<T>,
    x: &[T],
    opts: &RateOptions,
) -> Result<RateResult<T>> {
    if opts.segments < 2 || opts.restarts == 0 {
        return Err(Error::Config(
            "ldp needs at least 2 segments and 1 restart".into(),
        ));
    }
    let report = validate_model(spec);
    if !report.spd_ok || !report.stable {
        return Err(Error::Precondition(format!(
            "rate function needs a stable model: {}",
            report.messages.join("; ")
        )));
    }
    let Some((bound, speed)) = straight_line(spec, x)? else {
        return Ok(RateResult {
            target: x.to_vec(),
            value: T::zero(),
            path: None,
            terminal_error: T::zero(),
            straight_line_bound: T::zero(),
            restarts: 0,
            best_restart: 0,
            evaluations: 0,
            label: "srbm",
        });
    };
    let si = sigma_inverse(spec)?;
    let prob = Problem {
        spec,
        si: &si,
        x,
        n: opts.segments,
        zero: (0..spec.d).filter(|&i| x[i] == T::zero()).collect(),
    };
    let norm = dot(x, x).sqrt();
    let scale = norm / dot(&spec.mu, &spec.mu).sqrt();
    let mut ws = prob.workspace()?;
    let mut evaluations = 0;
    let inner = |tau: T, ws: &mut Workspace<T>, evaluations: &mut usize| {
        let (v, f, e) = prob.search(prob.initial(tau), tau, opts, ws);
        *evaluations += e;
        (f, v)
    };

    let tau_line = norm / speed;
    let (mut best_f, mut best_v) = inner(tau_line, &mut ws, &mut evaluations);
    let mut best_tau = tau_line;

    let (mut a, mut b) = (
        T::lit(opts.tau_bracket.0) * scale,
        T::lit(opts.tau_bracket.1) * scale,
    );
    let g = T::lit(GOLDEN);
    let mut c = b - g * (b - a);
    let mut dd = a + g * (b - a);
    let (mut fc, mut vc) = inner(c, &mut ws, &mut evaluations);
    let (mut fd, mut vd) = inner(dd, &mut ws, &mut evaluations);
    let tol = T::lit(opts.tau_tol) * scale;
    while b - a > tol {
        if fc <= fd {
            b = dd;
            dd = c;
            fd = fc;
            vd = std::mem::take(&mut vc);
            c = b - g * (b - a);
            (fc, vc) = inner(c, &mut ws, &mut evaluations);
        } else {
            a = c;
            c = dd;
            fc = fd;
            vc = std::mem::take(&mut vd);
            dd = a + g * (b - a);
            (fd, vd) = inner(dd, &mut ws, &mut evaluations);
        }
    }
    for (f, v, t) in [(fc, vc, c), (fd, vd, dd)] {
        if f < best_f {
            best_f = f;
            best_v = v;
            best_tau = t;
        }
    }

    let tau = best_tau;
    let step = prob.step_scale(tau);
    let starts: Vec<Vec<T>> = (0..opts.restarts)
        .map(|r| {
            if r == 0 {
                return best_v.clone();
            }
            let mut rng = replica_rng(opts.seed, r as u64);
            best_v
                .iter()
                .map(|&v| {
                    let n: f64 = rng.sample(StandardNormal);
                    v + T::lit(n) * step * T::lit(2.0)
                })
                .collect()
        })
        .collect();
    let results = starts
        .into_par_iter()
        .map(|s| -> Result<(Vec<T>, T, usize)> {
            let mut ws = prob.workspace()?;
            Ok(prob.search(s, tau, opts, &mut ws))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best_restart = 0;
    for (i, (_, f, e)) in results.iter().enumerate() {
        evaluations += e;
        if *f < results[best_restart].1 {
            best_restart = i;
        }
    }
    let (vars, value, _) = &results[best_restart];

    let path = prob.path(vars, tau, &mut ws)?;
    let end = path.endpoint(&spec.refl)?;
    let terminal_error = end
        .iter()
        .zip(x)
        .fold(T::zero(), |m, (&e, &t)| m.max((e - t).abs()));
    let feas = T::lit(1e-4) * (T::one() + norm);
    if !(terminal_error < feas) || !value.is_finite() {
        return Err(Error::OptimizationFailure {
            best_value: value.to_f64_lossy(),
            terminal_error: terminal_error.to_f64_lossy(),
            best_increments: path.increments.iter().map(|v| v.to_f64_lossy()).collect(),
            best_tau: tau.to_f64_lossy(),
        });
    }
    Ok(RateResult {
        target: x.to_vec(),
        value: value.max(T::zero()),
        path: Some(path),
        terminal_error,
        straight_line_bound: bound,
        restarts: opts.restarts,
        best_restart,
        evaluations,
        label: "srbm",
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m1() -> ModelSpec<f64> {
        ModelSpec::from_f64(&[vec![1.0]], &[-1.0], &[vec![1.0]], &[1.0]).unwrap()
    }

    fn m2() -> ModelSpec<f64> {
        ModelSpec::from_f64(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[-1.0, -1.0],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[1.0, 1.0],
        )
        .unwrap()
    }

    fn rate(spec: &ModelSpec<f64>, x: &[f64], n: usize) -> RateResult<f64> {
        let opts = RateOptions {
            segments: n,
            ..Default::default()
        };
        rate_function(spec, x, &opts).unwrap()
    }

    #[test]
    fn action_examples() {
        let spec = m1();
        let drift = PathVariable::new(1.0, 1, vec![-1.0; 4]).unwrap();
        assert_eq!(action(&spec, &drift).unwrap(), 0.0);
        let up = PathVariable::new(1.0, 1, vec![1.0, 1.0]).unwrap();
        assert!((action(&spec, &up).unwrap() - 2.0).abs() < 1e-15);
        let doubled = PathVariable::new(1.0, 1, vec![3.0, 3.0]).unwrap();
        assert!((action(&spec, &doubled).unwrap() - 8.0).abs() < 1e-14);
        assert!(PathVariable::new(0.0, 1, vec![1.0, 1.0]).is_err());
        assert!(PathVariable::new(1.0, 1, vec![1.0]).is_err());
    }

    #[test]
    fn straight_line_examples() {
        assert_eq!(straight_line_bound(&m1(), &[0.0]).unwrap(), 0.0);
        assert!((straight_line_bound(&m1(), &[1.0]).unwrap() - 2.0).abs() < 1e-14);
        assert!((straight_line_bound(&m2(), &[1.0, 1.0]).unwrap() - 4.0).abs() < 1e-14);
        assert!(
            (straight_line_bound(&m2(), &[1.0, 0.0]).unwrap() - (1.0 + 2f64.sqrt())).abs() < 1e-14
        );
        assert!(straight_line_bound(&m1(), &[-1.0]).is_err());
    }

    #[test]
    fn one_dimensional_oracle() {
        let r = rate(&m1(), &[1.0], 32);
        assert!((r.value - 2.0).abs() < 0.04, "{}", r.value);
        assert!(r.value <= r.straight_line_bound + 1e-6);
        assert!(r.terminal_error < 1e-4 * 2.0);
        let fine = rate(&m1(), &[1.0], 64);
        assert!(((fine.value - r.value) / r.value).abs() < 0.01);
    }

    #[test]
    fn diagonal_oracle() {
        let r = rate(&m2(), &[1.0, 1.0], 32);
        assert!((r.value - 4.0).abs() < 0.2, "{}", r.value);
        assert!(r.value <= r.straight_line_bound + 1e-6);
        let path = r.path.as_ref().unwrap();
        assert!((path.tau - 1.0).abs() < 0.05, "{}", path.tau);
        let fine = rate(&m2(), &[1.0, 1.0], 64);
        assert!(((fine.value - r.value) / r.value).abs() < 0.01);
    }

    #[test]
    fn face_targets_use_pushing() {
        let spec = m2();
        for t in [1.0, 2.0] {
            let r = rate(&spec, &[t, 0.0], 32);
            assert!((r.value / t - 2.0).abs() < 0.3, "{t}: {}", r.value);
            assert!(r.value < r.straight_line_bound - 0.1);
            assert!(r.terminal_error < 1e-6);
        }
    }

    #[test]
    fn zero_target_and_monotone_rays() {
        let r = rate(&m2(), &[0.0, 0.0], 32);
        assert_eq!(r.value, 0.0);
        assert!(r.path.is_none());
        let spec = m2();
        let x = [0.5, 0.25];
        let one = rate(&spec, &x, 16);
        let two = rate(&spec, &[1.0, 0.5], 16);
        assert!(one.value > 0.0);
        assert!(two.value >= one.value);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = rate(&m1(), &[0.7], 8);
        let b = rate(&m1(), &[0.7], 8);
        assert_eq!(a, b);
    }

    #[test]
    fn unstable_model_rejected() {
        let spec = ModelSpec::from_f64(&[vec![1.0]], &[1.0], &[vec![1.0]], &[0.0]).unwrap();
        assert!(matches!(
            rate_function(&spec, &[1.0], &RateOptions::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn single_precision_oracle() {
        let spec: ModelSpec<f32> =
            ModelSpec::from_f64(&[vec![1.0]], &[-1.0], &[vec![1.0]], &[1.0]).unwrap();
        let opts = RateOptions {
            segments: 8,
            restarts: 2,
            ..Default::default()
        };
        let r = rate_function(&spec, &[1.0f32], &opts).unwrap();
        assert!((r.value - 2.0).abs() < 0.05);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn action_quadratic_in_deviation(v in prop::collection::vec(-3.0f64..3.0, 2..6), tau in 0.1f64..5.0) {
            let spec = m1();
            let pv = PathVariable::new(tau, 1, v.clone()).unwrap();
            let dbl = PathVariable::new(tau, 1, v.iter().map(|b| 2.0 * (b + 1.0) - 1.0).collect()).unwrap();
            let a = action(&spec, &pv).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((action(&spec, &dbl).unwrap() - 4.0 * a).abs() <= 1e-9 * (1.0 + a));
        }

        #[test]
        fn bound_scales_linearly(x0 in 0.0f64..3.0, x1 in 0.0f64..3.0, t in 0.5f64..4.0) {
            prop_assume!(x0 + x1 > 1e-6);
            let spec = m2();
            let b = straight_line_bound(&spec, &[x0, x1]).unwrap();
            let bt = straight_line_bound(&spec, &[t * x0, t * x1]).unwrap();
            prop_assert!(b > 0.0);
            prop_assert!((bt - t * b).abs() <= 1e-9 * (1.0 + bt));
        }
    }
}
