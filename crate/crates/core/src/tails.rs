//! Tail diagnostics: exponential decay-rate fits, Gumbel domain-of-attraction
//! checks on block maxima, tail dependence, joint-tail factorization and
//! survival copulas.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::KahanSum;
use crate::stationary::{EmpiricalDist, SurvivalTable};

pub const MIN_THRESHOLDS: usize = 20;
pub const MIN_BLOCKS: usize = 50;
pub const DEFAULT_WINDOW: (f64, f64) = (0.90, 0.999);
/// Block-maxima KS distance above which the Gumbel law is rejected.
pub const DOA_KS_THRESHOLD: f64 = 0.1;
pub const MAX_COPULA_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailFit {
    pub coordinate: usize,
    pub alpha_hat: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub window: (f64, f64),
    pub r_squared: f64,
    pub thresholds_used: usize,
}

fn check_window(window: (f64, f64)) -> Result<()> {
    if !(0.0 < window.0 && window.0 < window.1 && window.1 < 1.0) {
        return Err(Error::Config(format!(
            "quantile window {window:?} must satisfy 0 < lo < hi < 1"
        )));
    }
    Ok(())
}

struct LineFit {
    slope: f64,
    intercept: f64,
    slope_se: f64,
    r_squared: f64,
}

fn least_squares(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let slope_se = if x.len() > 2 {
        (ssr / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    let r_squared = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    LineFit {
        slope,
        intercept,
        slope_se,
        r_squared,
    }
}

/// Slope of `−log S(x)` against `x` over the table entries with thresholds
/// in `[x_lo, x_hi]` and positive survival.
pub fn fit_decay_rate_table(
    thresholds: &[f64],
    survival: &[f64],
    coordinate: usize,
    range: (f64, f64),
    window: (f64, f64),
) -> Result<TailFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = thresholds
        .iter()
        .zip(survival)
        .filter(|(&x, &s)| x >= range.0 && x <= range.1 && s > 0.0)
        .map(|(&x, &s)| (x, -s.ln()))
        .unzip();
    if xs.len() < MIN_THRESHOLDS {
        return Err(Error::DataStarved {
            needed: MIN_THRESHOLDS,
            found: xs.len(),
            hint: "run a longer horizon or more replicas".into(),
        });
    }
    let fit = least_squares(&xs, &ys);
    if !(fit.slope > 0.0) {
        return Err(Error::Domain(format!(
            "fitted decay rate {} is not positive",
            fit.slope
        )));
    }
    Ok(TailFit {
        coordinate,
        alpha_hat: fit.slope,
        stderr: fit.slope_se,
        intercept: fit.intercept,
        window,
        r_squared: fit.r_squared,
        thresholds_used: xs.len(),
    })
}

/// Decay rate of coordinate `i` over the quantile window.
pub fn fit_decay_rate(dist: &EmpiricalDist, i: usize, window: (f64, f64)) -> Result<TailFit> {
    check_window(window)?;
    check_coordinate(dist, i)?;
    let range = (dist.quantile(i, window.0), dist.quantile(i, window.1));
    let table: &SurvivalTable = &dist.survival[i];
    fit_decay_rate_table(&table.thresholds, &table.survival, i, range, window)
}

fn check_coordinate(dist: &EmpiricalDist, i: usize) -> Result<()> {
    if i >= dist.d {
        return Err(Error::Config(format!(
            "coordinate {i} out of range for d = {}",
            dist.d
        )));
    }
    Ok(())
}

/// Polynomial correction `S(x) ≈ K x^{−β} e^{−αx}`: regression of
/// `log S(x) + αx` on `log x` with the rate held at `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolynomialExponent {
    pub coordinate: usize,
    pub beta_hat: f64,
    pub stderr: f64,
    pub thresholds_used: usize,
}

pub fn polynomial_exponent(
    dist: &EmpiricalDist,
    i: usize,
    window: (f64, f64),
    alpha: f64,
) -> Result<PolynomialExponent> {
    check_window(window)?;
    check_coordinate(dist, i)?;
    let (lo, hi) = (dist.quantile(i, window.0), dist.quantile(i, window.1));
    let table = &dist.survival[i];
    let (xs, ys): (Vec<f64>, Vec<f64>) = table
        .thresholds
        .iter()
        .zip(&table.survival)
        .filter(|(&x, &s)| x >= lo && x <= hi && x > 0.0 && s > 0.0)
        .map(|(&x, &s)| (x.ln(), s.ln() + alpha * x))
        .unzip();
    if xs.len() < MIN_THRESHOLDS {
        return Err(Error::DataStarved {
            needed: MIN_THRESHOLDS,
            found: xs.len(),
            hint: "run a longer horizon or more replicas".into(),
        });
    }
    let fit = least_squares(&xs, &ys);
    Ok(PolynomialExponent {
        coordinate: i,
        beta_hat: -fit.slope,
        stderr: fit.slope_se,
        thresholds_used: xs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GumbelReport {
    pub coordinate: usize,
    pub block_size: usize,
    pub blocks: usize,
    pub a_n: f64,
    pub b_n: f64,
    pub ks: f64,
    /// `ks < DOA_KS_THRESHOLD`.
    pub consistent: bool,
}

fn gumbel_cdf(x: f64) -> f64 {
    (-(-x).exp()).exp()
}

/// Kolmogorov–Smirnov distance of `(M − b)/a` to `exp(−e^{−x})`.
pub fn gumbel_ks(maxima: &[f64], a_n: f64, b_n: f64) -> f64 {
    let mut z: Vec<f64> = maxima.iter().map(|m| (m - b_n) / a_n).collect();
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    z.iter()
        .enumerate()
        .map(|(j, &x)| {
            let g = gumbel_cdf(x);
            ((j + 1) as f64 / n - g).max(g - j as f64 / n)
        })
        .fold(0.0, f64::max)
}

fn block_maxima(samples: &[f64], block_size: usize) -> Vec<f64> {
    samples
        .chunks_exact(block_size)
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Block maxima of consecutive samples standardized with the
/// exponential-tail constants `a_n = 1/α`, `b_n = log(n)/α`.
pub fn gumbel_doa_check_samples(
    samples: &[f64],
    block_size: usize,
    alpha: f64,
    coordinate: usize,
) -> Result<GumbelReport> {
    if block_size == 0 || !(alpha > 0.0) {
        return Err(Error::Config(
            "block size and decay rate must be positive".into(),
        ));
    }
    let maxima = block_maxima(samples, block_size);
    gumbel_report(&maxima, block_size, alpha, coordinate)
}

fn gumbel_report(
    maxima: &[f64],
    block_size: usize,
    alpha: f64,
    coordinate: usize,
) -> Result<GumbelReport> {
    if maxima.len() < MIN_BLOCKS {
        return Err(Error::DataStarved {
            needed: MIN_BLOCKS,
            found: maxima.len(),
            hint: "use smaller blocks or longer runs".into(),
        });
    }
    let a_n = 1.0 / alpha;
    let b_n = (block_size as f64).ln() / alpha;
    let ks = gumbel_ks(maxima, a_n, b_n);
    Ok(GumbelReport {
        coordinate,
        block_size,
        blocks: maxima.len(),
        a_n,
        b_n,
        ks,
        consistent: ks < DOA_KS_THRESHOLD,
    })
}

/// Gumbel check on coordinate `i` of the pooled law. Blocks never straddle
/// replicas. Needs the coordinate's decay-rate fit.
pub fn gumbel_doa_check(
    dist: &EmpiricalDist,
    i: usize,
    block_size: usize,
    fit: Option<&TailFit>,
) -> Result<GumbelReport> {
    check_coordinate(dist, i)?;
    let fit =
        fit.ok_or_else(|| Error::Dependency("fit the decay rate of this coordinate first".into()))?;
    if fit.coordinate != i {
        return Err(Error::Dependency(format!(
            "decay-rate fit is for coordinate {}",
            fit.coordinate
        )));
    }
    if block_size == 0 {
        return Err(Error::Config("block size must be positive".into()));
    }
    let mut maxima = Vec::new();
    for r in 0..dist.replicas() {
        let col: Vec<f64> = (dist.replica_offsets[r]..dist.replica_offsets[r + 1])
            .map(|j| dist.state(j)[i])
            .collect();
        maxima.extend(block_maxima(&col, block_size));
    }
    gumbel_report(&maxima, block_size, fit.alpha_hat, i)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaPoint {
    pub level: Option<f64>,
    pub threshold: f64,
    pub lambda_hat: f64,
    pub stderr: f64,
    /// One-sided 95% bound when no joint exceedance was seen.
    pub upper_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioPoint {
    pub level: Option<f64>,
    pub z: Vec<f64>,
    pub ratio: Option<f64>,
    pub stderr: Option<f64>,
    /// Zero marginal survival: the point was skipped.
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CopulaDiag {
    pub coordinates: Vec<usize>,
    pub lambda: Vec<LambdaPoint>,
    /// Mean of the last third of `lambda`.
    pub lambda_summary: Option<f64>,
    pub ratio: Vec<RatioPoint>,
}

/// `λ̂(t) = P̂(Zᵢ > t, Zⱼ > t) / P̂(Zᵢ > t)` at raw thresholds.
pub fn tail_dependence_at(
    dist: &EmpiricalDist,
    i: usize,
    j: usize,
    thresholds: &[f64],
) -> Result<CopulaDiag> {
    tail_dependence_inner(dist, i, j, thresholds.iter().map(|&t| (None, t)).collect())
}

/// `λ̂` at the thresholds `t = F̂ᵢ⁻¹(level)`.
pub fn tail_dependence(
    dist: &EmpiricalDist,
    i: usize,
    j: usize,
    levels: &[f64],
) -> Result<CopulaDiag> {
    check_coordinate(dist, i)?;
    let pts = levels
        .iter()
        .map(|&p| (Some(p), dist.quantile(i, p)))
        .collect();
    tail_dependence_inner(dist, i, j, pts)
}

fn tail_dependence_inner(
    dist: &EmpiricalDist,
    i: usize,
    j: usize,
    pts: Vec<(Option<f64>, f64)>,
) -> Result<CopulaDiag> {
    check_coordinate(dist, i)?;
    check_coordinate(dist, j)?;
    let n_eff = dist.effective_size();
    let mut lambda = Vec::new();
    for (level, t) in pts {
        let mut marg = KahanSum::new();
        let mut joint = KahanSum::new();
        for k in 0..dist.len() {
            let z = dist.state(k);
            if z[i] > t {
                marg.add(dist.weights[k]);
                if z[j] > t {
                    joint.add(dist.weights[k]);
                }
            }
        }
        let (m, jt) = (marg.value(), joint.value());
        if !(m > 0.0) {
            return Err(Error::OutOfRange {
                value: t,
                lo: dist.quantile(i, 0.0),
                hi: dist.quantile(i, 1.0),
            });
        }
        let count = m * n_eff;
        let lam = (jt / m).clamp(0.0, 1.0);
        lambda.push(LambdaPoint {
            level,
            threshold: t,
            lambda_hat: lam,
            stderr: (lam * (1.0 - lam) / count).sqrt(),
            upper_bound: (jt == 0.0).then(|| 1.0 - 0.05f64.powf(1.0 / count)),
        });
    }
    let tail = &lambda[lambda.len() - lambda.len().div_ceil(3).min(lambda.len())..];
    let lambda_summary = (!tail.is_empty())
        .then(|| tail.iter().map(|p| p.lambda_hat).sum::<f64>() / tail.len() as f64);
    Ok(CopulaDiag {
        coordinates: vec![i, j],
        lambda,
        lambda_summary,
        ratio: Vec::new(),
    })
}

/// `ρ̂(z) = P̂(Zₖ ≥ zₖ ∀k) / Π P̂(Zₖ ≥ zₖ)` over the listed coordinates, at
/// raw points.
pub fn joint_factorization_ratio_at(
    dist: &EmpiricalDist,
    coords: &[usize],
    z_grid: &[Vec<f64>],
) -> Result<CopulaDiag> {
    let pts = z_grid.iter().map(|z| (None, z.clone())).collect();
    factorization_inner(dist, coords, pts)
}

/// `ρ̂` at the points `zₖ = F̂ₖ⁻¹(level)` along the quantile diagonal.
pub fn joint_factorization_ratio(
    dist: &EmpiricalDist,
    coords: &[usize],
    levels: &[f64],
) -> Result<CopulaDiag> {
    for &c in coords {
        check_coordinate(dist, c)?;
    }
    let pts = levels
        .iter()
        .map(|&p| {
            (
                Some(p),
                coords.iter().map(|&c| dist.quantile(c, p)).collect(),
            )
        })
        .collect();
    factorization_inner(dist, coords, pts)
}

fn factorization_inner(
    dist: &EmpiricalDist,
    coords: &[usize],
    pts: Vec<(Option<f64>, Vec<f64>)>,
) -> Result<CopulaDiag> {
    if coords.len() < 2 {
        return Err(Error::Config(
            "factorization needs at least two coordinates".into(),
        ));
    }
    for &c in coords {
        check_coordinate(dist, c)?;
    }
    let m = coords.len();
    let n_eff = dist.effective_size();
    let mut ratio = Vec::new();
    for (level, z) in pts {
        if z.len() != m {
            return Err(Error::Config(format!("grid point {z:?} needs {m} entries")));
        }
        let mut marg = vec![KahanSum::new(); m];
        let mut pair = vec![KahanSum::new(); m * m];
        let mut joint = KahanSum::new();
        let mut hit = vec![false; m];
        for k in 0..dist.len() {
            let s = dist.state(k);
            let w = dist.weights[k];
            for (a, &c) in coords.iter().enumerate() {
                hit[a] = s[c] >= z[a];
            }
            for a in 0..m {
                if hit[a] {
                    marg[a].add(w);
                    for b in (a + 1)..m {
                        if hit[b] {
                            pair[a * m + b].add(w);
                        }
                    }
                }
            }
            if hit.iter().all(|&h| h) {
                joint.add(w);
            }
        }
        let mv: Vec<f64> = marg.iter().map(|k| k.value()).collect();
        let jv = joint.value();
        if mv.contains(&0.0) {
            ratio.push(RatioPoint {
                level,
                z,
                ratio: None,
                stderr: None,
                skipped: true,
            });
            continue;
        }
        let rho = jv / mv.iter().product::<f64>();
        // delta method on log ρ = log J − Σ log Mₐ with multinomial covariances
        let stderr = (jv > 0.0).then(|| {
            let mut var = (1.0 - jv) / jv;
            for a in 0..m {
                var += (1.0 - mv[a]) / mv[a];
                var -= 2.0 * (1.0 - mv[a]) / mv[a];
                for b in (a + 1)..m {
                    let pab = pair[a * m + b].value();
                    var += 2.0 * (pab - mv[a] * mv[b]) / (mv[a] * mv[b]);
                }
            }
            rho * (var.max(0.0) / n_eff).sqrt()
        });
        ratio.push(RatioPoint {
            level,
            z,
            ratio: Some(rho),
            stderr,
            skipped: false,
        });
    }
    Ok(CopulaDiag {
        coordinates: coords.to_vec(),
        lambda: Vec::new(),
        lambda_summary: None,
        ratio,
    })
}

/// `Ĉ(ū) = P(Uᵢ > 1 − ūᵢ ∀i)` from a copula `C` by inclusion–exclusion:
/// `Σ_S (−1)^{|S|} C(v^S)` with `v^S_i = 1 − ūᵢ` for `i ∈ S` and 1 otherwise.
pub fn survival_copula(copula: impl Fn(&[f64]) -> f64, u_bar: &[f64]) -> Result<f64> {
    let d = u_bar.len();
    if d == 0 || d > MAX_COPULA_DIM {
        return Err(Error::Unsupported(format!(
            "survival copula in dimension {d}; at most {MAX_COPULA_DIM} is supported"
        )));
    }
    let mut acc = KahanSum::new();
    let mut v = vec![1.0; d];
    for mask in 0u32..(1 << d) {
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = if mask & (1 << i) != 0 {
                1.0 - u_bar[i]
            } else {
                1.0
            };
        }
        let sign = if mask.count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        };
        acc.add(sign * copula(&v));
    }
    Ok(acc.value())
}

/// Empirical copula of selected coordinates through the weighted marginal
/// distribution functions `F̂ᵢ(x) = P̂(Zᵢ ≤ x)`.
#[derive(Debug, Clone)]
pub struct EmpiricalCopula {
    /// `F̂ᵢ(Zᵢ)` per sample, one column per selected coordinate.
    pub pseudo: Vec<f64>,
    pub weights: Vec<f64>,
    pub dim: usize,
}

impl EmpiricalCopula {
    pub fn new(dist: &EmpiricalDist, coords: &[usize]) -> Result<Self> {
        for &c in coords {
            check_coordinate(dist, c)?;
        }
        let m = coords.len();
        let mut pseudo = vec![0.0; dist.len() * m];
        for (a, &c) in coords.iter().enumerate() {
            for k in 0..dist.len() {
                let x = dist.state(k)[c];
                pseudo[k * m + a] = 1.0 - dist.marginal_survival(c, next_up(x));
            }
        }
        Ok(Self {
            pseudo,
            weights: dist.weights.clone(),
            dim: m,
        })
    }

    /// `C(v) = P̂(F̂ᵢ(Zᵢ) ≤ vᵢ ∀i)`.
    pub fn eval(&self, v: &[f64]) -> f64 {
        let m = self.dim;
        let mut acc = KahanSum::new();
        for (k, &w) in self.weights.iter().enumerate() {
            if (0..m).all(|a| self.pseudo[k * m + a] <= v[a]) {
                acc.add(w);
            }
        }
        acc.value()
    }

    /// `P̂(F̂ᵢ(Zᵢ) > 1 − ūᵢ ∀i)` counted directly.
    pub fn joint_exceedance(&self, u_bar: &[f64]) -> f64 {
        let m = self.dim;
        let mut acc = KahanSum::new();
        for (k, &w) in self.weights.iter().enumerate() {
            if (0..m).all(|a| self.pseudo[k * m + a] > 1.0 - u_bar[a]) {
                acc.add(w);
            }
        }
        acc.value()
    }
}

fn next_up(x: f64) -> f64 {
    // smallest float above x, so P(Z ≥ next_up(x)) = P(Z > x)
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    let bits = x.to_bits();
    if x == 0.0 {
        return f64::from_bits(1);
    }
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reflect::replica_rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Exp1, StandardNormal};

    fn dist_from(d: usize, states: Vec<f64>) -> EmpiricalDist {
        let n = states.len() / d;
        EmpiricalDist::from_samples(d, states, vec![1.0; n], vec![], vec![0, n], 0.0).unwrap()
    }

    fn independent_exp(n: usize, seed: u64) -> EmpiricalDist {
        let mut rng = replica_rng(seed, 0);
        let states: Vec<f64> = (0..2 * n).map(|_| Exp1.sample(&mut rng)).collect();
        dist_from(2, states)
    }

    fn table(c: f64) -> (Vec<f64>, Vec<f64>) {
        let xs: Vec<f64> = (0..40).map(|k| 0.1 * k as f64).collect();
        let s = xs.iter().map(|x| c * (-2.0 * x).exp()).collect();
        (xs, s)
    }

    #[test]
    fn exact_tables() {
        let (xs, s) = table(1.0);
        let fit = fit_decay_rate_table(&xs, &s, 0, (0.0, 10.0), DEFAULT_WINDOW).unwrap();
        assert_abs_diff_eq!(fit.alpha_hat, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
        let (xs, s) = table(2.0 / 3.0);
        let fit2 = fit_decay_rate_table(&xs, &s, 0, (0.0, 10.0), DEFAULT_WINDOW).unwrap();
        assert_abs_diff_eq!(fit2.alpha_hat, 2.0, epsilon = 1e-12);
        assert!(fit2.intercept > fit.intercept);
    }

    #[test]
    fn too_few_thresholds() {
        let (xs, s) = table(1.0);
        assert!(matches!(
            fit_decay_rate_table(&xs[..10], &s[..10], 0, (0.0, 10.0), DEFAULT_WINDOW),
            Err(Error::DataStarved { .. })
        ));
    }

    #[test]
    fn exp_samples_fit() {
        let dist = independent_exp(200_000, 1);
        let fit = fit_decay_rate(&dist, 0, DEFAULT_WINDOW).unwrap();
        assert!((fit.alpha_hat - 1.0).abs() < 0.1, "{fit:?}");
        assert!(fit.thresholds_used >= MIN_THRESHOLDS);
    }

    #[test]
    fn gumbel_oracles() {
        let mut rng = replica_rng(2, 0);
        let gumbel: Vec<f64> = (0..10_000)
            .map(|_| {
                let u: f64 = rng.random();
                -(-u.ln()).ln()
            })
            .collect();
        assert!(gumbel_ks(&gumbel, 1.0, 0.0) < 0.02);

        let exp: Vec<f64> = (0..10_000_000).map(|_| Exp1.sample(&mut rng)).collect();
        let rep = gumbel_doa_check_samples(&exp, 1000, 1.0, 0).unwrap();
        assert_eq!(rep.blocks, 10_000);
        assert_abs_diff_eq!(rep.b_n, 1000f64.ln(), epsilon = 1e-12);
        assert!(rep.ks < 0.05 && rep.consistent, "{rep:?}");
        let doubled = gumbel_doa_check_samples(&exp, 2000, 1.0, 0).unwrap();
        assert_abs_diff_eq!(doubled.b_n - rep.b_n, 2f64.ln(), epsilon = 1e-12);
        assert_eq!(doubled.consistent, rep.consistent);

        let pareto: Vec<f64> = (0..10_000_000)
            .map(|_| {
                let u: f64 = rng.random();
                (1.0 - u).powf(-0.5)
            })
            .collect();
        let rep = gumbel_doa_check_samples(&pareto, 1000, 1.0, 0).unwrap();
        assert!(rep.ks > 0.2 && !rep.consistent, "{rep:?}");
    }

    #[test]
    fn gumbel_needs_fit_and_blocks() {
        let dist = independent_exp(1000, 3);
        assert!(matches!(
            gumbel_doa_check(&dist, 0, 10, None),
            Err(Error::Dependency(_))
        ));
        let fit = TailFit {
            coordinate: 0,
            alpha_hat: 1.0,
            stderr: 0.0,
            intercept: 0.0,
            window: DEFAULT_WINDOW,
            r_squared: 1.0,
            thresholds_used: 20,
        };
        assert!(matches!(
            gumbel_doa_check(&dist, 0, 100, Some(&fit)),
            Err(Error::DataStarved { .. })
        ));
        assert!(gumbel_doa_check(&dist, 0, 10, Some(&fit)).is_ok());
    }

    #[test]
    fn tail_dependence_oracles() {
        let dist = independent_exp(200_000, 4);
        let diag = tail_dependence(&dist, 0, 1, &[0.5, 0.9, 0.95]).unwrap();
        for p in &diag.lambda {
            let other = dist.marginal_survival(1, next_up(p.threshold));
            assert!(
                (p.lambda_hat - other).abs() < 3.0 * p.stderr + 1e-3,
                "{p:?}"
            );
        }

        let mut rng = replica_rng(5, 0);
        let states: Vec<f64> = (0..50_000)
            .flat_map(|_| {
                let x: f64 = Exp1.sample(&mut rng);
                [x, x]
            })
            .collect();
        let como = dist_from(2, states);
        let diag = tail_dependence(&como, 0, 1, &[0.5, 0.9, 0.99]).unwrap();
        assert!(diag.lambda.iter().all(|p| p.lambda_hat == 1.0));
        assert_eq!(diag.lambda_summary, Some(1.0));
    }

    #[test]
    fn zero_joint_exceedances_give_a_bound() {
        // anti-monotone pair: never both large
        let states: Vec<f64> = (0..1000)
            .flat_map(|k| [k as f64, (999 - k) as f64])
            .collect();
        let dist = dist_from(2, states);
        let diag = tail_dependence_at(&dist, 0, 1, &[800.0]).unwrap();
        assert_eq!(diag.lambda[0].lambda_hat, 0.0);
        let ub = diag.lambda[0].upper_bound.unwrap();
        assert!(ub > 0.0 && ub < 0.05);
        assert!(matches!(
            tail_dependence_at(&dist, 0, 1, &[5000.0]),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn factorization_of_independent_samples() {
        let dist = independent_exp(400_000, 6);
        let diag = joint_factorization_ratio(&dist, &[0, 1], &[0.5, 0.9, 0.95, 0.99]).unwrap();
        for p in &diag.ratio {
            let (r, se) = (p.ratio.unwrap(), p.stderr.unwrap());
            assert!((r - 1.0).abs() < 3.0 * se, "{p:?}");
        }
        let far = joint_factorization_ratio_at(&dist, &[0, 1], &[vec![1e9, 0.0]]).unwrap();
        assert!(far.ratio[0].skipped && far.ratio[0].ratio.is_none());
    }

    #[test]
    fn factorization_of_gaussian_copula() {
        // the ratio at quantile levels depends only on the copula, so normal
        // margins stand in for any other continuous margins
        let rho: f64 = 0.5;
        let mut rng = replica_rng(7, 0);
        let states: Vec<f64> = (0..1_000_000)
            .flat_map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                let w: f64 = StandardNormal.sample(&mut rng);
                [x, rho * x + (1.0 - rho * rho).sqrt() * w]
            })
            .collect();
        let dist = dist_from(2, states);
        // P(X > q, Y > q) / (1 − p)² by quadrature
        let exact = [
            (0.5, 1.3333333333333333),
            (0.9, 3.240152321834354),
            (0.95, 4.875771506869962),
        ];
        let levels: Vec<f64> = exact.iter().map(|e| e.0).collect();
        let diag = joint_factorization_ratio(&dist, &[0, 1], &levels).unwrap();
        let mut prev = 1.0;
        for (p, &(_, want)) in diag.ratio.iter().zip(&exact) {
            let (r, se) = (p.ratio.unwrap(), p.stderr.unwrap());
            assert!((r - want).abs() < 3.0 * se + 0.01 * want, "{p:?} vs {want}");
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn survival_copula_identities() {
        let indep = |v: &[f64]| v.iter().product::<f64>();
        assert_abs_diff_eq!(
            survival_copula(indep, &[0.3, 0.2]).unwrap(),
            0.06,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            survival_copula(indep, &[1.0, 1.0]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            survival_copula(indep, &[0.5, 0.5, 0.5]).unwrap(),
            0.125,
            epsilon = 1e-15
        );
        assert!(matches!(
            survival_copula(indep, &[0.5; 4]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn empirical_survival_copula_matches_direct_count() {
        let dist = independent_exp(20_000, 8);
        let cop = EmpiricalCopula::new(&dist, &[0, 1]).unwrap();
        for ub in [[0.05, 0.05], [0.3, 0.1], [1.0, 1.0], [0.5, 0.7]] {
            let ie = survival_copula(|v| cop.eval(v), &ub).unwrap();
            assert_abs_diff_eq!(ie, cop.joint_exceedance(&ub), epsilon = 1e-12);
        }
        let c = cop.joint_exceedance(&[0.05, 0.05]);
        let se = (0.0025f64 * (1.0 - 0.0025) / 20_000.0).sqrt();
        assert!((c - 0.0025).abs() < 3.0 * se, "{c}");
    }

    #[test]
    fn polynomial_exponent_of_gamma_tail() {
        // Gamma(2,1) survival (1 + x)e^{−x} has β = −1
        let mut rng = replica_rng(9, 0);
        let states: Vec<f64> = (0..400_000)
            .map(|_| {
                let a: f64 = Exp1.sample(&mut rng);
                let b: f64 = Exp1.sample(&mut rng);
                a + b
            })
            .collect();
        let dist = dist_from(1, states);
        let p = polynomial_exponent(&dist, 0, DEFAULT_WINDOW, 1.0).unwrap();
        assert!((p.beta_hat + 1.0).abs() < 0.3, "{p:?}");
    }

    #[test]
    fn sticky_product_model_tails() {
        use crate::ensemble::{run_ensemble, EnsembleOptions};
        use crate::model::ModelSpec;
        use crate::reflect::SimConfig;
        let spec: ModelSpec<f64> = ModelSpec::from_f64(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[-1.0, -1.0],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[1.0, 1.0],
        )
        .unwrap();
        let cfg = SimConfig {
            dt: 1e-3,
            horizon: 3000.0,
            seed: 31,
            replicas: 4,
            z0: vec![0.0, 0.0],
            burn_in: 300.0,
        };
        let ens = run_ensemble(&spec, &cfg, &EnsembleOptions::default()).unwrap();
        let dist = ens.stationary(0.1).unwrap();
        for i in 0..2 {
            let fit = fit_decay_rate(&dist, i, DEFAULT_WINDOW).unwrap();
            assert!((1.85..=2.15).contains(&fit.alpha_hat), "{fit:?}");
        }
        let lam = tail_dependence(&dist, 0, 1, &[0.9, 0.95, 0.99]).unwrap();
        assert!(lam
            .lambda
            .windows(2)
            .all(|w| w[1].lambda_hat < w[0].lambda_hat));
        assert!(lam.lambda[2].lambda_hat < 0.1);
        // the pause couples the coordinates: above zero the joint survival is
        // (1/3)e^{-2z1-2z2} against marginals (2/3)e^{-2z}, so the ratio is 3/4
        let rho = joint_factorization_ratio(&dist, &[0, 1], &[0.9]).unwrap();
        let r = rho.ratio[0].ratio.unwrap();
        assert!((r - 0.75).abs() < 0.06, "{r}");
        let cop = EmpiricalCopula::new(&dist, &[0, 1]).unwrap();
        let c = cop.joint_exceedance(&[0.05, 0.05]);
        assert!((c - 0.75 * 0.0025).abs() < 4e-4, "{c}");
    }

    proptest! {
        #[test]
        fn slope_is_invariant_under_scaling(c in 1e-3f64..1e3, rate in 0.2f64..5.0) {
            let xs: Vec<f64> = (0..30).map(|k| 0.2 * k as f64).collect();
            let s: Vec<f64> = xs.iter().map(|x| (-rate * x).exp() * (1.0 + 0.1 * (3.0 * x).sin())).collect();
            let scaled: Vec<f64> = s.iter().map(|v| c * v).collect();
            let a = fit_decay_rate_table(&xs, &s, 0, (0.0, 100.0), DEFAULT_WINDOW).unwrap();
            let b = fit_decay_rate_table(&xs, &scaled, 0, (0.0, 100.0), DEFAULT_WINDOW).unwrap();
            prop_assert!((a.alpha_hat - b.alpha_hat).abs() <= 1e-12 * a.alpha_hat);
            let pow2: Vec<f64> = s.iter().map(|v| 8.0 * v).collect();
            let e = fit_decay_rate_table(&xs, &pow2, 0, (0.0, 100.0), DEFAULT_WINDOW).unwrap();
            prop_assert!((a.alpha_hat - e.alpha_hat).abs() <= 1e-13 * a.alpha_hat);
        }

        #[test]
        fn lambda_stays_in_unit_interval(vals in proptest::collection::vec(0.0f64..10.0, 40..200), t in 0.0f64..5.0) {
            let n = vals.len() / 2 * 2;
            let dist = dist_from(2, vals[..n].to_vec());
            if let Ok(diag) = tail_dependence_at(&dist, 0, 1, &[t]) {
                prop_assert!((0.0..=1.0).contains(&diag.lambda[0].lambda_hat));
            }
        }
    }
}
