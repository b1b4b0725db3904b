use std::time::Instant;

use sticky_core::ensemble::{run_ensemble, EnsembleOptions};
use sticky_core::ldp::{rate_function, RateOptions};
use sticky_core::model::{
    check_skew_symmetry, expected_local_times, product_form_rates, validate_model,
};
use sticky_core::stationary::{
    bar_residual, closed_form_mgf, empirical_mgf, mass_identity_check, pooled_masses, BarMode,
    EmpiricalDist,
};
use sticky_core::tails::{
    fit_decay_rate, gumbel_doa_check, joint_factorization_ratio, tail_dependence,
};
use sticky_core::{EnsembleResult64, Error as CoreError, ModelSpec64};

use crate::config::{BarSection, Format, LdpSection, RunConfig, StationarySection, TailsSection};
use crate::error::CliError;
use crate::report::{to_json, Cell, Fragment, Table};

/// Clock identity tolerance per replica.
const CLOCK_TOL: f64 = 1e-6;
/// Closed-form BAR residuals are checked at machine precision.
const EXACT_TOL: f64 = 1e-12;
const BOUND_SLACK: f64 = 1e-6;
const PATH_ROWS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::Subcommand)]
pub enum Command {
    /// Validate the model matrices only.
    Check,
    /// Run the replicas and dump one sticky path.
    Simulate,
    /// Estimate the stationary law and boundary masses.
    Stationary,
    /// Evaluate the basic adjoint relationship residuals.
    Bar,
    /// Tail decay rates, Gumbel check and copula diagnostics.
    Tails,
    /// Large-deviation rate at the configured targets.
    Ldp,
    /// Every configured analysis.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Simulate => "simulate",
            Command::Stationary => "stationary",
            Command::Bar => "bar",
            Command::Tails => "tails",
            Command::Ldp => "ldp",
            Command::Report => "report",
        }
    }
}

pub struct Context {
    pub cfg: RunConfig,
    pub config_path: String,
    pub format: Format,
    spec: ModelSpec64,
    ensemble: Option<EnsembleResult64>,
    dist: Option<EmpiricalDist>,
}

fn pass_str(b: bool) -> &'static str {
    if b {
        "PASS"
    } else {
        "FAIL"
    }
}

impl Context {
    pub fn new(cfg: RunConfig, config_path: String, format: Format) -> Result<Self, CliError> {
        let spec = cfg.model_spec()?;
        Ok(Self {
            cfg,
            config_path,
            format,
            spec,
            ensemble: None,
            dist: None,
        })
    }

    fn wrap(&self, command: &str) -> impl Fn(CoreError) -> CliError + '_ {
        let command = command.to_string();
        move |source| CliError::Command {
            command: command.clone(),
            config: self.config_path.clone(),
            source,
        }
    }

    fn table_file(&self, stem: &str, t: &Table) -> (String, String) {
        match self.format {
            Format::Csv => (format!("{stem}.csv"), t.to_csv()),
            Format::Json => (format!("{stem}.json"), t.to_json()),
        }
    }

    fn ensure_ensemble(&mut self, command: &str) -> Result<(), CliError> {
        if self.ensemble.is_some() {
            return Ok(());
        }
        let sim = self.cfg.sim_config()?;
        let opts = EnsembleOptions {
            sticky_dt: self.cfg.sim.as_ref().map_or(0.05, |s| s.sticky_dt),
            monitor: true,
            ..Default::default()
        };
        let ens = run_ensemble(&self.spec, &sim, &opts).map_err(self.wrap(command))?;
        self.ensemble = Some(ens);
        Ok(())
    }

    fn ensure_dist(&mut self, command: &str) -> Result<(), CliError> {
        self.ensure_ensemble(command)?;
        if self.dist.is_none() {
            let eps = 10.0 * self.cfg.sim_config()?.dt.sqrt();
            let dist = self
                .ensemble
                .as_ref()
                .expect("ensemble present")
                .stationary(eps)
                .map_err(self.wrap(command))?;
            self.dist = Some(dist);
        }
        Ok(())
    }

    pub fn run(&mut self, cmd: Command) -> Result<Vec<Fragment>, CliError> {
        Ok(match cmd {
            Command::Check => vec![self.check()?],
            Command::Simulate => vec![self.simulate(true)?],
            Command::Stationary => {
                let s = self.cfg.analyses.stationary.clone().unwrap_or_default();
                vec![self.stationary(&s)?]
            }
            Command::Bar => {
                let b = self.cfg.analyses.bar.clone().unwrap_or_else(|| BarSection {
                    theta_grid: vec![vec![-1.0; self.spec.d]],
                    closed_form: false,
                    tolerance: 0.05,
                });
                vec![self.bar(&b)?]
            }
            Command::Tails => {
                let t = self.cfg.analyses.tails.clone().unwrap_or_default();
                vec![self.tails(&t)?]
            }
            Command::Ldp => {
                let l = self
                    .cfg
                    .analyses
                    .ldp
                    .clone()
                    .ok_or_else(|| CliError::Config {
                        path: "analyses.ldp".into(),
                        message: "the ldp command needs targets".into(),
                    })?;
                vec![self.ldp(&l)?]
            }
            Command::Report => self.report()?,
        })
    }

    fn report(&mut self) -> Result<Vec<Fragment>, CliError> {
        let mut out = vec![self.check()?];
        let a = self.cfg.analyses.clone();
        if self.cfg.needs_simulation() {
            out.push(self.simulate(false)?);
        }
        if let Some(s) = &a.stationary {
            out.push(self.stationary(s)?);
        }
        if let Some(b) = &a.bar {
            out.push(self.bar(b)?);
        }
        if let Some(t) = &a.tails {
            out.push(self.tails(t)?);
        }
        if let Some(l) = &a.ldp {
            out.push(self.ldp(l)?);
        }
        Ok(out)
    }

    pub fn check(&mut self) -> Result<Fragment, CliError> {
        let mut f = Fragment::new("check");
        let spec = &self.spec;
        let v = validate_model(spec);
        let skew = check_skew_symmetry(spec).map_err(self.wrap("check"))?;
        f.say(format!("spd={}", v.spd_ok));
        f.say(format!("completely_s={}", v.completely_s_ok));
        f.say(format!("m_matrix={}", v.m_matrix));
        f.say(format!("stable={}", v.stable));
        f.say(format!("skew_symmetric={}", skew.holds));
        for m in &v.messages {
            f.say(format!("note: {m}"));
        }
        f.check("spd", v.spd_ok as u8 as f64, "true", v.spd_ok);
        f.check(
            "completely_s",
            v.completely_s_ok as u8 as f64,
            "true",
            v.completely_s_ok,
        );
        f.check("stable", v.stable as u8 as f64, "true", v.stable);
        f.note("skew_residual", skew.residual);
        if v.stable {
            if let Ok(lt) = expected_local_times(spec) {
                f.say(format!("expected_local_times={:?}", lt.values));
                f.note("expected_time_mass", lt.time_mass(&spec.stickiness));
                f.note("expected_local_times", &lt);
            }
        }
        if skew.holds && v.stable {
            if let Ok(rates) = product_form_rates(spec) {
                f.say(format!("product_form_rates={rates:?}"));
                f.note("product_form_rates", rates);
            }
        }
        f.note("validation", &v);
        Ok(f)
    }

    pub fn simulate(&mut self, with_path: bool) -> Result<Fragment, CliError> {
        let started = Instant::now();
        self.ensure_ensemble("simulate")?;
        let mut f = Fragment::new("simulate");
        let ens = self.ensemble.as_ref().expect("ensemble present");
        let u = &self.spec.stickiness;
        let inv = ens.invariant_totals().unwrap_or_default();
        f.check(
            "lcp_invariant_violations",
            inv.violations() as f64,
            "== 0",
            inv.violations() == 0,
        );
        let clock = ens
            .replicas
            .iter()
            .map(|r| r.boundary.clock_identity_residual(u).abs())
            .fold(0.0, f64::max);
        f.check(
            "clock_identity_residual",
            clock,
            format!("< {CLOCK_TOL:e}"),
            clock < CLOCK_TOL,
        );
        f.note("total_steps", ens.total_steps());
        f.note("invariants", inv);
        let per: Vec<serde_json::Value> = ens
            .replicas
            .iter()
            .map(|r| {
                serde_json::json!({
                    "replica": r.replica,
                    "steps": r.steps,
                    "sticky_horizon": r.sticky_horizon,
                    "v0_mass": r.boundary.v0_mass,
                    "v_masses": r.boundary.v_masses,
                    "final_state": r.final_state,
                })
            })
            .collect();
        f.note("replicas", per);
        f.say(format!(
            "simulated {} steps over {} replicas in {:.1}s",
            ens.total_steps(),
            ens.replicas.len(),
            started.elapsed().as_secs_f64()
        ));
        if with_path {
            let path = &ens.replicas[0].sticky;
            let mut buf = Vec::new();
            path.write_csv(&mut buf, path.len().div_ceil(PATH_ROWS))
                .map_err(|e| CliError::io("path.csv", e))?;
            f.file("path.csv", String::from_utf8(buf).expect("csv is utf-8"));
        }
        Ok(f)
    }

    pub fn stationary(&mut self, s: &StationarySection) -> Result<Fragment, CliError> {
        self.ensure_dist("stationary")?;
        let mut f = Fragment::new("stationary");
        let wrap = self.wrap("stationary");
        let dist = self.dist.as_ref().expect("distribution present");
        let boundary = self.ensemble.as_ref().expect("ensemble present").boundary();
        let d = self.spec.d;

        let mut t = Table::new(&["coordinate", "threshold", "survival"]);
        for (i, table) in dist.survival.iter().enumerate() {
            for (&x, &p) in table.thresholds.iter().zip(&table.survival) {
                t.push(vec![i.into(), x.into(), p.into()]);
            }
        }
        let (name, body) = self.table_file("stationary", &t);
        f.file(name, body);
        if let Some(grid) = &s.z_grid {
            let mut header: Vec<String> = (1..=d).map(|i| format!("z_{i}")).collect();
            header.push("joint_survival".into());
            let mut g = Table::with_header(header);
            for z in grid {
                let bounds: Vec<(usize, f64)> = z.iter().copied().enumerate().collect();
                let mut row: Vec<Cell> = z.iter().map(|&v| v.into()).collect();
                row.push(dist.joint_survival(&bounds).into());
                g.push(row);
            }
            let (name, body) = self.table_file("stationary_grid", &g);
            f.file(name, body);
        }

        f.note("atom_estimates", &dist.atom_estimates);
        f.note("near_face", &dist.near_face);
        f.note("effective_size", dist.effective_size());
        let (v0, v) = pooled_masses(&boundary).map_err(&wrap)?;
        f.say(format!(
            "v0={v0:.6} v={v:?} atoms={:?}",
            dist.atom_estimates
        ));
        match mass_identity_check(&self.spec, v0, &v) {
            Ok(rep) => {
                let tol = s.mass_tolerance;
                let e0 = (rep.simulated_v0 - rep.expected_v0).abs();
                f.check("v0_mass_abs_err", e0, format!("<= {tol}"), e0 <= tol);
                for i in 0..d {
                    let e = (rep.simulated_v[i] - rep.expected_v[i]).abs();
                    f.check(
                        format!("v{}_mass_abs_err", i + 1),
                        e,
                        format!("<= {tol}"),
                        e <= tol,
                    );
                }
                f.note("mass_identity", rep);
            }
            Err(e) => f.say(format!("mass identity skipped: {e}")),
        }
        Ok(f)
    }

    pub fn bar(&mut self, b: &BarSection) -> Result<Fragment, CliError> {
        let mut f = Fragment::new("bar");
        let mut reports = Vec::new();
        let mgf;
        if b.closed_form {
            let wrap = self.wrap("bar");
            mgf = closed_form_mgf(&self.spec, &b.theta_grid).map_err(&wrap)?;
            let rep = bar_residual(&self.spec, &mgf, BarMode::Sticky).map_err(&wrap)?;
            f.check(
                "closed_form_max_abs_residual",
                rep.max_abs_resid,
                format!("<= {EXACT_TOL:e}"),
                rep.max_abs_resid <= EXACT_TOL,
            );
            reports.push(rep);
        } else {
            self.ensure_dist("bar")?;
            let wrap = self.wrap("bar");
            let boundary = self.ensemble.as_ref().expect("ensemble present").boundary();
            mgf = empirical_mgf(self.dist.as_ref(), &boundary, &b.theta_grid).map_err(&wrap)?;
            for mode in [BarMode::Sticky, BarMode::Srbm] {
                let rep = bar_residual(&self.spec, &mgf, mode).map_err(&wrap)?;
                f.check(
                    format!(
                        "{}_max_rel_residual",
                        serde_json::to_value(mode).unwrap().as_str().unwrap()
                    ),
                    rep.max_rel_resid,
                    format!("< {}", b.tolerance),
                    rep.max_rel_resid < b.tolerance,
                );
                reports.push(rep);
            }
        }
        for rep in &reports {
            for row in &rep.rows {
                f.say(format!(
                    "{:?} theta={:?} lhs={} rhs={} abs={:.3e}",
                    rep.mode, row.theta, row.lhs, row.rhs, row.abs_resid
                ));
            }
        }
        f.file(
            "bar.json",
            to_json(&serde_json::json!({ "closed_form": b.closed_form, "reports": reports, "mgf": mgf })),
        );
        Ok(f)
    }

    pub fn tails(&mut self, t: &TailsSection) -> Result<Fragment, CliError> {
        self.ensure_dist("tails")?;
        let mut f = Fragment::new("tails");
        let wrap = self.wrap("tails");
        let dist = self.dist.as_ref().expect("distribution present");
        let d = self.spec.d;

        let mut decay = Table::new(&[
            "coordinate",
            "alpha_hat",
            "stderr",
            "intercept",
            "r_squared",
            "thresholds_used",
            "gumbel_block",
            "gumbel_ks",
            "gumbel_consistent",
        ]);
        for i in 0..d {
            let fit = match fit_decay_rate(dist, i, t.window) {
                Ok(fit) => fit,
                Err(e @ CoreError::DataStarved { .. }) => {
                    f.say(format!("coordinate {i}: {e}"));
                    continue;
                }
                Err(e) => return Err(wrap(e)),
            };
            let gumbel = match gumbel_doa_check(dist, i, t.gumbel_block, Some(&fit)) {
                Ok(g) => Some(g),
                Err(e @ CoreError::DataStarved { .. }) => {
                    f.say(format!("gumbel check {i}: {e}"));
                    None
                }
                Err(e) => return Err(wrap(e)),
            };
            f.say(format!(
                "alpha_{i}={:.4} (se {:.4})",
                fit.alpha_hat, fit.stderr
            ));
            if let Some((lo, hi)) = t.alpha_range {
                let ok = (lo..=hi).contains(&fit.alpha_hat);
                f.check(
                    format!("alpha_{i}"),
                    fit.alpha_hat,
                    format!("in [{lo}, {hi}]"),
                    ok,
                );
            }
            decay.push(vec![
                i.into(),
                fit.alpha_hat.into(),
                fit.stderr.into(),
                fit.intercept.into(),
                fit.r_squared.into(),
                fit.thresholds_used.into(),
                t.gumbel_block.into(),
                gumbel.as_ref().map(|g| g.ks).into(),
                gumbel.as_ref().map_or(Cell::Empty, |g| g.consistent.into()),
            ]);
        }
        let (name, body) = self.table_file("tails_decay", &decay);
        f.file(name, body);

        let pairs = t.pairs.clone().unwrap_or_else(|| {
            (0..d)
                .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
                .collect()
        });
        for (i, j) in pairs {
            let lam = tail_dependence(dist, i, j, &t.levels).map_err(&wrap)?;
            let rat = joint_factorization_ratio(dist, &[i, j], &t.levels).map_err(&wrap)?;
            let mut table = Table::new(&[
                "level",
                "threshold",
                "lambda",
                "lambda_stderr",
                "lambda_upper",
                "ratio",
                "ratio_stderr",
            ]);
            for (k, &level) in t.levels.iter().enumerate() {
                let l = &lam.lambda[k];
                let r = &rat.ratio[k];
                table.push(vec![
                    level.into(),
                    l.threshold.into(),
                    l.lambda_hat.into(),
                    l.stderr.into(),
                    l.upper_bound.into(),
                    r.ratio.into(),
                    r.stderr.into(),
                ]);
                if let (Some((lo, hi)), Some(v)) = (t.ratio_range, r.ratio) {
                    f.check(
                        format!("ratio_{i}_{j}@{level}"),
                        v,
                        format!("in [{lo}, {hi}]"),
                        (lo..=hi).contains(&v),
                    );
                }
                f.say(format!(
                    "pair ({i},{j}) level {level}: lambda={:.4} ratio={}",
                    l.lambda_hat,
                    r.ratio.map_or("n/a".into(), |v| format!("{v:.4}"))
                ));
            }
            if let (Some(max), Some(last)) = (t.lambda_max, lam.lambda.last()) {
                f.check(
                    format!("lambda_{i}_{j}"),
                    last.lambda_hat,
                    format!("< {max}"),
                    last.lambda_hat < max,
                );
            }
            let (name, body) = self.table_file(&format!("tails_pair_{i}_{j}"), &table);
            f.file(name, body);
        }
        Ok(f)
    }

    pub fn ldp(&mut self, l: &LdpSection) -> Result<Fragment, CliError> {
        let mut f = Fragment::new("ldp");
        let wrap = self.wrap("ldp");
        let opts = RateOptions {
            segments: l.segments,
            restarts: l.restarts,
            seed: self.cfg.sim.as_ref().map_or(0, |s| s.seed),
            ..Default::default()
        };
        let mut results = Vec::new();
        for (k, x) in l.targets.iter().enumerate() {
            let r = rate_function(&self.spec, x, &opts).map_err(&wrap)?;
            f.say(format!(
                "target {x:?}: value={:.6} bound={:.6} tau={}",
                r.value,
                r.straight_line_bound,
                r.path
                    .as_ref()
                    .map_or("-".into(), |p| format!("{:.4}", p.tau))
            ));
            let slack = r.value - r.straight_line_bound;
            f.check(
                format!("bound_{k}"),
                slack,
                format!("value - bound <= {BOUND_SLACK:e}"),
                slack <= BOUND_SLACK,
            );
            if let Some(expected) = &l.expected {
                let e = expected[k];
                let rel = (r.value - e).abs() / e.abs().max(f64::MIN_POSITIVE);
                f.check(
                    format!("value_{k}"),
                    r.value,
                    format!("within {} of {e}", l.rel_tolerance),
                    rel <= l.rel_tolerance || (e == 0.0 && r.value == 0.0),
                );
            }
            results.push(r);
        }
        f.file(
            "ldp.json",
            to_json(&serde_json::json!({ "options": opts, "results": results })),
        );
        Ok(f)
    }
}

/// Stdout lines for a finished run.
pub fn render(fragments: &[Fragment]) -> Vec<String> {
    let mut out = Vec::new();
    for f in fragments {
        out.push(format!("[{}]", f.command));
        out.extend(f.stdout.iter().cloned());
        for c in &f.checks {
            out.push(format!(
                "{} {}: {} ({})",
                pass_str(c.pass),
                c.name,
                crate::report::fmt_f64(c.value),
                c.tolerance
            ));
        }
    }
    out
}
