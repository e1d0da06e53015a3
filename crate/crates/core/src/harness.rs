//! Suite runners behind the command-line tool. Each suite returns its checks
//! and the artifacts it produced; nothing here reads the clock, so a fixed
//! config and seed give byte-identical output.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::copy_analysis::{
    bound_sweep, certify, delta_upper_bound, generate_adversarial_instance,
    generate_boundary_instance, measure_copy_error, write_sweep_csv, AttentionProfile, DeltaForm,
    GeneratorConfig, RhoInputs,
};
use crate::cost::{analytic_costs, fit_scaling, instrument, Family, ScalingFit};
use crate::dp::{
    build_local_dp_model, cot_solve, dp_oracle, replay_dependencies, CotRun, DpProblem, Mode,
};
use crate::error::{Error, Result};
use crate::gadgets::{
    build_copy_block, build_indicator, build_multiplier, build_selector, emulate_relu_mlp,
    multiplier_lambda, relu_lambda, select_target, Relation,
};
use crate::linalg::{max_abs_diff, Matrix};
use crate::ssm::{
    compute_selective_params, concat_as_residual, mamba_stack_forward, ssm_attention_form_injected,
    ssm_scan, Decay, DecayMode, ForgettingProfile, HiddenState, MambaBlockParams, SsmParams,
    StackMode,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Core,
    Gadgets,
    Copy,
    Dp,
    Cost,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [
        Suite::Core,
        Suite::Gadgets,
        Suite::Copy,
        Suite::Dp,
        Suite::Cost,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Suite::Core => "core",
            Suite::Gadgets => "gadgets",
            Suite::Copy => "copy",
            Suite::Dp => "dp",
            Suite::Cost => "cost",
            Suite::All => "all",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.id() == s)
            .ok_or_else(|| Error::UnknownId(format!("suite {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub suite: Suite,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Flips one sign in the attention form so the core suite must fail.
    pub fault_inject: bool,
    pub n_max: usize,
    pub d_max: usize,
    pub d_h_max: usize,
    pub core_instances: usize,
    pub multiplier_m: Vec<f64>,
    pub eps_grid: Vec<f64>,
    pub relu_m: f64,
    pub relu_targets: usize,
    pub relu_inputs: usize,
    pub copy_n: Vec<usize>,
    pub copy_d: Vec<usize>,
    pub copy_m: f64,
    pub copy_instances: usize,
    pub copy_l: Vec<usize>,
    pub fixtures: Vec<String>,
    pub mode: Mode,
    pub eps_budget: f64,
    pub dp_instances: usize,
    pub t_grid: Vec<usize>,
    pub window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            suite: Suite::All,
            seed: 0,
            out_dir: PathBuf::from("out"),
            fault_inject: false,
            n_max: 64,
            d_max: 8,
            d_h_max: 16,
            core_instances: 200,
            multiplier_m: vec![1.0, 3.0],
            eps_grid: vec![1e-1, 1e-2],
            relu_m: 2.0,
            relu_targets: 10,
            relu_inputs: 100,
            copy_n: vec![8, 32, 128],
            copy_d: vec![2, 8],
            copy_m: 2.0,
            copy_instances: 60,
            copy_l: vec![2, 5, 11],
            fixtures: vec!["edit_distance".into()],
            mode: Mode::Semantic,
            eps_budget: 0.25,
            dp_instances: 24,
            t_grid: vec![8, 16, 24, 32, 48, 64],
            window: 3,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[f64]| v.iter().all(|x| *x > 0.0);
        if self.n_max < 2 || self.d_max == 0 || self.d_h_max == 0 {
            return Err(Error::Config(
                "need n_max >= 2 and d_max, d_h_max >= 1".into(),
            ));
        }
        if !positive(&self.multiplier_m)
            || !positive(&self.eps_grid)
            || !(self.relu_m > 0.0)
            || !(self.copy_m > 0.0)
        {
            return Err(Error::Config(
                "budgets and magnitudes must be positive".into(),
            ));
        }
        if self.copy_n.contains(&0)
            || self.copy_d.contains(&0)
            || self.copy_l.iter().any(|l| *l < 2)
        {
            return Err(Error::Config("copy sizes need N, d >= 1 and L >= 2".into()));
        }
        if self.window == 0 || self.t_grid.contains(&0) {
            return Err(Error::Config("window and T values must be positive".into()));
        }
        for f in &self.fixtures {
            parse_fixture(f)?;
        }
        Ok(())
    }

    pub fn suites(&self) -> Vec<Suite> {
        match self.suite {
            Suite::All => Suite::EACH.to_vec(),
            s => vec![s],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FixtureKind {
    EditDistance,
    Lis,
    WindowedMax,
}

fn parse_fixture(id: &str) -> Result<FixtureKind> {
    match id.replace('-', "_").as_str() {
        "edit_distance" => Ok(FixtureKind::EditDistance),
        "lis" => Ok(FixtureKind::Lis),
        "windowed_max" => Ok(FixtureKind::WindowedMax),
        _ => Err(Error::UnknownId(format!("fixture {id}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub artifacts: Vec<String>,
}

impl SuiteReport {
    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub seed: u64,
    pub fault_inject: bool,
    pub suites: Vec<SuiteReport>,
    pub failures: usize,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRun {
    pub report: SuiteReport,
    pub artifacts: Vec<Artifact>,
}

impl SuiteRun {
    fn new(suite: Suite, checks: Vec<Check>, artifacts: Vec<Artifact>) -> Self {
        SuiteRun {
            report: SuiteReport {
                suite,
                checks,
                artifacts: artifacts.iter().map(|a| a.name.clone()).collect(),
            },
            artifacts,
        }
    }
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

fn artifact<T: Serialize>(name: &str, rows: &[T]) -> Result<Artifact> {
    Ok(Artifact {
        name: name.to_string(),
        bytes: csv_bytes(rows)?,
    })
}

fn rel_discrepancy(a: &Matrix, b: &Matrix) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(f64::MIN_POSITIVE);
    max_abs_diff(a.as_slice(), b.as_slice()) / scale
}

#[derive(Serialize)]
struct CoreRow {
    instance: usize,
    decay: DecayMode,
    n: usize,
    d: usize,
    d_h: usize,
    rel_discrepancy: f64,
}

fn random_block(
    rng: &mut ChaCha8Rng,
    d: usize,
    inner: usize,
    d_h: usize,
    out: usize,
) -> MambaBlockParams {
    let mut ssm = SsmParams::random(inner, d_h, 2, DecayMode::Vector, 1.0, rng);
    ssm.d_skip = (0..inner).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    MambaBlockParams {
        w1: Matrix::random_uniform(inner, d, 1.0, rng),
        b1: (0..inner).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
        w2: Matrix::random_uniform(inner, d, 1.0, rng),
        b2: (0..inner).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
        w3: Matrix::random_uniform(out, inner, 1.0, rng),
        ssm,
    }
}

/// Scan against attention form on seeded instances, the forgetting profile
/// recursion, and concat against residual stacking.
pub fn cmd_verify_core(cfg: &RunConfig) -> Result<SuiteRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.core_instances);
    let mut worst: f64 = 0.0;
    let mut profiles_ok = true;
    for instance in 0..cfg.core_instances {
        let decay = if instance % 2 == 0 {
            DecayMode::Vector
        } else {
            DecayMode::Scalar
        };
        let n = rng.gen_range(2..=cfg.n_max);
        let d = rng.gen_range(1..=cfg.d_max);
        let d_h = rng.gen_range(1..=cfg.d_h_max);
        let rank = rng.gen_range(1..=d);
        let mut p = SsmParams::random(d, d_h, rank, decay, 1.0, &mut rng);
        p.d_skip = vec![0.0; d];
        let x = Matrix::random_uniform(d, n, 2.0, &mut rng);
        let (scan, _) = ssm_scan(&x, &p, &HiddenState::for_params(&p))?;
        let attn = ssm_attention_form_injected(&x, &p, cfg.fault_inject)?;
        let rel = rel_discrepancy(&scan, &attn);
        worst = worst.max(rel);
        if decay == DecayMode::Scalar {
            let mut decays = Vec::with_capacity(n);
            for col in x.columns() {
                if let Decay::Scalar(a) = compute_selective_params(&col, &p)?.a_tilde {
                    decays.push(a);
                }
            }
            profiles_ok &= ForgettingProfile::from_decays(&decays).check(&decays);
        }
        rows.push(CoreRow {
            instance,
            decay,
            n,
            d,
            d_h,
            rel_discrepancy: rel,
        });
    }
    let mut stack_worst: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.gen_range(1..=cfg.d_max);
        let (inner, d_h, out) = (
            rng.gen_range(1..=8),
            rng.gen_range(1..=cfg.d_h_max),
            rng.gen_range(1..=4),
        );
        let bp = random_block(&mut rng, d, inner, d_h, out);
        let x = Matrix::random_uniform(d, rng.gen_range(1..=16), 2.0, &mut rng);
        let concat = mamba_stack_forward(&x, std::slice::from_ref(&bp), StackMode::Concat)?;
        let padded = Matrix::zeros(bp.output_width(), x.cols()).vstack(&x)?;
        let residual =
            mamba_stack_forward(&padded, &[concat_as_residual(&bp)?], StackMode::Residual)?;
        stack_worst = stack_worst.max(rel_discrepancy(&concat, &residual));
    }
    let checks = vec![
        check(
            "scan_equals_attention_form",
            worst <= 1e-9,
            format!(
                "{} instances, max relative discrepancy {worst:.3e}",
                cfg.core_instances
            ),
        ),
        check("forgetting_profile_recursion", profiles_ok, String::new()),
        check(
            "concat_equals_residual_on_padded_input",
            stack_worst <= 1e-12,
            format!("max relative discrepancy {stack_worst:.3e}"),
        ),
    ];
    Ok(SuiteRun::new(
        Suite::Core,
        checks,
        vec![artifact("core.csv", &rows)?],
    ))
}

#[derive(Serialize)]
struct GadgetRow {
    gadget: &'static str,
    m: f64,
    eps: f64,
    lambda: f64,
    samples: usize,
    sup_error: f64,
    error_bound: f64,
}

/// Multiplier grid and identities, ReLU-MLP emulation, selection and the
/// comparison indicators.
pub fn cmd_verify_gadgets(cfg: &RunConfig) -> Result<SuiteRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for &m in &cfg.multiplier_m {
        for &eps in &cfg.eps_grid {
            let g = build_multiplier(m, eps)?;
            let lambda = g.descriptor.budget.as_ref().map_or(0.0, |b| b.lambda);
            let want_lambda = (2.0 * m + 1.0).max(216.0 * m.powi(3) / (2.0 * eps));
            let grid: Vec<f64> = (0..=100).map(|k| -m + 2.0 * m * k as f64 / 100.0).collect();
            let mut sup: f64 = 0.0;
            let mut identity: f64 = 0.0;
            for &a in &grid {
                for &b in &grid {
                    let v = g.eval(&[a, b])?[0];
                    sup = sup.max((v - a * b).abs());
                    let swapped = g.eval(&[b, a])?[0];
                    let negated = g.eval(&[-a, b])?[0];
                    identity = identity.max((v - swapped).abs()).max((v + negated).abs());
                    if a == 0.0 {
                        identity = identity.max(v.abs());
                    }
                }
            }
            checks.push(check(
                &format!("multiplier_m{m}_eps{eps}"),
                sup <= eps
                    && identity <= 1e-12
                    && lambda == want_lambda
                    && lambda == multiplier_lambda(m, eps),
                format!("sup error {sup:.3e}, identity residual {identity:.1e}, lambda {lambda}"),
            ));
            rows.push(GadgetRow {
                gadget: "multiplier",
                m,
                eps,
                lambda,
                samples: grid.len() * grid.len(),
                sup_error: sup,
                error_bound: g.descriptor.error_bound,
            });
        }
    }
    let m = cfg.relu_m;
    for &eps in &cfg.eps_grid {
        let mut sup: f64 = 0.0;
        let mut lambdas_ok = true;
        let mut lambda_max: f64 = 0.0;
        for _ in 0..cfg.relu_targets {
            let (d1, hidden, d2) = (
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
            );
            let w2 = Matrix::random_uniform(hidden, d1, m, &mut rng);
            let w3 = Matrix::random_uniform(d2, hidden, m, &mut rng);
            let g = emulate_relu_mlp(&w2, &w3, eps, m)?;
            let lambda = g.descriptor.budget.as_ref().map_or(0.0, |b| b.lambda);
            lambdas_ok &= lambda == relu_lambda(m, hidden, eps);
            lambda_max = lambda_max.max(lambda);
            for k in 0..cfg.relu_inputs {
                let r = if k % 2 == 0 { m } else { 100.0 };
                let x: Vec<f64> = (0..d1).map(|_| rng.gen_range(-r..=r)).collect();
                let hid: Vec<f64> = w2.matvec(&x)?.into_iter().map(|v| v.max(0.0)).collect();
                sup = sup.max(max_abs_diff(&g.eval(&x)?, &w3.matvec(&hid)?));
            }
        }
        checks.push(check(
            &format!("relu_mlp_eps{eps}"),
            sup <= eps && lambdas_ok,
            format!("{} targets, sup error {sup:.3e}", cfg.relu_targets),
        ));
        rows.push(GadgetRow {
            gadget: "relu_mlp",
            m,
            eps,
            lambda: lambda_max,
            samples: cfg.relu_targets * cfg.relu_inputs,
            sup_error: sup,
            error_bound: eps,
        });
    }
    let (d, eps, alpha, sm) = (3, 1e-2, 0.1, 2.0);
    let sel = build_selector(d, eps, alpha, sm)?;
    let mut sup: f64 = 0.0;
    for k in 0..200 {
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-sm..=sm)).collect();
        let y: Vec<f64> = if k % 5 == 0 {
            x.clone()
        } else {
            (0..d).map(|_| rng.gen_range(-sm..=sm)).collect()
        };
        let mag = alpha + rng.gen_range(0.0..3.0);
        for t in [mag, -mag, alpha, -alpha] {
            let input = [x.clone(), y.clone(), vec![t]].concat();
            sup = sup.max(max_abs_diff(&sel.eval(&input)?, &select_target(&x, &y, t)));
        }
    }
    checks.push(check(
        "selector",
        sup <= eps,
        format!("sup error {sup:.3e}"),
    ));
    rows.push(GadgetRow {
        gadget: "selector",
        m: sm,
        eps,
        lambda: sel.descriptor.budget.as_ref().map_or(0.0, |b| b.lambda),
        samples: 800,
        sup_error: sup,
        error_bound: sel.descriptor.error_bound,
    });
    for rel in [Relation::Greater, Relation::Less, Relation::NotEqual] {
        let (im, ieps, ialpha) = (4.0, 1e-2, 0.5);
        let p = build_indicator(rel, im, ieps, ialpha)?;
        let mut sup: f64 = 0.0;
        let mut samples = 0;
        for i in -16..=16 {
            for j in -16..=16 {
                let (a, b) = (i as f64 / 4.0, j as f64 / 4.0);
                if !p.contract_holds(a, b) {
                    continue;
                }
                let want = if rel.holds(a, b) { 1.0 } else { 0.0 };
                sup = sup.max((p.eval(a, b)? - want).abs());
                samples += 1;
            }
        }
        let name = format!("indicator_{rel:?}").to_lowercase();
        checks.push(check(
            &name,
            sup <= ieps,
            format!("{samples} points, sup error {sup:.3e}"),
        ));
        rows.push(GadgetRow {
            gadget: "indicator",
            m: im,
            eps: ieps,
            lambda: 0.0,
            samples,
            sup_error: sup,
            error_bound: ieps,
        });
    }
    Ok(SuiteRun::new(
        Suite::Gadgets,
        checks,
        vec![artifact("gadgets.csv", &rows)?],
    ))
}

#[derive(Serialize)]
struct CopyExactRow {
    n: usize,
    d: usize,
    m: f64,
    max_error: f64,
    tolerance: f64,
    max_state: f64,
    state_cap: f64,
}

#[derive(Serialize)]
struct CertificateRow {
    instance: usize,
    l: usize,
    epsilon: f64,
    delta: f64,
    delta_bound: f64,
    i: usize,
    pos: usize,
    measured_error: f64,
    eq14_bound: f64,
    eq8_satisfied: bool,
    rho_floor: f64,
    assumption1_ok: bool,
}

/// Exact COPY block, the per-position certificate on boundary instances, the
/// score-gap bound and an instance that must be flagged.
pub fn cmd_verify_copy(cfg: &RunConfig) -> Result<SuiteRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();
    let mut exact_rows = Vec::new();
    let m = cfg.copy_m;
    for &n in &cfg.copy_n {
        for &d in &cfg.copy_d {
            let c = build_copy_block(n, d, m)?;
            let xs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-m..=m)).collect())
                .collect();
            let pos: Vec<usize> = (1..=n).map(|i| rng.gen_range(1..=i)).collect();
            let run = c.run(&xs, &pos)?;
            let mut err: f64 = 0.0;
            for (y, p) in run.outputs.iter().zip(&pos) {
                let v: Vec<f64> = xs[p - 1]
                    .iter()
                    .map(|x| x * std::f64::consts::LN_2)
                    .collect();
                err = err.max(max_abs_diff(y, &v));
            }
            exact_rows.push(CopyExactRow {
                n,
                d,
                m,
                max_error: err,
                tolerance: 1e-9 * n as f64 * m * m,
                max_state: run.max_state,
                state_cap: n as f64 * m * m,
            });
        }
    }
    let exact_ok = exact_rows
        .iter()
        .all(|r| r.max_error <= r.tolerance && r.max_state <= r.state_cap);
    checks.push(check(
        "copy_block_exact",
        exact_ok,
        format!("{} (N, d) pairs", exact_rows.len()),
    ));

    let mut rows = Vec::new();
    let (mut generated, mut eq8_instances) = (0usize, 0usize);
    let (mut within_eps, mut bound_holds, mut a1_all, mut delta_ok) = (true, true, true, true);
    let per_l = cfg.copy_instances / cfg.copy_l.len().max(1);
    for &l in &cfg.copy_l {
        let gen = GeneratorConfig {
            l,
            ..GeneratorConfig::default()
        };
        for _ in 0..per_l {
            let inst = generate_boundary_instance(&gen, &mut rng)?;
            let (records, report) = certify(
                &inst.x,
                &inst.params,
                &inst.spec,
                inst.epsilon,
                DeltaForm::Half,
            )?;
            let profile = AttentionProfile::from_instance(&inst.x, &inst.params)?;
            let dbound = delta_upper_bound(inst.epsilon, profile.m, profile.delta_inf_norm, l)?;
            let eq8 = records.iter().all(|r| r.eq8_satisfied);
            a1_all &= report.ok;
            if eq8 {
                eq8_instances += 1;
                within_eps &= records.iter().all(|r| r.measured_error <= inst.epsilon);
                delta_ok &= inst.spec.delta <= dbound;
            }
            if report.ok {
                bound_holds &= records
                    .iter()
                    .all(|r| r.measured_error <= r.eq14_bound + 1e-12);
            }
            for r in records {
                rows.push(CertificateRow {
                    instance: generated,
                    l,
                    epsilon: inst.epsilon,
                    delta: inst.spec.delta,
                    delta_bound: dbound,
                    i: r.i,
                    pos: r.pos,
                    measured_error: r.measured_error,
                    eq14_bound: r.eq14_bound,
                    eq8_satisfied: r.eq8_satisfied,
                    rho_floor: r.rho_floor,
                    assumption1_ok: r.assumption1_ok,
                });
            }
            generated += 1;
        }
    }
    checks.push(check(
        "generated_instances_satisfy_conditions",
        a1_all && eq8_instances == generated,
        format!("{eq8_instances} of {generated} instances meet the score floor"),
    ));
    checks.push(check(
        "measured_error_within_eps",
        within_eps,
        String::new(),
    ));
    checks.push(check(
        "certificate_bounds_measured_error",
        bound_holds,
        String::new(),
    ));
    checks.push(check("delta_within_bound", delta_ok, String::new()));

    let adv = generate_adversarial_instance()?;
    let errs = measure_copy_error(&adv.x, &adv.params, &adv.spec)?;
    let (records, _) = certify(&adv.x, &adv.params, &adv.spec, adv.epsilon, DeltaForm::Half)?;
    checks.push(check(
        "adversarial_instance_flagged",
        errs.iter().any(|e| *e > adv.epsilon) && records.iter().any(|r| !r.eq8_satisfied),
        String::new(),
    ));

    let base = RhoInputs {
        eps: 0.1,
        m: 1.0,
        delta_inf: 1.0,
        alpha_pos: 0.5,
        delta: 0.01,
        a_max_lt: 0.5,
        a_min_gt: 0.9,
        l: 2,
    };
    let mut sweep = Vec::new();
    write_sweep_csv(
        &bound_sweep(&base, &(1..=16).collect::<Vec<_>>())?,
        &mut sweep,
    )?;
    let artifacts = vec![
        artifact("copy_exact.csv", &exact_rows)?,
        artifact("copy_certificates.csv", &rows)?,
        Artifact {
            name: "copy_sweep.csv".into(),
            bytes: sweep,
        },
    ];
    Ok(SuiteRun::new(Suite::Copy, checks, artifacts))
}

fn random_word(rng: &mut ChaCha8Rng, max_len: usize, alphabet: u32) -> Vec<u32> {
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| rng.gen_range(1..=alphabet)).collect()
}

fn dp_instances(kind: FixtureKind, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Vec<DpProblem> {
    let small = cfg.mode == Mode::Gadget;
    (0..cfg.dp_instances)
        .map(|_| match kind {
            FixtureKind::EditDistance => {
                let max = if small { 2 } else { 4 };
                DpProblem::edit_distance(&random_word(rng, max, 2), &random_word(rng, max, 2))
            }
            FixtureKind::Lis => {
                let n = rng.gen_range(1..=if small { 4 } else { 6 });
                let mut s: Vec<u32> = (1..=n).collect();
                s.shuffle(rng);
                DpProblem::lis(&s)
            }
            FixtureKind::WindowedMax => {
                let tape = rng.gen_range(1..=if small { 6 } else { 16 });
                let seeds: Vec<u32> = (0..cfg.window).map(|_| rng.gen_range(0..10)).collect();
                DpProblem::windowed_max(tape, &seeds)
            }
        })
        .collect()
}

#[derive(Serialize)]
struct DpRow {
    fixture: &'static str,
    instance: String,
    answer: Option<i64>,
    oracle: i64,
    matches: bool,
    steps: usize,
    total_ops: u64,
    peak_state: u64,
    error: String,
}

fn audit_run(p: &DpProblem, run: &CotRun) -> Result<()> {
    run.trace.check_well_formed()?;
    let n = p.sizes();
    for (state, deps) in replay_dependencies(p, &run.trace)? {
        if deps != p.fixture.dependencies(&n, &state) {
            return Err(Error::MalformedTrace(format!(
                "dependencies of {state:?} differ from the declared list"
            )));
        }
    }
    if !run.ledger.is_consistent() || instrument(&run.events) != run.ledger {
        return Err(Error::MalformedTrace(
            "ledger disagrees with its events".into(),
        ));
    }
    Ok(())
}

/// Solves seeded fixture instances and compares every answer with the table
/// oracle; also audits each trace and dumps the first one as JSON.
pub fn cmd_run_dp(cfg: &RunConfig) -> Result<SuiteRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    let mut artifacts = Vec::new();
    for id in &cfg.fixtures {
        let kind = parse_fixture(id)?;
        let (mut matched, mut total) = (0, 0);
        for (k, p) in dp_instances(kind, cfg, &mut rng).into_iter().enumerate() {
            let oracle = dp_oracle(&p)?;
            let run = cot_solve(&p, cfg.mode, cfg.eps_budget);
            let audited = run
                .as_ref()
                .map_err(Clone::clone)
                .and_then(|r| audit_run(&p, r));
            let ok = matches!(&run, Ok(r) if r.answer == oracle) && audited.is_ok();
            total += 1;
            matched += ok as usize;
            if let (0, Ok(r)) = (k, &run) {
                artifacts.push(Artifact {
                    name: format!("dp_trace_{}.json", p.fixture.id()),
                    bytes: serde_json::to_vec_pretty(&r.trace)?,
                });
            }
            rows.push(DpRow {
                fixture: p.fixture.id(),
                instance: p
                    .sequences
                    .iter()
                    .map(|s| s.iter().map(u32::to_string).collect::<Vec<_>>().join(" "))
                    .collect::<Vec<_>>()
                    .join(" | "),
                answer: run.as_ref().ok().map(|r| r.answer),
                oracle,
                matches: ok,
                steps: run.as_ref().map_or(0, |r| r.ledger.steps()),
                total_ops: run.as_ref().map_or(0, |r| r.ledger.total_ops),
                peak_state: run.as_ref().map_or(0, |r| r.ledger.peak_state),
                error: audited.err().map(|e| e.to_string()).unwrap_or_default(),
            });
        }
        let name = format!("{}_matches_oracle", id.replace('-', "_"));
        checks.push(check(
            &name,
            matched == total,
            format!("{matched} of {total} instances, mode {:?}", cfg.mode).to_lowercase(),
        ));
    }
    artifacts.insert(0, artifact("dp_answers.csv", &rows)?);
    Ok(SuiteRun::new(Suite::Dp, checks, artifacts))
}

#[derive(Serialize)]
struct AnalyticRow {
    family: &'static str,
    #[serde(rename = "T")]
    t: usize,
    m: usize,
    storage: f64,
    per_step: f64,
    total: f64,
}

#[derive(Serialize)]
struct MeasuredRow {
    model: &'static str,
    #[serde(rename = "T")]
    t: usize,
    steps: usize,
    total_ops: u64,
    peak_state: u64,
    min_state: u64,
}

#[derive(Serialize)]
struct FitRow {
    series: String,
    exponent: f64,
    log_intercept: f64,
    r_squared: f64,
}

/// Ledgers behind the scaling fits. `generic` solves edit distance with one
/// symbol against `ceil(T/2) - 1`; `local` and `unwindowed` solve the same
/// windowed-max instances with and without the window.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingMeasurement {
    pub t_grid: Vec<usize>,
    pub generic: Vec<CotRun>,
    pub local: Vec<CotRun>,
    pub unwindowed: Vec<CotRun>,
    generic_states: Vec<usize>,
}

fn state_total(states: &[usize], runs: &[CotRun]) -> Vec<(f64, f64)> {
    states
        .iter()
        .zip(runs)
        .map(|(s, r)| (*s as f64, r.ledger.total_ops as f64))
        .collect()
}

impl ScalingMeasurement {
    pub fn collect(t_grid: &[usize], window: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seeds: Vec<u32> = (0..window).map(|_| rng.gen_range(0..10)).collect();
        let mut out = ScalingMeasurement {
            t_grid: t_grid.to_vec(),
            generic: Vec::new(),
            local: Vec::new(),
            unwindowed: Vec::new(),
            generic_states: Vec::new(),
        };
        for &t in t_grid {
            let b: Vec<u32> = (0..t.div_ceil(2).saturating_sub(1))
                .map(|_| rng.gen_range(1..=2))
                .collect();
            let ed = DpProblem::edit_distance(&[rng.gen_range(1..=2)], &b);
            out.generic_states.push(ed.state_count());
            out.generic.push(cot_solve(&ed, Mode::Semantic, 0.25)?);
            let wm = DpProblem::windowed_max(t, &seeds);
            out.unwindowed.push(cot_solve(&wm, Mode::Semantic, 0.25)?);
            out.local
                .push(build_local_dp_model(&wm, 0.25)?.solve(Mode::Semantic)?);
        }
        Ok(out)
    }

    pub fn generic_fit(&self) -> Result<ScalingFit> {
        fit_scaling(&state_total(&self.generic_states, &self.generic))
    }

    pub fn local_fit(&self) -> Result<ScalingFit> {
        fit_scaling(&state_total(&self.t_grid, &self.local))
    }

    pub fn unwindowed_fit(&self) -> Result<ScalingFit> {
        fit_scaling(&state_total(&self.t_grid, &self.unwindowed))
    }

    /// Slope of live state against position, pooled over every generic run.
    pub fn generic_state_fit(&self) -> Result<ScalingFit> {
        let pts: Vec<(f64, f64)> = self
            .generic
            .iter()
            .flat_map(|r| {
                r.ledger
                    .per_step
                    .iter()
                    .map(|s| (s.t as f64, s.state_scalars as f64))
            })
            .collect();
        fit_scaling(&pts)
    }

    /// Largest max/min ratio of per-step state within any windowed run.
    pub fn local_state_ratio(&self) -> f64 {
        self.local
            .iter()
            .map(|r| {
                let s = r.ledger.per_step.iter().map(|s| s.state_scalars);
                let hi = s.clone().max().unwrap_or(0) as f64;
                let lo = s.min().unwrap_or(0).max(1) as f64;
                hi / lo
            })
            .fold(1.0, f64::max)
    }

    /// `total(local) / total(unwindowed)` per grid point.
    pub fn ratios(&self) -> Vec<f64> {
        self.local
            .iter()
            .zip(&self.unwindowed)
            .map(|(l, g)| l.ledger.total_ops as f64 / g.ledger.total_ops as f64)
            .collect()
    }

    pub fn runs(&self) -> impl Iterator<Item = &CotRun> {
        self.generic
            .iter()
            .chain(&self.local)
            .chain(&self.unwindowed)
    }
}

fn range_check(name: &str, fit: &Result<ScalingFit>, lo: f64, hi: f64) -> Check {
    match fit {
        Ok(f) => check(
            name,
            (lo..=hi).contains(&f.exponent),
            format!(
                "exponent {:.4} (r2 {:.4}), target [{lo}, {hi}]",
                f.exponent, f.r_squared
            ),
        ),
        Err(e) => check(name, false, e.to_string()),
    }
}

/// Closed-form family rows, measured ledgers and the fitted exponents.
pub fn cmd_cost_report(cfg: &RunConfig) -> Result<SuiteRun> {
    let mut analytic = Vec::new();
    let mut fits = Vec::new();
    for f in Family::ALL {
        let mut pts = Vec::new();
        for &t in &cfg.t_grid {
            let a = analytic_costs(f, t, cfg.window)?;
            pts.push((t as f64, a.total));
            analytic.push(AnalyticRow {
                family: f.id(),
                t,
                m: a.m,
                storage: a.storage,
                per_step: a.per_step,
                total: a.total,
            });
        }
        if let Ok(fit) = fit_scaling(&pts) {
            fits.push(FitRow {
                series: format!("analytic/{}", f.id()),
                exponent: fit.exponent,
                log_intercept: fit.log_intercept,
                r_squared: fit.r_squared,
            });
        }
    }
    let meas = ScalingMeasurement::collect(&cfg.t_grid, cfg.window, cfg.seed)?;
    let mut measured = Vec::new();
    for (model, runs) in [
        ("mamba", &meas.generic),
        ("mamba-local", &meas.local),
        ("mamba-unwindowed", &meas.unwindowed),
    ] {
        for (t, r) in meas.t_grid.iter().zip(runs.iter()) {
            measured.push(MeasuredRow {
                model,
                t: *t,
                steps: r.ledger.steps(),
                total_ops: r.ledger.total_ops,
                peak_state: r.ledger.peak_state,
                min_state: r
                    .ledger
                    .per_step
                    .iter()
                    .map(|s| s.state_scalars)
                    .min()
                    .unwrap_or(0),
            });
        }
    }
    let generic = meas.generic_fit();
    let local = meas.local_fit();
    let state = meas.generic_state_fit();
    let unwindowed = meas.unwindowed_fit();
    for (series, fit) in [
        ("measured/mamba", &generic),
        ("measured/mamba-local", &local),
        ("measured/mamba-unwindowed", &unwindowed),
        ("measured/mamba-state", &state),
    ] {
        if let Ok(f) = fit {
            fits.push(FitRow {
                series: series.into(),
                exponent: f.exponent,
                log_intercept: f.log_intercept,
                r_squared: f.r_squared,
            });
        }
    }
    let ratio = meas.local_state_ratio();
    let ratios = meas.ratios();
    let consistent = meas
        .runs()
        .all(|r| r.ledger.is_consistent() && instrument(&r.events) == r.ledger);
    let checks = vec![
        range_check("generic_total_exponent", &generic, 1.8, 2.2),
        range_check("local_total_exponent", &local, 0.9, 1.1),
        range_check("generic_state_linear_in_t", &state, 0.9, 1.1),
        check(
            "local_state_constant",
            ratio <= 1.05,
            format!("max/min {ratio:.4}"),
        ),
        check(
            "windowed_to_unwindowed_ratio_decreasing",
            ratios.windows(2).all(|w| w[1] < w[0]),
            ratios
                .iter()
                .map(|r| format!("{r:.4}"))
                .collect::<Vec<_>>()
                .join(" "),
        ),
        check("ledgers_match_recount", consistent, String::new()),
    ];
    let artifacts = vec![
        artifact("cost_analytic.csv", &analytic)?,
        artifact("cost_measured.csv", &measured)?,
        artifact("cost_fits.csv", &fits)?,
    ];
    Ok(SuiteRun::new(Suite::Cost, checks, artifacts))
}

pub fn run_suite(suite: Suite, cfg: &RunConfig) -> Result<SuiteRun> {
    match suite {
        Suite::Core => cmd_verify_core(cfg),
        Suite::Gadgets => cmd_verify_gadgets(cfg),
        Suite::Copy => cmd_verify_copy(cfg),
        Suite::Dp => cmd_run_dp(cfg),
        Suite::Cost => cmd_cost_report(cfg),
        Suite::All => Err(Error::Config(
            "suite all is expanded before dispatch".into(),
        )),
    }
}

/// Runs the selected suites on separate threads and assembles the report in
/// suite order.
pub fn run_all(cfg: &RunConfig) -> Result<(Report, Vec<Artifact>)> {
    cfg.validate()?;
    let suites = cfg.suites();
    let results: Vec<Result<SuiteRun>> = std::thread::scope(|s| {
        let handles: Vec<_> = suites
            .iter()
            .map(|&suite| s.spawn(move || run_suite(suite, cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Config("suite thread panicked".into())))
            })
            .collect()
    });
    let mut reports = Vec::new();
    let mut artifacts = Vec::new();
    for r in results {
        let run = r?;
        reports.push(run.report);
        artifacts.extend(run.artifacts);
    }
    let failures = reports.iter().map(SuiteReport::failures).sum();
    let report = Report {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        fault_inject: cfg.fault_inject,
        suites: reports,
        failures,
    };
    Ok((report, artifacts))
}

pub fn write_outputs(dir: &Path, report: &Report, artifacts: &[Artifact]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for a in artifacts {
        std::fs::write(dir.join(&a.name), &a.bytes)?;
    }
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    std::fs::write(dir.join("report.json"), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            n_max: 12,
            core_instances: 20,
            multiplier_m: vec![1.0],
            eps_grid: vec![0.1],
            relu_targets: 2,
            relu_inputs: 20,
            copy_n: vec![8],
            copy_d: vec![2],
            copy_instances: 6,
            dp_instances: 6,
            t_grid: vec![2, 4, 8, 12, 16],
            ..RunConfig::default()
        }
    }

    #[test]
    fn core_default_passes_and_fault_fails() {
        let cfg = small();
        assert_eq!(cmd_verify_core(&cfg).unwrap().report.failures(), 0);
        let bad = RunConfig {
            fault_inject: true,
            ..cfg
        };
        let r = cmd_verify_core(&bad).unwrap().report;
        assert!(!r.checks[0].passed);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = RunConfig {
            suite: Suite::Core,
            ..small()
        };
        let (a, fa) = run_all(&cfg).unwrap();
        let (b, fb) = run_all(&cfg).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        assert_eq!(fa, fb);
        let other = RunConfig { seed: 1, ..cfg };
        assert_ne!(run_all(&other).unwrap().1, fa);
    }

    #[test]
    fn dp_suite_edit_distance() {
        let run = cmd_run_dp(&small()).unwrap();
        assert_eq!(run.report.failures(), 0);
        let csv = String::from_utf8(run.artifacts[0].bytes.clone()).unwrap();
        assert!(csv.starts_with("fixture,instance,answer,oracle,matches"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn copy_csv_has_eq8_column() {
        let run = cmd_verify_copy(&small()).unwrap();
        assert_eq!(run.report.failures(), 0, "{:?}", run.report.checks);
        let certs = run
            .artifacts
            .iter()
            .find(|a| a.name == "copy_certificates.csv")
            .unwrap();
        let text = String::from_utf8(certs.bytes.clone()).unwrap();
        let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        let col = header.iter().position(|h| *h == "eq8_satisfied").unwrap();
        assert!(text
            .lines()
            .skip(1)
            .all(|l| l.split(',').nth(col) == Some("true")));
    }

    #[test]
    fn cost_csv_columns() {
        let run = cmd_cost_report(&small()).unwrap();
        let text = String::from_utf8(run.artifacts[0].bytes.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "family,T,m,storage,per_step,total"
        );
        assert_eq!(text.lines().count(), 1 + 4 * 5);
        let fits = String::from_utf8(run.artifacts[2].bytes.clone()).unwrap();
        assert!(fits.contains("measured/mamba-local"));
    }

    #[test]
    fn unknown_ids_are_rejected() {
        assert!(matches!("sweep".parse::<Suite>(), Err(Error::UnknownId(_))));
        let cfg = RunConfig {
            fixtures: vec!["knapsack".into()],
            ..small()
        };
        assert!(matches!(cmd_run_dp(&cfg), Err(Error::UnknownId(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"suite": "nope"}"#),
            Err(Error::Config(_))
        ));
        assert!(
            RunConfig::from_json(r#"{"fixtures": ["lis", "windowed-max"], "seed": 3}"#).is_ok()
        );
    }
}
