//! Exit criteria, one line each. Runs as a plain binary so the lines are
//! always printed; exits nonzero if any criterion fails.

use std::f64::consts::LN_2;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mamba_workbench::copy_analysis::{
    certify, delta_upper_bound, generate_boundary_instance, AttentionProfile, DeltaForm,
    GeneratorConfig,
};
use mamba_workbench::dp::{cot_solve, dp_oracle, DpProblem, Mode};
use mamba_workbench::gadgets::{build_copy_block, build_multiplier, emulate_relu_mlp};
use mamba_workbench::harness::ScalingMeasurement;
use mamba_workbench::linalg::max_abs_diff;
use mamba_workbench::ssm::{ssm_attention_form, ssm_scan, DecayMode, HiddenState, SsmParams};
use mamba_workbench::{Matrix, Result};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn scan_matches_attention() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let decay = if k % 2 == 0 {
            DecayMode::Vector
        } else {
            DecayMode::Scalar
        };
        let (n, d, d_h) = (
            rng.gen_range(1..=64),
            rng.gen_range(1..=8),
            rng.gen_range(1..=16),
        );
        let rank = rng.gen_range(1..=d);
        let mut p = SsmParams::random(d, d_h, rank, decay, 1.0, &mut rng);
        p.d_skip = vec![0.0; d];
        let x = Matrix::random_uniform(d, n, 2.0, &mut rng);
        let (scan, _) = ssm_scan(&x, &p, &HiddenState::for_params(&p))?;
        let attn = ssm_attention_form(&x, &p)?;
        let scale = scan.max_abs().max(attn.max_abs()).max(f64::MIN_POSITIVE);
        worst = worst.max(max_abs_diff(scan.as_slice(), attn.as_slice()) / scale);
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-9 && t < Duration::from_secs(5),
        format!(
            "1000 instances, max relative discrepancy {worst:.2e}, {:.2}s",
            secs(t)
        ),
    )
}

fn multiplier_grid() -> Result<Outcome> {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for m in [1.0, 3.0] {
        for eps in [1e-1, 1e-2] {
            let g = build_multiplier(m, eps)?;
            let lambda = g.descriptor.budget.as_ref().map_or(f64::NAN, |b| b.lambda);
            let want = (2.0 * m + 1.0).max(216.0 * m * m * m / (2.0 * eps));
            let grid: Vec<f64> = (0..=100).map(|k| -m + 2.0 * m * k as f64 / 100.0).collect();
            let (mut sup, mut ident): (f64, f64) = (0.0, 0.0);
            for &a in &grid {
                for &b in &grid {
                    let v = g.eval(&[a, b])?[0];
                    sup = sup.max((v - a * b).abs());
                    ident = ident
                        .max((v - g.eval(&[b, a])?[0]).abs())
                        .max((v + g.eval(&[-a, b])?[0]).abs());
                }
                ident = ident.max(g.eval(&[0.0, a])?[0].abs());
            }
            ok &= lambda == want && sup <= eps && ident <= 1e-12;
            parts.push(format!("M={m} eps={eps}: err {sup:.1e}"));
        }
    }
    let t = start.elapsed();
    ok &= t < Duration::from_secs(5);
    outcome(ok, format!("{}, {:.2}s", parts.join("; "), secs(t)))
}

fn relu_emulation() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = 2.0;
    let mut ok = true;
    let mut parts = Vec::new();
    for eps in [1e-1, 1e-2] {
        let mut sup: f64 = 0.0;
        for _ in 0..20 {
            let (d1, hidden, d2) = (
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
            );
            let w2 = Matrix::random_uniform(hidden, d1, m, &mut rng);
            let w3 = Matrix::random_uniform(d2, hidden, m, &mut rng);
            let g = emulate_relu_mlp(&w2, &w3, eps, m)?;
            let lambda = g.descriptor.budget.as_ref().map_or(f64::NAN, |b| b.lambda);
            ok &= lambda == (m * hidden as f64 / eps).ceil() + 1.0;
            for k in 0..1000 {
                let r = [1.0, 2.0, 10.0, 100.0][k % 4];
                let mut x: Vec<f64> = (0..d1).map(|_| rng.gen_range(-r..=r)).collect();
                x[0] = if k % 8 == 3 { r } else { x[0] };
                let hid: Vec<f64> = w2.matvec(&x)?.into_iter().map(|v| v.max(0.0)).collect();
                sup = sup.max(max_abs_diff(&g.eval(&x)?, &w3.matvec(&hid)?));
            }
        }
        ok &= sup <= eps;
        parts.push(format!("eps={eps}: err {sup:.2e}"));
    }
    outcome(
        ok,
        format!("20 targets x 1000 inputs per eps; {}", parts.join("; ")),
    )
}

fn copy_exactness() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ok = true;
    let mut worst_ratio: f64 = 0.0;
    for n in [8, 32, 128] {
        for d in [2, 8] {
            for m in [1.0, 2.0] {
                let c = build_copy_block(n, d, m)?;
                let xs: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..d).map(|_| rng.gen_range(-m..=m)).collect())
                    .collect();
                let pos: Vec<usize> = (1..=n).map(|i| rng.gen_range(1..=i)).collect();
                let run = c.run(&xs, &pos)?;
                let tol = 1e-9 * n as f64 * m * m;
                for (y, p) in run.outputs.iter().zip(&pos) {
                    let v: Vec<f64> = xs[p - 1].iter().map(|x| LN_2 * x).collect();
                    let err = max_abs_diff(y, &v);
                    ok &= err <= tol;
                    worst_ratio = worst_ratio.max(err / tol);
                }
                ok &= run.max_state <= n as f64 * m * m;
            }
        }
    }
    outcome(
        ok,
        format!("N in {{8,32,128}}, d in {{2,8}}; worst error/tolerance {worst_ratio:.2e}"),
    )
}

struct CopyStats {
    generated: usize,
    conditions_met: usize,
    within_eps: usize,
    a1: usize,
    bounded: usize,
    delta_ok: usize,
}

fn copy_statistics() -> Result<CopyStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = CopyStats {
        generated: 0,
        conditions_met: 0,
        within_eps: 0,
        a1: 0,
        bounded: 0,
        delta_ok: 0,
    };
    let ls = [2, 5, 11];
    for k in 0..500 {
        let l = ls[k % 3];
        let cfg = GeneratorConfig {
            l,
            ..GeneratorConfig::default()
        };
        let inst = generate_boundary_instance(&cfg, &mut rng)?;
        let (records, report) = certify(
            &inst.x,
            &inst.params,
            &inst.spec,
            inst.epsilon,
            DeltaForm::Half,
        )?;
        let profile = AttentionProfile::from_instance(&inst.x, &inst.params)?;
        s.generated += 1;
        if report.ok && records.iter().all(|r| r.eq8_satisfied) {
            s.conditions_met += 1;
            s.within_eps += records.iter().all(|r| r.measured_error <= inst.epsilon) as usize;
            let bound = delta_upper_bound(inst.epsilon, profile.m, profile.delta_inf_norm, l)?;
            s.delta_ok += (inst.spec.delta <= bound) as usize;
        }
        if report.ok {
            s.a1 += 1;
            s.bounded += records.iter().all(|r| r.measured_error <= r.eq14_bound) as usize;
        }
    }
    Ok(s)
}

fn copy_soundness(s: &CopyStats) -> Result<Outcome> {
    outcome(
        s.conditions_met == s.generated && s.within_eps == s.conditions_met && s.bounded == s.a1,
        format!(
            "{}/{} instances meet the conditions, {}/{} within eps, certificate covers {}/{}",
            s.conditions_met, s.generated, s.within_eps, s.conditions_met, s.bounded, s.a1
        ),
    )
}

fn delta_bound(s: &CopyStats) -> Result<Outcome> {
    outcome(
        s.conditions_met > 0 && s.delta_ok == s.conditions_met,
        format!(
            "L in {{2,5,11}}: {}/{} instances within the bound",
            s.delta_ok, s.conditions_met
        ),
    )
}

fn words(max_len: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|w: &Vec<u32>| {
                (1..=2).map(move |c| {
                    let mut v = w.clone();
                    v.push(c);
                    v
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

fn permutations(n: u32) -> Vec<Vec<u32>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n);
            out.push(q);
        }
    }
    out
}

fn dp_cases(word_len: usize, perm_len: u32) -> Vec<DpProblem> {
    let ws = words(word_len);
    let mut cases: Vec<DpProblem> = ws
        .iter()
        .flat_map(|a| ws.iter().map(move |b| DpProblem::edit_distance(a, b)))
        .collect();
    for n in 1..=perm_len {
        cases.extend(permutations(n).iter().map(|p| DpProblem::lis(p)));
    }
    cases
}

fn dp_with_cot() -> Result<Outcome> {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (mode, word_len, perm_len) in [(Mode::Semantic, 4, 6), (Mode::Gadget, 2, 4)] {
        let cases = dp_cases(word_len, perm_len);
        let mut matched = 0;
        for p in &cases {
            if let Ok(run) = cot_solve(p, mode, 0.25) {
                matched += (run.answer == dp_oracle(p)?) as usize;
            }
        }
        ok &= matched == cases.len();
        parts.push(format!("{mode:?} {matched}/{}", cases.len()).to_lowercase());
    }
    let t = start.elapsed();
    ok &= t < Duration::from_secs(120);
    outcome(ok, format!("{}, {:.1}s", parts.join(", "), secs(t)))
}

fn locality_separation() -> Result<Outcome> {
    let meas = ScalingMeasurement::collect(&[8, 16, 24, 32, 48, 64], 3, 0)?;
    let generic = meas.generic_fit()?.exponent;
    let local = meas.local_fit()?.exponent;
    let ratio = meas.local_state_ratio();
    let ratios = meas.ratios();
    let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
    outcome(
        (1.8..=2.2).contains(&generic) && (0.9..=1.1).contains(&local) && ratio <= 1.05 && decreasing,
        format!("generic exponent {generic:.3}, local exponent {local:.3}, local state max/min {ratio:.3}"),
    )
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Result<Outcome> + 'a>);

fn main() -> ExitCode {
    let stats = copy_statistics();
    let criteria: Vec<Criterion> = vec![
        (
            "scan and attention form agree",
            Box::new(scan_matches_attention),
        ),
        ("multiplier gadget", Box::new(multiplier_grid)),
        ("relu emulation", Box::new(relu_emulation)),
        ("copy block exactness", Box::new(copy_exactness)),
        (
            "approximate copy soundness",
            Box::new(|| {
                stats
                    .as_ref()
                    .map_err(Clone::clone)
                    .and_then(copy_soundness)
            }),
        ),
        (
            "score gap bound",
            Box::new(|| stats.as_ref().map_err(Clone::clone).and_then(delta_bound)),
        ),
        ("dp with chain of thought", Box::new(dp_with_cot)),
        ("locality separation", Box::new(locality_separation)),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let (passed, detail) = match run() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !passed as usize;
        let tag = if passed { "PASS" } else { "FAIL" };
        println!("criterion {}: {tag} {name}: {detail}", k + 1);
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
