//! Approximate COPY with a constant-size selective SSM: matching sets, the
//! score conditions, the closed-form sufficient bounds and the per-position
//! certificate, plus instance generators that sit on the bound.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs_diff, Matrix};
use crate::ssm::{
    compute_selective_params, softplus_inv, ssm_attention_form, Decay, DecayMode,
    ForgettingProfile, SsmParams,
};

/// Which coefficient multiplies the geometric term of the score floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeltaForm {
    /// `δ/2`, the form obtained by the derivation.
    #[default]
    Half,
    /// `δ`, a looser variant kept for comparison.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopySpec {
    pub l: usize,
    pub delta: f64,
    pub rho: f64,
    /// `pos_map[i - 1] = pos(i)`, 1-based.
    pub pos_map: Vec<usize>,
}

impl CopySpec {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return Err(Error::Config("window length must be >= 1".into()));
        }
        if !(self.delta >= 0.0 && self.rho >= self.delta) {
            return Err(Error::Config(format!(
                "need rho >= delta >= 0, got rho = {}, delta = {}",
                self.rho, self.delta
            )));
        }
        for (k, &p) in self.pos_map.iter().enumerate() {
            let i = k + 1;
            if p > i || p + self.l < i + 1 || p == 0 {
                return Err(Error::Config(format!(
                    "pos({i}) = {p} outside window [{}, {i}]",
                    (i + 1).saturating_sub(self.l).max(1)
                )));
            }
        }
        Ok(())
    }

    pub fn pos(&self, i: usize) -> usize {
        self.pos_map[i - 1]
    }

    fn window_start(&self, i: usize) -> usize {
        (i + 1).saturating_sub(self.l).max(1)
    }
}

/// Scores `c_i^T b_j` (`scores[i-1][j-1]`, `j <= i`) with decays and
/// forgetting profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub scores: Vec<Vec<f64>>,
    /// `decays[k-1] = a_k`.
    pub decays: Vec<f64>,
    /// `alphas[i-1]` is the profile seen from position `i`.
    pub alphas: Vec<ForgettingProfile>,
    pub delta_inf_norm: f64,
    pub m: f64,
}

impl AttentionProfile {
    pub fn from_parts(
        scores: Vec<Vec<f64>>,
        decays: Vec<f64>,
        delta_inf_norm: f64,
        m: f64,
    ) -> Result<Self> {
        let n = decays.len();
        if scores.len() != n || scores.iter().enumerate().any(|(k, row)| row.len() != k + 1) {
            return Err(Error::Input(
                "scores must be lower-triangular with one row per decay".into(),
            ));
        }
        if scores.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::Input("non-finite attention score".into()));
        }
        if decays.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Input("decays must lie in [0, 1]".into()));
        }
        let alphas = (1..=n)
            .map(|i| ForgettingProfile::from_decays(&decays[..i]))
            .collect();
        Ok(AttentionProfile {
            scores,
            decays,
            alphas,
            delta_inf_norm,
            m,
        })
    }

    /// Profile of a scalar-decay SSM run over the columns of `x`.
    pub fn from_instance(x: &Matrix, p: &SsmParams) -> Result<Self> {
        if p.decay != DecayMode::Scalar {
            return Err(Error::Input(
                "attention profile needs scalar decay mode".into(),
            ));
        }
        let steps = x
            .columns()
            .iter()
            .map(|c| compute_selective_params(c, p))
            .collect::<Result<Vec<_>>>()?;
        let mut decays = Vec::with_capacity(steps.len());
        let mut delta_inf: f64 = 0.0;
        for s in &steps {
            match s.a_tilde {
                Decay::Scalar(a) => decays.push(a),
                Decay::Matrix(_) => unreachable!("scalar mode yields scalar decays"),
            }
            delta_inf = s.delta.iter().fold(delta_inf, |m, d| m.max(d.abs()));
        }
        let scores = (0..steps.len())
            .map(|i| {
                (0..=i)
                    .map(|j| steps[i].c.iter().zip(&steps[j].b).map(|(c, b)| c * b).sum())
                    .collect()
            })
            .collect();
        AttentionProfile::from_parts(scores, decays, delta_inf, x.max_abs())
    }

    pub fn len(&self) -> usize {
        self.decays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decays.is_empty()
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i - 1][j - 1]
    }

    pub fn alpha(&self, i: usize, j: usize) -> f64 {
        self.alphas[i - 1].alphas[j - 1]
    }

    /// `max a_k` over `k ∈ 2..=pos`; these are the decays that shrink the
    /// records before `pos`. Zero when `pos = 1`.
    pub fn a_max_before(&self, pos: usize) -> f64 {
        (2..=pos).map(|k| self.decays[k - 1]).fold(0.0, f64::max)
    }

    /// `min a_k` over `k ∈ pos+1..=i`; one when `pos = i`.
    pub fn a_min_after(&self, pos: usize, i: usize) -> f64 {
        (pos + 1..=i)
            .map(|k| self.decays[k - 1])
            .fold(1.0, f64::min)
    }
}

/// `S_i = { j ∈ [i-L+1, i] : |c_i^T b_j| >= δ }`, 1-based.
pub fn matching_set(profile: &AttentionProfile, spec: &CopySpec, i: usize) -> Vec<usize> {
    (spec.window_start(i)..=i)
        .filter(|&j| profile.score(i, j).abs() >= spec.delta)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Score at `pos(i)` below ρ.
    TargetBelowRho,
    /// A position outside `S_i` with `|score| >= δ`.
    OutsideAboveDelta,
    /// `Σ_{j∈S_i} α_j |score_j| >= 1`.
    MassNotBelowOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub i: usize,
    pub j: usize,
    pub value: f64,
    pub condition: Condition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assumption1Report {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl Assumption1Report {
    pub fn ok_at(&self, i: usize) -> bool {
        self.violations.iter().all(|v| v.i != i)
    }
}

pub fn check_assumption1(profile: &AttentionProfile, spec: &CopySpec) -> Assumption1Report {
    let mut violations = Vec::new();
    for i in 1..=profile.len().min(spec.pos_map.len()) {
        let pos = spec.pos(i);
        let target = profile.score(i, pos);
        if !(target >= spec.rho) {
            violations.push(Violation {
                i,
                j: pos,
                value: target,
                condition: Condition::TargetBelowRho,
            });
        }
        let set = matching_set(profile, spec, i);
        for j in 1..=i {
            let s = profile.score(i, j);
            if !set.contains(&j) && !(s.abs() < spec.delta) {
                violations.push(Violation {
                    i,
                    j,
                    value: s,
                    condition: Condition::OutsideAboveDelta,
                });
            }
        }
        let mass: f64 = set
            .iter()
            .map(|&j| profile.alpha(i, j) * profile.score(i, j).abs())
            .sum();
        if !(mass < 1.0) {
            violations.push(Violation {
                i,
                j: 0,
                value: mass,
                condition: Condition::MassNotBelowOne,
            });
        }
    }
    Assumption1Report {
        ok: violations.is_empty(),
        violations,
    }
}

/// Parameters of the score floor for one position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoInputs {
    pub eps: f64,
    pub m: f64,
    pub delta_inf: f64,
    pub alpha_pos: f64,
    pub delta: f64,
    pub a_max_lt: f64,
    pub a_min_gt: f64,
    pub l: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoBound {
    pub value: f64,
    /// Set when `a_min_gt = 1` and the geometric term took its limit `L - 1`.
    pub limit_used: bool,
}

/// `a/(1-a) + ((1/b)^{L-1} - 1)/(1-b)` with the `b -> 1` limit `L - 1`.
pub fn geometric_factor(a_max_lt: f64, a_min_gt: f64, l: usize) -> (f64, bool) {
    let first = a_max_lt / (1.0 - a_max_lt);
    let k = l.saturating_sub(1) as i32;
    if a_min_gt == 1.0 {
        (first + k as f64, true)
    } else {
        (
            first + ((1.0 / a_min_gt).powi(k) - 1.0) / (1.0 - a_min_gt),
            false,
        )
    }
}

/// `(1 - ε/(2M‖Δ‖∞))/α_pos + c·δ·[a_max/(1-a_max) + ((1/a_min)^{L-1} - 1)/(1-a_min)]`
/// with `c = 1/2` or `1` depending on `form`.
pub fn rho_lower_bound(p: &RhoInputs, form: DeltaForm) -> Result<RhoBound> {
    if !(p.eps > 0.0 && p.m > 0.0 && p.delta_inf > 0.0) {
        return Err(Error::Domain("eps, M and ‖Δ‖∞ must be positive".into()));
    }
    if !(0.0..1.0).contains(&p.a_max_lt) {
        return Err(Error::Domain(format!(
            "a_max_lt = {} not in [0, 1)",
            p.a_max_lt
        )));
    }
    if !(p.a_min_gt > 0.0 && p.a_min_gt <= 1.0) {
        return Err(Error::Domain(format!(
            "a_min_gt = {} not in (0, 1]",
            p.a_min_gt
        )));
    }
    if !(p.alpha_pos > 0.0 && p.alpha_pos <= 1.0) {
        return Err(Error::Domain(format!(
            "alpha_pos = {} not in (0, 1]",
            p.alpha_pos
        )));
    }
    if p.l == 0 {
        return Err(Error::Domain("L must be >= 1".into()));
    }
    let (g, limit_used) = geometric_factor(p.a_max_lt, p.a_min_gt, p.l);
    let c = match form {
        DeltaForm::Half => 0.5,
        DeltaForm::Full => 1.0,
    };
    let value = (1.0 - p.eps / (2.0 * p.m * p.delta_inf)) / p.alpha_pos + c * p.delta * g;
    Ok(RhoBound { value, limit_used })
}

/// `ε / ((L-1) M ‖Δ‖∞)`.
pub fn delta_upper_bound(eps: f64, m: f64, delta_inf: f64, l: usize) -> Result<f64> {
    if l < 2 {
        return Err(Error::Domain(format!("delta bound needs L >= 2, got {l}")));
    }
    Ok(eps / ((l - 1) as f64 * m * delta_inf))
}

/// `M‖Δ‖∞ (Σ_{j≠pos} α_j |c_i^T b_j| + 1 - α_pos c_i^T b_pos)`.
pub fn copy_error_upper_bound(profile: &AttentionProfile, spec: &CopySpec, i: usize) -> f64 {
    let pos = spec.pos(i);
    let off: f64 = (1..=i)
        .filter(|&j| j != pos)
        .map(|j| profile.alpha(i, j) * profile.score(i, j).abs())
        .sum();
    profile.m * profile.delta_inf_norm * (off + 1.0 - profile.alpha(i, pos) * profile.score(i, pos))
}

/// Score floor for position `i` read off the instance.
pub fn rho_inputs_at(profile: &AttentionProfile, spec: &CopySpec, i: usize, eps: f64) -> RhoInputs {
    let pos = spec.pos(i);
    RhoInputs {
        eps,
        m: profile.m,
        delta_inf: profile.delta_inf_norm,
        alpha_pos: profile.alpha(i, pos),
        delta: spec.delta,
        a_max_lt: profile.a_max_before(pos),
        a_min_gt: profile.a_min_after(pos, i),
        l: spec.l,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    pub i: usize,
    pub pos: usize,
    pub measured_error: f64,
    pub eq14_bound: f64,
    pub eq8_satisfied: bool,
    pub rho_floor: f64,
    pub assumption1_ok: bool,
}

/// Runs the attention form and returns `‖y_i - Δ_pos ∘ x_pos‖∞` for every `i`.
pub fn measure_copy_error(x: &Matrix, params: &SsmParams, spec: &CopySpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.pos_map.len() != x.cols() {
        return Err(Error::dim(
            "measure_copy_error pos map",
            x.cols(),
            spec.pos_map.len(),
        ));
    }
    let y = ssm_attention_form(x, params)?;
    let mut out = Vec::with_capacity(x.cols());
    for i in 1..=x.cols() {
        let pos = spec.pos(i);
        let xp = x.column(pos - 1);
        let v = compute_selective_params(&xp, params)?.record(&xp);
        out.push(max_abs_diff(&y.column(i - 1), &v));
    }
    Ok(out)
}

/// Per-position certificate records for an instance and target `ε`.
pub fn certify(
    x: &Matrix,
    params: &SsmParams,
    spec: &CopySpec,
    eps: f64,
    form: DeltaForm,
) -> Result<(Vec<CertificateRecord>, Assumption1Report)> {
    let measured = measure_copy_error(x, params, spec)?;
    let profile = AttentionProfile::from_instance(x, params)?;
    let report = check_assumption1(&profile, spec);
    let mut records = Vec::with_capacity(measured.len());
    for (k, err) in measured.into_iter().enumerate() {
        let i = k + 1;
        let floor = rho_lower_bound(&rho_inputs_at(&profile, spec, i, eps), form)?.value;
        let a1 = report.ok_at(i);
        records.push(CertificateRecord {
            i,
            pos: spec.pos(i),
            measured_error: err,
            eq14_bound: copy_error_upper_bound(&profile, spec, i),
            eq8_satisfied: a1 && spec.rho >= floor,
            rho_floor: floor,
            assumption1_ok: a1,
        });
    }
    Ok((records, report))
}

/// Settings for [`generate_boundary_instance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub l: usize,
    pub payload: usize,
    pub a_range: (f64, f64),
    pub eta_range: (f64, f64),
    pub delta_range: (f64, f64),
    /// Largest number of extra in-window positions whose score clears δ.
    pub max_distractors: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n: 24,
            l: 5,
            payload: 2,
            a_range: (0.7, 0.99),
            eta_range: (0.05, 0.3),
            delta_range: (1e-3, 1e-2),
            max_distractors: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyInstance {
    pub x: Matrix,
    pub params: SsmParams,
    pub spec: CopySpec,
    pub epsilon: f64,
}

/// Builds the token matrix and SSM that realize prescribed scores and decays.
///
/// Token layout: `[payload, e_i, q_i, ctl]` with `b_i = e_i`, `c_i = q_i`, so
/// `c_i^T b_j = q_i[j]`; `Δ_i = softplus(ctl_i)` on every channel and
/// `a_i = exp(-Δ_i)`.
pub fn realize_instance(
    payload: &[Vec<f64>],
    scores: &[Vec<f64>],
    decays: &[f64],
) -> Result<(Matrix, SsmParams)> {
    let n = decays.len();
    if payload.len() != n || scores.len() != n {
        return Err(Error::dim(
            "realize_instance",
            n,
            payload.len().min(scores.len()),
        ));
    }
    let p = payload.first().map_or(0, Vec::len);
    let width = p + 2 * n + 1;
    let ctl = width - 1;
    let mut x = Matrix::zeros(width, n);
    for i in 0..n {
        if !(decays[i] > 0.0 && decays[i] < 1.0) {
            return Err(Error::Input(format!("decay {} not in (0, 1)", decays[i])));
        }
        for k in 0..p {
            x[(k, i)] = payload[i][k];
        }
        x[(p + i, i)] = 1.0;
        for (j, s) in scores[i].iter().enumerate() {
            x[(p + n + j, i)] = *s;
        }
        x[(ctl, i)] = softplus_inv(-decays[i].ln());
    }
    let params = SsmParams {
        a_diag: vec![-1.0; n],
        w_b: Matrix::from_fn(n, width, |r, c| if c == p + r { 1.0 } else { 0.0 }),
        w_c: Matrix::from_fn(n, width, |r, c| if c == p + n + r { 1.0 } else { 0.0 }),
        w_delta1: Matrix::from_fn(1, width, |_, c| if c == ctl { 1.0 } else { 0.0 }),
        w_delta2: Matrix::from_fn(width, 1, |_, _| 1.0),
        d_skip: vec![0.0; width],
        decay: DecayMode::Scalar,
    };
    params.validate()?;
    Ok((x, params))
}

/// Random instance satisfying the score conditions, with `ε` chosen so the
/// score floor holds with equality at the tightest position.
pub fn generate_boundary_instance<R: Rng>(
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Result<CopyInstance> {
    let (n, l) = (cfg.n, cfg.l);
    if n == 0 || l == 0 {
        return Err(Error::Config("generator needs N, L >= 1".into()));
    }
    let delta = rng.gen_range(cfg.delta_range.0..=cfg.delta_range.1);
    let decays: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(cfg.a_range.0..=cfg.a_range.1))
        .collect();
    let payload: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..cfg.payload)
                .map(|_| rng.gen_range(-1.0..=1.0))
                .collect()
        })
        .collect();
    let mut scores = vec![Vec::new(); n];
    let mut pos_map = Vec::with_capacity(n);
    for i in 1..=n {
        let alphas = ForgettingProfile::from_decays(&decays[..i]).alphas;
        let start = (i + 1).saturating_sub(l).max(1);
        let pos = rng.gen_range(start..=i);
        let below = |rng: &mut R| rng.gen_range(-0.999..=0.999) * delta;
        let mut row: Vec<f64> = (1..=i).map(|_| below(rng)).collect();
        let mut others: Vec<usize> = (start..=i).filter(|&j| j != pos).collect();
        others.shuffle(rng);
        let k = rng.gen_range(0..=cfg.max_distractors.min(others.len()));
        for &j in &others[..k] {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            row[j - 1] = sign * delta * rng.gen_range(1.0..=2.0);
        }
        let eta = rng.gen_range(cfg.eta_range.0..=cfg.eta_range.1);
        let mass: f64 = others[..k]
            .iter()
            .map(|&j| alphas[j - 1] * row[j - 1].abs())
            .sum();
        row[pos - 1] = (1.0 - eta - mass) / alphas[pos - 1];
        scores[i - 1] = row;
        pos_map.push(pos);
    }
    let (x, params) = realize_instance(&payload, &scores, &decays)?;
    let profile = AttentionProfile::from_instance(&x, &params)?;
    let rho = (1..=n)
        .map(|i| profile.score(i, pos_map[i - 1]))
        .fold(f64::INFINITY, f64::min);
    let spec = CopySpec {
        l,
        delta,
        rho,
        pos_map,
    };
    spec.validate()?;
    let scale = 2.0 * profile.m * profile.delta_inf_norm;
    let mut eps: f64 = 0.0;
    for i in 1..=n {
        let pos = spec.pos(i);
        let (g, _) = geometric_factor(profile.a_max_before(pos), profile.a_min_after(pos, i), l);
        let alpha = profile.alpha(i, pos);
        eps = eps.max(scale * (1.0 - alpha * (rho - delta * g / 2.0)));
    }
    Ok(CopyInstance {
        x,
        params,
        spec,
        epsilon: eps * (1.0 + 1e-12),
    })
}

/// A two-token instance whose target score is far below the floor, so the
/// measured error exceeds the small `ε` it is paired with.
pub fn generate_adversarial_instance() -> Result<CopyInstance> {
    let payload = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
    let scores = vec![vec![1.0], vec![0.3, 0.0]];
    let decays = vec![0.9, 0.9];
    let (x, params) = realize_instance(&payload, &scores, &decays)?;
    Ok(CopyInstance {
        x,
        params,
        spec: CopySpec {
            l: 2,
            delta: 0.0,
            rho: 0.3,
            pos_map: vec![1, 1],
        },
        epsilon: 0.01,
    })
}

/// One row of the bound-versus-window sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub l: usize,
    pub rho_half: f64,
    pub rho_full: f64,
    pub delta_bound: Option<f64>,
}

pub fn bound_sweep(base: &RhoInputs, ls: &[usize]) -> Result<Vec<SweepRow>> {
    ls.iter()
        .map(|&l| {
            let p = RhoInputs { l, ..*base };
            Ok(SweepRow {
                l,
                rho_half: rho_lower_bound(&p, DeltaForm::Half)?.value,
                rho_full: rho_lower_bound(&p, DeltaForm::Full)?.value,
                delta_bound: delta_upper_bound(p.eps, p.m, p.delta_inf, l).ok(),
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
