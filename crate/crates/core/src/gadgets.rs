//! Exact Mamba-block parameter sets for the building blocks used by the
//! constructions: branch deactivation, COPY, multiplication, ReLU-MLP
//! emulation, linear maps, selection and indicators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, Matrix};
use crate::ssm::{BlockStream, DecayMode, MambaBlockParams, SsmParams, SILU_UNIT_POINT};

/// Which construction a gadget realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LemmaId {
    GateDeactivation,
    SsmDeactivation,
    Copy,
    Multiplication,
    ReluMlp,
    Linear,
    Select,
    Indicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GadgetBudget {
    pub epsilon: f64,
    pub m: f64,
    pub alpha_margin: Option<f64>,
    pub lambda: f64,
    pub lambda_lower_bound: f64,
}

impl GadgetBudget {
    fn new(epsilon: f64, m: f64, alpha_margin: Option<f64>) -> Result<Self> {
        if !(epsilon > 0.0) || !(m > 0.0) {
            return Err(Error::Config(format!(
                "gadget budget needs epsilon > 0 and M > 0, got {epsilon}, {m}"
            )));
        }
        if let Some(a) = alpha_margin {
            if !(a > 0.0) {
                return Err(Error::Config(format!("margin must be positive, got {a}")));
            }
        }
        Ok(GadgetBudget {
            epsilon,
            m,
            alpha_margin,
            lambda: 0.0,
            lambda_lower_bound: 0.0,
        })
    }
}

/// What the report needs to know about a constructed gadget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GadgetDescriptor {
    pub lemma: LemmaId,
    pub budget: Option<GadgetBudget>,
    /// Guaranteed sup-norm error on the gadget's domain.
    pub error_bound: f64,
    /// Largest absolute parameter actually used.
    pub norm_bound: f64,
    /// Polynomial cap on `norm_bound` that the construction promises.
    pub norm_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gadget {
    pub descriptor: GadgetDescriptor,
    pub block: MambaBlockParams,
}

impl Gadget {
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        BlockStream::new(&self.block)?.push(x)
    }
}

fn trivial_ssm(width: usize) -> SsmParams {
    SsmParams::zeros(width, 1, 1)
}

/// Block whose gate branch is the constant 1, so `block(X) = SSM(X)`.
pub fn build_gate_passthrough(ssm: SsmParams) -> Result<MambaBlockParams> {
    ssm.validate()?;
    let d = ssm.width();
    if d == 0 {
        return Err(Error::Config("gate passthrough needs d >= 1".into()));
    }
    Ok(MambaBlockParams {
        w1: Matrix::identity(d),
        b1: vec![0.0; d],
        w2: Matrix::zeros(d, d),
        b2: vec![SILU_UNIT_POINT; d],
        w3: Matrix::identity(d),
        ssm,
    })
}

/// Block whose SSM branch is the constant 1, so
/// `block(x) = W3 · silu(W2 x + b2)`.
pub fn build_ssm_passthrough(w2: Matrix, b2: Vec<f64>, w3: Matrix) -> Result<MambaBlockParams> {
    let inner = w2.rows();
    if b2.len() != inner {
        return Err(Error::dim("ssm passthrough bias", inner, b2.len()));
    }
    if w3.cols() != inner {
        return Err(Error::dim("ssm passthrough W3", inner, w3.cols()));
    }
    let mut ssm = trivial_ssm(inner);
    ssm.d_skip = vec![1.0; inner];
    let bp = MambaBlockParams {
        w1: Matrix::zeros(inner, w2.cols()),
        b1: vec![1.0; inner],
        w2,
        b2,
        w3,
        ssm,
    };
    bp.validate()?;
    Ok(bp)
}

/// `λ = max(2M + 1, 216 M^3 / (2ε))`.
pub fn multiplier_lambda(m: f64, eps: f64) -> f64 {
    (2.0 * m + 1.0).max(216.0 * m.powi(3) / (2.0 * eps))
}

/// Width-4 product block reading `a = x[ia]`, `b = x[ib]` from an input of
/// width `input_width`. Hidden rows are ordered `a+b, -a-b, a-b, -a+b`.
pub fn multiplier_block(
    input_width: usize,
    ia: usize,
    ib: usize,
    lambda: f64,
) -> Result<MambaBlockParams> {
    if ia >= input_width || ib >= input_width || ia == ib {
        return Err(Error::Config(format!(
            "multiplier operands ({ia}, {ib}) invalid for width {input_width}"
        )));
    }
    let inv = 1.0 / lambda;
    let signs = [(1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)];
    let mut w2 = Matrix::zeros(4, input_width);
    for (r, (sa, sb)) in signs.iter().enumerate() {
        w2[(r, ia)] = sa * inv;
        w2[(r, ib)] = sb * inv;
    }
    let c = lambda * lambda / 2.0;
    let w3 = Matrix::from_rows(&[vec![c, c, -c, -c]])?;
    build_ssm_passthrough(w2, vec![0.0; 4], w3)
}

/// Gadget mapping `[a, b]` to approximately `ab` on `[-M, M]^2`.
pub fn build_multiplier(m: f64, eps: f64) -> Result<Gadget> {
    let mut budget = GadgetBudget::new(eps, m, None)?;
    let lambda = multiplier_lambda(m, eps);
    budget.lambda = lambda;
    budget.lambda_lower_bound = multiplier_lambda(m, eps);
    let block = multiplier_block(2, 0, 1, lambda)?;
    Ok(Gadget {
        descriptor: GadgetDescriptor {
            lemma: LemmaId::Multiplication,
            budget: Some(budget),
            error_bound: eps,
            norm_bound: block.max_abs(),
            norm_cap: lambda * lambda / 2.0 + SILU_UNIT_POINT,
        },
        block,
    })
}

/// `λ = ceil(M d / ε) + 1` for a hidden width `d`.
pub fn relu_lambda(m_param: f64, hidden: usize, eps: f64) -> f64 {
    (m_param * hidden as f64 / eps).ceil() + 1.0
}

/// Block computing `W3bar · silu(λ (W2bar x + b2bar)) / λ`, which tracks
/// `W3bar · relu(W2bar x + b2bar)` to within `‖W3bar‖_∞ / λ` for every `x`.
pub fn relu_emulation_block(
    w2bar: &Matrix,
    b2bar: &[f64],
    w3bar: &Matrix,
    lambda: f64,
) -> Result<MambaBlockParams> {
    build_ssm_passthrough(
        w2bar.scaled(lambda),
        b2bar.iter().map(|b| b * lambda).collect(),
        w3bar.scaled(1.0 / lambda),
    )
}

/// Emulates `x ↦ W3bar relu(W2bar x)`; entries of both targets must lie in `[-M, M]`.
pub fn emulate_relu_mlp(w2bar: &Matrix, w3bar: &Matrix, eps: f64, m_param: f64) -> Result<Gadget> {
    emulate_relu_mlp_biased(w2bar, &vec![0.0; w2bar.rows()], w3bar, eps, m_param)
}

/// As [`emulate_relu_mlp`] with an inner bias `b2bar`.
pub fn emulate_relu_mlp_biased(
    w2bar: &Matrix,
    b2bar: &[f64],
    w3bar: &Matrix,
    eps: f64,
    m_param: f64,
) -> Result<Gadget> {
    let mut budget = GadgetBudget::new(eps, m_param, None)?;
    let target_max = w2bar.max_abs().max(w3bar.max_abs()).max(max_abs(b2bar));
    if target_max > m_param {
        return Err(Error::Config(format!(
            "target entry {target_max} exceeds M = {m_param}"
        )));
    }
    let hidden = w2bar.rows();
    let lambda = relu_lambda(m_param, hidden.max(1), eps);
    budget.lambda = lambda;
    budget.lambda_lower_bound = m_param * hidden as f64 / eps;
    let block = relu_emulation_block(w2bar, b2bar, w3bar, lambda)?;
    Ok(Gadget {
        descriptor: GadgetDescriptor {
            lemma: LemmaId::ReluMlp,
            budget: Some(budget),
            error_bound: m_param * hidden as f64 / lambda,
            norm_bound: block.max_abs(),
            norm_cap: (lambda * m_param).max(SILU_UNIT_POINT),
        },
        block,
    })
}

/// Approximates `x ↦ W x` through `W relu(x) - W relu(-x)`.
pub fn build_linear(w: &Matrix, eps: f64, m: f64) -> Result<Gadget> {
    if w.inf_norm() > m {
        return Err(Error::Config(format!(
            "‖W‖∞ = {} exceeds M = {m}",
            w.inf_norm()
        )));
    }
    let d = w.cols();
    let w2bar = Matrix::identity(d).vstack(&Matrix::identity(d).scaled(-1.0))?;
    let w3bar = w.hstack(&w.scaled(-1.0))?;
    let mut g = emulate_relu_mlp(&w2bar, &w3bar, eps, m.max(1.0))?;
    g.descriptor.lemma = LemmaId::Linear;
    if let Some(b) = g.descriptor.budget.as_mut() {
        b.m = m;
    }
    Ok(g)
}

/// Maps `[x, y, t]` (with `x, y ∈ R^d`) to `x` when `t ≥ α` and `y` when `t ≤ -α`.
///
/// Coordinate-wise `x·[t>0] = relu(x + s t) - relu(s t)` and
/// `y·[t<0] = relu(y - s t) - relu(-s t)` with `s = M/α`; both identities are
/// exact on the promised domain, so only the emulation error remains.
pub fn build_selector(d: usize, eps: f64, alpha: f64, m: f64) -> Result<Gadget> {
    let budget = GadgetBudget::new(eps, m, Some(alpha))?;
    let s = m / alpha;
    let width = 2 * d + 1;
    let t = 2 * d;
    let mut w2bar = Matrix::zeros(4 * d, width);
    let mut w3bar = Matrix::zeros(d, 4 * d);
    for k in 0..d {
        let r = 4 * k;
        w2bar[(r, k)] = 1.0;
        w2bar[(r, t)] = s;
        w2bar[(r + 1, t)] = s;
        w2bar[(r + 2, d + k)] = 1.0;
        w2bar[(r + 2, t)] = -s;
        w2bar[(r + 3, t)] = -s;
        w3bar[(k, r)] = 1.0;
        w3bar[(k, r + 1)] = -1.0;
        w3bar[(k, r + 2)] = 1.0;
        w3bar[(k, r + 3)] = -1.0;
    }
    let mut g = emulate_relu_mlp(&w2bar, &w3bar, eps, s.max(1.0))?;
    g.descriptor.lemma = LemmaId::Select;
    if let Some(b) = g.descriptor.budget.as_mut() {
        b.m = budget.m;
        b.alpha_margin = budget.alpha_margin;
    }
    Ok(g)
}

/// Exact value the selector approximates, for `|t| ≥ α`.
pub fn select_target(x: &[f64], y: &[f64], t: f64) -> Vec<f64> {
    if t > 0.0 {
        x.to_vec()
    } else {
        y.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    #[serde(rename = "ne")]
    NotEqual,
    #[serde(rename = "gt")]
    Greater,
    #[serde(rename = "lt")]
    Less,
}

impl Relation {
    pub fn holds(self, a: f64, b: f64) -> bool {
        match self {
            Relation::NotEqual => a != b,
            Relation::Greater => a > b,
            Relation::Less => a < b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    Block(MambaBlockParams),
    /// Elementwise `scale * v + offset`.
    Affine {
        scale: f64,
        offset: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GadgetPipeline {
    pub relation: Relation,
    pub stages: Vec<Stage>,
    pub descriptor: GadgetDescriptor,
}

impl GadgetPipeline {
    pub fn eval(&self, a: f64, b: f64) -> Result<f64> {
        let mut v = vec![a, b];
        for stage in &self.stages {
            v = match stage {
                Stage::Block(bp) => BlockStream::new(bp)?.push(&v)?,
                Stage::Affine { scale, offset } => v.iter().map(|z| scale * z + offset).collect(),
            };
        }
        Ok(v[0])
    }

    /// Whether `(a, b)` lies inside the domain where the error bound is promised.
    pub fn contract_holds(&self, a: f64, b: f64) -> bool {
        let alpha = self
            .descriptor
            .budget
            .as_ref()
            .and_then(|b| b.alpha_margin)
            .unwrap_or(0.0);
        let m = self
            .descriptor
            .budget
            .as_ref()
            .map_or(f64::INFINITY, |b| b.m);
        if a.abs() > m || b.abs() > m {
            return false;
        }
        let gap = (a - b).abs();
        match self.relation {
            Relation::NotEqual => gap >= alpha || a == b,
            _ => gap >= alpha,
        }
    }
}

/// Selector rows for `g(x0, y0, t)` with constants `x0, y0 >= 0` and
/// `t = a - b` (or `b - a` when `flip`), reading `[a, b]`.
fn constant_select_rows(
    x0: f64,
    y0: f64,
    s: f64,
    flip: bool,
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (ta, tb) = if flip { (-s, s) } else { (s, -s) };
    let rows = vec![vec![ta, tb], vec![ta, tb], vec![-ta, -tb], vec![-ta, -tb]];
    let bias = vec![x0, 0.0, y0, 0.0];
    let out = vec![1.0, -1.0, 1.0, -1.0];
    (rows, bias, out)
}

/// Indicator of `a rel b` for `a, b ∈ [-M, M]` separated by at least `α`
/// (or equal, for `≠`).
///
/// `>` and `<` are single width-4 blocks. `≠` is `1 - (1 - I[a>b])(1 - I[a<b])`:
/// a width-8 block for both complements, the width-4 product block, then an
/// affine `1 - p`. Each stage gets `ε/4`.
pub fn build_indicator(relation: Relation, m: f64, eps: f64, alpha: f64) -> Result<GadgetPipeline> {
    let mut budget = GadgetBudget::new(eps, m, Some(alpha))?;
    let s = 1.0 / alpha;
    match relation {
        Relation::Greater | Relation::Less => {
            let (rows, bias, out) = constant_select_rows(1.0, 0.0, s, relation == Relation::Less);
            let w2bar = Matrix::from_rows(&rows)?;
            let w3bar = Matrix::from_rows(&[out])?;
            let g = emulate_relu_mlp_biased(&w2bar, &bias, &w3bar, eps, s.max(1.0))?;
            budget.lambda = g.descriptor.budget.as_ref().map_or(0.0, |b| b.lambda);
            budget.lambda_lower_bound = g
                .descriptor
                .budget
                .as_ref()
                .map_or(0.0, |b| b.lambda_lower_bound);
            Ok(GadgetPipeline {
                relation,
                descriptor: GadgetDescriptor {
                    lemma: LemmaId::Indicator,
                    budget: Some(budget),
                    error_bound: g.descriptor.error_bound,
                    norm_bound: g.descriptor.norm_bound,
                    norm_cap: g.descriptor.norm_cap,
                },
                stages: vec![Stage::Block(g.block)],
            })
        }
        Relation::NotEqual => {
            if eps > 1.0 {
                return Err(Error::Config("indicator budget must be at most 1".into()));
            }
            let stage_eps = eps / 4.0;
            let (r1, b1, o1) = constant_select_rows(0.0, 1.0, s, false);
            let (r2, b2, o2) = constant_select_rows(0.0, 1.0, s, true);
            let w2bar = Matrix::from_rows(&[r1, r2].concat())?;
            let bias = [b1, b2].concat();
            let mut w3bar = Matrix::zeros(2, 8);
            for k in 0..4 {
                w3bar[(0, k)] = o1[k];
                w3bar[(1, 4 + k)] = o2[k];
            }
            let pair = emulate_relu_mlp_biased(&w2bar, &bias, &w3bar, stage_eps, s.max(1.0))?;
            let mult_m = 1.0 + stage_eps;
            let mult_lambda = multiplier_lambda(mult_m, stage_eps);
            let mult = multiplier_block(2, 0, 1, mult_lambda)?;
            let pair_lambda = pair.descriptor.budget.as_ref().map_or(0.0, |b| b.lambda);
            budget.lambda = pair_lambda.max(mult_lambda);
            budget.lambda_lower_bound = pair
                .descriptor
                .budget
                .as_ref()
                .map_or(0.0, |b| b.lambda_lower_bound)
                .max(mult_lambda);
            let e = pair.descriptor.error_bound;
            // |(p+e1)(q+e2) - pq| <= 2e + e^2 for p, q in {0, 1}
            let error_bound = 2.0 * e + e * e + stage_eps;
            let norm_bound = pair.block.max_abs().max(mult.max_abs());
            Ok(GadgetPipeline {
                relation,
                descriptor: GadgetDescriptor {
                    lemma: LemmaId::Indicator,
                    budget: Some(budget),
                    error_bound,
                    norm_bound,
                    norm_cap: pair
                        .descriptor
                        .norm_cap
                        .max(mult_lambda * mult_lambda / 2.0 + SILU_UNIT_POINT),
                },
                stages: vec![
                    Stage::Block(pair.block),
                    Stage::Block(mult),
                    Stage::Affine {
                        scale: -1.0,
                        offset: 1.0,
                    },
                ],
            })
        }
    }
}

/// The COPY block over augmented tokens `[x, e_i, e_pos(i)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyConstruction {
    pub n: usize,
    pub d: usize,
    pub m: f64,
    pub block: MambaBlockParams,
    pub norm_bound: f64,
}

impl CopyConstruction {
    pub fn augmented_width(&self) -> usize {
        self.d + 2 * self.n
    }

    /// Factor turning a block output `v = ln2 · x` back into the payload `x`.
    pub fn payload_scale(&self) -> f64 {
        1.0 / std::f64::consts::LN_2
    }

    /// Nonzero parameter entries; linear in `N` for fixed `d`.
    pub fn nonzero_params(&self) -> usize {
        let b = &self.block;
        b.w1.count_nonzero()
            + b.b1.iter().filter(|v| **v != 0.0).count()
            + b.w2.count_nonzero()
            + b.b2.iter().filter(|v| **v != 0.0).count()
            + b.w3.count_nonzero()
            + b.ssm.w_b.count_nonzero()
            + b.ssm.w_c.count_nonzero()
            + b.ssm.w_delta1.count_nonzero()
            + b.ssm.w_delta2.count_nonzero()
            + b.ssm.a_diag.iter().filter(|v| **v != 0.0).count()
            + b.ssm.d_skip.iter().filter(|v| **v != 0.0).count()
    }

    /// Runs the block over `(x_i, pos(i))` pairs (1-based positions) and
    /// returns the outputs plus the largest hidden-state magnitude seen.
    pub fn run(&self, xs: &[Vec<f64>], pos: &[usize]) -> Result<CopyRun> {
        if xs.len() != pos.len() {
            return Err(Error::dim("copy run", xs.len(), pos.len()));
        }
        if xs.len() > self.n {
            return Err(Error::Input(format!(
                "sequence of length {} exceeds N = {}",
                xs.len(),
                self.n
            )));
        }
        let mut stream = BlockStream::new(&self.block)?;
        let mut outputs = Vec::with_capacity(xs.len());
        let mut max_state: f64 = 0.0;
        for (k, (x, p)) in xs.iter().zip(pos).enumerate() {
            let token = encode_copy_input(x, k + 1, *p, self.n)?;
            outputs.push(stream.push(&token)?);
            max_state = max_state.max(stream.state().h.max_abs());
        }
        Ok(CopyRun { outputs, max_state })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopyRun {
    pub outputs: Vec<Vec<f64>>,
    pub max_state: f64,
}

/// `[x, e_i, e_pos]` with 1-based `i` and `pos`, `1 <= pos <= i <= n`.
pub fn encode_copy_input(x: &[f64], i: usize, pos: usize, n: usize) -> Result<Vec<f64>> {
    if !(1 <= pos && pos <= i && i <= n) {
        return Err(Error::Input(format!(
            "copy needs 1 <= pos <= i <= N, got pos = {pos}, i = {i}, N = {n}"
        )));
    }
    let mut v = Vec::with_capacity(x.len() + 2 * n);
    v.extend_from_slice(x);
    v.resize(x.len() + 2 * n, 0.0);
    v[x.len() + i - 1] = 1.0;
    v[x.len() + n + pos - 1] = 1.0;
    Ok(v)
}

/// COPY block: `A = O`, `W_b` reads `e_i`, `W_c` reads `e_pos`, `Δ = ln2`, and
/// `W3 = [I_d, 0]`, so `y_i = ln2 · x_pos(i)`.
pub fn build_copy_block(n: usize, d: usize, m: f64) -> Result<CopyConstruction> {
    if n == 0 || d == 0 || !(m > 0.0) {
        return Err(Error::Config(format!(
            "copy block needs N, d >= 1 and M > 0, got {n}, {d}, {m}"
        )));
    }
    let width = d + 2 * n;
    let w_b = Matrix::from_fn(n, width, |r, c| if c == d + r { 1.0 } else { 0.0 });
    let w_c = Matrix::from_fn(n, width, |r, c| if c == d + n + r { 1.0 } else { 0.0 });
    let ssm = SsmParams {
        a_diag: vec![0.0; n],
        w_b,
        w_c,
        w_delta1: Matrix::zeros(1, width),
        w_delta2: Matrix::zeros(width, 1),
        d_skip: vec![0.0; width],
        decay: DecayMode::Vector,
    };
    let mut block = build_gate_passthrough(ssm)?;
    block.w3 = Matrix::from_fn(d, width, |r, c| if r == c { 1.0 } else { 0.0 });
    block.validate()?;
    let norm_bound = block.max_abs().max(m.max(1.0) * std::f64::consts::LN_2);
    Ok(CopyConstruction {
        n,
        d,
        m,
        block,
        norm_bound,
    })
}
