//! Simplified Mamba layer: the selective SSM in recurrent and attention-summation
//! form, the two-branch gated block and layer stacking.
//!
//! Conventions: a sequence is a `d x N` [`Matrix`] whose columns are tokens. The
//! hidden state is `d_h x d`; every input channel runs its own `d_h`-dimensional
//! recurrence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{hadamard, Matrix};

/// The point `k` with `silu(k) == 1` (to within 2.3e-16).
pub const SILU_UNIT_POINT: f64 = 1.278_464_542_761_073_7;

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// How the per-step decay `exp(Δ a)` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// One decay per (state row, channel): `exp(Δ_i[j] * a[h])`.
    #[default]
    Vector,
    /// A single decay per step, `a_i = exp(mean(Δ_i) * a)`; needs a constant `a_diag`.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmParams {
    /// Diagonal of `A`; every entry must be `<= 0`.
    pub a_diag: Vec<f64>,
    pub w_b: Matrix,
    pub w_c: Matrix,
    pub w_delta1: Matrix,
    pub w_delta2: Matrix,
    pub d_skip: Vec<f64>,
    #[serde(default)]
    pub decay: DecayMode,
}

impl SsmParams {
    /// All-zero parameters of the given widths (`A = O`, no skip).
    pub fn zeros(d: usize, d_h: usize, rank: usize) -> Self {
        SsmParams {
            a_diag: vec![0.0; d_h],
            w_b: Matrix::zeros(d_h, d),
            w_c: Matrix::zeros(d_h, d),
            w_delta1: Matrix::zeros(rank, d),
            w_delta2: Matrix::zeros(d, rank),
            d_skip: vec![0.0; d],
            decay: DecayMode::Vector,
        }
    }

    /// Seeded random parameters with `a_diag` in `[-1, 0]` and weights in `[-scale, scale]`.
    pub fn random<R: Rng>(
        d: usize,
        d_h: usize,
        rank: usize,
        decay: DecayMode,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let a_diag = match decay {
            DecayMode::Vector => (0..d_h).map(|_| -rng.gen_range(0.0..=1.0)).collect(),
            DecayMode::Scalar => vec![-rng.gen_range(0.0..=1.0); d_h],
        };
        SsmParams {
            a_diag,
            w_b: Matrix::random_uniform(d_h, d, scale, rng),
            w_c: Matrix::random_uniform(d_h, d, scale, rng),
            w_delta1: Matrix::random_uniform(rank, d, scale, rng),
            w_delta2: Matrix::random_uniform(d, rank, scale, rng),
            d_skip: (0..d).map(|_| rng.gen_range(-scale..=scale)).collect(),
            decay,
        }
    }

    pub fn width(&self) -> usize {
        self.d_skip.len()
    }

    pub fn state_width(&self) -> usize {
        self.a_diag.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        let d_h = self.state_width();
        let r = self.w_delta1.rows();
        let checks = [
            ("w_b", self.w_b.shape(), (d_h, d)),
            ("w_c", self.w_c.shape(), (d_h, d)),
            ("w_delta1", self.w_delta1.shape(), (r, d)),
            ("w_delta2", self.w_delta2.shape(), (d, r)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Config(format!(
                    "{name} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        if let Some(a) = self.a_diag.iter().find(|a| !(**a <= 0.0)) {
            return Err(Error::Config(format!("a_diag entry {a} is not <= 0")));
        }
        if self.decay == DecayMode::Scalar {
            if let Some(first) = self.a_diag.first() {
                if self.a_diag.iter().any(|a| a != first) {
                    return Err(Error::Config(
                        "scalar decay mode needs a constant a_diag".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Largest absolute parameter value.
    pub fn max_abs(&self) -> f64 {
        [
            crate::linalg::max_abs(&self.a_diag),
            self.w_b.max_abs(),
            self.w_c.max_abs(),
            self.w_delta1.max_abs(),
            self.w_delta2.max_abs(),
            crate::linalg::max_abs(&self.d_skip),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Per-step decay factors.
#[derive(Debug, Clone, PartialEq)]
pub enum Decay {
    Scalar(f64),
    /// `d_h x d` entries `exp(Δ[j] a[h])`.
    Matrix(Matrix),
}

impl Decay {
    pub fn at(&self, h: usize, j: usize) -> f64 {
        match self {
            Decay::Scalar(a) => *a,
            Decay::Matrix(m) => m[(h, j)],
        }
    }

    pub fn in_unit_interval(&self) -> bool {
        let ok = |a: f64| (0.0..=1.0).contains(&a);
        match self {
            Decay::Scalar(a) => ok(*a),
            Decay::Matrix(m) => m.as_slice().iter().all(|a| ok(*a)),
        }
    }
}

/// Input-dependent quantities of one scan step.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveStep {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: Vec<f64>,
    pub a_tilde: Decay,
}

impl SelectiveStep {
    /// The record `Δ ∘ x` written into the state at this step.
    pub fn record(&self, x: &[f64]) -> Vec<f64> {
        hadamard(&self.delta, x)
    }
}

pub fn compute_selective_params(x: &[f64], p: &SsmParams) -> Result<SelectiveStep> {
    if x.len() != p.width() {
        return Err(Error::dim("compute_selective_params", p.width(), x.len()));
    }
    let b = p.w_b.matvec(x)?;
    let c = p.w_c.matvec(x)?;
    let low = p.w_delta1.matvec(x)?;
    let delta: Vec<f64> = p.w_delta2.matvec(&low)?.into_iter().map(softplus).collect();
    let a_tilde = match p.decay {
        DecayMode::Scalar => {
            let a = p.a_diag.first().copied().unwrap_or(0.0);
            let mean = if delta.is_empty() {
                0.0
            } else {
                delta.iter().sum::<f64>() / delta.len() as f64
            };
            Decay::Scalar((mean * a).exp())
        }
        DecayMode::Vector => Decay::Matrix(Matrix::from_fn(p.state_width(), p.width(), |h, j| {
            (delta[j] * p.a_diag[h]).exp()
        })),
    };
    Ok(SelectiveStep {
        b,
        c,
        delta,
        a_tilde,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub h: Matrix,
}

impl HiddenState {
    pub fn zeros(d_h: usize, d: usize) -> Self {
        HiddenState {
            h: Matrix::zeros(d_h, d),
        }
    }

    pub fn for_params(p: &SsmParams) -> Self {
        HiddenState::zeros(p.state_width(), p.width())
    }
}

/// Advances the recurrence by one token and returns `y_i`.
pub fn ssm_step(x: &[f64], p: &SsmParams, state: &mut HiddenState) -> Result<Vec<f64>> {
    let step = compute_selective_params(x, p)?;
    apply_step(x, &step, &p.d_skip, state)
}

/// `H_i = Ã_i ∘ H_{i-1} + b_i (Δ_i ∘ x_i)^T`, `y_i = H_i^T c_i + d ∘ x_i`.
pub fn apply_step(
    x: &[f64],
    step: &SelectiveStep,
    d_skip: &[f64],
    state: &mut HiddenState,
) -> Result<Vec<f64>> {
    let (d_h, d) = state.h.shape();
    if x.len() != d || step.b.len() != d_h || d_skip.len() != d {
        return Err(Error::dim("apply_step", d, x.len()));
    }
    assert!(
        step.a_tilde.in_unit_interval(),
        "decay left [0, 1]: a_diag must be <= 0 with positive Δ"
    );
    let record = step.record(x);
    for h in 0..d_h {
        for j in 0..d {
            let prev = state.h[(h, j)];
            state.h[(h, j)] = step.a_tilde.at(h, j) * prev + step.b[h] * record[j];
        }
    }
    let mut y = state.h.transpose().matvec(&step.c)?;
    for j in 0..d {
        y[j] += d_skip[j] * x[j];
    }
    Ok(y)
}

/// Recurrent evaluation over all columns of `x`, returning outputs and final state.
pub fn ssm_scan(x: &Matrix, p: &SsmParams, h0: &HiddenState) -> Result<(Matrix, HiddenState)> {
    p.validate()?;
    if x.rows() != p.width() {
        return Err(Error::dim("ssm_scan", p.width(), x.rows()));
    }
    if h0.h.shape() != (p.state_width(), p.width()) {
        return Err(Error::dim("ssm_scan state", p.state_width(), h0.h.rows()));
    }
    let mut state = h0.clone();
    let mut out = Matrix::zeros(p.width(), x.cols());
    for i in 0..x.cols() {
        let y = ssm_step(&x.column(i), p, &mut state)?;
        out.set_column(i, &y);
    }
    Ok((out, state))
}

/// Forgetting coefficients `α_j = Π_{k=j+1..i} a_k`, with `α_i = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingProfile {
    pub alphas: Vec<f64>,
}

impl ForgettingProfile {
    /// `decays[k]` is `a_{k+1}`; the profile is taken at `i = decays.len()`.
    pub fn from_decays(decays: &[f64]) -> Self {
        let i = decays.len();
        let mut alphas = vec![0.0; i];
        if i == 0 {
            return ForgettingProfile { alphas };
        }
        alphas[i - 1] = 1.0;
        for j in (1..i).rev() {
            // α_{j-1} = a_j α_j (1-based); index j here is position j+1.
            alphas[j - 1] = decays[j] * alphas[j];
        }
        ForgettingProfile { alphas }
    }

    /// Checks the telescoping identity, the unit-interval bound and the
    /// ordering `α_{j-1} <= α_j` that follows from decays in `[0, 1]`.
    pub fn check(&self, decays: &[f64]) -> bool {
        let n = self.alphas.len();
        if n == 0 {
            return true;
        }
        if self.alphas[n - 1] != 1.0 {
            return false;
        }
        (1..n).all(|j| {
            let lhs = self.alphas[j - 1];
            lhs == decays[j] * self.alphas[j] && (0.0..=1.0).contains(&lhs) && lhs <= self.alphas[j]
        })
    }
}

/// Attention-form output from precomputed steps (requires `H0 = O`, `d = 0`).
pub fn attention_form_from_steps(x: &Matrix, steps: &[SelectiveStep]) -> Result<Matrix> {
    attention_form_impl(x, steps, false)
}

fn attention_form_impl(x: &Matrix, steps: &[SelectiveStep], flip_sign: bool) -> Result<Matrix> {
    let n = x.cols();
    if steps.len() != n {
        return Err(Error::dim("attention form steps", n, steps.len()));
    }
    let d = x.rows();
    let records: Vec<Vec<f64>> = (0..n).map(|j| steps[j].record(&x.column(j))).collect();
    let mut out = Matrix::zeros(d, n);
    let sign = if flip_sign { -1.0 } else { 1.0 };
    let scalar: Option<Vec<f64>> = steps
        .iter()
        .map(|s| match s.a_tilde {
            Decay::Scalar(a) => Some(a),
            Decay::Matrix(_) => None,
        })
        .collect();
    for i in 0..n {
        let c = &steps[i].c;
        let mut y = vec![0.0; d];
        if let Some(decays) = &scalar {
            let alphas = ForgettingProfile::from_decays(&decays[..=i]).alphas;
            for j in 0..=i {
                let score: f64 = c.iter().zip(&steps[j].b).map(|(u, v)| u * v).sum();
                let w = if j + 1 == i && flip_sign { sign } else { 1.0 };
                let coef = w * alphas[j] * score;
                for k in 0..d {
                    y[k] += coef * records[j][k];
                }
            }
        } else {
            // Π_j = Ã_i ∘ ... ∘ Ã_{j+1}, accumulated backwards from j = i.
            let d_h = c.len();
            let mut pi = Matrix::from_fn(d_h, d, |_, _| 1.0);
            for j in (0..=i).rev() {
                if j < i {
                    for h in 0..d_h {
                        for k in 0..d {
                            pi[(h, k)] *= steps[j + 1].a_tilde.at(h, k);
                        }
                    }
                }
                let w = if j + 1 == i && flip_sign { sign } else { 1.0 };
                for k in 0..d {
                    let mut acc = 0.0;
                    for h in 0..d_h {
                        acc += pi[(h, k)] * c[h] * steps[j].b[h];
                    }
                    y[k] += w * acc * records[j][k];
                }
            }
        }
        out.set_column(i, &y);
    }
    Ok(out)
}

/// `y_i = Σ_{j<=i} α_j (c_i^T b_j)(Δ_j ∘ x_j)`; needs `d_skip = 0` and a zero initial state.
pub fn ssm_attention_form(x: &Matrix, p: &SsmParams) -> Result<Matrix> {
    ssm_attention_form_injected(x, p, false)
}

/// Attention form with an optional deliberate fault: the term `j = i - 1`
/// enters with a flipped sign. Used to check that the harness notices.
pub fn ssm_attention_form_injected(x: &Matrix, p: &SsmParams, flip_sign: bool) -> Result<Matrix> {
    p.validate()?;
    if p.d_skip.iter().any(|v| *v != 0.0) {
        return Err(Error::Input(
            "attention form needs a zero skip coefficient".into(),
        ));
    }
    if x.rows() != p.width() {
        return Err(Error::dim("ssm_attention_form", p.width(), x.rows()));
    }
    let steps = x
        .columns()
        .iter()
        .map(|col| compute_selective_params(col, p))
        .collect::<Result<Vec<_>>>()?;
    attention_form_impl(x, &steps, flip_sign)
}

/// Parameters of the two-branch block
/// `f(X) = W3 · SSM(W1 X + b1) ∘ silu(W2 X + b2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MambaBlockParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub w3: Matrix,
    pub ssm: SsmParams,
}

impl MambaBlockParams {
    pub fn input_width(&self) -> usize {
        self.w1.cols()
    }

    pub fn inner_width(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_width(&self) -> usize {
        self.w3.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.input_width();
        let inner = self.inner_width();
        if self.w2.shape() != (inner, d) {
            return Err(Error::Config(format!(
                "w2 has shape {:?}, expected {:?}",
                self.w2.shape(),
                (inner, d)
            )));
        }
        if self.b1.len() != inner || self.b2.len() != inner {
            return Err(Error::dim(
                "block biases",
                inner,
                self.b1.len().min(self.b2.len()),
            ));
        }
        if self.w3.cols() != inner {
            return Err(Error::dim("w3 columns", inner, self.w3.cols()));
        }
        if self.ssm.width() != inner {
            return Err(Error::dim("ssm width", inner, self.ssm.width()));
        }
        self.ssm.validate()
    }

    /// Largest absolute parameter across both branches.
    pub fn max_abs(&self) -> f64 {
        [
            self.w1.max_abs(),
            crate::linalg::max_abs(&self.b1),
            self.w2.max_abs(),
            crate::linalg::max_abs(&self.b2),
            self.w3.max_abs(),
            self.ssm.max_abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    /// Number of scalar multiply-adds for one token (dense evaluation).
    pub fn ops_per_token(&self) -> u64 {
        let d = self.input_width() as u64;
        let inner = self.inner_width() as u64;
        let d_h = self.ssm.state_width() as u64;
        let r = self.ssm.w_delta1.rows() as u64;
        let projections = 2 * inner * d + self.output_width() as u64 * inner;
        let selective = 2 * d_h * inner + r * inner + inner * r;
        let scan = 3 * d_h * inner;
        projections + selective + scan
    }
}

/// Gate branch `silu(W2 X + b2)` for every column.
pub fn gate_branch(x: &Matrix, bp: &MambaBlockParams) -> Result<Matrix> {
    affine_columns(x, &bp.w2, &bp.b2, silu)
}

fn affine_columns(x: &Matrix, w: &Matrix, b: &[f64], act: fn(f64) -> f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(w.rows(), x.cols());
    for i in 0..x.cols() {
        let z = w.matvec(&x.column(i))?;
        let col: Vec<f64> = z.iter().zip(b).map(|(z, b)| act(z + b)).collect();
        out.set_column(i, &col);
    }
    Ok(out)
}

pub fn mamba_block_forward(x: &Matrix, bp: &MambaBlockParams) -> Result<Matrix> {
    bp.validate()?;
    if x.rows() != bp.input_width() {
        return Err(Error::dim(
            "mamba_block_forward",
            bp.input_width(),
            x.rows(),
        ));
    }
    let u = affine_columns(x, &bp.w1, &bp.b1, |v| v)?;
    let (s, _) = ssm_scan(&u, &bp.ssm, &HiddenState::for_params(&bp.ssm))?;
    let g = gate_branch(x, bp)?;
    let mut out = Matrix::zeros(bp.output_width(), x.cols());
    for i in 0..x.cols() {
        let gated = hadamard(&s.column(i), &g.column(i));
        out.set_column(i, &bp.w3.matvec(&gated)?);
    }
    Ok(out)
}

/// Single-token evaluation (a length-1 sequence).
pub fn block_forward_token(x: &[f64], bp: &MambaBlockParams) -> Result<Vec<f64>> {
    let m = Matrix::from_columns(&[x.to_vec()])?;
    Ok(mamba_block_forward(&m, bp)?.column(0))
}

/// Advances `state` by one token and returns the block output.
pub fn block_step(bp: &MambaBlockParams, state: &mut HiddenState, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != bp.input_width() {
        return Err(Error::dim("block_step", bp.input_width(), x.len()));
    }
    let u: Vec<f64> = bp
        .w1
        .matvec(x)?
        .iter()
        .zip(&bp.b1)
        .map(|(z, b)| z + b)
        .collect();
    let s = ssm_step(&u, &bp.ssm, state)?;
    let g: Vec<f64> = bp
        .w2
        .matvec(x)?
        .iter()
        .zip(&bp.b2)
        .map(|(z, b)| silu(z + b))
        .collect();
    bp.w3.matvec(&hadamard(&s, &g))
}

/// Token-by-token evaluation of one block, keeping the hidden state visible.
#[derive(Debug, Clone)]
pub struct BlockStream<'a> {
    params: &'a MambaBlockParams,
    state: HiddenState,
    steps: usize,
}

impl<'a> BlockStream<'a> {
    pub fn new(params: &'a MambaBlockParams) -> Result<Self> {
        params.validate()?;
        Ok(BlockStream {
            params,
            state: HiddenState::for_params(&params.ssm),
            steps: 0,
        })
    }

    pub fn push(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let y = block_step(self.params, &mut self.state, x)?;
        self.steps += 1;
        Ok(y)
    }

    pub fn state(&self) -> &HiddenState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackMode {
    /// `X_l = X_{l-1} + f(X_{l-1})`.
    Residual,
    /// `X_l = [f(X_{l-1}); X_{l-1}]`.
    Concat,
}

pub fn mamba_stack_forward(
    x: &Matrix,
    layers: &[MambaBlockParams],
    mode: StackMode,
) -> Result<Matrix> {
    let mut cur = x.clone();
    for layer in layers {
        let f = mamba_block_forward(&cur, layer)?;
        cur = match mode {
            StackMode::Residual => {
                if f.rows() != cur.rows() {
                    return Err(Error::dim("residual layer output", cur.rows(), f.rows()));
                }
                Matrix::from_fn(cur.rows(), cur.cols(), |r, c| cur[(r, c)] + f[(r, c)])
            }
            StackMode::Concat => f.vstack(&cur)?,
        };
    }
    Ok(cur)
}

/// Re-expresses a concat layer as a residual layer acting on `[0; x]`:
/// `[0; x] + g([0; x]) = [f(x); x]`.
pub fn concat_as_residual(bp: &MambaBlockParams) -> Result<MambaBlockParams> {
    bp.validate()?;
    let d = bp.input_width();
    let out = bp.output_width();
    let inner = bp.inner_width();
    let pad = Matrix::zeros(inner, out);
    Ok(MambaBlockParams {
        w1: pad.hstack(&bp.w1)?,
        b1: bp.b1.clone(),
        w2: pad.hstack(&bp.w2)?,
        b2: bp.b2.clone(),
        w3: bp.w3.vstack(&Matrix::zeros(d, inner))?,
        ssm: bp.ssm.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        let diff = crate::linalg::max_abs_diff(a.as_slice(), b.as_slice());
        diff / a.max_abs().max(b.max_abs()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn silu_unit_point_by_newton() {
        let mut k: f64 = 1.0;
        for _ in 0..50 {
            let e = (-k).exp();
            let f = k / (1.0 + e) - 1.0;
            let df = (1.0 + (k + 1.0) * e) / (1.0 + e).powi(2);
            k -= f / df;
        }
        assert!((silu(k) - 1.0).abs() <= 1e-15);
        assert!((k - SILU_UNIT_POINT).abs() <= 1e-15);
        assert!((silu(SILU_UNIT_POINT) - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn zero_input_gives_zero_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SsmParams::random(4, 6, 2, DecayMode::Vector, 1.0, &mut rng);
        let s = compute_selective_params(&[0.0; 4], &p).unwrap();
        assert!(s.b.iter().all(|v| *v == 0.0));
        assert!(s.c.iter().all(|v| *v == 0.0));
        for d in &s.delta {
            assert!((d - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_a_diag_never_forgets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = SsmParams::random(3, 5, 2, DecayMode::Vector, 1.0, &mut rng);
        p.a_diag = vec![0.0; 5];
        let s = compute_selective_params(&[0.3, -2.0, 1.0], &p).unwrap();
        match s.a_tilde {
            Decay::Matrix(m) => assert!(m.as_slice().iter().all(|a| *a == 1.0)),
            Decay::Scalar(_) => unreachable!(),
        }
    }

    #[test]
    fn selective_params_match_straight_line_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, d_h, r) = (5, 7, 3);
        let p = SsmParams::random(d, d_h, r, DecayMode::Vector, 1.0, &mut rng);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let s = compute_selective_params(&x, &p).unwrap();
        for h in 0..d_h {
            let mut b = 0.0;
            let mut c = 0.0;
            for j in 0..d {
                b += p.w_b[(h, j)] * x[j];
                c += p.w_c[(h, j)] * x[j];
            }
            assert!((b - s.b[h]).abs() < 1e-12);
            assert!((c - s.c[h]).abs() < 1e-12);
        }
        for j in 0..d {
            let mut z = 0.0;
            for k in 0..r {
                let mut low = 0.0;
                for l in 0..d {
                    low += p.w_delta1[(k, l)] * x[l];
                }
                z += p.w_delta2[(j, k)] * low;
            }
            let delta = (1.0 + z.exp()).ln();
            assert!((delta - s.delta[j]).abs() < 1e-12);
            for h in 0..d_h {
                let a = (delta * p.a_diag[h]).exp();
                assert!((a - s.a_tilde.at(h, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_input_is_config_error() {
        let p = SsmParams::zeros(3, 2, 1);
        assert!(matches!(
            compute_selective_params(&[1.0], &p),
            Err(Error::Dimension { .. })
        ));
        let mut bad = p.clone();
        bad.a_diag[0] = 0.5;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn scan_of_zero_input_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = SsmParams::random(3, 4, 2, DecayMode::Vector, 1.0, &mut rng);
        let x = Matrix::zeros(3, 9);
        let (y, h) = ssm_scan(&x, &p, &HiddenState::for_params(&p)).unwrap();
        assert_eq!(y.max_abs(), 0.0);
        assert_eq!(h.h.max_abs(), 0.0);
    }

    #[test]
    fn pure_skip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = SsmParams::random(3, 4, 2, DecayMode::Vector, 1.0, &mut rng);
        p.w_b = Matrix::zeros(4, 3);
        p.w_c = Matrix::zeros(4, 3);
        p.d_skip = vec![1.0; 3];
        let x = Matrix::random_uniform(3, 7, 3.0, &mut rng);
        let (y, _) = ssm_scan(&x, &p, &HiddenState::for_params(&p)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scan_matches_attention_form_both_regimes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for decay in [DecayMode::Vector, DecayMode::Scalar] {
            let mut p = SsmParams::random(4, 8, 2, decay, 1.0, &mut rng);
            p.d_skip = vec![0.0; 4];
            let x = Matrix::random_uniform(4, 16, 2.0, &mut rng);
            let (scan, _) = ssm_scan(&x, &p, &HiddenState::for_params(&p)).unwrap();
            let attn = ssm_attention_form(&x, &p).unwrap();
            assert!(rel_err(&scan, &attn) <= 1e-9, "{decay:?}");
        }
    }

    #[test]
    fn attention_form_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = SsmParams::random(3, 4, 1, DecayMode::Scalar, 1.0, &mut rng);
        p.d_skip = vec![0.0; 3];
        let x = Matrix::random_uniform(3, 1, 1.0, &mut rng);
        let y = ssm_attention_form(&x, &p).unwrap();
        let s = compute_selective_params(&x.column(0), &p).unwrap();
        let score: f64 = s.c.iter().zip(&s.b).map(|(a, b)| a * b).sum();
        let expect: Vec<f64> = s.record(&x.column(0)).iter().map(|v| v * score).collect();
        assert!(crate::linalg::max_abs_diff(&y.column(0), &expect) < 1e-14);
    }

    #[test]
    fn zero_decay_keeps_only_current_term() {
        let steps: Vec<SelectiveStep> = (0..4)
            .map(|k| SelectiveStep {
                b: vec![1.0, k as f64],
                c: vec![0.5, 1.0],
                delta: vec![1.0, 1.0],
                a_tilde: Decay::Scalar(0.0),
            })
            .collect();
        let x = Matrix::from_fn(2, 4, |r, c| (r + 2 * c) as f64);
        let y = attention_form_from_steps(&x, &steps).unwrap();
        for i in 0..4 {
            let score = 0.5 + i as f64;
            let expect: Vec<f64> = x.column(i).iter().map(|v| v * score).collect();
            assert_eq!(y.column(i), expect);
        }
    }

    #[test]
    fn attention_form_rejects_skip() {
        let p = {
            let mut p = SsmParams::zeros(2, 2, 1);
            p.d_skip = vec![1.0, 0.0];
            p
        };
        assert!(ssm_attention_form(&Matrix::zeros(2, 3), &p).is_err());
    }

    #[test]
    fn forgetting_profile_telescopes() {
        let decays = [0.3, 0.9, 0.5, 1.0, 0.25];
        let prof = ForgettingProfile::from_decays(&decays);
        assert_eq!(prof.alphas[4], 1.0);
        assert_eq!(prof.alphas[3], 0.25);
        assert_eq!(prof.alphas[2], 0.25);
        assert_eq!(prof.alphas[1], 0.125);
        assert!(prof.check(&decays));
        // the first decay never enters any coefficient
        let mut other = decays;
        other[0] = 0.0;
        assert_eq!(ForgettingProfile::from_decays(&other), prof);
    }

    fn random_block(rng: &mut ChaCha8Rng, d: usize, inner: usize, out: usize) -> MambaBlockParams {
        MambaBlockParams {
            w1: Matrix::random_uniform(inner, d, 1.0, rng),
            b1: (0..inner).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            w2: Matrix::random_uniform(inner, d, 1.0, rng),
            b2: (0..inner).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            w3: Matrix::random_uniform(out, inner, 1.0, rng),
            ssm: SsmParams::random(inner, 4, 2, DecayMode::Vector, 1.0, rng),
        }
    }

    #[test]
    fn gate_deactivation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut bp = random_block(&mut rng, 3, 5, 3);
        bp.w2 = Matrix::zeros(5, 3);
        bp.b2 = vec![SILU_UNIT_POINT; 5];
        let x = Matrix::random_uniform(3, 10, 2.0, &mut rng);
        let y = mamba_block_forward(&x, &bp).unwrap();
        let u = affine_columns(&x, &bp.w1, &bp.b1, |v| v).unwrap();
        let (s, _) = ssm_scan(&u, &bp.ssm, &HiddenState::for_params(&bp.ssm)).unwrap();
        let expect = bp.w3.matmul(&s).unwrap();
        assert!(crate::linalg::max_abs_diff(y.as_slice(), expect.as_slice()) <= 1e-12);
    }

    #[test]
    fn ssm_deactivation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bp = random_block(&mut rng, 3, 5, 2);
        bp.w1 = Matrix::zeros(5, 3);
        bp.b1 = vec![1.0; 5];
        bp.ssm.w_b = Matrix::zeros(4, 5);
        bp.ssm.d_skip = vec![1.0; 5];
        let x = Matrix::random_uniform(3, 6, 2.0, &mut rng);
        let y = mamba_block_forward(&x, &bp).unwrap();
        let g = gate_branch(&x, &bp).unwrap();
        let expect = bp.w3.matmul(&g).unwrap();
        assert!(crate::linalg::max_abs_diff(y.as_slice(), expect.as_slice()) <= 1e-12);
    }

    #[test]
    fn block_is_composition_of_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bp = random_block(&mut rng, 4, 6, 3);
        let x = Matrix::random_uniform(4, 8, 1.5, &mut rng);
        let y = mamba_block_forward(&x, &bp).unwrap();
        // separate re-evaluation: explicit loops
        let mut state = HiddenState::for_params(&bp.ssm);
        for i in 0..8 {
            let xi = x.column(i);
            let u: Vec<f64> = (0..6)
                .map(|r| (0..4).map(|c| bp.w1[(r, c)] * xi[c]).sum::<f64>() + bp.b1[r])
                .collect();
            let s = ssm_step(&u, &bp.ssm, &mut state).unwrap();
            let g: Vec<f64> = (0..6)
                .map(|r| silu((0..4).map(|c| bp.w2[(r, c)] * xi[c]).sum::<f64>() + bp.b2[r]))
                .collect();
            for o in 0..3 {
                let v: f64 = (0..6).map(|k| bp.w3[(o, k)] * s[k] * g[k]).sum();
                assert!((v - y[(o, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stream_matches_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let bp = random_block(&mut rng, 3, 4, 2);
        let x = Matrix::random_uniform(3, 7, 1.0, &mut rng);
        let batch = mamba_block_forward(&x, &bp).unwrap();
        let mut stream = BlockStream::new(&bp).unwrap();
        for i in 0..7 {
            assert_eq!(stream.push(&x.column(i)).unwrap(), batch.column(i));
        }
        assert_eq!(stream.steps(), 7);
    }

    #[test]
    fn residual_stack_of_zero_blocks_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut bp = random_block(&mut rng, 3, 4, 3);
        bp.w3 = Matrix::zeros(3, 4);
        let x = Matrix::random_uniform(3, 5, 1.0, &mut rng);
        let y = mamba_stack_forward(&x, &[bp.clone(), bp], StackMode::Residual).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn one_layer_residual_adds_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let bp = random_block(&mut rng, 3, 4, 3);
        let x = Matrix::random_uniform(3, 5, 1.0, &mut rng);
        let y = mamba_stack_forward(&x, std::slice::from_ref(&bp), StackMode::Residual).unwrap();
        let f = mamba_block_forward(&x, &bp).unwrap();
        for (a, (b, c)) in y
            .as_slice()
            .iter()
            .zip(f.as_slice().iter().zip(x.as_slice()))
        {
            assert_eq!(*a, b + c);
        }
    }

    #[test]
    fn concat_layer_equals_residual_emulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bp = random_block(&mut rng, 3, 5, 3);
        let x = Matrix::random_uniform(3, 6, 1.0, &mut rng);
        let concat = mamba_stack_forward(&x, std::slice::from_ref(&bp), StackMode::Concat).unwrap();
        assert_eq!(concat.rows(), 6);
        let g = concat_as_residual(&bp).unwrap();
        let padded = Matrix::zeros(3, 6).vstack(&x).unwrap();
        let resid = mamba_stack_forward(&padded, &[g], StackMode::Residual).unwrap();
        assert!(crate::linalg::max_abs_diff(concat.as_slice(), resid.as_slice()) <= 1e-12);
    }

    #[test]
    fn params_json_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let bp = random_block(&mut rng, 2, 3, 2);
        let s = serde_json::to_string(&bp).unwrap();
        let back: MambaBlockParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, bp);
    }
}
