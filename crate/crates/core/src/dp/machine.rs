//! The autoregressive loop: each generated token runs the separator copy,
//! the next-state and index programs, the copy units feeding the transition,
//! and the aggregation copy, in that order.

use std::collections::VecDeque;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::embed::{
    encode_prompt, CotToken, CotTrace, EmbeddingLayout, TokenBody, WorkFields, SENTINEL,
};
use super::fixtures::{build_programs, DpProblem, Programs};
use crate::circuit::{Circuit, CircuitBuilder, CompiledCircuit};
use crate::cost::{CostEvent, CostLedger, StepEvents};
use crate::error::{Error, Result};
use crate::gadgets::{build_copy_block, build_gate_passthrough, CopyConstruction};
use crate::linalg::{one_hot, Matrix};
use crate::ssm::{block_step, DecayMode, HiddenState, MambaBlockParams, SsmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Exact evaluation of the same programs and copies.
    Semantic,
    /// Every program and copy runs through Mamba-block parameters.
    Gadget,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(Mode::Semantic),
            "gadget" => Ok(Mode::Gadget),
            other => Err(Error::UnknownId(format!("mode {other}"))),
        }
    }
}

/// Width of the band around `Δ = softplus(±40)` used to switch channels.
const SWITCH: f64 = 40.0;

/// Rounds to the nearest integer embedding value.
pub fn snap(v: f64, budget: f64) -> Result<i64> {
    let r = v.round();
    let distance = (v - r).abs();
    if !(distance < 0.5) || distance > budget {
        return Err(Error::Precision {
            value: v,
            distance,
            budget,
        });
    }
    Ok(r as i64)
}

fn snap_all(v: &[f64], budget: f64) -> Result<Vec<f64>> {
    v.iter()
        .map(|x| snap(*x, budget).map(|r| r as f64))
        .collect()
}

fn exact_ints(v: Vec<f64>) -> Result<Vec<i64>> {
    v.into_iter()
        .map(|x| {
            if x.fract() == 0.0 {
                Ok(x as i64)
            } else {
                Err(Error::Domain(format!("program produced non-integer {x}")))
            }
        })
        .collect()
}

enum Program {
    Exact(Circuit),
    Compiled {
        circuit: Circuit,
        blocks: CompiledCircuit,
        budget: f64,
    },
}

impl Program {
    fn new(circuit: Circuit, mode: Mode, budget: f64) -> Result<Self> {
        Ok(match mode {
            Mode::Semantic => Program::Exact(circuit),
            Mode::Gadget => Program::Compiled {
                blocks: circuit.compile(budget / 2.0)?,
                circuit,
                budget,
            },
        })
    }

    fn ops(&self) -> u64 {
        match self {
            Program::Exact(c) | Program::Compiled { circuit: c, .. } => c.ops(),
        }
    }

    fn run(&self, x: &[i64]) -> Result<Vec<i64>> {
        let xf: Vec<f64> = x.iter().map(|v| *v as f64).collect();
        match self {
            Program::Exact(c) => exact_ints(c.eval(&xf)?),
            Program::Compiled { blocks, budget, .. } => blocks
                .eval(&xf)?
                .iter()
                .map(|v| snap(*v, *budget))
                .collect(),
        }
    }
}

trait CopyUnit {
    /// Stores the token at position `t` and returns the embedding stored at
    /// `query`, or zeros for the sentinel.
    fn step(&mut self, emb: &[f64], t: usize, query: i64) -> Result<Vec<f64>>;
    fn cost(&self, t: usize) -> CostEvent;
}

fn check_query(query: i64, t: usize) -> Result<()> {
    if query != SENTINEL && (query < 1 || query as usize > t) {
        return Err(Error::MalformedTrace(format!(
            "copy of position {query} requested at t = {t}"
        )));
    }
    Ok(())
}

struct ExactCopy {
    store: Vec<Vec<f64>>,
}

impl CopyUnit for ExactCopy {
    fn step(&mut self, emb: &[f64], t: usize, query: i64) -> Result<Vec<f64>> {
        debug_assert_eq!(self.store.len() + 1, t);
        self.store.push(emb.to_vec());
        check_query(query, t)?;
        Ok(if query == SENTINEL {
            vec![0.0; emb.len()]
        } else {
            self.store[query as usize - 1].clone()
        })
    }

    fn cost(&self, t: usize) -> CostEvent {
        CostEvent::FullCopy {
            live: t,
            width: self.store.first().map_or(0, Vec::len),
        }
    }
}

/// One-hot query `[p == j]` for `j = 1..=cap`.
pub(crate) fn query_circuit(cap: usize) -> Circuit {
    let mut b = CircuitBuilder::new(1);
    let p = b.input(0);
    let outs: Vec<_> = (1..=cap)
        .map(|j| {
            let d = b.add_const(&p, -(j as f64));
            b.is_zero(&d)
        })
        .collect();
    b.finish(&outs)
}

struct GadgetCopy {
    copy: CopyConstruction,
    state: HiddenState,
    query: Rc<CompiledCircuit>,
    budget: f64,
}

impl CopyUnit for GadgetCopy {
    fn step(&mut self, emb: &[f64], t: usize, query: i64) -> Result<Vec<f64>> {
        check_query(query, t)?;
        if t > self.copy.n {
            return Err(Error::NonTermination { cap: self.copy.n });
        }
        let mut x = emb.to_vec();
        x.extend(one_hot(self.copy.n, t - 1));
        x.extend(self.query.eval(&[query as f64])?);
        let y = block_step(&self.copy.block, &mut self.state, &x)?;
        let scaled: Vec<f64> = y.iter().map(|v| v * self.copy.payload_scale()).collect();
        snap_all(&scaled, self.budget)
    }

    fn cost(&self, t: usize) -> CostEvent {
        CostEvent::FullCopy {
            live: t,
            width: self.copy.d,
        }
    }
}

struct ExactWindow {
    m: usize,
    buf: VecDeque<(usize, Vec<f64>)>,
    width: usize,
    select_ops: u64,
}

fn check_window(query: i64, t: usize, m: usize) -> Result<()> {
    check_query(query, t)?;
    if query != SENTINEL && (query as usize) + m < t {
        return Err(Error::Locality {
            read: query as usize,
            at: t,
            window: m,
        });
    }
    Ok(())
}

impl CopyUnit for ExactWindow {
    fn step(&mut self, emb: &[f64], t: usize, query: i64) -> Result<Vec<f64>> {
        self.buf.push_back((t, emb.to_vec()));
        if self.buf.len() > self.m + 1 {
            self.buf.pop_front();
        }
        check_window(query, t, self.m)?;
        if query == SENTINEL {
            return Ok(vec![0.0; emb.len()]);
        }
        self.buf
            .iter()
            .find(|(s, _)| *s == query as usize)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::MalformedTrace(format!("position {query} not in window")))
    }

    fn cost(&self, _t: usize) -> CostEvent {
        CostEvent::WindowCopy {
            slots: self.m + 1,
            width: self.width,
            select_ops: self.select_ops,
        }
    }
}

/// Ring of `slots` token copies: the slot named by the token's slot field is
/// erased and rewritten, the others keep their contents.
fn ring_block(layout: &EmbeddingLayout) -> Result<MambaBlockParams> {
    let d = layout.width();
    let w = layout.slots;
    let inner = w * d + w + 1;
    let one_in = layout.one();
    let one_ch = inner - 1;
    let w1 = Matrix::from_fn(inner, d, |r, c| {
        let src = if r < w * d {
            r % d
        } else if r < one_ch {
            layout.slot(r - w * d)
        } else {
            one_in
        };
        (c == src) as u8 as f64
    });
    let rank = w + 1;
    let mut ssm = SsmParams::zeros(inner, 1, rank);
    ssm.a_diag = vec![-1.0];
    ssm.decay = DecayMode::Vector;
    ssm.w_b[(0, one_ch)] = 1.0;
    ssm.w_c[(0, one_ch)] = 1.0;
    for k in 0..rank {
        ssm.w_delta1[(k, w * d + k)] = 1.0;
    }
    for r in 0..inner {
        ssm.w_delta2[(r, w)] = -SWITCH;
        if r < w * d {
            ssm.w_delta2[(r, r / d)] = 2.0 * SWITCH;
        }
    }
    let mut block = build_gate_passthrough(ssm)?;
    block.w1 = w1;
    block.b1 = vec![0.0; inner];
    block.w2 = Matrix::zeros(inner, d);
    block.w3 = Matrix::from_fn(w * d, inner, |r, c| if r == c { 1.0 / SWITCH } else { 0.0 });
    block.validate()?;
    Ok(block)
}

/// Picks the ring entry whose position field equals the query.
pub(crate) fn window_select_circuit(layout: &EmbeddingLayout, bound: f64) -> Circuit {
    let d = layout.width();
    let w = layout.slots;
    let mut b = CircuitBuilder::new(1 + w * d);
    let p = b.input(0);
    let hits: Vec<_> = (0..w)
        .map(|s| {
            let ts = b.input(1 + s * d + layout.t());
            b.eq(&ts, &p)
        })
        .collect();
    let outs: Vec<_> = (0..d)
        .map(|f| {
            let parts: Vec<_> = (0..w)
                .map(|s| {
                    let v = b.input(1 + s * d + f);
                    b.gate(&hits[s], &v, bound)
                })
                .collect();
            let refs: Vec<(f64, &_)> = parts.iter().map(|v| (1.0, v)).collect();
            b.lin(&refs, 0.0)
        })
        .collect();
    b.finish(&outs)
}

struct GadgetWindow {
    m: usize,
    block: Rc<MambaBlockParams>,
    select: Rc<CompiledCircuit>,
    state: HiddenState,
    width: usize,
    select_ops: u64,
    budget: f64,
}

impl CopyUnit for GadgetWindow {
    fn step(&mut self, emb: &[f64], t: usize, query: i64) -> Result<Vec<f64>> {
        let ring = block_step(&self.block, &mut self.state, emb)?;
        check_window(query, t, self.m)?;
        let mut x = vec![query as f64];
        x.extend(ring);
        snap_all(&self.select.eval(&x)?, self.budget)
    }

    fn cost(&self, _t: usize) -> CostEvent {
        CostEvent::WindowCopy {
            slots: self.m + 1,
            width: self.width,
            select_ops: self.select_ops,
        }
    }
}

/// Separator positions, one stored scalar per sequence.
enum Keyed {
    Exact(Vec<i64>),
    Gadget {
        block: MambaBlockParams,
        state: HiddenState,
        budget: f64,
    },
}

/// Records `t` into channel `k` only while separator `k` is on.
fn keyed_block(layout: &EmbeddingLayout) -> Result<MambaBlockParams> {
    let d = layout.width();
    let n = layout.n_seq;
    let inner = 2 * n + 1;
    let w1 = Matrix::from_fn(inner, d, |r, c| {
        let src = if r < n {
            layout.t()
        } else if r < 2 * n {
            layout.sep(r - n)
        } else {
            layout.one()
        };
        (c == src) as u8 as f64
    });
    let mut ssm = SsmParams::zeros(inner, 1, n + 1);
    ssm.w_b[(0, 2 * n)] = 1.0;
    ssm.w_c[(0, 2 * n)] = 1.0;
    for k in 0..=n {
        ssm.w_delta1[(k, n + k)] = 1.0;
    }
    for r in 0..inner {
        ssm.w_delta2[(r, n)] = -SWITCH;
        if r < n {
            ssm.w_delta2[(r, r)] = 2.0 * SWITCH;
        }
    }
    let mut block = build_gate_passthrough(ssm)?;
    block.w1 = w1;
    block.b1 = vec![0.0; inner];
    block.w2 = Matrix::zeros(inner, d);
    block.w3 = Matrix::from_fn(n, inner, |r, c| if r == c { 1.0 / SWITCH } else { 0.0 });
    block.validate()?;
    Ok(block)
}

impl Keyed {
    fn step(&mut self, layout: &EmbeddingLayout, emb: &[f64], t: usize) -> Result<Vec<i64>> {
        match self {
            Keyed::Exact(seen) => {
                for (k, s) in seen.iter_mut().enumerate() {
                    if emb[layout.sep(k)] == 1.0 {
                        *s = t as i64;
                    }
                }
                Ok(seen.clone())
            }
            Keyed::Gadget {
                block,
                state,
                budget,
            } => {
                let y = block_step(block, state, emb)?;
                y.iter().map(|v| snap(*v, *budget)).collect()
            }
        }
    }
}

/// Result of one chain-of-thought run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotRun {
    pub answer: i64,
    pub trace: CotTrace,
    pub ledger: CostLedger,
    pub events: Vec<StepEvents>,
}

struct Machine {
    layout: EmbeddingLayout,
    programs: Programs,
    next: Program,
    pos: Program,
    trans: Program,
    agg: Program,
    keyed: Keyed,
    copies: Vec<Box<dyn CopyUnit>>,
}

struct StepOutput {
    token: CotToken,
    events: StepEvents,
}

impl Machine {
    fn new(
        problem: &DpProblem,
        layout: EmbeddingLayout,
        mode: Mode,
        eps: f64,
        window: Option<usize>,
    ) -> Result<Self> {
        let programs = build_programs(problem)?;
        let bound = problem
            .value_bound()
            .max((problem.prompt_len() + problem.effective_step_cap() + 4) as f64);
        let cap = problem.prompt_len() + problem.effective_step_cap();
        let n_copies = programs.n_s + programs.n_dp + programs.n_a;
        let d = layout.width();
        let mut copies: Vec<Box<dyn CopyUnit>> = Vec::with_capacity(n_copies);
        match (mode, window) {
            (Mode::Semantic, None) => {
                for _ in 0..n_copies {
                    copies.push(Box::new(ExactCopy { store: Vec::new() }));
                }
            }
            (Mode::Semantic, Some(m)) => {
                let select_ops = window_select_circuit(&layout, bound).ops();
                for _ in 0..n_copies {
                    copies.push(Box::new(ExactWindow {
                        m,
                        buf: VecDeque::new(),
                        width: d,
                        select_ops,
                    }));
                }
            }
            (Mode::Gadget, None) => {
                let query = Rc::new(query_circuit(cap).compile(eps / (2.0 * cap as f64 * bound))?);
                for _ in 0..n_copies {
                    let copy = build_copy_block(cap, d, bound)?;
                    copies.push(Box::new(GadgetCopy {
                        state: HiddenState::for_params(&copy.block.ssm),
                        copy,
                        query: Rc::clone(&query),
                        budget: eps,
                    }));
                }
            }
            (Mode::Gadget, Some(m)) => {
                let block = Rc::new(ring_block(&layout)?);
                let circuit = window_select_circuit(&layout, bound);
                let select_ops = circuit.ops();
                let select = Rc::new(circuit.compile(eps / 2.0)?);
                for _ in 0..n_copies {
                    copies.push(Box::new(GadgetWindow {
                        m,
                        state: HiddenState::for_params(&block.ssm),
                        block: Rc::clone(&block),
                        select: Rc::clone(&select),
                        width: d,
                        select_ops,
                        budget: eps,
                    }));
                }
            }
        }
        let keyed = match mode {
            Mode::Semantic => Keyed::Exact(vec![0; layout.n_seq]),
            Mode::Gadget => {
                let block = keyed_block(&layout)?;
                Keyed::Gadget {
                    state: HiddenState::for_params(&block.ssm),
                    block,
                    budget: eps,
                }
            }
        };
        Ok(Machine {
            next: Program::new(programs.next.clone(), mode, eps)?,
            pos: Program::new(programs.pos.clone(), mode, eps)?,
            trans: Program::new(programs.trans.clone(), mode, eps)?,
            agg: Program::new(programs.agg.clone(), mode, eps)?,
            programs,
            layout,
            keyed,
            copies,
        })
    }

    /// Feeds a prompt token that does not produce output.
    fn absorb(&mut self, emb: &[f64], t: usize) -> Result<()> {
        self.keyed.step(&self.layout, emb, t)?;
        for c in &mut self.copies {
            c.step(emb, t, SENTINEL)?;
        }
        Ok(())
    }

    /// Problem sizes from separator positions.
    fn block1_size(&mut self, emb: &[f64], t: usize) -> Result<Vec<i64>> {
        let seps = self.keyed.step(&self.layout, emb, t)?;
        let mut prev = 0;
        let mut n = Vec::with_capacity(seps.len());
        for (k, &s) in seps.iter().enumerate() {
            if s <= prev {
                return Err(Error::MalformedTrace(format!(
                    "separator {} missing before t = {t}",
                    k + 1
                )));
            }
            n.push(s - prev - 1);
            prev = s;
        }
        Ok(n)
    }

    fn step(&mut self, cur: &CotToken, emb: &[f64]) -> Result<StepOutput> {
        let t = cur.t;
        let k = self.layout.state_dims;
        let (state, is_sep) = match &cur.body {
            TokenBody::Step { state, .. } => (state.clone(), 0),
            TokenBody::Sep { .. } => (vec![0; k], 1),
            _ => {
                return Err(Error::MalformedTrace(format!(
                    "cannot continue from token at t = {t}"
                )))
            }
        };

        let n = self.block1_size(emb, t)?;
        let mut x = n.clone();
        x.extend(&state);
        x.extend([is_sep, t as i64]);
        let out = self.next.run(&x)?;
        let next_state = out[..k].to_vec();
        let is_last = out[k] == 1;
        let p_answer = out[k + 1..].to_vec();

        let mut x = n.clone();
        x.extend(&next_state);
        x.extend([t as i64, is_last as i64]);
        let out = self.pos.run(&x)?;
        let (n_s, n_dp) = (self.programs.n_s, self.programs.n_dp);
        let p_s = out[..n_s].to_vec();
        let p_dp = out[n_s..n_s + n_dp].to_vec();
        let f_answer = out[n_s + n_dp] == 1;

        let mut x = n.clone();
        x.extend(&next_state);
        let queries: Vec<i64> = p_s.iter().chain(&p_dp).copied().collect();
        for (unit, &q) in self.copies.iter_mut().zip(&queries) {
            let c = unit.step(emb, t, q)?;
            x.push((c[EmbeddingLayout::IN_FLAG] + c[self.layout.dp_flag()]) as i64);
            x.push((c[EmbeddingLayout::IN_VAL] + c[self.layout.dp_val()]) as i64);
        }
        let dp = self.trans.run(&x)?[0];

        let mut x = Vec::new();
        let mut flagged = 0;
        for (unit, &q) in self.copies[queries.len()..].iter_mut().zip(&p_answer) {
            let c = unit.step(emb, t, q)?;
            flagged += c[self.layout.dp_flag()] as i64;
            x.push(c[self.layout.dp_flag()] as i64);
            x.push(c[self.layout.dp_val()] as i64);
        }
        let answer = self.agg.run(&x)?[0];

        let mut events = vec![CostEvent::KeyedCopy {
            keys: self.layout.n_seq,
        }];
        events.extend(
            [&self.next, &self.pos, &self.trans, &self.agg]
                .iter()
                .map(|p| CostEvent::Program { ops: p.ops() }),
        );
        events.extend(self.copies.iter().map(|c| c.cost(t)));

        let body = if is_last {
            if self.programs.n_a > 0 && flagged == 0 {
                return Err(Error::MalformedTrace(
                    "no flagged dp values to aggregate".into(),
                ));
            }
            TokenBody::Answer { value: answer }
        } else {
            if next_state.iter().any(|c| *c < 1) {
                return Err(Error::MalformedTrace(format!(
                    "invalid next state {next_state:?}"
                )));
            }
            TokenBody::Step {
                state: next_state.clone(),
                dp,
            }
        };
        let mut token = CotToken::new(t + 1, body);
        token.work = Some(WorkFields {
            n,
            next_state,
            p_s,
            p_dp,
            p_answer,
            f_answer,
            f_state: is_last,
        });
        Ok(StepOutput {
            token,
            events: StepEvents { t, events },
        })
    }
}

fn run(problem: &DpProblem, mode: Mode, eps_budget: f64, window: Option<usize>) -> Result<CotRun> {
    problem.validate()?;
    if mode == Mode::Gadget && !(eps_budget > 0.0 && eps_budget <= 0.5) {
        return Err(Error::Config(format!(
            "eps_budget must lie in (0, 0.5] for unit-spaced embeddings, got {eps_budget}"
        )));
    }
    let layout = EmbeddingLayout::for_problem(problem, window.map_or(0, |m| m + 1));
    let mut trace = encode_prompt(problem, &layout)?;
    let mut machine = Machine::new(problem, layout.clone(), mode, eps_budget, window)?;
    for tok in &trace.tokens[..trace.prompt_len - 1] {
        machine.absorb(&tok.embed(&layout), tok.t)?;
    }
    let cap = problem.effective_step_cap();
    let mut ledger = CostLedger::default();
    let mut events = Vec::new();
    loop {
        if events.len() == cap {
            return Err(Error::NonTermination { cap });
        }
        let cur = trace.tokens.last().expect("prompt has a separator").clone();
        let out = machine.step(&cur, &cur.embed(&layout))?;
        ledger.charge(&out.events);
        events.push(out.events);
        let done = matches!(out.token.body, TokenBody::Answer { .. });
        trace.tokens.push(out.token);
        if done {
            break;
        }
    }
    trace.check_well_formed()?;
    Ok(CotRun {
        answer: trace.answer().expect("loop ends on an answer"),
        trace,
        ledger,
        events,
    })
}

/// Solves `problem` by generating one `(state, dp)` token per state, then the
/// answer token.
pub fn cot_solve(problem: &DpProblem, mode: Mode, eps_budget: f64) -> Result<CotRun> {
    run(problem, mode, eps_budget, None)
}

/// Model whose copy units only keep the last `m + 1` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDpModel {
    problem: DpProblem,
    window: usize,
    eps_budget: f64,
}

pub fn build_local_dp_model(problem: &DpProblem, eps_budget: f64) -> Result<LocalDpModel> {
    problem.validate()?;
    let window = problem.locality.ok_or_else(|| {
        Error::Config(format!(
            "{} declares no locality window",
            problem.fixture.id()
        ))
    })?;
    if window == 0 {
        return Err(Error::Config("locality window must be at least 1".into()));
    }
    Ok(LocalDpModel {
        problem: problem.clone(),
        window,
        eps_budget,
    })
}

impl LocalDpModel {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn solve(&self, mode: Mode) -> Result<CotRun> {
        run(&self.problem, mode, self.eps_budget, Some(self.window))
    }
}
