//! Fixture dynamic programs: problem records, reference state machines and the
//! ReLU programs that realize next-state, index, transition and aggregation.

use serde::{Deserialize, Serialize};

use super::embed::SENTINEL;
use crate::circuit::{Circuit, CircuitBuilder, Value};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fixture {
    /// `sequences = [a, b]`; states `(i, j)` stored as `(i + 1, j + 1)`.
    EditDistance,
    /// `sequences = [s]`; states `(i, j)`, `1 <= j <= i + 1`.
    Lis,
    /// `sequences = [tape, seeds]` with `|seeds| = m`; one state per tape cell,
    /// each the maximum of the previous `m` stream values.
    WindowedMax { m: usize },
}

impl Fixture {
    pub fn id(&self) -> &'static str {
        match self {
            Fixture::EditDistance => "edit_distance",
            Fixture::Lis => "lis",
            Fixture::WindowedMax { .. } => "windowed_max",
        }
    }

    pub fn state_dims(&self) -> usize {
        match self {
            Fixture::EditDistance | Fixture::Lis => 2,
            Fixture::WindowedMax { .. } => 1,
        }
    }

    /// `(N_s, N_dp, N_A)`.
    pub fn bounds(&self) -> (usize, usize, usize) {
        match *self {
            Fixture::EditDistance => (2, 3, 1),
            Fixture::Lis => (2, 2, 1),
            Fixture::WindowedMax { m } => (0, m, 1),
        }
    }

    pub fn n_seq(&self) -> usize {
        match self {
            Fixture::Lis => 1,
            _ => 2,
        }
    }

    /// First state when `cur` is `None`; `None` after the last state.
    pub fn next_state(&self, n: &[i64], cur: Option<&[i64]>) -> Option<Vec<i64>> {
        match (*self, cur) {
            (Fixture::EditDistance, None) => Some(vec![1, 1]),
            (Fixture::EditDistance, Some(c)) => {
                if c[1] - 1 < n[1] {
                    Some(vec![c[0], c[1] + 1])
                } else if c[0] - 1 < n[0] {
                    Some(vec![c[0] + 1, 1])
                } else {
                    None
                }
            }
            (Fixture::Lis, None) => (n[0] >= 1).then(|| vec![1, 1]),
            (Fixture::Lis, Some(c)) => {
                if c[1] <= c[0] {
                    Some(vec![c[0], c[1] + 1])
                } else if c[0] < n[0] {
                    Some(vec![c[0] + 1, 1])
                } else {
                    None
                }
            }
            (Fixture::WindowedMax { .. }, None) => (n[0] >= 1).then(|| vec![1]),
            (Fixture::WindowedMax { .. }, Some(c)) => (c[0] < n[0]).then(|| vec![c[0] + 1]),
        }
    }

    pub fn states(&self, n: &[i64]) -> Vec<Vec<i64>> {
        let mut out = Vec::new();
        let mut cur = self.next_state(n, None);
        while let Some(s) = cur {
            cur = self.next_state(n, Some(&s));
            out.push(s);
        }
        out
    }

    /// What a state reads, in the order the index program emits it.
    pub fn dependencies(&self, _n: &[i64], state: &[i64]) -> Vec<Dep> {
        match *self {
            Fixture::EditDistance => {
                let (i, j) = (state[0] - 1, state[1] - 1);
                if i == 0 || j == 0 {
                    return Vec::new();
                }
                vec![
                    Dep::Input {
                        seq: 0,
                        index: i as usize - 1,
                    },
                    Dep::Input {
                        seq: 1,
                        index: j as usize - 1,
                    },
                    Dep::State(vec![i, j]),
                    Dep::State(vec![i, j + 1]),
                    Dep::State(vec![i + 1, j]),
                ]
            }
            Fixture::Lis => {
                let (i, j) = (state[0], state[1]);
                if j == 1 {
                    Vec::new()
                } else if j <= i {
                    vec![
                        Dep::Input {
                            seq: 0,
                            index: j as usize - 2,
                        },
                        Dep::Input {
                            seq: 0,
                            index: i as usize - 1,
                        },
                        Dep::State(vec![i, j - 1]),
                        Dep::State(vec![j - 1, j - 1]),
                    ]
                } else {
                    let mut d = vec![Dep::State(vec![i, i])];
                    if i >= 2 {
                        d.push(Dep::State(vec![i - 1, i]));
                    }
                    d
                }
            }
            Fixture::WindowedMax { m } => {
                let m = m as i64;
                let i = state[0];
                (i..i + m)
                    .map(|k| {
                        if k <= m {
                            Dep::Input {
                                seq: 1,
                                index: k as usize - 1,
                            }
                        } else {
                            Dep::State(vec![k - m])
                        }
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dep {
    Input { seq: usize, index: usize },
    State(Vec<i64>),
}

/// Problem record as read from fixture files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpProblem {
    pub fixture: Fixture,
    pub sequences: Vec<Vec<u32>>,
    /// Declared dependence window; absent means unbounded.
    #[serde(default)]
    pub locality: Option<usize>,
    /// Maximum number of generated tokens.
    #[serde(default)]
    pub step_cap: Option<usize>,
}

impl DpProblem {
    pub fn edit_distance(a: &[u32], b: &[u32]) -> Self {
        DpProblem {
            fixture: Fixture::EditDistance,
            sequences: vec![a.to_vec(), b.to_vec()],
            locality: None,
            step_cap: None,
        }
    }

    pub fn lis(s: &[u32]) -> Self {
        DpProblem {
            fixture: Fixture::Lis,
            sequences: vec![s.to_vec()],
            locality: None,
            step_cap: None,
        }
    }

    /// `tape_len` steps over the given seeds, with locality `|seeds|` declared.
    pub fn windowed_max(tape_len: usize, seeds: &[u32]) -> Self {
        DpProblem {
            fixture: Fixture::WindowedMax { m: seeds.len() },
            sequences: vec![vec![1; tape_len], seeds.to_vec()],
            locality: Some(seeds.len()),
            step_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences.len() != self.fixture.n_seq() {
            return Err(Error::Input(format!(
                "{} takes {} sequences, got {}",
                self.fixture.id(),
                self.fixture.n_seq(),
                self.sequences.len()
            )));
        }
        match self.fixture {
            Fixture::Lis if self.sequences[0].is_empty() => {
                Err(Error::Input("lis needs a nonempty sequence".into()))
            }
            Fixture::WindowedMax { m } => {
                if m == 0 || self.sequences[1].len() != m {
                    return Err(Error::Input(format!(
                        "windowed_max with m = {m} needs exactly m >= 1 seeds, got {}",
                        self.sequences[1].len()
                    )));
                }
                if self.sequences[0].is_empty() {
                    return Err(Error::Input("windowed_max needs a nonempty tape".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn sizes(&self) -> Vec<i64> {
        self.sequences.iter().map(|s| s.len() as i64).collect()
    }

    pub fn prompt_len(&self) -> usize {
        self.sequences.iter().map(|s| s.len() + 1).sum()
    }

    pub fn state_count(&self) -> usize {
        self.fixture.states(&self.sizes()).len()
    }

    /// Cap on generated tokens: one per state plus the answer unless declared.
    pub fn effective_step_cap(&self) -> usize {
        self.step_cap.unwrap_or(self.state_count() + 1)
    }

    /// Largest position any run can reach.
    pub fn position_cap(&self) -> usize {
        self.prompt_len() + self.state_count() + 1
    }

    /// Bound on every integer a program handles.
    pub fn value_bound(&self) -> f64 {
        let sym = self.sequences.iter().flatten().copied().max().unwrap_or(0) as usize;
        (self.position_cap() + sym + 4) as f64
    }

    /// 1-based prompt position of `sequences[seq][index]`.
    pub fn input_position(&self, seq: usize, index: usize) -> usize {
        self.sequences[..seq]
            .iter()
            .map(|s| s.len() + 1)
            .sum::<usize>()
            + index
            + 1
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: DpProblem = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// Feedforward programs for one problem. Input orders:
/// - `next`: `[n.., state.., is_sep, t]` → `[next_state.., is_last, p_answer]`
/// - `pos`: `[n.., next_state.., t, is_last]` → `[p_s.., p_dp.., f_answer]`
/// - `trans`: `[n.., next_state.., (flag, value) per copy]` → `[dp]`
/// - `agg`: `[(flag, value) per copy]` → `[answer]`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Programs {
    pub next: Circuit,
    pub pos: Circuit,
    pub trans: Circuit,
    pub agg: Circuit,
    pub n_s: usize,
    pub n_dp: usize,
    pub n_a: usize,
}

impl Programs {
    pub fn ops(&self) -> u64 {
        self.next.ops() + self.pos.ops() + self.trans.ops() + self.agg.ops()
    }
}

/// `v` where `flag` is set, the sentinel elsewhere.
fn or_sentinel(b: &mut CircuitBuilder, flag: &Value, v: &Value, bound: f64) -> Value {
    let g = b.gate(flag, v, bound);
    b.lin(&[(1.0, &g), (-SENTINEL as f64, flag)], SENTINEL as f64)
}

/// Positions collapse to the sentinel once the last state is reached.
fn finish_pos(
    mut b: CircuitBuilder,
    positions: Vec<Value>,
    f_answer: Value,
    last: &Value,
    bound: f64,
) -> Circuit {
    let keep = b.not(last);
    let mut outs: Vec<Value> = positions
        .iter()
        .map(|p| {
            let shifted = b.add_const(p, 1.0);
            let g = b.gate(&keep, &shifted, bound);
            b.add_const(&g, -1.0)
        })
        .collect();
    outs.push(f_answer);
    b.finish(&outs)
}

pub fn build_programs(problem: &DpProblem) -> Result<Programs> {
    problem.validate()?;
    let bound = problem.value_bound();
    let (n_s, n_dp, n_a) = problem.fixture.bounds();
    let progs = match problem.fixture {
        Fixture::EditDistance => edit_programs(bound),
        Fixture::Lis => lis_programs(problem.sizes()[0] as usize, bound),
        Fixture::WindowedMax { m } => windowed_programs(m, bound),
    };
    let (next, pos, trans) = progs;
    let b = CircuitBuilder::new(2 * n_a);
    let v = b.input(1);
    let agg = b.finish(&[v]);
    Ok(Programs {
        next,
        pos,
        trans,
        agg,
        n_s,
        n_dp,
        n_a,
    })
}

fn edit_programs(bound: f64) -> (Circuit, Circuit, Circuit) {
    let next = {
        let mut b = CircuitBuilder::new(6);
        let [na, nb, ci, cj, sep, t]: [Value; 6] = b.inputs().try_into().unwrap();
        let rest = b.not(&sep);
        let ja = b.lin(&[(1.0, &nb), (-1.0, &cj)], 1.0);
        let a = b.ge(&ja, 1.0);
        let ib = b.lin(&[(1.0, &na), (-1.0, &ci)], 1.0);
        let bb = b.ge(&ib, 1.0);
        let not_a = b.not(&a);
        let not_b = b.not(&bb);
        let fa = b.and(&rest, &a);
        let nab = b.and(&not_a, &bb);
        let fb = b.and(&rest, &nab);
        let none = b.and(&not_a, &not_b);
        let last = b.and(&rest, &none);
        let g1 = b.gate(&fa, &ci, bound);
        let ci1 = b.add_const(&ci, 1.0);
        let g2 = b.gate(&fb, &ci1, bound);
        let next_ci = b.lin(&[(1.0, &sep), (1.0, &g1), (1.0, &g2)], 0.0);
        let cj1 = b.add_const(&cj, 1.0);
        let g3 = b.gate(&fa, &cj1, bound);
        let next_cj = b.lin(&[(1.0, &sep), (1.0, &g3), (1.0, &fb)], 0.0);
        let p_answer = or_sentinel(&mut b, &last, &t, bound);
        b.finish(&[next_ci, next_cj, last, p_answer])
    };
    let pos = {
        let mut b = CircuitBuilder::new(6);
        let [na, nb, ci, cj, t, last]: [Value; 6] = b.inputs().try_into().unwrap();
        let gi = b.ge(&ci, 2.0);
        let gj = b.ge(&cj, 2.0);
        let z = b.and(&gi, &gj);
        let a_pos = b.add_const(&ci, -1.0);
        let b_pos = b.add(&na, &cj);
        let diag = b.lin(&[(1.0, &t), (-1.0, &nb)], -1.0);
        let up = b.sub(&t, &nb);
        let outs: Vec<Value> = [a_pos, b_pos, diag, up, t]
            .iter()
            .map(|v| or_sentinel(&mut b, &z, v, bound))
            .collect();
        let la = b.add_const(&na, 1.0);
        let lb = b.add_const(&nb, 1.0);
        let ei = b.eq(&ci, &la);
        let ej = b.eq(&cj, &lb);
        let f_answer = b.and(&ei, &ej);
        finish_pos(b, outs, f_answer, &last, bound)
    };
    let trans = {
        let mut b = CircuitBuilder::new(14);
        let x = b.inputs();
        let (ci, cj) = (&x[2], &x[3]);
        let (va, vb) = (&x[5], &x[7]);
        let (d0, d1, d2) = (&x[9], &x[11], &x[13]);
        let gi = b.ge(ci, 2.0);
        let gj = b.ge(cj, 2.0);
        let z = b.and(&gi, &gj);
        let same = b.eq(va, vb);
        let diag = b.lin(&[(1.0, d0), (-1.0, &same)], 1.0);
        let up = b.add_const(d1, 1.0);
        let left = b.add_const(d2, 1.0);
        let m = b.min(&diag, &up);
        let m = b.min(&m, &left);
        let inner = b.gate(&z, &m, bound);
        let nz = b.not(&z);
        let edge = b.lin(&[(1.0, ci), (1.0, cj)], -2.0);
        let outer = b.gate(&nz, &edge, bound);
        let dp = b.add(&inner, &outer);
        b.finish(&[dp])
    };
    (next, pos, trans)
}

/// `q(j) = (j - 2)(j + 1)/2 + j`: offset of state `(j-1, j-1)` past `n`.
fn lis_diag_offset(j: i64) -> i64 {
    (j - 2) * (j + 1) / 2 + j
}

fn lis_programs(n_max: usize, bound: f64) -> (Circuit, Circuit, Circuit) {
    let next = {
        let mut b = CircuitBuilder::new(5);
        let [n, ci, cj, sep, t]: [Value; 5] = b.inputs().try_into().unwrap();
        let rest = b.not(&sep);
        let d = b.sub(&ci, &cj);
        let a = b.ge(&d, 0.0);
        let room = b.sub(&n, &ci);
        let bb = b.ge(&room, 1.0);
        let not_a = b.not(&a);
        let not_b = b.not(&bb);
        let fa = b.and(&rest, &a);
        let nab = b.and(&not_a, &bb);
        let fb = b.and(&rest, &nab);
        let none = b.and(&not_a, &not_b);
        let last = b.and(&rest, &none);
        let g1 = b.gate(&fa, &ci, bound);
        let ci1 = b.add_const(&ci, 1.0);
        let g2 = b.gate(&fb, &ci1, bound);
        let next_ci = b.lin(&[(1.0, &sep), (1.0, &g1), (1.0, &g2)], 0.0);
        let cj1 = b.add_const(&cj, 1.0);
        let g3 = b.gate(&fa, &cj1, bound);
        let next_cj = b.lin(&[(1.0, &sep), (1.0, &g3), (1.0, &fb)], 0.0);
        let p_answer = or_sentinel(&mut b, &last, &t, bound);
        b.finish(&[next_ci, next_cj, last, p_answer])
    };
    let cases = |b: &mut CircuitBuilder, ci: &Value, cj: &Value| {
        let one = b.constant(1.0);
        let c1 = b.eq(cj, &one);
        let ci1 = b.add_const(ci, 1.0);
        let c3 = b.eq(cj, &ci1);
        let c2 = b.lin(&[(-1.0, &c1), (-1.0, &c3)], 1.0);
        (c1, c2, c3)
    };
    let pos = {
        let mut b = CircuitBuilder::new(5);
        let [n, ci, cj, t, last]: [Value; 5] = b.inputs().try_into().unwrap();
        let (c1, c2, c3) = cases(&mut b, &ci, &cj);
        let s0 = b.add_const(&cj, -1.0);
        let p_s0 = or_sentinel(&mut b, &c2, &s0, bound);
        let p_s1 = or_sentinel(&mut b, &c2, &ci, bound);
        let not_c1 = b.not(&c1);
        let p_d0 = or_sentinel(&mut b, &not_c1, &t, bound);
        let gi = b.ge(&ci, 2.0);
        let h = b.and(&c3, &gi);
        let table: Vec<f64> = (2..=n_max as i64 + 1)
            .map(|j| lis_diag_offset(j) as f64)
            .collect();
        let q = b.table(&cj, 2.0, &table);
        let diag = b.add(&n, &q);
        let g_diag = b.gate(&c2, &diag, bound);
        let back = b.sub(&t, &ci);
        let g_back = b.gate(&h, &back, bound);
        let p_d1 = b.lin(
            &[(1.0, &g_diag), (1.0, &g_back), (1.0, &c2), (1.0, &h)],
            SENTINEL as f64,
        );
        let ein = b.eq(&ci, &n);
        let n1 = b.add_const(&n, 1.0);
        let ejn = b.eq(&cj, &n1);
        let f_answer = b.and(&ein, &ejn);
        finish_pos(b, vec![p_s0, p_s1, p_d0, p_d1], f_answer, &last, bound)
    };
    let trans = {
        let mut b = CircuitBuilder::new(11);
        let x = b.inputs();
        let (ci, cj) = (&x[1], &x[2]);
        let (vs0, vs1) = (&x[4], &x[6]);
        let (d0, d1) = (&x[8], &x[10]);
        let (c1, c2, c3) = cases(&mut b, ci, cj);
        let rise = b.sub(vs1, vs0);
        let lt = b.ge(&rise, 1.0);
        let ext = b.add_const(d1, 1.0);
        let cand = b.gate(&lt, &ext, bound);
        let v2 = b.max(d0, &cand);
        let v3 = b.max(d0, d1);
        let g2 = b.gate(&c2, &v2, bound);
        let g3 = b.gate(&c3, &v3, bound);
        let dp = b.lin(&[(1.0, &c1), (1.0, &g2), (1.0, &g3)], 0.0);
        b.finish(&[dp])
    };
    (next, pos, trans)
}

fn windowed_programs(m: usize, bound: f64) -> (Circuit, Circuit, Circuit) {
    let next = {
        let mut b = CircuitBuilder::new(5);
        let [k, _mm, ci, sep, t]: [Value; 5] = b.inputs().try_into().unwrap();
        let rest = b.not(&sep);
        let room = b.sub(&k, &ci);
        let a = b.ge(&room, 1.0);
        let fa = b.and(&rest, &a);
        let not_a = b.not(&a);
        let last = b.and(&rest, &not_a);
        let ci1 = b.add_const(&ci, 1.0);
        let g = b.gate(&fa, &ci1, bound);
        let next = b.add(&sep, &g);
        let p_answer = or_sentinel(&mut b, &last, &t, bound);
        b.finish(&[next, last, p_answer])
    };
    let pos = {
        let mut b = CircuitBuilder::new(5);
        let [k, _mm, ci, t, last]: [Value; 5] = b.inputs().try_into().unwrap();
        let mf = m as f64;
        let mut outs = Vec::with_capacity(m);
        for off in 0..m {
            let shifted = b.add_const(&ci, off as f64 - mf);
            let past_seeds = b.ge(&shifted, 1.0);
            outs.push(b.lin(&[(1.0, &t), (1.0, &past_seeds)], off as f64 - mf));
        }
        let f_answer = b.eq(&ci, &k);
        finish_pos(b, outs, f_answer, &last, bound)
    };
    let trans = {
        let mut b = CircuitBuilder::new(3 + 2 * m);
        let x = b.inputs();
        let mut acc = x[4].clone();
        for k in 1..m {
            acc = b.max(&acc, &x[4 + 2 * k]);
        }
        b.finish(&[acc])
    };
    (next, pos, trans)
}
