//! Token vocabulary and embedding layout for chain-of-thought traces.
//!
//! Layout of one token vector:
//! `[in_flag, in_val | st_flag, st_1..st_k | dp_flag, dp_val | ans_flag, ans_val
//!   | sep_1..sep_N | t | 1 | slot_1..slot_w]`.
//! Every field is an integer, so distinct embeddings are at least 1 apart.

use serde::{Deserialize, Serialize};

use super::fixtures::DpProblem;
use crate::error::{Error, Result};

/// Position value meaning "no token".
pub const SENTINEL: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingLayout {
    pub n_seq: usize,
    pub state_dims: usize,
    /// Largest admissible input symbol.
    pub alphabet: u32,
    /// Ring-slot one-hot width; zero when no window is used.
    pub slots: usize,
}

impl EmbeddingLayout {
    pub fn for_problem(problem: &DpProblem, slots: usize) -> Self {
        let alphabet = problem
            .sequences
            .iter()
            .flatten()
            .copied()
            .max()
            .unwrap_or(0)
            .max(1);
        EmbeddingLayout {
            n_seq: problem.sequences.len(),
            state_dims: problem.fixture.state_dims(),
            alphabet,
            slots,
        }
    }

    pub fn width(&self) -> usize {
        self.one() + 1 + self.slots
    }

    pub const IN_FLAG: usize = 0;
    pub const IN_VAL: usize = 1;
    pub const ST_FLAG: usize = 2;

    pub fn state(&self, k: usize) -> usize {
        3 + k
    }

    pub fn dp_flag(&self) -> usize {
        3 + self.state_dims
    }

    pub fn dp_val(&self) -> usize {
        self.dp_flag() + 1
    }

    pub fn ans_flag(&self) -> usize {
        self.dp_flag() + 2
    }

    pub fn ans_val(&self) -> usize {
        self.dp_flag() + 3
    }

    pub fn sep(&self, k: usize) -> usize {
        self.dp_flag() + 4 + k
    }

    pub fn t(&self) -> usize {
        self.sep(self.n_seq)
    }

    pub fn one(&self) -> usize {
        self.t() + 1
    }

    pub fn slot(&self, s: usize) -> usize {
        self.one() + 1 + s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenBody {
    Input {
        value: u32,
    },
    /// Separator closing sequence `index` (1-based).
    Sep {
        index: usize,
    },
    Step {
        state: Vec<i64>,
        dp: i64,
    },
    Answer {
        value: i64,
    },
}

/// Intermediate quantities computed while producing a token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkFields {
    pub n: Vec<i64>,
    pub next_state: Vec<i64>,
    pub p_s: Vec<i64>,
    pub p_dp: Vec<i64>,
    pub p_answer: Vec<i64>,
    pub f_answer: bool,
    pub f_state: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotToken {
    pub t: usize,
    pub body: TokenBody,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub work: Option<WorkFields>,
}

impl CotToken {
    pub fn new(t: usize, body: TokenBody) -> Self {
        CotToken {
            t,
            body,
            work: None,
        }
    }

    pub fn embed(&self, layout: &EmbeddingLayout) -> Vec<f64> {
        let mut v = vec![0.0; layout.width()];
        match &self.body {
            TokenBody::Input { value } => {
                v[EmbeddingLayout::IN_FLAG] = 1.0;
                v[EmbeddingLayout::IN_VAL] = *value as f64;
            }
            TokenBody::Sep { index } => v[layout.sep(index - 1)] = 1.0,
            TokenBody::Step { state, dp } => {
                v[EmbeddingLayout::ST_FLAG] = 1.0;
                for (k, c) in state.iter().enumerate() {
                    v[layout.state(k)] = *c as f64;
                }
                v[layout.dp_flag()] = 1.0;
                v[layout.dp_val()] = *dp as f64;
            }
            TokenBody::Answer { value } => {
                v[layout.ans_flag()] = 1.0;
                v[layout.ans_val()] = *value as f64;
            }
        }
        v[layout.t()] = self.t as f64;
        v[layout.one()] = 1.0;
        if layout.slots > 0 {
            v[layout.slot((self.t - 1) % layout.slots)] = 1.0;
        }
        v
    }
}

fn as_int(v: f64, what: &str) -> Result<i64> {
    if v.fract() != 0.0 || !v.is_finite() {
        return Err(Error::MalformedTrace(format!(
            "{what} = {v} is not an integer"
        )));
    }
    Ok(v as i64)
}

fn as_flag(v: f64, what: &str) -> Result<bool> {
    match v {
        x if x == 0.0 => Ok(false),
        x if x == 1.0 => Ok(true),
        _ => Err(Error::MalformedTrace(format!("{what} = {v} is not a flag"))),
    }
}

/// Reads a token vector back, enforcing the one-group discipline.
pub fn decode_token(layout: &EmbeddingLayout, v: &[f64]) -> Result<CotToken> {
    if v.len() != layout.width() {
        return Err(Error::dim("decode_token", layout.width(), v.len()));
    }
    if v[layout.one()] != 1.0 {
        return Err(Error::MalformedTrace(format!(
            "constant field is {}",
            v[layout.one()]
        )));
    }
    let t = as_int(v[layout.t()], "t")?;
    if t < 1 {
        return Err(Error::MalformedTrace(format!("position {t} < 1")));
    }
    let t = t as usize;
    let input = as_flag(v[EmbeddingLayout::IN_FLAG], "input flag")?;
    let step = as_flag(v[EmbeddingLayout::ST_FLAG], "state flag")?;
    if step != as_flag(v[layout.dp_flag()], "dp flag")? {
        return Err(Error::MalformedTrace("state and dp flags disagree".into()));
    }
    let answer = as_flag(v[layout.ans_flag()], "answer flag")?;
    let mut seps = Vec::new();
    for k in 0..layout.n_seq {
        if as_flag(v[layout.sep(k)], "separator")? {
            seps.push(k + 1);
        }
    }
    let active = input as usize + step as usize + answer as usize + seps.len();
    if active != 1 {
        return Err(Error::MalformedTrace(format!(
            "{active} active groups at t = {t}"
        )));
    }
    let zero_outside = |range: &[usize]| range.iter().all(|&i| v[i] == 0.0);
    let state_fields: Vec<usize> = (0..layout.state_dims).map(|k| layout.state(k)).collect();
    let body = if input {
        if !zero_outside(&state_fields) || v[layout.dp_val()] != 0.0 || v[layout.ans_val()] != 0.0 {
            return Err(Error::MalformedTrace(format!(
                "stray fields on input token at t = {t}"
            )));
        }
        let value = as_int(v[EmbeddingLayout::IN_VAL], "input value")?;
        if value < 0 || value > layout.alphabet as i64 {
            return Err(Error::MalformedTrace(format!(
                "symbol {value} outside alphabet"
            )));
        }
        TokenBody::Input {
            value: value as u32,
        }
    } else if step {
        if v[EmbeddingLayout::IN_VAL] != 0.0 || v[layout.ans_val()] != 0.0 {
            return Err(Error::MalformedTrace(format!(
                "stray fields on step token at t = {t}"
            )));
        }
        let state = state_fields
            .iter()
            .map(|&i| as_int(v[i], "state coordinate"))
            .collect::<Result<Vec<_>>>()?;
        TokenBody::Step {
            state,
            dp: as_int(v[layout.dp_val()], "dp value")?,
        }
    } else if answer {
        if v[EmbeddingLayout::IN_VAL] != 0.0
            || !zero_outside(&state_fields)
            || v[layout.dp_val()] != 0.0
        {
            return Err(Error::MalformedTrace(format!(
                "stray fields on answer token at t = {t}"
            )));
        }
        TokenBody::Answer {
            value: as_int(v[layout.ans_val()], "answer")?,
        }
    } else {
        if v[EmbeddingLayout::IN_VAL] != 0.0
            || !zero_outside(&state_fields)
            || v[layout.dp_val()] != 0.0
            || v[layout.ans_val()] != 0.0
        {
            return Err(Error::MalformedTrace(format!(
                "stray fields on separator at t = {t}"
            )));
        }
        TokenBody::Sep { index: seps[0] }
    };
    if layout.slots > 0 {
        for s in 0..layout.slots {
            let want = s == (t - 1) % layout.slots;
            if as_flag(v[layout.slot(s)], "slot")? != want {
                return Err(Error::MalformedTrace(format!(
                    "slot field does not match t = {t}"
                )));
            }
        }
    }
    Ok(CotToken::new(t, body))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Prompt,
    DpSteps,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotTrace {
    pub layout: EmbeddingLayout,
    pub prompt_len: usize,
    pub tokens: Vec<CotToken>,
}

impl CotTrace {
    pub fn phase(&self) -> Phase {
        match self.tokens.last().map(|t| &t.body) {
            Some(TokenBody::Answer { .. }) => Phase::Answer,
            _ if self.tokens.len() > self.prompt_len => Phase::DpSteps,
            _ => Phase::Prompt,
        }
    }

    pub fn get(&self, t: usize) -> Option<&CotToken> {
        t.checked_sub(1).and_then(|i| self.tokens.get(i))
    }

    pub fn steps(&self) -> impl Iterator<Item = &CotToken> {
        self.tokens
            .iter()
            .filter(|t| matches!(t.body, TokenBody::Step { .. }))
    }

    pub fn answer(&self) -> Option<i64> {
        match self.tokens.last()?.body {
            TokenBody::Answer { value } => Some(value),
            _ => None,
        }
    }

    /// Positions are `1..`, every token re-decodes to itself, and the sections
    /// come in prompt, step, answer order.
    pub fn check_well_formed(&self) -> Result<()> {
        let mut section = 0;
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.t != i + 1 {
                return Err(Error::MalformedTrace(format!(
                    "token {} carries t = {}",
                    i + 1,
                    tok.t
                )));
            }
            let back = decode_token(&self.layout, &tok.embed(&self.layout))?;
            if back.body != tok.body {
                return Err(Error::MalformedTrace(format!(
                    "token {} does not round-trip",
                    tok.t
                )));
            }
            let s = match tok.body {
                TokenBody::Input { .. } | TokenBody::Sep { .. } => 0,
                TokenBody::Step { .. } => 1,
                TokenBody::Answer { .. } => 2,
            };
            if s < section || (i < self.prompt_len) != (s == 0) || (section == 2 && s == 2) {
                return Err(Error::MalformedTrace(format!(
                    "token {} out of section order",
                    tok.t
                )));
            }
            section = s;
        }
        Ok(())
    }
}

/// Lays out `s(1) | s(2) | ... | s(N)`, each sequence closed by its separator.
pub fn encode_prompt(problem: &DpProblem, layout: &EmbeddingLayout) -> Result<CotTrace> {
    if layout.n_seq != problem.sequences.len() {
        return Err(Error::dim(
            "encode_prompt sequences",
            layout.n_seq,
            problem.sequences.len(),
        ));
    }
    let mut tokens = Vec::new();
    for (k, seq) in problem.sequences.iter().enumerate() {
        for &value in seq {
            if value > layout.alphabet {
                return Err(Error::Input(format!(
                    "symbol {value} overflows alphabet bound {}",
                    layout.alphabet
                )));
            }
            tokens.push(CotToken::new(tokens.len() + 1, TokenBody::Input { value }));
        }
        tokens.push(CotToken::new(
            tokens.len() + 1,
            TokenBody::Sep { index: k + 1 },
        ));
    }
    Ok(CotTrace {
        layout: layout.clone(),
        prompt_len: tokens.len(),
        tokens,
    })
}

/// Recovers the sequences by re-scanning the prompt section.
pub fn decode_prompt(trace: &CotTrace) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for tok in trace.tokens.iter().take(trace.prompt_len) {
        match tok.body {
            TokenBody::Input { value } => cur.push(value),
            TokenBody::Sep { index } => {
                if index != out.len() + 1 {
                    return Err(Error::MalformedTrace(format!(
                        "separator {index} out of order"
                    )));
                }
                out.push(std::mem::take(&mut cur));
            }
            _ => {
                return Err(Error::MalformedTrace(format!(
                    "non-prompt token at t = {}",
                    tok.t
                )))
            }
        }
    }
    if !cur.is_empty() || out.len() != trace.layout.n_seq {
        return Err(Error::MalformedTrace("prompt is missing separators".into()));
    }
    Ok(out)
}
