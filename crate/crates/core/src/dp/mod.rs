//! Dynamic programs solved by emitting one `(state, dp)` token per state.

pub mod embed;
pub mod fixtures;
pub mod machine;
pub mod oracle;

pub use embed::{
    decode_prompt, decode_token, encode_prompt, CotToken, CotTrace, EmbeddingLayout, Phase,
    TokenBody, SENTINEL,
};
pub use fixtures::{build_programs, Dep, DpProblem, Fixture, Programs};
pub use machine::{build_local_dp_model, cot_solve, snap, CotRun, LocalDpModel, Mode};
pub use oracle::dp_oracle;

/// Maps every step token's read positions back to inputs and states.
pub fn replay_dependencies(
    problem: &DpProblem,
    trace: &CotTrace,
) -> crate::Result<Vec<(Vec<i64>, Vec<Dep>)>> {
    let mut input_at = std::collections::HashMap::new();
    for (seq, s) in problem.sequences.iter().enumerate() {
        for index in 0..s.len() {
            input_at.insert(
                problem.input_position(seq, index) as i64,
                Dep::Input { seq, index },
            );
        }
    }
    let mut out = Vec::new();
    for tok in trace.steps() {
        let work = tok.work.as_ref().ok_or_else(|| {
            crate::Error::MalformedTrace(format!("step at t = {} has no work fields", tok.t))
        })?;
        let mut deps = Vec::new();
        for &p in work.p_s.iter().chain(&work.p_dp) {
            if p == SENTINEL {
                continue;
            }
            if p as usize >= tok.t {
                return Err(crate::Error::MalformedTrace(format!(
                    "token at t = {} reads position {p} that is not yet written",
                    tok.t
                )));
            }
            let dep = match (input_at.get(&p), trace.get(p as usize).map(|x| &x.body)) {
                (Some(d), _) => d.clone(),
                (None, Some(TokenBody::Step { state, .. })) => Dep::State(state.clone()),
                _ => {
                    return Err(crate::Error::MalformedTrace(format!(
                        "position {p} read at t = {} holds neither input nor state",
                        tok.t
                    )))
                }
            };
            deps.push(dep);
        }
        out.push((work.next_state.clone(), deps));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    const EPS: f64 = 0.25;

    #[test]
    fn single_deletion() {
        let p = DpProblem::edit_distance(&[1, 2], &[2]);
        let run = cot_solve(&p, Mode::Semantic, EPS).unwrap();
        assert_eq!(run.answer, 1);
        let cell = run
            .trace
            .steps()
            .find_map(|t| match &t.body {
                TokenBody::Step { state, dp } if state == &vec![2, 2] => Some(*dp),
                _ => None,
            })
            .unwrap();
        let table = |i: usize, j: usize| {
            dp_oracle(&DpProblem::edit_distance(
                &p.sequences[0][..i],
                &p.sequences[1][..j],
            ))
            .unwrap()
        };
        let want = (table(0, 0) + 1).min(table(0, 1) + 1).min(table(1, 0) + 1);
        assert_eq!(cell, want);
        assert_eq!(run.trace.phase(), Phase::Answer);
        let first = run
            .trace
            .get(p.prompt_len() + 1)
            .unwrap()
            .work
            .as_ref()
            .unwrap();
        assert_eq!(first.n, vec![2, 1]);
    }

    #[test]
    fn increasing_subsequence() {
        let run = cot_solve(&DpProblem::lis(&[1, 3, 2]), Mode::Semantic, EPS).unwrap();
        assert_eq!(run.answer, 2);
        assert_eq!(run.trace.steps().count(), 9);
    }

    #[test]
    fn one_state_problem() {
        let p = DpProblem::edit_distance(&[], &[]);
        let run = cot_solve(&p, Mode::Semantic, EPS).unwrap();
        let bodies: Vec<_> = run.trace.tokens[p.prompt_len()..]
            .iter()
            .map(|t| t.body.clone())
            .collect();
        assert_eq!(
            bodies,
            vec![
                TokenBody::Step {
                    state: vec![1, 1],
                    dp: 0
                },
                TokenBody::Answer { value: 0 }
            ]
        );
        let n = &run.trace.tokens[p.prompt_len()].work.as_ref().unwrap().n;
        assert_eq!(n, &vec![0, 0]);
    }

    #[test]
    fn last_state_sets_flags() {
        let run = cot_solve(
            &DpProblem::edit_distance(&[1], &[2, 1]),
            Mode::Semantic,
            EPS,
        )
        .unwrap();
        let last = run.trace.tokens.last().unwrap().work.as_ref().unwrap();
        assert!(last.f_state);
        assert!(last.p_s.iter().chain(&last.p_dp).all(|p| *p == SENTINEL));
        let steps: Vec<_> = run.trace.steps().collect();
        let (final_step, rest) = steps.split_last().unwrap();
        assert!(final_step.work.as_ref().unwrap().f_answer);
        assert!(rest.iter().all(|t| !t.work.as_ref().unwrap().f_answer));
    }

    #[test]
    fn dependency_replay_matches_declared_lists() {
        for p in [
            DpProblem::edit_distance(&[1, 2, 2], &[2, 1]),
            DpProblem::lis(&[4, 1, 3, 2, 5]),
            DpProblem::windowed_max(7, &[3, 9, 1]),
        ] {
            let run = cot_solve(&p, Mode::Semantic, EPS).unwrap();
            let n = p.sizes();
            for (state, deps) in replay_dependencies(&p, &run.trace).unwrap() {
                assert_eq!(
                    deps,
                    p.fixture.dependencies(&n, &state),
                    "{:?} at {state:?}",
                    p.fixture
                );
            }
        }
    }

    #[test]
    fn gadget_trace_equals_semantic_trace() {
        for p in [
            DpProblem::edit_distance(&[1, 2], &[2, 2]),
            DpProblem::lis(&[2, 3, 1]),
            DpProblem::windowed_max(4, &[2, 7]),
        ] {
            let exact = cot_solve(&p, Mode::Semantic, EPS).unwrap();
            let approx = cot_solve(&p, Mode::Gadget, EPS).unwrap();
            assert_eq!(exact.trace, approx.trace);
            assert_eq!(exact.ledger, approx.ledger);
            assert_eq!(approx.answer, dp_oracle(&p).unwrap());
        }
    }

    #[test]
    fn local_model_matches_unwindowed_run() {
        let p = DpProblem::windowed_max(40, &[5, 11, 2]);
        let model = build_local_dp_model(&p, EPS).unwrap();
        let local = model.solve(Mode::Semantic).unwrap();
        let full = cot_solve(&p, Mode::Semantic, EPS).unwrap();
        assert_eq!(local.answer, full.answer);
        assert_eq!(local.answer, 11);
        let states: Vec<u64> = local
            .ledger
            .per_step
            .iter()
            .map(|s| s.state_scalars)
            .collect();
        assert!(states.iter().all(|s| *s == states[0]));
        let gadget = model.solve(Mode::Gadget).unwrap();
        assert_eq!(gadget.trace, local.trace);
    }

    #[test]
    fn running_maximum_with_unit_window() {
        for seed in [0u32, 4, 9] {
            let p = DpProblem::windowed_max(6, &[seed]);
            let run = build_local_dp_model(&p, EPS)
                .unwrap()
                .solve(Mode::Semantic)
                .unwrap();
            assert_eq!(run.answer, seed as i64);
        }
    }

    #[test]
    fn narrow_window_is_a_locality_violation() {
        let mut p = DpProblem::windowed_max(5, &[1, 2, 3]);
        p.locality = Some(2);
        let model = build_local_dp_model(&p, EPS).unwrap();
        for mode in [Mode::Semantic, Mode::Gadget] {
            assert!(matches!(
                model.solve(mode),
                Err(Error::Locality { window: 2, .. })
            ));
        }
        assert!(build_local_dp_model(&DpProblem::lis(&[1]), EPS).is_err());
    }

    #[test]
    fn step_cap_is_enforced() {
        let mut p = DpProblem::lis(&[1, 2, 3]);
        p.step_cap = Some(4);
        assert_eq!(
            cot_solve(&p, Mode::Semantic, EPS).unwrap_err(),
            Error::NonTermination { cap: 4 }
        );
    }

    #[test]
    fn snapping_rules() {
        assert_eq!(snap(2.0 + 1e-9, 0.25).unwrap(), 2);
        assert!(matches!(snap(2.3, 0.25), Err(Error::Precision { .. })));
        assert!(matches!(snap(2.5, 0.5), Err(Error::Precision { .. })));
        assert!(cot_solve(&DpProblem::lis(&[1]), Mode::Gadget, 0.6).is_err());
    }

    #[test]
    fn trace_dumps_to_json() {
        let run = cot_solve(&DpProblem::lis(&[2, 1]), Mode::Semantic, EPS).unwrap();
        let s = serde_json::to_string(&run.trace).unwrap();
        let back: CotTrace = serde_json::from_str(&s).unwrap();
        assert_eq!(back, run.trace);
        assert_eq!(decode_prompt(&back).unwrap(), vec![vec![2, 1]]);
    }

    #[test]
    fn ledgers_are_reproducible_and_recountable() {
        let p = DpProblem::windowed_max(12, &[3, 1, 2]);
        let a = cot_solve(&p, Mode::Semantic, EPS).unwrap();
        let b = cot_solve(&p, Mode::Semantic, EPS).unwrap();
        assert_eq!(a.ledger, b.ledger);
        assert_eq!(a.ledger, crate::cost::instrument(&a.events));
        assert!(a.ledger.is_consistent());
        assert_eq!(a.ledger.steps(), 13);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn semantic_runs_match_oracle(
            a in prop::collection::vec(1u32..4, 0..5),
            b in prop::collection::vec(1u32..4, 0..5),
            s in prop::collection::vec(1u32..20, 1..7),
            steps in 1usize..12,
            seeds in prop::collection::vec(0u32..30, 1..4),
        ) {
            for p in [DpProblem::edit_distance(&a, &b), DpProblem::lis(&s), DpProblem::windowed_max(steps, &seeds)] {
                let run = cot_solve(&p, Mode::Semantic, EPS).unwrap();
                prop_assert_eq!(run.answer, dp_oracle(&p).unwrap());
                prop_assert_eq!(run.trace.steps().count(), p.state_count());
                let sizes = run.trace.tokens[p.prompt_len()].work.as_ref().unwrap().n.clone();
                prop_assert_eq!(sizes, p.sizes());
            }
        }

        #[test]
        fn ledger_totals_are_step_sums(steps in 1usize..20, m in 1usize..4) {
            let p = DpProblem::windowed_max(steps, &vec![1; m]);
            let run = cot_solve(&p, Mode::Semantic, EPS).unwrap();
            prop_assert!(run.ledger.is_consistent());
            let st: Vec<u64> = run.ledger.per_step.iter().map(|s| s.state_scalars).collect();
            prop_assert!(st.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
