//! Host-side table-filling solutions for the fixture problems.

use super::fixtures::{DpProblem, Fixture};
use crate::error::Result;

pub fn dp_oracle(problem: &DpProblem) -> Result<i64> {
    problem.validate()?;
    let s = &problem.sequences;
    Ok(match problem.fixture {
        Fixture::EditDistance => edit_distance(&s[0], &s[1]),
        Fixture::Lis => lis(&s[0]),
        Fixture::WindowedMax { m } => windowed_max(s[0].len(), &s[1], m),
    })
}

fn edit_distance(a: &[u32], b: &[u32]) -> i64 {
    let mut prev: Vec<i64> = (0..=b.len() as i64).collect();
    for (i, x) in a.iter().enumerate() {
        let mut row = vec![i as i64 + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            row[j + 1] = (prev[j] + (x != y) as i64)
                .min(prev[j + 1] + 1)
                .min(row[j] + 1);
        }
        prev = row;
    }
    prev[b.len()]
}

fn lis(s: &[u32]) -> i64 {
    let mut best = vec![1i64; s.len()];
    for i in 0..s.len() {
        for j in 0..i {
            if s[j] < s[i] {
                best[i] = best[i].max(best[j] + 1);
            }
        }
    }
    best.into_iter().max().unwrap_or(0)
}

fn windowed_max(steps: usize, seeds: &[u32], m: usize) -> i64 {
    let mut stream: Vec<i64> = seeds.iter().map(|&v| v as i64).collect();
    for i in 0..steps {
        let v = *stream[i..i + m].iter().max().unwrap();
        stream.push(v);
    }
    *stream.last().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn edit_rec(a: &[u32], b: &[u32]) -> i64 {
        match (a.split_last(), b.split_last()) {
            (None, _) => b.len() as i64,
            (_, None) => a.len() as i64,
            (Some((x, ra)), Some((y, rb))) => (edit_rec(ra, rb) + (x != y) as i64)
                .min(edit_rec(ra, b) + 1)
                .min(edit_rec(a, rb) + 1),
        }
    }

    fn lis_subsets(s: &[u32]) -> i64 {
        (0u32..1 << s.len())
            .filter_map(|mask| {
                let picked: Vec<u32> = (0..s.len())
                    .filter(|k| mask >> k & 1 == 1)
                    .map(|k| s[k])
                    .collect();
                picked
                    .windows(2)
                    .all(|w| w[0] < w[1])
                    .then_some(picked.len() as i64)
            })
            .max()
            .unwrap()
    }

    fn windowed_rec(k: usize, seeds: &[u32], m: usize) -> i64 {
        if k < m {
            seeds[k] as i64
        } else {
            (k - m..k).map(|j| windowed_rec(j, seeds, m)).max().unwrap()
        }
    }

    #[test]
    fn fixed_cases() {
        assert_eq!(dp_oracle(&DpProblem::edit_distance(&[], &[1])).unwrap(), 1);
        assert_eq!(
            dp_oracle(&DpProblem::edit_distance(&[1, 2], &[2])).unwrap(),
            1
        );
        assert_eq!(dp_oracle(&DpProblem::lis(&[1, 3, 2])).unwrap(), 2);
        assert_eq!(dp_oracle(&DpProblem::windowed_max(1, &[4])).unwrap(), 4);
    }

    proptest! {
        #[test]
        fn edit_matches_recursion(a in prop::collection::vec(1u32..4, 0..6), b in prop::collection::vec(1u32..4, 0..6)) {
            prop_assert_eq!(dp_oracle(&DpProblem::edit_distance(&a, &b)).unwrap(), edit_rec(&a, &b));
        }

        #[test]
        fn lis_matches_subsets(s in prop::collection::vec(1u32..9, 1..10)) {
            prop_assert_eq!(dp_oracle(&DpProblem::lis(&s)).unwrap(), lis_subsets(&s));
        }

        #[test]
        fn windowed_matches_recursion(steps in 1usize..9, seeds in prop::collection::vec(0u32..20, 1..4)) {
            let m = seeds.len();
            let want = windowed_rec(m + steps - 1, &seeds, m);
            prop_assert_eq!(dp_oracle(&DpProblem::windowed_max(steps, &seeds)).unwrap(), want);
        }
    }
}
