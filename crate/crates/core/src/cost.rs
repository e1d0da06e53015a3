//! Storage and multiply-add accounting for chain-of-thought runs, plus the
//! closed-form orders for the model families being compared.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense sub-block executed during one generated token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostEvent {
    /// Copy block storing every token so far: `live x width` state.
    FullCopy { live: usize, width: usize },
    /// Copy block holding a fixed ring of `slots` tokens, read through a
    /// selection program of `select_ops` multiply-adds.
    WindowCopy {
        slots: usize,
        width: usize,
        select_ops: u64,
    },
    /// Separator-keyed copy with one stored scalar per key.
    KeyedCopy { keys: usize },
    /// Feedforward program with the given sparse multiply-add count.
    Program { ops: u64 },
}

impl CostEvent {
    pub fn state(&self) -> u64 {
        match *self {
            CostEvent::FullCopy { live, width } => (live * width) as u64,
            CostEvent::WindowCopy { slots, width, .. } => (slots * width) as u64,
            CostEvent::KeyedCopy { keys } => keys as u64,
            CostEvent::Program { .. } => 0,
        }
    }

    /// A scan step costs three multiply-adds per live state scalar (decay,
    /// write, readout); the one-hot position query costs eight per position.
    pub fn ops(&self) -> u64 {
        match *self {
            CostEvent::FullCopy { live, width } => (3 * live * width + 8 * live) as u64,
            CostEvent::WindowCopy {
                slots,
                width,
                select_ops,
            } => (3 * slots * width) as u64 + select_ops,
            CostEvent::KeyedCopy { keys } => 3 * keys as u64,
            CostEvent::Program { ops } => ops,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvents {
    /// Position of the token the step reads from.
    pub t: usize,
    pub events: Vec<CostEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCost {
    pub t: usize,
    pub state_scalars: u64,
    pub step_ops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub per_step: Vec<StepCost>,
    pub total_ops: u64,
    pub peak_state: u64,
}

impl CostLedger {
    pub fn steps(&self) -> usize {
        self.per_step.len()
    }

    pub fn charge(&mut self, step: &StepEvents) {
        let state_scalars = step.events.iter().map(CostEvent::state).sum();
        let step_ops = step.events.iter().map(CostEvent::ops).sum();
        self.total_ops += step_ops;
        self.peak_state = self.peak_state.max(state_scalars);
        self.per_step.push(StepCost {
            t: step.t,
            state_scalars,
            step_ops,
        });
    }

    /// `total_ops` equals the step sum and the running peak is consistent.
    pub fn is_consistent(&self) -> bool {
        let sum: u64 = self.per_step.iter().map(|s| s.step_ops).sum();
        let peak = self
            .per_step
            .iter()
            .map(|s| s.state_scalars)
            .max()
            .unwrap_or(0);
        sum == self.total_ops && peak == self.peak_state
    }
}

/// Recounts a ledger from the recorded events of a run.
pub fn instrument(events: &[StepEvents]) -> CostLedger {
    let mut ledger = CostLedger::default();
    for e in events {
        ledger.charge(e);
    }
    ledger
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    StandardTf,
    SparseTf,
    Mamba,
    MambaLocal,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::StandardTf,
        Family::SparseTf,
        Family::Mamba,
        Family::MambaLocal,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Family::StandardTf => "standard-tf",
            Family::SparseTf => "sparse-tf",
            Family::Mamba => "mamba",
            Family::MambaLocal => "mamba-local",
        }
    }
}

/// Unit-constant orders of storage, per-step and total cost at horizon `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticCostModel {
    pub family: Family,
    pub t: usize,
    pub m: usize,
    pub storage: f64,
    pub per_step: f64,
    pub total: f64,
    pub warning: Option<String>,
}

pub fn analytic_costs(family: Family, t: usize, m: usize) -> Result<AnalyticCostModel> {
    if t == 0 {
        return Err(Error::Config("horizon T must be at least 1".into()));
    }
    let mut warning = None;
    let m = if family == Family::MambaLocal && m > t {
        warning = Some(format!("window m = {m} exceeds T = {t}; clipped to {t}"));
        t
    } else {
        m
    };
    let tf = t as f64;
    let (storage, per_step) = match family {
        Family::StandardTf => (1.0, tf),
        Family::SparseTf => (tf.sqrt(), tf),
        Family::Mamba => (tf, tf),
        Family::MambaLocal => (m as f64, m as f64),
    };
    Ok(AnalyticCostModel {
        family,
        t,
        m,
        storage,
        per_step,
        total: per_step * tf,
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub exponent: f64,
    pub log_intercept: f64,
    pub r_squared: f64,
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_scaling(points: &[(f64, f64)]) -> Result<ScalingFit> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 5 {
        return Err(Error::Config(format!(
            "scaling fit needs 5 distinct T values, got {}",
            xs.len()
        )));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0) || !(y > 0.0)) {
        return Err(Error::Config(
            "scaling fit needs positive T and totals".into(),
        ));
    }
    if xs[xs.len() - 1] < 8.0 * xs[0] {
        return Err(Error::Config(format!(
            "scaling fit grid spans {}..{}, less than 8x",
            xs[0],
            xs[xs.len() - 1]
        )));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let exponent = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(ScalingFit {
        exponent,
        log_intercept: my - exponent * mx,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        let s = analytic_costs(Family::StandardTf, 10, 0).unwrap();
        assert_eq!((s.storage, s.total), (1.0, 100.0));
        let l = analytic_costs(Family::MambaLocal, 40, 3).unwrap();
        assert_eq!(l.total, 120.0);
        assert!(l.warning.is_none());
        let c = analytic_costs(Family::MambaLocal, 4, 9).unwrap();
        assert_eq!(c.m, 4);
        assert!(c.warning.is_some());
        for f in Family::ALL {
            let a = analytic_costs(f, 1, 1).unwrap();
            assert_eq!((a.storage, a.per_step, a.total), (1.0, 1.0, 1.0), "{f:?}");
        }
        assert!(analytic_costs(Family::Mamba, 0, 1).is_err());
    }

    #[test]
    fn totals_bracket_step_sums() {
        for f in Family::ALL {
            for t in 1..60 {
                let total = analytic_costs(f, t, 3).unwrap().total;
                let sum: f64 = (1..=t)
                    .map(|s| analytic_costs(f, s, 3.min(s)).unwrap().per_step)
                    .sum();
                assert!(
                    sum <= total + 1e-9 && total <= 2.0 * sum + 1e-9,
                    "{f:?} T={t}"
                );
                if f == Family::MambaLocal && t >= 3 {
                    let flat: f64 = (1..=t).map(|_| 3.0).sum();
                    assert_eq!(flat, total);
                }
            }
        }
    }

    #[test]
    fn exact_power_law() {
        let pts: Vec<(f64, f64)> = [8.0, 16.0, 24.0, 32.0, 64.0]
            .iter()
            .map(|&t| (t, 3.5 * t * t))
            .collect();
        let fit = fit_scaling(&pts).unwrap();
        assert!((fit.exponent - 2.0).abs() < 1e-6);
        assert!((fit.log_intercept - 3.5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn degenerate_grids() {
        let four: Vec<(f64, f64)> = [8.0, 16.0, 32.0, 64.0].iter().map(|&t| (t, t)).collect();
        assert!(fit_scaling(&four).is_err());
        let narrow: Vec<(f64, f64)> = (8..13).map(|t| (t as f64, 1.0)).collect();
        assert!(fit_scaling(&narrow).is_err());
        let repeated: Vec<(f64, f64)> = (0..10).map(|_| (8.0, 1.0)).collect();
        assert!(fit_scaling(&repeated).is_err());
    }

    #[test]
    fn ledger_sums_and_shadow_count() {
        let steps = vec![
            StepEvents {
                t: 5,
                events: vec![
                    CostEvent::FullCopy { live: 5, width: 3 },
                    CostEvent::Program { ops: 7 },
                ],
            },
            StepEvents {
                t: 6,
                events: vec![
                    CostEvent::WindowCopy {
                        slots: 2,
                        width: 3,
                        select_ops: 11,
                    },
                    CostEvent::KeyedCopy { keys: 2 },
                ],
            },
        ];
        let mut live = CostLedger::default();
        live.charge(&steps[0]);
        assert_eq!(live.total_ops, live.per_step[0].step_ops);
        live.charge(&steps[1]);
        assert!(live.is_consistent());
        assert_eq!(live, instrument(&steps));
        assert_eq!(live.per_step[0].state_scalars, 15);
        assert_eq!(live.per_step[0].step_ops, 45 + 40 + 7);
        assert_eq!(live.per_step[1].step_ops, 18 + 11 + 6);
    }
}
