//! Layered ReLU circuits over integer-valued lanes.
//!
//! Programs are written with [`CircuitBuilder`]; a [`Value`] is an affine
//! combination of lanes that all live at one depth, and `relu` opens a lane
//! one level deeper. Mixing depths lifts the shallower side through identity
//! ReLUs (nonnegative lanes pass unchanged; signed inputs are split into their
//! positive and negative parts). The finished [`Circuit`] is a stack of
//! `relu(W h + b)` layers followed by a linear readout, which evaluates exactly
//! or compiles into emulated-ReLU Mamba blocks.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gadgets::relu_emulation_block;
use crate::linalg::Matrix;
use crate::ssm::{BlockStream, MambaBlockParams};

/// Upper bound on the slope of `z ↦ silu(λz)/λ`.
pub const EMULATED_RELU_LIPSCHITZ: f64 = 1.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Value {
    depth: Option<usize>,
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl Value {
    pub fn depth(&self) -> usize {
        self.depth.unwrap_or(0)
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Lane {
    depth: usize,
    pre: Option<Value>,
    nonneg: bool,
}

#[derive(Debug, Clone)]
pub struct CircuitBuilder {
    n_inputs: usize,
    lanes: Vec<Lane>,
    lifts: HashMap<(usize, usize), usize>,
    splits: HashMap<usize, (usize, usize)>,
}

impl CircuitBuilder {
    pub fn new(n_inputs: usize) -> Self {
        let lanes = (0..n_inputs)
            .map(|_| Lane {
                depth: 0,
                pre: None,
                nonneg: false,
            })
            .collect();
        CircuitBuilder {
            n_inputs,
            lanes,
            lifts: HashMap::new(),
            splits: HashMap::new(),
        }
    }

    pub fn input(&self, k: usize) -> Value {
        assert!(k < self.n_inputs, "input {k} out of range");
        Value {
            depth: Some(0),
            terms: vec![(k, 1.0)],
            constant: 0.0,
        }
    }

    pub fn inputs(&self) -> Vec<Value> {
        (0..self.n_inputs).map(|k| self.input(k)).collect()
    }

    pub fn constant(&self, c: f64) -> Value {
        Value {
            depth: None,
            terms: Vec::new(),
            constant: c,
        }
    }

    fn new_lane(&mut self, pre: Value) -> usize {
        let depth = pre.depth() + 1;
        self.lanes.push(Lane {
            depth,
            pre: Some(pre),
            nonneg: true,
        });
        self.lanes.len() - 1
    }

    fn lane_at(&mut self, lane: usize, depth: usize) -> Vec<(usize, f64)> {
        let l = &self.lanes[lane];
        if l.depth == depth {
            return vec![(lane, 1.0)];
        }
        assert!(l.depth < depth, "cannot lower a lane");
        if !l.nonneg {
            let (p, n) = match self.splits.get(&lane) {
                Some(s) => *s,
                None => {
                    let x = Value {
                        depth: Some(0),
                        terms: vec![(lane, 1.0)],
                        constant: 0.0,
                    };
                    let p = self.new_lane(x.clone());
                    let n = self.new_lane(Value {
                        terms: vec![(lane, -1.0)],
                        ..x
                    });
                    self.splits.insert(lane, (p, n));
                    (p, n)
                }
            };
            let mut out = self.lane_at(p, depth);
            out.extend(self.lane_at(n, depth).into_iter().map(|(k, c)| (k, -c)));
            return out;
        }
        if let Some(&k) = self.lifts.get(&(lane, depth)) {
            return vec![(k, 1.0)];
        }
        let below = self.lane_at(lane, depth - 1);
        let k = self.new_lane(Value {
            depth: Some(depth - 1),
            terms: below,
            constant: 0.0,
        });
        self.lifts.insert((lane, depth), k);
        vec![(k, 1.0)]
    }

    /// Re-expresses `v` with lanes at `depth`.
    pub fn lift(&mut self, v: &Value, depth: usize) -> Value {
        match v.depth {
            None => v.clone(),
            Some(d) if d == depth => v.clone(),
            Some(_) => {
                let mut terms: Vec<(usize, f64)> = Vec::new();
                for &(lane, c) in &v.terms {
                    for (k, w) in self.lane_at(lane, depth) {
                        terms.push((k, c * w));
                    }
                }
                Value {
                    depth: Some(depth),
                    terms: merge(terms),
                    constant: v.constant,
                }
            }
        }
    }

    /// `Σ c_k v_k + constant`.
    pub fn lin(&mut self, parts: &[(f64, &Value)], constant: f64) -> Value {
        let depth = parts.iter().filter_map(|(_, v)| v.depth).max();
        let mut terms = Vec::new();
        let mut c0 = constant;
        for (c, v) in parts {
            let v = match depth {
                Some(d) => self.lift(v, d),
                None => (*v).clone(),
            };
            terms.extend(v.terms.iter().map(|&(k, w)| (k, c * w)));
            c0 += c * v.constant;
        }
        let terms = merge(terms);
        Value {
            depth: if terms.is_empty() { None } else { depth },
            terms,
            constant: c0,
        }
    }

    pub fn add(&mut self, a: &Value, b: &Value) -> Value {
        self.lin(&[(1.0, a), (1.0, b)], 0.0)
    }

    pub fn sub(&mut self, a: &Value, b: &Value) -> Value {
        self.lin(&[(1.0, a), (-1.0, b)], 0.0)
    }

    pub fn scale(&mut self, a: &Value, c: f64) -> Value {
        self.lin(&[(c, a)], 0.0)
    }

    pub fn add_const(&mut self, a: &Value, c: f64) -> Value {
        self.lin(&[(1.0, a)], c)
    }

    pub fn relu(&mut self, v: &Value) -> Value {
        if v.is_constant() {
            return self.constant(v.constant.max(0.0));
        }
        if v.constant == 0.0
            && v.terms
                .iter()
                .all(|&(k, c)| c > 0.0 && self.lanes[k].nonneg)
        {
            return v.clone();
        }
        let k = self.new_lane(v.clone());
        Value {
            depth: Some(self.lanes[k].depth),
            terms: vec![(k, 1.0)],
            constant: 0.0,
        }
    }

    /// `[z >= c]` for integer `z`.
    pub fn ge(&mut self, z: &Value, c: f64) -> Value {
        let a = self.add_const(z, 1.0 - c);
        let b = self.add_const(z, -c);
        let ra = self.relu(&a);
        let rb = self.relu(&b);
        self.sub(&ra, &rb)
    }

    /// `[z == 0]` for integer `z`.
    pub fn is_zero(&mut self, z: &Value) -> Value {
        let p = self.relu(z);
        let nz = self.scale(z, -1.0);
        let n = self.relu(&nz);
        let inner = self.lin(&[(-1.0, &p), (-1.0, &n)], 1.0);
        self.relu(&inner)
    }

    pub fn eq(&mut self, a: &Value, b: &Value) -> Value {
        let d = self.sub(a, b);
        self.is_zero(&d)
    }

    pub fn not(&mut self, f: &Value) -> Value {
        self.lin(&[(-1.0, f)], 1.0)
    }

    /// Conjunction of 0/1 flags.
    pub fn and(&mut self, f: &Value, g: &Value) -> Value {
        let s = self.lin(&[(1.0, f), (1.0, g)], -1.0);
        self.relu(&s)
    }

    /// `v` when `flag = 1`, `0` when `flag = 0`; needs `0 <= v <= bound`.
    pub fn gate(&mut self, flag: &Value, v: &Value, bound: f64) -> Value {
        let s = self.lin(&[(1.0, v), (bound, flag)], -bound);
        self.relu(&s)
    }

    /// As [`Self::gate`] for `|v| <= bound`.
    pub fn gate_signed(&mut self, flag: &Value, v: &Value, bound: f64) -> Value {
        let p = self.lin(&[(1.0, v), (2.0 * bound, flag)], -2.0 * bound);
        let n = self.lin(&[(-1.0, v), (2.0 * bound, flag)], -2.0 * bound);
        let rp = self.relu(&p);
        let rn = self.relu(&n);
        self.sub(&rp, &rn)
    }

    pub fn max(&mut self, a: &Value, b: &Value) -> Value {
        let d = self.sub(a, b);
        let r = self.relu(&d);
        self.add(b, &r)
    }

    pub fn min(&mut self, a: &Value, b: &Value) -> Value {
        let d = self.sub(a, b);
        let r = self.relu(&d);
        self.sub(a, &r)
    }

    /// Piecewise-linear interpolation of `values` at integers
    /// `z0, z0 + 1, ...`; exact there and constant below `z0`.
    pub fn table(&mut self, z: &Value, z0: f64, values: &[f64]) -> Value {
        let mut parts: Vec<(f64, Value)> = Vec::new();
        let mut prev_slope = 0.0;
        for k in 0..values.len().saturating_sub(1) {
            let slope = values[k + 1] - values[k];
            let kink = slope - prev_slope;
            prev_slope = slope;
            if kink != 0.0 {
                let shifted = self.add_const(z, -(z0 + k as f64));
                let r = self.relu(&shifted);
                parts.push((kink, r));
            }
        }
        let refs: Vec<(f64, &Value)> = parts.iter().map(|(c, v)| (*c, v)).collect();
        self.lin(&refs, values.first().copied().unwrap_or(0.0))
    }

    pub fn finish(mut self, outputs: &[Value]) -> Circuit {
        let depth = outputs.iter().map(Value::depth).max().unwrap_or(0).max(1);
        let needs_const = outputs.iter().any(|v| v.constant != 0.0);
        let const_lane = if needs_const {
            let k = self.new_lane(Value {
                depth: Some(0),
                terms: Vec::new(),
                constant: 1.0,
            });
            Some(self.lane_at(k, depth)[0].0)
        } else {
            None
        };
        let lifted: Vec<Value> = outputs.iter().map(|v| self.lift(v, depth)).collect();

        let mut index: Vec<usize> = vec![usize::MAX; self.lanes.len()];
        let mut widths = vec![0usize; depth + 1];
        for (id, lane) in self.lanes.iter().enumerate() {
            if lane.depth <= depth {
                index[id] = widths[lane.depth];
                widths[lane.depth] += 1;
            }
        }
        let mut layers = Vec::with_capacity(depth);
        for l in 1..=depth {
            let mut w = Matrix::zeros(widths[l], widths[l - 1]);
            let mut b = vec![0.0; widths[l]];
            for (id, lane) in self.lanes.iter().enumerate().filter(|(_, x)| x.depth == l) {
                let row = index[id];
                let pre = lane.pre.as_ref().expect("deep lanes have a pre-activation");
                for &(k, c) in &pre.terms {
                    w[(row, index[k])] += c;
                }
                b[row] = pre.constant;
            }
            layers.push(Layer { w, b });
        }
        let mut out = Matrix::zeros(outputs.len(), widths[depth]);
        for (r, v) in lifted.iter().enumerate() {
            for &(k, c) in &v.terms {
                out[(r, index[k])] += c;
            }
            if v.constant != 0.0 {
                out[(r, index[const_lane.unwrap()])] += v.constant;
            }
        }
        Circuit {
            n_inputs: self.n_inputs,
            layers,
            out,
        }
    }
}

fn merge(mut terms: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    terms.sort_by_key(|t| t.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
    for (k, c) in terms {
        match out.last_mut() {
            Some(last) if last.0 == k => last.1 += c,
            _ => out.push((k, c)),
        }
    }
    out.retain(|t| t.1 != 0.0);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// `out · relu(W_D ... relu(W_1 x + b_1) ... + b_D)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub n_inputs: usize,
    pub layers: Vec<Layer>,
    pub out: Matrix,
}

impl Circuit {
    pub fn n_outputs(&self) -> usize {
        self.out.rows()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_inputs {
            return Err(Error::dim("Circuit::eval", self.n_inputs, x.len()));
        }
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer
                .w
                .matvec(&h)?
                .iter()
                .zip(&layer.b)
                .map(|(z, b)| (z + b).max(0.0))
                .collect();
        }
        self.out.matvec(&h)
    }

    /// Multiply-adds of a sparse evaluation (nonzero weights and biases).
    pub fn ops(&self) -> u64 {
        let layer_ops: usize = self
            .layers
            .iter()
            .map(|l| l.w.count_nonzero() + l.b.iter().filter(|b| **b != 0.0).count())
            .sum();
        (layer_ops + self.out.count_nonzero()) as u64
    }

    /// `K` such that running every ReLU as `silu(λz)/λ` moves each output by
    /// at most `K/λ`.
    pub fn error_coefficient(&self) -> f64 {
        let mut e = vec![0.0; self.n_inputs];
        for layer in &self.layers {
            e = (0..layer.w.rows())
                .map(|r| {
                    let prop: f64 = layer
                        .w
                        .row(r)
                        .iter()
                        .zip(&e)
                        .map(|(w, x)| w.abs() * x)
                        .sum();
                    EMULATED_RELU_LIPSCHITZ * prop + 1.0
                })
                .collect();
        }
        (0..self.out.rows())
            .map(|r| {
                self.out
                    .row(r)
                    .iter()
                    .zip(&e)
                    .map(|(w, x)| w.abs() * x)
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// Mamba blocks realizing the circuit to within `budget` per output.
    pub fn compile(&self, budget: f64) -> Result<CompiledCircuit> {
        if !(budget > 0.0) {
            return Err(Error::Config(format!(
                "circuit budget must be positive, got {budget}"
            )));
        }
        let k = self.error_coefficient();
        let lambda = (k / budget).ceil().max(1.0);
        let mut blocks = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let readout = if l + 1 == self.layers.len() {
                self.out.clone()
            } else {
                Matrix::identity(layer.w.rows())
            };
            blocks.push(relu_emulation_block(&layer.w, &layer.b, &readout, lambda)?);
        }
        Ok(CompiledCircuit {
            blocks,
            lambda,
            error_bound: k / lambda,
        })
    }
}

/// A circuit realized as a chain of Mamba blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledCircuit {
    pub blocks: Vec<MambaBlockParams>,
    pub lambda: f64,
    pub error_bound: f64,
}

impl CompiledCircuit {
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for b in &self.blocks {
            h = BlockStream::new(b)?.push(&h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check<F: Fn(&[i64]) -> Vec<i64>>(c: &Circuit, grid: &[Vec<i64>], f: F) {
        let compiled = c.compile(0.05).unwrap();
        for x in grid {
            let xf: Vec<f64> = x.iter().map(|v| *v as f64).collect();
            let want: Vec<f64> = f(x).into_iter().map(|v| v as f64).collect();
            assert_eq!(c.eval(&xf).unwrap(), want, "input {x:?}");
            let approx = compiled.eval(&xf).unwrap();
            for (a, w) in approx.iter().zip(&want) {
                assert!((a - w).abs() <= 0.05, "input {x:?}: {a} vs {w}");
            }
        }
    }

    fn grid2(lo: i64, hi: i64) -> Vec<Vec<i64>> {
        let mut g = Vec::new();
        for a in lo..=hi {
            for b in lo..=hi {
                g.push(vec![a, b]);
            }
        }
        g
    }

    #[test]
    fn basic_ops() {
        let mut b = CircuitBuilder::new(2);
        let (x, y) = (b.input(0), b.input(1));
        let mx = b.max(&x, &y);
        let mn = b.min(&x, &y);
        let eq = b.eq(&x, &y);
        let ge = b.ge(&x, 2.0);
        let s = b.add(&mx, &y);
        let c = b.finish(&[mx, mn, eq, ge, s]);
        check(&c, &grid2(-4, 4), |v| {
            let (x, y) = (v[0], v[1]);
            vec![
                x.max(y),
                x.min(y),
                (x == y) as i64,
                (x >= 2) as i64,
                x.max(y) + y,
            ]
        });
    }

    #[test]
    fn gates_and_flags() {
        let mut b = CircuitBuilder::new(2);
        let (f, v) = (b.input(0), b.input(1));
        let flag = b.ge(&f, 1.0);
        let g = b.gate(&flag, &v, 10.0);
        let gs = b.gate_signed(&flag, &v, 10.0);
        let nf = b.not(&flag);
        let both = b.and(&flag, &nf);
        let c = b.finish(&[g, gs, both]);
        let grid: Vec<Vec<i64>> = grid2(-3, 3)
            .into_iter()
            .map(|p| vec![p[0], p[1] * 3])
            .collect();
        check(&c, &grid, |p| {
            let on = p[0] >= 1;
            vec![
                if on { p[1].max(0) } else { 0 },
                if on { p[1] } else { 0 },
                0,
            ]
        });
    }

    #[test]
    fn table_is_exact_on_integers() {
        let vals: Vec<f64> = (0..12).map(|k| ((k * k) % 7) as f64).collect();
        let mut b = CircuitBuilder::new(1);
        let z = b.input(0);
        let t = b.table(&z, 3.0, &vals);
        let c = b.finish(&[t]);
        let grid: Vec<Vec<i64>> = (3..15).map(|k| vec![k]).collect();
        check(&c, &grid, |p| vec![(((p[0] - 3) * (p[0] - 3)) % 7)]);
    }

    #[test]
    fn constants_and_depth_zero_outputs() {
        let mut b = CircuitBuilder::new(2);
        let x = b.input(0);
        let y = b.input(1);
        let s = b.lin(&[(2.0, &x), (-1.0, &y)], 5.0);
        let k = b.constant(-3.0);
        let c = b.finish(&[s, k]);
        assert_eq!(c.depth(), 1);
        check(&c, &grid2(-3, 3), |p| vec![2 * p[0] - p[1] + 5, -3]);
    }

    #[test]
    fn ops_count_nonzeros() {
        let mut b = CircuitBuilder::new(1);
        let x = b.input(0);
        let r = b.relu(&x);
        let c = b.finish(&[r]);
        assert_eq!(c.ops(), 2);
        assert_eq!(c.error_coefficient(), 1.0);
    }
}
