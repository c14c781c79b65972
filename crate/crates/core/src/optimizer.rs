//! Limited-memory BFGS restricted to the nonnegative orthant.
//!
//! Bounds are handled by gradient projection: variables sitting on the bound
//! with an outward-pointing gradient are frozen, the two-loop recursion acts
//! on the remaining ones, and trial points are clipped back onto the feasible
//! set. Steps are chosen by backtracking from `s = 1` until the Armijo
//! condition holds, so every accepted iterate decreases the objective.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stored curvature pairs.
    pub memory: usize,
    pub max_iter: usize,
    /// Sup-norm threshold on the projected gradient.
    pub grad_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub lower_bound: f64,
    pub max_backtracks: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            memory: 10,
            max_iter: 300,
            grad_tol: 1e-7,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            lower_bound: 0.0,
            max_backtracks: 30,
        }
    }
}

impl SolverConfig {
    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::param("L-BFGS memory must be at least 1"));
        }
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::param(format!(
                "Wolfe constants must satisfy 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if !(self.grad_tol >= 0.0) || !self.lower_bound.is_finite() {
            return Err(Error::param("gradient tolerance and lower bound must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub projected_grad_norm: f64,
    pub step: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    /// The line search found no point below the current objective.
    NoProgress,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Entry 0 is the starting point.
    pub trace: Vec<IterationRecord>,
    pub termination: Termination,
    pub evaluations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn projected_grad_norm(x: &[f64], g: &[f64], lb: f64) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| if xi <= lb { gi.min(0.0).abs() } else { gi.abs() })
        .fold(0.0, f64::max)
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// r = H·q via the two-loop recursion with H₀ = (sᵀy / yᵀy)·I.
fn two_loop(memory: &VecDeque<Pair>, q: &[f64]) -> Vec<f64> {
    let mut r = q.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for p in memory.iter().rev() {
        let a = p.rho * dot(&p.s, &r);
        r.iter_mut().zip(&p.y).for_each(|(ri, yi)| *ri -= a * yi);
        alphas.push(a);
    }
    if let Some(last) = memory.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        r.iter_mut().for_each(|v| *v *= gamma);
    }
    for (p, a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = p.rho * dot(&p.y, &r);
        r.iter_mut().zip(&p.s).for_each(|(ri, si)| *ri += (a - b) * si);
    }
    r
}

/// Minimizes `f` over `x ≥ lower_bound` starting from the feasible point `x0`.
///
/// `f` returns the objective and overwrites its second argument with the gradient.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, cfg: &SolverConfig) -> Result<Solution>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    cfg.validate()?;
    let lb = cfg.lower_bound;
    if let Some(i) = x0.iter().position(|v| !(*v >= lb) || !v.is_finite()) {
        return Err(Error::param(format!("infeasible starting point: x[{i}] = {}", x0[i])));
    }
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut evaluations = 1;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("objective or gradient not finite at the starting point"));
    }

    let mut memory: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let mut trace = vec![IterationRecord {
        iter: 0,
        objective: fx,
        projected_grad_norm: projected_grad_norm(&x, &g, lb),
        step: 0.0,
    }];
    let mut termination = Termination::MaxIterations;
    let mut xt = vec![0.0; n];
    let mut gt = vec![0.0; n];

    for iter in 1..=cfg.max_iter {
        if trace.last().unwrap().projected_grad_norm <= cfg.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        let active: Vec<bool> = x.iter().zip(&g).map(|(&xi, &gi)| xi <= lb && gi > 0.0).collect();
        let q: Vec<f64> = g.iter().zip(&active).map(|(&gi, &a)| if a { 0.0 } else { gi }).collect();

        let steepest = |q: &[f64]| -> Vec<f64> {
            let nq = norm(q);
            q.iter().map(|v| -v / nq).collect()
        };
        let mut d = if memory.is_empty() {
            steepest(&q)
        } else {
            two_loop(&memory, &q).into_iter().map(|v| -v).collect()
        };
        for j in 0..n {
            if active[j] || (x[j] <= lb && d[j] < 0.0) {
                d[j] = 0.0;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            memory.clear();
            d = steepest(&q);
            for j in 0..n {
                if x[j] <= lb && d[j] < 0.0 {
                    d[j] = 0.0;
                }
            }
            slope = dot(&g, &d);
            if !(slope < 0.0) {
                termination = Termination::NoProgress;
                break;
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        let mut best: Option<(f64, f64)> = None; // (objective, step)
        for _ in 0..cfg.max_backtracks {
            for j in 0..n {
                xt[j] = (x[j] + step * d[j]).max(lb);
            }
            let ft = f(&xt, &mut gt);
            evaluations += 1;
            if ft.is_finite() {
                let moved: f64 = g.iter().zip(xt.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
                if ft <= fx + cfg.wolfe_c1 * moved && moved < 0.0 {
                    accepted = Some(ft);
                    break;
                }
                if ft < best.map_or(fx, |b| b.0) {
                    best = Some((ft, step));
                }
            }
            step *= 0.5;
        }
        let ft = match (accepted, best) {
            (Some(ft), _) => ft,
            (None, Some((fb, sb))) => {
                step = sb;
                for j in 0..n {
                    xt[j] = (x[j] + step * d[j]).max(lb);
                }
                f(&xt, &mut gt);
                evaluations += 1;
                fb
            }
            (None, None) => {
                termination = Termination::NoProgress;
                break;
            }
        };

        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm(&s) * norm(&y) {
            if memory.len() == cfg.memory {
                memory.pop_front();
            }
            memory.push_back(Pair { rho: 1.0 / sy, s, y });
        }
        std::mem::swap(&mut x, &mut xt);
        std::mem::swap(&mut g, &mut gt);
        fx = ft;
        trace.push(IterationRecord { iter, objective: fx, projected_grad_norm: projected_grad_norm(&x, &g, lb), step });
    }
    if termination == Termination::MaxIterations && trace.last().unwrap().projected_grad_norm <= cfg.grad_tol {
        termination = Termination::GradientTolerance;
    }
    Ok(Solution { x, objective: fx, trace, termination, evaluations })
}

/// Writes `iter,objective,projected_grad_norm,step` rows.
pub fn write_trace_csv(path: &Path, trace: &[IterationRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "iter,objective,projected_grad_norm,step")?;
    for r in trace {
        writeln!(out, "{},{:e},{:e},{:e}", r.iter, r.objective, r.projected_grad_norm, r.step)?;
    }
    Ok(())
}
