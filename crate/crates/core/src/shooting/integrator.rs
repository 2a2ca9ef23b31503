//! Time stepping of the canonical equations and its exact reverse pass.
//!
//! A scheme is written as a short straight-line program over registers
//! holding `q`- or `π`-sized vectors. Every instruction has the form
//! `out = base + coef · G(q_arg, π_arg)` with `G` either the velocity
//! `(1/w) ∂H/∂π` or the force `-(1/w) ∂H/∂q`. The reverse pass replays the
//! program backwards and needs one Hessian-vector product per group of
//! instructions sharing the same arguments.

use serde::{Deserialize, Serialize};

use super::system::{Gradient, System};
use crate::error::{Error, Result};

/// Fixed-point sweeps used to solve the implicit stages of the leapfrog.
const LEAPFROG_SWEEPS: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Störmer–Verlet: half kick, drift, half kick. The implicit stages of
    /// the non-separable Hamiltonian are solved by fixed-point sweeps.
    #[default]
    Leapfrog,
    /// Explicit midpoint rule.
    Rk2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Field {
    Velocity,
    Force,
}

#[derive(Clone, Copy, Debug)]
struct Op {
    out: usize,
    base: usize,
    coef: f64,
    field: Field,
    q: usize,
    p: usize,
}

#[derive(Clone, Debug)]
struct Program {
    registers: usize,
    ops: Vec<Op>,
    q_out: usize,
    p_out: usize,
}

impl Program {
    fn new(scheme: Scheme, dt: f64) -> Self {
        let mut ops = Vec::new();
        let mut next = 2;
        let mut emit = |ops: &mut Vec<Op>, base, coef, field, q, p| {
            ops.push(Op { out: next, base, coef, field, q, p });
            next += 1;
            next - 1
        };
        let half = 0.5 * dt;
        let (q_out, p_out) = match scheme {
            Scheme::Rk2 => {
                let qm = emit(&mut ops, 0, half, Field::Velocity, 0, 1);
                let pm = emit(&mut ops, 1, half, Field::Force, 0, 1);
                let q1 = emit(&mut ops, 0, dt, Field::Velocity, qm, pm);
                let p1 = emit(&mut ops, 1, dt, Field::Force, qm, pm);
                (q1, p1)
            }
            Scheme::Leapfrog => {
                let mut ph = emit(&mut ops, 1, half, Field::Force, 0, 1);
                for _ in 0..LEAPFROG_SWEEPS {
                    ph = emit(&mut ops, 1, half, Field::Force, 0, ph);
                }
                let a = emit(&mut ops, 0, half, Field::Velocity, 0, ph);
                let mut q1 = emit(&mut ops, a, half, Field::Velocity, 0, ph);
                for _ in 0..LEAPFROG_SWEEPS {
                    q1 = emit(&mut ops, a, half, Field::Velocity, q1, ph);
                }
                let p1 = emit(&mut ops, ph, half, Field::Force, q1, ph);
                (q1, p1)
            }
        };
        Program { registers: next, ops, q_out, p_out }
    }
}

/// Forward integration result. When recorded, `tape[s]` holds every
/// register of step `s`.
pub(crate) struct Forward {
    pub states: Vec<(Vec<f64>, Vec<f64>)>,
    tape: Vec<Vec<Vec<f64>>>,
    program: Program,
}

fn field_of(g: &Gradient, field: Field, inv_w: f64) -> impl Iterator<Item = f64> + '_ {
    let (src, sign) = match field {
        Field::Velocity => (&g.1, inv_w),
        Field::Force => (&g.0, -inv_w),
    };
    src.iter().map(move |v| sign * v)
}

/// Integrates `steps` uniform steps over `[0, 1]`.
pub(crate) fn forward(
    system: &System,
    q0: &[f64],
    p0: &[f64],
    scheme: Scheme,
    steps: usize,
    record: bool,
) -> Result<Forward> {
    let program = Program::new(scheme, 1.0 / steps as f64);
    let inv_w = 1.0 / system.weight();
    let mut states = Vec::with_capacity(steps + 1);
    let mut tape = Vec::new();
    states.push((q0.to_vec(), p0.to_vec()));
    for step in 0..steps {
        let (q, p) = states.last().expect("initial state");
        let mut regs: Vec<Vec<f64>> = Vec::with_capacity(program.registers);
        regs.push(q.clone());
        regs.push(p.clone());
        let mut cached: Option<((usize, usize), Gradient)> = None;
        for op in &program.ops {
            let key = (op.q, op.p);
            if cached.as_ref().map(|c| c.0) != Some(key) {
                cached = Some((key, system.gradient(&regs[op.q], &regs[op.p])));
            }
            let g = &cached.as_ref().expect("cached gradient").1;
            let out: Vec<f64> =
                regs[op.base].iter().zip(field_of(g, op.field, inv_w)).map(|(b, f)| b + op.coef * f).collect();
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationFailure { step });
            }
            regs.push(out);
        }
        let next = (regs[program.q_out].clone(), regs[program.p_out].clone());
        if record {
            tape.push(regs);
        }
        states.push(next);
    }
    Ok(Forward { states, tape, program })
}

/// Pulls the cotangent `(adj_q, adj_p)` of the final state back to the
/// initial state.
pub(crate) fn backward(system: &System, fwd: &Forward, adj_q: Vec<f64>, adj_p: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(fwd.tape.len() + 1, fwd.states.len(), "forward pass was not recorded");
    let prog = &fwd.program;
    let inv_w = 1.0 / system.weight();
    let n = adj_q.len();
    let (mut aq, mut ap) = (adj_q, adj_p);
    for regs in fwd.tape.iter().rev() {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; prog.registers];
        adj[prog.q_out] = Some(aq);
        adj[prog.p_out] = Some(ap);
        let mut i = prog.ops.len();
        while i > 0 {
            // Group consecutive instructions sharing their arguments.
            let last = prog.ops[i - 1];
            let mut start = i - 1;
            while start > 0 {
                let prev = prog.ops[start - 1];
                let same = prev.q == last.q && prev.p == last.p;
                let feeds = prog.ops[start - 1..i].iter().any(|o| o.out == last.q || o.out == last.p);
                if !same || feeds {
                    break;
                }
                start -= 1;
            }
            let mut dir_q = vec![0.0; n];
            let mut dir_p = vec![0.0; n];
            let mut any = false;
            for op in prog.ops[start..i].iter().rev() {
                let Some(a) = adj[op.out].take() else { continue };
                any = true;
                match op.field {
                    Field::Velocity => axpy(&mut dir_p, op.coef * inv_w, &a),
                    Field::Force => axpy(&mut dir_q, -op.coef * inv_w, &a),
                }
                accumulate(&mut adj[op.base], 1.0, &a);
            }
            if any {
                let (hq, hp) = system.hvp(&regs[last.q], &regs[last.p], &dir_q, &dir_p);
                accumulate(&mut adj[last.q], 1.0, &hq);
                accumulate(&mut adj[last.p], 1.0, &hp);
            }
            i = start;
        }
        aq = adj[0].take().unwrap_or_else(|| vec![0.0; n]);
        ap = adj[1].take().unwrap_or_else(|| vec![0.0; n]);
    }
    (aq, ap)
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, a: f64, x: &[f64]) {
    match slot {
        Some(v) => axpy(v, a, x),
        None => *slot = Some(x.iter().map(|v| a * v).collect()),
    }
}
