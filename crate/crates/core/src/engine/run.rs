//! Run loop, per-iteration metrics and trace output.

use std::io::{self, Write};

use nalgebra::DVector;

use super::{Algorithm, EngineError, StepReport, WorldState};
use crate::compression::Compressor;
use crate::problems::Problem;
use crate::topology::MixingMatrix;

/// A loss above this is treated as divergence.
pub const LOSS_CEILING: f64 = 1e12;

pub const TRACE_HEADER: &str = "t,loss,grad_norm2,consensus,q_norm2,g_norm2,bits";

/// Metrics of `X_t` before step `t`, the noise and gradients of step `t`,
/// and the cumulative bit count after it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub loss: f64,
    pub grad_norm2: f64,
    pub consensus: f64,
    pub q_norm2: f64,
    pub g_norm2: f64,
    pub bits: u64,
}

impl TraceRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.t, self.loss, self.grad_norm2, self.consensus, self.q_norm2, self.g_norm2, self.bits
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Diverged { t: usize },
}

impl RunStatus {
    pub fn label(&self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged { .. } => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub status: RunStatus,
    pub steps_completed: usize,
    pub initial_loss: f64,
    pub initial_grad_norm2: f64,
    pub final_loss: f64,
    pub final_grad_norm2: f64,
    pub final_consensus: f64,
    pub min_grad_norm2: f64,
    /// First `t` whose pre-step `grad_norm2` is at or below the threshold.
    pub time_to_threshold: Option<usize>,
    pub total_bits: u64,
    /// Largest vector norm handed to the compressor during the run.
    pub max_compressor_input_norm: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub summary: Summary,
}

impl RunOutput {
    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.trace {
            writeln!(out, "{}", r.csv_line())?;
        }
        Ok(())
    }
}

/// One fully specified simulation.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    pub algorithm: Algorithm,
    pub mixing: &'a MixingMatrix,
    pub problem: &'a Problem,
    pub compressor: &'a Compressor,
    pub gamma: f64,
    pub iterations: usize,
    pub trace_every: usize,
    pub seed: u64,
    pub init: DVector<f64>,
    pub threshold: f64,
    pub parallel: bool,
}

struct Metrics {
    loss: f64,
    grad_norm2: f64,
    consensus: f64,
}

fn metrics(state: &WorldState, problem: &Problem) -> Metrics {
    let mean = state.average();
    Metrics {
        loss: problem.loss(&mean),
        grad_norm2: problem.gradient(&mean).norm_squared(),
        consensus: state.consensus(),
    }
}

fn diverged(m: &Metrics) -> bool {
    !(m.loss.is_finite() && m.grad_norm2.is_finite() && m.consensus.is_finite()) || m.loss > LOSS_CEILING
}

/// Runs the simulation. Divergence stops the run and is reported through
/// `summary.status`; the trace up to that point is kept. Other errors
/// (inconsistent inputs) are returned.
pub fn simulate(sim: &Simulation<'_>) -> Result<RunOutput, EngineError> {
    let mut state = WorldState::new(sim.mixing, &sim.init, sim.seed);
    state.parallel = sim.parallel;
    let every = sim.trace_every.max(1);

    let first = metrics(&state, sim.problem);
    let mut summary = Summary {
        status: RunStatus::Completed,
        steps_completed: 0,
        initial_loss: first.loss,
        initial_grad_norm2: first.grad_norm2,
        final_loss: first.loss,
        final_grad_norm2: first.grad_norm2,
        final_consensus: first.consensus,
        min_grad_norm2: first.grad_norm2,
        time_to_threshold: None,
        total_bits: 0,
        max_compressor_input_norm: 0.0,
    };
    let mut trace = Vec::new();
    let mut current = first;

    for t in 1..=sim.iterations {
        if diverged(&current) {
            summary.status = RunStatus::Diverged { t };
            break;
        }
        if summary.time_to_threshold.is_none() && current.grad_norm2 <= sim.threshold {
            summary.time_to_threshold = Some(t);
        }
        let report: StepReport = match state.step(sim.algorithm, sim.mixing, sim.compressor, sim.problem, sim.gamma) {
            Ok(r) => r,
            Err(EngineError::Diverged { t }) => {
                summary.status = RunStatus::Diverged { t };
                break;
            }
            Err(e) => return Err(e),
        };
        summary.steps_completed = t;
        summary.max_compressor_input_norm = summary.max_compressor_input_norm.max(report.max_input_norm);
        if (t - 1) % every == 0 || t == sim.iterations {
            trace.push(TraceRecord {
                t,
                loss: current.loss,
                grad_norm2: current.grad_norm2,
                consensus: current.consensus,
                q_norm2: report.q_norm2(),
                g_norm2: report.g_norm2(),
                bits: state.bits,
            });
        }
        current = metrics(&state, sim.problem);
        if current.grad_norm2.is_finite() {
            summary.min_grad_norm2 = summary.min_grad_norm2.min(current.grad_norm2);
        }
    }
    if summary.status == RunStatus::Completed && diverged(&current) {
        summary.status = RunStatus::Diverged { t: sim.iterations + 1 };
    }
    if summary.status == RunStatus::Completed
        && summary.time_to_threshold.is_none()
        && current.grad_norm2 <= sim.threshold
    {
        summary.time_to_threshold = Some(sim.iterations + 1);
    }
    summary.final_loss = current.loss;
    summary.final_grad_norm2 = current.grad_norm2;
    summary.final_consensus = current.consensus;
    summary.total_bits = state.bits;
    Ok(RunOutput { trace, summary })
}
