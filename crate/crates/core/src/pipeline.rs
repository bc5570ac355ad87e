//! End-to-end driver: source text in, solved analysis out, with per-phase
//! wall-clock timings. Everything downstream (CLI, benchmarks, harnesses)
//! goes through this so they all run the identical sequence.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::andersen::AndersenResult;
use crate::ir::parse::{parse_program, DiagKind, Diagnostic};
use crate::ir::IRProgram;
use crate::layout::{compute_layouts, LayoutError, LayoutTable};
use crate::memssa::{self, Annots, ModRef, Vfg};
use crate::objects::ObjectStore;
use crate::singletons::Singletons;
use crate::solver::{solve, Solution, SolveError, SolveOptions};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("parse failed: {}", render_diags(.0))]
    Parse(Vec<Diagnostic>),
    #[error("validation failed: {}", render_diags(.0))]
    Validate(Vec<Diagnostic>),
    #[error("layout failed: {0}")]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

fn render_diags(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}

/// Wall-clock time spent in each phase, in milliseconds.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Timings {
    pub parse_ms: f64,
    pub layout_ms: f64,
    pub andersen_ms: f64,
    pub memssa_ms: f64,
    pub solve_ms: f64,
    pub total_ms: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub struct Analysis {
    pub prog: IRProgram,
    pub layouts: LayoutTable,
    pub store: ObjectStore,
    pub pre: AndersenResult,
    pub mr: ModRef,
    pub annots: Annots,
    pub vfg: Vfg,
    pub sing: Singletons,
    pub sol: Solution,
    pub timings: Timings,
}

/// Everything up to (but not including) the solve, so several solves can
/// share one front-end run.
pub struct Prepared {
    pub prog: IRProgram,
    pub layouts: LayoutTable,
    pub store: ObjectStore,
    pub pre: AndersenResult,
    pub mr: ModRef,
    pub annots: Annots,
    pub vfg: Vfg,
    pub sing: Singletons,
    pub timings: Timings,
}

pub fn prepare(src: &str) -> Result<Prepared, PipelineError> {
    let t0 = Instant::now();
    // `parse_program` runs the structural validator too; split its diagnostics
    // so malformed text and well-formed-but-invalid programs fail differently.
    let prog = parse_program(src).map_err(|diags| {
        if diags.iter().any(|d| d.kind == DiagKind::Syntax) {
            PipelineError::Parse(diags)
        } else {
            PipelineError::Validate(diags)
        }
    })?;
    let parse_ms = ms(t0.elapsed());

    let t = Instant::now();
    let layouts = compute_layouts(&prog)?;
    let layout_ms = ms(t.elapsed());

    let t = Instant::now();
    let mut store = ObjectStore::seeded(&prog);
    let pre = crate::andersen::analyze(&prog, &mut store);
    let andersen_ms = ms(t.elapsed());

    let t = Instant::now();
    let mr = memssa::mod_ref(&prog, &store, &pre);
    let annots = memssa::place_versions(&prog, &store, &pre, &mr);
    let vfg = memssa::build_vfg(&prog, &pre, &annots);
    let sing = crate::singletons::classify(&prog, &store, &pre);
    let memssa_ms = ms(t.elapsed());

    Ok(Prepared {
        prog,
        layouts,
        store,
        pre,
        mr,
        annots,
        vfg,
        sing,
        timings: Timings {
            parse_ms,
            layout_ms,
            andersen_ms,
            memssa_ms,
            solve_ms: 0.0,
            total_ms: ms(t0.elapsed()),
        },
    })
}

impl Prepared {
    pub fn solve(mut self, opts: &SolveOptions) -> Result<Analysis, PipelineError> {
        let t = Instant::now();
        let sol = solve(
            &self.prog,
            &self.layouts,
            &mut self.store,
            &self.pre,
            &self.mr,
            &self.annots,
            &self.vfg,
            &self.sing,
            opts,
        )?;
        let solve_ms = ms(t.elapsed());
        let mut timings = self.timings;
        timings.solve_ms = solve_ms;
        timings.total_ms += solve_ms;
        Ok(Analysis {
            prog: self.prog,
            layouts: self.layouts,
            store: self.store,
            pre: self.pre,
            mr: self.mr,
            annots: self.annots,
            vfg: self.vfg,
            sing: self.sing,
            sol,
            timings,
        })
    }
}

pub fn analyze_source(src: &str, opts: &SolveOptions) -> Result<Analysis, PipelineError> {
    prepare(src)?.solve(opts)
}

impl Analysis {
    /// Run the dense reference analyzer over the same prepared program and
    /// report the first disagreement with this solution, if any.
    pub fn diff_against_oracle(&mut self, max_sweeps: u64) -> Result<Option<String>, PipelineError> {
        let orc = crate::oracle::dense_solve(
            &self.prog,
            &self.layouts,
            &mut self.store,
            &self.pre,
            &self.sing,
            self.sol.mode,
            max_sweeps,
        )
        .map_err(|e| match e {
            crate::oracle::OracleError::Budget { sweeps } => {
                PipelineError::Solve(SolveError::Budget { visits: sweeps })
            }
            crate::oracle::OracleError::Internal(m) => {
                PipelineError::Solve(SolveError::Internal(m))
            }
        })?;
        Ok(crate::oracle::first_divergence(
            &self.prog,
            &self.store,
            &self.annots,
            &self.vfg,
            &self.sol,
            &orc,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::Mode;

    #[test]
    fn parse_errors_are_reported_as_parse() {
        let Err(e) = analyze_source("func @main( {", &SolveOptions::default()) else {
            panic!("expected a parse error")
        };
        assert!(matches!(e, PipelineError::Parse(_)));
    }

    #[test]
    fn validation_errors_are_reported_as_validation() {
        // Parses fine, but bb1 is unreachable from the entry.
        let src = "func @main() {\nbb0:\n  ret\nbb1:\n  ret\n}\n";
        let Err(e) = analyze_source(src, &SolveOptions::default()) else {
            panic!("expected a validation error")
        };
        assert!(matches!(e, PipelineError::Validate(_)));
    }

    #[test]
    fn a_full_run_produces_timings_and_a_solution() {
        let src = "func @main() {\nbb0:\n  %a = alloca i64, 8\n  %m = malloc 8\n  store %a, %m\n  ret\n}\n";
        let a = analyze_source(src, &SolveOptions::default()).unwrap();
        assert_eq!(a.sol.mode, Mode::MtoSs);
        assert!(a.timings.total_ms > 0.0);
        assert!(a.sol.visits > 0);
    }

    #[test]
    fn oracle_diff_runs_through_the_driver() {
        let src = "func @main() {\nbb0:\n  %a = alloca i64, 8\n  %m = malloc 8\n  store %a, %m\n  %r = load %a\n  ret\n}\n";
        let mut a = analyze_source(src, &SolveOptions::default()).unwrap();
        assert_eq!(a.diff_against_oracle(10_000).unwrap(), None);
    }
}
