use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mllp::design::{build_c, build_g, build_s, TermSelection};
use mllp::diagnostics::{Classification, DEFAULT_TRIALS};
use mllp::model::{
    analyze_model, parse_free_params, parse_model, run_pipeline, MarginAnalysis, Method,
    PipelineOptions,
};
use mllp::table::{CellGrid, Margin, VarSet, VariableSpec};
use mllp::MllpError;

const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Parser)]
#[command(
    name = "mllp",
    version,
    about = "Marginal log-linear parameterizations"
)]
struct Cli {
    /// Emit JSON (results and error objects) instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Smoothness verdict, context and replacement plan for every margin.
    Check {
        model: String,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        /// Master seed; defaults to $MLLP_SEED.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct the joint distribution.
    Reconstruct {
        model: String,
        /// JSON object of free parameter values keyed by term name.
        #[arg(long)]
        params: Option<String>,
        /// Convergence tolerance of the LM iteration.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: Option<String>,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a design matrix as CSV.
    Matrices {
        /// Categories per variable, e.g. 2,3,2.
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<usize>,
        /// Variables of the margin, e.g. 1,2.
        #[arg(long, value_delimiter = ',', required = true)]
        margin: Vec<usize>,
        #[arg(long, value_enum)]
        kind: Kind,
        /// Interaction blocks separated by ';', e.g. "1;1,2". Defaults to all.
        #[arg(long)]
        terms: Option<String>,
    },
    /// Parse and validate a model file.
    Validate { model: String },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    #[value(name = "C")]
    C,
    #[value(name = "G")]
    G,
    #[value(name = "S")]
    S,
    #[value(name = "Sbar")]
    Sbar,
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<MllpError> for Failure {
    fn from(e: MllpError) -> Self {
        let (code, kind) = match &e {
            MllpError::NonIdentifiable { .. } => (2, "non_identifiable"),
            MllpError::NonConvergence { .. } => (3, "non_convergence"),
            MllpError::Infeasible { .. } => (3, "infeasible"),
            MllpError::Model { .. } => (1, "model"),
            _ => (1, "error"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn io_failure(what: &str, e: io::Error) -> Failure {
    Failure {
        code: 1,
        kind: "io",
        message: format!("{what}: {e}"),
    }
}

fn seed_or_env(seed: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var("MLLP_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| Failure {
            code: 1,
            kind: "usage",
            message: format!("MLLP_SEED must be an unsigned integer, got '{v}'"),
        }),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn read(path: &str) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn text_report(a: &MarginAnalysis, out: &mut String) {
    match a.method {
        Method::PlainMixed => {
            out.push_str(&format!("margin {}: mixed parameterization\n", a.margin))
        }
        Method::Lm => {
            let dup: Vec<String> = a.duplicated.iter().map(|s| s.label()).collect();
            out.push_str(&format!(
                "margin {}: two-step reconstruction, redefines {}\n",
                a.margin,
                dup.join(",")
            ));
            if let Some(plan) = &a.plan {
                out.push_str(&format!(
                    "  plan ({}): {plan}\n",
                    a.plan_source.as_deref().unwrap_or("model")
                ));
            }
            if let Some(v) = &a.verdict {
                let checks = &v.validity;
                let mark = |b: bool| if b { "pass" } else { "fail" };
                out.push_str(&format!(
                    "  validity: (i) {} (ii) {} (iii) {}\n",
                    mark(checks.condition_i),
                    mark(checks.condition_ii),
                    mark(checks.condition_iii)
                ));
                let label = v
                    .certification
                    .as_deref()
                    .map(|c| format!(" ({c})"))
                    .unwrap_or_default();
                out.push_str(&format!("  verdict: {:?}{label}\n", v.classification));
                if let Some(p) = &v.problem {
                    out.push_str(&format!("  problem: {p}\n"));
                }
            }
            if let Some(c) = &a.context {
                let shown = if c.constraints.is_empty() {
                    "unrestricted".to_string()
                } else {
                    c.render()
                };
                out.push_str(&format!("  context: {shown}\n"));
                if !c.unrestricted.is_empty() {
                    let u: Vec<String> = c.unrestricted.iter().map(|s| s.label()).collect();
                    out.push_str(&format!("  not released by any context: {}\n", u.join(",")));
                }
            }
            if let Some(s) = &a.restricted_statement {
                out.push_str(&format!("  statement: {s}\n"));
            }
        }
    }
}

fn worst_code(analyses: &[MarginAnalysis]) -> u8 {
    analyses
        .iter()
        .filter_map(|a| a.verdict.as_ref())
        .map(|v| match v.classification {
            Classification::Smooth => 0,
            Classification::NonIdentifiable => 2,
            Classification::Inconclusive => 3,
        })
        .fold(0, |acc, c| if acc == 2 || c == 2 { 2 } else { acc.max(c) })
}

fn cell_label(coords: &[usize]) -> String {
    coords
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(":")
}

fn csv_float(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.16e}")
    }
}

fn matrices(
    levels: Vec<usize>,
    margin: Vec<usize>,
    kind: Kind,
    terms: Option<String>,
) -> Result<String, Failure> {
    let spec = VariableSpec::new(levels)?;
    let margin = Margin::new(&spec, VarSet::new(margin))?;
    let selection = match terms {
        None => TermSelection::full(&spec, &margin),
        Some(text) => {
            let blocks = text
                .split(';')
                .map(VarSet::parse)
                .collect::<mllp::Result<Vec<_>>>()?;
            TermSelection::blocks(&spec, &margin, &blocks)?
        }
    };
    let grid = CellGrid::new(&spec, &margin);
    let cells: Vec<String> = (0..grid.n_cells())
        .map(|c| cell_label(grid.cell(c)))
        .collect();
    let names: Vec<String> = selection.iter().map(|t| t.to_string()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure {
        code: 1,
        kind: "io",
        message: e.to_string(),
    };
    match kind {
        Kind::G => {
            let g = build_g(&selection, &spec);
            let mut header = vec!["cell".to_string()];
            header.extend(names);
            w.write_record(&header).map_err(csv_err)?;
            for (r, cell) in cells.iter().enumerate() {
                let mut row = vec![cell.clone()];
                row.extend(g.row(r).iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        Kind::C | Kind::S | Kind::Sbar => {
            let m = match kind {
                Kind::C => build_c(&selection, &spec).to_f64(),
                Kind::S => build_s(&selection, &spec, false),
                _ => build_s(&selection, &spec, true),
            };
            let mut header = vec!["term".to_string()];
            header.extend(cells);
            w.write_record(&header).map_err(csv_err)?;
            for (r, name) in names.iter().enumerate() {
                let mut row = vec![name.clone()];
                row.extend(m.row(r).iter().map(|v| csv_float(*v)));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Failure {
        code: 1,
        kind: "io",
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn run(cli: Cli) -> Result<(String, u8), Failure> {
    let json_out = cli.json;
    match cli.command {
        Command::Validate { model } => {
            let m = parse_model(&read(&model)?)?;
            if json_out {
                let v = json!({"valid": true, "margins": m.margins.len(), "warnings": m.warnings});
                Ok((format!("{v}\n"), 0))
            } else {
                let mut s = String::new();
                for w in &m.warnings {
                    s.push_str(&format!("warning: {w}\n"));
                }
                s.push_str(&format!(
                    "ok: {} variables, {} margins\n",
                    m.spec.d(),
                    m.margins.len()
                ));
                Ok((s, 0))
            }
        }
        Command::Check {
            model,
            trials,
            seed,
        } => {
            let m = parse_model(&read(&model)?)?;
            let opts = PipelineOptions {
                trials,
                seed: seed_or_env(seed)?,
                ..PipelineOptions::default()
            };
            let analyses = analyze_model(&m, &opts)?;
            let code = worst_code(&analyses);
            if json_out {
                let v = json!({"margins": analyses, "warnings": m.warnings, "seed": opts.seed});
                Ok((
                    format!(
                        "{}\n",
                        serde_json::to_string_pretty(&v).expect("serializable")
                    ),
                    code,
                ))
            } else {
                let mut s = String::new();
                for w in &m.warnings {
                    s.push_str(&format!("warning: {w}\n"));
                }
                for a in &analyses {
                    text_report(a, &mut s);
                }
                Ok((s, code))
            }
        }
        Command::Reconstruct {
            model,
            params,
            tol,
            out,
            trials,
            seed,
        } => {
            let m = parse_model(&read(&model)?)?;
            let free = match params {
                Some(p) => parse_free_params(&read(&p)?)?,
                None => BTreeMap::new(),
            };
            let mut opts = PipelineOptions {
                trials,
                seed: seed_or_env(seed)?,
                ..PipelineOptions::default()
            };
            if let Some(t) = tol {
                if !(t.is_finite() && t > 0.0) {
                    return Err(Failure {
                        code: 1,
                        kind: "usage",
                        message: "--tol must be positive".into(),
                    });
                }
                opts.lm_tol = t;
            }
            let res = run_pipeline(&m, &free, &opts)?;
            let grid = CellGrid::new(&m.spec, res.joint.margin());
            let body = if json_out {
                let cells: Vec<Vec<usize>> =
                    (0..grid.n_cells()).map(|c| grid.cell(c).to_vec()).collect();
                let methods: Vec<_> = res
                    .margins
                    .iter()
                    .map(|r| {
                        json!({
                            "margin": r.analysis.margin,
                            "method": r.analysis.method,
                            "iterations": r.iterations,
                            "step_norm": r.step_norm,
                            "context": r.analysis.context,
                            "verdict": r.analysis.verdict.as_ref().map(|v| v.classification),
                        })
                    })
                    .collect();
                let v = json!({
                    "levels": m.spec.levels(),
                    "cells": cells,
                    "probabilities": res.joint.values(),
                    "margins": methods,
                    "warnings": res.warnings,
                });
                format!(
                    "{}\n",
                    serde_json::to_string_pretty(&v).expect("serializable")
                )
            } else {
                let mut w = csv::Writer::from_writer(Vec::new());
                let mut header: Vec<String> =
                    res.joint.margin().iter().map(|v| format!("x{v}")).collect();
                header.push("p".into());
                let csv_err = |e: csv::Error| Failure {
                    code: 1,
                    kind: "io",
                    message: e.to_string(),
                };
                w.write_record(&header).map_err(csv_err)?;
                for c in 0..grid.n_cells() {
                    let mut row: Vec<String> = grid.cell(c).iter().map(|x| x.to_string()).collect();
                    row.push(format!("{:.16e}", res.joint.values()[c]));
                    w.write_record(&row).map_err(csv_err)?;
                }
                let bytes = w.into_inner().map_err(|e| Failure {
                    code: 1,
                    kind: "io",
                    message: e.to_string(),
                })?;
                String::from_utf8(bytes).expect("csv output is utf-8")
            };
            for warning in &res.warnings {
                eprintln!("warning: {warning}");
            }
            match out {
                Some(path) => {
                    fs::write(&path, body).map_err(|e| io_failure(&path, e))?;
                    Ok((String::new(), 0))
                }
                None => Ok((body, 0)),
            }
        }
        Command::Matrices {
            levels,
            margin,
            kind,
            terms,
        } => Ok((matrices(levels, margin, kind, terms)?, 0)),
    }
}

fn main() -> ExitCode {
    let wants_json = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            if wants_json {
                let v = json!({"error": {"kind": "usage", "message": e.to_string()}});
                println!("{v}");
            } else {
                eprint!("{e}");
            }
            return ExitCode::from(1);
        }
    };
    let json_out = cli.json;
    match run(cli) {
        Ok((text, code)) => {
            let mut stdout = io::stdout().lock();
            let _ = stdout.write_all(text.as_bytes());
            ExitCode::from(code)
        }
        Err(f) => {
            if json_out {
                let v = json!({"error": {"kind": f.kind, "message": f.message}});
                println!("{v}");
            } else {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}
