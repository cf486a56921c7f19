use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use lazytensor::compiler::{CompileOptions, SimplifyOptions};
use lazytensor::{MetricsSnapshot, Mode, Runtime, RuntimeConfig};
use lazytensor_cli::fuzz::{fuzz, FuzzConfig};
use lazytensor_cli::report::{hex, metrics_json, RunReport};
use lazytensor_cli::workloads::{self, Capture, Outcome, Workload, DEVICE};

#[derive(Parser)]
#[command(name = "lt", about = "Demos, differential fuzzing and benchmarks for lazy tensors")]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Print reports as JSON, one object per line.
    #[arg(long, global = true)]
    json: bool,
    /// Also run the other mode and fail with exit code 2 if checksums differ.
    #[arg(long, global = true)]
    verify: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Lazy,
    Eager,
}

impl ModeArg {
    fn mode(self) -> Mode {
        match self {
            ModeArg::Lazy => Mode::Lazy,
            ModeArg::Eager => Mode::Eager,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ModeArg::Lazy => "lazy",
            ModeArg::Eager => "eager",
        }
    }

    fn other(self) -> ModeArg {
        match self {
            ModeArg::Lazy => ModeArg::Eager,
            ModeArg::Eager => ModeArg::Lazy,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one workload and print its report.
    Demo {
        workload: Workload,
        #[arg(long, value_enum, default_value = "lazy")]
        mode: ModeArg,
        #[arg(long)]
        steps: Option<usize>,
        /// Print the IR of the first pending graph instead of a report.
        #[arg(long)]
        dump_ir: bool,
        /// Print the compiled plan of the first pending graph.
        #[arg(long)]
        dump_plan: bool,
    },
    /// Compare lazy and eager execution of random programs.
    Fuzz {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 25)]
        max_nodes: usize,
        /// Run with a deliberately broken simplifier rewrite.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Run one workload in several modes and compare.
    Bench {
        workload: Workload,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "lazy,eager")]
        modes: Vec<ModeArg>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

struct Timed {
    report: RunReport,
    outcome: Outcome,
}

fn run_mode(w: Workload, mode: ModeArg, seed: u64, steps: usize, capture: Capture) -> Result<Timed, String> {
    let rt = Runtime::new(RuntimeConfig { mode: mode.mode(), ..RuntimeConfig::from_env() });
    let start = Instant::now();
    let outcome = workloads::run(w, &rt, seed, steps, capture).map_err(|e| format!("{w} [{}]: {e}", mode.name()))?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let metrics = rt.metrics(DEVICE).map_err(|e| e.to_string())?;
    record_exit_metrics(&metrics);
    let report = RunReport {
        workload: w.name().to_string(),
        mode: mode.name().to_string(),
        wall_ms,
        metrics,
        checksum: hex(outcome.checksum),
    };
    Ok(Timed { report, outcome })
}

fn print_report(r: &RunReport, json: bool) {
    if json {
        println!("{}", r.to_json());
    } else {
        print!("{}", r.to_text());
    }
}

static EXIT_METRICS: std::sync::Mutex<Option<MetricsSnapshot>> = std::sync::Mutex::new(None);

/// Remembers the latest snapshot for `LT_METRICS=json`.
fn record_exit_metrics(m: &MetricsSnapshot) {
    *EXIT_METRICS.lock().expect("not poisoned") = Some(*m);
}

fn emit_exit_metrics() {
    if std::env::var("LT_METRICS").is_ok_and(|v| v == "json") {
        if let Some(m) = EXIT_METRICS.lock().expect("not poisoned").as_ref() {
            eprintln!("{}", metrics_json(m));
        }
    }
}

enum Failure {
    Usage(String),
    Divergence(String),
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let err = Failure::Usage;
    match cli.cmd {
        Cmd::Demo { workload, mode, steps, dump_ir, dump_plan } => {
            let steps = steps.unwrap_or(workload.default_steps());
            let capture = Capture { ir: dump_ir, plan: dump_plan };
            let t = run_mode(workload, mode, cli.seed, steps, capture).map_err(err)?;
            if dump_ir || dump_plan {
                if let Some(ir) = &t.outcome.ir {
                    print!("{ir}");
                }
                if let Some(plan) = &t.outcome.plan {
                    print!("{plan}");
                }
            } else {
                print_report(&t.report, cli.json);
            }
            if cli.verify {
                let other = run_mode(workload, mode.other(), cli.seed, steps, Capture::default()).map_err(err)?;
                if other.outcome.checksum != t.outcome.checksum {
                    return Err(Failure::Divergence(format!(
                        "checksum mismatch: {} {} vs {} {}",
                        t.report.mode, t.report.checksum, other.report.mode, other.report.checksum
                    )));
                }
            }
        }
        Cmd::Fuzz { count, max_nodes, inject_fault } => {
            let compile =
                CompileOptions { simplify: SimplifyOptions { unguarded_add_identity: inject_fault }, ..Default::default() };
            let s = fuzz(&FuzzConfig { seed: cli.seed, count, max_nodes, compile });
            if let Some(d) = s.divergence {
                return Err(Failure::Divergence(d.to_string()));
            }
            if cli.json {
                println!("{{\"programs\":{},\"skipped\":{},\"divergences\":0}}", s.programs, s.skipped);
            } else {
                println!("fuzz: {} programs, {} skipped as non-finite, no divergence", s.programs, s.skipped);
            }
        }
        Cmd::Bench { workload, modes, steps } => {
            let steps = steps.unwrap_or(workload.default_steps());
            let mut first: Option<RunReport> = None;
            for mode in modes {
                let t = run_mode(workload, mode, cli.seed, steps, Capture::default()).map_err(err)?;
                print_report(&t.report, cli.json);
                match &first {
                    Some(f) if f.checksum != t.report.checksum => {
                        return Err(Failure::Divergence(format!(
                            "checksum mismatch: {} {} vs {} {}",
                            f.mode, f.checksum, t.report.mode, t.report.checksum
                        )));
                    }
                    Some(_) => {}
                    None => first = Some(t.report),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let code = match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Divergence(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    };
    emit_exit_metrics();
    code
}
