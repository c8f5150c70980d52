mod report;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsg_core::sim::{replay_plain, simulate, CostModel, SimReport};
use dsg_core::{Analysis, Error, Symbol};
use serde::Serialize;

const EXIT_BUDGET: u8 = 1;
const EXIT_INPUT: u8 = 2;

/// Memory planning for dynamic-shape tensor graphs.
#[derive(Parser, Debug)]
#[command(name = "dsg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Infer shapes and print the oriented constraint list.
    Analyze(Common),
    /// Order ops by memory impact and report symbolic live bytes per step.
    Schedule(Common),
    /// Place eviction points and regeneration guards, and search recompute subgraphs.
    Remat(Common),
    /// Run the instrumented schedule under a concrete binding and budget.
    Simulate(SimArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Input `.dsg` file.
    input: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// Symbol binding such as `S1=256`; repeatable.
    #[arg(long = "bind", value_parser = parse_binding)]
    bindings: Vec<(Symbol, i64)>,
    /// Memory budget in bytes; unlimited when absent.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    budget: Option<u64>,
    #[arg(long, default_value_t = CostModel::default().reload_rate)]
    reload_rate: f64,
    #[arg(long, default_value_t = CostModel::default().compute_rate)]
    compute_rate: f64,
    /// Run one simulation per budget in `[budget=]start:end:step`.
    #[arg(long, value_parser = parse_sweep, conflicts_with = "budget")]
    sweep: Option<Sweep>,
}

fn parse_binding(s: &str) -> Result<(Symbol, i64), String> {
    let (name, value) = s.split_once('=').ok_or("expected SYMBOL=VALUE")?;
    let idx = name
        .trim_start_matches('@')
        .strip_prefix('S')
        .and_then(|n| n.parse::<u32>().ok())
        .ok_or_else(|| format!("bad symbol name `{name}`"))?;
    let v: i64 = value.parse().map_err(|_| format!("bad value `{value}`"))?;
    if v < 1 {
        return Err(format!("binding for {name} must be positive"));
    }
    Ok((Symbol(idx), v))
}

#[derive(Clone, Debug)]
struct Sweep(Vec<u64>);

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    let range = s.strip_prefix("budget=").unwrap_or(s);
    let parts: Vec<u64> = range
        .split(':')
        .map(|p| p.parse::<u64>().map_err(|_| format!("bad sweep bound `{p}`")))
        .collect::<Result<_, _>>()?;
    let [start, end, step] = parts[..] else {
        return Err("expected start:end:step".into());
    };
    if start == 0 || step == 0 || end < start {
        return Err("sweep needs 0 < start <= end and step > 0".into());
    }
    Ok(Sweep((start..=end).step_by(step as usize).collect()))
}

/// A failure with its exit code; the message already names the error kind.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = match &e {
            Error::Shape { span: Some(span), .. } => format!("{e} (at {span})"),
            _ => e.to_string(),
        };
        Failure(EXIT_INPUT, msg)
    }
}

fn load(path: &Path) -> Result<Analysis, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure(EXIT_INPUT, format!("IoError: {}: {e}", path.display())))?;
    Ok(Analysis::from_text(&text)?)
}

fn emit(common: &Common, text: String) -> Result<(), Failure> {
    match &common.out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure(EXIT_INPUT, format!("IoError: {}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Failure(EXIT_INPUT, format!("IoError: stdout: {e}")))
        }
    }
}

fn render<T: Serialize>(common: &Common, value: &T, text: impl FnOnce(&T) -> String) -> Result<(), Failure> {
    let body = if common.json {
        serde_json::to_string_pretty(value).expect("reports serialize") + "\n"
    } else {
        text(value)
    };
    emit(common, body)
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Analyze(c) => {
            let a = load(&c.input)?;
            render(&c, &report::analyze(&a), report::AnalyzeReport::text)?;
        }
        Command::Schedule(c) => {
            let a = load(&c.input)?;
            let s = a.schedule()?;
            render(&c, &report::schedule(&a, &s), report::ScheduleReport::text)?;
        }
        Command::Remat(c) => {
            let a = load(&c.input)?;
            let inst = a.instrument(&a.schedule()?)?;
            render(&c, &report::remat(&a, &inst), report::RematReport::text)?;
        }
        Command::Simulate(args) => return run_simulate(args),
    }
    Ok(0)
}

fn run_simulate(args: SimArgs) -> Result<u8, Failure> {
    let a = load(&args.common.input)?;
    let raw: BTreeMap<Symbol, i64> = args.bindings.iter().copied().collect();
    let binding = a.bind(&raw)?;
    let cost = CostModel {
        reload_rate: args.reload_rate,
        compute_rate: args.compute_rate,
    };
    cost.validate().map_err(|e| Failure(EXIT_INPUT, e.to_string()))?;
    let sched = a.schedule()?;
    let inst = a.instrument(&sched)?;
    let one = |budget: Option<u64>| simulate(&a.graph, &inst, &binding, budget, &cost);
    let reports: Vec<SimReport> = match &args.sweep {
        None => vec![one(args.budget).map_err(Error::from)?],
        Some(Sweep(budgets)) => std::thread::scope(|scope| {
            let handles: Vec<_> = budgets.iter().map(|b| scope.spawn(move || one(Some(*b)))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("simulation thread panicked").map_err(Error::from))
                .collect::<Result<Vec<_>, _>>()
        })?,
    };
    let ok = reports.iter().all(|r| r.success);
    if args.sweep.is_some() {
        let plain = replay_plain(&a.graph, &sched, &binding).map_err(Error::from)?;
        render(&args.common, &reports, |rs| {
            let mut out = format!("plain peak {}\n", plain.peak_bytes);
            for r in rs {
                out.push_str(&format!(
                    "budget {}: success {} peak {} evictions {}\n",
                    r.budget.unwrap_or(0),
                    r.success,
                    r.peak_bytes,
                    r.evictions().count()
                ));
            }
            out
        })?;
    } else {
        render(&args.common, &reports[0], report::simulate_text)?;
    }
    if !ok {
        eprintln!("BudgetExceeded: simulation did not fit in the budget");
        return Ok(EXIT_BUDGET);
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
