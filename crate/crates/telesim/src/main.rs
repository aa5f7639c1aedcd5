use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use telesim::analysis::stats::PairedTest;
use telesim::analysis::PupilParams;
use telesim::config::{default_output_name, load_run_config, RunConfig};
use telesim::logio::{write_log, META_FILE};
use telesim::pupil::attach_pupil;
use telesim::replay::replay_dir;
use telesim::report::{build_tables, load_metrics, render_tables, write_report};
use telesim::service::{serve, ServeOptions};
use telesim_core::delay::ConditionSpec;
use telesim_core::session::{run_scripted, trial_time_on_task, OperatorSpec, TrialLog};

#[derive(Parser)]
#[command(name = "telesim", version, about = "Teleoperation-delay simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trial headless, or host live console sessions.
    Run(RunArgs),
    /// Run a scripted config under every condition cell for several seeds.
    Sweep(SweepArgs),
    /// Compute metrics and condition comparisons over trial logs.
    Analyze(AnalyzeArgs),
    /// Re-run a logged trial and compare it with the log.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run without a console (the default for scripted operators).
    #[arg(long, conflicts_with = "serve")]
    headless: bool,
    /// Serve console sessions on this TCP port.
    #[arg(long, value_name = "PORT")]
    serve: Option<u16>,
    /// Address to listen on with --serve.
    #[arg(long, default_value = "127.0.0.1", requires = "serve")]
    bind: String,
    /// Stop serving after one session.
    #[arg(long, requires = "serve")]
    once: bool,
    /// Log directory, overriding the config file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Seeds 0..N.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Parent directory for the logs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TestArg {
    Wilcoxon,
    PairedT,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Log directories, or directories containing them.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value = "wilcoxon")]
    test: TestArg,
}

#[derive(Args)]
struct ReplayArgs {
    log: PathBuf,
    /// Keep the recomputed log here instead of a temporary directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn summary(log: &TrialLog) -> String {
    let h = &log.header;
    let placed = log.events.iter().filter(|e| matches!(e.event, telesim_core::session::LogEvent::Placed { .. })).count();
    format!(
        "{}: {} after {:.3} s, {placed} cube(s) placed, time on task {:.3} s",
        h.config.condition,
        h.end_reason,
        h.end_ms as f64 / 1000.0,
        trial_time_on_task(log)
    )
}

fn run_headless(rc: &RunConfig, out: &Path) -> Result<()> {
    if matches!(rc.trial.operator, OperatorSpec::Live { .. }) {
        bail!("a live operator needs a console: use --serve <port>");
    }
    let mut log = run_scripted(&rc.trial)?;
    log.post = rc.questionnaire;
    attach_pupil(&mut log, &rc.pupil);
    write_log(out, &log)?;
    println!("{}", summary(&log));
    println!("log written to {}", out.display());
    Ok(())
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let rc = load_run_config(&args.config)?;
    let out = args.out.clone().unwrap_or_else(|| rc.output.clone());
    match args.serve {
        None => run_headless(&rc, &out)?,
        Some(port) => {
            let listener = TcpListener::bind((args.bind.as_str(), port)).with_context(|| format!("binding {}:{port}", args.bind))?;
            println!("serving console sessions on {}", listener.local_addr()?);
            let mut opts = ServeOptions::new(rc.trial.clone(), out);
            opts.pupil = rc.pupil.clone();
            let logs = serve(listener, opts, args.once.then_some(1))?;
            for l in logs {
                println!("log written to {}", l.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(args: SweepArgs) -> Result<ExitCode> {
    let rc = load_run_config(&args.config)?;
    if !matches!(rc.trial.operator, OperatorSpec::Scripted(_)) {
        bail!("sweep needs a scripted operator");
    }
    let mut jobs = Vec::new();
    for cond in ConditionSpec::all_cells() {
        for seed in 0..args.seeds {
            let mut t = rc.trial.clone();
            t.condition = cond.with_onset_delay(rc.trial.condition.onset_delay_ms);
            t.seed = seed;
            if let OperatorSpec::Scripted(p) = &mut t.operator {
                p.seed = seed;
            }
            jobs.push(t);
        }
    }
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get());
    let chunk = jobs.len().div_ceil(workers).max(1);
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                let (rc, out) = (&rc, &args.out);
                s.spawn(move || -> Result<()> {
                    for t in part {
                        let mut log = run_scripted(t)?;
                        log.post = rc.questionnaire;
                        attach_pupil(&mut log, &rc.pupil);
                        let dir = out.join(default_output_name(t));
                        write_log(&dir, &log)?;
                        println!("{}  ->  {}", summary(&log), dir.display());
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    for r in results {
        r?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Expands directories of logs into the logs themselves.
fn collect_logs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(META_FILE).is_file() {
            out.push(p.clone());
            continue;
        }
        let mut found: Vec<PathBuf> = std::fs::read_dir(p)
            .with_context(|| format!("reading {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join(META_FILE).is_file())
            .collect();
        if found.is_empty() {
            bail!("{} is not a trial log and contains none", p.display());
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

fn analyze(args: AnalyzeArgs) -> Result<ExitCode> {
    let dirs = collect_logs(&args.logs)?;
    let metrics = load_metrics(&dirs, &PupilParams::default())?;
    let test = match args.test {
        TestArg::Wilcoxon => PairedTest::Wilcoxon,
        TestArg::PairedT => PairedTest::PairedT,
    };
    let tables = build_tables(&metrics, test);
    write_report(&args.report, &metrics, &tables)?;
    print!("{}", render_tables(&tables));
    println!("{} trial(s) analysed; report written to {}", metrics.len(), args.report.display());
    Ok(ExitCode::SUCCESS)
}

fn replay(args: ReplayArgs) -> Result<ExitCode> {
    let scratch = match &args.out {
        Some(p) => p.clone(),
        None => std::env::temp_dir().join(format!("telesim-replay-{}", std::process::id())),
    };
    let (r, files) = replay_dir(&args.log, &scratch)?;
    if args.out.is_none() {
        let _ = std::fs::remove_dir_all(&scratch);
    }
    println!("{} of {}: {}", r.mode, args.log.display(), summary(&r.log));
    if r.is_identical() && files.is_empty() {
        println!("replay identical: every row and every file byte matches");
        return Ok(ExitCode::SUCCESS);
    }
    for d in &r.diffs {
        println!("{d}");
    }
    if !files.is_empty() {
        println!("files differing: {}", files.join(", "));
    }
    Ok(ExitCode::FAILURE)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Analyze(a) => analyze(a),
        Command::Replay(a) => replay(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
