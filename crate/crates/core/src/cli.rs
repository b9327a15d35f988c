//! Command-line front end: run directories, evaluation, heatmap export,
//! multi-seed comparison and the oracle self-test.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::agent::AgentNets;
use crate::config;
use crate::error::{Error, Result};
use crate::metrics::{self, EpochRecord, VisitGrid};
use crate::selftest;
use crate::trainer::{RunConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_TEST_FAILURE: i32 = 4;

pub const COMPLETE_MARKER: &str = "COMPLETE";
pub const FAILED_MARKER: &str = "FAILED";
pub const MANIFEST: &str = "manifest.txt";
pub const CURVE: &str = "curve.csv";

#[derive(Debug, Parser)]
#[command(name = "cerlab", version, about = "Competitive experience replay lab on 2D point-mass mazes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file into a run directory.
    Train(TrainArgs),
    /// Greedy evaluation of a finished run's agent A.
    Eval(EvalArgs),
    /// Export visitation heatmaps, optionally as a difference against another run.
    Heatmap(HeatmapArgs),
    /// Run several configs over several seeds and summarize success per epoch.
    Compare(CompareArgs),
    /// Run the oracle suites.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = ["none", "off", "ind", "int"])]
    pub cer: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    pub her: Option<String>,
    #[arg(long = "workers-a")]
    pub workers_a: Option<usize>,
    #[arg(long = "workers-b")]
    pub workers_b: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Second run; writes `freq(run) - freq(against)` per cell.
    #[arg(long)]
    pub against: Option<PathBuf>,
    #[arg(long, default_value = "A", value_parser = ["A", "B"])]
    pub agent: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long = "config", required = true, num_args = 1..)]
    pub configs: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

/// Loads a config and applies command-line overrides on top of the file and
/// the `CERLAB_*` environment.
pub fn resolve_config(path: &Path, ov: &Overrides) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut pairs = config::parse_pairs(&text)?;
    config::apply_env_overrides(&mut pairs, std::env::vars());
    let mut put = |k: &str, v: String| {
        pairs.insert(k.to_string(), v);
    };
    if let Some(s) = ov.seed {
        put("seed", s.to_string());
    }
    if let Some(c) = &ov.cer {
        put("cer", c.clone());
    }
    if let Some(h) = &ov.her {
        put("her", h.clone());
    }
    if let Some(w) = ov.workers_a {
        put("workers_a", w.to_string());
    }
    if let Some(w) = ov.workers_b {
        put("workers_b", w.to_string());
    }
    for kv in &ov.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        put(k.trim(), v.trim().to_string());
    }
    config::from_pairs(&pairs)
}

fn default_out(cfg: &RunConfig) -> PathBuf {
    let her = if cfg.her { "her" } else { "noher" };
    PathBuf::from("runs").join(format!(
        "{}_{}_{her}_s{}",
        cfg.maze.name(),
        cfg.cer.name(),
        cfg.seed
    ))
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write(&mut out)?;
    out.flush()?;
    Ok(())
}

fn staging_dir(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(COMPLETE_MARKER).is_file()
}

/// Writes everything a run directory holds. Partial runs get a failure
/// marker instead of the completion marker.
fn write_run_artifacts(dir: &Path, trainer: &Trainer, failure: Option<&Error>) -> Result<()> {
    let mut manifest = config::to_text(&trainer.config);
    manifest.push_str(&format!("# completed_epochs = {}\n", trainer.epoch));
    manifest.push_str(&format!("# episodes = {}\n", trainer.episodes_done));
    manifest.push_str(&format!("# updates = {}\n", trainer.updates_done));
    fs::write(dir.join(MANIFEST), manifest)?;
    write_file(&dir.join(CURVE), |w| metrics::write_curve(&trainer.history, w))?;
    for (name, (nets, grid)) in ["A", "B"].iter().zip(trainer.agents.iter().zip(&trainer.visits)) {
        write_file(&dir.join(format!("agent_{name}.ckpt")), |w| nets.write_checkpoint(w))?;
        write_file(&dir.join(format!("visits_{name}.txt")), |w| grid.write_text(w))?;
        write_file(&dir.join(format!("visits_{name}.pgm")), |w| grid.write_pgm(w))?;
    }
    match failure {
        Some(e) => fs::write(dir.join(FAILED_MARKER), format!("{e}\n"))?,
        None => fs::write(dir.join(COMPLETE_MARKER), "")?,
    }
    Ok(())
}

/// Trains `cfg` into `out`. The directory appears only once all artifacts
/// are written; a finished run there is kept unless `force` is set.
pub fn train_into(cfg: RunConfig, out: &Path, force: bool) -> Result<Vec<EpochRecord>> {
    if is_complete(out) && !force {
        return Err(Error::InvalidState(format!(
            "{} already holds a completed run (use --force to replace it)",
            out.display()
        )));
    }
    let mut trainer = Trainer::new(cfg)?;
    let outcome = trainer.run().map(|_| ());
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let staging = staging_dir(out);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir(&staging)?;
    write_run_artifacts(&staging, &trainer, outcome.as_ref().err())?;
    if out.exists() {
        fs::remove_dir_all(out)?;
    }
    fs::rename(&staging, out)?;
    outcome.map(|_| trainer.history.clone())
}

/// Rebuilds the trained agents of a run directory.
pub fn load_run(dir: &Path) -> Result<(RunConfig, Vec<AgentNets>)> {
    let cfg = config::parse_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let train = cfg.resolved_train();
    let mut agents = Vec::new();
    for name in ["A", "B"].iter().take(cfg.agents()) {
        let file = fs::File::open(dir.join(format!("agent_{name}.ckpt")))?;
        agents.push(AgentNets::read_checkpoint(&mut BufReader::new(file), &train)?);
    }
    Ok((cfg, agents))
}

pub fn eval_run(args: &EvalArgs) -> Result<f64> {
    let (cfg, agents) = load_run(&args.run)?;
    let mut trainer = Trainer::new(cfg)?;
    trainer.agents = agents;
    let report = trainer.final_evaluation(args.episodes, args.seed)?;
    Ok(report.success_rate)
}

fn read_grid(dir: &Path, agent: &str) -> Result<VisitGrid> {
    let file = fs::File::open(dir.join(format!("visits_{agent}.txt")))?;
    VisitGrid::read_text(&mut BufReader::new(file))
}

pub fn heatmap(args: &HeatmapArgs) -> Result<()> {
    let grid = read_grid(&args.run, &args.agent)?;
    match &args.against {
        None => {
            write_file(&args.out, |w| grid.write_text(w))?;
            write_file(&args.out.with_extension("pgm"), |w| grid.write_pgm(w))
        }
        Some(other) => {
            let diff = metrics::grid_diff(&grid, &read_grid(other, &args.agent)?)?;
            write_file(&args.out, |w| {
                writeln!(w, "{} {} {} {} {}", grid.origin.x, grid.origin.y, grid.cell, grid.nx, grid.ny)?;
                for row in diff.chunks(grid.nx) {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                    writeln!(w, "{}", cells.join(" "))?;
                }
                Ok(())
            })
        }
    }
}

/// One summary row per config and epoch, followed by one row per failed run.
pub fn compare(args: &CompareArgs) -> Result<String> {
    if args.configs.len() < 2 {
        return Err(Error::Config("compare needs at least two configs".into()));
    }
    let mut csv = String::from("config,epoch,mean_success,std_success,runs,status\n");
    let mut failures = Vec::new();
    for path in &args.configs {
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let mut curves: Vec<Vec<EpochRecord>> = Vec::new();
        for &seed in &args.seeds {
            let ov = Overrides {
                seed: Some(seed),
                ..Overrides::default()
            };
            let dir = args.out.join(format!("{label}_s{seed}"));
            let result = resolve_config(path, &ov).and_then(|cfg| train_into(cfg, &dir, args.force));
            match result {
                Ok(curve) => curves.push(curve),
                Err(e) => failures.push(format!("{label},,,,,failed seed {seed}: {}", e.to_string().replace(',', ";"))),
            }
        }
        let epochs = curves.iter().map(Vec::len).min().unwrap_or(0);
        for epoch in 0..epochs {
            let values: Vec<f64> = curves.iter().map(|c| c[epoch].success_a).collect();
            let (mean, std) = metrics::mean_std(&values);
            csv.push_str(&format!("{label},{epoch},{mean},{std},{},ok\n", values.len()));
        }
    }
    for row in &failures {
        csv.push_str(row);
        csv.push('\n');
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("summary.csv"), &csv)?;
    if failures.is_empty() {
        Ok(csv)
    } else {
        Err(Error::Internal(format!("{} member run(s) failed; see summary.csv", failures.len())))
    }
}

/// Runs the oracle suites and returns the printed report plus overall status.
pub fn run_selftest(seed: u64) -> (String, bool) {
    let mut text = String::new();
    let mut ok = true;
    for r in selftest::run_all(seed) {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        ok &= r.passed();
        text.push_str(&format!("{status} {:<16} cases={} failures={}\n", r.name, r.cases, r.failures));
        if let Some(msg) = &r.first_failure {
            text.push_str(&format!("     first failure: {msg}\n"));
        }
    }
    (text, ok)
}

/// Executes a parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(args) => resolve_config(&args.config, &args.overrides).and_then(|cfg| {
            let out = args.out.clone().unwrap_or_else(|| default_out(&cfg));
            let curve = train_into(cfg, &out, args.force)?;
            if let Some(last) = curve.last() {
                println!(
                    "{}: {} epochs, final success A {:.3}",
                    out.display(),
                    curve.len(),
                    last.success_a
                );
            }
            Ok(())
        }),
        Command::Eval(args) => eval_run(&args).map(|s| println!("success {s:.4}")),
        Command::Heatmap(args) => heatmap(&args),
        Command::Compare(args) => compare(&args).map(|csv| print!("{csv}")),
        Command::Selftest(args) => {
            let (text, ok) = run_selftest(args.seed);
            print!("{text}");
            return if ok { EXIT_OK } else { EXIT_TEST_FAILURE };
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
