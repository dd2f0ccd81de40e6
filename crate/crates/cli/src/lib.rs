//! Command-line driver: `incdet prepare | run | report`.

pub mod config;
pub mod error;
pub mod layout;
pub mod plot;
pub mod prepare;
pub mod report;
pub mod run;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use incdet::distill::Method;

use config::ExperimentConfig;
use error::{CliError, CliResult};
use layout::{resolve_out, ScenarioDir};

#[derive(Debug, Parser)]
#[command(name = "incdet", version, about = "Class-incremental object detection experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split the dataset and write the scenario manifest and per-step annotations.
    Prepare(Common),
    /// Train and evaluate every (method, seed) pair, then aggregate.
    Run(Common),
    /// Aggregate existing run reports into summary tables and plots.
    Report(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML). Defaults to the built-in desk setup.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root; overrides INCDET_OUT and the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seed: Option<Vec<u64>>,
    /// Comma-separated methods (finetune, ilod, filod, dynykd, joint).
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Option<Vec<Method>>,
    /// Scenario as `b-n`, e.g. `4-2`.
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Option<(usize, usize)>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| format!("unknown method '{s}'"))
}

fn parse_scenario(s: &str) -> Result<(usize, usize), String> {
    let (b, n) = s.split_once('-').ok_or_else(|| format!("expected b-n, got '{s}'"))?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("'{x}': {e}"));
    Ok((p(b)?, p(n)?))
}

/// A config with command-line overrides applied, plus where it came from.
pub struct Resolved {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub out: PathBuf,
}

impl Common {
    pub fn resolve(&self) -> CliResult<Resolved> {
        let (mut config, base_dir) = match &self.config {
            Some(p) => {
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (ExperimentConfig::load(p)?, base)
            }
            None => (ExperimentConfig::desk(), PathBuf::from(".")),
        };
        if let Some(s) = &self.seed {
            config.seeds = s.clone();
        }
        if let Some(m) = &self.methods {
            config.methods = m.clone();
        }
        if let Some((b, n)) = self.scenario {
            config.scenario.b = b;
            config.scenario.n = n;
        }
        config.validate()?;
        let out = resolve_out(self.out.as_deref(), &config.out);
        let out = if self.out.is_none() && out.is_relative() && out == config.out {
            base_dir.join(out)
        } else {
            out
        };
        Ok(Resolved { config, base_dir, out })
    }
}

impl Resolved {
    pub fn scenario_dir(&self) -> ScenarioDir {
        ScenarioDir::new(&self.out, &self.config.scenario.label())
    }

    fn expected(&self) -> Vec<(Method, u64)> {
        let c = &self.config;
        c.methods.iter().flat_map(|&m| c.seeds.iter().map(move |&s| (m, s))).collect()
    }
}

fn do_prepare(r: &Resolved) -> CliResult<()> {
    let ds = r.config.dataset.load(&r.base_dir)?;
    let dir = r.scenario_dir();
    let m = prepare::prepare(&r.config, &ds, &dir)?;
    println!("{} {}", dir.manifest().display(), m.content_hash);
    Ok(())
}

fn do_report(r: &Resolved) -> CliResult<report::Aggregate> {
    let dir = r.scenario_dir();
    let reports = report::load_reports(&dir)?;
    if reports.is_empty() {
        log::warn!("no run reports under {}", dir.0.display());
    }
    let agg = report::aggregate(&r.config.scenario.label(), &reports, &r.expected());
    for (m, s) in &agg.missing {
        log::warn!("missing run: {m} seed {s}");
    }
    agg.write(&dir)?;
    print!("{}", agg.to_markdown());
    Ok(agg)
}

fn do_run(r: &Resolved) -> CliResult<()> {
    let ds = r.config.dataset.load(&r.base_dir)?;
    let dir = r.scenario_dir();
    prepare::prepare(&r.config, &ds, &dir)?;
    let runner = run::Runner::new(&r.config, &ds, &r.out)?;
    let statuses = runner.run_all()?;
    do_report(r)?;
    let failed: Vec<String> = statuses
        .iter()
        .filter(|s| !s.ok)
        .map(|s| format!("{} seed {}", s.method, s.seed))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Run(format!("aborted runs: {}", failed.join(", "))))
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Prepare(c) => do_prepare(&c.resolve()?),
        Command::Run(c) => do_run(&c.resolve()?),
        Command::Report(c) => do_report(&c.resolve()?).map(|_| ()),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn cli_main<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
