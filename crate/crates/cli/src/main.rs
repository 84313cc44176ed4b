use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vle_engagement::cohort_sim::SimConfig;
use vle_engagement::report::{cmd_evaluate, cmd_report, cmd_score, cmd_score_coursewide, cmd_simulate, RunConfig};
use vle_engagement::{Error, Result};

#[derive(Parser)]
#[command(name = "vle-engage", version, about = "Chapter-aligned engagement scores from VLE activity logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic log and grades file.
    Simulate(Common),
    /// Weekly chapter-aligned scores up to the as-of week.
    Score(Common),
    /// Retrospective course-wide scores over the full term.
    ScoreCoursewide(Common),
    /// Compare written scores against grades.
    Evaluate(Common),
    /// Score, course-wide score and evaluate in one run.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration. Without one, the default simulation setup is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    as_of_week: Option<u32>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold_minutes: Option<f64>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    grades: Option<PathBuf>,
}

impl Common {
    fn resolve(self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig { simulate: Some(SimConfig::default()), ..RunConfig::default() },
        };
        if let Some(w) = self.as_of_week {
            config.as_of_week = Some(w);
        }
        if let Some(out) = self.out {
            config.paths.out = out;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(t) = self.threshold_minutes {
            config.threshold_minutes = Some(t);
        }
        if let Some(log) = self.log {
            config.paths.log = Some(log);
        }
        if let Some(grades) = self.grades {
            config.paths.grades = Some(grades);
        }
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let config = c.resolve()?;
            let m = cmd_simulate(&config)?;
            println!(
                "simulated {} students, {} events -> {}",
                m.config.n_students,
                m.n_events,
                config.paths.out.display()
            );
        }
        Command::Score(c) => {
            let config = c.resolve()?;
            let m = cmd_score(&config)?;
            println!(
                "scored {} students through week {} (threshold {} min) -> {}",
                m.cohort_size,
                m.as_of_week,
                m.threshold_minutes,
                config.paths.out.display()
            );
        }
        Command::ScoreCoursewide(c) => {
            let config = c.resolve()?;
            let n = cmd_score_coursewide(&config)?;
            println!("course-wide scores for {n} students -> {}", config.paths.out.display());
        }
        Command::Evaluate(c) => {
            let config = c.resolve()?;
            let r = cmd_evaluate(&config)?;
            println!(
                "evaluated {} students over {} weeks -> {}",
                r.cohort_size,
                r.alignment.len(),
                config.paths.out.display()
            );
        }
        Command::Report(c) => {
            let config = c.resolve()?;
            let r = cmd_report(&config)?;
            println!("report for {} students -> {}", r.cohort_size, config.paths.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(e: &Error) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
