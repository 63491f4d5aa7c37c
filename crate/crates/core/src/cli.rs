//! Command-line front end. `run` returns the process exit code:
//! 0 when every check passes, 1 on a failed check, 2 on usage or configuration errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{KrasError, Result};
use crate::estimators::Method;
use crate::experiment::{ExperimentConfig, SuiteReport};
use crate::suites;

#[derive(Parser, Debug)]
#[command(name = "kras", version, about = "Kernel adversarial estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exact operator, inner-maximum, θ-representation, structural-zero and norm-constraint checks.
    Verify(Common),
    /// Population regularization-bias slopes over a λ sweep.
    Bias(Common),
    /// Monte Carlo convergence rates against the critical radius.
    Rates(Common),
    /// Repeated cross-fitted estimation with coverage summaries.
    Dml(Common),
    /// Closed forms against the nested oracle, conditioning, and the three-method table.
    KmmrCompare(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, value_name = "N", default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    /// Comma-separated subset of kras, lras, kmmr.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    method: Option<Vec<String>>,
    /// Also write plotdata.csv in long format.
    #[arg(long)]
    emit_plotdata: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(list) = &self.method {
            cfg.methods = list.iter().map(|m| m.trim().parse()).collect::<Result<Vec<Method>>>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dispatch(cmd: &Command, cfg: &ExperimentConfig) -> Result<SuiteReport> {
    match cmd {
        Command::Verify(_) => suites::verify_suite(cfg),
        Command::Bias(_) => suites::bias_suite(cfg),
        Command::Rates(_) => suites::rates_suite(cfg).map(|(r, _)| r),
        Command::Dml(_) => suites::dml_suite(cfg),
        Command::KmmrCompare(_) => suites::compare_suite(cfg),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if e.use_stderr() { write!(stderr, "{}", e.render()) } else { write!(stdout, "{}", e.render()) };
            return code;
        }
    };
    let common = match &cli.command {
        Command::Verify(c) | Command::Bias(c) | Command::Rates(c) | Command::Dml(c) | Command::KmmrCompare(c) => c,
    };
    let cfg = match common.load() {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return 2;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(common.jobs as usize).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(stderr, "error: cannot start worker pool: {e}");
            return 2;
        }
    };
    let report = match pool.install(|| dispatch(&cli.command, &cfg)) {
        Ok(r) => r,
        Err(e @ KrasError::Config(_)) => {
            let _ = writeln!(stderr, "error: {e}");
            return 2;
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return 1;
        }
    };
    if let Err(e) = report.write(&cfg.out, common.emit_plotdata) {
        let _ = writeln!(stderr, "error: {e}");
        return 1;
    }
    for c in &report.checks {
        let _ = writeln!(stdout, "{}", c.line());
    }
    let passed = report.checks.iter().filter(|c| c.pass).count();
    let _ = writeln!(stdout, "{passed}/{} checks passed; results in {}", report.checks.len(), cfg.out.display());
    if report.pass() {
        0
    } else {
        1
    }
}
