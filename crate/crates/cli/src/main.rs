use clap::{Args, Parser, Subcommand};
use sketchlab::experiment::{self, ExperimentConfig, Outcome};
use sketchlab::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sketchlab", version, about = "Discrete Gaussian lemmas and streaming-to-sketch extraction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for CSV, JSON and sketch files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    scenario: Option<String>,
    /// exact | mollified
    #[arg(long, global = true)]
    route: Option<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Check every analytic inequality on concrete instances.
    VerifyLemmas,
    /// Extract a linear sketch from a scenario algorithm and evaluate it.
    Extract,
    /// Translation TV of conditioned laws across a range of radii.
    TvSweep,
    /// Small-ball probability against its bound.
    Smallball,
    /// Summarize an output directory, or document the CSV columns.
    Report {
        #[arg(long)]
        schema: bool,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.run.seed = s;
    }
    if let Some(s) = &c.scenario {
        cfg.run.scenario = s.clone();
    }
    if let Some(r) = &c.route {
        if r != "exact" && r != "mollified" {
            return Err(Error::Usage(format!("--route must be exact or mollified, got {r:?}")));
        }
        cfg.run.route = r.clone();
    }
    Ok(cfg)
}

fn emit(out: &Outcome, dir: &std::path::Path) -> Result<()> {
    out.write(dir)?;
    for t in &out.tables {
        println!("{}: {} rows, {} failed -> {}", t.name, t.rows.len(), t.failed(), dir.join(format!("{}.csv", t.name)).display());
    }
    for (name, _) in &out.artifacts {
        println!("wrote {}", dir.join(name).display());
    }
    for n in &out.notes {
        println!("note: {n}");
    }
    for t in &out.tables {
        let bad = t.failures();
        if bad.is_empty() {
            continue;
        }
        let col = |r: &[String], name: &str| {
            t.columns.iter().position(|c| c == name).and_then(|i| r[i].parse::<f64>().ok()).unwrap_or(f64::NAN)
        };
        let r = bad[0];
        return Err(match t.name.as_str() {
            "lemmas" => Error::bound(format!("{} #{} ({} failing rows)", r[0], r[1], bad.len()), col(r, "lhs"), col(r, "rhs")),
            "smallball" => Error::bound(format!("small-ball {}", r[0]), col(r, "empirical"), col(r, "bound")),
            _ => Error::Conflict(format!(
                "{} {}: {} conflicting fibers",
                r[0],
                r[1],
                col(r, "conflicts")
            )),
        });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.verb {
        Verb::Report { schema: true } => {
            print!("{}", experiment::schema_text());
            Ok(())
        }
        Verb::Report { schema: false } => {
            let s = experiment::summarize(&cli.common.out)?;
            for n in &s.notes {
                println!("{n}");
            }
            Ok(())
        }
        verb => {
            let cfg = load(&cli.common)?;
            let out = match verb {
                Verb::VerifyLemmas => experiment::verify_lemmas(&cfg)?,
                Verb::Extract => experiment::extract(&cfg)?,
                Verb::TvSweep => experiment::tv_sweep(&cfg)?,
                Verb::Smallball => experiment::smallball(&cfg)?,
                Verb::Report { .. } => unreachable!(),
            };
            emit(&out, &cli.common.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
