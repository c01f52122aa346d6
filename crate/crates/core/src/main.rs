use std::process::ExitCode;

use clap::Parser;
use overcount::cli::{self, Cli, Command};

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Count(args) => {
            let cfg = args.settings.clone().resolve(args.config.as_deref())?;
            let outcome = cli::cmd_count(&args, &cfg)?;
            for f in &outcome.failures {
                eprintln!("error: scene {}: {}", f.scene_id, f.message);
            }
            eprintln!(
                "counted {} of {} scenes -> {}",
                outcome.scenes_attempted - outcome.failures.len(),
                outcome.scenes_attempted,
                outcome.counts_path.display()
            );
            Ok(if outcome.total_failure() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Eval(args) => {
            let cfg = args.settings.clone().resolve(args.config.as_deref())?;
            let outcome = cli::cmd_eval(&args, &cfg)?;
            for s in &outcome.skipped {
                eprintln!("skipped scene {}: {}", s.scene_id, s.message);
            }
            let p = &outcome.aggregate.prf;
            eprintln!(
                "precision {:.4} recall {:.4} f1 {:.4} -> {}",
                p.precision,
                p.recall,
                p.f1,
                outcome.report_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Trend(args) => {
            let report = cli::cmd_trend(&args)?;
            match report.overall_change {
                Some(c) => eprintln!("overall change {c:+.4} over {} locations", report.rows.len()),
                None => eprintln!("no location has a defined change ratio"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Split(args) => {
            let (train, test) = cli::cmd_split(&args)?;
            eprintln!("train {train} scenes, test {test} scenes");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
