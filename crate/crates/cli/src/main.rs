//! `tavce`: dataset generation, metric pre-training, generator training,
//! evaluation, ablation and gradient checking.
//!
//! Every setting can come from a `key = value` file (`--config`) and be
//! overridden by the matching flag. Set `TAVCE_THREADS=N` for the
//! deterministic parallel mode; unset or `1` is the single-threaded
//! reference. Errors are reported as a single `error: …` line on stderr.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use tavce_core::binio::write_atomic;
use tavce_core::checkpoint::Checkpoint;
use tavce_core::evaluation::{evaluate, run_ablation, AblationCell};
use tavce_core::exec::Executor;
use tavce_core::gradsuite::{format_outcome, run_suite, SUITE_EPS, SUITE_SEEDS};
use tavce_core::synthdata::{generate_dataset, read_dataset, split_by_id, write_dataset, SequenceSample};
use tavce_core::training::{format_loss_log, train_stage1_with, train_stage2_with, TrainOutput};

use config::{CliConfig, SCHEMA};

const SUBCOMMANDS: [(&str, &str); 6] = [
    ("gen-data", "Generate a synthetic dataset (writes `data`)"),
    ("train-metric", "Stage 1: pre-train the correlation metric (reads `data`, writes `metric`)"),
    ("train-gen", "Stage 2: train the generator against the frozen metric (reads `data`, `metric`; writes `model`)"),
    ("eval", "Evaluate a stage-2 checkpoint on the held-out split (reads `data`, `model`; writes `report`)"),
    ("ablate", "Train and evaluate the CERL × CAR grid (reads `data`, `metric`; writes `report`)"),
    ("grad-check", "Finite-difference check of every differentiable op and loss (optional `report`)"),
];

fn cli() -> Command {
    let mut cmd = Command::new("tavce")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Temporal audio-visual correlation embedding: training and evaluation driver")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .global(true)
                .help("`key = value` config file; flags override it"),
        )
        .arg(
            Arg::new("no-cerl")
                .long("no-cerl")
                .action(ArgAction::SetTrue)
                .global(true)
                .help("same as --use-cerl false"),
        )
        .arg(
            Arg::new("no-car")
                .long("no-car")
                .action(ArgAction::SetTrue)
                .global(true)
                .help("same as --use-car false"),
        );
    for key in SCHEMA {
        let default = key.default.unwrap_or("none");
        cmd = cmd.arg(
            Arg::new(key.name)
                .long(key.flag())
                .value_name(key.name.to_uppercase())
                .global(true)
                .help(format!("{} [default: {default}]", key.help)),
        );
    }
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(name).about(about));
    }
    cmd
}

fn resolve(m: &ArgMatches) -> Result<CliConfig> {
    let mut flags: Vec<(String, String)> = SCHEMA
        .iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    for (flag, key) in [("no-cerl", "use_cerl"), ("no-car", "use_car")] {
        if m.get_flag(flag) {
            flags.push((key.to_string(), "false".to_string()));
        }
    }
    let file = m.get_one::<String>("config").map(PathBuf::from);
    CliConfig::resolve(file.as_deref(), &flags)
}

fn header(cfg: &CliConfig, subcommand: &str) -> String {
    format!("# tavce {subcommand}\n{}", cfg.echo())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn load_data(cfg: &CliConfig, sub: &str) -> Result<Vec<SequenceSample>> {
    let path = cfg.require("data", sub)?;
    let (data, _) = read_dataset(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(data)
}

fn load_checkpoint(cfg: &CliConfig, key: &str, sub: &str) -> Result<Checkpoint> {
    let path = cfg.require(key, sub)?;
    Checkpoint::load(&path).with_context(|| format!("reading {}", path.display()))
}

fn save_training(cfg: &CliConfig, sub: &str, out: &TrainOutput, ckpt_key: &str) -> Result<()> {
    let ckpt_path = cfg.require(ckpt_key, sub)?;
    let log_path = cfg.path("log").unwrap_or_else(|| {
        let mut p = ckpt_path.clone().into_os_string();
        p.push(".log");
        p.into()
    });
    out.checkpoint
        .save(&ckpt_path)
        .with_context(|| format!("writing {}", ckpt_path.display()))?;
    write_text(&log_path, &(header(cfg, sub) + &format_loss_log(&out.log)))?;
    let last = out.log.last().expect("at least one iteration");
    println!(
        "{sub}: {} iterations, final loss {:.6} (render {:.6}, reg {:.6}); wrote {} and {}",
        out.log.len(),
        last.total,
        last.render,
        last.reg,
        ckpt_path.display(),
        log_path.display()
    );
    Ok(())
}

fn cell_file(report: &Path, cell: &AblationCell) -> PathBuf {
    let on = |b: bool| if b { "on" } else { "off" };
    let mut p = report.as_os_str().to_owned();
    p.push(format!(".cerl-{}_car-{}.txt", on(cell.use_cerl), on(cell.use_car)));
    p.into()
}

fn dispatch(sub: &str, cfg: &CliConfig) -> Result<()> {
    let exec = Executor::from_env()?;
    match sub {
        "gen-data" => {
            let path = cfg.require("data", sub)?;
            let gcfg = cfg.generator();
            let data = generate_dataset(&gcfg)?;
            write_dataset(&data, &gcfg, &path).with_context(|| format!("writing {}", path.display()))?;
            println!(
                "gen-data: {} sequences × {} frames (seed {}, gamma {}) → {}",
                gcfg.num_sequences,
                gcfg.t,
                gcfg.seed,
                gcfg.gamma,
                path.display()
            );
        }
        "train-metric" => {
            let data = load_data(cfg, sub)?;
            let out = train_stage1_with(&data, &cfg.train(1), &exec)?;
            save_training(cfg, sub, &out, "metric")?;
        }
        "train-gen" => {
            let data = load_data(cfg, sub)?;
            let metric = load_checkpoint(cfg, "metric", sub)?;
            let out = train_stage2_with(&data, &metric, &cfg.train(2), &exec)?;
            save_training(cfg, sub, &out, "model")?;
        }
        "eval" => {
            let data = load_data(cfg, sub)?;
            let model = load_checkpoint(cfg, "model", sub)?;
            let report_path = cfg.require("report", sub)?;
            let (_, heldout) = split_by_id(&data)?;
            let report = evaluate(&heldout, &model, &exec)?;
            let text = header(cfg, sub) + &report.to_text();
            write_text(&report_path, &text)?;
            let mut bin = report_path.clone().into_os_string();
            bin.push(".bin");
            write_atomic(Path::new(&bin), &report.to_bytes()).context("writing binary report")?;
            print!("{}", report.to_text());
        }
        "ablate" => {
            let data = load_data(cfg, sub)?;
            let metric = load_checkpoint(cfg, "metric", sub)?;
            let report_path = cfg.require("report", sub)?;
            let (_, heldout) = split_by_id(&data)?;
            let grid = run_ablation(&data, &heldout, &metric, &cfg.train(2), &exec)?;
            for cell in &grid.cells {
                write_text(&cell_file(&report_path, cell), &(header(cfg, sub) + &cell.report.to_text()))?;
            }
            write_text(&report_path, &(header(cfg, sub) + &grid.to_tsv()))?;
            print!("{}", grid.to_tsv());
        }
        "grad-check" => {
            let outcomes = run_suite(SUITE_SEEDS, SUITE_EPS);
            let lines: String = outcomes.iter().map(|o| format_outcome(o) + "\n").collect();
            print!("{lines}");
            if let Some(path) = cfg.path("report") {
                write_text(&path, &(header(cfg, sub) + &lines))?;
            }
            let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass()).map(|o| o.name).collect();
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
        }
        other => unreachable!("clap accepted unknown subcommand {other}"),
    }
    Ok(())
}

fn one_line(text: &str) -> String {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more information"))
        .map(|l| l.trim_start_matches("error: "))
        .collect::<Vec<_>>()
        .join("; ")
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error: {}", one_line(&e.render().to_string()));
            return ExitCode::from(2);
        }
    };
    let (sub, sub_matches) = matches.subcommand().expect("subcommand required");
    let result = resolve(sub_matches).and_then(|cfg| dispatch(sub, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn help_lists_every_key_with_its_default() {
        let help = cli().render_long_help().to_string();
        for key in SCHEMA {
            assert!(help.contains(&format!("--{}", key.flag())), "{} missing", key.name);
            assert!(help.contains(&format!("[default: {}]", key.default.unwrap_or("none"))));
        }
    }

    #[test]
    fn flags_map_onto_the_schema() {
        let m = cli()
            .try_get_matches_from(["tavce", "train-gen", "--lr", "3e-4", "--no-car", "--lambda-reg", "0.25"])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        let t = resolve(sub).unwrap().train(2);
        assert_eq!(t.learning_rate, 3e-4);
        assert!(!t.use_car && t.use_cerl);
        assert_eq!(t.lambda_reg, 0.25);
    }

    #[test]
    fn errors_collapse_to_one_line() {
        let e = cli().try_get_matches_from(["tavce", "eval", "--taus", "3"]).unwrap_err();
        let line = one_line(&e.render().to_string());
        assert!(!line.contains('\n'));
        assert!(line.contains("--taus") && line.contains("--tau"), "{line}");
    }
}
