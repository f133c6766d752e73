use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tacforge::workbench::{
    cmd_eval, cmd_fit_material, cmd_generate, cmd_train, cmd_translate, cmd_translate_taxel, ConfigFile,
};
use tacforge::Error;

/// Tactile force-transfer workbench.
#[derive(Parser)]
#[command(name = "tacforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate contact sequences and write a sensor dataset.
    Generate(Args),
    /// Translate a source dataset onto another marker pattern.
    Translate(Args),
    /// Train a force model on one or more datasets.
    Train(Args),
    /// Evaluate a trained model against datasets with ground-truth forces.
    Eval(Args),
    /// Fit loading/unloading force-depth priors for a material.
    FitMaterial(Args),
    /// Convert a taxel log into binary marker images.
    TranslateTaxel(Args),
}

#[derive(clap::Args)]
struct Args {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn run(cmd: &Command) -> tacforge::Result<()> {
    let (Command::Generate(a)
    | Command::Translate(a)
    | Command::Train(a)
    | Command::Eval(a)
    | Command::FitMaterial(a)
    | Command::TranslateTaxel(a)) = cmd;
    let cfg = ConfigFile::load(&a.config)?;
    let out: &Path = &a.out;
    match cmd {
        Command::Generate(_) => {
            let m = cmd_generate(&cfg.generate(a.seed)?, out, cfg.cache_dir.as_deref())?;
            println!("{} sequences written to {}", m.sequences.len(), out.display());
        }
        Command::Translate(_) => {
            let m = cmd_translate(&cfg.translate(a.seed)?, out)?;
            let flagged: usize = m.sequences.iter().map(|s| s.flagged_frames.len()).sum();
            println!("{} sequences translated, {flagged} frame(s) flagged", m.sequences.len());
        }
        Command::Train(_) => {
            let model = cmd_train(&cfg.train(a.seed)?, out)?;
            println!("model with {} parameters written to {}", model.param_count(), out.join("model.tfm").display());
        }
        Command::Eval(_) => {
            let r = cmd_eval(&cfg.eval()?, out)?;
            let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
            for (axis, i) in [("Fx", 0), ("Fy", 1), ("Fz", 2)] {
                println!("{axis}: MAE {:.4} N, R2 {}", r.mae[i], fmt(r.r2[i]));
            }
            println!("Ftotal: MAE {:.4} N over {} frames", r.total_mae, r.count);
        }
        Command::FitMaterial(_) => {
            let p = cmd_fit_material(&cfg.fit_material()?, out)?;
            println!(
                "{}: loading RMS {:.4} N, unloading RMS {:.4} N",
                p.material_id, p.rms_loading, p.rms_unloading
            );
        }
        Command::TranslateTaxel(_) => {
            let n = cmd_translate_taxel(&cfg.taxel()?, out)?;
            println!("{n} frames written to {}", out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
