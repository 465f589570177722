//! Command-line driver for the replay-attack experiment pipeline.
//!
//! Every subcommand binds one manifest to its run directory and executes a
//! single stage. Stages are idempotent: completed work is skipped when the
//! artifacts on disk were produced by the same manifest, and a stage whose
//! upstream artifacts are missing exits nonzero naming the stage to run
//! first.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use replaysim_core::eval::{AttackPath, Framework};
use replaysim_core::manifest::ExperimentManifest;
use replaysim_core::pipeline::Pipeline;

/// Accelerator selection. Only `cpu` exists in this build.
const DEVICE_ENV: &str = "REPLAYSIM_DEVICE";

#[derive(Parser)]
#[command(
    name = "replaysim",
    version,
    about = "Over-the-air adversarial attacks on speaker verification, end to end"
)]
struct Cli {
    /// Experiment manifest (TOML).
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,

    /// Directory that holds run directories (one per manifest digest).
    #[arg(long, value_name = "PATH", default_value = "runs")]
    out_dir: PathBuf,

    /// Override the manifest's trial count (changes the run digest).
    #[arg(long, value_name = "N")]
    trials: Option<usize>,

    /// Override every seed in the manifest (changes the run digest).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus audio configured in the manifest.
    SynthCorpus,
    /// Index the corpus and assign the four disjoint splits.
    PrepareData,
    /// Train every verification system and calibrate its threshold.
    TrainAsv,
    /// Build the simulator's paired (clean, replayed) training set.
    GenReplayPairs,
    /// Train the replay simulator on the persisted pairs.
    TrainNrs,
    /// Synthesize adversarial examples per (framework, system) cell.
    Attack {
        /// Restrict to one framework: baseline | nrs_only | nrs_joint.
        #[arg(long, value_parser = parse_framework)]
        framework: Option<Framework>,
        /// Restrict to one system id from the manifest.
        #[arg(long, value_name = "ID")]
        system: Option<String>,
    },
    /// Score persisted attacks digitally and through the replay channel.
    Evaluate,
    /// Render CSV, summaries, and the success-rate chart.
    Report,
    /// Run every stage in order.
    Run,
}

fn parse_framework(s: &str) -> Result<Framework, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn check_device() -> anyhow::Result<()> {
    match std::env::var(DEVICE_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(()),
        Ok(v) if v.is_empty() || v.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(v) => bail!("{DEVICE_ENV}={v} is not available in this build; only `cpu` is"),
        Err(e) => Err(e).context(format!("reading {DEVICE_ENV}")),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    check_device()?;
    let mut manifest = ExperimentManifest::load(&cli.manifest)
        .with_context(|| format!("loading manifest {}", cli.manifest.display()))?;
    if let Some(trials) = cli.trials {
        manifest.evaluation.trials = trials;
    }
    if let Some(seed) = cli.seed {
        manifest.seed = seed;
        manifest.channel.seed = seed;
        manifest.attack.seed = seed;
        if let Some(synth) = &mut manifest.corpus.synth {
            synth.seed = seed;
        }
    }
    let manifest_dir = cli
        .manifest
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let pipeline = Pipeline::new(manifest, manifest_dir, &cli.out_dir)?;
    eprintln!("run directory: {}", pipeline.run_dir().display());

    match cli.command {
        Command::SynthCorpus => {
            let root = pipeline.ensure_corpus_audio()?;
            println!("corpus audio ready at {}", root.display());
        }
        Command::PrepareData => {
            let index = pipeline.prepare_data()?;
            println!(
                "indexed {} utterances (embedder_train {}, nrs_source {}, attack_set {}, enroll_pool {})",
                index.utterances.len(),
                index.embedder_train.len(),
                index.nrs_source.len(),
                index.attack_set.len(),
                index.enroll_pool.len()
            );
        }
        Command::TrainAsv => {
            for ckpt in pipeline.train_asv()? {
                println!(
                    "{}: holdout EER {:.4}, threshold {:.4} ({} calibration trials)",
                    ckpt.system_id, ckpt.holdout_eer, ckpt.threshold.tau, ckpt.threshold.trial_count
                );
            }
        }
        Command::GenReplayPairs => {
            let meta = pipeline.gen_replay_pairs()?;
            println!(
                "replay pairs ready: {} train / {} val (source: {:?})",
                meta.n_train, meta.n_val, meta.replay_source
            );
        }
        Command::TrainNrs => {
            let ckpt = pipeline.train_nrs()?;
            println!(
                "simulator trained: validation loss {:.6} (identity {:.6}), best epoch {} of {}",
                ckpt.best_val_loss,
                ckpt.identity_val_loss,
                ckpt.best_epoch,
                ckpt.history.len()
            );
        }
        Command::Attack { framework, system } => {
            pipeline.attack(framework, system.as_deref())?;
            println!(
                "attack artifacts under {}",
                pipeline.run_dir().join("attack").display()
            );
        }
        Command::Evaluate => {
            for run in pipeline.evaluate()? {
                println!(
                    "{:9} {:8} {:8} success {:5.1}% over {} trials (mean iterations {:.1}, cap failures {})",
                    run.framework.as_str(),
                    run.target_id,
                    match run.attack_path {
                        AttackPath::Digital => "digital",
                        AttackPath::Ota => "replayed",
                    },
                    100.0 * run.success_rate(),
                    run.n_trials(),
                    run.mean_iterations,
                    run.cap_failures
                );
            }
        }
        Command::Report => {
            let paths = pipeline.report()?;
            println!("{}", paths.csv.display());
            println!("{}", paths.markdown.display());
            println!("{}", paths.text.display());
            println!("{}", paths.plot.display());
        }
        Command::Run => {
            let paths = pipeline.run_all()?;
            println!("pipeline complete; report at {}", paths.csv.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn framework_values_parse() {
        assert_eq!(parse_framework("baseline").unwrap(), Framework::Baseline);
        assert_eq!(parse_framework("nrs_only").unwrap(), Framework::NrsOnly);
        assert_eq!(parse_framework("nrs_joint").unwrap(), Framework::NrsJoint);
        assert!(parse_framework("bogus").is_err());
    }
}
