use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use unlearnlab::harness::{self, ExperimentConfig, RunDir};
use unlearnlab::unlearn::Method;

#[derive(Parser)]
#[command(
    name = "unlearnlab",
    version,
    about = "Unlearning vs. obfuscation on synthetic persona worlds"
)]
struct Cli {
    /// Run directory holding every artifact of one experiment.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the world and corpus; echoes the config into the run directory.
    GenWorld {
        /// TOML config; defaults apply to anything it leaves out.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the base model on the corpus.
    TrainBase,
    /// Unlearn the forget set from the base model.
    Unlearn {
        #[arg(long, value_parser = parse_method)]
        method: Method,
    },
    /// Build the probe suite and record every model's answers.
    Probe,
    /// Write the metric CSV and markdown report.
    Report,
    /// Obfuscation over learning rates × sample counts.
    Sweep,
    /// Fine-tune an unlearned model on retain QA and re-probe.
    SftAttack {
        #[arg(long, value_parser = parse_method, default_value = "df-mcq")]
        method: Method,
    },
    /// Sequential DF-MCQ over several targets.
    Continual,
    /// Compare loss gradients with finite differences on both backends.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        coords: usize,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

const GRAD_TOLERANCE: f64 = 1e-4;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let dir = RunDir::new(&cli.run_dir);
    match cli.cmd {
        Cmd::GenWorld { config } => {
            let text = match config {
                Some(p) => std::fs::read_to_string(&p)
                    .with_context(|| format!("reading {}", p.display()))?,
                None => ExperimentConfig::default().to_toml(),
            };
            println!("{}", harness::cmd_gen_world(&dir, &text)?);
        }
        Cmd::TrainBase => println!("{}", harness::cmd_train_base(&dir)?),
        Cmd::Unlearn { method } => println!("{}", harness::cmd_unlearn(&dir, method)?),
        Cmd::Probe => println!("{}", harness::cmd_probe(&dir)?),
        Cmd::Report => println!("{}", harness::cmd_report(&dir)?),
        Cmd::Sweep => {
            let (cells, s) = harness::cmd_sweep(&dir)?;
            if s.n_ok == 0 {
                bail!("cmd_sweep: every one of {} cells was skipped", cells.len());
            }
            println!(
                "{} cells ({} ok), pearson r {:?}, monotone rows {}/{}",
                s.n_cells, s.n_ok, s.pearson_r, s.monotone_rows, s.n_rows
            );
            if !s.monotone_check {
                log::warn!("yes rate is nondecreasing in fewer than 2/3 of the sweep rows");
            }
        }
        Cmd::SftAttack { method } => {
            for r in harness::cmd_sft_attack(&dir, method)? {
                println!(
                    "{} {}: forget ROUGE-L {:.3}, refusal {:.3}, MCQ entropy {:.3}",
                    r.model, r.phase, r.forget_rouge_l, r.forget_refusal_rate, r.forget_mcq_entropy
                );
            }
        }
        Cmd::Continual => {
            for r in harness::cmd_continual(&dir)? {
                println!(
                    "stage {} target p{}: MCQ entropy {:.3}, hard retain {:.3} (base {:.3})",
                    r.stage,
                    r.target,
                    r.mcq_entropy,
                    r.hard_retain_accuracy,
                    r.base_hard_retain_accuracy
                );
            }
        }
        Cmd::GradCheck { seed, coords } => {
            let lines = harness::grad_check_suite(seed, coords)?;
            let mut worst: f64 = 0.0;
            for l in &lines {
                println!(
                    "{:<12} {:<14} {:>3} coords  max rel error {:.2e}",
                    l.backend, l.loss, l.checked, l.max_rel_error
                );
                worst = worst.max(l.max_rel_error);
            }
            if worst > GRAD_TOLERANCE {
                bail!(
                    "gradient check failed: max relative error {worst:.2e} > {GRAD_TOLERANCE:.0e}"
                );
            }
        }
    }
    Ok(())
}
