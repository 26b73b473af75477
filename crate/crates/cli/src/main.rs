//! `mim`: command-line surface over the training, serving and evaluation stages.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use mim_core::ciubm::CtrVariant;
use mim_core::pipeline::{gradient_suite, metrics_text, render_summary, PipelineConfig, PipelineError, RunDir};
use mim_core::repcenter::{render_flop_table, serve_parameters, EmbeddingStore, WindowBuffer};

#[derive(Parser)]
#[command(name = "mim", version, about = "Multi-modal content interest modeling pipeline")]
struct Cli {
    /// Pipeline config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parent of the run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world, triplets and CTR splits.
    GenData,
    /// Align the image and text projection heads.
    PretrainDma,
    /// Contrastive fine-tuning of the encoder on purchase triplets.
    TrainCsft,
    /// Precompute the embedding table for every item.
    BuildRepcenter,
    /// Serve an embedding table over TCP.
    ServeParams {
        #[arg(long)]
        bind: Option<String>,
        /// Defaults to the run directory's table.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        window_count: Option<usize>,
        #[arg(long)]
        window_ms: Option<u64>,
        /// Stop after this long instead of serving forever.
        #[arg(long)]
        run_for_ms: Option<u64>,
    },
    /// Train and score one CTR variant.
    TrainCtr {
        /// base, base+mim, mim_no_id, mim_no_content or mim_no_fusion.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Multi-seed evaluation with the ablation table.
    Eval,
    /// Analytic FLOP table.
    Flops {
        #[arg(long)]
        json: bool,
    },
    /// Compare tape gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// All stages followed by the evaluation.
    Pipeline,
}

fn load_config(path: Option<&PathBuf>) -> Result<PipelineConfig, PipelineError> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
    PipelineConfig::from_json(&text)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli.config.as_ref())?;
    if let Command::GradCheck { cases, seed } = cli.command {
        let checks = gradient_suite(cases, seed)?;
        for c in &checks {
            let verdict = if c.passed() { "pass" } else { "FAIL" };
            println!(
                "op={} cases={} max_rel_error={:.3e} {verdict}",
                c.op, c.cases, c.max_rel_error
            );
        }
        if let Some(bad) = checks.iter().find(|c| !c.passed()) {
            return Err(PipelineError::Invariant(format!("gradient mismatch in {}", bad.op)));
        }
        return Ok(());
    }
    let dir = RunDir::create(cfg, &cli.out)?;
    match cli.command {
        Command::GenData => {
            let d = dir.gen_data()?;
            println!(
                "items={} users={} purchases={} triplets={} train={} test={} dropped={}",
                d.n_items, d.n_users, d.n_purchases, d.n_triplets, d.n_train, d.n_test, d.dropped
            );
        }
        Command::PretrainDma => {
            let loss = dir.pretrain_dma()?;
            for (i, l) in loss.iter().enumerate() {
                println!("dma_loss.epoch{}={l}", i + 1);
            }
        }
        Command::TrainCsft => {
            let r = dir.train_csft()?;
            println!(
                "steps={} first_loss={} last_loss={} negatives={} margin_before={:.4} margin_after={:.4}",
                r.trajectory.len(),
                r.trajectory.first().copied().unwrap_or(f64::NAN),
                r.trajectory.last().copied().unwrap_or(f64::NAN),
                r.final_negatives,
                r.alignment_before.margin(),
                r.alignment_after.margin()
            );
        }
        Command::BuildRepcenter => {
            let s = dir.build_repcenter()?;
            println!("entries={} dim={} version={}", s.entries, s.dim, s.version);
        }
        Command::ServeParams {
            bind,
            store,
            window_count,
            window_ms,
            run_for_ms,
        } => {
            let rc = &dir.cfg.repcenter;
            let table = match store {
                Some(p) if !p.is_file() => {
                    return Err(PipelineError::MissingArtifact(p.display().to_string()));
                }
                Some(p) => EmbeddingStore::load(&p)?,
                None => dir.load_store()?,
            };
            let window = WindowBuffer::new(
                window_count.unwrap_or(rc.window_count),
                Duration::from_millis(window_ms.unwrap_or(rc.window_ms)),
            );
            let bind = bind.unwrap_or_else(|| rc.bind.clone());
            let handle = serve_parameters(Arc::new(table), Arc::new(window), &bind)?;
            println!("listening {}", handle.addr());
            std::io::stdout().flush()?;
            match run_for_ms {
                Some(ms) => {
                    std::thread::sleep(Duration::from_millis(ms));
                    handle.shutdown();
                }
                None => handle.wait(),
            }
        }
        Command::TrainCtr { variant } => {
            let variant = match variant {
                Some(v) => {
                    CtrVariant::parse(&v).ok_or_else(|| PipelineError::Config(format!("unknown variant {v:?}")))?
                }
                None => dir.cfg.ciubm.variant,
            };
            print!("{}", metrics_text(&dir.train_ctr(variant)?));
        }
        Command::Eval => {
            let report = dir.eval()?;
            print!("{}", render_summary(&report));
        }
        Command::Flops { json } => {
            let table = dir.flops()?;
            if json {
                print!("{}", std::fs::read_to_string(dir.file("flops.json"))?);
            } else {
                print!("{}", render_flop_table(&table));
            }
        }
        Command::Pipeline => {
            let report = dir.pipeline()?;
            if let Some(eval) = &report.evaluation {
                print!("{}", render_summary(eval));
            }
            println!("report={}", dir.file("report.json").display());
        }
        Command::GradCheck { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error class={} {message}", e.class());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
