//! `ddnet` command line. Every subcommand is a request to the service; with
//! no `--server` an embedded one is started on a loopback port.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use ddnet_client::Client;
use ddnet_core::api::{
    ApiError, BenchRequest, EnhanceRequest, EvalRequest, GradmapRequest, JobState, SynthesizeRequest, TrainStatus,
};
use ddnet_core::bench::{parse_resolution, BenchOptions, BenchmarkReport};
use ddnet_core::trainer::TrainConfig;
use tokio::net::TcpListener;

const POLL: Duration = Duration::from_millis(250);

#[derive(Debug, Parser)]
#[command(name = "ddnet", version, about = "Low-light image enhancement with double-domain guidance")]
pub struct Cli {
    /// Service URL; an embedded server is started when omitted.
    #[arg(long, global = true, env = "DDNET_SERVER")]
    pub server: Option<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML config, with `key=value` overrides.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Enhance an image or every image in a directory.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory, or an explicit image path for a single input.
        #[arg(long = "out")]
        output: PathBuf,
        /// Process in overlapping tiles of this size.
        #[arg(long)]
        tile: Option<usize>,
    },
    /// PSNR/SSIM on a `<root>/low`, `<root>/high` dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for `eval.csv` and `eval.json`.
        #[arg(long, default_value = "reports")]
        report: PathBuf,
    },
    /// Build a low-light training set from clear images.
    Synthesize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time inference over a set of resolutions.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "res", value_name = "WxH", value_parser = resolution)]
        resolutions: Vec<(usize, usize)>,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `bench.csv` and `bench.json`.
        #[arg(long, default_value = "reports")]
        report: PathBuf,
    },
    /// Write an image's gradient map as a PNG.
    Gradmap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
}

fn resolution(text: &str) -> Result<(usize, usize), String> {
    parse_resolution(text).map_err(|e| e.to_string())
}

/// Paths are sent to a server that may run elsewhere in the filesystem.
fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> ApiError {
    ApiError::new("io", format!("{}: {e}", path.display()))
}

async fn connect(server: Option<String>) -> Result<Client, ApiError> {
    if let Some(url) = server {
        return Ok(Client::new(url));
    }
    let listener = TcpListener::bind("127.0.0.1:0")
        .await
        .map_err(|e| ApiError::new("io", format!("cannot start embedded server: {e}")))?;
    let addr = listener.local_addr().map_err(|e| ApiError::new("io", e.to_string()))?;
    tokio::spawn(ddnet_service::serve(listener));
    Ok(Client::new(format!("http://{addr}")))
}

pub async fn run(cli: Cli) -> Result<(), ApiError> {
    let client = connect(cli.server).await?;
    match cli.command {
        Command::Train { config, overrides } => train(&client, config.as_deref(), &overrides).await,
        Command::Enhance {
            ckpt,
            input,
            output,
            tile,
        } => {
            let req = EnhanceRequest {
                checkpoint: absolute(&ckpt),
                input: absolute(&input),
                output: absolute(&output),
                tile,
            };
            for path in client.enhance(&req).await?.written {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Eval { ckpt, data, report } => {
            let req = EvalRequest {
                checkpoint: absolute(&ckpt),
                data: absolute(&data),
            };
            let resp = client.eval(&req).await?;
            for w in &resp.warnings {
                eprintln!("warning: {w}");
            }
            println!("{:<24} {:>8} {:>7}", "image", "PSNR", "SSIM");
            for row in &resp.report.per_image {
                println!("{:<24} {:>8.2} {:>7.4}", row.id, row.psnr, row.ssim);
            }
            println!("{}", resp.report.summary());
            create_dir(&report)?;
            resp.report.write_csv(report.join("eval.csv"))?;
            resp.report.write_summary_json(report.join("eval.json"))?;
            Ok(())
        }
        Command::Synthesize { input, output, seed } => {
            let req = SynthesizeRequest {
                input: absolute(&input),
                output: absolute(&output),
                seed,
            };
            let resp = client.synthesize(&req).await?;
            println!("{} pairs written under {}", resp.records.len(), req.output.display());
            println!("coefficients: {}", resp.coefficients.display());
            Ok(())
        }
        Command::Bench {
            ckpt,
            resolutions,
            warmup,
            repeats,
            tile,
            seed,
            report,
        } => {
            let mut options = BenchOptions {
                warmup,
                repeats,
                tile,
                seed,
                ..BenchOptions::default()
            };
            if !resolutions.is_empty() {
                options.resolutions = resolutions;
            }
            let req = BenchRequest {
                checkpoint: absolute(&ckpt),
                options,
            };
            let result = client.bench(&req).await?;
            print!("{}", result.to_table());
            write_bench_reports(&result, &report)
        }
        Command::Gradmap { input, output } => {
            let req = GradmapRequest {
                input: absolute(&input),
                output: absolute(&output),
            };
            let done = client.gradmap(&req).await?;
            println!("{}", done.output.display());
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), ApiError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_bench_reports(report: &BenchmarkReport, dir: &Path) -> Result<(), ApiError> {
    create_dir(dir)?;
    let json_path = dir.join("bench.json");
    let text = serde_json::to_string_pretty(report).expect("serializable report");
    std::fs::write(&json_path, text + "\n").map_err(|e| io_error(&json_path, e))?;
    let csv_path = dir.join("bench.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_error(&csv_path, e))?;
    for row in &report.rows {
        w.serialize(row).map_err(|e| io_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| io_error(&csv_path, e))
}

fn absolute_paths(cfg: &mut TrainConfig) {
    for p in [&mut cfg.train_root, &mut cfg.synth_root, &mut cfg.resume].into_iter().flatten() {
        *p = absolute(p);
    }
    cfg.out_dir = absolute(&cfg.out_dir);
}

fn progress(status: &TrainStatus) {
    if let Some(r) = &status.last {
        println!(
            "epoch {:>3}/{}  step {:>6}  lr {:.1e}  lap {:.4}  coarse {:.4}  final {:.4}  total {:.4}",
            r.epoch + 1,
            status.epochs,
            r.step,
            r.lr,
            r.lap,
            r.coarse,
            r.final_,
            r.total
        );
    }
}

/// Starts a training job and follows it; Ctrl-C asks the job to stop and
/// checkpoint.
async fn train(client: &Client, config: Option<&Path>, overrides: &[String]) -> Result<(), ApiError> {
    let mut cfg = TrainConfig::from_sources(config, overrides)?;
    absolute_paths(&mut cfg);
    let id = client.start_training(&cfg).await?.id.0;
    let mut interrupt = std::pin::pin!(tokio::signal::ctrl_c());
    let mut interrupted = false;
    let mut shown = None;
    loop {
        tokio::select! {
            _ = &mut interrupt, if !interrupted => {
                interrupted = true;
                eprintln!("stopping after the current step");
                client.stop_training(id).await?;
            }
            _ = tokio::time::sleep(POLL) => {}
        }
        let status = client.training_status(id).await?;
        let done = status.state != JobState::Running;
        let latest = status.last.map(|r| (r.epoch, r.step));
        if latest.is_some() && latest != shown && (done || latest.map(|l| l.0) != shown.map(|s| s.0)) {
            progress(&status);
            shown = latest;
        }
        match status.state {
            JobState::Running => continue,
            JobState::Failed => return Err(status.error.unwrap_or_else(|| ApiError::new("internal", "training failed"))),
            JobState::Finished | JobState::Stopped => {
                if let Some(out) = status.outcome {
                    println!("checkpoint: {}", out.checkpoint.display());
                    println!("log: {}", out.log.display());
                }
                return Ok(());
            }
        }
    }
}
