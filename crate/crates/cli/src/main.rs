use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use coser::checkpoint::CheckpointArchive;
use coser::config::RunConfig;
use coser::degradation::make_pairs;
use coser::diffusion::SampleOptions;
use coser::error::{Error, Result};
use coser::eval::evaluate;
use coser::imaging::{load_png, save_png};
use coser::model::{BaseModel, CognitiveEncoder};
use coser::params::ParamStore;
use coser::pipeline::{Pipeline, SrFlags};
use coser::reference::{decode_references, generate_reference};
use coser::toy::{make_toy_dataset, Dataset};
use coser::train::{train_base, train_cognitive, train_sr, write_loss_log, StageOutcome};

#[derive(Parser)]
#[command(
    name = "coser",
    version,
    about = "Cognitive diffusion super-resolution at desk scale"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set sr_steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Archives {
    /// Stage-1 archive (cognitive encoder); defaults to `run_dir/stage1.coser`.
    #[arg(long)]
    cognitive: Option<PathBuf>,
    /// Stage-2 archive (SR model); defaults to `run_dir/stage2.coser`.
    #[arg(long)]
    sr: Option<PathBuf>,
}

#[derive(Args)]
struct Ablation {
    #[arg(long)]
    no_reference: bool,
    #[arg(long)]
    no_cognition: bool,
}

impl Ablation {
    fn flags(&self) -> SrFlags {
        SrFlags {
            no_reference: self.no_reference,
            no_cognition: self.no_cognition,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a captioned shapes dataset and its degraded LR pairs.
    MakeToyDataset {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `data_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Degrade a directory of HR PNGs into LR pairs.
    MakePairs {
        #[arg(long)]
        hr_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage 0: text-conditioned base diffusion model.
    TrainBase,
    /// Stage 1: LR preprocessor and cognitive adapter.
    TrainCognitive,
    /// Stage 2: control encoder and AiA attention on the frozen stages.
    TrainSr {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        cognitive: Option<PathBuf>,
    },
    /// Generate reference images for one LR image.
    GenerateRef {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        cognitive: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Super-resolve one LR image 4x.
    SuperResolve {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        archives: Archives,
        #[command(flatten)]
        ablation: Ablation,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Metrics report over a pair manifest.
    Evaluate {
        /// `pairs.jsonl` of the test split.
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to `run_dir/report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        archives: Archives,
        #[command(flatten)]
        ablation: Ablation,
        #[arg(long, default_value_t = 25)]
        batch: usize,
    },
}

fn finish_stage(cfg: &RunConfig, stage: u8, outcome: &StageOutcome) -> Result<()> {
    let path = cfg.checkpoint_path(stage);
    outcome.archive.save(&path)?;
    write_loss_log(
        &cfg.run_dir.join(format!("stage{stage}_loss.csv")),
        &outcome.losses,
    )?;
    let first = outcome.losses.first().copied().unwrap_or(f64::NAN);
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "stage {stage}: loss {first:.5} -> {last:.5}, saved {}",
        path.display()
    );
    Ok(())
}

fn archive_or(path: &Option<PathBuf>, cfg: &RunConfig, stage: u8) -> Result<CheckpointArchive> {
    let p = path.clone().unwrap_or_else(|| cfg.checkpoint_path(stage));
    CheckpointArchive::load(&p)
}

fn load_pipeline(cfg: &RunConfig, a: &Archives) -> Result<Pipeline> {
    Pipeline::load(
        cfg,
        &archive_or(&a.cognitive, cfg, 1)?,
        &archive_or(&a.sr, cfg, 2)?,
    )
}

fn load_lr(path: &Path) -> Result<candle_core::Tensor> {
    Ok(load_png(path)?.unsqueeze(0)?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::MakeToyDataset { n, seed, out } => {
            let out = out.unwrap_or_else(|| cfg.data_dir.clone());
            let m = make_toy_dataset(
                n,
                seed.unwrap_or(cfg.seed),
                &out,
                cfg.image_size,
                &cfg.degradation(),
            )?;
            println!("wrote {} pairs to {}", m.pairs.len(), out.display());
        }
        Command::MakePairs { hr_dir, out, seed } => {
            let pairs = make_pairs(&hr_dir, &out, &cfg.degradation(), seed.unwrap_or(cfg.seed))?;
            println!("wrote {} pairs to {}", pairs.len(), out.display());
        }
        Command::TrainBase => {
            let data = Dataset::load(&cfg.data_dir)?;
            finish_stage(&cfg, 0, &train_base(&cfg, &data)?)?;
        }
        Command::TrainCognitive => {
            let data = Dataset::load(&cfg.data_dir)?;
            finish_stage(&cfg, 1, &train_cognitive(&cfg, &data)?)?;
        }
        Command::TrainSr { base, cognitive } => {
            let data = Dataset::load(&cfg.data_dir)?;
            let base = archive_or(&base, &cfg, 0)?;
            let cognitive = archive_or(&cognitive, &cfg, 1)?;
            finish_stage(&cfg, 2, &train_sr(&cfg, &data, &base, &cognitive)?)?;
        }
        Command::GenerateRef {
            input,
            out,
            base,
            cognitive,
            seed,
        } => {
            let store = ParamStore::new(cfg.seed, candle_core::DType::F32);
            archive_or(&base, &cfg, 0)?.load_into(&store)?;
            archive_or(&cognitive, &cfg, 1)?.load_into(&store)?;
            let enc = CognitiveEncoder::new(&store, &cfg)?;
            let base = BaseModel::new(&store, &cfg)?;
            let lr = load_lr(&input)?;
            let (_, _, h, w) = lr.dims4()?;
            let seed = seed.unwrap_or(cfg.seed);
            let opts = SampleOptions {
                num_steps: cfg.sample_steps,
                guidance_scale: cfg.guidance_scale,
                seed,
            };
            let e = enc.embed(&lr)?.detach();
            let refs =
                generate_reference(&base, &cfg.noise_schedule()?, &e, cfg.n_refs, (h, w), &opts)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut entries = Vec::new();
            for (k, img) in decode_references(&refs)?.iter().enumerate() {
                let name = format!("ref_{k}.png");
                save_png(&out.join(&name), &img.get(0)?)?;
                entries.push(json!({ "file": name, "seed": seed ^ k as u64 }));
            }
            let manifest = out.join("references.json");
            let text =
                serde_json::to_string_pretty(&json!({ "input": input, "references": entries }))?;
            std::fs::write(&manifest, text + "\n").map_err(|e| Error::io(&manifest, e))?;
            println!("wrote {} references to {}", refs.len(), out.display());
        }
        Command::SuperResolve {
            input,
            output,
            archives,
            ablation,
            seed,
        } => {
            let pipeline = load_pipeline(&cfg, &archives)?;
            let lr = load_lr(&input)?;
            let out = pipeline.super_resolve(&lr, ablation.flags(), seed.unwrap_or(cfg.seed))?;
            save_png(&output, &out.hr.get(0)?)?;
            println!("wrote {}", output.display());
        }
        Command::Evaluate {
            manifest,
            out,
            archives,
            ablation,
            batch,
        } => {
            let pipeline = load_pipeline(&cfg, &archives)?;
            let data = Dataset::load_manifest(&manifest)?;
            let report = evaluate(&pipeline, &data, ablation.flags(), batch)?;
            let out = out.unwrap_or_else(|| cfg.run_dir.join("report.json"));
            report.save(&out)?;
            println!(
                "psnr {:.2} (bicubic {:.2}), ssim {:.4}, win rate {:.2}, report {}",
                report.psnr_mean,
                report.bicubic_psnr_mean,
                report.ssim_mean,
                report.win_rate,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
