//! `aural`: text-to-audio latent diffusion at desk scale, plus the
//! transcript-gap dataset miner.

mod audio_prep;
mod bundle;
mod commands;
mod config;
mod run_dir;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aural", version, about = "Latent text-to-audio generation and transcript-gap mining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine ambient-audio segments from subtitle gaps into a manifest.
    Mine {
        /// Directory of .vtt/.srt transcripts (file stem = video id).
        #[arg(long)]
        transcripts: PathBuf,
        /// CSV of video_id,duration_ms.
        #[arg(long)]
        durations: PathBuf,
        /// Filter thresholds TOML (defaults apply when omitted).
        #[arg(long)]
        filters: Option<PathBuf>,
        /// Output directory for manifest.jsonl, stats, drops.csv.
        #[arg(long)]
        out: PathBuf,
        /// Keep records the scorer cannot handle (flagged "unscored").
        #[arg(long)]
        allow_unscored: bool,
        /// JSON fixture {"video:start:end": "caption"}.
        #[arg(long)]
        captions: Option<PathBuf>,
        /// JSON fixture {"video:start:end": score}.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// External captioner command (line-delimited JSON over stdio).
        #[arg(long)]
        captioner_cmd: Option<String>,
        /// External scorer command (line-delimited JSON over stdio).
        #[arg(long)]
        scorer_cmd: Option<String>,
        /// Provider read timeout in seconds.
        #[arg(long, default_value_t = 30)]
        provider_timeout: u64,
    },
    /// Train the 1D-VAE on a directory of wav clips.
    TrainVae {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Train the FIT diffusion model over VAE latents from a manifest.
    TrainDiffusion {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding <video_id>.wav source audio.
        #[arg(long)]
        audio_root: PathBuf,
        /// VAE checkpoint from train-vae (not needed with --resume).
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Resume from an earlier training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Dataset ID attached to every manifest item.
        #[arg(long, default_value = "autorecap")]
        dataset_id: String,
    },
    /// Generate a 10 s wav from a text prompt.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "audiocaps")]
        dataset_id: String,
        /// Classifier-free guidance scale.
        #[arg(long)]
        cfg: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// ddpm or ddim.
        #[arg(long)]
        sampler: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute dataset statistics for an existing manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure forward FLOPs across patch counts and fit a*N + b.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Patch counts to probe.
        #[arg(long, value_delimiter = ',', default_values_t = vec![128usize, 256, 512, 1024, 2048, 4096])]
        points: Vec<usize>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mine {
            transcripts,
            durations,
            filters,
            out,
            allow_unscored,
            captions,
            scores,
            captioner_cmd,
            scorer_cmd,
            provider_timeout,
        } => commands::mine(
            &transcripts,
            &durations,
            filters.as_deref(),
            &out,
            allow_unscored,
            captions.as_deref(),
            scores.as_deref(),
            captioner_cmd.as_deref(),
            scorer_cmd.as_deref(),
            provider_timeout,
        ),
        Command::TrainVae { config, corpus, out, run_dir } => {
            commands::train_vae_cmd(&config, &corpus, &out, run_dir)
        }
        Command::TrainDiffusion {
            manifest,
            audio_root,
            vae,
            config,
            out,
            run_dir,
            resume,
            dataset_id,
        } => commands::train_diffusion_cmd(
            &manifest,
            &audio_root,
            vae.as_deref(),
            &config,
            &out,
            run_dir,
            resume.as_deref(),
            &dataset_id,
        ),
        Command::Sample { ckpt, prompt, dataset_id, cfg, steps, sampler, seed, out } => {
            commands::sample_cmd(
                &ckpt,
                &prompt,
                &dataset_id,
                cfg,
                steps,
                sampler.as_deref(),
                seed,
                &out,
            )
        }
        Command::Stats { manifest, out } => commands::stats_cmd(&manifest, &out),
        Command::Flops { config, out, points } => commands::flops_cmd(&config, &out, &points),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
