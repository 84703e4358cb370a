//! The `vtg` command line.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 1 for
//! failures while running. Every failure prints one line on stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{RunConfig, SEED_ENV};
use crate::data::{self, gen_mixed, gen_synthetic, SynthSpec, VideoFormat};
use crate::metrics::{aggregate, default_providers, evaluate_transition, MetricsReport};
use crate::pipeline::{self, codec_for, ensure_adapters, frame_hashes, generate_transition, RunManifest, Toggles};
use crate::Error;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "vtg",
    version,
    about = "Transition video generation between two frames with a toy latent video diffusion model",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set bmp.lambda=0.3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for every stochastic draw. Beats VTG_SEED and the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset of ground-truth transition videos.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of videos (default: data.count).
        #[arg(long)]
        count: Option<usize>,
        /// Split the videos evenly over all four tasks instead of `task`.
        #[arg(long)]
        mixed: bool,
    },
    /// Train the denoiser on a dataset written by gen-data.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fit (or reuse) the two endpoint LoRA adapters for a pair.
    TrainLora {
        #[arg(long)]
        pair: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Adapter cache directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the backward-motion path of a trained checkpoint.
    FinetuneBmp {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out dataset used to score the backward loss.
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Generate a transition between the two frames of a pair.
    Generate {
        /// Pair directory with first.png, last.png and prompts.json.
        #[arg(long)]
        pair: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Adapter cache (default: <out>/lora_cache).
        #[arg(long)]
        lora_cache: Option<PathBuf>,
        /// Re-run the configuration, pair and checkpoint recorded in a run manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score generated frames against the pair they were generated from.
    Evaluate {
        /// Frames directory, a generate output directory, or a root holding one per pair id.
        #[arg(long)]
        frames: PathBuf,
        /// Pair directory or a root of pair directories.
        #[arg(long)]
        pair: PathBuf,
        /// Report directory (default: the frames directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parse `argv` (including the program name), run it and return the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    eprint!("{e}");
                    EXIT_USAGE
                }
                _ => {
                    let rendered = e.to_string();
                    let first = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
                    eprintln!("vtg: {}", first.trim_start_matches("error: "));
                    EXIT_USAGE
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("vtg: {}", one_line(f.message()));
            f.code()
        }
    }
}

/// Defaults, then `--config`, then `VTG_SEED`, then `--set`, then `--seed`.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig, Failure> {
    let env_seed = std::env::var(SEED_ENV).ok();
    resolve_with(RunConfig::resolve(global.config.as_deref(), env_seed.as_deref(), &global.set)?, global)
}

fn resolve_with(mut cfg: RunConfig, global: &GlobalArgs) -> Result<RunConfig, Failure> {
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Generate { manifest: Some(m), pair, ckpt, out, lora_cache } => {
            let man = RunManifest::read(m).map_err(|e| usage(e.to_string()))?;
            let mut cfg = man.config.clone();
            for o in &cli.global.set {
                cfg.set(o)?;
            }
            let cfg = resolve_with(cfg, &cli.global)?;
            let pair = pair.clone().or(man.pair.clone()).ok_or_else(|| usage("the manifest records no pair; pass --pair"))?;
            let ckpt = ckpt.clone().or(man.checkpoint.clone()).ok_or_else(|| usage("the manifest records no checkpoint; pass --ckpt"))?;
            let hash = checkpoint::dir_hash(&ckpt)?;
            if hash != man.checkpoint_hash {
                return Err(Failure::Runtime(format!(
                    "checkpoint {} does not match the manifest (hash {hash}, expected {})",
                    ckpt.display(),
                    man.checkpoint_hash
                )));
            }
            generate(&cfg, &pair, &ckpt, out, lora_cache.as_deref())
        }
        cmd => {
            let cfg = resolve_config(&cli.global)?;
            match cmd {
                Command::GenData { out, count, mixed } => gen_data(&cfg, out, *count, *mixed),
                Command::Train { data, out, resume } => train(&cfg, data, out, resume.as_deref()),
                Command::TrainLora { pair, ckpt, out } => train_lora(&cfg, pair, ckpt, out),
                Command::FinetuneBmp { data, ckpt, out, heldout } => finetune_bmp(&cfg, data, ckpt, out, heldout.as_deref()),
                Command::Generate { pair, ckpt, out, lora_cache, .. } => {
                    let pair = pair.as_ref().ok_or_else(|| usage("generate needs --pair (or --manifest)"))?;
                    let ckpt = ckpt.as_ref().ok_or_else(|| usage("generate needs --ckpt (or --manifest)"))?;
                    generate(&cfg, pair, ckpt, out, lora_cache.as_deref())
                }
                Command::Evaluate { frames, pair, out } => evaluate(&cfg, frames, pair, out.as_deref()),
            }
        }
    }
}

fn require_dir(p: &Path, what: &str) -> Result<(), Failure> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} is not a directory", p.display())))
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path, count: Option<usize>, mixed: bool) -> Result<(), Failure> {
    let spec = SynthSpec {
        frames: cfg.data.frames,
        size: cfg.data.size,
        seed: cfg.seed,
        ..SynthSpec::new(cfg.task)
    };
    let count = count.unwrap_or(cfg.data.count);
    let samples = if mixed { gen_mixed(&spec, count)? } else { gen_synthetic(&spec, count)? };
    data::write_dataset(out, &samples)?;
    for s in &samples {
        data::write_pair(out, s)?;
    }
    write_config(out, cfg)?;
    println!("wrote {} videos to {}", samples.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    require_dir(data_dir, "dataset")?;
    if let Some(r) = resume {
        require_dir(r, "checkpoint")?;
    }
    let samples = data::load_dataset(data_dir)?;
    let outcome = pipeline::train_model(&samples, cfg, Some(out), resume)?;
    write_config(out, cfg)?;
    write_json(
        &out.join("train_log.json"),
        &serde_json::json!({
            "initial_eval": outcome.initial_eval,
            "final_eval": outcome.final_eval,
            "steps": outcome.trainer.step,
            "log": outcome.trainer.log,
        }),
    )?;
    println!(
        "trained {} steps: eval loss {:.5} -> {:.5}; checkpoint in {}",
        outcome.trainer.step,
        outcome.initial_eval,
        outcome.final_eval,
        out.display()
    );
    Ok(())
}

fn load_trained(ckpt: &Path) -> Result<crate::backbone::Denoiser, Failure> {
    require_dir(ckpt, "checkpoint")?;
    let man = checkpoint::read_manifest(ckpt)?;
    let steps = man.extra.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
    if steps == 0 {
        return Err(Failure::Runtime(format!("checkpoint {} is untrained", ckpt.display())));
    }
    Ok(checkpoint::load_denoiser(ckpt)?)
}

fn train_lora(cfg: &RunConfig, pair: &Path, ckpt: &Path, out: &Path) -> Result<(), Failure> {
    require_dir(pair, "pair")?;
    let sample = data::load_pair(pair)?;
    let model = load_trained(ckpt)?;
    let codec = codec_for(cfg)?;
    let hash = checkpoint::dir_hash(ckpt)?;
    let (_, _, records) = ensure_adapters(&sample, &model, &codec, cfg, &hash, out)?;
    for r in &records {
        println!(
            "{} adapter {} ({})",
            r.endpoint,
            r.path.display(),
            if r.reused { "cached" } else { "trained" }
        );
    }
    Ok(())
}

fn finetune_bmp(cfg: &RunConfig, data_dir: &Path, ckpt: &Path, out: &Path, heldout: Option<&Path>) -> Result<(), Failure> {
    require_dir(data_dir, "dataset")?;
    let mut model = load_trained(ckpt)?;
    let steps = checkpoint::read_manifest(ckpt)?.extra.get("step").cloned().unwrap_or_default();
    let train = data::load_dataset(data_dir)?;
    let held = match heldout {
        Some(h) => {
            require_dir(h, "held-out dataset")?;
            data::load_dataset(h)?
        }
        None => Vec::new(),
    };
    let report = pipeline::finetune_bmp_model(&mut model, &train, &held, cfg)?;
    checkpoint::save_denoiser(out, &model, serde_json::json!({ "step": steps, "bmp": report }))?;
    write_config(out, cfg)?;
    if held.is_empty() {
        println!("fine-tuned {} steps; checkpoint in {}", cfg.bmp.steps, out.display());
    } else {
        println!(
            "fine-tuned {} steps: held-out backward loss {:.5} -> {:.5}; checkpoint in {}",
            cfg.bmp.steps,
            report.initial_heldout,
            report.final_heldout,
            out.display()
        );
    }
    Ok(())
}

fn generate(cfg: &RunConfig, pair: &Path, ckpt: &Path, out: &Path, lora_cache: Option<&Path>) -> Result<(), Failure> {
    require_dir(pair, "pair")?;
    let sample = data::load_pair(pair)?;
    let model = load_trained(ckpt)?;
    let hash = checkpoint::dir_hash(ckpt)?;
    let codec = codec_for(cfg)?;
    let cache = lora_cache.map(Path::to_path_buf).unwrap_or_else(|| out.join("lora_cache"));
    let (adapters, records) = if cfg.lora.enabled {
        let (a1, an, records) = ensure_adapters(&sample, &model, &codec, cfg, &hash, &cache)?;
        (Some((a1, an)), records)
    } else {
        (None, Vec::new())
    };
    let result = generate_transition(&sample, &model, adapters.as_ref().map(|(a, b)| (a, b)), &codec, cfg)?;
    let frames_dir = out.join("frames");
    let gif = out.join("transition.gif");
    data::write_video(&result.frames, &frames_dir, VideoFormat::PngDir, 100)?;
    data::write_video(&result.frames, &gif, VideoFormat::Gif, 100)?;
    write_config(out, cfg)?;
    let manifest = RunManifest {
        format: RunManifest::FORMAT.into(),
        version: 1,
        sample_id: sample.id.clone(),
        pair: Some(absolute(pair)),
        checkpoint: Some(absolute(ckpt)),
        checkpoint_hash: hash,
        seed: cfg.seed,
        toggles: Toggles::from_config(cfg),
        config: cfg.clone(),
        adapters: records,
        frames_dir,
        gif,
        frame_hashes: frame_hashes(&result.frames),
    };
    manifest.write(&out.join("run_manifest.json"))?;
    println!("wrote {} frames to {}", result.frames.len(), out.display());
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// A generate output directory keeps its frames under `frames/`.
fn frames_in(dir: &Path) -> PathBuf {
    let nested = dir.join("frames");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn evaluate(cfg: &RunConfig, frames: &Path, pair: &Path, out: Option<&Path>) -> Result<(), Failure> {
    require_dir(frames, "frames")?;
    require_dir(pair, "pair")?;
    let jobs: Vec<(PathBuf, PathBuf)> = if pair.join("first.png").exists() {
        vec![(frames_in(frames), pair.to_path_buf())]
    } else {
        let mut v = Vec::new();
        for p in data::load_pairs(pair)? {
            let dir = frames.join(&p.id);
            if !dir.is_dir() {
                return Err(usage(format!("no frames for pair `{}` under {}", p.id, frames.display())));
            }
            v.push((frames_in(&dir), pair.join(&p.id)));
        }
        v
    };
    if jobs.is_empty() {
        return Err(usage(format!("no pairs under {}", pair.display())));
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| frames.to_path_buf());
    fs::create_dir_all(&out)?;
    let mut reports: Vec<MetricsReport> = Vec::new();
    for (fdir, pdir) in &jobs {
        let sample = data::load_pair(pdir)?;
        let video = data::read_video(fdir)?;
        let (h, w, _) = video[0].dim();
        let (dist, emb) = default_providers((h, w))?;
        let r = evaluate_transition(&sample.id, &video, &sample.first_frame, &sample.last_frame, &dist, &emb, cfg.metrics.tau)?;
        write_json(&out.join(format!("{}.metrics.json", sample.id)), &r)?;
        println!(
            "{}: smoothness {:.4} ppl {:.4} tcr {:.4} tc_score {:.4} fid {:.4}",
            r.id, r.smoothness, r.ppl, r.tcr, r.tc_score, r.fid
        );
        reports.push(r);
    }
    write_json(&out.join("aggregate.json"), &aggregate(&reports))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_arguments_is_a_usage_error() {
        assert_eq!(dispatch(["vtg"]), EXIT_USAGE);
    }

    #[test]
    fn help_and_version_succeed() {
        assert_eq!(dispatch(["vtg", "--help"]), 0);
        assert_eq!(dispatch(["vtg", "generate", "--help"]), 0);
        assert_eq!(dispatch(["vtg", "--version"]), 0);
    }

    #[test]
    fn unknown_flag_and_missing_argument_are_usage_errors() {
        assert_eq!(dispatch(["vtg", "gen-data", "--bogus", "x"]), EXIT_USAGE);
        assert_eq!(dispatch(["vtg", "train", "--data", "d"]), EXIT_USAGE);
        assert_eq!(dispatch(["vtg", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        let out = out.to_str().unwrap();
        assert_eq!(dispatch(["vtg", "gen-data", "--out", out, "--set", "bmp.nope=1"]), EXIT_USAGE);
        assert_eq!(dispatch(["vtg", "gen-data", "--out", out, "--set", "init.rho=7"]), EXIT_USAGE);
        assert!(!dir.path().join("d").exists());
    }

    #[test]
    fn seed_flag_beats_overrides() {
        let g = GlobalArgs {
            config: None,
            set: vec!["seed=5".into()],
            seed: Some(9),
        };
        assert_eq!(resolve_config(&g).unwrap().seed, 9);
        let g = GlobalArgs { seed: None, ..g };
        assert_eq!(resolve_config(&g).unwrap().seed, 5);
    }

    #[test]
    fn missing_inputs_fail_with_usage_code() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().to_str().unwrap();
        let missing = dir.path().join("missing");
        let missing = missing.to_str().unwrap();
        assert_eq!(dispatch(["vtg", "generate", "--pair", missing, "--ckpt", p, "--out", p]), EXIT_USAGE);
        assert_eq!(dispatch(["vtg", "generate", "--out", p]), EXIT_USAGE);
    }
}
