//! Command-line driver for the motion pipeline: synthetic corpus generation,
//! VAE and denoiser training, guided sampling with attention export, and
//! zero-shot attention-modulated editing.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 3 numeric failure.

mod plot;

use clap::{Parser, Subcommand};
use ndarray::Array2;
use skeldiff::checkpoint::{load_checkpoint, save_checkpoint};
use skeldiff::denoiser::{
    generate, AttentionRecord, Denoiser, DenoiserConfig, DenoiserTrainConfig,
};
use skeldiff::dump::{read_attention_archive, write_attention_archive};
use skeldiff::editing::{edit_generate, EditSpec};
use skeldiff::motion::{
    read_caption_sidecar, read_motion_file, write_caption_sidecar, write_motion_file,
    MotionSequence,
};
use skeldiff::schedule::{GuidanceConfig, NoiseSchedule};
use skeldiff::skeleton::{counterpart_map, default_skeleton};
use skeldiff::text::{StubEncoder, TextEncoder};
use skeldiff::vae::{train_vae, Vae, VaeConfig, VaeTrainConfig};
use skeldiff::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "skeldiff",
    version,
    about = "Skeleton-aware latent diffusion for text-to-motion generation and editing"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a deterministic synthetic caption-paired corpus.
    Corpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of clips to generate (at least 1).
        #[arg(long)]
        clips: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the motion VAE on a corpus directory.
    TrainVae {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Training window length in frames (multiple of 4).
        #[arg(long, default_value_t = 48)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        latent_dim: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 2000)]
        warmup: usize,
    },
    /// Train the text-conditioned denoiser against a frozen VAE checkpoint.
    TrainDenoiser {
        #[arg(long)]
        corpus: PathBuf,
        /// VAE checkpoint providing the latent space.
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 48)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 512)]
        ffn: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 2000)]
        warmup: usize,
        /// Probability of dropping the text condition during training.
        #[arg(long, default_value_t = 0.1)]
        p_uncond: f64,
    },
    /// Sample a motion from a text prompt.
    Generate {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        text: String,
        /// Frame count (multiple of 4).
        #[arg(long, default_value_t = 48)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Classifier-free guidance weight.
        #[arg(long, default_value_t = 7.5)]
        cfg_weight: f64,
        /// Number of DDIM sampling steps.
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the captured cross-attention maps as an archive.
        #[arg(long)]
        dump_attn: bool,
        /// Also write per-word joint-by-frame heatmaps averaged over heads,
        /// layers, and timesteps.
        #[arg(long)]
        plot: bool,
    },
    /// Run the dual-trajectory editing controller.
    Edit {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        source_text: String,
        #[arg(long)]
        target_text: String,
        /// TOML edit-spec file.
        #[arg(long)]
        edit: PathBuf,
        #[arg(long, default_value_t = 48)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 7.5)]
        cfg_weight: f64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a motion file or attention archive; --csv exports the
    /// contents in long form.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        let code = if matches!(e, Error::Numeric(_)) { 3 } else { 2 };
        std::process::exit(code);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Corpus { seed, clips, out } => cmd_corpus(seed, clips, &out),
        Cmd::TrainVae {
            corpus,
            out,
            steps,
            batch,
            window,
            seed,
            latent_dim,
            blocks,
            lr,
            warmup,
        } => cmd_train_vae(&corpus, &out, steps, batch, window, seed, latent_dim, blocks, lr, warmup),
        Cmd::TrainDenoiser {
            corpus,
            vae,
            out,
            steps,
            batch,
            window,
            seed,
            layers,
            heads,
            width,
            ffn,
            lr,
            warmup,
            p_uncond,
        } => cmd_train_denoiser(
            &corpus, &vae, &out, steps, batch, window, seed, layers, heads, width, ffn, lr,
            warmup, p_uncond,
        ),
        Cmd::Generate {
            vae,
            denoiser,
            text,
            frames,
            seed,
            cfg_weight,
            steps,
            out,
            dump_attn,
            plot,
        } => cmd_generate(
            &vae, &denoiser, &text, frames, seed, cfg_weight, steps, &out, dump_attn, plot,
        ),
        Cmd::Edit {
            vae,
            denoiser,
            source_text,
            target_text,
            edit,
            frames,
            seed,
            cfg_weight,
            steps,
            out,
        } => cmd_edit(
            &vae,
            &denoiser,
            &source_text,
            &target_text,
            &edit,
            frames,
            seed,
            cfg_weight,
            steps,
            &out,
        ),
        Cmd::Inspect { path, csv } => cmd_inspect(&path, csv.as_deref()),
    }
}

/// Every command echoes its resolved configuration into the output directory
/// so a run can be reproduced from its artifacts alone.
fn write_config_echo(dir: &Path, config: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("config echo: {e}")))?;
    fs::write(dir.join("config.json"), text + "\n")?;
    Ok(())
}

fn cmd_corpus(seed: u64, clips: usize, out: &Path) -> Result<()> {
    if clips == 0 {
        return Err(Error::Config("--clips must be at least 1".into()));
    }
    fs::create_dir_all(out)?;
    let (topology, _) = default_skeleton();
    let corpus = skeldiff::motion::generate_synthetic_corpus(seed, clips, &topology, true);
    for (i, clip) in corpus.iter().enumerate() {
        write_motion_file(&out.join(format!("clip_{i:03}.salm")), &clip.motion)?;
    }
    write_caption_sidecar(&out.join("captions.txt"), &corpus)?;
    write_config_echo(
        out,
        &serde_json::json!({"command": "corpus", "seed": seed, "clips": clips}),
    )?;
    println!("wrote {} clips to {}", corpus.len(), out.display());
    Ok(())
}

/// Loads every `.salm` file in `dir` in name order, plus the caption sidecar
/// if present (empty vector otherwise).
fn load_corpus(dir: &Path) -> Result<(Vec<MotionSequence>, Vec<String>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "salm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .salm files in {}", dir.display())));
    }
    let motions = paths.iter().map(|p| read_motion_file(p)).collect::<Result<Vec<_>>>()?;
    let captions_path = dir.join("captions.txt");
    let captions =
        if captions_path.exists() { read_caption_sidecar(&captions_path)? } else { Vec::new() };
    Ok((motions, captions))
}

fn write_loss_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{header}")?;
    for row in rows {
        writeln!(w, "{row}")?;
    }
    Ok(())
}

const SKELETON_TAG: &str = "default22";

fn load_vae(path: &Path) -> Result<Vae> {
    let ck = load_checkpoint(path)?;
    if ck.meta["kind"] != "vae" {
        return Err(Error::Checkpoint(format!("{} is not a VAE checkpoint", path.display())));
    }
    if ck.meta["skeleton"] != SKELETON_TAG {
        return Err(Error::Checkpoint(format!(
            "unsupported skeleton tag {}",
            ck.meta["skeleton"]
        )));
    }
    let config: VaeConfig = serde_json::from_value(ck.meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("VAE config: {e}")))?;
    let (topology, plan) = default_skeleton();
    Ok(Vae::from_parts(topology, plan, config, ck.params))
}

fn load_denoiser(path: &Path) -> Result<Denoiser> {
    let ck = load_checkpoint(path)?;
    if ck.meta["kind"] != "denoiser" {
        return Err(Error::Checkpoint(format!(
            "{} is not a denoiser checkpoint",
            path.display()
        )));
    }
    let config: DenoiserConfig = serde_json::from_value(ck.meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("denoiser config: {e}")))?;
    Ok(Denoiser::from_parts(config, ck.params))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_vae(
    corpus_dir: &Path,
    out: &Path,
    steps: usize,
    batch: usize,
    window: usize,
    seed: u64,
    latent_dim: usize,
    blocks: usize,
    lr: f64,
    warmup: usize,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let (motions, _) = load_corpus(corpus_dir)?;
    let (topology, plan) = default_skeleton();
    let cfg = VaeTrainConfig {
        model: VaeConfig {
            latent_dim,
            blocks_per_stage: blocks,
            seed,
            ..VaeConfig::default()
        },
        steps,
        batch_size: batch,
        window,
        lr: skeldiff::nn::LrSchedule {
            base_lr: lr,
            warmup_steps: warmup,
            ..skeldiff::nn::LrSchedule::default()
        },
        seed,
        ..VaeTrainConfig::default()
    };
    let (vae, losses) = train_vae(&motions, topology, plan, &cfg, |step, b| {
        if step % 100 == 0 {
            eprintln!("step {step}: total {:.6}", b.total);
        }
    })?;
    write_loss_csv(
        &out.join("loss.csv"),
        "step,l_m,l_pos,l_vel,l_kl,total",
        losses.iter().enumerate().map(|(i, b)| {
            format!("{},{},{},{},{},{}", i, b.l_m, b.l_pos, b.l_vel, b.l_kl, b.total)
        }),
    )?;
    let meta = serde_json::json!({
        "kind": "vae",
        "skeleton": SKELETON_TAG,
        "config": vae.config,
        "train": cfg,
    });
    save_checkpoint(&out.join("vae.ckpt"), &meta, &vae.params)?;
    write_config_echo(
        out,
        &serde_json::json!({"command": "train-vae", "corpus": corpus_dir, "train": cfg}),
    )?;
    println!("wrote {}", out.join("vae.ckpt").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_denoiser(
    corpus_dir: &Path,
    vae_path: &Path,
    out: &Path,
    steps: usize,
    batch: usize,
    window: usize,
    seed: u64,
    layers: usize,
    heads: usize,
    width: usize,
    ffn: usize,
    lr: f64,
    warmup: usize,
    p_uncond: f64,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let vae = load_vae(vae_path)?;
    let (motions, captions) = load_corpus(corpus_dir)?;
    if captions.len() != motions.len() {
        return Err(Error::Config(format!(
            "{} clips but {} captions in {}",
            motions.len(),
            captions.len(),
            corpus_dir.display()
        )));
    }
    let encoder = StubEncoder::default();
    let clips = motions
        .into_iter()
        .zip(&captions)
        .map(|(m, c)| Ok((m, encoder.encode(c)?)))
        .collect::<Result<Vec<_>>>()?;
    let null_text = encoder.encode("")?;
    let schedule = NoiseSchedule::default_schedule();
    let cfg = DenoiserTrainConfig {
        model: DenoiserConfig {
            layers,
            heads,
            width,
            ffn_hidden: ffn,
            latent_dim: vae.config.latent_dim,
            text_dim: encoder.dim(),
            seed,
        },
        steps,
        batch_size: batch,
        window,
        lr: skeldiff::nn::LrSchedule {
            base_lr: lr,
            warmup_steps: warmup,
            ..skeldiff::nn::LrSchedule::default()
        },
        guidance: GuidanceConfig { p_uncond, ..GuidanceConfig::default() },
        seed,
        ..DenoiserTrainConfig::default()
    };
    let (denoiser, losses) =
        skeldiff::denoiser::train_denoiser(&clips, &vae, &null_text, &schedule, &cfg, |step, l| {
            if step % 100 == 0 {
                eprintln!("step {step}: v-mse {l:.6}");
            }
        })?;
    write_loss_csv(
        &out.join("loss.csv"),
        "step,v_mse",
        losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")),
    )?;
    let meta = serde_json::json!({
        "kind": "denoiser",
        "config": denoiser.config,
        "vae": vae_path,
        "train": cfg,
    });
    save_checkpoint(&out.join("denoiser.ckpt"), &meta, &denoiser.params)?;
    write_config_echo(
        out,
        &serde_json::json!({"command": "train-denoiser", "corpus": corpus_dir, "train": cfg}),
    )?;
    println!("wrote {}", out.join("denoiser.ckpt").display());
    Ok(())
}

/// Averages a record over steps, layers, and heads into one joints-by-frames
/// panel per token.
fn token_panels(record: &AttentionRecord) -> Vec<Array2<f64>> {
    let Some(first) = record.steps.first().and_then(|s| s.layers.first()) else {
        return Vec::new();
    };
    let (j, n, k) = (first.shape()[1], first.shape()[2], first.shape()[3]);
    let mut panels = vec![Array2::<f64>::zeros((j, n)); k];
    let mut count = 0usize;
    for step in &record.steps {
        for map in &step.layers {
            let heads = map.shape()[0];
            count += heads;
            for h in 0..heads {
                for (q, panel) in panels.iter_mut().enumerate() {
                    for a in 0..j {
                        for b in 0..n {
                            panel[[a, b]] += map[[h, a, b, q]];
                        }
                    }
                }
            }
        }
    }
    if count > 0 {
        for panel in &mut panels {
            panel.mapv_inplace(|v| v / count as f64);
        }
    }
    panels
}

fn sanitize(word: &str) -> String {
    word.chars().filter(|c| c.is_ascii_alphanumeric()).collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    vae_path: &Path,
    denoiser_path: &Path,
    text: &str,
    frames: usize,
    seed: u64,
    cfg_weight: f64,
    steps: usize,
    out: &Path,
    dump_attn: bool,
    plot: bool,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let vae = load_vae(vae_path)?;
    let denoiser = load_denoiser(denoiser_path)?;
    if denoiser.config.latent_dim != vae.config.latent_dim {
        return Err(Error::Config(format!(
            "latent width mismatch: VAE {} vs denoiser {}",
            vae.config.latent_dim, denoiser.config.latent_dim
        )));
    }
    let encoder = StubEncoder::default();
    let embedding = encoder.encode(text)?;
    let null_text = encoder.encode("")?;
    let schedule = NoiseSchedule::default_schedule();
    let guidance = GuidanceConfig { w: cfg_weight, ..GuidanceConfig::default() };
    let (motion, record) = generate(
        &denoiser, &vae, &embedding, &null_text, &schedule, &guidance, frames, 20.0, steps, seed,
    )?;
    write_motion_file(&out.join("motion.salm"), &motion)?;
    if dump_attn {
        write_attention_archive(&out.join("attention.skat"), &record)?;
    }
    if plot {
        for (k, panel) in token_panels(&record).iter().enumerate() {
            let word = sanitize(&record.tokens[k]);
            plot::heatmap_png(&out.join(format!("attn_{k:02}_{word}.png")), panel, 12)?;
        }
    }
    write_config_echo(
        out,
        &serde_json::json!({
            "command": "generate", "text": text, "frames": frames, "seed": seed,
            "cfg_weight": cfg_weight, "ddim_steps": steps,
            "vae": vae_path, "denoiser": denoiser_path,
            "dump_attn": dump_attn, "plot": plot,
        }),
    )?;
    println!("wrote {} (cfg weight {cfg_weight}, {steps} steps)", out.join("motion.salm").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_edit(
    vae_path: &Path,
    denoiser_path: &Path,
    source_text: &str,
    target_text: &str,
    spec_path: &Path,
    frames: usize,
    seed: u64,
    cfg_weight: f64,
    steps: usize,
    out: &Path,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let spec = EditSpec::parse_toml(&fs::read_to_string(spec_path)?)?;
    let vae = load_vae(vae_path)?;
    let denoiser = load_denoiser(denoiser_path)?;
    let encoder = StubEncoder::default();
    let src = encoder.encode(source_text)?;
    let tgt = encoder.encode(target_text)?;
    let null_text = encoder.encode("")?;
    let (_, plan) = default_skeleton();
    let counterpart = counterpart_map(plan.atomic())?;
    let schedule = NoiseSchedule::default_schedule();
    let guidance = GuidanceConfig { w: cfg_weight, ..GuidanceConfig::default() };
    let outcome = edit_generate(
        &denoiser, &vae, &src, &tgt, &null_text, &spec, &counterpart, &schedule, &guidance,
        frames, 20.0, steps, seed,
    )?;
    write_motion_file(&out.join("source.salm"), &outcome.source)?;
    write_motion_file(&out.join("edited.salm"), &outcome.edited)?;
    write_attention_archive(&out.join("attention_source.skat"), &outcome.trace.source)?;
    write_attention_archive(&out.join("attention_modulated.skat"), &outcome.trace.modulated)?;
    write_loss_csv(
        &out.join("divergence.csv"),
        "step,t,mean_abs_latent_diff",
        outcome
            .trace
            .latent_divergence
            .iter()
            .enumerate()
            .map(|(i, d)| format!("{i},{},{d}", outcome.trace.source.steps[i].t)),
    )?;
    write_config_echo(
        out,
        &serde_json::json!({
            "command": "edit", "source_text": source_text, "target_text": target_text,
            "spec": spec, "frames": frames, "seed": seed,
            "cfg_weight": cfg_weight, "ddim_steps": steps,
            "vae": vae_path, "denoiser": denoiser_path,
        }),
    )?;
    println!("wrote source + edited motions to {}", out.display());
    Ok(())
}

fn cmd_inspect(path: &Path, csv: Option<&Path>) -> Result<()> {
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = fs::File::open(path)?;
        f.read_exact(&mut magic)?;
    }
    match &magic {
        b"SALM" => {
            let motion = read_motion_file(path)?;
            println!(
                "motion: {} frames, {} joints, {} fps",
                motion.frames(),
                motion.n_joints(),
                motion.fps
            );
            if let Some(csv_path) = csv {
                write_loss_csv(
                    csv_path,
                    "frame,joint,channel,value",
                    motion.blocks.iter().enumerate().flat_map(|(j, block)| {
                        block
                            .indexed_iter()
                            .map(move |((f, c), v)| format!("{f},{j},{c},{v}"))
                            .collect::<Vec<_>>()
                    }),
                )?;
            }
        }
        b"SKAT" => {
            let archive = read_attention_archive(path)?;
            let shape = archive
                .steps
                .first()
                .and_then(|(_, l)| l.first())
                .map(|m| format!("{:?}", m.shape()))
                .unwrap_or_else(|| "none".into());
            println!(
                "attention archive: {} steps, {} layers, map shape {}, tokens {:?}",
                archive.steps.len(),
                archive.steps.first().map_or(0, |(_, l)| l.len()),
                shape,
                archive.tokens
            );
            if let Some(csv_path) = csv {
                write_loss_csv(
                    csv_path,
                    "step,t,layer,head,joint,frame,token,value",
                    archive.steps.iter().enumerate().flat_map(|(i, (t, layers))| {
                        layers
                            .iter()
                            .enumerate()
                            .flat_map(move |(l, map)| {
                                map.indexed_iter()
                                    .map(move |(ix, v)| {
                                        format!(
                                            "{i},{t},{l},{},{},{},{},{v}",
                                            ix[0], ix[1], ix[2], ix[3]
                                        )
                                    })
                                    .collect::<Vec<_>>()
                            })
                            .collect::<Vec<_>>()
                    }),
                )?;
            }
        }
        _ => {
            return Err(Error::Config(format!(
                "{}: unrecognized file magic {:?}",
                path.display(),
                magic
            )))
        }
    }
    Ok(())
}
