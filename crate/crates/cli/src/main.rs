use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use hivae_core::checkpoint::{file_hash, Checkpoint};
use hivae_core::config::RunConfig;
use hivae_core::dataio::{fixtures, read_image_dir, synth_video, write_video, SpriteSpec, FIXTURE_NAMES};
use hivae_core::decoder::DecodeMode;
use hivae_core::evalkit::{compression_rate, flops_and_memory, preset_rate, DitConfig};
use hivae_core::generator::gen_train;
use hivae_core::model::ReconstructOptions;
use hivae_core::pipeline::{self, Metrics, FIXTURE_CLASSES};
use hivae_core::plot::{Plot, Series, PALETTE};
use hivae_core::training::{
    prepare_latents, train_one_stage, train_stage0, train_stage1, train_stage2, StageTag, TrainLog,
};

type F = f32;

#[derive(Parser, Debug)]
#[command(name = "hivae", version, about = "Hierarchical video autoencoder: training, reconstruction, generation, reports")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.lr=5e-4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Artifact directory; falls back to $HIVAE_CACHE, then ./hivae-cache.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Create or ingest video containers.
    #[command(subcommand)]
    Data(DataCmd),
    /// Run one training stage: 0 codec, 1 global path, 2 detailed path.
    Train(TrainArgs),
    /// Encode and decode one clip, writing the result and a metrics sidecar.
    Reconstruct(ReconstructArgs),
    /// Decode clips in all three modes (full, global_only, detailed_only).
    Ablate(AblateArgs),
    /// Train the class-conditional motion generator on motion from a trained model.
    GenTrain(GenTrainArgs),
    /// Sample motion for a class and decode it to a video.
    Generate(GenerateArgs),
    /// Rate/quality table and scatter plot over checkpoints.
    Report(ReportArgs),
    /// Analytic transformer cost at given token counts.
    Flops(FlopsArgs),
}

#[derive(Subcommand, Debug)]
enum DataCmd {
    /// Render one synthetic sprite clip.
    Synth(SynthArgs),
    /// Write the four fixture clips.
    Fixtures {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Pack a directory of PNG frames into a container.
    Ingest {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8.0)]
        fps: f64,
    },
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 8.0)]
    fps: f64,
    /// Background drift `dx,dy` in px/frame.
    #[arg(long, value_parser = parse_pair, default_value = "0,0")]
    drift: [f64; 2],
    #[arg(long, default_value_t = 3)]
    sprites: usize,
    /// Sprite oscillation frequencies in cycles/frame.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0])]
    osc_freq: Vec<f64>,
    /// Sprite oscillation amplitudes in px.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0])]
    osc_amp: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
    stage: u8,
    /// Checkpoint of the previous stage (default: the cache's stage checkpoint).
    #[arg(long)]
    from: Option<PathBuf>,
    /// Output checkpoint (default: <cache>/stage<N>.hvae, or one_stage.hvae with --joint).
    #[arg(long)]
    out: Option<PathBuf>,
    /// With --stage 1: train both encoders and the decoder jointly for stage1+stage2 steps.
    #[arg(long)]
    joint: bool,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// Guidance weight; 1 uses the conditional branch only.
    #[arg(long, default_value_t = 1.0)]
    cfg_weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Container path, PNG directory, or `fixture:<name>`.
    #[arg(long)]
    input: String,
    #[arg(long, default_value = "full")]
    mode: DecodeMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Inputs as for `reconstruct`; defaults to all fixtures.
    #[arg(long)]
    input: Vec<String>,
    /// JSON output (default: <cache>/ablate.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenTrainArgs {
    /// Trained autoencoder checkpoint (stage 2).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Generator checkpoint (default: <cache>/gen.hvae).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Autoencoder checkpoint (default: <cache>/stage2.hvae).
    #[arg(long)]
    hivae: Option<PathBuf>,
    #[arg(long)]
    class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Guidance weight (default: gen.cfg_weight).
    #[arg(long)]
    cfg_weight: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    steps: usize,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    /// Token counts to compare.
    #[arg(long, value_delimiter = ',', default_values_t = [4608u64, 65536])]
    tokens: Vec<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

struct Ctx {
    config: Option<PathBuf>,
    overrides: Vec<String>,
    cache: PathBuf,
}

impl Ctx {
    fn base_config(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        Ok(cfg.with_overrides(&self.overrides)?)
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.cache).with_context(|| format!("creating {}", self.cache.display()))?;
        Ok(self.cache.join(name))
    }
}

fn run(cli: Cli) -> Result<()> {
    let cache = cli
        .cache
        .or_else(|| std::env::var_os("HIVAE_CACHE").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("hivae-cache"));
    let ctx = Ctx { config: cli.config, overrides: cli.overrides, cache };
    match cli.cmd {
        Cmd::Data(d) => cmd_data(d),
        Cmd::Train(a) => cmd_train(&ctx, a),
        Cmd::Reconstruct(a) => cmd_reconstruct(a),
        Cmd::Ablate(a) => cmd_ablate(&ctx, a),
        Cmd::GenTrain(a) => cmd_gen_train(&ctx, a),
        Cmd::Generate(a) => cmd_generate(&ctx, a),
        Cmd::Report(a) => cmd_report(&ctx, a),
        Cmd::Flops(a) => cmd_flops(a),
    }
}

fn cmd_data(cmd: DataCmd) -> Result<()> {
    match cmd {
        DataCmd::Synth(a) => {
            let spec = SpriteSpec {
                frames: a.frames,
                height: a.height,
                width: a.width,
                fps: a.fps,
                drift: a.drift,
                sprite_count: a.sprites,
                osc_freq: a.osc_freq,
                osc_amp: a.osc_amp,
                seed: a.seed,
                ..Default::default()
            };
            let v = synth_video::<F>(&spec)?;
            write_video(&a.out, &v, json!({ "spec": spec }))?;
            println!("wrote {} {:?}", a.out.display(), v.shape());
        }
        DataCmd::Fixtures { out_dir } => {
            std::fs::create_dir_all(&out_dir)?;
            for (name, v) in FIXTURE_NAMES.iter().zip(fixtures::<F>()?) {
                let p = out_dir.join(format!("{name}.hvae"));
                write_video(&p, &v, json!({ "fixture": name }))?;
                println!("wrote {}", p.display());
            }
        }
        DataCmd::Ingest { dir, out, fps } => {
            let v = read_image_dir::<F>(&dir, fps)?;
            write_video(&out, &v, json!({ "source": dir.display().to_string() }))?;
            println!("wrote {} {:?}", out.display(), v.shape());
        }
    }
    Ok(())
}

fn load_stage_checkpoint(path: &Path, stage: u8) -> Result<Checkpoint<F>> {
    if !path.exists() {
        bail!(
            "stage {stage} needs the stage-{} checkpoint {}; run `hivae train --stage {}` first or pass --from",
            stage - 1,
            path.display(),
            stage - 1
        );
    }
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    if a.joint && a.stage != 1 {
        bail!("--joint applies to --stage 1 only");
    }
    let (model, mut state, cfg) = if a.stage == 0 {
        let mut cfg = ctx.base_config()?;
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        let (model, state) = pipeline::build::<F>(&cfg)?;
        (model, state, cfg)
    } else {
        let from = match a.from {
            Some(p) => p,
            None => ctx.path(&format!("stage{}.hvae", a.stage - 1))?,
        };
        let ck = load_stage_checkpoint(&from, a.stage)?;
        let base = ck.config.clone();
        let cfg = base.with_overrides(&ctx.overrides)?;
        if cfg.model != base.model {
            bail!("model settings cannot change after stage 0; only train.* and gen.* overrides apply");
        }
        let (model, state, _) = pipeline::restore(Checkpoint { config: cfg.clone(), ..ck })?;
        (model, state, cfg)
    };
    let data = pipeline::training_data::<F>(&cfg)?;
    let before = state.log.rows.len();
    let tag = match a.stage {
        0 => {
            let hist = train_stage0(&model, &mut state, &data, &cfg.train)?;
            println!("stage 0: codec loss {:.3e} -> {:.3e}", hist.first().unwrap_or(&0.0), hist.last().unwrap_or(&0.0));
            StageTag::Stage0Codec
        }
        1 | 2 => {
            let lat = prepare_latents(&model, &state.store, &data)?;
            if a.stage == 1 && a.joint {
                train_one_stage(&model, &mut state, &lat, &cfg.train)?;
                StageTag::OneStage
            } else if a.stage == 1 {
                train_stage1(&model, &mut state, &lat, &cfg.train)?;
                StageTag::Stage1Global
            } else {
                train_stage2(&model, &mut state, &lat, &cfg.train)?;
                StageTag::Stage2Full
            }
        }
        _ => unreachable!("clap restricts the stage"),
    };
    let out = match a.out {
        Some(p) => p,
        None if a.joint => ctx.path("one_stage.hvae")?,
        None => ctx.path(&format!("stage{}.hvae", a.stage))?,
    };
    Checkpoint::from_state(&cfg, &state).save(&out)?;
    let rows = &state.log.rows[before..];
    if !rows.is_empty() {
        let csv = out.with_extension("csv");
        let _ = std::fs::remove_file(&csv);
        state.log.append_csv(&csv, rows)?;
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.step as f64, r.total)).collect();
        let mut plot = Plot::new(640, 400).push(Series::Line { points: pts, color: PALETTE[0] });
        plot.log_y = rows.iter().all(|r| r.total > 0.0);
        plot.save_png(out.with_extension("png"))?;
        let log = TrainLog { rows: rows.to_vec() };
        println!(
            "{tag}: {} steps, loss {:.4} -> {:.4} (mean of first/last 50)",
            rows.len(),
            log.initial(tag, 50).unwrap_or(f64::NAN),
            log.smoothed(tag, 50).unwrap_or(f64::NAN)
        );
    }
    println!("checkpoint {} sha256 {}", out.display(), file_hash(&out)?);
    Ok(())
}

fn require_trained(stage: Option<StageTag>) -> Result<()> {
    pipeline::require_stage(
        stage,
        &[StageTag::Stage0Codec, StageTag::Stage1Global, StageTag::Stage2Full, StageTag::OneStage],
        "decoding",
    )?;
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    let x = pipeline::load_video::<F>(&a.input, None).with_context(|| format!("reading input {}", a.input))?;
    let (model, state, cfg) = pipeline::load::<F>(&a.decode.checkpoint)
        .with_context(|| format!("loading {}", a.decode.checkpoint.display()))?;
    require_trained(state.stage)?;
    let opts = ReconstructOptions { mode: a.mode, steps: a.decode.steps, guidance: a.decode.cfg_weight };
    let (y, m) = pipeline::reconstruct_scored(&model, &state.store, &cfg, &x, &opts, a.decode.seed)?;
    write_video(&a.out, &y, json!({ "mode": a.mode, "steps": a.decode.steps }))?;
    let sidecar = a.out.with_extension("json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(&m)?)?;
    println!("{}", serde_json::to_string(&json!({ "mode": a.mode, "metrics": m }))?);
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, a: AblateArgs) -> Result<()> {
    let (model, state, cfg) = pipeline::load::<F>(&a.decode.checkpoint)
        .with_context(|| format!("loading {}", a.decode.checkpoint.display()))?;
    require_trained(state.stage)?;
    let inputs: Vec<String> =
        if a.input.is_empty() { FIXTURE_NAMES.iter().map(|n| format!("fixture:{n}")).collect() } else { a.input };
    let mut rows = Vec::new();
    for spec in &inputs {
        let x = pipeline::load_video::<F>(spec, None)?;
        for mode in DecodeMode::ALL {
            let opts = ReconstructOptions { mode, steps: a.decode.steps, guidance: a.decode.cfg_weight };
            let (_, m) = pipeline::reconstruct_scored(&model, &state.store, &cfg, &x, &opts, a.decode.seed)?;
            println!("{spec:<24} {mode:<14} psnr {:7.3} ssim {:.4} spectral {:.5}", m.psnr, m.ssim, m.spectral_ratio);
            rows.push(json!({ "input": spec, "mode": mode, "metrics": m }));
        }
    }
    let out = match a.out {
        Some(p) => p,
        None => ctx.path("ablate.json")?,
    };
    std::fs::write(&out, serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}

fn cmd_gen_train(ctx: &Ctx, a: GenTrainArgs) -> Result<()> {
    let src = match a.checkpoint {
        Some(p) => p,
        None => ctx.path("stage2.hvae")?,
    };
    if !src.exists() {
        bail!("gen-train needs a trained autoencoder checkpoint {}; run `hivae train --stage 2` first", src.display());
    }
    let (model, state, base) = pipeline::load::<F>(&src)?;
    pipeline::require_stage(state.stage, &[StageTag::Stage2Full, StageTag::OneStage], "gen-train")?;
    let cfg = base.with_overrides(&ctx.overrides)?;
    if !cfg.data.inputs.is_empty() {
        bail!("gen-train uses the labelled fixture set; data.inputs must be empty");
    }
    let data = fixtures::<F>()?;
    let motion = pipeline::extract_motion(&model, &state.store, &data)?;
    let mut bundle = pipeline::build_generator::<F>(&cfg)?;
    bundle.packer.fit(&motion)?;
    let packed = bundle.packer.pack(&motion)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.gen.seed);
    let losses = gen_train(&bundle.generator, &mut bundle.store, &packed.m, &FIXTURE_CLASSES, &mut rng)?;
    let out = match a.out {
        Some(p) => p,
        None => ctx.path("gen.hvae")?,
    };
    pipeline::save_generator(&out, &cfg, &bundle, &losses)?;
    let k = losses.len().min(50).max(1);
    let head = losses.iter().take(k).sum::<f64>() / k as f64;
    let tail = losses.iter().rev().take(k).sum::<f64>() / k as f64;
    println!("generator: {} steps, loss {head:.4} -> {tail:.4}", losses.len());
    println!("checkpoint {} sha256 {}", out.display(), file_hash(&out)?);
    Ok(())
}

fn cmd_generate(ctx: &Ctx, a: GenerateArgs) -> Result<()> {
    let gen_path = match a.checkpoint {
        Some(p) => p,
        None => ctx.path("gen.hvae")?,
    };
    let ae_path = match a.hivae {
        Some(p) => p,
        None => ctx.path("stage2.hvae")?,
    };
    let (bundle, gcfg) = pipeline::load_generator::<F>(&gen_path).with_context(|| format!("loading {}", gen_path.display()))?;
    let (model, state, _) = pipeline::load::<F>(&ae_path).with_context(|| format!("loading {}", ae_path.display()))?;
    if a.class >= gcfg.gen.num_classes {
        bail!("class {} out of range 0..{}", a.class, gcfg.gen.num_classes);
    }
    let idx = FIXTURE_CLASSES.iter().position(|c| *c == a.class).expect("every class has a fixture");
    let content = fixtures::<F>()?.swap_remove(idx);
    let w = a.cfg_weight.unwrap_or(gcfg.gen.cfg_weight);
    let (video, _) = pipeline::generate_video(&model, &state.store, &bundle, a.class, &content, w, a.seed)?;
    write_video(&a.out, &video, json!({ "class": a.class, "seed": a.seed, "content": FIXTURE_NAMES[idx] }))?;
    println!("wrote {} {:?}", a.out.display(), video.shape());
    Ok(())
}

/// CSV columns of `report`.
const REPORT_COLUMNS: [&str; 7] =
    ["checkpoint", "latent_size", "motion_elements", "rate_percent", "desk_rate_percent", "psnr", "ssim"];

fn cmd_report(ctx: &Ctx, a: ReportArgs) -> Result<()> {
    if a.checkpoints.is_empty() {
        bail!("report needs at least one checkpoint");
    }
    let mut csv = REPORT_COLUMNS.join(",") + "\n";
    let mut md = format!("| {} |\n|{}\n", REPORT_COLUMNS.join(" | "), "---|".repeat(REPORT_COLUMNS.len()));
    let mut pts = Vec::new();
    for p in &a.checkpoints {
        let (model, state, cfg) = pipeline::load::<F>(p).with_context(|| format!("loading {}", p.display()))?;
        require_trained(state.stage)?;
        let data = pipeline::training_data::<F>(&cfg)?;
        let scores = pipeline::score_set(&model, &state.store, &cfg, &data, DecodeMode::Full, a.steps, 1.0, 0)?;
        let Metrics { psnr, ssim, .. } = pipeline::mean_metrics(&scores);
        let elems = cfg.model.motion_elements() as u64;
        let [c, f, h, w] = [cfg.model.codec.pixel_channels, cfg.model.frames, cfg.model.height, cfg.model.width].map(|v| v as u64);
        let desk = compression_rate(elems, c, f, h, w)?.rate_percent;
        let (label, rate) = match cfg.latent_size {
            Some(s) => (s.label().to_string(), preset_rate(s)?.rate_percent),
            None => ("custom".to_string(), "-".to_string()),
        };
        let name = p.display().to_string();
        let cells = [name, label, elems.to_string(), rate, desk.clone(), format!("{psnr:.3}"), format!("{ssim:.4}")];
        csv += &(cells.join(",") + "\n");
        md += &format!("| {} |\n", cells.join(" | "));
        pts.push((desk.parse::<f64>().unwrap_or(f64::NAN), psnr));
    }
    let dir = match a.out_dir {
        Some(d) => {
            std::fs::create_dir_all(&d)?;
            d
        }
        None => ctx.path("")?,
    };
    std::fs::write(dir.join("report.csv"), &csv)?;
    std::fs::write(dir.join("report.md"), &md)?;
    let plot = Plot::new(480, 360).push(Series::Scatter { points: pts, color: PALETTE[1], radius: 4 });
    plot.save_png(dir.join("report.png"))?;
    print!("{md}");
    Ok(())
}

fn cmd_flops(a: FlopsArgs) -> Result<()> {
    let cfg = DitConfig::default();
    println!("tokens,flops,params,activations,memory_elements");
    for t in a.tokens {
        let r = flops_and_memory(t, &cfg);
        println!("{},{},{},{},{}", r.tokens, r.flops, r.params, r.activations, r.memory_elements());
    }
    Ok(())
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    <[f64; 2]>::try_from(v).map_err(|_| format!("expected two comma-separated numbers, got `{s}`"))
}
