use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use sparse_reid::augment::{fit_images, load_patch_library, occlude_all, read_ppm, write_ppm};
use sparse_reid::bench::{self, SWEEP_RATIOS};
use sparse_reid::checkpoint::load_model;
use sparse_reid::config::RunConfig;
use sparse_reid::data::{gen_synth, Manifest, Split, SynthSpec, OCCLUDER_EVAL_DIR, OCCLUDER_TRAIN_DIR};
use sparse_reid::eval::{evaluate, EvalReport};
use sparse_reid::par::Exec;
use sparse_reid::train::{checkpoint_path, train, Role};
use sparse_reid::visualize::visualize;

#[derive(Parser)]
#[command(name = "sparse-reid", version, about = "Token-sparsified ViT re-identification: train, evaluate, benchmark")]
struct Cli {
    /// Run every data-parallel loop on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the student, or the teacher with --teacher.
    Train(TrainArgs),
    /// Score a checkpoint on the query/gallery split.
    Eval(EvalArgs),
    /// Inference throughput across keep ratios.
    Bench(BenchArgs),
    /// Write images with discarded patches blacked out, one per stage.
    Visualize(VisualizeArgs),
    /// Render a synthetic dataset and occluder library.
    GenSynth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Train the dense teacher instead of the student.
    #[arg(long)]
    teacher: bool,
    /// key = value config file; overrides follow it.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// key=value overrides, e.g. epochs=10 keep_ratio=0.5.
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Dataset root with manifest.csv.
    #[arg(long)]
    data: PathBuf,
    /// Evaluate at this keep ratio instead of the trained one.
    #[arg(long)]
    keep_ratio: Option<f64>,
    /// Occlude queries with patches from this directory (default: the
    /// dataset's evaluation occluders).
    #[arg(long)]
    occluded: bool,
    #[arg(long)]
    occluders: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the table; print only the comma-separated row.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Sparsified checkpoint; the reference 256x128 model when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_RATIOS.to_vec())]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = bench::DEFAULT_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = bench::MIN_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Append results to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also report aggregate throughput of this many concurrent workers.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VisualizeArgs {
    checkpoint: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Input P6 images.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    identities: usize,
    #[arg(long, default_value_t = 8)]
    images_per_id: usize,
    #[arg(long, default_value_t = 16)]
    train_identities: usize,
    #[arg(long, default_value_t = 64)]
    height: u32,
    #[arg(long, default_value_t = 32)]
    width: u32,
    #[arg(long, default_value_t = 2)]
    cameras: usize,
    #[arg(long, default_value_t = 24)]
    occluders: usize,
    #[arg(long, default_value_t = 10.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let run = match cli.command {
        Command::Train(a) => cmd_train(a, exec),
        Command::Eval(a) => cmd_eval(a, exec),
        Command::Bench(a) => cmd_bench(a, exec),
        Command::Visualize(a) => cmd_visualize(a),
        Command::GenSynth(a) => cmd_gen_synth(a, exec),
    };
    if let Err(e) = run {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn cmd_train(args: TrainArgs, exec: Exec) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply(&args.overrides)?;
    let role = if args.teacher { Role::Teacher } else { Role::Student };
    if cfg.occluders.is_none() {
        let dir = cfg.data_dir.join(OCCLUDER_TRAIN_DIR);
        if dir.is_dir() {
            cfg.occluders = Some(dir);
        }
    }
    if role == Role::Student && cfg.npkd && cfg.teacher.is_none() {
        let default = checkpoint_path(&cfg.out_dir, Role::Teacher);
        if !default.exists() {
            bail!("npkd is on but no teacher is set and {} does not exist; run `train --teacher` first or pass teacher=PATH", default.display());
        }
        cfg.teacher = Some(default);
    }
    info!("training {} into {}", role.name(), cfg.out_dir.display());
    let out = train(&cfg, role, exec)?;
    info!(
        "final epoch loss {:.4}; checkpoint {}",
        out.epoch_loss.last().copied().unwrap_or(f64::NAN),
        out.checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs, exec: Exec) -> Result<()> {
    let mut model = load_model(&args.checkpoint)?;
    if let Some(p) = args.keep_ratio {
        if model.num_stages() == 0 {
            log::warn!("checkpoint is not sparsified; --keep-ratio ignored");
        }
        model = model.with_ratio(p)?;
    }
    let (w, h) = (model.patch.width as u32, model.patch.height as u32);
    let manifest = Manifest::load(&args.data)?;
    let (qi, qm) = manifest.load_split(Split::Query, exec)?;
    let (gi, gm) = manifest.load_split(Split::Gallery, exec)?;
    let (mut qi, gi) = (fit_images(qi, w, h), fit_images(gi, w, h));
    if args.occluded || args.occluders.is_some() {
        let dir = args.occluders.unwrap_or_else(|| args.data.join(OCCLUDER_EVAL_DIR));
        let library = load_patch_library(&dir)?;
        qi = occlude_all(&qi, &library, args.seed, exec)?;
    }
    let report = evaluate(&model, (&qi, &qm), (&gi, &gm), args.batch, exec)?;
    if !args.csv {
        println!("{report}");
    }
    println!("{}", EvalReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

fn cmd_bench(args: BenchArgs, exec: Exec) -> Result<()> {
    let model = match &args.checkpoint {
        Some(path) => load_model(path)?,
        None => bench::bench_model(args.seed)?,
    };
    if model.num_stages() == 0 {
        log::warn!("model is not sparsified; every ratio runs the dense path");
    }
    let input = bench::bench_input::<f32>(&model.patch, args.batch, args.seed);
    let results = bench::sweep(&model, &args.ratios, &input, args.warmup, args.reps)?;
    println!("{}", bench::CSV_HEADER.join(","));
    for r in &results {
        println!("{}", r.csv_record().join(","));
    }
    if let Some(path) = &args.out {
        bench::append_csv(path, &results)?;
    }
    if let Some(s) = bench::speedup(&results, 0.5, 1.0) {
        info!("speedup p=0.5 vs p=1.0: {s:.2}x");
    }
    if let Some(workers) = args.workers {
        println!("p,batch,workers,aggregate_imgs_per_s");
        for &p in &args.ratios {
            let r = bench::measure_multi_worker(&model, p, &input, workers, args.reps, exec)?;
            println!("{},{},{},{:.3}", r.keep_ratio, r.batch, r.workers, r.aggregate);
        }
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn cmd_visualize(args: VisualizeArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let (w, h) = (model.patch.width as u32, model.patch.height as u32);
    let images = args.images.iter().map(|p| read_ppm(p)).collect::<sparse_reid::Result<Vec<_>>>()?;
    let images = fit_images(images, w, h);
    if model.num_stages() == 0 {
        println!("checkpoint has no sparsification stages; writing inputs unchanged");
    }
    std::fs::create_dir_all(&args.out)?;
    for (path, view) in args.images.iter().zip(visualize(&model, &images)?) {
        for (s, img) in view.stages.iter().enumerate() {
            let out = args.out.join(format!("{}_stage{}.ppm", stem(path), s + 1));
            write_ppm(&out, img)?;
            println!("{} discarded={}", out.display(), view.discarded[s]);
        }
    }
    Ok(())
}

fn cmd_gen_synth(args: SynthArgs, exec: Exec) -> Result<()> {
    let spec = SynthSpec {
        identities: args.identities,
        images_per_id: args.images_per_id,
        height: args.height,
        width: args.width,
        cameras: args.cameras,
        train_identities: args.train_identities,
        occluders: args.occluders,
        noise: args.noise,
        seed: args.seed,
    };
    let manifest = gen_synth(&spec, &args.out, exec)?;
    println!(
        "wrote {} images ({} train ids, {} test ids) to {}",
        manifest.rows.len(),
        manifest.identities(Split::Train).len(),
        manifest.identities(Split::Query).len(),
        args.out.display()
    );
    Ok(())
}
