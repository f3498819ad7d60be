//! Command-line entry point: train, eval, infer, inspect.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};
use uwseg::config::{model_from_kv, parse_size, RunConfig};
use uwseg::data::{labels_to_mask, Dataset, Palette, Sample};
use uwseg::error::{Error, Result};
use uwseg::eval::{argmax_labels, count_flops, evaluate, measure_fps, report_csv, report_table};
use uwseg::loss::scharr_edges;
use uwseg::model::Model;
use uwseg::tensor::Tensor;
use uwseg::train::{apply_checkpoint, load_checkpoint, train_loop};

#[derive(Parser)]
#[command(name = "uwseg", version, about = "Underwater semantic segmentation: training, evaluation, inference")]
struct Cli {
    /// Base directory for relative paths.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Seed override; all commands are deterministic under a fixed seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config (or fully synthetic data).
    Train(TrainArgs),
    /// Evaluate a checkpoint and print per-class IoU, mIoU, and costs.
    Eval(EvalArgs),
    /// Segment images and write color masks (and optional edge maps).
    Infer(InferArgs),
    /// Print the architecture summary with per-module parameters and FLOPs.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run config file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train on generated synthetic scenes (no dataset needed).
    #[arg(long)]
    synthetic: bool,
    /// Class count for synthetic data.
    #[arg(long)]
    n_cls: Option<usize>,
    /// Iteration count override.
    #[arg(long)]
    iters: Option<usize>,
    /// Output directory for checkpoint, logs, and the run manifest.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint stem (written by train as <out>/ckpt_final).
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root with images/ and masks/.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Palette file for the dataset.
    #[arg(long)]
    palette: Option<PathBuf>,
    /// Evaluate on synthetic scenes instead of a dataset.
    #[arg(long)]
    synthetic: bool,
    /// Synthetic sample count.
    #[arg(long, default_value_t = 8)]
    n_images: usize,
    /// Synthetic scene size.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Also write the per-class report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Input size for the FLOP report, e.g. 128x128.
    #[arg(long, default_value = "128x128")]
    flops_at: String,
    /// Also measure throughput (median images/second).
    #[arg(long)]
    fps: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint stem.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory for rendered masks.
    #[arg(long)]
    out: PathBuf,
    /// Also write normalized edge-magnitude heatmaps.
    #[arg(long)]
    edges: bool,
    /// Reflect-pad inputs to the required size multiple and crop back.
    #[arg(long)]
    pad: bool,
    /// Palette used to render masks (defaults to a synthetic palette).
    #[arg(long)]
    palette: Option<PathBuf>,
    /// Input images (PNG).
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint stem to inspect.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Run config to inspect instead of a checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input size for the FLOP breakdown, e.g. 128x128.
    #[arg(long, default_value = "128x128")]
    flops_at: String,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&cli.workdir, cli.seed, args),
        Command::Eval(args) => cmd_eval(&cli.workdir, cli.seed, args),
        Command::Infer(args) => cmd_infer(&cli.workdir, args),
        Command::Inspect(args) => cmd_inspect(&cli.workdir, args),
    }
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_run_config(workdir: &Path, args: &TrainArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut rc = match &args.config {
        Some(path) => {
            let path = resolve(workdir, path);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => {
            if !args.synthetic {
                return Err(Error::Config("train needs --config or --synthetic".into()));
            }
            RunConfig::parse("data.synthetic = true\n")?
        }
    };
    if args.synthetic {
        rc.data.synthetic = true;
        rc.data.root = None;
    }
    if let Some(n) = args.n_cls {
        rc.model.n_cls = n;
    }
    if let Some(iters) = args.iters {
        rc.train.iters = iters;
    }
    if let Some(seed) = seed {
        rc.data.seed = seed;
        rc.train.seed = seed;
    }
    Ok(rc)
}

fn build_dataset(workdir: &Path, rc: &RunConfig) -> Result<Dataset> {
    if rc.data.synthetic {
        Ok(Dataset::synthetic(rc.data.seed, rc.model.n_cls, rc.data.size, rc.data.n_images))
    } else {
        let root = rc
            .data
            .root
            .as_ref()
            .ok_or_else(|| Error::Config("data.root is required unless data.synthetic".into()))?;
        let palette_path = rc
            .data
            .palette
            .as_ref()
            .ok_or_else(|| Error::Config("data.palette is required for dataset runs".into()))?;
        let palette = Palette::load(&resolve(workdir, palette_path))?;
        if palette.n_cls() != rc.model.n_cls {
            return Err(Error::Config(format!(
                "palette has {} classes but model.n_cls = {}",
                palette.n_cls(),
                rc.model.n_cls
            )));
        }
        Dataset::load_dir(&resolve(workdir, root), &palette)
    }
}

fn write_manifest(out_dir: &Path, rc: &RunConfig) -> Result<()> {
    let mut text = String::new();
    text.push_str("uwseg-run v1\n");
    text.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("start_unix = {}\n", unix_now()));
    text.push_str(&format!("seed = {}\n", rc.train.seed));
    text.push_str(&format!("out_dir = {}\n", out_dir.display()));
    text.push_str(&format!("checkpoint = {}\n", out_dir.join("ckpt_final").display()));
    text.push_str(&format!("metrics = {}\n", out_dir.join("metrics.csv").display()));
    text.push_str("-- config --\n");
    text.push_str(&rc.to_text());
    std::fs::write(out_dir.join("manifest.txt"), text)?;
    Ok(())
}

fn cmd_train(workdir: &Path, seed: Option<u64>, args: TrainArgs) -> Result<()> {
    let rc = load_run_config(workdir, &args, seed)?;
    let dataset = build_dataset(workdir, &rc)?;
    let out_dir = resolve(workdir, &args.out);
    std::fs::create_dir_all(&out_dir)?;
    write_manifest(&out_dir, &rc)?;

    let model = Model::new(&rc.model, rc.train.seed)?;
    let mut tc = rc.train.clone();
    tc.out_dir = Some(out_dir.clone());
    let report = train_loop(&model, &dataset, &tc)?;

    // append completion info; the recorded configuration stays untouched
    let mut manifest = std::fs::read_to_string(out_dir.join("manifest.txt"))?;
    manifest.push_str(&format!("end_unix = {}\n", unix_now()));
    manifest.push_str(&format!("iterations_run = {}\n", report.iterations_run));
    std::fs::write(out_dir.join("manifest.txt"), manifest)?;

    println!(
        "trained {} iterations: loss {:.4} -> {:.4}",
        report.iterations_run, report.initial_loss, report.final_loss
    );
    if let Some(m) = report.final_miou {
        println!("train mIoU: {m:.4}");
    }
    println!("checkpoint: {}", out_dir.join("ckpt_final").display());
    println!("metrics: {}", out_dir.join("metrics.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn load_model(workdir: &Path, ckpt: &Path) -> Result<Model> {
    let stem = resolve(workdir, ckpt);
    let ckpt = load_checkpoint(&stem)?;
    let cfg = model_from_kv(&ckpt.config)?;
    let model = Model::new(&cfg, 0)?;
    apply_checkpoint(&model, &ckpt, None)?;
    Ok(model)
}

fn cmd_eval(workdir: &Path, seed: Option<u64>, args: EvalArgs) -> Result<()> {
    let model = load_model(workdir, &args.ckpt)?;
    let (samples, class_names): (Vec<Sample>, Vec<String>) = if args.synthetic || args.data.is_none() {
        let ds = Dataset::synthetic(seed.unwrap_or(0), model.cfg.n_cls, args.size, args.n_images);
        let names = (0..ds.palette.n_cls()).map(|i| ds.palette.name(i).to_string()).collect();
        (ds.samples, names)
    } else {
        let palette_path = args
            .palette
            .as_ref()
            .ok_or_else(|| Error::Config("--palette is required with --data".into()))?;
        let palette = Palette::load(&resolve(workdir, palette_path))?;
        if palette.n_cls() != model.cfg.n_cls {
            return Err(Error::Config(format!(
                "palette has {} classes but the checkpoint model has {}",
                palette.n_cls(),
                model.cfg.n_cls
            )));
        }
        let ds = Dataset::load_dir(&resolve(workdir, args.data.as_ref().unwrap()), &palette)?;
        let names = (0..palette.n_cls()).map(|i| palette.name(i).to_string()).collect();
        (ds.samples, names)
    };

    let report = evaluate(&model, &samples, None)?;
    let (fh, fw) = parse_size(&args.flops_at)
        .ok_or_else(|| Error::Config(format!("--flops-at expects HxW, got '{}'", args.flops_at)))?;
    let cost = count_flops(&model, fh, fw)?;
    print!("{}", report_table(&report, &class_names, Some(&cost)));
    let mut fps_value = None;
    if args.fps {
        let (fps, hw) = measure_fps(&model, fh, fw, 1, 5)?;
        println!("throughput: {fps:.2} images/s at {fh}x{fw} on {hw}");
        fps_value = Some(fps);
    }
    if let Some(csv_path) = args.csv {
        let path = resolve(workdir, &csv_path);
        std::fs::write(&path, report_csv(&report, &class_names, Some(&cost), fps_value))?;
        println!("csv report: {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

fn pad_to_multiple(image: &Tensor, multiple: usize) -> Result<(Tensor, usize, usize)> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let nh = h.div_ceil(multiple) * multiple;
    let nw = w.div_ceil(multiple) * multiple;
    if (nh, nw) == (h, w) {
        return Ok((image.clone(), h, w));
    }
    let src = image.to_vec();
    let mut data = vec![0.0f32; 3 * nh * nw];
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else if n == 1 {
            0
        } else {
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        }
    };
    for c in 0..3 {
        for y in 0..nh {
            let sy = reflect(y, h);
            for x in 0..nw {
                let sx = reflect(x, w);
                data[c * nh * nw + y * nw + x] = src[c * h * w + sy * w + sx];
            }
        }
    }
    Ok((Tensor::from_vec(data, &[3, nh, nw])?, h, w))
}

fn cmd_infer(workdir: &Path, args: InferArgs) -> Result<()> {
    if args.images.is_empty() {
        return Err(Error::Config("infer needs at least one input image".into()));
    }
    let model = load_model(workdir, &args.ckpt)?;
    let palette = match &args.palette {
        Some(p) => Palette::load(&resolve(workdir, p))?,
        None => Palette::synthetic(model.cfg.n_cls),
    };
    if palette.n_cls() != model.cfg.n_cls {
        return Err(Error::Config(format!(
            "palette has {} classes but the checkpoint model has {}",
            palette.n_cls(),
            model.cfg.n_cls
        )));
    }
    let out_dir = resolve(workdir, &args.out);
    std::fs::create_dir_all(&out_dir)?;
    let multiple = model.cfg.input_multiple();

    for path in &args.images {
        let path = resolve(workdir, path);
        let img = image::open(&path)
            .map_err(|e| Error::Ingest(format!("cannot open image {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32).0;
                for c in 0..3 {
                    data[c * h * w + y * w + x] = px[c] as f32 / 255.0;
                }
            }
        }
        let tensor = Tensor::from_vec(data, &[3, h, w])?;
        let (input, orig_h, orig_w) = if h % multiple == 0 && w % multiple == 0 {
            (tensor, h, w)
        } else if args.pad {
            pad_to_multiple(&tensor, multiple)?
        } else {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {multiple}; rerun with --pad to reflect-pad and crop back"
            )));
        };

        let s = input.shape();
        let batched = input.reshape(&[1, 3, s[1], s[2]])?;
        let out = model.forward_eval(&batched)?;
        // crop logits back to the original frame
        let logits = out.full.narrow(2, 0, orig_h)?.narrow(3, 0, orig_w)?;
        let labels = argmax_labels(&logits);
        let mask = labels_to_mask(&labels, orig_h, orig_w, &palette);

        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let mask_path = out_dir.join(format!("{stem}_mask.png"));
        mask.save(&mask_path)
            .map_err(|e| Error::Ingest(format!("cannot write {}: {e}", mask_path.display())))?;
        println!("{} -> {}", path.display(), mask_path.display());

        if args.edges {
            let prob = logits.sigmoid();
            let e = scharr_edges(&prob)?;
            let es = e.shape();
            let (n_cls, hh, ww) = (es[1], es[2], es[3]);
            let ev = e.to_vec();
            // max over classes, scaled to 8-bit grayscale
            let mut gray = image::GrayImage::new(ww as u32, hh as u32);
            for y in 0..hh {
                for x in 0..ww {
                    let mut m = 0.0f32;
                    for c in 0..n_cls {
                        m = m.max(ev[(c * hh + y) * ww + x]);
                    }
                    gray.put_pixel(x as u32, y as u32, image::Luma([(m * 255.0).round() as u8]));
                }
            }
            let edge_path = out_dir.join(format!("{stem}_edges.png"));
            gray.save(&edge_path)
                .map_err(|e| Error::Ingest(format!("cannot write {}: {e}", edge_path.display())))?;
            println!("{} -> {}", path.display(), edge_path.display());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

fn cmd_inspect(workdir: &Path, args: InspectArgs) -> Result<()> {
    let model = match (&args.ckpt, &args.config) {
        (Some(ckpt), _) => load_model(workdir, ckpt)?,
        (None, Some(cfg_path)) => {
            let text = std::fs::read_to_string(resolve(workdir, cfg_path))
                .map_err(|e| Error::Config(format!("cannot read config: {e}")))?;
            let rc = RunConfig::parse(&text)?;
            Model::new(&rc.model, rc.train.seed)?
        }
        (None, None) => Model::new(&Default::default(), 0)?,
    };

    let cfg = &model.cfg;
    println!("uwseg model");
    println!(
        "  encoder: 4 stages, channels {:?}, depths {:?}, sr {:?}, heads {:?}",
        cfg.encoder.channels, cfg.encoder.depths, cfg.encoder.sr_ratios, cfg.encoder.heads
    );
    match &cfg.uiqa {
        Some(u) => println!(
            "  uiqa: P={}, N_M={}, N_C={}, shared width {}",
            u.patch,
            u.n_layers,
            u.n_heads,
            u.embed_width(&cfg.encoder.channels)
        ),
        None => println!("  uiqa: disabled"),
    }
    println!("  decoder: {} (C={}, {} classes)", cfg.decoder.as_str(), cfg.embed, cfg.n_cls);
    println!("  input multiple: {}", cfg.input_multiple());

    let (fh, fw) = parse_size(&args.flops_at)
        .ok_or_else(|| Error::Config(format!("--flops-at expects HxW, got '{}'", args.flops_at)))?;
    let cost = count_flops(&model, fh, fw)?;
    println!(
        "  params: {:.3} M total, GFLOPs @ {fh}x{fw}: {:.3}",
        cost.params as f64 / 1e6,
        cost.flops as f64 / 1e9
    );
    let mut sum = 0u64;
    for m in &cost.per_module {
        println!(
            "    {:<10} {:>12.2} MFLOPs {:>12.3} Mparams",
            m.name,
            m.flops as f64 / 1e6,
            m.params as f64 / 1e6
        );
        sum += m.flops;
    }
    debug_assert_eq!(sum, cost.flops, "per-module FLOPs must sum to the total");
    Ok(())
}
