//! `gsenhance`: fit images as 2D Gaussian sets and enhance them in place.
//!
//! Exit codes: 0 on success, 2 for usage errors (bad flags, missing inputs,
//! invalid settings), 1 for failures while doing the work.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use gsenhance::codec::{self, RunConfig};
use gsenhance::enhance::{enhance_from, EnhancerParams, Stage2Problem};
use gsenhance::fit::fit_image;
use gsenhance::losses::LossBreakdown;
use gsenhance::metrics::{compression_ratio, psnr, MetricReport};
use gsenhance::raster::{render, RasterOptions};
use gsenhance::GaussianSet;

#[derive(Parser)]
#[command(name = "gsenhance", version, about = "Gaussian-splat image fitting and low-light enhancement")]
struct Cli {
    /// Worker threads for the rasterizer and encoder (default: all cores).
    #[arg(long, global = true, env = "GS2D_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a Gaussian set to a PNG image.
    Fit(FitArgs),
    /// Enhance the colors of a fitted Gaussian set.
    Enhance(EnhanceArgs),
    /// Render a Gaussian set to PNG.
    Render(RenderArgs),
    /// Compare two PNG images.
    Metrics(MetricsArgs),
    /// Describe a Gaussian set.
    Info(InfoArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Settings file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gaussians: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_ssim: Option<f64>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write `iter,loss,psnr` per iteration to this CSV file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    lambda4: Option<f64>,
    #[arg(long)]
    lambda5: Option<f64>,
    #[arg(long)]
    lambda6: Option<f64>,
    #[arg(long)]
    lambda7: Option<f64>,
    /// Target mean brightness.
    #[arg(long)]
    eh: Option<f64>,
    /// Saturation threshold of the hue mask.
    #[arg(long)]
    tau: Option<f64>,
    /// Contrast scaling factor.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tile: Option<usize>,
    /// Start the encoder from the `encoder.*` tensors of this container.
    #[arg(long)]
    encoder_weights: Option<PathBuf>,
    /// Save the trained enhancer parameters here.
    #[arg(long)]
    params_out: Option<PathBuf>,
    /// Write one weight-map PNG per slot into this directory.
    #[arg(long)]
    dump_weights: Option<PathBuf>,
    /// Write one render per operator, applied globally, into this directory.
    #[arg(long)]
    dump_operators: Option<PathBuf>,
    /// Write the per-iteration loss breakdown to this CSV file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    tile: usize,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Print one JSON line instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long)]
    model: PathBuf,
}

/// A failure, classified by exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn require_file(path: &Path, what: &str) -> Outcome {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn require_parent(path: &Path) -> Outcome {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(usage(format!("output directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn load_config(path: Option<&Path>) -> Outcome<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            require_file(p, "config file")?;
            RunConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn cmd_fit(a: FitArgs) -> Outcome {
    require_file(&a.input, "input image")?;
    require_parent(&a.out)?;
    if let Some(log) = &a.log {
        require_parent(log)?;
    }
    let mut cfg = load_config(a.config.as_deref())?.fit;
    if let Some(v) = a.gaussians {
        cfg.n_gaussians = v;
    }
    if let Some(v) = a.iters {
        cfg.iterations = v;
    }
    if let Some(v) = a.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = a.lambda_ssim {
        cfg.lambda_ssim = v;
    }
    if let Some(v) = a.tile {
        cfg.tile_px = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let target = codec::load_image(&a.input)?;
    let mut log = a.log.as_deref().map(create).transpose()?;
    if let Some(w) = log.as_mut() {
        writeln!(w, "iter,loss,psnr")?;
    }
    let mut io_err = None;
    let set = fit_image(&target, &cfg, |p| {
        if let Some(w) = log.as_mut() {
            if let Err(e) = writeln!(w, "{},{},{}", p.iter, p.loss, p.psnr) {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    codec::save_gs2d(&set, &a.out)?;
    let rendered = render(&set, &RasterOptions::production(cfg.tile_px))?;
    let final_psnr = psnr(&rendered, &target)?;
    let cr = compression_ratio(target.width(), target.height(), set.len())?;
    println!("psnr {final_psnr:.3} dB");
    println!("compression ratio {cr:.2}");
    Ok(())
}

fn cmd_enhance(a: EnhanceArgs) -> Outcome {
    require_file(&a.model, "model")?;
    require_parent(&a.out)?;
    for p in [&a.log, &a.params_out].into_iter().flatten() {
        require_parent(p)?;
    }
    if let Some(p) = &a.encoder_weights {
        require_file(p, "encoder weights")?;
    }
    let mut cfg = load_config(a.config.as_deref())?.enhance;
    if let Some(v) = a.iters {
        cfg.iterations = v;
    }
    if let Some(v) = a.k {
        cfg.k = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.lr {
        cfg.lr0 = v;
    }
    let lambdas = [a.lambda1, a.lambda2, a.lambda3, a.lambda4, a.lambda5, a.lambda6, a.lambda7];
    for (slot, v) in cfg.loss.lambdas.iter_mut().zip(lambdas) {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(v) = a.eh {
        cfg.loss.exposure_target = v;
    }
    if let Some(v) = a.tau {
        cfg.loss.saturation_threshold = v;
    }
    if let Some(v) = a.gamma {
        cfg.loss.contrast_gamma = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.tile {
        cfg.tile_px = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let set = codec::load_gs2d(&a.model)?;
    let mut params = EnhancerParams::init(cfg.k, cfg.hidden, cfg.seed)?;
    if let Some(p) = &a.encoder_weights {
        params.encoder = codec::load_encoder(p)?;
    }
    let mut log = a.log.as_deref().map(create).transpose()?;
    if let Some(w) = log.as_mut() {
        writeln!(w, "{}", LossBreakdown::CSV_HEADER)?;
    }
    let mut io_err = None;
    let mut last = None;
    let (enhanced, params) = enhance_from(&set, &cfg, params, |p| {
        if let Some(w) = log.as_mut() {
            if let Err(e) = writeln!(w, "{}", p.breakdown.csv_row(p.iter)) {
                io_err.get_or_insert(e);
            }
        }
        last = Some(p.breakdown.total);
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    codec::save_gs2d(&enhanced, &a.out)?;
    if let Some(p) = &a.params_out {
        codec::save_enhancer(&params, p)?;
    }
    if a.dump_weights.is_some() || a.dump_operators.is_some() {
        let problem = Stage2Problem::new(&set, RasterOptions::production(cfg.tile_px), cfg.loss.clone())?;
        if let Some(dir) = &a.dump_weights {
            dump(dir, "weight", &problem.weight_map_images(&params)?)?;
        }
        if let Some(dir) = &a.dump_operators {
            dump(dir, "operator", &problem.operator_renders(&params)?)?;
        }
    }
    match last {
        Some(total) => println!("final loss {total:.6} after {} iterations", cfg.iterations),
        None => println!("no iterations run; colors unchanged where in range"),
    }
    Ok(())
}

fn dump(dir: &Path, stem: &str, images: &[gsenhance::ImageBuffer]) -> Outcome {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (k, img) in images.iter().enumerate() {
        codec::save_image(img, dir.join(format!("{stem}_{k:02}.png")))?;
    }
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Outcome {
    require_file(&a.model, "model")?;
    require_parent(&a.out)?;
    if a.tile == 0 {
        return Err(usage("--tile must be positive"));
    }
    let set = codec::load_gs2d(&a.model)?;
    let img = render(&set, &RasterOptions::production(a.tile))?;
    codec::save_image(&img, &a.out)?;
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Outcome {
    require_file(&a.reference, "reference image")?;
    require_file(&a.test, "test image")?;
    let reference = codec::load_image(&a.reference)?;
    let test = codec::load_image(&a.test)?;
    if !reference.same_shape(&test) {
        return Err(usage(format!("image sizes differ: {} vs {}", reference.shape_string(), test.shape_string())));
    }
    let report = MetricReport::compute(&reference, &test)?;
    if a.json {
        println!("{}", report.to_json_line());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn describe(set: &GaussianSet) -> String {
    let cr = compression_ratio(set.width as usize, set.height as usize, set.len())
        .map_or_else(|_| "undefined".to_string(), |c| format!("{c:.2}"));
    format!("gaussians {}\nwidth {}\nheight {}\ncompression ratio {cr}\n", set.len(), set.width, set.height)
}

fn cmd_info(a: InfoArgs) -> Outcome {
    require_file(&a.model, "model")?;
    let set = codec::load_gs2d(&a.model)?;
    print!("{}", describe(&set));
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Render(a) => cmd_render(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Info(a) => cmd_info(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
