use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use satnet_core::dam::DamConfig;
use satnet_core::dfam::DfamConfig;
use satnet_core::gradcheck::{check_all, check_module, GradReport, Module};
use satnet_core::loss::{edge_from_saliency, total_loss, HybridTerms, LossBreakdown};
use satnet_core::model::{CostReport, EfficiencyFactor, ModelConfig, Satnet, Stage, StageTimes};
use satnet_core::ops::{resize_bilinear, ResizeTarget};
use satnet_core::{ParamStore, Tensor};

use crate::netpbm::Image;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn domain(context: impl std::fmt::Display, e: impl std::fmt::Display) -> CliError {
    CliError::Domain(format!("{context}: {e}"))
}

/// Lightweight RGB-D salient object detection.
#[derive(Parser, Debug)]
#[command(name = "satnet", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Predict saliency maps for an RGB (P6) and depth (P5) pair.
    Run(RunArgs),
    /// Print analytic per-stage parameter and MAC counts.
    Count(CountArgs),
    /// Time each stage over repeated forward passes.
    Bench(BenchArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradArgs),
    /// Evaluate the training loss of saved predictions against a mask.
    Losscheck(LossArgs),
    /// Write seeded initial weights.
    InitWeights(InitArgs),
}

#[derive(Copy, Clone, Debug, Default, ValueEnum)]
enum Format {
    #[default]
    Table,
    Json,
}

fn parse_ef(s: &str) -> Result<EfficiencyFactor, String> {
    let v: usize = s.parse().map_err(|_| format!("`{s}` is not an integer"))?;
    EfficiencyFactor::new(v).map_err(|e| e.to_string())
}

fn parse_dfam(s: &str) -> Result<DfamConfig, String> {
    DfamConfig::from_str(s).map_err(|e| e.to_string())
}

fn parse_size(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("`{s}` is not an integer"))?;
    if v == 0 || !v.is_multiple_of(32) {
        return Err(format!("size must be a positive multiple of 32, got {v}"));
    }
    Ok(v)
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Unified channel width: 16, 32, 64 or 128.
    #[arg(long, default_value = "32", value_parser = parse_ef)]
    ef: EfficiencyFactor,
    /// Three increasing odd receptive-field kernels.
    #[arg(long, default_value = "3,5,7", value_parser = parse_dfam)]
    dfam: DfamConfig,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Output PGM; sidecars `<stem>.sp.pgm` and `<stem>.tp.pgm` go next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "256", value_parser = parse_size)]
    size: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "7", value_parser = ["3", "7"])]
    dam_kernel: String,
    #[arg(long, default_value = "256", value_parser = parse_size)]
    size: usize,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "20", value_parser = clap::value_parser!(u32).range(1..))]
    iters: u32,
    #[arg(long, default_value = "256", value_parser = parse_size)]
    size: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
struct GradArgs {
    /// all, dam, dirm, dfam, loss or backbone.
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value = "1e-5")]
    tol: f64,
    #[arg(long, default_value = "0")]
    seed: u64,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
struct LossArgs {
    /// Decoder output S.
    #[arg(long)]
    pred: PathBuf,
    /// Texture head output T_p.
    #[arg(long)]
    predtex: PathBuf,
    /// Semantic head output S_p.
    #[arg(long)]
    predaux: PathBuf,
    /// Ground-truth mask, binarized at 128.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "7", value_parser = ["3", "7"])]
    dam_kernel: String,
}

pub fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Count(a) => cmd_count(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Losscheck(a) => cmd_losscheck(a),
        Command::InitWeights(a) => cmd_init_weights(a),
    }
}

fn build(model: &ModelArgs, size: usize, dam_kernel: usize, seed: u64) -> CliResult<Satnet> {
    let config = ModelConfig {
        input_size: size,
        ef: model.ef,
        dfam: model.dfam,
        dam: DamConfig {
            heatmap_kernel: dam_kernel,
            ..DamConfig::default()
        },
        seed,
    };
    Satnet::new(config).map_err(|e| CliError::Usage(e.to_string()))
}

const HEATMAP_WEIGHT: &str = "dam.l1.rgb.heatmap.weight";

/// Loads weights and builds the matching model; the heatmap kernel is read
/// from the file.
fn load_model(path: &Path, model: &ModelArgs, size: usize) -> CliResult<(Satnet, ParamStore<f32>)> {
    let store = ParamStore::<f32>::load(path).map_err(|e| domain(path.display(), e))?;
    let kernel = store
        .get(HEATMAP_WEIGHT)
        .map(|t| t.dims()[3])
        .unwrap_or(DamConfig::default().heatmap_kernel);
    let net = build(model, size, kernel, 0).map_err(|e| domain(path.display(), e))?;
    store.validate(&net.layout()).map_err(|e| domain(path.display(), e))?;
    Ok((net, store))
}

/// `[1, C, size, size]` in `[0, 1]`, resampled bilinearly.
fn image_tensor(img: &Image, size: usize) -> CliResult<Tensor<f32>> {
    let (w, c) = (img.width, img.channels);
    let t = Tensor::from_fn(
        satnet_core::Shape::new([1, c, img.height, w]).map_err(|e| domain("image", e))?,
        |_, ch, y, x| f32::from(img.data[(y * w + x) * c + ch]) / 255.0,
    );
    resize_bilinear(&t, ResizeTarget::Extent(size, size)).map_err(|e| domain("resize", e))
}

fn map_image(t: &Tensor<f32>) -> Image {
    let [_, _, h, w] = t.dims();
    let data = t.data()[..h * w]
        .iter()
        .map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8)
        .collect();
    Image::gray(w, h, data)
}

fn sidecar(out: &Path, tag: &str) -> PathBuf {
    let s = out.to_string_lossy();
    let stem = s.strip_suffix(".pgm").unwrap_or(&s);
    PathBuf::from(format!("{stem}.{tag}.pgm"))
}

fn read_image(path: &Path, channels: usize) -> CliResult<Image> {
    Image::read(path, channels).map_err(|e| domain(path.display(), e))
}

fn write_image(img: &Image, path: &Path) -> CliResult {
    img.write(path).map_err(|e| domain(path.display(), e))
}

fn cmd_run(a: RunArgs) -> CliResult {
    let rgb = read_image(&a.rgb, 3)?;
    let depth = read_image(&a.depth, 1)?;
    let (net, store) = load_model(&a.weights, &a.model, a.size)?;
    let p = net
        .forward(&store, &image_tensor(&rgb, a.size)?, &image_tensor(&depth, a.size)?)
        .map_err(|e| domain("forward", e))?;
    write_image(&map_image(&p.s), &a.out)?;
    write_image(&map_image(&p.s_p), &sidecar(&a.out, "sp"))?;
    write_image(&map_image(&p.t_p), &sidecar(&a.out, "tp"))
}

#[derive(Serialize)]
struct CountJson<'a> {
    dfam: String,
    dam_kernel: usize,
    #[serde(flatten)]
    report: &'a CostReport,
}

fn mega(v: u64) -> f64 {
    v as f64 / 1e6
}

fn giga(v: u64) -> f64 {
    v as f64 / 1e9
}

fn cmd_count(a: CountArgs) -> CliResult {
    let kernel = a.dam_kernel.parse().expect("restricted by the parser");
    let net = build(&a.model, a.size, kernel, 0)?;
    let report = net.cost();
    match a.format {
        Format::Json => print_json(&CountJson {
            dfam: a.model.dfam.to_string(),
            dam_kernel: kernel,
            report: &report,
        }),
        Format::Table => {
            println!("input {0}x{0}, ef {1}, dfam {2}, dam kernel {kernel}", a.size, report.ef, a.model.dfam);
            println!("{:<8} {:>12} {:>10} {:>14} {:>10}", "stage", "params", "params(M)", "MACs", "FLOPs(G)");
            let row = |name: &str, c: satnet_core::model::StageCost| {
                println!(
                    "{name:<8} {:>12} {:>10.4} {:>14} {:>10.4}",
                    c.params,
                    mega(c.params),
                    c.macs,
                    giga(c.flops)
                );
            };
            for r in &report.stages {
                row(r.stage.name(), r.cost);
            }
            row("Total", report.total);
            Ok(())
        }
    }
}

fn print_json(v: &impl Serialize) -> CliResult {
    let s = serde_json::to_string_pretty(v).map_err(|e| domain("json", e))?;
    println!("{s}");
    Ok(())
}

pub const WARMUP: usize = 10;

#[derive(Serialize)]
struct Timing {
    stage: String,
    median_ms: f64,
    mean_ms: f64,
}

#[derive(Serialize)]
struct BenchJson {
    input_size: usize,
    iters: u32,
    warmup: usize,
    threads: usize,
    stages: Vec<Timing>,
    total: Timing,
    fps: f64,
}

fn timing(stage: &str, samples: &[Duration]) -> Timing {
    let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    let mid = ms.len() / 2;
    let median = if ms.len() % 2 == 1 { ms[mid] } else { 0.5 * (ms[mid - 1] + ms[mid]) };
    Timing {
        stage: stage.to_string(),
        median_ms: median,
        mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
    }
}

/// Smooth deterministic test pattern in `[0, 1]`.
fn bench_input(c: usize, size: usize) -> Tensor<f32> {
    let s = satnet_core::Shape::new([1, c, size, size]).expect("positive extent");
    Tensor::from_fn(s, |_, ch, y, x| {
        let (u, v) = (x as f32 / size as f32, y as f32 / size as f32);
        0.5 + 0.4 * ((3.0 + ch as f32) * u + 2.0 * v).sin() * (4.0 * v).cos()
    })
}

fn cmd_bench(a: BenchArgs) -> CliResult {
    let (net, store) = load_model(&a.weights, &a.model, a.size)?;
    let (rgb, depth) = (bench_input(3, a.size), bench_input(1, a.size));
    let mut runs: Vec<StageTimes> = Vec::with_capacity(a.iters as usize);
    for i in 0..WARMUP + a.iters as usize {
        let (_, t) = net.forward_timed(&store, &rgb, &depth).map_err(|e| domain("forward", e))?;
        if i >= WARMUP {
            runs.push(t);
        }
    }
    let stages: Vec<Timing> = Stage::ALL
        .iter()
        .map(|&s| timing(s.name(), &runs.iter().map(|r| r.stages[s as usize]).collect::<Vec<_>>()))
        .collect();
    let total = timing("Total", &runs.iter().map(|r| r.total).collect::<Vec<_>>());
    let fps = if total.median_ms > 0.0 { 1e3 / total.median_ms } else { f64::INFINITY };
    let report = BenchJson {
        input_size: a.size,
        iters: a.iters,
        warmup: WARMUP,
        threads: rayon::current_num_threads(),
        stages,
        total,
        fps,
    };
    match a.format {
        Format::Json => print_json(&report),
        Format::Table => {
            println!(
                "input {0}x{0}, {1} iterations after {2} warmup, {3} threads",
                a.size, a.iters, WARMUP, report.threads
            );
            println!("{:<8} {:>10} {:>10}", "stage", "median_ms", "mean_ms");
            for t in report.stages.iter().chain([&report.total]) {
                println!("{:<8} {:>10.3} {:>10.3}", t.stage, t.median_ms, t.mean_ms);
            }
            println!("fps {:.2}", report.fps);
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct GradJson<'a> {
    seed: u64,
    tol: f64,
    pass: bool,
    reports: &'a [GradReport],
}

fn cmd_gradcheck(a: GradArgs) -> CliResult {
    if a.tol.is_nan() || a.tol < 0.0 {
        return Err(CliError::Usage(format!("tolerance must be non-negative, got {}", a.tol)));
    }
    let reports = if a.module == "all" {
        check_all(a.seed, a.tol)
    } else {
        let m = Module::from_str(&a.module).map_err(|e| CliError::Usage(e.to_string()))?;
        check_module(m, a.seed, a.tol)
    };
    let passed = reports.iter().filter(|r| r.pass).count();
    let pass = passed == reports.len();
    match a.format {
        Format::Json => print_json(&GradJson {
            seed: a.seed,
            tol: a.tol,
            pass,
            reports: &reports,
        })?,
        Format::Table => {
            for r in &reports {
                println!("{r}");
            }
            println!("{passed}/{} passed (seed {}, tol {:e})", reports.len(), a.seed, a.tol);
        }
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::Domain(format!(
            "gradcheck failed: {} of {} reports",
            reports.len() - passed,
            reports.len()
        )))
    }
}

fn gray_tensor(img: &Image, binarize: bool) -> Tensor<f64> {
    let data = img
        .data
        .iter()
        .map(|&v| match binarize {
            true => f64::from(u8::from(v >= 128)),
            false => f64::from(v) / 255.0,
        })
        .collect();
    Tensor::from_vec([1, 1, img.height, img.width], data).expect("extent matches raster")
}

fn cmd_losscheck(a: LossArgs) -> CliResult {
    let gt = read_image(&a.gt, 1)?;
    let mut preds = Vec::with_capacity(3);
    for path in [&a.pred, &a.predaux, &a.predtex] {
        let img = read_image(path, 1)?;
        if (img.width, img.height) != (gt.width, gt.height) {
            return Err(domain(
                path.display(),
                format!(
                    "size {}x{} differs from ground truth {}x{}",
                    img.width, img.height, gt.width, gt.height
                ),
            ));
        }
        preds.push(gray_tensor(&img, false));
    }
    let g_s = gray_tensor(&gt, true);
    let g_e = edge_from_saliency(&g_s).map_err(|e| domain("edge", e))?;
    let b: LossBreakdown = total_loss(&preds[0], &preds[1], &preds[2], &g_s, &g_e).map_err(|e| domain("loss", e))?;
    match a.format {
        Format::Json => print_json(&b),
        Format::Table => {
            let terms: [(&str, HybridTerms); 3] = [
                ("saliency_head", b.saliency_head),
                ("texture_head", b.texture_head),
                ("decoder", b.decoder),
            ];
            for (name, t) in terms {
                println!("{name}.bce {}", t.bce);
                println!("{name}.iou {}", t.iou);
                println!("{name}.ssim {}", t.ssim);
            }
            println!("total {}", b.total);
            Ok(())
        }
    }
}

fn cmd_init_weights(a: InitArgs) -> CliResult {
    let kernel = a.dam_kernel.parse().expect("restricted by the parser");
    let net = build(&a.model, ModelConfig::default().input_size, kernel, a.seed)?;
    let store = net.init_params();
    store.save(&a.out).map_err(|e| domain(a.out.display(), e))?;
    println!("{}", store.learnable_count());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_names() {
        assert_eq!(sidecar(Path::new("a/s.pgm"), "sp"), PathBuf::from("a/s.sp.pgm"));
        assert_eq!(sidecar(Path::new("out"), "tp"), PathBuf::from("out.tp.pgm"));
    }

    #[test]
    fn median_and_mean() {
        let ms = |v: &[u64]| v.iter().map(|&m| Duration::from_millis(m)).collect::<Vec<_>>();
        let t = timing("x", &ms(&[3, 1, 2]));
        assert_eq!((t.median_ms, t.mean_ms), (2.0, 2.0));
        let t = timing("x", &ms(&[4, 1, 2, 3]));
        assert_eq!(t.median_ms, 2.5);
    }

    #[test]
    fn size_guard() {
        assert!(parse_size("256").is_ok());
        assert!(parse_size("250").is_err());
        assert!(parse_size("0").is_err());
    }

    #[test]
    fn map_image_rounds_half_to_128() {
        let t = Tensor::from_vec([1, 1, 1, 3], vec![0.5f32, 0.0, 1.0]).unwrap();
        assert_eq!(map_image(&t).data, vec![128, 0, 255]);
    }
}
