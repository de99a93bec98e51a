//! Command-line surface: dataset generation, training, evaluation, and
//! single-image prediction.
//!
//! Exit codes: 0 success, 1 usage/input error, 2 runtime error. Usage errors
//! are detected before any artifact is written.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::config::{load_config, AdapterStrategy, RunConfig};
use crate::data::{load_all_domains, load_dataset, make_registry, parse_specs, GenOptions, Split};
use crate::error::{Error, Result};
use crate::metrics::{InstanceLabelMap, MeanMetrics, MetricsReport};
use crate::pipeline::{
    ensure_registry_compatible, evaluate, evaluate_gt_as_pred, init_model, load_checkpoint,
    predict, save_checkpoint, InferenceSelect, TrainState,
};
use crate::tensor::Tensor;

pub const CONFIG_ENV: &str = "NUSEG_CONFIG";
pub const DEFAULT_CONFIG_PATH: &str = "config/default";

#[derive(Debug, Parser)]
#[command(
    name = "nuseg",
    version,
    about = "Prompt-free multi-domain nuclei segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic domain datasets from a spec file.
    Gen(GenArgs),
    /// Train sequentially over every domain dataset in a directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metric reports and plots.
    Eval(EvalArgs),
    /// Segment a single image and write mask/instance/overlay artifacts.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Domain spec file (see config/specs.example).
    #[arg(long)]
    pub specs: PathBuf,
    /// Output directory; one dataset subdirectory per domain.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Images per domain.
    #[arg(long, default_value_t = 16)]
    pub images: usize,
    /// Square image side length in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration; falls back to $NUSEG_CONFIG, then config/default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding one dataset subdirectory per domain.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss CSV path (default: `<out>.loss.csv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A dataset directory (with manifest.txt) or a parent of several.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluate this trained domain id with its own adapter/query.
    #[arg(long)]
    pub domain: Option<usize>,
    /// Zero-shot adapter selection: mean or last.
    #[arg(long, value_name = "STRATEGY")]
    pub zero_shot: Option<String>,
    /// Output prefix; writes `<prefix>.csv`, `<prefix>.json` and plots.
    #[arg(long)]
    pub report: PathBuf,
    /// Which split tag to score.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Debug fixed point: score the ground truth against itself.
    #[arg(long, default_value_t = false)]
    pub gt_as_pred: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input PNG image.
    #[arg(long)]
    pub image: PathBuf,
    /// Trained domain id to segment with.
    #[arg(long)]
    pub domain: Option<usize>,
    /// Zero-shot adapter selection: mean or last.
    #[arg(long, value_name = "STRATEGY")]
    pub zero_shot: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit-code classes: inputs and usage map to 1, runtime failures to 2.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Validation(_)
        | Error::Shape(_)
        | Error::Domain(_)
        | Error::Format(_)
        | Error::Image(_)
        | Error::Io(_) => 1,
        Error::Generation(_)
        | Error::Training(_)
        | Error::IncompatibleCheckpoint(_)
        | Error::Integrity(_) => 2,
    }
}

/// Run a parsed command; returns the artifacts written.
pub fn run(cmd: Command) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

/// Entry point used by the binary: parse, dispatch, map errors to exit codes.
pub fn main_entry<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; --help/--version are successes
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.cmd) {
        Ok(artifacts) => {
            for p in artifacts {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn cmd_gen(a: GenArgs) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(&a.specs)
        .map_err(|e| Error::Config(format!("{}: {e}", a.specs.display())))?;
    let specs = parse_specs(&text)?;
    let opts = GenOptions {
        images_per_domain: a.images,
        image_size: a.size,
        seed: a.seed,
        test_fraction: a.test_fraction,
    };
    // generate fully in memory before touching the output directory
    let (_registry, datasets) = make_registry(&specs, &opts)?;
    let mut artifacts = Vec::new();
    for ds in &datasets {
        let dir = a.out.join(format!("{:02}_{}", ds.domain_id, ds.domain_name));
        crate::data::save_dataset(ds, &dir)?;
        artifacts.push(dir);
    }
    Ok(artifacts)
}

fn resolve_config(explicit: Option<&Path>) -> Result<RunConfig> {
    if let Some(p) = explicit {
        return load_config(p);
    }
    if let Ok(env_path) = std::env::var(CONFIG_ENV) {
        return load_config(Path::new(&env_path));
    }
    let fallback = Path::new(DEFAULT_CONFIG_PATH);
    if fallback.exists() {
        return load_config(fallback);
    }
    Ok(RunConfig::default())
}

fn cmd_train(a: TrainArgs) -> Result<Vec<PathBuf>> {
    let cfg = resolve_config(a.config.as_deref())?;
    let (registry, datasets) = load_all_domains(&a.data)?;
    for ds in &datasets {
        for s in &ds.samples {
            if s.instances.h != cfg.image_size || s.instances.w != cfg.image_size {
                return Err(Error::Shape(format!(
                    "sample {} is {}x{} but config expects {}",
                    s.id, s.instances.h, s.instances.w, cfg.image_size
                )));
            }
        }
    }
    let model = init_model(&cfg, &registry)?;
    let mut state = TrainState::new(model);
    let log = state.train_all(&datasets)?;
    save_checkpoint(&state, &a.out)?;
    let log_path = a
        .log
        .unwrap_or_else(|| PathBuf::from(format!("{}.loss.csv", a.out.display())));
    std::fs::write(&log_path, log.to_csv())?;
    Ok(vec![a.out, log_path])
}

fn parse_strategy(s: &str) -> Result<AdapterStrategy> {
    AdapterStrategy::parse(s)
        .ok_or_else(|| Error::Config(format!("unknown zero-shot strategy `{s}`")))
}

fn cmd_eval(a: EvalArgs) -> Result<Vec<PathBuf>> {
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    };
    if a.domain.is_none() && a.zero_shot.is_none() && !a.gt_as_pred {
        return Err(Error::Config(
            "eval needs --domain, --zero-shot, or --gt-as-pred".into(),
        ));
    }
    let state = load_checkpoint(&a.ckpt)?;
    let model = &state.model;

    // the data directory is either one dataset or a parent of several
    let single = a.data.join("manifest.txt").exists();
    let dataset = if single {
        load_dataset(&a.data)?
    } else {
        let (registry, mut datasets) = load_all_domains(&a.data)?;
        if a.zero_shot.is_none() {
            ensure_registry_compatible(model, &registry)?;
        }
        let k = a.domain.ok_or_else(|| {
            Error::Config("--domain is required when --data holds several datasets".into())
        })?;
        if k >= datasets.len() {
            return Err(Error::Domain(format!(
                "domain {k} not present under {}",
                a.data.display()
            )));
        }
        datasets.swap_remove(k)
    };
    let samples: Vec<&crate::data::Sample> = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::Validation(format!(
            "no `{}` samples in {}",
            a.split,
            a.data.display()
        )));
    }

    let report = if a.gt_as_pred {
        evaluate_gt_as_pred(model, &samples)?
    } else if let Some(strategy) = a.zero_shot.as_deref() {
        let strategy = parse_strategy(strategy)?;
        let select = InferenceSelect::ZeroShot {
            strategy,
            specified: a.domain,
            trained: state.cursor.trained_domains(),
        };
        evaluate(model, &samples, &select)?
    } else {
        let k = a.domain.expect("checked above");
        model.registry.check_id(k)?;
        evaluate(model, &samples, &InferenceSelect::Domain(k))?
    };

    let csv_path = PathBuf::from(format!("{}.csv", a.report.display()));
    let json_path = PathBuf::from(format!("{}.json", a.report.display()));
    let means_path = PathBuf::from(format!("{}_means.png", a.report.display()));
    let curves_path = PathBuf::from(format!("{}_curves.png", a.report.display()));
    if let Some(parent) = csv_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&csv_path, report.to_csv())?;
    std::fs::write(&json_path, report.to_json())?;
    plot_means(&report.mean(), &means_path)?;
    plot_curves(&report, &curves_path)?;
    Ok(vec![csv_path, json_path, means_path, curves_path])
}

fn cmd_predict(a: PredictArgs) -> Result<Vec<PathBuf>> {
    if a.domain.is_none() && a.zero_shot.is_none() {
        return Err(Error::Config("predict needs --domain or --zero-shot".into()));
    }
    let state = load_checkpoint(&a.ckpt)?;
    let model = &state.model;
    let image = load_image_tensor(&a.image)?;
    let select = if let Some(strategy) = a.zero_shot.as_deref() {
        InferenceSelect::ZeroShot {
            strategy: parse_strategy(strategy)?,
            specified: a.domain,
            trained: state.cursor.trained_domains(),
        }
    } else {
        InferenceSelect::Domain(a.domain.expect("checked above"))
    };
    let pred = predict(model, &image, &select)?;

    std::fs::create_dir_all(&a.out)?;
    let sem_path = a.out.join("semantic.png");
    let inst_path = a.out.join("instances.png");
    let overlay_path = a.out.join("overlay.png");
    let (h, w) = (pred.semantic.h, pred.semantic.w);
    let mut sem = ImageBuffer::<Luma<u8>, Vec<u8>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            sem.put_pixel(
                x as u32,
                y as u32,
                Luma([if pred.semantic.data[y * w + x] { 255 } else { 0 }]),
            );
        }
    }
    sem.save(&sem_path)?;
    save_instance_png(&pred.instances, &inst_path)?;
    save_overlay(&image, &pred.instances, &overlay_path)?;
    Ok(vec![sem_path, inst_path, overlay_path])
}

// ---- image helpers ----

/// Load an RGB PNG as a [3,H,W] tensor in [0,1].
pub fn load_image_tensor(path: &Path) -> Result<Tensor> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (h, w) = (h as usize, w as usize);
    let mut t = Tensor::zeros(vec![3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                t.data_mut()[c * h * w + y * w + x] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(t)
}

fn save_instance_png(map: &InstanceLabelMap, path: &Path) -> Result<()> {
    let mut out: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::new(map.w as u32, map.h as u32);
    for y in 0..map.h {
        for x in 0..map.w {
            out.put_pixel(x as u32, y as u32, Luma([map.labels[y * map.w + x] as u16]));
        }
    }
    out.save(path)?;
    Ok(())
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 60, 60],
    [60, 180, 75],
    [60, 120, 230],
    [240, 190, 40],
    [170, 60, 230],
    [60, 220, 220],
    [240, 120, 40],
    [230, 60, 170],
];

fn save_overlay(image: &Tensor, map: &InstanceLabelMap, path: &Path) -> Result<()> {
    let (_, h, w) = image.dims3();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = (image.data()[c * h * w + y * w + x] * 255.0).round() as u8;
            }
            let label = map.labels[y * w + x];
            if label > 0 {
                let color = PALETTE[(label as usize - 1) % PALETTE.len()];
                for c in 0..3 {
                    px[c] = ((px[c] as u16 + color[c] as u16) / 2) as u8;
                }
            }
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out.save(path)?;
    Ok(())
}

// ---- plotting ----

/// 3x5 pixel glyphs for the handful of characters the plots need.
fn glyph(ch: char) -> [u8; 5] {
    match ch {
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'J' => [0b111, 0b001, 0b001, 0b101, 0b010],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'Q' => [0b010, 0b101, 0b101, 0b011, 0b001],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => [0b000; 5],
    }
}

fn draw_text(img: &mut RgbImage, x0: i64, y0: i64, text: &str, color: [u8; 3]) {
    let mut cx = x0;
    for ch in text.chars() {
        let g = glyph(ch);
        for (ry, row) in g.iter().enumerate() {
            for rx in 0..3 {
                if row & (0b100 >> rx) != 0 {
                    for sy in 0..2 {
                        for sx in 0..2 {
                            let (px, py) =
                                (cx + (rx as i64) * 2 + sx, y0 + (ry as i64) * 2 + sy);
                            if px >= 0
                                && py >= 0
                                && (px as u32) < img.width()
                                && (py as u32) < img.height()
                            {
                                img.put_pixel(px as u32, py as u32, Rgb(color));
                            }
                        }
                    }
                }
            }
        }
        cx += 8;
    }
}

fn fill_rect(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, color: [u8; 3]) {
    for yy in y..(y + h).min(img.height()) {
        for xx in x..(x + w).min(img.width()) {
            img.put_pixel(xx, yy, Rgb(color));
        }
    }
}

/// Bar chart of the seven [0,1] metric means; HD is printed as text since it
/// lives on a pixel scale.
fn plot_means(mean: &MeanMetrics, path: &Path) -> Result<()> {
    let (w, h) = (520u32, 300u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let bars = [
        ("AJI", mean.aji),
        ("DQ", mean.dq),
        ("SQ", mean.sq),
        ("PQ", mean.pq),
        ("DICE", mean.dice),
        ("MIOU", mean.miou),
        ("F1", mean.f1),
    ];
    let plot_top = 20u32;
    let plot_bottom = h - 40;
    let plot_h = (plot_bottom - plot_top) as f64;
    // axis
    fill_rect(&mut img, 38, plot_top, 2, plot_bottom - plot_top, [0, 0, 0]);
    fill_rect(&mut img, 38, plot_bottom, w - 60, 2, [0, 0, 0]);
    for (frac, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1.0")] {
        let y = plot_bottom as f64 - frac * plot_h;
        fill_rect(&mut img, 34, y as u32, 6, 1, [0, 0, 0]);
        draw_text(&mut img, 2, y as i64 - 5, label, [0, 0, 0]);
    }
    let bw = 48u32;
    for (i, (label, value)) in bars.iter().enumerate() {
        let x = 50 + i as u32 * (bw + 16);
        let clamped = value.clamp(0.0, 1.0);
        let bh = (clamped * plot_h) as u32;
        let color = PALETTE[i % PALETTE.len()];
        fill_rect(&mut img, x, plot_bottom - bh, bw, bh, color);
        draw_text(&mut img, x as i64 + 4, plot_bottom as i64 + 8, label, [0, 0, 0]);
    }
    if let Some(hd) = mean.hd {
        // e.g. "HD 12.5" with only supported glyphs; digits come through fine
        let text = format!("HD {hd:.1}");
        draw_text(&mut img, 50, 4, &text, [0, 0, 0]);
    }
    img.save(path)?;
    Ok(())
}

/// Per-image Dice and AJI curves across the report rows.
fn plot_curves(report: &MetricsReport, path: &Path) -> Result<()> {
    let (w, h) = (520u32, 300u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let left = 40u32;
    let bottom = h - 30;
    let top = 20u32;
    fill_rect(&mut img, left, top, 2, bottom - top, [0, 0, 0]);
    fill_rect(&mut img, left, bottom, w - left - 20, 2, [0, 0, 0]);
    let n = report.rows.len().max(1);
    let step = (w - left - 30) as f64 / n as f64;
    let series = [
        ("DICE", PALETTE[2], report.rows.iter().map(|(_, m)| m.dice).collect::<Vec<_>>()),
        ("AJI", PALETTE[0], report.rows.iter().map(|(_, m)| m.aji).collect::<Vec<_>>()),
    ];
    for (si, (label, color, values)) in series.iter().enumerate() {
        let mut prev: Option<(i64, i64)> = None;
        for (i, v) in values.iter().enumerate() {
            let x = left as f64 + 5.0 + i as f64 * step;
            let y = bottom as f64 - v.clamp(0.0, 1.0) * (bottom - top) as f64;
            let (xi, yi) = (x as i64, y as i64);
            fill_rect(&mut img, xi.max(0) as u32, yi.max(0) as u32, 3, 3, *color);
            if let Some((px, py)) = prev {
                draw_line(&mut img, px, py, xi, yi, *color);
            }
            prev = Some((xi, yi));
        }
        draw_text(
            &mut img,
            (left + 10 + si as u32 * 70) as i64,
            4,
            label,
            *color,
        );
    }
    img.save(path)?;
    Ok(())
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 as f64 + t * (x1 - x0) as f64;
        let y = y0 as f64 + t * (y1 - y0) as f64;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code_for(&Error::Config("x".into())), 1);
        assert_eq!(exit_code_for(&Error::Shape("x".into())), 1);
        assert_eq!(exit_code_for(&Error::Training("x".into())), 2);
        assert_eq!(exit_code_for(&Error::Integrity("x".into())), 2);
        assert_eq!(exit_code_for(&Error::IncompatibleCheckpoint("x".into())), 2);
    }

    #[test]
    fn usage_error_exits_one() {
        // missing required --out
        let code = main_entry(["nuseg", "gen", "--specs", "nope.txt"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(main_entry(["nuseg", "--help"]), 0);
    }
}
