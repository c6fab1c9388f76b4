//! PNG overlays of explanation masks and line charts of sweep tables.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use confex::conformal::{mask_file_name, read_mask_records};
use confex::evaluation::{read_sweep_csv, SweepRow};
use confex::tensor::read_tensor;
use confex::{ImageTensor, PixelMask};
use image::imageops::{resize, FilterType};
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::config::RunConfig;
use crate::exit::{data, usage, CliResult};
use crate::pipeline::{open_manifest, MASKS_DIR, SWEEP_FILE};

const GRAY: Rgb<u8> = Rgb([128, 128, 128]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const LIGHT: Rgb<u8> = Rgb([200, 200, 200]);

/// Line colors for pixelwise, superpixel, scaled, summed.
pub const KIND_COLORS: [(&str, Rgb<u8>); 4] = [
    ("pixelwise", Rgb([31, 119, 180])),
    ("superpixel", Rgb([255, 127, 14])),
    ("scaled", Rgb([44, 160, 44])),
    ("summed", Rgb([214, 39, 40])),
];

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    /// Instances to render; all explained instances when omitted.
    #[arg(long = "instance")]
    pub instances: Vec<String>,
    /// Draw size and fidelity charts from the sweep table instead.
    #[arg(long)]
    pub sweep: bool,
    /// Integer upscaling factor for overlays (default: fit 256 px).
    #[arg(long)]
    pub scale: Option<u32>,
}

pub fn caption(size_fraction: f64) -> String {
    format!("S_E size: {:.1}%", 100.0 * size_fraction)
}

/// Kept pixels show the image (min-max rescaled), dropped pixels are gray.
pub fn overlay(img: &ImageTensor, keep: &PixelMask) -> RgbImage {
    let (c, h, w) = img.dims();
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let level = |ch: usize, p: usize| (((img.at(ch, p) - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        if !keep.get(p) {
            GRAY
        } else if c >= 3 {
            Rgb([level(0, p), level(1, p), level(2, p)])
        } else {
            let v = level(0, p);
            Rgb([v, v, v])
        }
    })
}

fn save_png(img: &RgbImage, path: &Path) -> CliResult<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| data(format!("{}: {e}", path.display())))
}

pub fn render_masks(cfg: &RunConfig, args: &RenderArgs) -> CliResult<Vec<String>> {
    let manifest = open_manifest(cfg)?;
    let mask_dir = cfg.out.join(MASKS_DIR);
    let meta = mask_dir.join("masks.jsonl");
    if !meta.is_file() {
        return Err(usage(format!("{} not found; run `confex explain` first", meta.display())));
    }
    let records = read_mask_records(&meta)?;
    let wanted: Vec<_> = if args.instances.is_empty() {
        records.iter().collect()
    } else {
        args.instances
            .iter()
            .map(|id| {
                records
                    .iter()
                    .find(|r| &r.instance_id == id)
                    .ok_or_else(|| usage(format!("instance {id:?} has no explanation mask")))
            })
            .collect::<CliResult<_>>()?
    };
    let out_dir = cfg.out.join("render");
    fs::create_dir_all(&out_dir).map_err(|e| data(format!("{}: {e}", out_dir.display())))?;
    let mut lines = Vec::new();
    for rec in wanted {
        let item = manifest
            .items
            .iter()
            .find(|it| it.instance_id == rec.instance_id)
            .ok_or_else(|| data(format!("instance {:?} is not in the manifest", rec.instance_id)))?;
        let img: ImageTensor = read_tensor(manifest.resolve(&item.image_path))?;
        let keep: PixelMask = read_tensor(mask_dir.join(mask_file_name(&rec.instance_id)))?;
        let small = overlay(&img, &keep);
        let scale = args
            .scale
            .unwrap_or_else(|| (256 / small.width().max(small.height())).max(1));
        let big = resize(&small, small.width() * scale, small.height() * scale, FilterType::Nearest);
        let png = out_dir.join(mask_file_name(&rec.instance_id).replace(".mask.cfxt", ".png"));
        save_png(&big, &png)?;
        lines.push(format!("{}: {} -> {}", rec.instance_id, caption(keep.fraction()), png.display()));
    }
    let captions: String = lines.iter().map(|l| format!("{l}\n")).collect();
    fs::write(out_dir.join("captions.txt"), captions).map_err(|e| data(e.to_string()))?;
    Ok(lines)
}

const CHART_W: u32 = 480;
const CHART_H: u32 = 320;
const MARGIN: u32 = 40;

struct Axes {
    x0: f64,
    x1: f64,
}

impl Axes {
    fn px(&self, x: f64, y: f64) -> (f32, f32) {
        let span = if self.x1 > self.x0 { self.x1 - self.x0 } else { 1.0 };
        let fx = (x - self.x0) / span;
        let plot_w = (CHART_W - 2 * MARGIN) as f64;
        let plot_h = (CHART_H - 2 * MARGIN) as f64;
        (
            (MARGIN as f64 + fx * plot_w) as f32,
            (CHART_H - MARGIN) as f32 - (y.clamp(0.0, 1.0) * plot_h) as f32,
        )
    }
}

/// One line per kind of `value` against confidence `1 - eps`, y in [0, 1].
fn line_chart(rows: &[SweepRow], value: impl Fn(&SweepRow) -> f64, diagonal: bool) -> RgbImage {
    let mut img = RgbImage::from_pixel(CHART_W, CHART_H, Rgb([255, 255, 255]));
    let conf: Vec<f64> = rows.iter().map(|r| 1.0 - r.epsilon).collect();
    let axes = Axes {
        x0: conf.iter().copied().fold(f64::INFINITY, f64::min),
        x1: conf.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    for i in 1..=4 {
        let (_, y) = axes.px(axes.x0, i as f64 / 4.0);
        draw_line_segment_mut(&mut img, (MARGIN as f32, y), ((CHART_W - MARGIN) as f32, y), LIGHT);
    }
    draw_hollow_rect_mut(
        &mut img,
        Rect::at(MARGIN as i32, MARGIN as i32).of_size(CHART_W - 2 * MARGIN, CHART_H - 2 * MARGIN),
        BLACK,
    );
    if diagonal {
        draw_line_segment_mut(&mut img, axes.px(axes.x0, axes.x0), axes.px(axes.x1, axes.x1), GRAY);
    }
    for (kind, color) in KIND_COLORS {
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| (1.0 - r.epsilon, value(r)))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pts.windows(2) {
            draw_line_segment_mut(&mut img, axes.px(w[0].0, w[0].1), axes.px(w[1].0, w[1].1), color);
        }
        for (x, y) in &pts {
            let (cx, cy) = axes.px(*x, *y);
            draw_filled_rect_mut(&mut img, Rect::at(cx as i32 - 2, cy as i32 - 2).of_size(5, 5), color);
        }
    }
    img
}

pub fn render_sweep(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let csv = cfg.out.join(SWEEP_FILE);
    if !csv.is_file() {
        return Err(usage(format!("{} not found; run `confex evaluate --sweep` first", csv.display())));
    }
    let rows = read_sweep_csv(&csv)?;
    if rows.is_empty() {
        return Err(data(format!("{} has no rows", csv.display())));
    }
    let out_dir = cfg.out.join("render");
    fs::create_dir_all(&out_dir).map_err(|e| data(format!("{}: {e}", out_dir.display())))?;
    let size = out_dir.join("sweep_size.png");
    save_png(&line_chart(&rows, |r| r.mean_size, false), &size)?;
    let fidelity = out_dir.join("sweep_fidelity.png");
    save_png(&line_chart(&rows, |r| r.fidelity, true), &fidelity)?;
    Ok(vec![size, fidelity])
}
