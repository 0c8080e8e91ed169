//! Turns a run directory's persisted results into tables and figures.
//! Nothing here evaluates a model.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use stitchlab_core::analysis::{CrossLayerGrid, DirectionMode, StitchingPlot};

use crate::error::{CliError, CliResult};
use crate::runner::{load_results, AlphaPlot, Results, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Png,
    MdTable,
}

pub const RENDER_DIR: &str = "render";

/// Renders every artifact of `run_dir` in `format`; returns the new files.
pub fn render(run_dir: &Path, format: Format) -> CliResult<Vec<PathBuf>> {
    let mut record = RunRecord::load(run_dir)?;
    let results = load_results(run_dir)?;
    let out_dir = run_dir.join(RENDER_DIR);
    fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
    let files: Vec<(String, Vec<u8>)> = match format {
        Format::Csv => csv_files(&results).into_iter().map(|(n, s)| (n, s.into_bytes())).collect(),
        Format::MdTable => vec![("report.md".to_string(), markdown(&results).into_bytes())],
        Format::Png => png_files(&results)?,
    };
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    record.refresh_manifest(run_dir)?;
    Ok(written)
}

fn plot_stem(p: &AlphaPlot) -> String {
    match p.alpha {
        Some(a) => format!("plot-alpha-{a}"),
        None => "plot".to_string(),
    }
}

fn grid_stem(g: &CrossLayerGrid) -> String {
    let mode = match g.mode {
        DirectionMode::Directional => "directional",
        DirectionMode::Averaged => "averaged",
    };
    format!("grid-{}-{mode}", g.objective.to_ascii_lowercase())
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Depth used for the baseline rows: the end network alone is stitching at
/// the input, the front network alone is stitching past the last tap.
fn baseline_depths(plot: &StitchingPlot) -> (usize, usize) {
    (0, plot.depths.iter().max().map_or(1, |d| d + 1))
}

pub fn plot_csv(plot: &StitchingPlot) -> String {
    let mut s = String::from("objective,depth,clean_acc,robust_acc,shortcut_acc,baseline\n");
    let (end_depth, front_depth) = baseline_depths(plot);
    let _ = writeln!(
        s,
        "end,{end_depth},{:.6},{},,true",
        plot.end_baseline.clean_acc,
        opt(plot.end_baseline.robust_acc)
    );
    for c in &plot.curves {
        for (n, d) in plot.depths.iter().enumerate() {
            let robust = c.robust_acc.as_ref().map(|r| r[n]);
            let shortcut = c.shortcut_acc.as_ref().map(|r| r[n]);
            let _ = writeln!(s, "{},{d},{:.6},{},{},false", c.objective, c.clean_acc[n], opt(robust), opt(shortcut));
        }
    }
    let _ = writeln!(
        s,
        "front,{front_depth},{:.6},{},,true",
        plot.front_baseline.clean_acc,
        opt(plot.front_baseline.robust_acc)
    );
    s
}

pub fn grid_csv(g: &CrossLayerGrid) -> String {
    let mut s = String::from("front_tap,end_tap,accuracy\n");
    for (a, row) in g.values.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            let _ = writeln!(s, "{},{},{v:.6}", g.rows[a], g.cols[b]);
        }
    }
    s
}

fn csv_files(r: &Results) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for p in &r.plots {
        out.push((format!("{}.csv", plot_stem(p)), plot_csv(&p.plot)));
    }
    for g in &r.grids {
        out.push((format!("{}.csv", grid_stem(g)), grid_csv(g)));
    }
    if !r.self_accuracy.is_empty() {
        let mut s = String::from("objective,directional,averaged\n");
        for row in &r.self_accuracy {
            let _ = writeln!(s, "{},{:.6},{:.6}", row.objective, row.directional, row.averaged);
        }
        out.push(("self_accuracy.csv".into(), s));
    }
    if !r.subset_curves.is_empty() {
        let mut s = String::from("objective,class_count,clean_acc\n");
        for c in &r.subset_curves {
            for (k, v) in c.class_counts.iter().zip(&c.clean_acc) {
                let _ = writeln!(s, "{},{k},{v:.6}", c.objective);
            }
        }
        out.push(("subset_classes.csv".into(), s));
    }
    if let Some(p) = &r.probe {
        let mut s = String::from("tap,fula_clean_acc,fula_robust_acc,cka\n");
        for (n, t) in p.taps.iter().enumerate() {
            let robust = p.fula_robust_acc.as_ref().map(|v| v[n]);
            let _ = writeln!(s, "{t},{:.6},{},{:.6}", p.fula_clean_acc[n], opt(robust), p.cka[n]);
        }
        out.push(("probe.csv".into(), s));
    }
    let mut s = String::from("group,index,i,j,objective,alpha,class_count,init_rank,loss,clean_acc,robust_acc,shortcut_acc\n");
    for j in &r.jobs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{},{}",
            j.group,
            j.index,
            j.i,
            j.j,
            j.objective,
            j.alpha.map(|a| a.to_string()).unwrap_or_default(),
            j.class_count.map(|c| c.to_string()).unwrap_or_default(),
            j.init_rank,
            j.last.loss,
            j.last.clean_acc,
            opt(j.last.robust_acc),
            opt(j.last.shortcut_acc)
        );
    }
    out.push(("jobs.csv".into(), s));
    out
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn pct_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), pct)
}

/// Markdown report; Self-Accuracy cells read `directional (averaged)`.
pub fn markdown(r: &Results) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {} run `{}`\n", r.experiment.as_str(), &r.config_hash[..12]);
    s.push_str("## Networks\n\n| role | arch | width | clean % | robust % |\n|---|---|---|---|---|\n");
    for n in &r.nets {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            n.role,
            n.config.arch.as_str(),
            n.config.width,
            pct(n.baseline.clean_acc),
            pct_opt(n.baseline.robust_acc)
        );
    }
    for p in &r.plots {
        let title = match p.alpha {
            Some(a) => format!("Stitching plot, alpha = {a}"),
            None => "Stitching plot".to_string(),
        };
        let _ = writeln!(s, "\n## {title}\n");
        let plot = &p.plot;
        s.push_str("| objective |");
        for d in &plot.depths {
            let _ = write!(s, " {d} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(plot.depths.len()));
        s.push('\n');
        for c in &plot.curves {
            let _ = write!(s, "| {} clean |", c.objective);
            for v in &c.clean_acc {
                let _ = write!(s, " {} |", pct(*v));
            }
            s.push('\n');
            for (name, series) in [("robust", &c.robust_acc), ("shortcut", &c.shortcut_acc)] {
                if let Some(series) = series {
                    let _ = write!(s, "| {} {name} |", c.objective);
                    for v in series {
                        let _ = write!(s, " {} |", pct(*v));
                    }
                    s.push('\n');
                }
            }
        }
        let _ = writeln!(
            s,
            "\nBaselines: front {} % clean ({} % robust), end {} % clean ({} % robust).",
            pct(plot.front_baseline.clean_acc),
            pct_opt(plot.front_baseline.robust_acc),
            pct(plot.end_baseline.clean_acc),
            pct_opt(plot.end_baseline.robust_acc)
        );
    }
    for g in &r.grids {
        let _ = writeln!(s, "\n## Cross-layer grid: {} ({})\n", g.objective, grid_stem(g).rsplit('-').next().unwrap_or(""));
        s.push_str("| i \\ j |");
        for c in &g.cols {
            let _ = write!(s, " {c} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(g.cols.len()));
        s.push('\n');
        for (a, row) in g.values.iter().enumerate() {
            let _ = write!(s, "| {} |", g.rows[a]);
            for v in row {
                let _ = write!(s, " {} |", pct(*v));
            }
            s.push('\n');
        }
    }
    if !r.self_accuracy.is_empty() {
        s.push_str("\n## Self-Accuracy\n\nDirectional value, averaged (non-directional) value in parentheses.\n\n| objective | Self-Accuracy |\n|---|---|\n");
        for row in &r.self_accuracy {
            let _ = writeln!(s, "| {} | {:.2} ({:.2}) |", row.objective, row.directional, row.averaged);
        }
    }
    if !r.subset_curves.is_empty() {
        s.push_str("\n## Class subsets\n\n| objective | classes | clean % |\n|---|---|---|\n");
        for c in &r.subset_curves {
            for (k, v) in c.class_counts.iter().zip(&c.clean_acc) {
                let _ = writeln!(s, "| {} | {k} | {} |", c.objective, pct(*v));
            }
        }
    }
    if let Some(p) = &r.probe {
        s.push_str("\n## Penultimate-layer probe\n\n| tap | FuLA clean % | FuLA robust % | CKA |\n|---|---|---|---|\n");
        for (n, t) in p.taps.iter().enumerate() {
            let robust = p.fula_robust_acc.as_ref().map(|v| v[n]);
            let _ = writeln!(s, "| {t} | {} | {} | {:.3} |", pct(p.fula_clean_acc[n]), pct_opt(robust), p.cka[n]);
        }
    }
    s
}

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];
const W: u32 = 480;
const H: u32 = 320;
const MARGIN: i64 = 24;

fn encode_png(img: &RgbImage) -> CliResult<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| CliError::Other(format!("png encoding failed: {e}")))?;
    Ok(bytes)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, dashed: bool) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        if dashed && (s / 4) % 2 == 1 {
            continue;
        }
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            put(img, x + dx, y + dy, c);
        }
    }
}

/// Line chart of clean (solid) and robust (dashed) accuracy over depth,
/// with both baselines as end points. The vertical axis spans [0, 1].
pub fn plot_png(plot: &StitchingPlot) -> CliResult<Vec<u8>> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (lo, hi) = baseline_depths(plot);
    let span = (hi - lo).max(1) as i64;
    let to_px = |d: usize, v: f64| {
        let x = MARGIN + (d - lo) as i64 * (W as i64 - 2 * MARGIN) / span;
        let y = H as i64 - MARGIN - (v.clamp(0.0, 1.0) * (H as i64 - 2 * MARGIN) as f64).round() as i64;
        (x, y)
    };
    let axis = Rgb([0, 0, 0]);
    line(&mut img, to_px(lo, 0.0), to_px(hi, 0.0), axis, false);
    line(&mut img, to_px(lo, 0.0), to_px(lo, 1.0), axis, false);
    for (n, c) in plot.curves.iter().enumerate() {
        let color = Rgb(PALETTE[n % PALETTE.len()]);
        let series = [(Some(&c.clean_acc), plot.end_baseline.clean_acc, plot.front_baseline.clean_acc, false)];
        let robust = c
            .robust_acc
            .as_ref()
            .map(|r| (Some(r), plot.end_baseline.robust_acc.unwrap_or(0.0), plot.front_baseline.robust_acc.unwrap_or(0.0), true));
        for (values, start, stop, dashed) in series.into_iter().chain(robust) {
            let values = values.expect("series present");
            let mut pts = vec![to_px(lo, start)];
            pts.extend(plot.depths.iter().zip(values).map(|(&d, &v)| to_px(d, v)));
            pts.push(to_px(hi, stop));
            for w in pts.windows(2) {
                line(&mut img, w[0], w[1], color, dashed);
            }
        }
    }
    encode_png(&img)
}

/// Heat map, one square per cell, dark for low accuracy.
pub fn grid_png(g: &CrossLayerGrid) -> CliResult<Vec<u8>> {
    let cell = 32u32;
    let mut img = RgbImage::new(cell * g.cols.len() as u32, cell * g.rows.len() as u32);
    for (a, row) in g.values.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            let t = v.clamp(0.0, 1.0);
            let c = Rgb([(255.0 * t) as u8, (200.0 * t) as u8, (80.0 + 100.0 * (1.0 - t)) as u8]);
            for y in 0..cell {
                for x in 0..cell {
                    img.put_pixel(b as u32 * cell + x, a as u32 * cell + y, c);
                }
            }
        }
    }
    encode_png(&img)
}

fn png_files(r: &Results) -> CliResult<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for p in &r.plots {
        out.push((format!("{}.png", plot_stem(p)), plot_png(&p.plot)?));
    }
    for g in &r.grids {
        out.push((format!("{}.png", grid_stem(g)), grid_png(g)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use stitchlab_core::analysis::{Baseline, PlotCurve};

    fn plot() -> StitchingPlot {
        StitchingPlot {
            depths: vec![1, 2, 3],
            curves: vec![PlotCurve {
                objective: "TLM".into(),
                clean_acc: vec![0.9, 0.8, 0.7],
                robust_acc: Some(vec![0.1, 0.2, 0.3]),
                shortcut_acc: None,
            }],
            front_baseline: Baseline {
                clean_acc: 0.95,
                robust_acc: Some(0.0),
            },
            end_baseline: Baseline {
                clean_acc: 0.93,
                robust_acc: None,
            },
        }
    }

    #[test]
    fn plot_csv_flags_baselines() {
        let csv = plot_csv(&plot());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 2);
        assert_eq!(lines.iter().filter(|l| l.ends_with(",true")).count(), 2);
        assert!(lines[1].starts_with("end,0,"));
        assert!(lines[5].starts_with("front,4,"));
    }

    #[test]
    fn grid_csv_has_one_row_per_cell() {
        let taps: Vec<usize> = (1..=9).collect();
        let g = CrossLayerGrid::new("Hint", taps.clone(), taps, vec![vec![0.5; 9]; 9]).unwrap();
        assert_eq!(grid_csv(&g).lines().count(), 82);
    }

    #[test]
    fn pngs_decode() {
        let bytes = plot_png(&plot()).unwrap();
        let img = image::load_from_memory(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (W, H));
    }
}
