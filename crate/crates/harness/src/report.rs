//! Plots and summary tables over finished runs.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{anyhow, ensure, Context, Result};
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use crate::train::RunRecord;

const FONT_PATHS: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
];
const SIZE: (u32, u32) = (900, 600);

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub loss_curves: PathBuf,
    pub miou_vs_params: PathBuf,
    pub per_class_f1: PathBuf,
    pub snapshots_csv: PathBuf,
}

/// Registers a system sans-serif font once. Without one the plots carry no text.
fn text_available() -> bool {
    static OK: OnceLock<bool> = OnceLock::new();
    *OK.get_or_init(|| {
        let custom = std::env::var("DRD_FONT").ok();
        let candidates = custom.iter().map(String::as_str).chain(FONT_PATHS);
        for p in candidates {
            if let Ok(bytes) = std::fs::read(p) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font("sans-serif", FontStyle::Normal, leaked).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

fn color(i: usize) -> RGBColor {
    let c = Palette99::pick(i).to_rgba();
    RGBColor(c.0, c.1, c.2)
}

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}

fn save_png(buf: &[u8], path: &Path) -> Result<()> {
    image::save_buffer(path, buf, SIZE.0, SIZE.1, image::ColorType::Rgb8)
        .with_context(|| format!("writing {}", path.display()))
}

fn run_label(r: &RunRecord, i: usize) -> String {
    format!("{i}:{}", r.name)
}

fn loss_curves(records: &[RunRecord], path: &Path, text: bool) -> Result<()> {
    let mut buf = vec![0u8; (SIZE.0 * SIZE.1 * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let max_step = records.iter().flat_map(|r| r.losses.last()).map(|l| l.step).max().unwrap_or(0).max(1);
        let finite = records
            .iter()
            .flat_map(|r| r.losses.iter().map(|l| l.losses.total))
            .filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
        let pad = 0.05 * (hi - lo);
        let mut b = ChartBuilder::on(&root);
        b.margin(15);
        if text {
            b.caption("total loss", ("sans-serif", 24)).x_label_area_size(40).y_label_area_size(60);
        }
        let mut chart = b
            .build_cartesian_2d(0f64..max_step as f64, (lo - pad)..(hi + pad))
            .map_err(plot_err)?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc("step").y_desc("loss");
        } else {
            mesh.disable_x_axis().disable_y_axis();
        }
        mesh.draw().map_err(plot_err)?;
        for (i, r) in records.iter().enumerate() {
            let c = color(i);
            let series = chart
                .draw_series(LineSeries::new(
                    r.losses
                        .iter()
                        .filter(|l| l.losses.total.is_finite())
                        .map(|l| (l.step as f64, l.losses.total)),
                    c.stroke_width(2),
                ))
                .map_err(plot_err)?;
            if text {
                series
                    .label(run_label(r, i))
                    .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], c.stroke_width(2)));
            }
        }
        if text {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    save_png(&buf, path)
}

fn miou_vs_params(records: &[RunRecord], path: &Path, text: bool) -> Result<()> {
    let mut buf = vec![0u8; (SIZE.0 * SIZE.1 * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let xmax = records.iter().map(|r| r.report.params_millions).fold(0.0, f64::max).max(1e-3) * 1.15;
        let mut b = ChartBuilder::on(&root);
        b.margin(15);
        if text {
            b.caption("mIoU vs parameters", ("sans-serif", 24)).x_label_area_size(40).y_label_area_size(60);
        }
        let mut chart = b.build_cartesian_2d(0f64..xmax, 0f64..100f64).map_err(plot_err)?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc("parameters (M)").y_desc("mIoU (%)");
        } else {
            mesh.disable_x_axis().disable_y_axis();
        }
        mesh.draw().map_err(plot_err)?;
        for (i, r) in records.iter().enumerate() {
            let p = (r.report.params_millions, 100.0 * r.final_metrics.miou);
            let c = color(i);
            chart.draw_series([Circle::new(p, 6, c.filled())]).map_err(plot_err)?;
            if text {
                chart
                    .draw_series([Text::new(run_label(r, i), p, ("sans-serif", 14).into_font())])
                    .map_err(plot_err)?;
            }
        }
        root.present().map_err(plot_err)?;
    }
    save_png(&buf, path)
}

fn per_class_f1(records: &[RunRecord], path: &Path, text: bool) -> Result<()> {
    let k = records.iter().map(|r| r.final_metrics.per_class_f1.len()).max().unwrap_or(0).max(1);
    let n = records.len().max(1);
    let mut buf = vec![0u8; (SIZE.0 * SIZE.1 * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut b = ChartBuilder::on(&root);
        b.margin(15);
        if text {
            b.caption("per-class F1", ("sans-serif", 24)).x_label_area_size(40).y_label_area_size(60);
        }
        let mut chart = b.build_cartesian_2d(0f64..k as f64, 0f64..1f64).map_err(plot_err)?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc("class").y_desc("F1").x_labels(k + 1);
        } else {
            mesh.disable_x_axis().disable_y_axis();
        }
        mesh.draw().map_err(plot_err)?;
        let width = 0.8 / n as f64;
        for (i, r) in records.iter().enumerate() {
            let c = color(i);
            let bars = r.final_metrics.per_class_f1.iter().enumerate().map(|(cls, &f)| {
                let x0 = cls as f64 + 0.1 + i as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width, f.clamp(0.0, 1.0))], c.filled())
            });
            let series = chart.draw_series(bars).map_err(plot_err)?;
            if text {
                series
                    .label(run_label(r, i))
                    .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], c.filled()));
            }
        }
        if text {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    save_png(&buf, path)
}

fn snapshots_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["run", "name", "kind", "seed", "params_millions", "step", "miou", "mean_f1", "oa"])?;
    for (i, r) in records.iter().enumerate() {
        let kind = serde_json::to_value(r.kind)?.as_str().unwrap_or_default().to_string();
        for s in &r.snapshots {
            w.write_record([
                i.to_string(),
                r.name.clone(),
                kind.clone(),
                r.config.seed.to_string(),
                format!("{:.6}", r.report.params_millions),
                s.step.to_string(),
                format!("{:.6}", s.miou),
                format!("{:.6}", s.mean_f1),
                format!("{:.6}", s.oa),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes loss curves, the mIoU/parameter scatter, per-class F1 bars and a
/// snapshot table for `records` into `out_dir`.
pub fn plot_report(records: &[RunRecord], out_dir: &Path) -> Result<ReportFiles> {
    ensure!(!records.is_empty(), "no run records to plot");
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let text = text_available();
    let files = ReportFiles {
        loss_curves: out_dir.join("loss_curves.png"),
        miou_vs_params: out_dir.join("miou_vs_params.png"),
        per_class_f1: out_dir.join("per_class_f1.png"),
        snapshots_csv: out_dir.join("snapshots.csv"),
    };
    loss_curves(records, &files.loss_curves, text)?;
    miou_vs_params(records, &files.miou_vs_params, text)?;
    per_class_f1(records, &files.per_class_f1, text)?;
    snapshots_csv(records, &files.snapshots_csv)?;
    Ok(files)
}
