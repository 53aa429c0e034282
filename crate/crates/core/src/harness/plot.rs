//! SVG figures: predicted-versus-true scatter and power-spectrum overlays.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::harness::eval::{read_video_csv, VideoResult};
use crate::signal::{compute_psd, Band, PulseSignal};

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

pub fn scatter_plot(path: &Path, rows: &[VideoResult]) -> Result<()> {
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.pred_hr.map(|p| (r.gt_hr, p))).collect();
    if pts.is_empty() {
        return Err(Error::Empty("scatter points"));
    }
    let lo = pts.iter().flat_map(|p| [p.0, p.1]).fold(f64::INFINITY, f64::min) - 5.0;
    let hi = pts.iter().flat_map(|p| [p.0, p.1]).fold(f64::NEG_INFINITY, f64::max) + 5.0;
    let root = SVGBackend::new(path, (640, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Predicted vs ground-truth HR", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(lo..hi, lo..hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("ground truth (bpm)")
        .y_desc("predicted (bpm)")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new([(lo, lo), (hi, hi)], &BLACK))
        .map_err(plot_err)?;
    chart
        .draw_series(pts.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Peak-normalised spectra of a prediction and its reference.
pub fn psd_plot(path: &Path, pred: &PulseSignal, gt: &PulseSignal, band: Band) -> Result<()> {
    let series = [(pred, &RED, "predicted"), (gt, &BLACK, "ground truth")];
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Power spectral density", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(band.low_bpm..band.high_bpm, 0.0..1.05)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("frequency (bpm)")
        .y_desc("normalised power")
        .draw()
        .map_err(plot_err)?;
    for (sig, color, label) in series {
        let psd = compute_psd(sig, band)?;
        let peak = psd.power.iter().cloned().fold(0.0, f64::max);
        let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
        let color = *color;
        chart
            .draw_series(LineSeries::new(
                psd.freqs_bpm.iter().zip(&psd.power).map(|(f, p)| (*f, p * scale)),
                color,
            ))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Scatter from a per-video CSV, plus a spectrum figure for the first video
/// whose signals sit in the `signals/` directory beside it.
pub fn plot_from_results(csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_video_csv(csv)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let scatter = out_dir.join("scatter.svg");
    scatter_plot(&scatter, &rows)?;
    written.push(scatter);
    let sig_dir = csv.parent().unwrap_or(Path::new(".")).join("signals");
    if let Some(row) = rows.iter().find(|r| sig_dir.join(format!("{}.pred.txt", r.id)).exists()) {
        let pred = PulseSignal::read_from(&sig_dir.join(format!("{}.pred.txt", row.id)))?;
        let gt = PulseSignal::read_from(&sig_dir.join(format!("{}.gt.txt", row.id)))?;
        let p = out_dir.join(format!("psd_{}.svg", row.id));
        psd_plot(&p, &pred, &gt, Band::default())?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::eval::{write_signals, write_video_csv};

    #[test]
    fn writes_both_figures() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            VideoResult { id: "a".into(), gt_hr: 70.0, pred_hr: Some(72.0) },
            VideoResult { id: "b".into(), gt_hr: 90.0, pred_hr: None },
            VideoResult { id: "c".into(), gt_hr: 110.0, pred_hr: Some(108.0) },
        ];
        let csv = dir.path().join("videos.csv");
        write_video_csv(&csv, &rows).unwrap();
        let sig = |hz: f64| {
            PulseSignal::new((0..160).map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / 16.0).sin()).collect(), 16.0).unwrap()
        };
        write_signals(&dir.path().join("signals"), &[("a".into(), sig(1.2), sig(1.17))]).unwrap();
        let out = plot_from_results(&csv, &dir.path().join("plots")).unwrap();
        assert_eq!(out.len(), 2);
        for p in out {
            let text = std::fs::read_to_string(&p).unwrap();
            assert!(text.contains("<svg"));
        }
    }
}
