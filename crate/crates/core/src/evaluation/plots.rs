//! Figures rendered from gain records, as SVG or PNG.

use std::path::{Path, PathBuf};
use plotters::prelude::*;

use super::{summarize, GainRecord, Method, SummaryRow};
use crate::error::{Error, Result};

const SIZE: (u32, u32) = (720, 480);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlotFormat {
    #[default]
    Svg,
    Png,
}

impl PlotFormat {
    pub fn extension(self) -> &'static str {
        match self {
            PlotFormat::Svg => "svg",
            PlotFormat::Png => "png",
        }
    }
}

/// Rasterizes an SVG document; text uses whatever system fonts are installed.
fn svg_to_png(svg: &str, path: &Path) -> Result<()> {
    use resvg::{tiny_skia, usvg};
    let mut opt = usvg::Options::default();
    let db = opt.fontdb_mut();
    db.load_system_fonts();
    let family = |f: &resvg::usvg::fontdb::FaceInfo| f.families.first().map(|(n, _)| n.clone());
    let sans = db
        .faces()
        .find(|f| family(f).is_some_and(|n| n.contains("Sans") && !n.contains("Mono")))
        .or_else(|| db.faces().next())
        .and_then(family);
    if let Some(name) = sans {
        db.set_sans_serif_family(name);
    }
    let tree = usvg::Tree::from_str(svg, &opt).map_err(plot_err)?;
    let size = tree.size().to_int_size();
    let mut pixmap = tiny_skia::Pixmap::new(size.width(), size.height())
        .ok_or_else(|| Error::Plot("empty raster size".into()))?;
    pixmap.fill(tiny_skia::Color::WHITE);
    resvg::render(&tree, tiny_skia::Transform::default(), &mut pixmap.as_mut());
    pixmap.save_png(path).map_err(plot_err)
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    let pad = ((y1 - y0) * 0.1).max(0.5);
    ((x0, x1), (y0 - pad, y1 + pad))
}

struct Chart<'a> {
    title: &'a str,
    xlabel: &'a str,
    ylabel: &'a str,
    series: &'a [Series],
    markers: bool,
}

fn line_chart(path: &Path, format: PlotFormat, chart: &Chart) -> Result<()> {
    let mut svg = String::new();
    draw(&mut svg, chart)?;
    match format {
        PlotFormat::Svg => Ok(std::fs::write(path, svg)?),
        PlotFormat::Png => svg_to_png(&svg, path),
    }
}

fn draw(buf: &mut String, c: &Chart) -> Result<()> {
    let Chart { title, xlabel, ylabel, series, markers } = *c;
    let (xr, yr) = bounds(series);
    let root = SVGBackend::with_string(buf, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(xlabel).y_desc(ylabel).draw().map_err(plot_err)?;
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        if markers {
            chart
                .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?;
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn label(r: &SummaryRow) -> String {
    match r.method {
        Method::Bbs => format!("BBS M={}", r.m),
        m => m.tag().to_string(),
    }
}

/// Median gain vs Q for noiseless prompts, one line per method and M.
/// Q-independent methods are drawn flat across the Q range.
fn gain_vs_q(summary: &[SummaryRow]) -> Vec<Series> {
    let noiseless: Vec<&SummaryRow> = summary.iter().filter(|r| r.snr_db.is_none()).collect();
    let mut qs: Vec<usize> = noiseless
        .iter()
        .filter(|r| matches!(r.method, Method::Bbs | Method::DftProbingBest | Method::Discriminative))
        .map(|r| r.q)
        .collect();
    qs.sort_unstable();
    qs.dedup();
    let mut out: Vec<Series> = Vec::new();
    for r in &noiseless {
        let lbl = label(r);
        let pts: Vec<(f64, f64)> = match r.method {
            Method::DftExhaustive | Method::Mrt => qs.iter().map(|&q| (q as f64, r.median_norm_gain_db)).collect(),
            _ => vec![(r.q as f64, r.median_norm_gain_db)],
        };
        match out.iter_mut().find(|s| s.label == lbl) {
            Some(s) => s.points.extend(pts),
            None => out.push(Series { label: lbl, points: pts }),
        }
    }
    for s in &mut out {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out.retain(|s| !s.points.is_empty());
    out
}

/// Median gain vs SNR, one line per (method, Q, M).
fn gain_vs_snr(summary: &[SummaryRow]) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in summary {
        let Some(snr) = r.snr_db else { continue };
        let lbl = format!("{} Q={}", label(r), r.q);
        match out.iter_mut().find(|s| s.label == lbl) {
            Some(s) => s.points.push((snr, r.median_norm_gain_db)),
            None => out.push(Series { label: lbl, points: vec![(snr, r.median_norm_gain_db)] }),
        }
    }
    for s in &mut out {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

/// Writes the figure analogues for `records` into `out_dir` and returns their paths.
pub fn emit_plots(records: &[GainRecord], out_dir: &Path, format: PlotFormat) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Format { field: "csv".into(), reason: "no gain records to plot".into() });
    }
    std::fs::create_dir_all(out_dir)?;
    let summary = summarize(records);
    let mut written = Vec::new();
    let q_series = gain_vs_q(&summary);
    if !q_series.is_empty() {
        let p = out_dir.join(format!("gain_vs_q.{}", format.extension()));
        let c = Chart { title: "Median normalized gain vs Q", xlabel: "Q", ylabel: "gain [dB]", series: &q_series, markers: true };
        line_chart(&p, format, &c)?;
        written.push(p);
    }
    let snr_series = gain_vs_snr(&summary);
    if !snr_series.is_empty() {
        let p = out_dir.join(format!("gain_vs_snr.{}", format.extension()));
        let c = Chart {
            title: "Median normalized gain vs SNR",
            xlabel: "SNR [dB]",
            ylabel: "gain [dB]",
            series: &snr_series,
            markers: true,
        };
        line_chart(&p, format, &c)?;
        written.push(p);
    }
    Ok(written)
}

/// Linear-scale beam pattern plot; one line per `(label, pattern)`.
pub fn plot_beam_patterns(
    path: &Path,
    format: PlotFormat,
    title: &str,
    patterns: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    if patterns.is_empty() {
        return Err(Error::Format { field: "patterns".into(), reason: "nothing to plot".into() });
    }
    let series: Vec<Series> = patterns.iter().map(|(l, p)| Series { label: l.clone(), points: p.clone() }).collect();
    let c = Chart { title, xlabel: "azimuth [deg]", ylabel: "|a^H w|^2", series: &series, markers: false };
    line_chart(path, format, &c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: Method, q: usize, m: usize, snr: Option<f64>, g: f64) -> GainRecord {
        GainRecord { user_id: 0, method, q, m, snr_db: snr, overhead: q + m, gain_db: g, norm_gain_db: g, seed: 1 }
    }

    #[test]
    fn empty_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plots(&[], dir.path(), PlotFormat::Svg).is_err());
    }

    #[test]
    fn same_input_same_bytes() {
        let recs = vec![
            rec(Method::Bbs, 4, 5, None, -2.0),
            rec(Method::Bbs, 8, 5, None, -1.0),
            rec(Method::DftExhaustive, 32, 0, None, -0.9),
            rec(Method::Bbs, 8, 5, Some(10.0), -3.0),
            rec(Method::Bbs, 8, 5, Some(30.0), -1.5),
        ];
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fa = emit_plots(&recs, a.path(), PlotFormat::Svg).unwrap();
        let fb = emit_plots(&recs, b.path(), PlotFormat::Svg).unwrap();
        assert_eq!(fa.len(), 2);
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }
}
