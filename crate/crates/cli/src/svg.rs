//! Per-channel MAE/PSNR line chart as a small self-contained SVG. The
//! polylines carry ids so tests (and scripts) can parse the plotted values.

use spectrarec_core::metrics::{MetricReport, Stat};

const WIDTH: f64 = 800.0;
const PANEL_HEIGHT: f64 = 260.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const GAP: f64 = 40.0;

struct Panel {
    top: f64,
}

impl Panel {
    fn bottom(&self) -> f64 {
        self.top + PANEL_HEIGHT
    }
}

fn polyline(
    out: &mut String,
    id: &str,
    color: &str,
    wavelengths: &[f64],
    values: &[f64],
    panel: &Panel,
    lo: f64,
    hi: f64,
) {
    let x0 = wavelengths[0];
    let x1 = wavelengths[wavelengths.len() - 1];
    let xspan = if x1 > x0 { x1 - x0 } else { 1.0 };
    let yspan = if hi > lo { hi - lo } else { 1.0 };
    let points: Vec<String> = wavelengths
        .iter()
        .zip(values)
        .map(|(&wl, &v)| {
            let x = MARGIN_LEFT + (wl - x0) / xspan * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT);
            let y = panel.bottom() - (v - lo) / yspan * PANEL_HEIGHT;
            format!("{:.2},{:.2}", x, y)
        })
        .collect();
    out.push_str(&format!(
        "  <polyline id=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        id,
        color,
        points.join(" ")
    ));
}

fn bounds(stats: &[Stat]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in stats {
        lo = lo.min(s.mean - s.std);
        hi = hi.max(s.mean + s.std);
    }
    if !lo.is_finite() || !hi.is_finite() || lo == hi {
        (lo.min(0.0), lo + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn panel_frame(out: &mut String, panel: &Panel, title: &str, lo: f64, hi: f64) {
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"14\">{}</text>\n",
        MARGIN_LEFT,
        panel.top - 8.0,
        title
    ));
    out.push_str(&format!(
        "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n",
        MARGIN_LEFT,
        panel.top,
        WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
        PANEL_HEIGHT
    ));
    for (value, y) in [(hi, panel.top), (lo, panel.bottom())] {
        out.push_str(&format!(
            "  <text x=\"4\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\">{:.4}</text>\n",
            y + 4.0,
            value
        ));
    }
}

/// Render the per-channel mean curves (with a thin +-std envelope) of MAE
/// and PSNR against wavelength.
pub fn per_channel_chart(report: &MetricReport, wavelengths: &[f64]) -> String {
    let total_height = MARGIN_TOP + 2.0 * PANEL_HEIGHT + GAP + 40.0;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\" width=\"{}\" height=\"{}\">\n",
        WIDTH, total_height, WIDTH, total_height
    );
    let panels = [
        Panel { top: MARGIN_TOP },
        Panel {
            top: MARGIN_TOP + PANEL_HEIGHT + GAP,
        },
    ];
    for (panel, (title, stats, color)) in panels.iter().zip([
        ("per-channel MAE", &report.channel_mae, "#c0392b"),
        ("per-channel PSNR (dB)", &report.channel_psnr, "#2471a3"),
    ]) {
        let (lo, hi) = bounds(stats);
        panel_frame(&mut out, panel, title, lo, hi);
        let mean: Vec<f64> = stats.iter().map(|s| s.mean).collect();
        let upper: Vec<f64> = stats.iter().map(|s| s.mean + s.std).collect();
        let lower: Vec<f64> = stats.iter().map(|s| s.mean - s.std).collect();
        let id = if title.contains("MAE") { "mae" } else { "psnr" };
        polyline(&mut out, &format!("{}_upper", id), "#bbbbbb", wavelengths, &upper, panel, lo, hi);
        polyline(&mut out, &format!("{}_lower", id), "#bbbbbb", wavelengths, &lower, panel, lo, hi);
        polyline(&mut out, &format!("{}_mean", id), color, wavelengths, &mean, panel, lo, hi);
    }
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"12\">wavelength (nm): {} .. {}</text>\n",
        MARGIN_LEFT,
        total_height - 12.0,
        wavelengths[0],
        wavelengths[wavelengths.len() - 1]
    ));
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_one_point_per_channel() {
        let stat = |m: f64| Stat { mean: m, std: 0.1 };
        let report = MetricReport {
            mae: stat(0.1),
            rmse: stat(0.2),
            psnr: stat(30.0),
            sam: stat(0.1),
            ssim: stat(0.9),
            mrae: stat(0.1),
            channel_mae: vec![stat(0.1), stat(0.2), stat(0.15)],
            channel_psnr: vec![stat(30.0), stat(28.0), stat(29.0)],
            full_mae: stat(0.15),
            visible_mae: Some(stat(0.1)),
            extended_mae: Some(stat(0.2)),
        };
        let svg = per_channel_chart(&report, &[500.0, 600.0, 700.0]);
        let mae_line = svg
            .lines()
            .find(|l| l.contains("id=\"mae_mean\""))
            .expect("mae polyline present");
        let points = mae_line.split("points=\"").nth(1).unwrap();
        let count = points.split('"').next().unwrap().split(' ').count();
        assert_eq!(count, 3);
        assert!(svg.contains("id=\"psnr_mean\""));
    }
}
