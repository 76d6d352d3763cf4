//! CSV and SVG renderings of training logs and confusion matrices.

use std::fmt::Write;

use efv_core::training::EpochLog;

pub fn curves_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,train_top1,eval_top1,eval_top5\n");
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for l in logs {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            l.epoch,
            l.train_loss,
            l.train_top1,
            opt(l.eval_top1),
            opt(l.eval_top5)
        );
    }
    out
}

pub fn confusion_csv(confusion: &[Vec<u64>]) -> String {
    let n = confusion.len();
    let mut out = String::from("true\\pred");
    for j in 0..n {
        let _ = write!(out, ",{j}");
    }
    out.push('\n');
    for (i, row) in confusion.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

struct Series<'a> {
    name: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 44.0;

fn panel(svg: &mut String, x0: f64, title: &str, series: &[Series], y_range: Option<(f64, f64)>, x_max: f64) {
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (mut lo, mut hi) = y_range.unwrap_or_else(|| {
        ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)))
    });
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let (w, h) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
    let px = |x: f64| x0 + MARGIN + if x_max > 0.0 { x / x_max * w } else { 0.0 };
    let py = |y: f64| MARGIN + (hi - y) / (hi - lo) * h;
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{title}</text>"#,
        x0 + PANEL_W / 2.0
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{:.1}" y="{MARGIN}" width="{w}" height="{h}" fill="none" stroke="#888"/>"##,
        x0 + MARGIN
    );
    for (v, y) in [(hi, py(hi)), (lo, py(lo))] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{v:.3}</text>"#,
            x0 + MARGIN - 4.0,
            y + 3.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">epoch {x_max}</text>"#,
        x0 + MARGIN + w,
        MARGIN + h + 14.0
    );
    for (k, s) in series.iter().enumerate() {
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            s.color,
            pts.join(" ")
        );
        let ly = MARGIN + h + 28.0 + 12.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="10" fill="{}">{}</text>"#,
            x0 + MARGIN,
            s.color,
            s.name
        );
    }
}

/// Loss on the left, accuracies on the right.
pub fn curves_svg(logs: &[EpochLog]) -> String {
    let x_max = logs.last().map_or(0.0, |l| l.epoch as f64);
    let pick = |f: &dyn Fn(&EpochLog) -> Option<f64>| -> Vec<(f64, f64)> {
        logs.iter().filter_map(|l| f(l).map(|v| (l.epoch as f64, v))).collect()
    };
    let loss = [Series {
        name: "train loss",
        color: "#c0392b",
        points: pick(&|l| Some(l.train_loss)),
    }];
    let mut acc = vec![Series {
        name: "train top-1",
        color: "#2c7fb8",
        points: pick(&|l| Some(l.train_top1)),
    }];
    for (name, color, f) in [
        ("eval top-1", "#31a354", &(|l: &EpochLog| l.eval_top1) as &dyn Fn(&EpochLog) -> Option<f64>),
        ("eval top-5", "#756bb1", &|l: &EpochLog| l.eval_top5),
    ] {
        let points = pick(f);
        if !points.is_empty() {
            acc.push(Series { name, color, points });
        }
    }
    let height = PANEL_H + 40.0;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif">"#,
        2.0 * PANEL_W
    );
    svg.push('\n');
    panel(&mut svg, 0.0, "loss", &loss, None, x_max);
    panel(&mut svg, PANEL_W, "accuracy", &acc, Some((0.0, 1.0)), x_max);
    svg.push_str("</svg>\n");
    svg
}

/// Heat map with row-normalized shading and raw counts in each cell.
pub fn confusion_svg(confusion: &[Vec<u64>]) -> String {
    let n = confusion.len();
    let cell = 36.0;
    let off = 40.0;
    let size = off + cell * n as f64 + 10.0;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif">"#
    );
    svg.push('\n');
    let _ = writeln!(svg, r#"<text x="{off}" y="14" font-size="11">predicted</text>"#);
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{off}" font-size="11" transform="rotate(-90 12 {off})" text-anchor="end">true</text>"#
    );
    for (i, row) in confusion.iter().enumerate() {
        let total = row.iter().sum::<u64>().max(1) as f64;
        for (j, &v) in row.iter().enumerate() {
            let frac = v as f64 / total;
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let (x, y) = (off + cell * j as f64, off + cell * i as f64);
            let _ = writeln!(
                svg,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#ccc"/>"##
            );
            let fill = if frac > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10" fill="{fill}">{v}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 3.0
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
