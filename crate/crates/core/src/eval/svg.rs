use std::fmt::Write as _;

const CELL: f64 = 16.0;
const MARGIN: f64 = 40.0;

fn header(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// White-to-navy ramp for `t` in `[0, 1]`.
fn shade(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

/// How heatmap cells are scaled to colors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorScale {
    /// One range for the whole matrix.
    Global,
    /// Each column scaled to its own range.
    PerColumn,
}

/// Row-major `rows x cols` heatmap with a title and axis labels.
pub fn heatmap(title: &str, values: &[f64], rows: usize, cols: usize, x_label: &str, y_label: &str, scale: ColorScale) -> String {
    debug_assert_eq!(values.len(), rows * cols);
    let range = |it: &mut dyn Iterator<Item = f64>| {
        it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let global = range(&mut values.iter().copied());
    let col_ranges: Vec<(f64, f64)> = (0..cols)
        .map(|j| match scale {
            ColorScale::Global => global,
            ColorScale::PerColumn => range(&mut (0..rows).map(|i| values[i * cols + j])),
        })
        .collect();
    let (w, h) = (2.0 * MARGIN + cols as f64 * CELL, 2.0 * MARGIN + rows as f64 * CELL);
    let mut out = String::new();
    header(&mut out, w, h);
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="20" font-size="12" font-family="sans-serif">{}</text>"#, escape(title));
    for i in 0..rows {
        for j in 0..cols {
            let v = values[i * cols + j];
            let (lo, hi) = col_ranges[j];
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{CELL}" height="{CELL}" fill="{}"><title>{v:.6}</title></rect>"#,
                MARGIN + j as f64 * CELL,
                MARGIN + i as f64 * CELL,
                shade(t)
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" font-family="sans-serif" text-anchor="middle">{}</text>"#,
        w / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="12" y="{:.1}" font-size="10" font-family="sans-serif" transform="rotate(-90 12 {:.1})" text-anchor="middle">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    out.push_str("</svg>\n");
    out
}

/// Line chart of several equally long series sharing one x axis.
pub fn line_chart(title: &str, series: &[(&str, &str, &[f64])]) -> String {
    let (w, h) = (640.0, 320.0);
    let len = series.iter().map(|s| s.2.len()).max().unwrap_or(0);
    let (lo, hi) = series
        .iter()
        .flat_map(|s| s.2.iter().copied())
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let x = |i: usize| MARGIN + (w - 2.0 * MARGIN) * i as f64 / (len.max(2) - 1) as f64;
    let y = |v: f64| h - MARGIN - (h - 2.0 * MARGIN) * (v - lo) / (hi - lo);
    let mut out = String::new();
    header(&mut out, w, h);
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="20" font-size="12" font-family="sans-serif">{}</text>"#, escape(title));
    let _ = writeln!(
        out,
        r##"<polyline points="{MARGIN},{:.1} {MARGIN},{:.1} {:.1},{:.1}" fill="none" stroke="#444"/>"##,
        MARGIN,
        h - MARGIN,
        w - MARGIN,
        h - MARGIN
    );
    for (k, (name, color, values)) in series.iter().enumerate() {
        let points: Vec<String> = values.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v))).collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-name="{}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            escape(name),
            points.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" font-family="sans-serif" fill="{color}">{}</text>"#,
            w - MARGIN - 80.0,
            20.0 + 12.0 * k as f64,
            escape(name)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="4" y="{:.1}" font-size="9" font-family="sans-serif">{hi:.3}</text><text x="4" y="{:.1}" font-size="9" font-family="sans-serif">{lo:.3}</text>"#,
        MARGIN,
        h - MARGIN
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_has_one_cell_per_value() {
        let s = heatmap("t", &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 2, 3, "x", "y", ColorScale::PerColumn);
        assert!(s.starts_with("<svg"));
        assert_eq!(s.matches("<rect x=").count(), 6);
        assert!(s.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn chart_has_one_polyline_per_series() {
        let a = [0.0, 1.0, 0.5];
        let s = line_chart("c<1>", &[("actual", "black", &a), ("forecast", "red", &a)]);
        assert_eq!(s.matches(r#"class="series""#).count(), 2);
        assert!(s.contains("c&lt;1&gt;"));
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(shade(0.0), "#ffffff");
        assert_eq!(shade(1.0), "#08306b");
    }
}
