//! Self-contained SVG line charts for training metrics. Output is plain
//! string assembly with fixed-precision coordinates, so identical input
//! bytes produce identical output bytes.

/// One parsed metrics row.
#[derive(Debug, Clone, Copy)]
pub struct Row {
    pub step: f64,
    pub loss: f64,
    pub max_act: f64,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 40.0;

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Polyline segments for one series, split at non-finite values; returns
/// the path elements plus gap markers at the break positions.
fn series_svg(
    rows: &[Row],
    pick: impl Fn(&Row) -> f64,
    x_of: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    color: &str,
) -> String {
    let y_of = |v: f64| MARGIN_T + (HEIGHT - MARGIN_T - MARGIN_B) * (1.0 - (v - lo) / (hi - lo));
    let mut out = String::new();
    let mut points: Vec<String> = Vec::new();
    let mut markers = String::new();
    let flush = |points: &mut Vec<String>, out: &mut String| {
        if points.len() >= 2 {
            out.push_str(&format!(
                "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                points.join(" ")
            ));
        } else if points.len() == 1 {
            // Isolated point between gaps: draw a dot so it stays visible.
            out.push_str(&format!(
                "  <circle cx=\"{}\" r=\"2\" fill=\"{color}\" cy=\"{}\"/>\n",
                points[0].split(',').next().unwrap(),
                points[0].split(',').nth(1).unwrap()
            ));
        }
        points.clear();
    };
    for row in rows {
        let v = pick(row);
        if v.is_finite() {
            points.push(format!("{:.3},{:.3}", x_of(row.step), y_of(v)));
        } else {
            // Gap: break the polyline and mark the missing sample.
            flush(&mut points, &mut out);
            markers.push_str(&format!(
                "  <circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"3\" fill=\"none\" stroke=\"red\" stroke-width=\"1\"/>\n",
                x_of(row.step),
                MARGIN_T
            ));
        }
    }
    flush(&mut points, &mut out);
    out.push_str(&markers);
    out
}

/// Render loss and max-activation curves; each series is normalized to its
/// own finite range (noted in the legend).
pub fn render_chart(rows: &[Row]) -> String {
    let (x_lo, x_hi) = finite_range(rows.iter().map(|r| r.step));
    let x_of =
        |s: f64| MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) * (s - x_lo) / (x_hi - x_lo).max(1e-12);
    let (loss_lo, loss_hi) = finite_range(rows.iter().map(|r| r.loss));
    let (act_lo, act_hi) = finite_range(rows.iter().map(|r| r.max_act));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" width=\"{WIDTH}\" height=\"{HEIGHT}\">\n"
    ));
    svg.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\" stroke-width=\"1\"/>\n",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\" stroke-width=\"1\"/>\n",
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&series_svg(rows, |r| r.loss, x_of, loss_lo, loss_hi, "#1f6fb2"));
    svg.push_str(&series_svg(rows, |r| r.max_act, x_of, act_lo, act_hi, "#c06014"));
    svg.push_str(&format!(
        "  <text x=\"{MARGIN_L}\" y=\"18\" font-family=\"monospace\" font-size=\"12\" fill=\"#1f6fb2\">loss [{loss_lo:.4}, {loss_hi:.4}]</text>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"18\" font-family=\"monospace\" font-size=\"12\" fill=\"#c06014\">max_act [{act_lo:.4}, {act_hi:.4}]</text>\n",
        MARGIN_L + 260.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">step [{x_lo:.0}, {x_hi:.0}]</text>\n",
        MARGIN_L,
        HEIGHT - 12.0
    ));
    svg.push_str("</svg>\n");
    svg
}
