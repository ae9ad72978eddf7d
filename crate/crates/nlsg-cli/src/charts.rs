//! Hand-rolled SVG line and bar charts. Self-contained markup, no external
//! assets; the CSV files remain the machine-readable contract.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 44.0;
const BOTTOM: f64 = 52.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn fmt(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn of(xs: impl Iterator<Item = f64>, ys: impl Iterator<Item = f64>) -> Frame {
        let mut f = Frame {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for x in xs {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
        }
        for y in ys {
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() || !f.x1.is_finite() {
            f.x0 = 0.0;
            f.x1 = 1.0;
        }
        if !f.y0.is_finite() || !f.y1.is_finite() {
            f.y0 = 0.0;
            f.y1 = 1.0;
        }
        if f.x1 - f.x0 < 1e-12 {
            f.x0 -= 0.5;
            f.x1 += 0.5;
        }
        if f.y1 - f.y0 < 1e-12 {
            f.y0 -= 0.5;
            f.y1 += 0.5;
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn open_svg(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        (WIDTH - RIGHT + LEFT) / 2.0,
        esc(title)
    )
}

fn axes(svg: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let (bx, by) = (HEIGHT - BOTTOM, WIDTH - RIGHT);
    svg.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{bx}\" x2=\"{by}\" y2=\"{bx}\" stroke=\"black\"/>\n\
         <line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{bx}\" stroke=\"black\"/>\n"
    ));
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = frame.x0 + t * (frame.x1 - frame.x0);
        let yv = frame.y0 + t * (frame.y1 - frame.y0);
        let px = frame.px(xv);
        let py = frame.py(yv);
        svg.push_str(&format!(
            "<line x1=\"{px}\" y1=\"{bx}\" x2=\"{px}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{px}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            bx + 4.0,
            bx + 18.0,
            fmt(xv)
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{LEFT}\" y2=\"{py}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            LEFT - 4.0,
            LEFT - 8.0,
            py + 4.0,
            fmt(yv)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        (WIDTH - RIGHT + LEFT) / 2.0,
        HEIGHT - 12.0,
        esc(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        (HEIGHT - BOTTOM + TOP) / 2.0,
        (HEIGHT - BOTTOM + TOP) / 2.0,
        esc(y_label)
    ));
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let frame = Frame::of(
        series.iter().flat_map(|s| s.points.iter().map(|p| p.0)),
        series.iter().flat_map(|s| s.points.iter().map(|p| p.1)),
    );
    let mut svg = open_svg(title);
    axes(&mut svg, &frame, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            pts.join(" ")
        ));
        let ly = TOP + 16.0 * i as f64 + 8.0;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"3\"/>\n\
             <text x=\"{}\" y=\"{}\">{}</text>\n",
            WIDTH - RIGHT + 12.0,
            WIDTH - RIGHT + 34.0,
            WIDTH - RIGHT + 40.0,
            ly + 4.0,
            esc(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let top = bars.iter().map(|b| b.1).fold(0.0f64, f64::max);
    let frame = Frame::of([0.0, 1.0].into_iter(), [0.0, top.max(1e-12)].into_iter());
    let mut svg = open_svg(title);
    axes(&mut svg, &frame, "", y_label);
    let span = WIDTH - LEFT - RIGHT;
    let slot = span / bars.len().max(1) as f64;
    let bar_w = slot * 0.6;
    for (i, (label, value)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let cx = LEFT + slot * (i as f64 + 0.5);
        let y = frame.py(*value);
        svg.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{y:.2}\" width=\"{bar_w:.2}\" height=\"{:.2}\" fill=\"{color}\"/>\n\
             <text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            cx - bar_w / 2.0,
            HEIGHT - BOTTOM - y,
            y - 6.0,
            fmt(*value),
            HEIGHT - BOTTOM + 18.0,
            esc(label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
