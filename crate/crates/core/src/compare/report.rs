//! CSV, Markdown and SVG renderings. Output bytes depend only on inputs.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::{format_tokens, DominanceReport, Ranking, RunPoint, ScalingSeries};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn task_columns(points: &[RunPoint]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for p in points {
        for t in p.scores.keys() {
            if seen.insert(t.clone()) {
                out.push(t.clone());
            }
        }
    }
    out.sort();
    out
}

/// Points sorted by average (descending, then label), 6ND compute.
fn by_average(points: &[RunPoint]) -> Vec<&RunPoint> {
    let mut v: Vec<&RunPoint> = points.iter().collect();
    v.sort_by(|a, b| {
        b.average
            .partial_cmp(&a.average)
            .expect("finite")
            .then_with(|| a.label().cmp(&b.label()))
    });
    v
}

fn sci(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.2e}")).unwrap_or_else(|| "-".into())
}

/// Overview table sorted by average score.
pub fn table_markdown(points: &[RunPoint]) -> String {
    let tasks = task_columns(points);
    let mut out = String::from("| Model | Dataset | Tokens | Params (B) | Compute (6ND) | Avg |");
    for t in &tasks {
        let _ = write!(out, " {t} |");
    }
    out.push_str("\n|---|---|---|---|---|---|");
    out.push_str(&"---|".repeat(tasks.len()));
    out.push('\n');
    for p in by_average(points) {
        let _ = write!(
            out,
            "| {} | {} | {} | {} | {} | {:.3} |",
            p.model,
            p.dataset,
            p.tokens.map(format_tokens).unwrap_or_else(|| "-".into()),
            p.params.map(|n| format!("{:.2}", n / 1e9)).unwrap_or_else(|| "-".into()),
            sci(p.derived_compute()),
            p.average
        );
        for t in &tasks {
            match p.scores.get(t) {
                Some(s) => {
                    let _ = write!(out, " {s:.2} |");
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn table_csv(points: &[RunPoint]) -> String {
    let tasks = task_columns(points);
    let mut out = String::from("model,procedure,dataset,provenance,params,tokens,compute,average");
    for t in &tasks {
        out.push(',');
        out.push_str(&csv_field(t));
    }
    out.push('\n');
    for p in by_average(points) {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&p.model),
            csv_field(p.procedure()),
            csv_field(&p.dataset),
            serde_json::to_value(p.provenance).expect("enum").as_str().expect("string"),
            p.params.map(|v| format!("{v:e}")).unwrap_or_default(),
            p.tokens.map(|v| format!("{v:e}")).unwrap_or_default(),
            p.derived_compute().map(|v| format!("{v:e}")).unwrap_or_default(),
            p.average
        );
        for t in &tasks {
            out.push(',');
            if let Some(s) = p.scores.get(t) {
                out.push_str(&s.to_string());
            }
        }
        out.push('\n');
    }
    out
}

pub fn ranking_markdown(title: &str, r: &Ranking) -> String {
    let mut out = format!("### {}\n\n| Rank | Dataset | Avg |\n|---|---|---|\n", esc(title));
    for e in &r.entries {
        let _ = writeln!(out, "| {} | {} | {:.3} |", e.rank, e.dataset, e.score);
    }
    if !r.ties.is_empty() {
        let _ = writeln!(out, "\nTies at resolution {}:", r.resolution);
        for (a, b) in &r.ties {
            let _ = writeln!(out, "- {a} ~ {b}");
        }
    }
    out
}

pub fn ranking_csv(scale: &str, r: &Ranking) -> String {
    let mut out = String::from("scale,rank,dataset,average,tied_with_next\n");
    for (i, e) in r.entries.iter().enumerate() {
        let tied = r.entries.get(i + 1).is_some_and(|n| r.ties.contains(&(e.dataset.clone(), n.dataset.clone())));
        let _ = writeln!(out, "{},{},{},{},{}", csv_field(scale), e.rank, csv_field(&e.dataset), e.score, tied);
    }
    out
}

/// Per-point trend data; the fitted column is empty for series without a fit.
pub fn trend_csv(series: &[ScalingSeries]) -> String {
    let mut out = String::from("series,model,compute,log10_compute,average,trend_fit,trend_residual\n");
    for s in series {
        for (i, p) in s.points.iter().enumerate() {
            let c = p.compute.expect("aligned");
            let (fit, res) = match &s.trend {
                Some(t) => (t.predict(c).to_string(), t.residuals[i].to_string()),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{c:e},{},{},{fit},{res}",
                csv_field(&s.label()),
                csv_field(&p.model),
                c.log10(),
                p.average
            );
        }
    }
    out
}

pub fn dominance_markdown(reports: &[DominanceReport]) -> String {
    let mut out = String::from("| Point | Compute (6ND) | Avg | Dominated | Dominated by |\n|---|---|---|---|---|\n");
    for r in reports {
        let _ = writeln!(
            out,
            "| {} | {:.2e} | {:.3} | {} | {} |",
            r.point,
            r.compute,
            r.average,
            if r.flagged { "yes" } else { "no" },
            r.dominated_by.join("; ")
        );
    }
    out
}

/// How a series' trend is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrendMode {
    /// Least-squares line over the series' compute range.
    Fit,
    /// Straight segments between consecutive points.
    Connect,
}

struct Frame {
    w: f64,
    h: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        self.left + (v - self.x0) / (self.x1 - self.x0) * (self.w - self.left - self.right)
    }
    fn y(&self, v: f64) -> f64 {
        self.h - self.bottom - (v - self.y0) / (self.y1 - self.y0) * (self.h - self.top - self.bottom)
    }
}

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let (lo, hi) = ((lo * 20.0).floor() / 20.0, (hi * 20.0).ceil() / 20.0);
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.05, hi + 0.05)
    }
}

fn axes(out: &mut String, f: &Frame, title: &str, xlabel: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" font-family=\"sans-serif\" font-size=\"11\">",
        f.w, f.h, f.w, f.h
    );
    let _ = writeln!(out, "<rect width=\"{}\" height=\"{}\" fill=\"white\"/>", f.w, f.h);
    let _ = writeln!(out, "<text x=\"{:.1}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>", f.w / 2.0, esc(title));
    let (l, r, t, b) = (f.left, f.w - f.right, f.top, f.h - f.bottom);
    let _ = writeln!(out, "<path d=\"M{l:.1} {t:.1} V{b:.1} H{r:.1}\" stroke=\"black\" fill=\"none\"/>");
    let mut y = f.y0;
    while y <= f.y1 + 1e-9 {
        let py = f.y(y);
        let _ = writeln!(
            out,
            "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{l:.1}\" y2=\"{py:.1}\" stroke=\"black\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{y:.2}</text>",
            l - 4.0,
            l - 6.0,
            py + 4.0
        );
        y += 0.05;
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        (l + r) / 2.0,
        f.h - 8.0,
        esc(xlabel)
    );
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">average score</text>",
        (t + b) / 2.0,
        (t + b) / 2.0
    );
}

/// Average score against log10 compute, one colour per series.
pub fn scatter_svg(title: &str, series: &[ScalingSeries], mode: TrendMode) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|s| s.xy()).map(|(c, _)| c.log10()).collect();
    let x0 = xs.iter().copied().fold(f64::INFINITY, f64::min).floor();
    let x1 = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil();
    let (x0, x1) = if x0.is_finite() && x1 > x0 { (x0, x1) } else { (20.0, 24.0) };
    let (y0, y1) = y_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.average)));
    let f = Frame {
        w: 760.0,
        h: 440.0,
        left: 60.0,
        right: 220.0,
        top: 30.0,
        bottom: 50.0,
        x0,
        x1,
        y0,
        y1,
    };
    let mut out = String::new();
    axes(&mut out, &f, title, "training compute, 6ND FLOPs (log10)");
    let mut e = x0;
    while e <= x1 + 1e-9 {
        let px = f.x(e);
        let base = f.h - f.bottom;
        let _ = writeln!(
            out,
            "<line x1=\"{px:.1}\" y1=\"{base:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"black\"/><text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">1e{e}</text>",
            base + 4.0,
            base + 16.0
        );
        e += 1.0;
    }
    let mode_name = match mode {
        TrendMode::Fit => "fitted trend",
        TrendMode::Connect => "connected trend",
    };
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts = s.xy();
        match (mode, &s.trend) {
            (TrendMode::Fit, Some(t)) => {
                let (ca, cb) = (pts[0].0, pts[pts.len() - 1].0);
                let _ = writeln!(
                    out,
                    "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-dasharray=\"5 3\"/>",
                    f.x(ca.log10()),
                    f.y(t.predict(ca)),
                    f.x(cb.log10()),
                    f.y(t.predict(cb))
                );
            }
            (TrendMode::Connect, _) if pts.len() > 1 => {
                let d: Vec<String> = pts.iter().map(|(c, a)| format!("{:.1},{:.1}", f.x(c.log10()), f.y(*a))).collect();
                let _ = writeln!(out, "<polyline points=\"{}\" stroke=\"{color}\" fill=\"none\"/>", d.join(" "));
            }
            _ => {}
        }
        for (p, (c, a)) in s.points.iter().zip(&pts) {
            let _ = writeln!(
                out,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"{color}\"><title>{}</title></circle>",
                f.x(c.log10()),
                f.y(*a),
                esc(&p.label())
            );
        }
        let ly = f.top + 14.0 * i as f64 + 10.0;
        let lx = f.w - f.right + 12.0;
        let _ = writeln!(
            out,
            "<circle cx=\"{lx:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"{color}\"/><text x=\"{:.1}\" y=\"{ly:.1}\">{}</text>",
            ly - 4.0,
            lx + 8.0,
            esc(&s.label())
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"#555\">lines: {mode_name} (not a scaling law)</text>",
        f.w - f.right + 12.0,
        f.h - f.bottom
    );
    out.push_str("</svg>\n");
    out
}

/// Dataset scores across scales, one line per dataset.
pub fn ranking_svg(title: &str, scales: &[(String, Ranking)]) -> String {
    let mut datasets: Vec<String> = scales
        .iter()
        .flat_map(|(_, r)| r.entries.iter().map(|e| e.dataset.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    datasets.sort();
    let (y0, y1) = y_range(scales.iter().flat_map(|(_, r)| r.entries.iter().map(|e| e.score)));
    let f = Frame {
        w: 640.0,
        h: 420.0,
        left: 60.0,
        right: 160.0,
        top: 30.0,
        bottom: 50.0,
        x0: -0.5,
        x1: scales.len().max(1) as f64 - 0.5,
        y0,
        y1,
    };
    let mut out = String::new();
    axes(&mut out, &f, title, "scale");
    for (i, (label, _)) in scales.iter().enumerate() {
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            f.x(i as f64),
            f.h - f.bottom + 16.0,
            esc(label)
        );
    }
    for (k, d) in datasets.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = scales
            .iter()
            .enumerate()
            .filter_map(|(i, (_, r))| r.entries.iter().find(|e| &e.dataset == d).map(|e| (f.x(i as f64), f.y(e.score))))
            .collect();
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(out, "<polyline points=\"{}\" stroke=\"{color}\" fill=\"none\"/>", path.join(" "));
        for (x, y) in &pts {
            let _ = writeln!(out, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3.5\" fill=\"{color}\"/>");
        }
        let ly = f.top + 14.0 * k as f64 + 10.0;
        let lx = f.w - f.right + 12.0;
        let _ = writeln!(
            out,
            "<line x1=\"{lx:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\"/><text x=\"{:.1}\" y=\"{ly:.1}\">{}</text>",
            ly - 4.0,
            lx + 14.0,
            ly - 4.0,
            lx + 18.0,
            esc(d)
        );
    }
    out.push_str("</svg>\n");
    out
}
