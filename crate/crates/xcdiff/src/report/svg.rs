// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal fixed-layout SVG charts. Output depends only on the inputs, and
//! every number is printed with a fixed precision so files are stable.

use std::fmt::Write as _;

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

pub const PALETTE: [&str; 4] = ["#d95f02", "#7570b3", "#1b9e77", "#666666"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick label with no trailing zeros beyond what the step needs.
fn tick_label(v: f64, step: f64) -> String {
    let digits = if step >= 1.0 { 0 } else { (-step.log10()).ceil() as usize };
    let s = format!("{v:.digits$}");
    if s == "-0" || s.starts_with("-0.") && s.trim_start_matches("-0.").chars().all(|c| c == '0') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

/// Round step giving at most `max_ticks` intervals over `span`.
fn nice_step(span: f64, max_ticks: usize) -> f64 {
    let raw = span / max_ticks as f64;
    let mag = 10f64.powf(raw.log10().floor());
    for m in [1.0, 2.0, 5.0, 10.0] {
        if m * mag >= raw {
            return m * mag;
        }
    }
    10.0 * mag
}

pub struct Chart {
    body: String,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    legend: Vec<(String, String)>,
}

impl Chart {
    pub fn new(title: &str, xlabel: &str, ylabel: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) -> Self {
        assert!(x1 > x0 && y1 > y0);
        let mut c = Self {
            body: String::new(),
            x0,
            x1,
            y0,
            y1,
            legend: Vec::new(),
        };
        let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
        let _ = writeln!(
            c.body,
            "<rect x=\"{LEFT:.1}\" y=\"{TOP:.1}\" width=\"{pw:.1}\" height=\"{ph:.1}\" fill=\"none\" stroke=\"#000\"/>"
        );
        let _ = writeln!(
            c.body,
            "<text x=\"{:.1}\" y=\"24.0\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
            WIDTH / 2.0,
            esc(title)
        );
        let _ = writeln!(
            c.body,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
            LEFT + pw / 2.0,
            HEIGHT - 14.0,
            esc(xlabel)
        );
        let _ = writeln!(
            c.body,
            "<text x=\"16.0\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16.0 {:.1})\">{}</text>",
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            esc(ylabel)
        );
        let xs = nice_step(x1 - x0, 10);
        let mut t = (x0 / xs).ceil() * xs;
        while t <= x1 + xs * 1e-9 {
            let px = c.px(t);
            let _ = writeln!(
                c.body,
                "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"#000\"/><text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{}</text>",
                HEIGHT - BOTTOM,
                HEIGHT - BOTTOM + 4.0,
                HEIGHT - BOTTOM + 16.0,
                tick_label(t, xs)
            );
            t += xs;
        }
        let ys = nice_step(y1 - y0, 8);
        let mut t = (y0 / ys).ceil() * ys;
        while t <= y1 + ys * 1e-9 {
            let py = c.py(t);
            let _ = writeln!(
                c.body,
                "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{LEFT:.1}\" y2=\"{py:.1}\" stroke=\"#000\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\">{}</text>",
                LEFT - 4.0,
                LEFT - 6.0,
                py + 3.5,
                tick_label(t, ys)
            );
            t += ys;
        }
        c
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }

    /// Shaded vertical band.
    pub fn band(&mut self, x0: f64, x1: f64, color: &str) {
        let (a, b) = (self.px(x0), self.px(x1));
        let _ = writeln!(
            self.body,
            "<rect x=\"{a:.1}\" y=\"{TOP:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{color}\" fill-opacity=\"0.12\"/>",
            b - a,
            HEIGHT - TOP - BOTTOM
        );
    }

    pub fn vline(&mut self, x: f64, color: &str, label: &str) {
        let p = self.px(x);
        let _ = writeln!(
            self.body,
            "<line x1=\"{p:.1}\" y1=\"{TOP:.1}\" x2=\"{p:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-dasharray=\"4 3\"/><text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"{color}\">{}</text>",
            HEIGHT - BOTTOM,
            p + 3.0,
            TOP + 12.0,
            esc(label)
        );
    }

    pub fn hline(&mut self, y: f64, color: &str, label: &str) {
        let p = self.py(y);
        let _ = writeln!(
            self.body,
            "<line x1=\"{LEFT:.1}\" y1=\"{p:.1}\" x2=\"{:.1}\" y2=\"{p:.1}\" stroke=\"{color}\" stroke-dasharray=\"4 3\"/><text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\" fill=\"{color}\">{}</text>",
            WIDTH - RIGHT,
            WIDTH - RIGHT - 4.0,
            p - 4.0,
            esc(label)
        );
    }

    /// Bar from `x0` to `x1` with height `h` above the y origin.
    pub fn bar(&mut self, x0: f64, x1: f64, h: f64, color: &str) {
        if h <= self.y0 {
            return;
        }
        let (a, b) = (self.px(x0), self.px(x1));
        let (top, base) = (self.py(h.min(self.y1)), self.py(self.y0));
        let _ = writeln!(
            self.body,
            "<rect x=\"{a:.1}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{color}\"/>",
            (b - a).max(0.0),
            base - top
        );
    }

    pub fn text_at(&mut self, x: f64, y: f64, text: &str) {
        let _ = writeln!(
            self.body,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{}</text>",
            self.px(x),
            self.py(y) - 3.0,
            esc(text)
        );
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], color: &str, markers: bool) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", self.px(x), self.py(y))).collect();
        let _ = writeln!(
            self.body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            coords.join(" ")
        );
        if markers {
            for &(x, y) in pts {
                let _ = writeln!(
                    self.body,
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\"/>",
                    self.px(x),
                    self.py(y)
                );
            }
        }
    }

    /// Step outline of a histogram.
    pub fn steps(&mut self, edges: &[f64], counts: &[f64], color: &str) {
        let mut pts = vec![(edges[0], self.y0)];
        for (i, &c) in counts.iter().enumerate() {
            pts.push((edges[i], c));
            pts.push((edges[i + 1], c));
        }
        pts.push((*edges.last().expect("edges"), self.y0));
        self.polyline(&pts, color, false);
    }

    pub fn legend(&mut self, label: &str, color: &str) {
        self.legend.push((label.to_string(), color.to_string()));
    }

    pub fn finish(mut self) -> String {
        for (i, (label, color)) in self.legend.iter().enumerate() {
            let y = TOP + 14.0 + 16.0 * i as f64;
            let x = WIDTH - RIGHT - 150.0;
            let _ = writeln!(
                self.body,
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10.0\" height=\"10.0\" fill=\"{color}\"/><text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"11\">{}</text>",
                y - 9.0,
                x + 14.0,
                esc(label)
            );
        }
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH:.0}\" height=\"{HEIGHT:.0}\" viewBox=\"0 0 {WIDTH:.0} {HEIGHT:.0}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n{}</svg>\n",
            self.body
        )
    }
}

/// Upper y limit with some headroom, at least 1.
pub fn headroom(max: f64) -> f64 {
    if max <= 0.0 {
        1.0
    } else {
        let s = nice_step(max * 1.1, 8);
        (max * 1.1 / s).ceil() * s
    }
}
