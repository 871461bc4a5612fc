//! Deterministic SVG output: embedding scatter plots and runtime line plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::EmbeddingRecord;
use crate::{GdrError, Result};

pub const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#ad494a",
];
pub const UNLABELED: &str = "#4a4a4a";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlotOptions {
    /// Points beyond this are downsampled (seeded).
    pub max_points: usize,
    pub seed: u64,
    pub size: f64,
    pub radius: f64,
}

impl Default for PlotOptions {
    fn default() -> Self {
        PlotOptions {
            max_points: 20_000,
            seed: 0,
            size: 800.0,
            radius: 1.5,
        }
    }
}

pub fn color_for(label: u32) -> &'static str {
    PALETTE[label as usize % PALETTE.len()]
}

pub fn render_scatter(
    emb: &EmbeddingRecord,
    labels: Option<&[u32]>,
    opts: &PlotOptions,
) -> Result<String> {
    if emb.d != 2 {
        return Err(GdrError::UnsupportedDimension(emb.d));
    }
    if let Some(l) = labels {
        if l.len() != emb.n {
            return Err(GdrError::LengthMismatch {
                left: l.len(),
                right: emb.n,
            });
        }
    }
    if !emb.is_finite() {
        return Err(GdrError::InvalidParameter("embedding is not finite".into()));
    }
    let keep: Vec<usize> = if emb.n > opts.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut v = index::sample(&mut rng, emb.n, opts.max_points).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..emb.n).collect()
    };
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for &i in &keep {
        let p = emb.row(i);
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let margin = 0.03 * opts.size;
    let scale = (opts.size - 2.0 * margin) / span;
    let off = [
        margin + 0.5 * (span - (hi[0] - lo[0])) * scale,
        margin + 0.5 * (span - (hi[1] - lo[1])) * scale,
    ];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
        opts.size
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for &i in &keep {
        let p = emb.row(i);
        let x = off[0] + (p[0] - lo[0]) * scale;
        let y = opts.size - (off[1] + (p[1] - lo[1]) * scale);
        let fill = labels.map_or(UNLABELED, |l| color_for(l[i]));
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{}" fill="{fill}" fill-opacity="0.7"/>"#,
            opts.radius
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn plot_embedding(
    emb: &EmbeddingRecord,
    labels: Option<&[u32]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let svg = render_scatter(emb, labels, &PlotOptions::default())?;
    let path = path.as_ref();
    fs::write(path, svg).map_err(|e| GdrError::io(path, e))
}

/// One named polyline per series, shared axes starting at zero.
pub fn render_lines(
    series: &[(String, Vec<(f64, f64)>)],
    x_label: &str,
    y_label: &str,
) -> String {
    let (w, h, m) = (720.0, 480.0, 60.0);
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (xmax, ymax) = pts.fold((0.0f64, 0.0f64), |a, p| (a.0.max(p.0), a.1.max(p.1)));
    let (xmax, ymax) = (xmax.max(1e-12), ymax.max(1e-12));
    let sx = |x: f64| m + x / xmax * (w - 2.0 * m);
    let sy = |y: f64| h - m - y / ymax * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {} L{m} {} L{} {}" stroke="black" fill="none"/>"#,
        m,
        h - m,
        w - m,
        h - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">{y_label}</text>"#,
        h / 2.0,
        h / 2.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{xmax:.0}</text>"#, w - m, h - m + 15.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{ymax:.1}</text>"#, m - 5.0, m);
    for (k, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut sorted = points.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let d: Vec<String> = sorted
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{}{:.2} {:.2}", if i == 0 { "M" } else { "L" }, sx(p.0), sy(p.1)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, d.join(" "));
        for p in &sorted {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(p.0), sy(p.1));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            m + 10.0,
            m + 16.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
