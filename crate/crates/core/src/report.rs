//! Figures and machine-readable artifacts. Every writer stamps its output with
//! the config hash and seed that produced it.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce::Projection;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn csv_comment(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub data: T,
}

pub fn write_json<T: Serialize>(path: &Path, stage: &str, stamp: &Stamp, data: &T) -> Result<()> {
    let artifact = Artifact {
        stage: stage.to_string(),
        config_hash: stamp.config_hash.clone(),
        seed: stamp.seed,
        data,
    };
    let mut text = serde_json::to_string_pretty(&artifact).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Artifact<T>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-document labels used to colour and annotate a projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMeta {
    pub author: String,
    pub year: i32,
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorBy {
    Year,
    Author,
    Cluster,
}

impl ColorBy {
    pub fn as_str(self) -> &'static str {
        match self {
            ColorBy::Year => "year",
            ColorBy::Author => "author",
            ColorBy::Cluster => "cluster",
        }
    }
}

impl FromStr for ColorBy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "year" => Ok(ColorBy::Year),
            "author" => Ok(ColorBy::Author),
            "cluster" => Ok(ColorBy::Cluster),
            _ => Err(Error::InvalidConfig(format!("unknown colour channel {s:?}"))),
        }
    }
}

pub fn projection_csv(projection: &Projection, meta: &[PointMeta], stamp: &Stamp) -> Result<String> {
    check_meta(projection, meta)?;
    let mut out = stamp.csv_comment();
    let axes = ["x", "y", "z"];
    out.push_str("id,author,year,");
    out.push_str(&axes[..projection.out_dim].join(","));
    out.push_str(",method,seed\n");
    for (i, (id, m)) in projection.ids.iter().zip(meta).enumerate() {
        let coords: Vec<String> = projection.point(i).iter().map(|v| format!("{v:.9}")).collect();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            id,
            m.author,
            m.year,
            coords.join(","),
            projection.method.as_str(),
            projection.seed
        )
        .expect("write to string");
    }
    Ok(out)
}

fn check_meta(projection: &Projection, meta: &[PointMeta]) -> Result<()> {
    if projection.is_empty() {
        return Err(Error::InvalidInput("empty projection".into()));
    }
    if meta.len() != projection.len() {
        return Err(Error::DimensionMismatch {
            expected: projection.len(),
            got: meta.len(),
        });
    }
    Ok(())
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const RAMP: [(f64, [f64; 3]); 5] = [
    (0.0, [68.0, 1.0, 84.0]),
    (0.25, [59.0, 82.0, 139.0]),
    (0.5, [33.0, 145.0, 140.0]),
    (0.75, [94.0, 201.0, 98.0]),
    (1.0, [253.0, 231.0, 37.0]),
];

/// Continuous ramp over `t ∈ [0, 1]`, dark purple to yellow.
pub fn ramp_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let k = RAMP.iter().position(|(s, _)| *s >= t).unwrap_or(RAMP.len() - 1).max(1);
    let (s0, c0) = RAMP[k - 1];
    let (s1, c1) = RAMP[k];
    let u = (t - s0) / (s1 - s0);
    let c: Vec<u8> = (0..3).map(|i| (c0[i] + u * (c1[i] - c0[i])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Palette colour for category `i` of `n`; beyond the fixed palette, evenly
/// spaced hues.
pub fn category_color(i: usize, n: usize) -> String {
    if n <= PALETTE.len() {
        PALETTE[i].to_string()
    } else {
        let hue = 360.0 * i as f64 / n as f64;
        format!("hsl({hue:.1},65%,{}%)", if i.is_multiple_of(2) { 45 } else { 60 })
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 40.0;
const LEGEND_WIDTH: f64 = 170.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

/// Self-contained SVG scatter: one `<circle>` per document, legend entries as
/// `<rect>` swatches. A third coordinate, when present, drives marker size.
pub fn emit_scatter(projection: &Projection, meta: &[PointMeta], color_by: ColorBy, stamp: &Stamp) -> Result<String> {
    check_meta(projection, meta)?;
    let n = projection.len();
    let dim = projection.out_dim;
    let (x0, x1) = range((0..n).map(|i| projection.point(i)[0]));
    let (y0, y1) = range((0..n).map(|i| projection.point(i)[1]));
    let z = (dim >= 3).then(|| range((0..n).map(|i| projection.point(i)[2])));

    let (colors, legend): (Vec<String>, Vec<(String, String)>) = match color_by {
        ColorBy::Year => {
            let (lo, hi) = range(meta.iter().map(|m| m.year as f64));
            let colors = meta.iter().map(|m| ramp_color((m.year as f64 - lo) / (hi - lo))).collect();
            let (ylo, yhi) = (
                meta.iter().map(|m| m.year).min().expect("nonempty"),
                meta.iter().map(|m| m.year).max().expect("nonempty"),
            );
            (colors, vec![(ylo.to_string(), ramp_color(0.0)), (yhi.to_string(), ramp_color(1.0))])
        }
        ColorBy::Author | ColorBy::Cluster => {
            let keys: Vec<String> = meta
                .iter()
                .map(|m| match color_by {
                    ColorBy::Author => Ok(m.author.clone()),
                    _ => m
                        .cluster
                        .map(|c| format!("cluster {c}"))
                        .ok_or_else(|| Error::InvalidInput("cluster labels missing".into())),
                })
                .collect::<Result<_>>()?;
            let cats: Vec<&String> = keys.iter().collect::<BTreeSet<_>>().into_iter().collect();
            let color_of = |k: &String| {
                let i = cats.binary_search(&k).expect("category present");
                category_color(i, cats.len())
            };
            let legend = cats.iter().map(|k| ((*k).clone(), color_of(k))).collect();
            (keys.iter().map(color_of).collect(), legend)
        }
    };

    let legend_rows = legend.len() as f64;
    let height = HEIGHT.max(MARGIN * 2.0 + 16.0 * legend_rows + 20.0);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = height - 2.0 * MARGIN;
    let sx = |v: f64| MARGIN + (v - x0) / (x1 - x0) * plot_w;
    let sy = |v: f64| height - MARGIN - (v - y0) / (y1 - y0) * plot_h;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{height:.0}" viewBox="0 0 {:.0} {height:.0}" font-family="sans-serif" font-size="11">"#,
        WIDTH + LEGEND_WIDTH,
        WIDTH + LEGEND_WIDTH,
    )
    .expect("write");
    writeln!(
        s,
        "<metadata>config_hash={} seed={} method={} color_by={}</metadata>",
        stamp.config_hash,
        stamp.seed,
        projection.method.as_str(),
        color_by.as_str()
    )
    .expect("write");
    writeln!(
        s,
        r##"<g id="axes" data-x-range="{x0:.6} {x1:.6}" data-y-range="{y0:.6} {y1:.6}"><line x1="{m:.1}" y1="{b:.1}" x2="{r:.1}" y2="{b:.1}" stroke="#444"/><line x1="{m:.1}" y1="{m:.1}" x2="{m:.1}" y2="{b:.1}" stroke="#444"/>"##,
        m = MARGIN,
        b = height - MARGIN,
        r = WIDTH - MARGIN,
    )
    .expect("write");
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}">{x0:.3}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{x1:.3}</text><text x="4" y="{:.1}">{y0:.3}</text><text x="4" y="{:.1}">{y1:.3}</text></g>"#,
        MARGIN,
        height - MARGIN + 14.0,
        WIDTH - MARGIN,
        height - MARGIN + 14.0,
        height - MARGIN,
        MARGIN + 4.0,
    )
    .expect("write");

    s.push_str("<g id=\"points\">\n");
    for i in 0..n {
        let p = projection.point(i);
        let r = match z {
            Some((z0, z1)) => 2.0 + 5.0 * (p[2] - z0) / (z1 - z0),
            None => 4.0,
        };
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{r:.2}" fill="{}" fill-opacity="0.85"><title>{} ({}, {})</title></circle>"#,
            sx(p[0]),
            sy(p[1]),
            colors[i],
            escape(&projection.ids[i]),
            escape(&meta[i].author),
            meta[i].year
        )
        .expect("write");
    }
    s.push_str("</g>\n<g id=\"legend\">\n");
    writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, WIDTH, MARGIN - 6.0, color_by.as_str()).expect("write");
    for (k, (label, color)) in legend.iter().enumerate() {
        let y = MARGIN + 16.0 * k as f64;
        writeln!(
            s,
            r#"<rect x="{:.1}" y="{y:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            WIDTH,
            WIDTH + 16.0,
            y + 9.0,
            escape(label)
        )
        .expect("write");
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}
