//! CSV and SVG export of per-step reward and value curves.

use std::fmt::Write;

use crate::episode::Episode;
use crate::error::{Error, Result};

/// A named series of per-step values.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(name: &str, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            values,
        }
    }
}

/// CSV with a `step` column followed by one column per series. Shorter
/// series leave trailing cells empty.
pub fn to_csv(series: &[Series]) -> String {
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let mut out = String::from("step");
    for s in series {
        out.push(',');
        out.push_str(&s.name);
    }
    out.push('\n');
    for t in 0..n {
        write!(out, "{t}").expect("string write");
        for s in series {
            out.push(',');
            if let Some(v) = s.values.get(t) {
                write!(out, "{v}").expect("string write");
            }
        }
        out.push('\n');
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart of the series against step index.
pub fn to_svg(title: &str, series: &[Series]) -> String {
    let (w, h, pad) = (720.0, 360.0, 48.0);
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0).max(2);
    let finite = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let span = hi - lo;
    lo -= 0.05 * span;
    hi += 0.05 * span;
    let x = |t: usize| pad + (w - 2.0 * pad) * t as f64 / (n - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).expect("string write");
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title))
        .expect("string write");
    writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    )
    .expect("string write");
    for v in [lo, 0.5 * (lo + hi), hi] {
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, pad - 4.0, y(v) + 4.0)
            .expect("string write");
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, w / 2.0, h - 12.0).expect("string write");
    for (i, ser) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(t, &v)| format!("{:.2},{:.2}", x(t), y(v)))
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        )
        .expect("string write");
        writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            w - pad - 120.0,
            pad + 16.0 * i as f64,
            escape(&ser.name)
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reward decomposition and return-to-go of an annotated episode.
pub fn reward_series(ep: &Episode) -> Result<Vec<Series>> {
    let a = ep.annotation()?;
    Ok(vec![
        Series::new("r_traj", a.r_traj.clone()),
        Series::new("r_sub", a.r_sub.clone()),
        Series::new("r", a.r.clone()),
        Series::new("g", a.g.clone()),
    ])
}

/// Online critic readings of an episode: composite value, reference value
/// and interaction probability.
pub fn value_series(ep: &Episode) -> Result<Vec<Series>> {
    let readings: Vec<_> = ep.steps.iter().map(|s| s.critic).collect::<Option<Vec<_>>>().ok_or_else(|| {
        Error::Usage(format!("episode {} has steps without critic readings", ep.seed))
    })?;
    Ok(vec![
        Series::new("value", readings.iter().map(|r| r.value).collect()),
        Series::new("ref_value", readings.iter().map(|r| r.ref_value).collect()),
        Series::new("p_int", readings.iter().map(|r| r.p_int).collect()),
    ])
}
