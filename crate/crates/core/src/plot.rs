//! Plain SVG charts and the CSV/JSONL artifacts they are drawn from.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::survival::KmCurve;
use crate::trainer::EpochRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// One named polyline.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn bounds(series: &[Series], y_range: Option<(f64, f64)>) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if let Some((a, b)) = y_range {
        (y0, y1) = (a, b);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0, y1)
}

/// Line chart; with `step` the lines are right-continuous steps.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    step: bool,
    y_range: Option<(f64, f64)>,
) -> String {
    let (x0, x1, y0, y1) = bounds(series, y_range);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{left},{top} L{left},{bottom} L{right},{bottom}" stroke="black" fill="none"/>"#
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(fx),
            bottom + 16.0,
            tick(fx)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(fy) + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        for (k, &(x, y)) in s.points.iter().enumerate() {
            if k == 0 {
                let _ = write!(d, "M{:.2},{:.2}", sx(x), sy(y));
            } else if step {
                let prev = s.points[k - 1].1;
                let _ = write!(
                    d,
                    " L{:.2},{:.2} L{:.2},{:.2}",
                    sx(x),
                    sy(prev),
                    sx(x),
                    sy(y)
                );
            } else {
                let _ = write!(d, " L{:.2},{:.2}", sx(x), sy(y));
            }
        }
        if !d.is_empty() {
            let _ = writeln!(
                out,
                r#"<path d="{d}" stroke="{color}" stroke-width="2" fill="none"/>"#
            );
        }
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            right - 120.0,
            ly,
            right - 104.0,
            ly + 9.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// Loss and validation C-index curves.
pub fn history_charts(history: &[EpochRecord]) -> Vec<(&'static str, String)> {
    let pts = |f: &dyn Fn(&EpochRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        history
            .iter()
            .filter_map(|r| f(r).filter(|v| v.is_finite()).map(|v| (r.epoch as f64, v)))
            .collect()
    };
    let loss = vec![
        Series {
            name: "total".into(),
            points: pts(&|r| Some(r.loss)),
        },
        Series {
            name: "cox (causal)".into(),
            points: pts(&|r| (!r.phase.warm_up).then_some(r.cox_causal)),
        },
        Series {
            name: "cox (full)".into(),
            points: pts(&|r| Some(r.cox_full)),
        },
    ];
    let c = vec![Series {
        name: "validation".into(),
        points: pts(&|r| r.val_c_index),
    }];
    vec![
        (
            "loss.svg",
            line_chart("Training loss", "epoch", "loss", &loss, false, None),
        ),
        (
            "c_index.svg",
            line_chart(
                "Validation C-index",
                "epoch",
                "C-index",
                &c,
                false,
                Some((0.0, 1.0)),
            ),
        ),
    ]
}

pub fn group_name(group: usize) -> &'static str {
    match group {
        0 => "low risk",
        1 => "high risk",
        _ => "group",
    }
}

/// Kaplan-Meier steps per group, starting at (0, 1).
pub fn km_chart(curves: &[KmCurve]) -> String {
    let series: Vec<Series> = curves
        .iter()
        .map(|c| {
            let mut points = vec![(0.0, 1.0)];
            points.extend(c.times.iter().cloned().zip(c.survival.iter().cloned()));
            Series {
                name: group_name(c.group).to_string(),
                points,
            }
        })
        .collect();
    line_chart(
        "Kaplan-Meier",
        "time",
        "survival",
        &series,
        true,
        Some((0.0, 1.0)),
    )
}

/// Per-node inclusion probabilities on the patch grid; planted causal
/// nodes are outlined.
pub fn node_map(id: &str, coords: &[(i32, i32)], probs: &[f64], causal: Option<&[bool]>) -> String {
    let cell = 22.0;
    let (min_x, max_x) = coords
        .iter()
        .fold((i32::MAX, i32::MIN), |(a, b), c| (a.min(c.0), b.max(c.0)));
    let (min_y, max_y) = coords
        .iter()
        .fold((i32::MAX, i32::MIN), |(a, b), c| (a.min(c.1), b.max(c.1)));
    let (w, h) = if coords.is_empty() {
        (1.0, 1.0)
    } else {
        (
            (max_x - min_x + 1) as f64 * cell,
            (max_y - min_y + 1) as f64 * cell,
        )
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="sans-serif" font-size="12">"#,
        w + 20.0,
        h + 40.0
    );
    let _ = writeln!(
        out,
        r#"<text x="10" y="18">{} node probabilities</text>"#,
        escape(id)
    );
    for (j, (&(x, y), &p)) in coords.iter().zip(probs).enumerate() {
        let shade = (255.0 * (1.0 - p.clamp(0.0, 1.0))).round() as u8;
        let stroke = match causal {
            Some(m) if m[j] => r#" stroke="black" stroke-width="2""#,
            _ => "",
        };
        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#{:02x}{:02x}ff"{stroke}/>"##,
            10.0 + (x - min_x) as f64 * cell,
            30.0 + (y - min_y) as f64 * cell,
            cell - 2.0,
            cell - 2.0,
            shade,
            shade
        );
    }
    out.push_str("</svg>\n");
    out
}

/// `time,survival,group` rows; each group starts with `0,1,<group>`.
pub fn km_to_csv(curves: &[KmCurve]) -> String {
    let mut out = String::from("time,survival,group\n");
    for c in curves {
        let _ = writeln!(out, "0,1,{}", c.group);
        for (t, s) in c.times.iter().zip(&c.survival) {
            let _ = writeln!(out, "{},{},{}", t, s, c.group);
        }
    }
    out
}

pub fn km_from_csv(text: &str, context: &str) -> Result<Vec<KmCurve>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        context: format!("{context} line {line}"),
        message: msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "time,survival,group" => {}
        _ => return Err(parse_err(1, "expected header time,survival,group".into())),
    }
    let mut curves: Vec<KmCurve> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_err(
                i + 1,
                format!("expected 3 fields, got {}", fields.len()),
            ));
        }
        let time: f64 = fields[0]
            .parse()
            .map_err(|e| parse_err(i + 1, format!("time: {e}")))?;
        let surv: f64 = fields[1]
            .parse()
            .map_err(|e| parse_err(i + 1, format!("survival: {e}")))?;
        let group: usize = fields[2]
            .parse()
            .map_err(|e| parse_err(i + 1, format!("group: {e}")))?;
        if !(0.0..=1.0).contains(&surv) || !time.is_finite() {
            return Err(parse_err(
                i + 1,
                "survival must lie in [0, 1] and time be finite".into(),
            ));
        }
        let k = match curves.iter().position(|c| c.group == group) {
            Some(k) => k,
            None => {
                curves.push(KmCurve {
                    group,
                    times: Vec::new(),
                    survival: Vec::new(),
                });
                curves.len() - 1
            }
        };
        let curve = &mut curves[k];
        if time == 0.0 && surv == 1.0 && curve.times.is_empty() {
            continue;
        }
        curve.times.push(time);
        curve.survival.push(surv);
    }
    curves.sort_by_key(|c| c.group);
    Ok(curves)
}

pub fn history_to_jsonl(history: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn history_from_jsonl(text: &str, context: &str) -> Result<Vec<EpochRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                context: format!("{context} line {}", i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
