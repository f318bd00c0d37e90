//! CSV tables and SVG plots for analysis results.
//!
//! Floats are written in Rust's shortest round-trip notation, which never
//! needs more than 9 significant digits for an `f32`, so parsing a written
//! table gives back bit-identical values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::model::UnitRef;
use crate::substitution::{LayerCorrelation, UnitReport};
use crate::train::TrainHistory;

pub const UNITS_HEADER: [&str; 6] = [
    "layer",
    "unit",
    "selectivity",
    "rs_am",
    "rs_iam",
    "ablation_delta",
];
pub const CORRELATIONS_HEADER: [&str; 3] = ["layer", "rho", "n_units"];
pub const HISTORY_HEADER: [&str; 3] = ["epoch", "loss", "accuracy"];

fn csv_bytes<R: AsRef<[String]>>(header: &[&str], rows: impl IntoIterator<Item = R>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("write to memory");
    for row in rows {
        w.write_record(row.as_ref()).expect("write to memory");
    }
    w.into_inner().expect("flush to memory")
}

pub fn units_csv(reports: &[UnitReport]) -> Vec<u8> {
    csv_bytes(
        &UNITS_HEADER,
        reports.iter().map(|r| {
            vec![
                r.unit.layer.to_string(),
                r.unit.unit.to_string(),
                r.selectivity.to_string(),
                r.rs_am.to_string(),
                r.rs_iam.to_string(),
                r.ablation_delta.to_string(),
            ]
        }),
    )
}

/// Undefined correlations are written as `NaN`.
pub fn correlations_csv(rows: &[LayerCorrelation]) -> Vec<u8> {
    csv_bytes(
        &CORRELATIONS_HEADER,
        rows.iter().map(|c| {
            vec![
                c.layer.to_string(),
                c.rho.map_or_else(|| "NaN".to_string(), |r| r.to_string()),
                c.unit_count.to_string(),
            ]
        }),
    )
}

pub fn history_csv(history: &TrainHistory) -> Vec<u8> {
    csv_bytes(
        &HISTORY_HEADER,
        history.epochs.iter().map(|e| {
            vec![
                e.epoch.to_string(),
                e.loss.to_string(),
                e.accuracy.to_string(),
            ]
        }),
    )
}

/// Reads a CSV table with the given header, returning each data row with
/// its 1-based line number.
fn read_table(bytes: &[u8], header: &[&str]) -> Result<Vec<(usize, Vec<String>)>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut rows = Vec::new();
    let mut seen_header = false;
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let fields: Vec<String> = rec.iter().map(str::to_string).collect();
        if !seen_header {
            if fields != header {
                return Err(Error::Csv {
                    line,
                    message: format!(
                        "expected header `{}`, found `{}`",
                        header.join(","),
                        fields.join(",")
                    ),
                });
            }
            seen_header = true;
            continue;
        }
        if fields.len() != header.len() {
            return Err(Error::Csv {
                line,
                message: format!("expected {} fields, found {}", header.len(), fields.len()),
            });
        }
        rows.push((line, fields));
    }
    if !seen_header {
        return Err(Error::Csv {
            line: 1,
            message: "missing header".into(),
        });
    }
    Ok(rows)
}

fn field<T: std::str::FromStr>(line: usize, name: &str, text: &str) -> Result<T> {
    text.parse().map_err(|_| Error::Csv {
        line,
        message: format!("invalid {name} `{text}`"),
    })
}

pub fn parse_units_csv(bytes: &[u8]) -> Result<Vec<UnitReport>> {
    read_table(bytes, &UNITS_HEADER)?
        .into_iter()
        .map(|(line, f)| {
            let r = UnitReport {
                unit: UnitRef::new(field(line, "layer", &f[0])?, field(line, "unit", &f[1])?),
                selectivity: field(line, "selectivity", &f[2])?,
                rs_am: field(line, "rs_am", &f[3])?,
                rs_iam: field(line, "rs_iam", &f[4])?,
                ablation_delta: field(line, "ablation_delta", &f[5])?,
            };
            let finite = [r.selectivity, r.rs_am, r.rs_iam, r.ablation_delta]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::Csv {
                    line,
                    message: "non-finite value".into(),
                });
            }
            Ok(r)
        })
        .collect()
}

pub fn parse_correlations_csv(bytes: &[u8]) -> Result<Vec<LayerCorrelation>> {
    read_table(bytes, &CORRELATIONS_HEADER)?
        .into_iter()
        .map(|(line, f)| {
            let rho: f64 = field(line, "rho", &f[1])?;
            Ok(LayerCorrelation {
                layer: field(line, "layer", &f[0])?,
                rho: (!rho.is_nan()).then_some(rho),
                unit_count: field(line, "n_units", &f[2])?,
            })
        })
        .collect()
}

pub fn read_units_csv(path: &Path) -> Result<Vec<UnitReport>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_units_csv(&bytes)
}

pub fn write_units_csv(path: &Path, reports: &[UnitReport]) -> Result<()> {
    write_atomic(path, &units_csv(reports))
}

pub fn write_correlations_csv(path: &Path, rows: &[LayerCorrelation]) -> Result<()> {
    write_atomic(path, &correlations_csv(rows))
}

pub fn write_history_csv(path: &Path, history: &TrainHistory) -> Result<()> {
    write_atomic(path, &history_csv(history))
}

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const AM_COLOR: &str = "#1f77b4";
const IAM_COLOR: &str = "#d62728";

struct Frame {
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let (lo, hi) = self.x_range;
        LEFT + (v - lo) / (hi - lo) * (WIDTH - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let (lo, hi) = self.y_range;
        HEIGHT - BOTTOM - (v - lo) / (hi - lo) * (HEIGHT - TOP - BOTTOM)
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn svg_open(
    out: &mut String,
    title: &str,
    x_label: &str,
    y_label: &str,
    frame: &Frame,
    x_ticks: &[(f64, String)],
) {
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
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, x1) = (frame.x(frame.x_range.0), frame.x(frame.x_range.1));
    let (y0, y1) = (frame.y(frame.y_range.0), frame.y(frame.y_range.1));
    let _ = writeln!(
        out,
        r#"<g class="axes" stroke="black" fill="none"><line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"#
    );
    let _ = writeln!(out, r#"<g class="ticks" text-anchor="middle">"#);
    for (v, label) in x_ticks {
        let x = frame.x(*v);
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}">{label}</text>"#,
            y0 + 5.0,
            y0 + 18.0
        );
    }
    let (ylo, yhi) = frame.y_range;
    for i in 0..=4 {
        let v = ylo + (yhi - ylo) * i as f64 / 4.0;
        let y = frame.y(v);
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0,
            format_tick(v)
        );
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn format_tick(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn unit_ticks() -> Vec<(f64, String)> {
    (0..=4)
        .map(|i| (i as f64 / 4.0, format_tick(i as f64 / 4.0)))
        .collect()
}

/// Scatter of RS against class selectivity for one layer, one AM and one
/// IAM point per unit. Points are `<circle>` elements with class `am` or
/// `iam`.
pub fn layer_scatter_svg(layer: usize, reports: &[UnitReport]) -> String {
    let frame = Frame {
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
    };
    let mut out = String::new();
    svg_open(
        &mut out,
        &format!("Layer {layer}: RS vs class selectivity"),
        "class selectivity",
        "RS",
        &frame,
        &unit_ticks(),
    );
    for (class, color, pick) in [
        (
            "am",
            AM_COLOR,
            (|r: &UnitReport| r.rs_am) as fn(&UnitReport) -> f32,
        ),
        ("iam", IAM_COLOR, |r: &UnitReport| r.rs_iam),
    ] {
        let _ = writeln!(
            out,
            r#"<g class="series-{class}" fill="{color}" fill-opacity="0.6">"#
        );
        for r in reports.iter().filter(|r| r.unit.layer == layer) {
            let _ = writeln!(
                out,
                r#"<circle class="{class}" cx="{:.3}" cy="{:.3}" r="3"><title>unit {}</title></circle>"#,
                frame.x(r.selectivity.clamp(0.0, 1.0) as f64),
                frame.y(pick(r).clamp(0.0, 1.0) as f64),
                r.unit.unit
            );
        }
        let _ = writeln!(out, "</g>");
    }
    legend(&mut out);
    out.push_str("</svg>\n");
    out
}

fn legend(out: &mut String) {
    let x = WIDTH - RIGHT - 70.0;
    let _ = writeln!(out, r#"<g class="legend">"#);
    for (i, (label, color)) in [("AM", AM_COLOR), ("IAM", IAM_COLOR)].iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{label}</text>"#,
            y - 9.0,
            x + 16.0,
            y
        );
    }
    let _ = writeln!(out, "</g>");
}

/// Spearman rho against layer index. Undefined layers are drawn as hollow
/// markers on the zero line with class `undefined`.
pub fn rho_svg(rows: &[LayerCorrelation]) -> String {
    let max_layer = rows.iter().map(|c| c.layer).max().unwrap_or(0).max(1) as f64;
    let frame = Frame {
        x_range: (-0.5, max_layer + 0.5),
        y_range: (-1.0, 1.0),
    };
    let ticks: Vec<(f64, String)> = rows
        .iter()
        .map(|c| (c.layer as f64, c.layer.to_string()))
        .collect();
    let mut out = String::new();
    svg_open(
        &mut out,
        "Spearman rho (selectivity vs IAM RS) by layer",
        "layer",
        "rho",
        &frame,
        &ticks,
    );
    let _ = writeln!(
        out,
        r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="gray" stroke-dasharray="4 3"/>"#,
        frame.x(frame.x_range.0),
        frame.x(frame.x_range.1),
        y = frame.y(0.0)
    );
    let defined: Vec<String> = rows
        .iter()
        .filter_map(|c| {
            c.rho
                .map(|r| format!("{:.3},{:.3}", frame.x(c.layer as f64), frame.y(r)))
        })
        .collect();
    if defined.len() > 1 {
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{IAM_COLOR}"/>"#,
            defined.join(" ")
        );
    }
    for c in rows {
        let cx = frame.x(c.layer as f64);
        match c.rho {
            Some(r) => {
                let _ = writeln!(
                    out,
                    r#"<circle class="rho" cx="{cx:.3}" cy="{:.3}" r="4" fill="{IAM_COLOR}"><title>layer {}: {r:.4} ({} units)</title></circle>"#,
                    frame.y(r),
                    c.layer,
                    c.unit_count
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    r#"<circle class="undefined" cx="{cx:.3}" cy="{:.3}" r="4" fill="none" stroke="gray"><title>layer {}: undefined ({} units)</title></circle>"#,
                    frame.y(0.0),
                    c.layer,
                    c.unit_count
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Reports grouped by layer, in layer order.
pub fn group_by_layer(reports: &[UnitReport]) -> BTreeMap<usize, Vec<UnitReport>> {
    let mut groups: BTreeMap<usize, Vec<UnitReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.unit.layer).or_default().push(*r);
    }
    groups
}

/// Writes `L{layer}.svg` for each requested layer and `rho.svg` into `dir`,
/// returning the written paths. `layers = None` plots every layer present.
pub fn write_plots(
    dir: &Path,
    reports: &[UnitReport],
    correlations: &[LayerCorrelation],
    layers: Option<&[usize]>,
) -> Result<Vec<std::path::PathBuf>> {
    let groups = group_by_layer(reports);
    let selected: Vec<usize> = match layers {
        Some([]) => return Err(Error::InvalidArgument("empty layer filter".into())),
        Some(ls) => {
            for l in ls {
                if !groups.contains_key(l) {
                    return Err(Error::InvalidArgument(format!(
                        "layer {l} has no rows in the table"
                    )));
                }
            }
            ls.to_vec()
        }
        None => groups.keys().copied().collect(),
    };
    if selected.is_empty() {
        return Err(Error::InvalidArgument("no layers to plot".into()));
    }
    let mut written = Vec::new();
    for l in &selected {
        let path = dir.join(format!("L{l}.svg"));
        write_atomic(&path, layer_scatter_svg(*l, &groups[l]).as_bytes())?;
        written.push(path);
    }
    let rho: Vec<LayerCorrelation> = correlations
        .iter()
        .filter(|c| selected.contains(&c.layer))
        .copied()
        .collect();
    let path = dir.join("rho.svg");
    write_atomic(&path, rho_svg(&rho).as_bytes())?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substitution::correlate;

    fn sample() -> Vec<UnitReport> {
        (0..5)
            .map(|i| UnitReport {
                unit: UnitRef::new(i / 3, i % 3),
                selectivity: 0.1 * i as f32 + 1e-7,
                rs_am: (i % 3) as f32 / 3.0,
                rs_iam: 0.0,
                ablation_delta: -0.0125 * i as f32,
            })
            .collect()
    }

    #[test]
    fn units_round_trip_is_bit_exact() {
        let r = sample();
        let bytes = units_csv(&r);
        assert!(bytes.starts_with(b"layer,unit,selectivity,rs_am,rs_iam,ablation_delta\n"));
        let back = parse_units_csv(&bytes).unwrap();
        assert_eq!(back.len(), r.len());
        for (a, b) in r.iter().zip(&back) {
            assert_eq!(a.unit, b.unit);
            for (x, y) in [
                (a.selectivity, b.selectivity),
                (a.rs_am, b.rs_am),
                (a.rs_iam, b.rs_iam),
                (a.ablation_delta, b.ablation_delta),
            ] {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn correlations_round_trip_with_undefined() {
        let rows = vec![
            LayerCorrelation {
                layer: 0,
                rho: Some(0.123456789012345),
                unit_count: 3,
            },
            LayerCorrelation {
                layer: 1,
                rho: None,
                unit_count: 2,
            },
        ];
        let bytes = correlations_csv(&rows);
        assert!(String::from_utf8_lossy(&bytes).contains("1,NaN,2"));
        assert_eq!(parse_correlations_csv(&bytes).unwrap(), rows);
    }

    #[test]
    fn malformed_rows_report_line() {
        let text =
            "layer,unit,selectivity,rs_am,rs_iam,ablation_delta\n0,0,0.5,0,0,0\n0,1,abc,0,0,0\n";
        let err = parse_units_csv(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");
        let text = "layer,unit,selectivity,rs_am,rs_iam,ablation_delta\n0,0,0.5,0\n";
        assert!(matches!(
            parse_units_csv(text.as_bytes()).unwrap_err(),
            Error::Csv { line: 2, .. }
        ));
        assert!(matches!(
            parse_units_csv(b"a,b\n").unwrap_err(),
            Error::Csv { line: 1, .. }
        ));
        assert!(parse_units_csv(b"").is_err());
    }

    #[test]
    fn scatter_has_two_points_per_unit() {
        let svg = layer_scatter_svg(0, &sample());
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let circles: Vec<_> = doc
            .descendants()
            .filter(|n| n.has_tag_name("circle"))
            .collect();
        assert_eq!(circles.len(), 6);
        assert_eq!(
            circles
                .iter()
                .filter(|n| n.attribute("class") == Some("iam"))
                .count(),
            3
        );
        assert!(svg.contains(">AM<") && svg.contains(">IAM<"));
    }

    #[test]
    fn rho_plot_is_valid_xml() {
        let svg = rho_svg(&correlate(&sample()));
        roxmltree::Document::parse(&svg).unwrap();
    }

    #[test]
    fn empty_layer_filter_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        let err = write_plots(dir.path(), &r, &correlate(&r), Some(&[])).unwrap_err();
        assert!(err.to_string().contains("empty layer filter"));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
        assert!(write_plots(dir.path(), &r, &correlate(&r), Some(&[7])).is_err());
        let paths = write_plots(dir.path(), &r, &correlate(&r), None).unwrap();
        assert_eq!(paths.len(), 3);
    }
}
