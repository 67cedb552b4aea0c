//! CSV tables and fixed-size SVG charts. Output depends only on the input
//! data, so repeated runs produce identical bytes.

use crate::trace::{summarize, Protocol, Trace, TraceError};
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to report in {0}")]
    MissingInput(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Lines,
    Dots,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi > lo) {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

fn axes(out: &mut String, x: (f64, f64), y: (f64, f64), x_label: &str, y_label: &str) {
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let _ = writeln!(
        out,
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>"
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let px = LEFT + f * pw;
        let py = TOP + ph - f * ph;
        let _ = writeln!(
            out,
            "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n<line x1=\"{LEFT}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" stroke=\"#ddd\"/>",
            TOP + ph + 16.0,
            tick(x.0 + f * (x.1 - x.0)),
            LEFT - 6.0,
            py + 4.0,
            tick(y.0 + f * (y.1 - y.0)),
            LEFT + pw,
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        LEFT + pw / 2.0,
        H - 18.0,
        escape(x_label),
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e5 {
        format!("{v:.2e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Line or dot chart; `hline` draws a dashed horizontal reference.
pub fn xy_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], style: Style, hline: Option<(f64, &str)>) -> String {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if let Some((v, _)) = hline {
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let (x0, x1) = nice_range(x0, x1);
    let (y0, y1) = nice_range(y0.min(0.0), y1);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, (x0, x1), (y0, y1), x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        match style {
            Style::Lines => {
                let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
                let _ = writeln!(
                    out,
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                    pts.join(" ")
                );
                for &(x, y) in &s.points {
                    let _ = writeln!(out, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\"/>", px(x), py(y));
                }
            }
            Style::Dots => {
                for &(x, y) in &s.points {
                    let _ = writeln!(out, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"1.5\" fill=\"{color}\"/>", px(x), py(y));
                }
            }
        }
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>",
            LEFT + 10.0,
            TOP + 16.0 + 14.0 * i as f64,
            escape(&s.name)
        );
    }
    if let Some((v, label)) = hline {
        let _ = writeln!(
            out,
            "<line x1=\"{LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"red\" stroke-dasharray=\"6 4\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" fill=\"red\">{}</text>",
            LEFT + pw,
            LEFT + pw - 4.0,
            py(v) - 4.0,
            escape(label),
            y = py(v)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let y1 = bars.iter().map(|b| b.1).fold(0.0, f64::max);
    let (y0, y1) = nice_range(0.0, y1);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>"
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let py = TOP + ph - f * ph;
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            LEFT - 6.0,
            py + 4.0,
            tick(y0 + f * (y1 - y0))
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    let slot = pw / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = (v - y0) / (y1 - y0) * ph;
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{}</text>",
            TOP + ph - h,
            slot * 0.7,
            PALETTE[0],
            x + slot * 0.35,
            TOP + ph + 14.0,
            escape(label),
            x + slot * 0.35,
            TOP + ph - h - 4.0,
            tick((v * 1000.0).round() / 1000.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<PathBuf, ReportError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| ReportError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(path.to_path_buf())
}

pub(crate) fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| ReportError::Io {
        path: PathBuf::from("<csv>"),
        source: e.into_error(),
    })
}

pub(crate) fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}

#[derive(Serialize)]
struct PortRow {
    protocol: Protocol,
    dst_port: u16,
    packets: usize,
}

#[derive(Serialize)]
struct SizeRow {
    protocol: Protocol,
    payload_size: usize,
    packets: usize,
}

#[derive(Serialize)]
struct EntropyRow {
    frame_num: u64,
    entropy_bits: f64,
}

/// Port breakdown, payload-size histograms and the per-packet entropy series.
/// CSV columns:
/// `ports.csv` protocol,dst_port,packets;
/// `sizes.csv` protocol,payload_size,packets (15 most frequent per protocol);
/// `entropy.csv` frame_num,entropy_bits.
pub fn report_trace(trace: &Trace, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let stats = summarize(trace);
    let mut files = Vec::new();

    let ports: Vec<PortRow> = stats
        .port_counts
        .iter()
        .map(|p| PortRow {
            protocol: p.protocol,
            dst_port: p.port,
            packets: p.count,
        })
        .collect();
    files.push(write_file(&out_dir.join("ports.csv"), csv_bytes(&ports)?)?);
    let bars: Vec<(String, f64)> = ports
        .iter()
        .take(15)
        .map(|p| (format!("{}/{}", p.protocol, p.dst_port), p.packets as f64))
        .collect();
    files.push(write_file(
        &out_dir.join("ports.svg"),
        bar_chart("Packets per destination port", "packets", &bars),
    )?);

    let mut sizes = Vec::new();
    for (proto, top) in &stats.top_sizes {
        for s in top {
            sizes.push(SizeRow {
                protocol: *proto,
                payload_size: s.size,
                packets: s.count,
            });
        }
        let bars: Vec<(String, f64)> = top.iter().map(|s| (s.size.to_string(), s.count as f64)).collect();
        files.push(write_file(
            &out_dir.join(format!("sizes_{proto}.svg")),
            bar_chart(&format!("Most frequent {proto} payload sizes"), "packets", &bars),
        )?);
    }
    files.push(write_file(&out_dir.join("sizes.csv"), csv_bytes(&sizes)?)?);

    let entropy: Vec<EntropyRow> = stats
        .entropy_series
        .iter()
        .map(|&(frame_num, entropy_bits)| EntropyRow {
            frame_num,
            entropy_bits,
        })
        .collect();
    files.push(write_file(&out_dir.join("entropy.csv"), csv_bytes(&entropy)?)?);
    let series = [Series {
        name: "payload entropy".into(),
        points: stats.entropy_series.iter().map(|&(f, h)| (f as f64, h)).collect(),
    }];
    let mean_label = stats.mean_entropy.map(|m| format!("mean {m:.3} bits"));
    files.push(write_file(
        &out_dir.join("entropy.svg"),
        xy_chart(
            "Payload entropy per packet",
            "frame",
            "bits per byte",
            &series,
            Style::Dots,
            stats.mean_entropy.zip(mean_label.as_deref()),
        ),
    )?);
    files.push(write_file(&out_dir.join("summary.json"), json_bytes(&stats))?);
    Ok(files)
}

#[derive(serde::Deserialize)]
struct ElbowRow {
    k: usize,
    wcss: f64,
}

pub fn elbow_svg(points: &[(usize, f64)]) -> String {
    xy_chart(
        "Elbow scan",
        "k",
        "within-cluster sum of squares",
        &[Series {
            name: "best WCSS".into(),
            points: points.iter().map(|&(k, w)| (k as f64, w)).collect(),
        }],
        Style::Lines,
        None,
    )
}

/// Reports every `*.jsonl` trace under `dir` into `<stem>_report/` and
/// re-renders every `elbow.csv` as `elbow.svg`.
pub fn report_dir(dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let mut inputs = Vec::new();
    collect(dir, &mut inputs)?;
    inputs.sort();
    let mut files = Vec::new();
    for path in inputs {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name == "elbow.csv" {
            let mut rd = csv::Reader::from_path(&path)?;
            let rows: Vec<(usize, f64)> = rd
                .deserialize::<ElbowRow>()
                .map(|r| r.map(|r| (r.k, r.wcss)))
                .collect::<Result<_, _>>()?;
            files.push(write_file(&path.with_file_name("elbow.svg"), elbow_svg(&rows))?);
        } else {
            let file = fs::File::open(&path).map_err(|source| ReportError::Io {
                path: path.clone(),
                source,
            })?;
            let trace = Trace::read_jsonl(std::io::BufReader::new(file))?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
            files.extend(report_trace(&trace, &path.with_file_name(format!("{stem}_report")))?);
        }
    }
    if files.is_empty() {
        return Err(ReportError::MissingInput(dir.to_path_buf()));
    }
    Ok(files)
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ReportError> {
    let entries = fs::read_dir(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for e in entries {
        let path = e
            .map_err(|source| ReportError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if path.is_dir() {
            collect(&path, out)?;
        } else if path.extension().is_some_and(|x| x == "jsonl") || path.file_name().is_some_and(|n| n == "elbow.csv") {
            out.push(path);
        }
    }
    Ok(())
}
