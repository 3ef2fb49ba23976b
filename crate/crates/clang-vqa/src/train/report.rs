//! Metrics logging and report rendering.
//!
//! The CSV column order is part of the external contract; floats print via
//! plain `Display`, which round-trips f64 exactly, so a parsed report can
//! be checked against the log bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Contract(format!(
                "split {other:?} is neither train nor val"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub acc_all: f64,
    pub acc_causal: f64,
    pub acc_temporal: f64,
    pub acc_descriptive: f64,
    pub l_d: f64,
    pub l_g: f64,
    pub l_n: f64,
    pub l_kl: f64,
    pub l_qa: f64,
    pub total: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Contract("metrics log is empty".into()));
        }
        let mut last: [Option<usize>; 2] = [None, None];
        for row in &self.rows {
            let accs = [
                row.acc_all,
                row.acc_causal,
                row.acc_temporal,
                row.acc_descriptive,
            ];
            if accs.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Contract(format!(
                    "epoch {} {} accuracy outside [0,1]",
                    row.epoch,
                    row.split.as_str()
                )));
            }
            let slot = &mut last[(row.split == Split::Val) as usize];
            if let Some(prev) = *slot {
                if row.epoch <= prev {
                    return Err(Error::Contract(format!(
                        "{} rows not strictly epoch-ordered at epoch {}",
                        row.split.as_str(),
                        row.epoch
                    )));
                }
            }
            *slot = Some(row.epoch);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReportFormat {
    Csv,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<ReportFormat> {
        match s.trim() {
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::Contract(format!("unknown report format {other:?}"))),
        }
    }
}

pub const CSV_HEADER: &str =
    "epoch,split,acc_all,acc_causal,acc_temporal,acc_descriptive,l_d,l_g,l_n,l_kl,l_qa,total";

pub fn render_csv(log: &MetricsLog) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &log.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.split.as_str(),
            r.acc_all,
            r.acc_causal,
            r.acc_temporal,
            r.acc_descriptive,
            r.l_d,
            r.l_g,
            r.l_n,
            r.l_kl,
            r.l_qa,
            r.total
        );
    }
    out
}

const SVG_WIDTH: f64 = 760.0;
const SVG_HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 24.0;
const MARGIN_BOTTOM: f64 = 44.0;

const SERIES: [(&str, &str, fn(&MetricsRow) -> f64); 6] = [
    ("l_d", "#7570b3", |r| r.l_d),
    ("l_g", "#d95f02", |r| r.l_g),
    ("l_n", "#1b9e77", |r| r.l_n),
    ("l_kl", "#e7298a", |r| r.l_kl),
    ("l_qa", "#66a61e", |r| r.l_qa),
    ("total", "#333333", |r| r.total),
];

/// Line chart of the loss terms against epoch. Training rows are the
/// subject; if the log holds none (a bare evaluation), whatever is there
/// gets plotted instead.
pub fn render_svg(log: &MetricsLog) -> String {
    let rows: Vec<&MetricsRow> = {
        let train: Vec<&MetricsRow> =
            log.rows.iter().filter(|r| r.split == Split::Train).collect();
        if train.is_empty() {
            log.rows.iter().collect()
        } else {
            train
        }
    };

    let (mut e_min, mut e_max) = (usize::MAX, 0usize);
    let (mut v_min, mut v_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &rows {
        e_min = e_min.min(r.epoch);
        e_max = e_max.max(r.epoch);
        for (_, _, pick) in SERIES {
            v_min = v_min.min(pick(r));
            v_max = v_max.max(pick(r));
        }
    }
    if !v_min.is_finite() || !v_max.is_finite() {
        (v_min, v_max) = (0.0, 1.0);
    }
    if v_max - v_min < 1e-12 {
        v_max = v_min + 1.0;
    }
    let pad = 0.05 * (v_max - v_min);
    let (v_min, v_max) = (v_min - pad, v_max + pad);

    let plot_w = SVG_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = SVG_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let x_of = |epoch: usize| {
        if e_max == e_min {
            MARGIN_LEFT + plot_w / 2.0
        } else {
            MARGIN_LEFT + plot_w * (epoch - e_min) as f64 / (e_max - e_min) as f64
        }
    };
    let y_of = |v: f64| MARGIN_TOP + plot_h * (1.0 - (v - v_min) / (v_max - v_min));

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_WIDTH} {SVG_HEIGHT}\" \
         font-family=\"monospace\" font-size=\"11\">\n\
         <rect width=\"{SVG_WIDTH}\" height=\"{SVG_HEIGHT}\" fill=\"#fcfcfa\"/>\n"
    );
    let _ = write!(
        svg,
        "<rect x=\"{MARGIN_LEFT}\" y=\"{MARGIN_TOP}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"#888\"/>\n"
    );

    for tick in 0..=4 {
        let v = v_min + (v_max - v_min) * tick as f64 / 4.0;
        let y = y_of(v);
        let _ = write!(
            svg,
            "<line x1=\"{MARGIN_LEFT}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" \
             stroke=\"#ddd\"/>\n<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.4}</text>\n",
            MARGIN_LEFT + plot_w,
            MARGIN_LEFT - 6.0,
            y + 4.0
        );
    }
    let epoch_ticks: Vec<usize> = {
        let span = e_max - e_min;
        let step = (span / 8).max(1);
        let mut ticks: Vec<usize> = (e_min..=e_max).step_by(step).collect();
        if *ticks.last().unwrap() != e_max {
            ticks.push(e_max);
        }
        ticks
    };
    for epoch in epoch_ticks {
        let x = x_of(epoch);
        let _ = write!(
            svg,
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{epoch}</text>\n",
            MARGIN_TOP + plot_h + 16.0
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">epoch</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        SVG_HEIGHT - 10.0
    );

    for (i, (label, color, pick)) in SERIES.iter().enumerate() {
        let mut points = String::new();
        for r in &rows {
            let _ = write!(points, "{:.2},{:.2} ", x_of(r.epoch), y_of(pick(r)));
        }
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            points.trim_end()
        );
        let ly = MARGIN_TOP + 14.0 * i as f64 + 8.0;
        let lx = SVG_WIDTH - MARGIN_RIGHT + 12.0;
        let _ = write!(
            svg,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{:.2}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n<text x=\"{:.2}\" y=\"{:.2}\">{label}</text>\n",
            lx + 18.0,
            lx + 24.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write the requested report files into `out_dir`. Rendering is a pure
/// function of the log, so re-emission of an identical log is
/// byte-identical.
pub fn emit_report(
    log: &MetricsLog,
    out_dir: &Path,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>> {
    log.validate()?;
    if formats.is_empty() {
        return Err(Error::Contract("no report formats requested".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for format in [ReportFormat::Csv, ReportFormat::Svg] {
        if !formats.contains(&format) {
            continue;
        }
        let (name, body) = match format {
            ReportFormat::Csv => ("metrics.csv", render_csv(log)),
            ReportFormat::Svg => ("metrics.svg", render_svg(log)),
        };
        let path = out_dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}
