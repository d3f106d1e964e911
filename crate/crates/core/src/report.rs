//! Metrics rows and their CSV encoding.

use std::io::{self, Write};

pub const CSV_HEADER: [&str; 17] = [
    "iteration",
    "trajectories_sampled",
    "loss_forward",
    "loss_backward",
    "l1_exact",
    "l1_empirical",
    "spearman",
    "pearson",
    "modes_found",
    "log_z_estimate",
    "kl_exact",
    "pb_drift_l1",
    "lr_forward",
    "lr_backward",
    "epsilon",
    "wall_time_s",
    "seed",
];

/// One evaluation point. `None` fields are written as empty cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRow {
    pub iteration: u64,
    pub trajectories_sampled: u64,
    pub loss_forward: Option<f64>,
    pub loss_backward: Option<f64>,
    pub l1_exact: Option<f64>,
    pub l1_empirical: Option<f64>,
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    pub modes_found: Option<usize>,
    pub log_z_estimate: Option<f64>,
    pub kl_exact: Option<f64>,
    pub pb_drift_l1: Option<f64>,
    pub lr_forward: Option<f64>,
    pub lr_backward: Option<f64>,
    pub epsilon: Option<f64>,
    pub wall_time_s: Option<f64>,
    pub seed: u64,
}

/// 17 significant digits, enough to reproduce every `f64` exactly.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

fn cell(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        [
            self.iteration.to_string(),
            self.trajectories_sampled.to_string(),
            cell(self.loss_forward),
            cell(self.loss_backward),
            cell(self.l1_exact),
            cell(self.l1_empirical),
            cell(self.spearman),
            cell(self.pearson),
            self.modes_found.map(|m| m.to_string()).unwrap_or_default(),
            cell(self.log_z_estimate),
            cell(self.kl_exact),
            cell(self.pb_drift_l1),
            cell(self.lr_forward),
            cell(self.lr_backward),
            cell(self.epsilon),
            cell(self.wall_time_s),
            self.seed.to_string(),
        ]
        .join(",")
    }

    /// Parses a line written by [`MetricsRow::to_csv_line`].
    pub fn from_csv_line(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != CSV_HEADER.len() {
            return None;
        }
        let opt = |s: &str| -> Option<Option<f64>> {
            if s.is_empty() {
                Some(None)
            } else {
                s.parse::<f64>().ok().map(Some)
            }
        };
        Some(Self {
            iteration: f[0].parse().ok()?,
            trajectories_sampled: f[1].parse().ok()?,
            loss_forward: opt(f[2])?,
            loss_backward: opt(f[3])?,
            l1_exact: opt(f[4])?,
            l1_empirical: opt(f[5])?,
            spearman: opt(f[6])?,
            pearson: opt(f[7])?,
            modes_found: if f[8].is_empty() { None } else { Some(f[8].parse().ok()?) },
            log_z_estimate: opt(f[9])?,
            kl_exact: opt(f[10])?,
            pb_drift_l1: opt(f[11])?,
            lr_forward: opt(f[12])?,
            lr_backward: opt(f[13])?,
            epsilon: opt(f[14])?,
            wall_time_s: opt(f[15])?,
            seed: f[16].parse().ok()?,
        })
    }
}

/// Append-only CSV writer that flushes after every row.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{}", CSV_HEADER.join(","))?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> io::Result<()> {
        writeln!(self.out, "{}", row.to_csv_line())?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Reads a metrics CSV back into rows, checking the header.
pub fn read_metrics(text: &str) -> Option<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next()? != CSV_HEADER.join(",") {
        return None;
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::from_csv_line).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_fields_are_empty() {
        let row = MetricsRow { iteration: 3, seed: 7, l1_exact: Some(0.5), ..Default::default() };
        let line = row.to_csv_line();
        assert_eq!(line.split(',').count(), 17);
        assert_eq!(line, "3,0,,,5.0000000000000000e-1,,,,,,,,,,,,7");
    }

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789, f64::MIN_POSITIVE] {
            assert_eq!(format_float(x).parse::<f64>().unwrap(), x);
        }
        let row = MetricsRow {
            iteration: 100,
            trajectories_sampled: 1600,
            loss_forward: Some(0.123456789),
            modes_found: Some(4),
            kl_exact: Some(1e-17),
            seed: 2,
            ..Default::default()
        };
        let mut w = MetricsWriter::new(Vec::new()).unwrap();
        w.write_row(&row).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert_eq!(read_metrics(&text).unwrap(), vec![row]);
    }
}
