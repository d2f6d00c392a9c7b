//! Per-epoch run metrics: deterministic CSV emission and optional SVG plots.
//!
//! The main CSV holds only quantities derived from the seeded computation so
//! repeated runs are byte-identical; wall-clock timings go to a sidecar file.

use std::io::Write;
use std::path::Path;

/// Fixed column order of the metrics CSV.
pub const CSV_HEADER: &str = "epoch,env_steps,success_rate,mean_return,mean_thought_len,\
illegal_rate,mean_revkl,sft_loss,policy_loss,value_loss,entropy,clip_fraction,lr";

#[derive(Debug, Clone, Default)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub env_steps: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_thought_len: f64,
    pub illegal_rate: f64,
    /// Mean sentence RevKL over guided steps (KL variant; 0 otherwise).
    pub mean_revkl: f64,
    /// Mean imitation loss (SFT variant; 0 otherwise).
    pub sft_loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub lr: f64,
    /// Excluded from the CSV; written to the timing sidecar.
    pub wall_clock_secs: f64,
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

impl EpochMetrics {
    pub fn to_csv_row(&self) -> String {
        [
            self.epoch.to_string(),
            self.env_steps.to_string(),
            fmt(self.success_rate),
            fmt(self.mean_return),
            fmt(self.mean_thought_len),
            fmt(self.illegal_rate),
            fmt(self.mean_revkl),
            fmt(self.sft_loss),
            fmt(self.policy_loss),
            fmt(self.value_loss),
            fmt(self.entropy),
            fmt(self.clip_fraction),
            fmt(self.lr),
        ]
        .join(",")
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    pub rows: Vec<EpochMetrics>,
}

impl RunMetrics {
    pub fn push(&mut self, row: EpochMetrics) {
        if let Some(last) = self.rows.last() {
            assert!(row.epoch > last.epoch, "epochs must be strictly increasing");
            assert!(
                row.env_steps >= last.env_steps,
                "env step counter must be monotone"
            );
        }
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push_str("\r\n");
        for row in &self.rows {
            out.push_str(&row.to_csv_row());
            out.push_str("\r\n");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    pub fn write_timings(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "epoch,wall_clock_secs")?;
        for row in &self.rows {
            writeln!(f, "{},{:.3}", row.epoch, row.wall_clock_secs)?;
        }
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty file")?;
        if header.trim_end_matches('\r') != CSV_HEADER {
            return Err(format!("unexpected header {header:?}"));
        }
        let mut rows = Vec::new();
        for line in lines {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 13 {
                return Err(format!("row has {} fields", fields.len()));
            }
            let f = |i: usize| -> Result<f64, String> {
                fields[i].parse().map_err(|_| format!("bad number {:?}", fields[i]))
            };
            rows.push(EpochMetrics {
                epoch: fields[0].parse().map_err(|_| "bad epoch".to_string())?,
                env_steps: fields[1].parse().map_err(|_| "bad env_steps".to_string())?,
                success_rate: f(2)?,
                mean_return: f(3)?,
                mean_thought_len: f(4)?,
                illegal_rate: f(5)?,
                mean_revkl: f(6)?,
                sft_loss: f(7)?,
                policy_loss: f(8)?,
                value_loss: f(9)?,
                entropy: f(10)?,
                clip_fraction: f(11)?,
                lr: f(12)?,
                wall_clock_secs: 0.0,
            });
        }
        Ok(Self { rows })
    }

    /// One polyline per metric, normalized into a shared viewBox.
    pub fn to_svg(&self) -> String {
        const W: f64 = 720.0;
        const H: f64 = 360.0;
        const PAD: f64 = 30.0;
        let series: [(&str, &str, fn(&EpochMetrics) -> f64); 4] = [
            ("success_rate", "#1f77b4", |r| r.success_rate),
            ("mean_return", "#d62728", |r| r.mean_return),
            ("entropy", "#2ca02c", |r| r.entropy),
            ("mean_thought_len", "#9467bd", |r| r.mean_thought_len),
        ];
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\">\n\
             <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
        );
        let n = self.rows.len();
        for (i, (name, color, get)) in series.iter().enumerate() {
            let values: Vec<f64> = self.rows.iter().map(|r| get(r)).collect();
            let (lo, hi) = values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                    (a.min(v), b.max(v))
                });
            let span = (hi - lo).max(1e-9);
            let points: Vec<String> = values
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let x = PAD + (W - 2.0 * PAD) * k as f64 / (n.max(2) - 1) as f64;
                    let y = H - PAD - (H - 2.0 * PAD) * (v - lo) / span;
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                points.join(" ")
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"12\">{name}</text>\n",
                PAD,
                14.0 + 14.0 * i as f64
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn write_svg(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_svg())
    }
}
