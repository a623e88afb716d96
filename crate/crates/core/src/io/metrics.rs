//! Per-step training metrics as CSV.

use std::io::{BufRead, Write};

use super::IoError;
use crate::trainer::MetricsRow;

pub const METRICS_HEADER: &str = "step,epoch,loss,nats_per_dim,lr,mean_t,wallclock_ms";

/// Floats use the shortest representation that parses back to the same value.
pub fn format_row(r: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.step, r.epoch, r.loss, r.nats_per_dim, r.lr, r.mean_t, r.wallclock_ms
    )
}

pub fn parse_row(line: &str) -> Result<MetricsRow, IoError> {
    let f: Vec<&str> = line.trim().split(',').collect();
    let bad = || IoError::Format(format!("malformed metrics row {line:?}"));
    if f.len() != 7 {
        return Err(bad());
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
    let int = |s: &str| s.parse::<u64>().map_err(|_| bad());
    Ok(MetricsRow {
        step: int(f[0])?,
        epoch: int(f[1])?,
        loss: num(f[2])?,
        nats_per_dim: num(f[3])?,
        lr: num(f[4])?,
        mean_t: num(f[5])?,
        wallclock_ms: int(f[6])?,
    })
}

/// Streams rows to `W`, writing the header first.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    /// Continues an existing file whose header is already written.
    pub fn resume(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, row: &MetricsRow) -> std::io::Result<()> {
        writeln!(self.out, "{}", format_row(row))
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_metrics(input: impl BufRead) -> Result<Vec<MetricsRow>, IoError> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(METRICS_HEADER) {
        return Err(IoError::Format("metrics file lacks the header row".into()));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(parse_row(&line)?);
        }
    }
    Ok(rows)
}
