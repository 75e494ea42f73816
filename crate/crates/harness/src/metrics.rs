//! Per-step training metrics as CSV.
//!
//! Columns, in order: `step, epoch, lr, ema_m, total_loss, loss_l0..,
//! weight_l0.., pos_cos, neg_cos, wall_time`. A level that did not
//! contribute (batch too small) has empty loss and weight cells; the
//! supervised objective leaves the cosine cells empty.

use std::fs::OpenOptions;
use std::path::Path;

use anyhow::{ensure, Context};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// 0-based epoch the step belongs to.
    pub epoch: usize,
    pub lr: f64,
    /// EMA momentum; absent for the supervised objective.
    pub ema_m: Option<f64>,
    pub total_loss: f64,
    /// Unweighted loss of each level.
    pub level_losses: Vec<Option<f64>>,
    pub level_weights: Vec<Option<f64>>,
    pub pos_cos: Option<f64>,
    pub neg_cos: Option<f64>,
    /// Seconds since the run (or resumed run) started.
    pub wall_time: f64,
}

pub fn header(levels: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "epoch", "lr", "ema_m", "total_loss"].map(String::from).to_vec();
    h.extend((0..levels).map(|l| format!("loss_l{l}")));
    h.extend((0..levels).map(|l| format!("weight_l{l}")));
    h.extend(["pos_cos", "neg_cos", "wall_time"].map(String::from));
    h
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.step.to_string(),
            self.epoch.to_string(),
            self.lr.to_string(),
            cell(self.ema_m),
            self.total_loss.to_string(),
        ];
        r.extend(self.level_losses.iter().map(|&v| cell(v)));
        r.extend(self.level_weights.iter().map(|&v| cell(v)));
        r.extend([cell(self.pos_cos), cell(self.neg_cos), self.wall_time.to_string()]);
        r
    }

    fn parse(rec: &csv::StringRecord, levels: usize) -> anyhow::Result<Self> {
        ensure!(rec.len() == 8 + 2 * levels, "metrics row has {} cells, expected {}", rec.len(), 8 + 2 * levels);
        let opt = |i: usize| -> anyhow::Result<Option<f64>> {
            let s = &rec[i];
            Ok(if s.is_empty() { None } else { Some(s.parse()?) })
        };
        let num = |i: usize| -> anyhow::Result<f64> { opt(i)?.with_context(|| format!("empty cell {i}")) };
        Ok(Self {
            step: rec[0].parse()?,
            epoch: rec[1].parse()?,
            lr: num(2)?,
            ema_m: opt(3)?,
            total_loss: num(4)?,
            level_losses: (0..levels).map(|l| opt(5 + l)).collect::<anyhow::Result<_>>()?,
            level_weights: (0..levels).map(|l| opt(5 + levels + l)).collect::<anyhow::Result<_>>()?,
            pos_cos: opt(5 + 2 * levels)?,
            neg_cos: opt(6 + 2 * levels)?,
            wall_time: num(7 + 2 * levels)?,
        })
    }

    /// `sum_l weight_l * loss_l`.
    pub fn weighted_sum(&self) -> f64 {
        self.level_losses
            .iter()
            .zip(&self.level_weights)
            .filter_map(|(l, w)| Some((*l)? * (*w)?))
            .sum()
    }
}

/// Appends rows; on creation writes the header.
pub struct MetricsWriter {
    inner: csv::Writer<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, levels: usize) -> anyhow::Result<Self> {
        let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut inner = csv::Writer::from_writer(f);
        inner.write_record(header(levels))?;
        inner.flush()?;
        Ok(Self { inner })
    }

    /// Keeps only the rows with `step < from_step` and continues after them,
    /// so a resumed run rewrites whatever was logged past its checkpoint.
    pub fn resume(path: &Path, levels: usize, from_step: usize) -> anyhow::Result<Self> {
        let kept: Vec<MetricsRow> = if path.exists() {
            read(path)?.into_iter().filter(|r| r.step < from_step).collect()
        } else {
            vec![]
        };
        let mut w = Self::create(path, levels)?;
        for r in &kept {
            w.append(r)?;
        }
        drop(w);
        let f = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            inner: csv::WriterBuilder::new().has_headers(false).from_writer(f),
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> anyhow::Result<()> {
        self.inner.write_record(row.record())?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read(path: &Path) -> anyhow::Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let levels = r.headers()?.iter().filter(|h| h.starts_with("loss_l")).count();
    ensure!(r.headers()?.iter().collect::<Vec<_>>() == header(levels), "unexpected metrics header in {}", path.display());
    r.records().map(|rec| MetricsRow::parse(&rec?, levels)).collect()
}

/// Mean of `f` over `rows`, skipping `None`.
pub fn mean_of(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(f).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize) -> MetricsRow {
        MetricsRow {
            step,
            epoch: step / 3,
            lr: 0.1 * step as f64,
            ema_m: Some(0.99),
            total_loss: 2.0,
            level_losses: vec![Some(2.0), Some(4.0), None],
            level_weights: vec![Some(0.5), Some(0.25), None],
            pos_cos: Some(0.5),
            neg_cos: Some(-0.01),
            wall_time: 1.5,
        }
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&p, 3).unwrap();
        for s in 0..4 {
            w.append(&row(s)).unwrap();
        }
        drop(w);
        let rows = read(&p).unwrap();
        assert_eq!(rows, (0..4).map(row).collect::<Vec<_>>());
        assert!((rows[0].weighted_sum() - 2.0).abs() < 1e-12);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,epoch,lr,ema_m,total_loss,loss_l0,loss_l1,loss_l2,weight_l0,weight_l1,weight_l2,pos_cos,neg_cos,wall_time\n"));
    }

    #[test]
    fn resume_truncates_later_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&p, 3).unwrap();
        for s in 0..5 {
            w.append(&row(s)).unwrap();
        }
        drop(w);
        let mut w = MetricsWriter::resume(&p, 3, 3).unwrap();
        w.append(&row(3)).unwrap();
        drop(w);
        let steps: Vec<usize> = read(&p).unwrap().iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 1, 2, 3]);
    }
}
