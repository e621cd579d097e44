//! CSV tables and JSON checkpoints.
//!
//! Every CSV starts with a fixed header, uses `.` as the decimal separator
//! and leaves missing values empty. Per-task losses are totals over the
//! `d_T` outputs; `loss_norm` divides the per-dimension loss by the
//! per-dimension mean-predictor loss.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::injection::RetentionCell;
use crate::oracle::OracleReport;
use crate::student::{DecoderSet, Encoder, StudentModel};
use crate::trainer::TrainLog;

pub const TRAINLOG_HEADER: [&str; 9] =
    ["step", "task", "loss", "loss_norm", "signal", "signal_norm", "residual_F", "grad_norm", "grad_cos"];
pub const ORACLE_HEADER: [&str; 5] = ["width", "task", "n_k", "loss_star", "utility_rank"];
pub const RETENTION_HEADER: [&str; 9] =
    ["width", "gap", "seed", "step", "signal_rare_norm", "signal_freq_norm", "gain", "decay", "grad_cos"];

/// One row of a TrainLog CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub task: usize,
    pub loss: f64,
    pub loss_norm: f64,
    pub signal: f64,
    pub signal_norm: f64,
    #[serde(rename = "residual_F")]
    pub residual_f: f64,
    pub grad_norm: f64,
    pub grad_cos: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub width: usize,
    pub task: usize,
    pub n_k: usize,
    pub loss_star: f64,
    /// 1-based rank of the task's leading feature among all utilities.
    pub utility_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub width: usize,
    pub gap: usize,
    pub seed: usize,
    pub step: usize,
    pub signal_rare_norm: f64,
    pub signal_freq_norm: f64,
    /// Jump across the injection at this step.
    pub gain: Option<f64>,
    /// Change since the previous injection, on the last row before the next.
    pub decay: Option<f64>,
    pub grad_cos: Option<f64>,
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = writer(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(LabError::from)).collect()
}

pub fn trainlog_rows(log: &TrainLog) -> Vec<TrainLogRow> {
    log.records
        .iter()
        .flat_map(|rec| {
            (0..rec.task_loss.len()).map(move |k| TrainLogRow {
                step: rec.step,
                task: k,
                loss: rec.task_loss[k],
                loss_norm: rec.loss_norm[k],
                signal: rec.signal[k],
                signal_norm: rec.signal_norm[k],
                residual_f: rec.residual_f,
                grad_norm: rec.grad_norm,
                grad_cos: rec.grad_cos,
            })
        })
        .collect()
}

pub fn write_trainlog(path: &Path, log: &TrainLog) -> Result<()> {
    write_rows(path, &TRAINLOG_HEADER, &trainlog_rows(log))
}

pub fn oracle_rows(report: &OracleReport) -> Vec<OracleRow> {
    let k = report.widths.first().map(|w| w.retained.len()).unwrap_or(0);
    let lead_rank: Vec<usize> =
        (0..k).map(|t| report.utilities.rank_of(t, 0).map(|r| r + 1).unwrap_or(0)).collect();
    report
        .widths
        .iter()
        .flat_map(|w| {
            let lead_rank = &lead_rank;
            (0..w.retained.len()).map(move |t| OracleRow {
                width: w.width,
                task: t,
                n_k: w.retained[t],
                loss_star: w.task_loss[t],
                utility_rank: lead_rank[t],
            })
        })
        .collect()
}

pub fn write_oracle(path: &Path, report: &OracleReport) -> Result<()> {
    write_rows(path, &ORACLE_HEADER, &oracle_rows(report))
}

pub fn retention_rows(cell: &RetentionCell) -> Vec<RetentionRow> {
    let gains = &cell.gain_decay.gains;
    let decays = &cell.gain_decay.decays;
    // decay for the window ending at injection t sits on the last row before t
    let decay_row = |t: usize| cell.points.iter().rev().find(|p| p.step < t).map(|p| p.step);
    let decay_at: Vec<(usize, f64)> = decays.iter().filter_map(|&(t, d)| decay_row(t).map(|s| (s, d))).collect();
    cell.points
        .iter()
        .map(|p| RetentionRow {
            width: cell.width,
            gap: cell.gap,
            seed: cell.seed,
            step: p.step,
            signal_rare_norm: p.signal_rare_norm,
            signal_freq_norm: p.signal_freq_norm,
            gain: gains.iter().find(|g| g.0 == p.step).map(|g| g.1),
            decay: decay_at.iter().find(|d| d.0 == p.step).map(|d| d.1),
            grad_cos: p.grad_cos,
        })
        .collect()
}

pub fn write_retention(path: &Path, cells: &[&RetentionCell]) -> Result<()> {
    let rows: Vec<RetentionRow> = cells.iter().flat_map(|c| retention_rows(c)).collect();
    write_rows(path, &RETENTION_HEADER, &rows)
}

/// Generic CSV for auxiliary tables.
pub fn write_table<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    write_rows(path, header, rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointShape {
    pub ambient_dim: usize,
    pub num_tasks: usize,
    pub block_dim: usize,
    pub width: usize,
}

/// Student weights as JSON: a shape header, the config hash, the encoder
/// as `N` rows of length `D`, and each decoder as `d_T` rows of length `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub shape: CheckpointShape,
    pub config_hash: String,
    pub encoder: Vec<Vec<f64>>,
    pub decoders: Vec<Vec<Vec<f64>>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(LabError::InvalidArgument(format!("checkpoint {what} does not match shape {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl Checkpoint {
    pub fn from_student(student: &StudentModel, block_dim: usize, config_hash: &str) -> Self {
        let w = &student.encoder.weights;
        Checkpoint {
            shape: CheckpointShape {
                ambient_dim: w.ncols(),
                num_tasks: student.num_tasks(),
                block_dim,
                width: w.nrows(),
            },
            config_hash: config_hash.to_string(),
            encoder: rows_of(w),
            decoders: student.decoders.mats.iter().map(rows_of).collect(),
        }
    }

    pub fn to_student(&self) -> Result<StudentModel> {
        let s = self.shape;
        let w = matrix_from(&self.encoder, s.width, s.ambient_dim, "encoder")?;
        if self.decoders.len() != s.num_tasks {
            return Err(LabError::InvalidArgument(format!(
                "checkpoint has {} decoders, shape says {}",
                self.decoders.len(),
                s.num_tasks
            )));
        }
        let mats = self
            .decoders
            .iter()
            .map(|d| matrix_from(d, s.block_dim, s.width, "decoder"))
            .collect::<Result<Vec<_>>>()?;
        Ok(StudentModel { encoder: Encoder::new(w), decoders: DecoderSet { mats } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{build_mixture, MixtureSpec};
    use crate::oracle::OracleReport;
    use crate::student::init_student;
    use crate::trainer::{train, MixtureStream, TrainConfig};
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = init_student(10, 3, 2, 4, &mut Xoshiro256PlusPlus::seed_from_u64(1)).unwrap();
        let ck = Checkpoint::from_student(&s, 2, "abc");
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config_hash, "abc");
        let s2 = back.to_student().unwrap();
        assert_eq!(s2.encoder.weights, s.encoder.weights);
        assert_eq!(s2.decoders.mats, s.decoders.mats);
        let mut broken = back.clone();
        broken.shape.width = 5;
        assert!(broken.to_student().is_err());
    }

    #[test]
    fn trainlog_csv_has_exact_header_and_rows() {
        let m = build_mixture(MixtureSpec::uniform(12, 3, 2, 1.0, 2.0), 0).unwrap();
        let mut s = init_student(12, 3, 2, 3, &mut Xoshiro256PlusPlus::seed_from_u64(1)).unwrap();
        let cfg = TrainConfig { steps: 20, batch_size: 16, eval_every: 10, ..TrainConfig::default() };
        let log = train(&m, &mut s, &cfg, &[0], &mut MixtureStream::new(&m, 16, 2), &mut []).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_trainlog(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), TRAINLOG_HEADER.join(","));
        let rows: Vec<TrainLogRow> = read_rows(&path).unwrap();
        assert_eq!(rows.len(), 3 * 3);
        assert_eq!(rows, trainlog_rows(&log));
        assert!(rows[0].grad_cos.is_none());
    }

    #[test]
    fn oracle_csv() {
        let m = build_mixture(MixtureSpec::uniform(4, 2, 2, 1.0, 2.0), 0).unwrap();
        let rep = OracleReport::build(&m, &[1, 2], 0.5).unwrap();
        let rows = oracle_rows(&rep);
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[0].n_k, rows[1].n_k), (1, 0));
        assert_eq!((rows[0].utility_rank, rows[1].utility_rank), (1, 2));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.csv");
        write_oracle(&path, &rep).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), ORACLE_HEADER.join(","));
    }

    #[test]
    fn empty_tables_still_carry_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_retention(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().trim(), RETENTION_HEADER.join(","));
    }
}
