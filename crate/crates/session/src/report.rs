//! Session log (JSON lines), per-epoch table and plot data.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::Path;

use crate::engine::{EpochSummary, InteractionRecord};
use crate::error::{Result, SessionError};

pub const LOG_FILE: &str = "session.jsonl";
pub const REPORT_FILE: &str = "report.tsv";
pub const CURVE_FILE: &str = "curve.dat";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.xt";
pub const SOM_MAP_FILE: &str = "som_map.txt";

/// Append-only JSON-lines writer, flushed after every record.
pub struct LogWriter {
    file: File,
    bytes: u64,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: File::create(path)?,
            bytes: 0,
        })
    }

    /// Opens an existing log, dropping anything past `bytes`.
    pub fn resume(path: &Path, bytes: u64) -> Result<Self> {
        let file = OpenOptions::new().write(true).open(path)?;
        if file.metadata()?.len() < bytes {
            return Err(SessionError::ResumeMismatch(format!(
                "{} is shorter than the checkpointed {bytes} bytes",
                path.display()
            )));
        }
        file.set_len(bytes)?;
        let mut w = Self { file, bytes };
        w.file.seek(SeekFrom::Start(bytes))?;
        Ok(w)
    }

    pub fn append(&mut self, record: &InteractionRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).expect("records serialize");
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        self.bytes += line.len() as u64;
        Ok(())
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }
}

pub fn read_log(path: &Path) -> Result<Vec<InteractionRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| SessionError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Epoch summaries recomputed from raw records; a trailing partial epoch is
/// left out.
pub fn summarize(records: &[InteractionRecord], interactions_per_epoch: usize) -> Result<Vec<EpochSummary>> {
    records
        .chunks(interactions_per_epoch)
        .filter(|c| c.len() == interactions_per_epoch)
        .enumerate()
        .map(|(i, c)| Ok(EpochSummary::from_records(i + 1, c)?))
        .collect()
}

/// First epoch whose greedy accuracy reaches `threshold`.
pub fn converged_epoch(epochs: &[EpochSummary], threshold: f64) -> Option<usize> {
    epochs
        .iter()
        .find(|e| e.accuracy.is_some_and(|a| a >= threshold))
        .map(|e| e.epoch)
}

/// Number of interactions after which the trailing `window` interactions
/// first reach `threshold` greedy accuracy.
pub fn converged_interaction(records: &[InteractionRecord], window: usize, threshold: f64) -> Option<u64> {
    let hits: Vec<u32> = records
        .iter()
        .map(|r| u32::from(r.correct().unwrap_or(false)))
        .collect();
    if window == 0 || hits.len() < window {
        return None;
    }
    let mut sum: u32 = hits[..window].iter().sum();
    let need = |s: u32| s as f64 / window as f64 >= threshold;
    if need(sum) {
        return Some(window as u64);
    }
    for i in window..hits.len() {
        sum = sum + hits[i] - hits[i - window];
        if need(sum) {
            return Some(i as u64 + 1);
        }
    }
    None
}

fn fmt_accuracy(a: Option<f64>) -> String {
    a.map_or_else(|| "NA".to_owned(), |v| v.to_string())
}

pub fn report_tsv(epochs: &[EpochSummary]) -> String {
    let mut s = String::from("epoch\tavg_cost\taccuracy\n");
    for e in epochs {
        s.push_str(&format!("{}\t{}\t{}\n", e.epoch, e.avg_cost, fmt_accuracy(e.accuracy)));
    }
    s
}

pub fn curve_dat(epochs: &[EpochSummary]) -> String {
    let mut s = String::from("# epoch interactions avg_cost accuracy\n");
    let mut total = 0;
    for e in epochs {
        total += e.interactions;
        s.push_str(&format!("{} {} {} {}\n", e.epoch, total, e.avg_cost, fmt_accuracy(e.accuracy)));
    }
    s
}

pub fn write_reports(dir: &Path, epochs: &[EpochSummary]) -> Result<()> {
    std::fs::write(dir.join(REPORT_FILE), report_tsv(epochs))?;
    std::fs::write(dir.join(CURVE_FILE), curve_dat(epochs))?;
    Ok(())
}

/// Parses a report table back into `(epoch, avg_cost, accuracy)` rows.
pub fn parse_report(text: &str) -> Result<Vec<(usize, f64, Option<f64>)>> {
    let bad = |line: &str| SessionError::Config(format!("malformed report line {line:?}"));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(line));
            }
            let acc = match f[2] {
                "NA" => None,
                v => Some(v.parse().map_err(|_| bad(line))?),
            };
            Ok((f[0].parse().map_err(|_| bad(line))?, f[1].parse().map_err(|_| bad(line))?, acc))
        })
        .collect()
}
