//! Run directory layout:
//!
//! - `config.json` — the resolved configuration
//! - `metrics.jsonl` / `metrics.csv` — one record per epoch
//! - `checkpoint.knet` — final network
//! - `summary.json` — final metrics and analytic FLOPs
//! - `timing.json` — wall-clock time, kept apart so the other files are
//!   byte-identical across reruns

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use kronsparse::train::MetricRecord;
use kronsparse::Network;
use serde::Serialize;

pub struct RunDir {
    root: PathBuf,
}

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.root.join(name), text)?;
        Ok(())
    }

    pub fn write_lines<T: Serialize>(&self, name: &str, items: &[T]) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(self.root.join(name))?);
        for item in items {
            serde_json::to_writer(&mut w, item)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_metrics(&self, records: &[MetricRecord]) -> Result<()> {
        self.write_lines("metrics.jsonl", records)?;
        // the header comes from the struct's field order
        let mut w = csv::Writer::from_path(self.root.join("metrics.csv"))?;
        for r in records {
            w.serialize(r)?;
        }
        if records.is_empty() {
            w.write_record(MetricRecord::COLUMNS)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_checkpoint(&self, net: &Network) -> Result<()> {
        kronsparse::io::save_network(&self.root.join("checkpoint.knet"), net)?;
        Ok(())
    }

    pub fn write_timing(&self, elapsed: Duration) -> Result<()> {
        self.write_json("timing.json", &serde_json::json!({ "wall_seconds": elapsed.as_secs_f64() }))
    }
}
