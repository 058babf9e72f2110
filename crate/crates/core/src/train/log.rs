use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::Stage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    /// `dev_per` or `dev_mer`.
    pub metric: &'static str,
    pub value: Option<f64>,
}

/// Training metrics kept in memory and, with a directory, appended to
/// `steps.csv` and `epochs.csv`.
#[derive(Debug, Default)]
pub struct MetricsLog {
    pub steps: Vec<StepRow>,
    pub epochs: Vec<EpochRow>,
    dir: Option<PathBuf>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_dir(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, header) in [("steps.csv", "step,stage,lr,loss"), ("epochs.csv", "stage,epoch,train_loss,metric,value")] {
            let path = dir.join(file);
            if !path.exists() {
                let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(f, "{header}").map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(MetricsLog {
            dir: Some(dir.to_path_buf()),
            ..Self::default()
        })
    }

    fn append(&self, file: &str, line: String) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(file);
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    pub fn step(&mut self, row: StepRow) -> Result<()> {
        self.append("steps.csv", format!("{},{},{:e},{}", row.step, row.stage, row.lr, row.loss))?;
        self.steps.push(row);
        Ok(())
    }

    pub fn epoch(&mut self, row: EpochRow) -> Result<()> {
        let value = row.value.map(|v| v.to_string()).unwrap_or_default();
        self.append(
            "epochs.csv",
            format!("{},{},{},{},{}", row.stage, row.epoch, row.train_loss, row.metric, value),
        )?;
        log::info!(
            "{} epoch {}: train loss {:.4}{}",
            row.stage,
            row.epoch,
            row.train_loss,
            row.value.map(|v| format!(", {} {:.2}%", row.metric, 100.0 * v)).unwrap_or_default()
        );
        self.epochs.push(row);
        Ok(())
    }
}
