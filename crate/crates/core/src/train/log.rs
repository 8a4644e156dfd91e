//! Per-epoch training log written as CSV.

use std::io::Write;

use crate::error::{Error, Result};

pub const LOG_HEADER: [&str; 7] = ["epoch", "step", "train_loss", "val_mae", "val_rmse", "lr", "skipped_steps"];

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    /// Global optimizer step at the end of the epoch.
    pub step: usize,
    pub train_loss: f64,
    pub val_mae: Option<f64>,
    pub val_rmse: Option<f64>,
    pub lr: f64,
    pub skipped_steps: usize,
}

pub struct TrainLog<W: Write> {
    w: csv::Writer<W>,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv write failed: {e}"))
}

impl<W: Write> TrainLog<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(LOG_HEADER).map_err(csv_err)?;
        w.flush()?;
        Ok(Self { w })
    }

    pub fn write(&mut self, r: &LogRow) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        self.w
            .write_record([
                r.epoch.to_string(),
                r.step.to_string(),
                format!("{:.6}", r.train_loss),
                opt(r.val_mae),
                opt(r.val_rmse),
                format!("{:e}", r.lr),
                r.skipped_steps.to_string(),
            ])
            .map_err(csv_err)?;
        self.w.flush()?;
        Ok(())
    }
}

pub(crate) fn warn_flagged(epoch: usize, skipped: usize, steps: usize) {
    ::log::warn!("epoch {epoch}: skipped {skipped} of {steps} steps on non-finite values");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows() {
        let mut buf = Vec::new();
        {
            let mut log = TrainLog::new(&mut buf).unwrap();
            let row = LogRow {
                epoch: 1,
                step: 40,
                train_loss: 0.25,
                val_mae: Some(0.5),
                val_rmse: None,
                lr: 1e-3,
                skipped_steps: 0,
            };
            log.write(&row).unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,step,train_loss,val_mae,val_rmse,lr,skipped_steps\n1,40,0.250000,0.500000,,1e-3,0\n");
    }
}
