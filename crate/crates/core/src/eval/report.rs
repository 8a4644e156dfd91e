use std::io::Write;
use std::path::Path;

use crate::data::DriftKind;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::metrics::MetricReport;

pub const REPORT_HEADER: [&str; 8] = ["run_id", "split", "horizon", "drift_kind", "memory", "mae", "rmse", "n"];

/// Writes report rows (with a header) as CSV.
pub fn write_reports<W: Write>(out: W, run_id: &str, split: Split, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Data(format!("csv write failed: {e}"));
    w.write_record(REPORT_HEADER).map_err(io)?;
    for r in reports {
        let kind = r.drift.map(|d| d.kind).unwrap_or(DriftKind::None);
        w.write_record([
            run_id.to_string(),
            split.name().to_string(),
            r.horizon.to_string(),
            kind.name().to_string(),
            if r.memory_enabled { "on" } else { "off" }.to_string(),
            format!("{:.6}", r.mae),
            format!("{:.6}", r.rmse),
            r.n_samples.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// 16-bit binary PGM of `map [H, W]` scaled linearly from `[0, max]`.
/// Returns `max`.
pub fn pgm16_bytes(map: &Tensor<f64>) -> Result<(Vec<u8>, f64)> {
    map.expect_shape_rank(2, "heatmap")?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let max = map.data().iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in map.data() {
        let q = if max > 0.0 { (v.max(0.0) / max * 65535.0).round() as u16 } else { 0 };
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok((out, max))
}

/// Writes `path` and a sidecar `path.max.txt` holding the scale maximum.
pub fn write_heatmap(map: &Tensor<f64>, path: impl AsRef<Path>) -> Result<f64> {
    let path = path.as_ref();
    let (bytes, max) = pgm16_bytes(map)?;
    std::fs::write(path, bytes)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".max.txt");
    std::fs::write(side, format!("{max:e}\n"))?;
    Ok(max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DriftSpec;

    #[test]
    fn csv_rows() {
        let r = MetricReport {
            mae: 1.5,
            rmse: 2.0,
            horizon: 1,
            n_samples: 40,
            drift: Some(DriftSpec::of(DriftKind::ScaleOffset)),
            memory_enabled: true,
        };
        let mut buf = Vec::new();
        write_reports(&mut buf, "r1", Split::Test, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "run_id,split,horizon,drift_kind,memory,mae,rmse,n\nr1,test,1,scale_offset,on,1.500000,2.000000,40\n");
    }

    #[test]
    fn pgm_layout() {
        let map = Tensor::new(vec![1, 3], vec![0.0, 0.5, 2.0]).unwrap();
        let (b, max) = pgm16_bytes(&map).unwrap();
        assert_eq!(max, 2.0);
        let header = b"P5\n3 1\n65535\n";
        assert_eq!(&b[..header.len()], header);
        let px: Vec<u16> = b[header.len()..].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        assert_eq!(px, vec![0, 16384, 65535]);
    }
}
