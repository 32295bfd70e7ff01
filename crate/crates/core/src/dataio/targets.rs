//! Kernel-matrix target files: `{"kernels": [[[row0...], [row1...]], ...]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, DataError};
use crate::kernels::{KernelSize, WeightMatrix};

#[derive(Serialize, Deserialize)]
struct TargetFile {
    kernels: Vec<Vec<Vec<f64>>>,
}

pub fn parse_targets(text: &str) -> Result<Vec<WeightMatrix>, DataError> {
    let file: TargetFile = serde_json::from_str(text).map_err(|e| DataError::Targets(e.to_string()))?;
    if file.kernels.is_empty() {
        return Err(DataError::Targets("no kernels".into()));
    }
    let mut out = Vec::with_capacity(file.kernels.len());
    for (i, rows) in file.kernels.into_iter().enumerate() {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
            return Err(DataError::Targets(format!("kernel {i} is not a non-empty rectangular matrix")));
        }
        if let Some(first) = out.first().map(|m: &WeightMatrix| (m.h, m.w)) {
            if first != (h, w) {
                return Err(DataError::Targets(format!("kernel {i} is {h}x{w}, kernel 0 is {}x{}", first.0, first.1)));
            }
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Targets(format!("kernel {i} has non-finite entries")));
        }
        out.push(WeightMatrix::from_vec(KernelSize::new(h, w), data));
    }
    Ok(out)
}

pub fn read_targets(path: &Path) -> Result<Vec<WeightMatrix>, DataError> {
    let bytes = read_file(path)?;
    parse_targets(&String::from_utf8_lossy(&bytes))
}

pub fn targets_to_json(targets: &[WeightMatrix]) -> String {
    let kernels = targets.iter().map(|m| m.data.chunks(m.w).map(<[f64]>::to_vec).collect()).collect();
    serde_json::to_string(&TargetFile { kernels }).expect("finite values serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = WeightMatrix::from_vec(KernelSize::new(2, 3), vec![0.1, -2.0, 3.5, 1e-17, 0.0, 7.25]);
        let text = targets_to_json(&[m.clone(), m.clone()]);
        assert_eq!(parse_targets(&text).unwrap(), vec![m.clone(), m]);
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "{}",
            r#"{"kernels": []}"#,
            r#"{"kernels": [[[1.0, 2.0], [3.0]]]}"#,
            r#"{"kernels": [[[1.0]], [[1.0, 2.0]]]}"#,
            r#"{"kernels": [[]]}"#,
        ] {
            assert!(parse_targets(bad).is_err(), "{bad}");
        }
    }
}
