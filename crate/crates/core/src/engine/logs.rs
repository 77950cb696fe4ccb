//! Line-delimited JSON loss logs: one `{"step", "component", "value"}`
//! record per line.

use std::fs;
use std::path::Path;

use super::checkpoint::write_atomic;
use super::train::LossRecord;
use crate::error::{Error, Result};

pub fn encode_loss_log(records: &[LossRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    write_atomic(path, encode_loss_log(records)?.as_bytes())
}

pub fn parse_loss_log(text: &str, origin: &Path) -> Result<Vec<LossRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data {
                path: origin.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_loss_log(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let recs = vec![
            LossRecord { step: 0, component: "ce".into(), value: 1.5 },
            LossRecord { step: 0, component: "disc".into(), value: -0.25 },
        ];
        let text = encode_loss_log(&recs).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_loss_log(&text, Path::new("x")).unwrap(), recs);
        let err = parse_loss_log("{\"step\":1}\n", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
