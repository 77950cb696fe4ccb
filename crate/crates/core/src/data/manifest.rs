//! Plain-text dataset manifests: one `path<TAB>label<TAB>domain` record per
//! line, paths relative to the manifest's directory. Lines starting with `#`
//! are comments.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::{preprocess_file, Dataset, Normalization, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: usize,
    pub domain: usize,
}

fn data_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, label, domain] = fields[..] else {
            return Err(data_err(origin, format!("line {}: expected 3 tab-separated fields", lineno + 1)));
        };
        let num = |s: &str, what: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| data_err(origin, format!("line {}: bad {what} {s:?}", lineno + 1)))
        };
        out.push(ManifestRecord {
            path: PathBuf::from(path),
            label: num(label, "label")?,
            domain: num(domain, "domain")?,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::from("# path\tlabel\tdomain\n");
    for r in records {
        let p = r.path.to_str().ok_or_else(|| data_err(&r.path, "path is not UTF-8"))?;
        if p.contains('\t') || p.contains('\n') {
            return Err(data_err(&r.path, "path contains a tab or newline"));
        }
        text.push_str(&format!("{p}\t{}\t{}\n", r.label, r.domain));
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(text.as_bytes())?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Loads every record, skipping (and logging) files that fail to decode.
/// Sample ids are the record positions in the manifest.
pub fn read_manifest(path: &Path, image_size: usize, norm: &Normalization) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e.to_string()))?;
    let records = parse_manifest(&text, path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        match preprocess_file(&root.join(&r.path), image_size, norm) {
            Ok(image) => samples.push(Sample {
                id: i as u64,
                image,
                label: r.label,
                domain: r.domain,
            }),
            Err(e) => log::warn!("skipping {}: {e}", r.path.display()),
        }
    }
    Dataset::new(samples)
}

/// Writes each (normalized, 3-channel) sample as an 8-bit PNG under `dir`,
/// undoing `norm`, and returns the matching manifest records.
pub fn write_dataset_pngs(dataset: &Dataset, dir: &Path, norm: &Normalization) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        let shape = s.image.shape();
        if shape[0] != 3 {
            return Err(Error::Shape("PNG export needs 3-channel images".into()));
        }
        let (h, w) = (shape[1], shape[2]);
        let hw = h * w;
        let d = s.image.data();
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            let px = |c: usize| {
                let v = d[c * hw + i] * norm.std[c] + norm.mean[c];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            Rgb([px(0), px(1), px(2)])
        });
        let rel = PathBuf::from(format!("domain{}", s.domain)).join(format!("{:08x}_c{}.png", s.id, s.label));
        let full = dir.join(&rel);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent)?;
        }
        img.save(&full).map_err(|e| data_err(&full, e.to_string()))?;
        records.push(ManifestRecord {
            path: rel,
            label: s.label,
            domain: s.domain,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_domains, SyntheticDomainSpec};

    #[test]
    fn round_trip_through_pngs() {
        let spec = SyntheticDomainSpec::default();
        let ds = generate_synthetic_domains(&spec, 1, 2).unwrap().remove(0);
        let dir = tempfile::tempdir().unwrap();
        let records = write_dataset_pngs(&ds, dir.path(), &spec.normalization).unwrap();
        let mpath = dir.path().join("manifest.tsv");
        write_manifest(&mpath, &records).unwrap();
        let back = read_manifest(&mpath, 16, &spec.normalization).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.samples().iter().zip(ds.samples()) {
            // 8-bit quantization only.
            assert!(a.image.max_abs_diff(&b.image) < 1.0 / 255.0 / 0.224 + 1e-9);
        }
    }

    #[test]
    fn corrupt_entries_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad.png"), b"junk").unwrap();
        let mpath = dir.path().join("m.tsv");
        fs::write(&mpath, "bad.png\t0\t0\n").unwrap();
        assert!(read_manifest(&mpath, 8, &Normalization::IMAGENET).unwrap().is_empty());
    }

    #[test]
    fn malformed_lines_rejected() {
        let p = Path::new("m.tsv");
        assert!(parse_manifest("a.png\t1\n", p).is_err());
        assert!(parse_manifest("a.png\tx\t0\n", p).is_err());
        let ok = parse_manifest("# header\n\na.png\t3\t1\n", p).unwrap();
        assert_eq!(ok, vec![ManifestRecord { path: "a.png".into(), label: 3, domain: 1 }]);
    }
}
