use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const HEADER: &str = "path,score";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub score: f64,
}

/// Volume paths with their reference quality scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }
}

/// Reads a `path,score` CSV. Relative paths are resolved against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub(crate) fn parse_manifest(text: &str, base: &Path) -> Result<Manifest> {
    let first = text.lines().next().unwrap_or("");
    if first.strip_suffix('\r').unwrap_or(first) != HEADER {
        return Err(Error::Format(format!(
            "line 1: expected header {HEADER:?}, found {first:?}"
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Format(format!("line {line}: {e}"))
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 2 {
            return Err(Error::Format(format!("line {line}: expected 2 fields, got {}", row.len())));
        }
        let raw_score = row[1].trim();
        let score: f64 = raw_score
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| Error::Format(format!("line {line}: score {raw_score:?} is not a finite number")))?;
        let rel = Path::new(&row[0]);
        let resolved = if rel.is_absolute() { rel.to_path_buf() } else { base.join(rel) };
        if !seen.insert(resolved.clone()) {
            return Err(Error::Format(format!(
                "line {line}: duplicate path {}",
                resolved.display()
            )));
        }
        records.push(ManifestRecord { path: resolved, score });
    }
    Ok(Manifest { records })
}

/// Writes records with paths exactly as given.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(["path", "score"]).map_err(csv_err)?;
    for r in records {
        w.write_record([r.path.to_string_lossy().as_ref(), &r.score.to_string()])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_of(e: Error) -> String {
        match e {
            Error::Format(m) => m,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn single_record_resolves_against_base() {
        let m = parse_manifest("path,score\nvol/a.hvol,3.5\n", Path::new("/data")).unwrap();
        assert_eq!(m.records, vec![ManifestRecord { path: "/data/vol/a.hvol".into(), score: 3.5 }]);
        let m = parse_manifest("path,score\r\n/abs/b.hvol,1\r\n", Path::new("/data")).unwrap();
        assert_eq!(m.records[0].path, PathBuf::from("/abs/b.hvol"));
    }

    #[test]
    fn bad_score_cites_line() {
        let m = line_of(parse_manifest("path,score\na,1\nb,abc\n", Path::new("")).unwrap_err());
        assert!(m.contains("line 3"), "{m}");
        let m = line_of(parse_manifest("path,score\na,NaN\n", Path::new("")).unwrap_err());
        assert!(m.contains("line 2"), "{m}");
    }

    #[test]
    fn duplicates_and_missing_header_are_rejected() {
        let m = line_of(parse_manifest("path,score\na,1\na,2\n", Path::new("")).unwrap_err());
        assert!(m.contains("duplicate") && m.contains("line 3"), "{m}");
        let m = line_of(parse_manifest("a,1\n", Path::new("")).unwrap_err());
        assert!(m.contains("line 1"), "{m}");
        assert!(parse_manifest("", Path::new("")).is_err());
    }

    #[test]
    fn write_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            ManifestRecord { path: "a.hvol".into(), score: 0.1 + 0.2 },
            ManifestRecord { path: "sub/b,c.hvol".into(), score: 1e-300 },
        ];
        let path = dir.path().join("m.csv");
        write_manifest(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("path,score\n"));
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.records[0].path, dir.path().join("a.hvol"));
        assert_eq!(back.scores(), vec![0.1 + 0.2, 1e-300]);
    }
}
