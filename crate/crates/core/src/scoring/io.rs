//! Score files: one `#`-prefixed provenance line, then CSV with columns
//! `source_id,label,sse[,fid]`. Floats use the shortest representation
//! that parses back to the same value.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dataset::Label;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub source_id: String,
    pub label: Label,
    pub sse: f64,
    pub fid: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScoreFileMeta {
    pub artifact_version: String,
    pub checkpoint_sha256: String,
    pub extractor: Option<String>,
}

const TAG: &str = "# cyclegan-ad scores";

impl ScoreFileMeta {
    fn to_line(&self) -> String {
        let mut s = format!("{TAG} version={} checkpoint_sha256={}", self.artifact_version, self.checkpoint_sha256);
        if let Some(e) = &self.extractor {
            s.push_str(&format!(" extractor={}", e.replace(char::is_whitespace, "_")));
        }
        s
    }

    fn parse(line: &str) -> Result<Self> {
        let rest = line.strip_prefix(TAG).ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing score-file header line".into(),
        })?;
        let mut meta = ScoreFileMeta::default();
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("version", v)) => meta.artifact_version = v.into(),
                Some(("checkpoint_sha256", v)) => meta.checkpoint_sha256 = v.into(),
                Some(("extractor", v)) => meta.extractor = Some(v.into()),
                _ => {}
            }
        }
        Ok(meta)
    }
}

pub fn write_scores(path: &Path, meta: &ScoreFileMeta, records: &[ScoreRecord]) -> Result<()> {
    let with_fid = records.iter().any(|r| r.fid.is_some());
    if with_fid && records.iter().any(|r| r.fid.is_none()) {
        return Err(Error::Config("either every record or none must carry an FID score".into()));
    }
    let mut out = Vec::new();
    writeln!(out, "{}", meta.to_line())?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec!["source_id", "label", "sse"];
        if with_fid {
            header.push("fid");
        }
        w.write_record(&header)?;
        for r in records {
            let mut row = vec![r.source_id.clone(), r.label.to_string(), r.sse.to_string()];
            if let Some(f) = r.fid {
                row.push(f.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::file(path, e))
}

pub fn read_scores(path: &Path) -> Result<(ScoreFileMeta, Vec<ScoreRecord>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_scores(&text)
}

pub(crate) fn parse_scores(text: &str) -> Result<(ScoreFileMeta, Vec<ScoreRecord>)> {
    let (first, body) = text.split_once('\n').unwrap_or((text, ""));
    let meta = ScoreFileMeta::parse(first.trim_end_matches('\r'))?;
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let with_fid = match cols.as_slice() {
        ["source_id", "label", "sse"] => false,
        ["source_id", "label", "sse", "fid"] => true,
        _ => {
            return Err(Error::Parse { line: 2, message: format!("unexpected columns {cols:?}") });
        }
    };
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        // +1 for the provenance line
        let line = row.position().map_or(0, |p| p.line()) + 1;
        let err = |message: String| Error::Parse { line, message };
        let num = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = row[i].trim().parse().map_err(|_| err(format!("{name} `{}` is not a number", &row[i])))?;
            if !v.is_finite() {
                return Err(err(format!("{name} is not finite")));
            }
            Ok(v)
        };
        let label: Label = row[1].trim().parse().map_err(|_| err(format!("unknown label `{}`", &row[1])))?;
        let sse = num(2, "sse")?;
        if sse < 0.0 {
            return Err(err(format!("negative sse {sse}")));
        }
        let fid = if with_fid { Some(num(3, "fid")?) } else { None };
        records.push(ScoreRecord { source_id: row[0].to_owned(), label, sse, fid });
    }
    Ok((meta, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let meta = ScoreFileMeta {
            artifact_version: "0.1.0".into(),
            checkpoint_sha256: "ab".repeat(32),
            extractor: Some("random-conv(seed=1)".into()),
        };
        let records = vec![
            ScoreRecord { source_id: "a,b.png".into(), label: Label::Normal, sse: 0.1 + 0.2, fid: Some(1e-300) },
            ScoreRecord { source_id: "c".into(), label: Label::Abnormal, sse: 12345.678901234567, fid: Some(0.0) },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_scores(&p, &meta, &records).unwrap();
        let (m, r) = read_scores(&p).unwrap();
        assert_eq!(m, meta);
        assert_eq!(r, records);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let text = "# cyclegan-ad scores version=0 checkpoint_sha256=x\nsource_id,label,sse\na,normal,1\nb,abnormal,oops\n";
        match parse_scores(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_scores("source_id,label,sse\n"), Err(Error::Parse { line: 1, .. })));
        let bad_label = "# cyclegan-ad scores\nsource_id,label,sse\na,weird,1\n";
        assert!(matches!(parse_scores(bad_label), Err(Error::Parse { line: 3, .. })));
    }
}
