//! Sweep files.
//!
//! JSONL: a header line `{"type":"header","rate":R,"coils":[...]}` followed
//! by one object per frame, `{"t":T,"pos":{"id":[x,y,z],...},"ori":{...}}`.
//! A coil missing from `pos` is invalid in that frame.
//!
//! CSV: header row `t,<id>_x,<id>_y,<id>_z,...`; an empty cell marks the
//! coil invalid. The writer prepends `# rate=R`, which the reader honours;
//! without it the rate is estimated from the timestamps. Orientations are
//! not stored in CSV.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CoilFrame, CoilSample, StreamError, SweepHeader};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepFormat {
    Jsonl,
    Csv,
}

impl SweepFormat {
    pub fn from_path(path: &Path) -> Result<Self, StreamError> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("jsonl") => Ok(Self::Jsonl),
            Some("csv") => Ok(Self::Csv),
            _ => Err(StreamError::Format {
                path: path.display().to_string(),
                line: 0,
                message: "unrecognized sweep extension (expected .jsonl or .csv)".into(),
            }),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    #[serde(rename = "type")]
    kind: String,
    rate: f64,
    coils: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct JsonlFrame {
    t: f64,
    pos: BTreeMap<String, [f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ori: Option<BTreeMap<String, [f64; 4]>>,
}

pub fn read_sweep(path: impl AsRef<Path>) -> Result<(SweepHeader, Vec<CoilFrame>), StreamError> {
    let path = path.as_ref();
    let format = SweepFormat::from_path(path)?;
    let file = File::open(path)?;
    let name = path.display().to_string();
    let (header, mut frames) = match format {
        SweepFormat::Jsonl => read_jsonl(BufReader::new(file), &name)?,
        SweepFormat::Csv => read_csv(BufReader::new(file), &name)?,
    };
    frames.sort_by(|a, b| a.t.total_cmp(&b.t));
    for (seq, f) in frames.iter_mut().enumerate() {
        f.seq = seq as u64;
    }
    Ok((header, frames))
}

fn format_err(path: &str, line: usize, message: impl Into<String>) -> StreamError {
    StreamError::Format {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn read_jsonl(reader: impl BufRead, path: &str) -> Result<(SweepHeader, Vec<CoilFrame>), StreamError> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        let Some((idx, line)) = lines.next() else {
            return Err(format_err(path, 1, "missing header line"));
        };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let h: JsonlHeader = serde_json::from_str(&line).map_err(|e| format_err(path, idx + 1, e.to_string()))?;
        if h.kind != "header" {
            return Err(format_err(path, idx + 1, "first record must have type \"header\""));
        }
        let header = SweepHeader::new(h.rate, h.coils);
        header.validate().map_err(|e| format_err(path, idx + 1, e))?;
        break header;
    };

    let mut frames = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let f: JsonlFrame = serde_json::from_str(&line).map_err(|e| format_err(path, lineno, e.to_string()))?;
        if let Some(unknown) = f.pos.keys().find(|k| !header.coil_ids.contains(k)) {
            return Err(format_err(
                path,
                lineno,
                format!("coil {unknown:?} is not in the header"),
            ));
        }
        let coils = header
            .coil_ids
            .iter()
            .map(|id| match f.pos.get(id) {
                Some(p) => CoilSample {
                    id: id.clone(),
                    pos: *p,
                    ori: f.ori.as_ref().and_then(|o| o.get(id).copied()),
                    ok: true,
                },
                None => CoilSample::missing(id.clone()),
            })
            .collect();
        let frame = CoilFrame { seq: 0, t: f.t, coils };
        frame.validate().map_err(|e| format_err(path, lineno, e.to_string()))?;
        frames.push(frame);
    }
    Ok((header, frames))
}

fn read_csv(mut reader: impl BufRead, path: &str) -> Result<(SweepHeader, Vec<CoilFrame>), StreamError> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let mut body = text.as_str();
    let mut line_offset = 0;
    let mut declared_rate = None;
    if let Some(first) = body.lines().next() {
        if let Some(rest) = first.trim().strip_prefix('#') {
            if let Some(value) = rest.trim().strip_prefix("rate=") {
                let rate: f64 = value
                    .trim()
                    .parse()
                    .map_err(|_| format_err(path, 1, format!("bad rate {value:?}")))?;
                declared_rate = Some(rate);
            }
            body = body.split_once('\n').map_or("", |(_, r)| r);
            line_offset = 1;
        }
    }

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let columns: Vec<String> = rdr
        .headers()
        .map_err(|e| format_err(path, 1 + line_offset, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if columns.first().map(String::as_str) != Some("t") {
        return Err(format_err(path, 1 + line_offset, "first column must be \"t\""));
    }
    let mut coil_ids = Vec::new();
    for triple in columns[1..].chunks(3) {
        let id = triple[0].strip_suffix("_x").ok_or_else(|| {
            format_err(
                path,
                1 + line_offset,
                format!("column {:?} should end in _x", triple[0]),
            )
        })?;
        let expected = [format!("{id}_x"), format!("{id}_y"), format!("{id}_z")];
        if triple.len() != 3 || triple.iter().zip(&expected).any(|(a, b)| a != b) {
            return Err(format_err(
                path,
                1 + line_offset,
                format!("coil {id:?} needs columns {id}_x,{id}_y,{id}_z"),
            ));
        }
        coil_ids.push(id.to_string());
    }

    let mut frames = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize) + line_offset;
            format_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize) + line_offset;
        let num = |s: &str| -> Result<f64, StreamError> {
            s.parse::<f64>()
                .map_err(|_| format_err(path, line, format!("non-numeric field {s:?}")))
        };
        let t = num(&record[0])?;
        let mut coils = Vec::with_capacity(coil_ids.len());
        for (k, id) in coil_ids.iter().enumerate() {
            let cells = [&record[1 + 3 * k], &record[2 + 3 * k], &record[3 + 3 * k]];
            if cells.iter().any(|c| c.is_empty()) {
                coils.push(CoilSample::missing(id.clone()));
                continue;
            }
            let pos = [num(cells[0])?, num(cells[1])?, num(cells[2])?];
            coils.push(CoilSample {
                id: id.clone(),
                pos,
                ori: None,
                ok: true,
            });
        }
        frames.push(CoilFrame { seq: 0, t, coils });
    }

    let rate = declared_rate.unwrap_or_else(|| estimate_rate(&frames));
    let header = SweepHeader::new(rate, coil_ids);
    header.validate().map_err(|e| format_err(path, 1 + line_offset, e))?;
    Ok((header, frames))
}

fn estimate_rate(frames: &[CoilFrame]) -> f64 {
    let mut dts: Vec<f64> = frames
        .windows(2)
        .map(|w| w[1].t - w[0].t)
        .filter(|dt| *dt > 0.0)
        .collect();
    if dts.is_empty() {
        return 100.0;
    }
    dts.sort_by(f64::total_cmp);
    1.0 / dts[dts.len() / 2]
}

/// Incremental sweep writer; the recorder uses it to stream frames to disk.
pub struct SweepWriter {
    out: BufWriter<File>,
    format: SweepFormat,
    header: SweepHeader,
}

impl SweepWriter {
    pub fn create(path: impl AsRef<Path>, header: &SweepHeader) -> Result<Self, StreamError> {
        let path = path.as_ref();
        let format = SweepFormat::from_path(path)?;
        let mut out = BufWriter::new(File::create(path)?);
        match format {
            SweepFormat::Jsonl => {
                let h = JsonlHeader {
                    kind: "header".into(),
                    rate: header.rate,
                    coils: header.coil_ids.clone(),
                };
                serde_json::to_writer(&mut out, &h).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
            SweepFormat::Csv => {
                writeln!(out, "# rate={}", header.rate)?;
                let mut cols = vec!["t".to_string()];
                for id in &header.coil_ids {
                    cols.extend([format!("{id}_x"), format!("{id}_y"), format!("{id}_z")]);
                }
                writeln!(out, "{}", cols.join(","))?;
            }
        }
        Ok(Self {
            out,
            format,
            header: header.clone(),
        })
    }

    pub fn write_frame(&mut self, frame: &CoilFrame) -> Result<(), StreamError> {
        match self.format {
            SweepFormat::Jsonl => {
                let mut pos = BTreeMap::new();
                let mut ori = BTreeMap::new();
                for c in frame.coils.iter().filter(|c| c.ok) {
                    pos.insert(c.id.clone(), c.pos);
                    if let Some(q) = c.ori {
                        ori.insert(c.id.clone(), q);
                    }
                }
                let rec = JsonlFrame {
                    t: frame.t,
                    pos,
                    ori: (!ori.is_empty()).then_some(ori),
                };
                serde_json::to_writer(&mut self.out, &rec).map_err(std::io::Error::from)?;
                self.out.write_all(b"\n")?;
            }
            SweepFormat::Csv => {
                let mut row = vec![format!("{}", frame.t)];
                for id in &self.header.coil_ids {
                    match frame.get(id).filter(|c| c.ok) {
                        Some(c) => row.extend(c.pos.iter().map(|v| format!("{v}"))),
                        None => row.extend(std::iter::repeat_n(String::new(), 3)),
                    }
                }
                writeln!(self.out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), StreamError> {
        self.out.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), StreamError> {
        self.out.flush()?;
        self.out.get_ref().sync_data()?;
        Ok(())
    }
}

/// Writes a whole sweep; the format follows the extension.
pub fn write_sweep(path: impl AsRef<Path>, header: &SweepHeader, frames: &[CoilFrame]) -> Result<(), StreamError> {
    let mut w = SweepWriter::create(path, header)?;
    for f in frames {
        w.write_frame(f)?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn two_line_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        fs::write(
            &path,
            "{\"type\":\"header\",\"rate\":100.0,\"coils\":[\"tt\",\"tb\"]}\n{\"t\":0.01,\"pos\":{\"tt\":[1,2,3]}}\n",
        )
        .unwrap();
        let (h, frames) = read_sweep(&path).unwrap();
        assert_eq!(h.rate, 100.0);
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].coils[0].pos, [1.0, 2.0, 3.0]);
        assert!(frames[0].coils[0].ok);
        assert!(!frames[0].coils[1].ok);
    }

    #[test]
    fn csv_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        fs::write(&path, "t,tt_x,tt_y,tt_z\n0.01,1,2,3\n").unwrap();
        let (h, frames) = read_sweep(&path).unwrap();
        assert_eq!(h.coil_ids, vec!["tt"]);
        assert_eq!(frames[0].t, 0.01);
        assert_eq!(
            frames[0].position("tt").unwrap(),
            crate::geometry::Vec3::new(1.0, 2.0, 3.0)
        );
    }

    #[test]
    fn csv_non_numeric_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        fs::write(&path, "t,tt_x,tt_y,tt_z\n0.01,1,2,3\n0.02,1,abc,3\n").unwrap();
        match read_sweep(&path) {
            Err(StreamError::Format { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("abc"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_empty_cell_is_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        fs::write(&path, "t,a_b_x,a_b_y,a_b_z\n0,1,2,3\n0.01,,,\n").unwrap();
        let (h, frames) = read_sweep(&path).unwrap();
        assert_eq!(h.coil_ids, vec!["a_b"]);
        assert!((h.rate - 100.0).abs() < 1e-9);
        assert!(!frames[1].coils[0].ok);
    }

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        fs::write(
            &path,
            "{\"type\":\"header\",\"rate\":100.0,\"coils\":[\"tt\"]}\n{\"t\":0.0,\"pos\":{}}\n{\"t\":oops}\n",
        )
        .unwrap();
        assert!(matches!(read_sweep(&path), Err(StreamError::Format { line: 3, .. })));
        fs::write(
            &path,
            "{\"type\":\"header\",\"rate\":100.0,\"coils\":[\"tt\"]}\n{\"t\":0.0,\"pos\":{\"zz\":[0,0,0]}}\n",
        )
        .unwrap();
        assert!(matches!(read_sweep(&path), Err(StreamError::Format { line: 2, .. })));
        fs::write(&path, "{\"type\":\"header\",\"rate\":-1.0,\"coils\":[\"tt\"]}\n").unwrap();
        assert!(matches!(read_sweep(&path), Err(StreamError::Format { line: 1, .. })));
    }

    #[test]
    fn empty_sweep_and_bad_paths() {
        let dir = tempfile::tempdir().unwrap();
        let header = SweepHeader::new(50.0, vec!["tt".into()]);
        for name in ["e.jsonl", "e.csv"] {
            let path = dir.path().join(name);
            write_sweep(&path, &header, &[]).unwrap();
            let (h, frames) = read_sweep(&path).unwrap();
            assert_eq!(h, header);
            assert!(frames.is_empty());
        }
        assert!(matches!(
            write_sweep(dir.path().join("missing/dir/x.jsonl"), &header, &[]),
            Err(StreamError::Io(_))
        ));
        assert!(matches!(
            read_sweep(dir.path().join("x.txt")),
            Err(StreamError::Format { .. })
        ));
    }

    #[test]
    fn frames_sorted_and_renumbered() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        fs::write(
            &path,
            "{\"type\":\"header\",\"rate\":10.0,\"coils\":[\"tt\"]}\n{\"t\":0.2,\"pos\":{}}\n{\"t\":0.1,\"pos\":{}}\n",
        )
        .unwrap();
        let (_, frames) = read_sweep(&path).unwrap();
        assert_eq!(frames[0].t, 0.1);
        assert_eq!((frames[0].seq, frames[1].seq), (0, 1));
    }
}
