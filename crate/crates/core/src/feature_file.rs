//! Binary feature files and their CSV mirror.
//!
//! Layout (little-endian): `"CCPF"`, u32 version (1), u32 feature dimension
//! (75), u32 format tag (0 = MC, 1 = OE), then per answer u32 L, u32 label and
//! L*75 f32 values. Answers are identified by their position in the file.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FeatureVector, FEATURE_DIM};
use crate::probe_data::{write_f32s, AnswerFormat};

pub const FEATURE_MAGIC: &[u8; 4] = b"CCPF";
pub const FEATURE_VERSION: u32 = 1;

const FILE: &str = "feature file";

pub struct FeatureFileWriter {
    path: PathBuf,
    inner: BufWriter<File>,
    format: AnswerFormat,
    written: usize,
}

impl FeatureFileWriter {
    pub fn create(path: impl AsRef<Path>, format: AnswerFormat) -> Result<Self> {
        let path = path.as_ref().to_owned();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut inner = BufWriter::new(file);
        let header = (|| -> std::io::Result<()> {
            inner.write_all(FEATURE_MAGIC)?;
            inner.write_u32::<LittleEndian>(FEATURE_VERSION)?;
            inner.write_u32::<LittleEndian>(FEATURE_DIM as u32)?;
            inner.write_u32::<LittleEndian>(format.tag())
        })();
        header.map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            inner,
            format,
            written: 0,
        })
    }

    pub fn write(&mut self, matrix: &FeatureMatrix) -> Result<()> {
        if matrix.format != self.format || !self.format.accepts_len(matrix.len()) {
            return Err(Error::invalid(
                "feature matrix",
                format!("{} rows of {} do not fit a {} feature file", matrix.len(), matrix.format, self.format),
            ));
        }
        let mut values = Vec::with_capacity(matrix.len() * FEATURE_DIM);
        for row in &matrix.rows {
            values.extend(row.values.iter().map(|&v| v as f32));
        }
        let w = &mut self.inner;
        (|| -> std::io::Result<()> {
            w.write_u32::<LittleEndian>(matrix.len() as u32)?;
            w.write_u32::<LittleEndian>(matrix.label as u32)?;
            write_f32s(w, &values)
        })()
        .map_err(|e| Error::io(&self.path, e))?;
        self.written += 1;
        Ok(())
    }

    /// Flushes and returns the number of answers written.
    pub fn finish(mut self) -> Result<usize> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.written)
    }
}

pub fn write_feature_file(path: impl AsRef<Path>, format: AnswerFormat, matrices: &[FeatureMatrix]) -> Result<()> {
    let mut w = FeatureFileWriter::create(path, format)?;
    for m in matrices {
        w.write(m)?;
    }
    w.finish().map(|_| ())
}

fn corrupt(offset: u64, record: Option<usize>, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        file: FILE.to_owned(),
        offset,
        record,
        reason: reason.into(),
    }
}

/// Reads a whole feature file; values come back widened from f32.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<(AnswerFormat, Vec<FeatureMatrix>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    parse_feature_bytes(&bytes)
}

pub fn parse_feature_bytes(bytes: &[u8]) -> Result<(AnswerFormat, Vec<FeatureMatrix>)> {
    let mut r = bytes;
    let eof = |offset: usize, record: Option<usize>| move |e: std::io::Error| {
        if e.kind() == ErrorKind::UnexpectedEof {
            corrupt(offset as u64, record, "truncated frame")
        } else {
            corrupt(offset as u64, record, e.to_string())
        }
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof(0, None))?;
    if &magic != FEATURE_MAGIC {
        return Err(corrupt(0, None, "bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof(4, None))?;
    if version != FEATURE_VERSION {
        return Err(corrupt(4, None, format!("unsupported version {version}")));
    }
    let dim = r.read_u32::<LittleEndian>().map_err(eof(8, None))?;
    if dim as usize != FEATURE_DIM {
        return Err(corrupt(8, None, format!("feature dimension {dim}, expected {FEATURE_DIM}")));
    }
    let tag = r.read_u32::<LittleEndian>().map_err(eof(12, None))?;
    let format = AnswerFormat::from_tag(tag).ok_or_else(|| corrupt(12, None, format!("unknown format tag {tag}")))?;

    let mut matrices = Vec::new();
    while !r.is_empty() {
        let index = matrices.len();
        let at = bytes.len() - r.len();
        let len = r.read_u32::<LittleEndian>().map_err(eof(at, Some(index)))? as usize;
        if !format.accepts_len(len) {
            return Err(corrupt(at as u64, Some(index), format!("answer length {len} invalid for {format}")));
        }
        let label = r.read_u32::<LittleEndian>().map_err(eof(at + 4, Some(index)))?;
        if label > 1 {
            return Err(corrupt(at as u64 + 4, Some(index), format!("label {label} is not 0 or 1")));
        }
        let need = len * FEATURE_DIM * 4;
        if r.len() < need {
            return Err(corrupt(at as u64 + 8, Some(index), "truncated frame"));
        }
        let (payload, rest) = r.split_at(need);
        r = rest;
        let rows = payload
            .chunks_exact(FEATURE_DIM * 4)
            .enumerate()
            .map(|(token_index, chunk)| {
                let mut values = [0.0; FEATURE_DIM];
                for (v, c) in values.iter_mut().zip(chunk.chunks_exact(4)) {
                    *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
                }
                FeatureVector { token_index, values }
            })
            .collect::<Vec<_>>();
        if rows.iter().any(|row| row.values.iter().any(|v| !v.is_finite())) {
            return Err(corrupt(at as u64 + 8, Some(index), "non-finite value"));
        }
        matrices.push(FeatureMatrix {
            answer_id: index.to_string(),
            label: label == 1,
            format,
            rows,
        });
    }
    Ok((format, matrices))
}

/// One CSV row per token: `answer_id, token_index, label, f0..f74`.
pub fn write_feature_csv(path: impl AsRef<Path>, matrices: &[FeatureMatrix]) -> Result<()> {
    let path = path.as_ref();
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid("csv", format!("{other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    let mut header = vec!["answer_id".to_owned(), "token_index".to_owned(), "label".to_owned()];
    header.extend((0..FEATURE_DIM).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(to_err)?;
    for m in matrices {
        for row in &m.rows {
            let mut fields = vec![m.answer_id.clone(), row.token_index.to_string(), (m.label as u8).to_string()];
            fields.extend(row.values.iter().map(|&v| (v as f32).to_string()));
            w.write_record(&fields).map_err(to_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(id: usize, len: usize, label: bool, format: AnswerFormat) -> FeatureMatrix {
        FeatureMatrix {
            answer_id: id.to_string(),
            label,
            format,
            rows: (0..len)
                .map(|t| {
                    let mut values = [0.0; FEATURE_DIM];
                    for (k, v) in values.iter_mut().enumerate() {
                        *v = ((id * 100 + t * 75 + k) as f32 * 0.125) as f64;
                    }
                    FeatureVector { token_index: t, values }
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let ms = vec![
            matrix(0, 3, true, AnswerFormat::Oe),
            matrix(1, 1, false, AnswerFormat::Oe),
        ];
        write_feature_file(&path, AnswerFormat::Oe, &ms).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + (8 + 3 * 300) + (8 + 300));
        let (format, back) = read_feature_file(&path).unwrap();
        assert_eq!(format, AnswerFormat::Oe);
        assert_eq!(back, ms);
    }

    #[test]
    fn rejects_wrong_format_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let mut w = FeatureFileWriter::create(&path, AnswerFormat::Mc).unwrap();
        assert!(w.write(&matrix(0, 2, true, AnswerFormat::Oe)).is_err());
        w.write(&matrix(0, 1, true, AnswerFormat::Mc)).unwrap();
        assert_eq!(w.finish().unwrap(), 1);
        let bytes = std::fs::read(&path).unwrap();
        assert!(parse_feature_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 74;
        assert!(parse_feature_bytes(&bad).is_err());
    }

    #[test]
    fn csv_has_header_and_one_row_per_token() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        write_feature_csv(&path, &[matrix(0, 2, true, AnswerFormat::Oe)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("answer_id,token_index,label,f0,f1"));
        assert!(lines[0].ends_with(",f74"));
        assert!(lines[2].starts_with("0,1,1,"));
    }
}
