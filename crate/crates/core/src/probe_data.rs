//! On-disk probe dumps: the frozen LM head plus per-token final hidden states
//! for a set of graded answers.
//!
//! A dump is a directory holding three files:
//!
//! * `manifest.json` with keys `d_h`, `vocab_size`, `dtype`, `endianness`,
//!   `record_count`, `format` and `source`;
//! * `lm_head.bin`: `"CCPH"`, u32 version, u32 V, u32 d_h, u8 has_bias,
//!   V*d_h f32 row-major weights, then V f32 bias values when present;
//! * `records.bin`: `"CCPR"`, u32 version, then per record u32 L, u32 label,
//!   u32 reserved (0), L u32 token ids and L*d_h f32 hidden states.
//!
//! All integers and floats are little-endian. Records carry no identifier on
//! disk; the answer id of a record is its zero-based position in the file.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LM_HEAD_FILE: &str = "lm_head.bin";
pub const RECORDS_FILE: &str = "records.bin";

pub const LM_HEAD_MAGIC: &[u8; 4] = b"CCPH";
pub const RECORDS_MAGIC: &[u8; 4] = b"CCPR";
pub const FORMAT_VERSION: u32 = 1;

/// Longest open-ended answer accepted, in tokens.
pub const MAX_OE_TOKENS: usize = 30;

/// Size in bytes of the fixed part of a record frame (L, label, reserved).
pub const FRAME_HEADER_BYTES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnswerFormat {
    /// Multiple choice: exactly one answer token.
    #[serde(rename = "MC")]
    Mc,
    /// Open ended: between 1 and 30 answer tokens.
    #[serde(rename = "OE")]
    Oe,
}

impl AnswerFormat {
    pub fn accepts_len(self, len: usize) -> bool {
        match self {
            AnswerFormat::Mc => len == 1,
            AnswerFormat::Oe => (1..=MAX_OE_TOKENS).contains(&len),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerFormat::Mc => "MC",
            AnswerFormat::Oe => "OE",
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            AnswerFormat::Mc => 0,
            AnswerFormat::Oe => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(AnswerFormat::Mc),
            1 => Some(AnswerFormat::Oe),
            _ => None,
        }
    }
}

impl std::fmt::Display for AnswerFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AnswerFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MC" => Ok(AnswerFormat::Mc),
            "OE" => Ok(AnswerFormat::Oe),
            _ => Err(Error::invalid("format", format!("expected MC or OE, got {s:?}"))),
        }
    }
}

/// The vocabulary projection of a frozen language model.
#[derive(Debug, Clone, PartialEq)]
pub struct LmHead {
    vocab_size: usize,
    hidden_dim: usize,
    weights: Vec<f32>,
    bias: Option<Vec<f32>>,
}

impl LmHead {
    pub fn new(
        vocab_size: usize,
        hidden_dim: usize,
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        if vocab_size == 0 || hidden_dim == 0 {
            return Err(Error::invalid("lm head", "vocabulary size and hidden dimension must be positive"));
        }
        if weights.len() != vocab_size * hidden_dim {
            return Err(Error::Dimension {
                expected: vocab_size * hidden_dim,
                got: weights.len(),
            });
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::invalid("lm head", format!("non-finite weight at index {i}")));
        }
        if let Some(b) = &bias {
            if b.len() != vocab_size {
                return Err(Error::Dimension {
                    expected: vocab_size,
                    got: b.len(),
                });
            }
            if let Some(i) = b.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid("lm head", format!("non-finite bias at index {i}")));
            }
        }
        Ok(Self {
            vocab_size,
            hidden_dim,
            weights,
            bias,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    /// Weight row of vocabulary entry `token`.
    pub fn row(&self, token: usize) -> &[f32] {
        &self.weights[token * self.hidden_dim..(token + 1) * self.hidden_dim]
    }
}

/// One graded answer and the hidden states that produced its tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerRecord {
    pub answer_id: String,
    pub token_ids: Vec<u32>,
    /// `token_ids.len() * d_h` values, one row per token.
    pub hidden_states: Vec<f32>,
    /// True when the answer was graded correct.
    pub label: bool,
    pub format: AnswerFormat,
}

impl AnswerRecord {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn hidden_dim(&self) -> usize {
        if self.token_ids.is_empty() {
            0
        } else {
            self.hidden_states.len() / self.token_ids.len()
        }
    }

    /// Final hidden state that generated token `i`.
    pub fn hidden_state(&self, i: usize) -> &[f32] {
        let d = self.hidden_dim();
        &self.hidden_states[i * d..(i + 1) * d]
    }

    /// Checks the record against a dump's dimensions and format.
    pub fn validate(&self, hidden_dim: usize, vocab_size: usize, format: AnswerFormat) -> Result<()> {
        let len = self.token_ids.len();
        if len == 0 {
            return Err(Error::invalid("record", format!("answer {} has no tokens", self.answer_id)));
        }
        if self.format != format || !format.accepts_len(len) {
            return Err(Error::invalid(
                "record",
                format!(
                    "answer {} ({} tokens, {}) does not fit a {} dump",
                    self.answer_id, len, self.format, format
                ),
            ));
        }
        if self.hidden_states.len() != len * hidden_dim {
            return Err(Error::Dimension {
                expected: len * hidden_dim,
                got: self.hidden_states.len(),
            });
        }
        if let Some(&t) = self.token_ids.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: vocab_size,
            });
        }
        if self.hidden_states.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "record",
                format!("answer {} has a non-finite hidden state", self.answer_id),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeManifest {
    pub d_h: usize,
    pub vocab_size: usize,
    pub dtype: String,
    pub endianness: String,
    pub record_count: u64,
    pub format: AnswerFormat,
    pub source: String,
}

impl ProbeManifest {
    pub fn new(d_h: usize, vocab_size: usize, record_count: u64, format: AnswerFormat, source: impl Into<String>) -> Self {
        Self {
            d_h,
            vocab_size,
            dtype: "f32".to_owned(),
            endianness: "little".to_owned(),
            record_count,
            format,
            source: source.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.vocab_size == 0 {
            return Err(Error::invalid("manifest", "d_h and vocab_size must be positive"));
        }
        if self.dtype != "f32" {
            return Err(Error::invalid("manifest", format!("unsupported dtype {:?}", self.dtype)));
        }
        if self.endianness != "little" {
            return Err(Error::invalid("manifest", format!("unsupported endianness {:?}", self.endianness)));
        }
        Ok(())
    }

    fn check_head(&self, head: &LmHead) -> Result<()> {
        if head.hidden_dim() != self.d_h || head.vocab_size() != self.vocab_size {
            return Err(Error::invalid(
                "lm head",
                format!(
                    "shape {}x{} does not match manifest {}x{}",
                    head.vocab_size(),
                    head.hidden_dim(),
                    self.vocab_size,
                    self.d_h
                ),
            ));
        }
        Ok(())
    }
}

/// Exact size in bytes of one record frame in `records.bin`.
pub fn frame_len(tokens: usize, hidden_dim: usize) -> usize {
    FRAME_HEADER_BYTES + 4 * tokens + 4 * tokens * hidden_dim
}

pub fn write_dump(
    manifest: &ProbeManifest,
    lm_head: &LmHead,
    records: &[AnswerRecord],
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    manifest.validate()?;
    manifest.check_head(lm_head)?;
    if records.len() as u64 != manifest.record_count {
        return Err(Error::invalid(
            "manifest",
            format!("record_count is {} but {} records were given", manifest.record_count, records.len()),
        ));
    }
    for record in records {
        record.validate(manifest.d_h, manifest.vocab_size, manifest.format)?;
    }

    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    let head_path = dir.join(LM_HEAD_FILE);
    write_file(&head_path, |w| write_lm_head(w, lm_head))?;

    let records_path = dir.join(RECORDS_FILE);
    write_file(&records_path, |w| {
        w.write_all(RECORDS_MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        for record in records {
            write_frame(w, record)?;
        }
        Ok(())
    })
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_lm_head<W: Write>(w: &mut W, head: &LmHead) -> std::io::Result<()> {
    w.write_all(LM_HEAD_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(head.vocab_size as u32)?;
    w.write_u32::<LittleEndian>(head.hidden_dim as u32)?;
    w.write_u8(head.bias.is_some() as u8)?;
    write_f32s(w, &head.weights)?;
    if let Some(bias) = &head.bias {
        write_f32s(w, bias)?;
    }
    Ok(())
}

fn write_frame<W: Write>(w: &mut W, record: &AnswerRecord) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(record.token_ids.len() as u32)?;
    w.write_u32::<LittleEndian>(record.label as u32)?;
    w.write_u32::<LittleEndian>(0)?;
    for &t in &record.token_ids {
        w.write_u32::<LittleEndian>(t)?;
    }
    write_f32s(w, &record.hidden_states)
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Opens a dump directory. Records are parsed lazily, in file order.
pub fn read_dump(dir: impl AsRef<Path>) -> Result<(ProbeManifest, LmHead, RecordReader)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ProbeManifest = serde_json::from_str(&text)?;
    manifest.validate()?;

    let head_path = dir.join(LM_HEAD_FILE);
    let file = File::open(&head_path).map_err(|e| Error::io(&head_path, e))?;
    let head = read_lm_head(&mut CountingReader::new(BufReader::new(file)))?;
    manifest.check_head(&head)?;

    let records_path = dir.join(RECORDS_FILE);
    let reader = RecordReader::open(&records_path, &manifest)?;
    Ok((manifest, head, reader))
}

/// Reads a whole dump into memory.
pub fn load_dump(dir: impl AsRef<Path>) -> Result<(ProbeManifest, LmHead, Vec<AnswerRecord>)> {
    let (manifest, head, reader) = read_dump(dir)?;
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((manifest, head, records))
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

fn corrupt(file: &str, offset: u64, record: Option<usize>, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        file: file.to_owned(),
        offset,
        record,
        reason: reason.into(),
    }
}

/// Maps a short read to a truncation error and anything else to an I/O error.
fn read_err(file: &str, path: &Path, offset: u64, record: Option<usize>, e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        corrupt(file, offset, record, "truncated frame")
    } else {
        Error::io(path, e)
    }
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_lm_head<R: Read>(r: &mut CountingReader<R>) -> Result<LmHead> {
    const FILE: &str = LM_HEAD_FILE;
    let path = PathBuf::from(FILE);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| read_err(FILE, &path, r.offset, None, e))?;
    if &magic != LM_HEAD_MAGIC {
        return Err(corrupt(FILE, 0, None, "bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| read_err(FILE, &path, r.offset, None, e))?;
    if version != FORMAT_VERSION {
        return Err(corrupt(FILE, 4, None, format!("unsupported version {version}")));
    }
    let vocab = r.read_u32::<LittleEndian>().map_err(|e| read_err(FILE, &path, r.offset, None, e))? as usize;
    let hidden = r.read_u32::<LittleEndian>().map_err(|e| read_err(FILE, &path, r.offset, None, e))? as usize;
    let has_bias_at = r.offset;
    let has_bias = r.read_u8().map_err(|e| read_err(FILE, &path, r.offset, None, e))?;
    if has_bias > 1 {
        return Err(corrupt(FILE, has_bias_at, None, format!("has_bias flag is {has_bias}")));
    }
    if vocab == 0 || hidden == 0 {
        return Err(corrupt(FILE, 8, None, "zero vocabulary size or hidden dimension"));
    }
    let weights_at = r.offset;
    let weights = read_f32s(r, vocab * hidden).map_err(|e| read_err(FILE, &path, r.offset, None, e))?;
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(corrupt(FILE, weights_at + 4 * i as u64, None, "non-finite value"));
    }
    let bias = if has_bias == 1 {
        let bias_at = r.offset;
        let bias = read_f32s(r, vocab).map_err(|e| read_err(FILE, &path, r.offset, None, e))?;
        if let Some(i) = bias.iter().position(|w| !w.is_finite()) {
            return Err(corrupt(FILE, bias_at + 4 * i as u64, None, "non-finite value"));
        }
        Some(bias)
    } else {
        None
    };
    let trailing_at = r.offset;
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(|e| Error::io(&path, e))? != 0 {
        return Err(corrupt(FILE, trailing_at, None, "trailing bytes after payload"));
    }
    LmHead::new(vocab, hidden, weights, bias)
}

/// Streaming parser over `records.bin`.
pub struct RecordReader {
    path: PathBuf,
    reader: CountingReader<Box<dyn Read + Send>>,
    hidden_dim: usize,
    vocab_size: usize,
    format: AnswerFormat,
    expected: u64,
    index: usize,
    done: bool,
}

impl RecordReader {
    fn open(path: &Path, manifest: &ProbeManifest) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(Box::new(BufReader::new(file)), path, manifest)
    }

    fn from_reader(inner: Box<dyn Read + Send>, path: &Path, manifest: &ProbeManifest) -> Result<Self> {
        const FILE: &str = RECORDS_FILE;
        let mut reader = CountingReader::new(inner);
        let mut magic = [0u8; 4];
        reader
            .read_exact(&mut magic)
            .map_err(|e| read_err(FILE, path, reader.offset, None, e))?;
        if &magic != RECORDS_MAGIC {
            return Err(corrupt(FILE, 0, None, "bad magic"));
        }
        let version = reader
            .read_u32::<LittleEndian>()
            .map_err(|e| read_err(FILE, path, reader.offset, None, e))?;
        if version != FORMAT_VERSION {
            return Err(corrupt(FILE, 4, None, format!("unsupported version {version}")));
        }
        Ok(Self {
            path: path.to_owned(),
            reader,
            hidden_dim: manifest.d_h,
            vocab_size: manifest.vocab_size,
            format: manifest.format,
            expected: manifest.record_count,
            index: 0,
            done: false,
        })
    }

    /// Byte offset of the next unread frame.
    pub fn offset(&self) -> u64 {
        self.reader.offset
    }

    fn read_u32_field(&mut self) -> Result<u32> {
        let at = self.reader.offset;
        let index = self.index;
        let path = self.path.clone();
        self.reader
            .read_u32::<LittleEndian>()
            .map_err(|e| read_err(RECORDS_FILE, &path, at, Some(index), e))
    }

    fn next_record(&mut self) -> Result<Option<AnswerRecord>> {
        const FILE: &str = RECORDS_FILE;
        let index = self.index;
        if index as u64 == self.expected {
            let at = self.reader.offset;
            let mut probe = [0u8; 1];
            let n = self.reader.read(&mut probe).map_err(|e| Error::io(&self.path, e))?;
            if n != 0 {
                return Err(corrupt(
                    FILE,
                    at,
                    Some(index),
                    format!("trailing bytes after the {} records named in the manifest", self.expected),
                ));
            }
            return Ok(None);
        }

        let frame_at = self.reader.offset;
        let mut first = [0u8; 1];
        let n = self.reader.read(&mut first).map_err(|e| Error::io(&self.path, e))?;
        if n == 0 {
            return Err(corrupt(
                FILE,
                frame_at,
                Some(index),
                format!("manifest names {} records but the file ends after {index}", self.expected),
            ));
        }
        let mut rest = [0u8; 3];
        let path = self.path.clone();
        self.reader
            .read_exact(&mut rest)
            .map_err(|e| read_err(FILE, &path, frame_at, Some(index), e))?;
        let len = u32::from_le_bytes([first[0], rest[0], rest[1], rest[2]]) as usize;
        if !self.format.accepts_len(len) {
            return Err(corrupt(
                FILE,
                frame_at,
                Some(index),
                format!("answer length {len} is invalid for a {} dump", self.format),
            ));
        }

        let label_at = self.reader.offset;
        let label = self.read_u32_field()?;
        if label > 1 {
            return Err(corrupt(FILE, label_at, Some(index), format!("label {label} is not 0 or 1")));
        }
        let reserved_at = self.reader.offset;
        if self.read_u32_field()? != 0 {
            return Err(corrupt(FILE, reserved_at, Some(index), "reserved field is not zero"));
        }

        let mut token_ids = Vec::with_capacity(len);
        for _ in 0..len {
            let at = self.reader.offset;
            let t = self.read_u32_field()?;
            if t as usize >= self.vocab_size {
                return Err(corrupt(
                    FILE,
                    at,
                    Some(index),
                    format!("token id out of range: {t} >= {}", self.vocab_size),
                ));
            }
            token_ids.push(t);
        }

        let states_at = self.reader.offset;
        let hidden_states = read_f32s(&mut self.reader, len * self.hidden_dim)
            .map_err(|e| read_err(FILE, &path, states_at, Some(index), e))?;
        if let Some(i) = hidden_states.iter().position(|v| !v.is_finite()) {
            return Err(corrupt(FILE, states_at + 4 * i as u64, Some(index), "non-finite value"));
        }

        self.index += 1;
        Ok(Some(AnswerRecord {
            answer_id: index.to_string(),
            token_ids,
            hidden_states,
            label: label == 1,
            format: self.format,
        }))
    }
}

impl Iterator for RecordReader {
    type Item = Result<AnswerRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dump(format: AnswerFormat, lens: &[usize]) -> (ProbeManifest, LmHead, Vec<AnswerRecord>) {
        let (v, d) = (6, 4);
        let weights = (0..v * d).map(|i| i as f32 * 0.25 - 2.0).collect();
        let head = LmHead::new(v, d, weights, Some(vec![0.5; v])).unwrap();
        let records: Vec<_> = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| AnswerRecord {
                answer_id: i.to_string(),
                token_ids: (0..l as u32).map(|t| t % v as u32).collect(),
                hidden_states: (0..l * d).map(|k| (k as f32).sin()).collect(),
                label: i % 2 == 0,
                format,
            })
            .collect();
        let manifest = ProbeManifest::new(d, v, records.len() as u64, format, "unit test");
        (manifest, head, records)
    }

    #[test]
    fn frame_length_matches_layout() {
        assert_eq!(frame_len(2, 4), 52);
        let dir = tempfile::tempdir().unwrap();
        let (m, h, r) = tiny_dump(AnswerFormat::Oe, &[2]);
        write_dump(&m, &h, &r, dir.path()).unwrap();
        let bytes = std::fs::read(dir.path().join(RECORDS_FILE)).unwrap();
        assert_eq!(bytes.len(), 8 + 52);
    }

    #[test]
    fn empty_dump_reads_back_empty() {
        let dir = tempfile::tempdir().unwrap();
        let (m, h, r) = tiny_dump(AnswerFormat::Mc, &[]);
        write_dump(&m, &h, &r, dir.path()).unwrap();
        let (m2, h2, records) = load_dump(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(h, h2);
        assert!(records.is_empty());
    }

    #[test]
    fn write_then_read_is_structurally_equal() {
        let dir = tempfile::tempdir().unwrap();
        let (m, h, r) = tiny_dump(AnswerFormat::Oe, &[1, 3, 30, 2]);
        write_dump(&m, &h, &r, dir.path()).unwrap();
        let (m2, h2, r2) = load_dump(dir.path()).unwrap();
        assert_eq!((m, h, r), (m2, h2, r2));
    }

    #[test]
    fn mc_manifest_rejects_long_record() {
        let dir = tempfile::tempdir().unwrap();
        let (m, h, mut r) = tiny_dump(AnswerFormat::Mc, &[1]);
        r.push(AnswerRecord {
            answer_id: "1".into(),
            token_ids: vec![0; 5],
            hidden_states: vec![0.0; 20],
            label: true,
            format: AnswerFormat::Oe,
        });
        let m = ProbeManifest { record_count: 2, ..m };
        assert!(write_dump(&m, &h, &r, dir.path()).is_err());
    }

    #[test]
    fn zero_length_record_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (m, h, mut r) = tiny_dump(AnswerFormat::Oe, &[1]);
        r[0].token_ids.clear();
        r[0].hidden_states.clear();
        assert!(write_dump(&m, &h, &r, dir.path()).is_err());
    }

    #[test]
    fn token_id_equal_to_vocab_is_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let (m, h, r) = tiny_dump(AnswerFormat::Mc, &[1, 1]);
        write_dump(&m, &h, &r, dir.path()).unwrap();
        let path = dir.path().join(RECORDS_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        // second record's token id
        let at = 8 + frame_len(1, 4) + FRAME_HEADER_BYTES;
        bytes[at..at + 4].copy_from_slice(&6u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = load_dump(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("token id out of range"), "{msg}");
        assert!(matches!(err, Error::Corrupt { record: Some(1), offset, .. } if offset == at as u64));
    }

    #[test]
    fn bad_magic_and_version_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (m, h, r) = tiny_dump(AnswerFormat::Mc, &[1]);
        write_dump(&m, &h, &r, dir.path()).unwrap();
        let path = dir.path().join(LM_HEAD_FILE);
        let good = std::fs::read(&path).unwrap();

        let mut bytes = good.clone();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_dump(dir.path()).unwrap_err().to_string().contains("bad magic"));

        let mut bytes = good;
        bytes[4] = 2;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_dump(dir.path()).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn truncated_and_missing_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let (m, h, r) = tiny_dump(AnswerFormat::Oe, &[3]);
        write_dump(&m, &h, &r, dir.path()).unwrap();
        let path = dir.path().join(RECORDS_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_dump(dir.path()).unwrap_err().to_string().contains("truncated"));

        std::fs::remove_file(&path).unwrap();
        assert!(load_dump(dir.path()).unwrap_err().is_io());
    }

    #[test]
    fn non_finite_state_is_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let (m, h, r) = tiny_dump(AnswerFormat::Mc, &[1]);
        write_dump(&m, &h, &r, dir.path()).unwrap();
        let path = dir.path().join(RECORDS_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        let at = 8 + FRAME_HEADER_BYTES + 4 + 8;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = load_dump(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Corrupt { offset, record: Some(0), .. } if offset == at as u64));
    }

    #[test]
    fn record_count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (m, h, r) = tiny_dump(AnswerFormat::Mc, &[1, 1]);
        write_dump(&m, &h, &r, dir.path()).unwrap();
        let manifest_path = dir.path().join(MANIFEST_FILE);
        let fewer = ProbeManifest { record_count: 1, ..m.clone() };
        std::fs::write(&manifest_path, serde_json::to_string(&fewer).unwrap()).unwrap();
        assert!(load_dump(dir.path()).unwrap_err().to_string().contains("trailing"));
        let more = ProbeManifest { record_count: 3, ..m };
        std::fs::write(&manifest_path, serde_json::to_string(&more).unwrap()).unwrap();
        assert!(load_dump(dir.path()).is_err());
    }

    #[test]
    fn format_parses_case_insensitively() {
        assert_eq!("oe".parse::<AnswerFormat>().unwrap(), AnswerFormat::Oe);
        assert!("QA".parse::<AnswerFormat>().is_err());
    }
}
