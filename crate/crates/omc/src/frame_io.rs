//! OMCF tensor containers and MOT Challenge text files.
//!
//! OMCF layout, all integers little-endian:
//!
//! ```text
//! "OMCF" | version u32 = 1 | frame_count u32
//! per frame:  tensor_count u32
//! per tensor: name_len u32 | name (UTF-8) | ndim u32 | dims u32 × ndim
//!             | dtype u8 (0 = f32) | payload
//! ```
//!
//! Frames carry no index of their own; frame `k` of the file (1-based) is
//! frame index `k`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use omc_core::frame::{FrameContainer, MotBox, NamedTensor};

pub const MAGIC: &[u8; 4] = b"OMCF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{0}")]
    Data(#[from] omc_core::Error),
    #[error("{0}")]
    Inconsistent(String),
}

pub type IoResult<T> = Result<T, IoError>;

fn dims_u32(dims: &[usize]) -> IoResult<Vec<u32>> {
    dims.iter()
        .map(|&d| {
            u32::try_from(d).map_err(|_| IoError::Inconsistent(format!("dimension {d} exceeds u32")))
        })
        .collect()
}

/// Writes one frame's worth of tensors.
fn write_tensors<W: Write>(w: &mut W, tensors: &[NamedTensor]) -> IoResult<()> {
    let count = u32::try_from(tensors.len())
        .map_err(|_| IoError::Inconsistent("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u32::try_from(name.len())
            .map_err(|_| IoError::Inconsistent("tensor name too long".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        let dims = dims_u32(&t.dims)?;
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&[DTYPE_F32])?;
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Streaming OMCF writer. The frame count goes in the header, so it must be
/// known up front; [`ContainerWriter::finish`] checks it was honoured.
pub struct ContainerWriter<W: Write> {
    inner: W,
    expected: u32,
    written: u32,
    shapes: Option<Vec<(String, Vec<usize>)>>,
}

impl ContainerWriter<BufWriter<File>> {
    pub fn create(path: &Path, frame_count: usize) -> IoResult<Self> {
        Self::new(BufWriter::new(File::create(path)?), frame_count)
    }
}

impl<W: Write> ContainerWriter<W> {
    pub fn new(mut inner: W, frame_count: usize) -> IoResult<Self> {
        let expected = u32::try_from(frame_count)
            .map_err(|_| IoError::Inconsistent("too many frames".into()))?;
        inner.write_all(MAGIC)?;
        inner.write_all(&VERSION.to_le_bytes())?;
        inner.write_all(&expected.to_le_bytes())?;
        Ok(Self {
            inner,
            expected,
            written: 0,
            shapes: None,
        })
    }

    /// Appends a frame. Every frame must match the first one's tensor shapes.
    pub fn push(&mut self, frame: &FrameContainer) -> IoResult<()> {
        frame.validate()?;
        if self.written == self.expected {
            return Err(IoError::Inconsistent(format!(
                "header promised {} frames",
                self.expected
            )));
        }
        let tensors = frame.to_tensors();
        let shapes: Vec<(String, Vec<usize>)> =
            tensors.iter().map(|t| (t.name.clone(), t.dims.clone())).collect();
        match &self.shapes {
            None => self.shapes = Some(shapes),
            Some(first) if *first != shapes => {
                return Err(IoError::Inconsistent(format!(
                    "frame {} has shapes {:?}, expected {:?}",
                    self.written + 1,
                    shapes,
                    first
                )));
            }
            Some(_) => {}
        }
        write_tensors(&mut self.inner, &tensors)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> IoResult<W> {
        if self.written != self.expected {
            return Err(IoError::Inconsistent(format!(
                "wrote {} frames, header promised {}",
                self.written, self.expected
            )));
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Byte reader that remembers its position for error reporting.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn fail(&self, reason: impl Into<String>) -> IoError {
        IoError::Format {
            offset: self.offset,
            reason: reason.into(),
        }
    }

    fn bytes(&mut self, n: usize, what: &str) -> IoResult<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got < n {
            let err = IoError::Format {
                offset: self.offset + got as u64,
                reason: format!("truncated {what}: needed {n} bytes, found {got}"),
            };
            return Err(err);
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> IoResult<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> IoResult<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn at_eof(&mut self) -> IoResult<bool> {
        let mut probe = [0u8; 1];
        Ok(self.inner.read(&mut probe)? == 0)
    }
}

/// Streaming OMCF reader; yields frames in file order.
pub struct ContainerReader<R: Read> {
    cur: Cursor<R>,
    frame_count: u32,
    next: u32,
    shapes: Option<Vec<(String, Vec<usize>)>>,
    failed: bool,
}

impl ContainerReader<BufReader<File>> {
    pub fn open(path: &Path) -> IoResult<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

/// Reads one frame's worth of tensors (tensor count included).
fn read_tensors<R: Read>(cur: &mut Cursor<R>) -> IoResult<Vec<NamedTensor>> {
    let count = cur.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(16) as usize);
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let at = cur.offset;
        let name = String::from_utf8(cur.bytes(name_len, "tensor name")?).map_err(|_| IoError::Format {
            offset: at,
            reason: "tensor name is not UTF-8".into(),
        })?;
        let ndim = cur.u32("dimension count")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(cur.u32("dimension")? as usize);
        }
        let dtype_at = cur.offset;
        let dtype = cur.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(IoError::Format {
                offset: dtype_at,
                reason: format!("unknown dtype code {dtype}"),
            });
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| cur.fail(format!("tensor {name} is too large")))?;
        let raw = cur.bytes(count * 4, &format!("payload of tensor {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(NamedTensor::new(name, dims, data)?);
    }
    Ok(tensors)
}

impl<R: Read> ContainerReader<R> {
    pub fn new(inner: R) -> IoResult<Self> {
        let mut cur = Cursor { inner, offset: 0 };
        let magic = cur.bytes(4, "magic")?;
        if magic != MAGIC {
            return Err(IoError::Format {
                offset: 0,
                reason: format!("bad magic {magic:?}"),
            });
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(IoError::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let frame_count = cur.u32("frame count")?;
        Ok(Self {
            cur,
            frame_count,
            next: 0,
            shapes: None,
            failed: false,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count as usize
    }

    fn read_frame(&mut self) -> IoResult<FrameContainer> {
        let start = self.cur.offset;
        let tensors = read_tensors(&mut self.cur)?;
        let shapes: Vec<(String, Vec<usize>)> =
            tensors.iter().map(|t| (t.name.clone(), t.dims.clone())).collect();
        match &self.shapes {
            None => self.shapes = Some(shapes),
            Some(first) if *first != shapes => {
                return Err(IoError::Format {
                    offset: start,
                    reason: format!("frame {} differs in shape from frame 1", self.next + 1),
                });
            }
            Some(_) => {}
        }
        let frame = FrameContainer::from_tensors(self.next + 1, tensors).map_err(|e| IoError::Format {
            offset: start,
            reason: e.to_string(),
        })?;
        Ok(frame)
    }
}

impl<R: Read> Iterator for ContainerReader<R> {
    type Item = IoResult<FrameContainer>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.next == self.frame_count {
            return match self.cur.at_eof() {
                Ok(true) => None,
                Ok(false) => {
                    self.failed = true;
                    Some(Err(self.cur.fail("trailing bytes after last frame")))
                }
                Err(e) => {
                    self.failed = true;
                    Some(Err(e.into()))
                }
            };
        }
        let out = self.read_frame();
        match out {
            Ok(_) => self.next += 1,
            Err(_) => self.failed = true,
        }
        Some(out)
    }
}

pub fn write_container(frames: &[FrameContainer], path: &Path) -> IoResult<()> {
    let mut w = ContainerWriter::create(path, frames.len())?;
    for f in frames {
        w.push(f)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_container(path: &Path) -> IoResult<Vec<FrameContainer>> {
    ContainerReader::open(path)?.collect()
}

/// Writes a single set of named tensors (network weights) as a one-frame
/// OMCF file.
pub fn write_weights(tensors: &[NamedTensor], path: &Path) -> IoResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&1u32.to_le_bytes())?;
    write_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn read_weights(path: &Path) -> IoResult<Vec<NamedTensor>> {
    let mut cur = Cursor {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    if cur.bytes(4, "magic")? != MAGIC {
        return Err(IoError::Format {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(IoError::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let frames = cur.u32("frame count")?;
    if frames != 1 {
        return Err(IoError::Format {
            offset: 8,
            reason: format!("weights file must hold exactly one frame, found {frames}"),
        });
    }
    let tensors = read_tensors(&mut cur)?;
    if !cur.at_eof()? {
        return Err(cur.fail("trailing bytes after weights"));
    }
    Ok(tensors)
}

fn field<T: std::str::FromStr>(raw: Option<&str>, name: &str, line: usize) -> IoResult<T> {
    let raw = raw.ok_or_else(|| IoError::Parse {
        line,
        reason: format!("missing field {name}"),
    })?;
    raw.trim().parse().map_err(|_| IoError::Parse {
        line,
        reason: format!("field {name} is not numeric: {raw:?}"),
    })
}

/// Parses MOT rows `frame,id,x,y,w,h,conf,…`. Fields after `conf` are
/// ignored; blank lines are skipped.
pub fn parse_mot(text: &str) -> IoResult<Vec<MotBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split(',');
        let frame_raw: f64 = field(f.next(), "frame", line_no)?;
        let id_raw: f64 = field(f.next(), "id", line_no)?;
        if frame_raw < 1.0 || frame_raw.fract() != 0.0 || frame_raw > f64::from(u32::MAX) {
            return Err(IoError::Parse {
                line: line_no,
                reason: format!("frame must be a positive integer, got {frame_raw}"),
            });
        }
        if id_raw.fract() != 0.0 {
            return Err(IoError::Parse {
                line: line_no,
                reason: format!("id must be an integer, got {id_raw}"),
            });
        }
        let b = MotBox {
            frame: frame_raw as u32,
            id: id_raw as i64,
            x: field(f.next(), "x", line_no)?,
            y: field(f.next(), "y", line_no)?,
            w: field(f.next(), "w", line_no)?,
            h: field(f.next(), "h", line_no)?,
            conf: field(f.next(), "conf", line_no)?,
        };
        b.validate().map_err(|e| IoError::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        out.push(b);
    }
    Ok(out)
}

pub fn read_mot_boxes(path: &Path) -> IoResult<Vec<MotBox>> {
    let mut text = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut text)?;
    parse_mot(&text)
}

/// Renders results rows sorted by `(frame, id)`. Coordinates keep two
/// decimals, confidence six.
pub fn format_mot(tracks: &[MotBox]) -> IoResult<String> {
    if let Some(bad) = tracks.iter().find(|t| t.id < 1) {
        return Err(IoError::Inconsistent(format!(
            "track id must be at least 1, got {} at frame {}",
            bad.id, bad.frame
        )));
    }
    let mut rows: Vec<&MotBox> = tracks.iter().collect();
    rows.sort_by_key(|t| (t.frame, t.id));
    let mut out = String::with_capacity(rows.len() * 48);
    for t in rows {
        writeln!(
            out,
            "{},{},{:.2},{:.2},{:.2},{:.2},{:.6},-1,-1,-1",
            t.frame, t.id, t.x, t.y, t.w, t.h, t.conf
        )
        .expect("writing to a String");
    }
    Ok(out)
}

pub fn write_mot_results(tracks: &[MotBox], path: &Path) -> IoResult<()> {
    let text = format_mot(tracks)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Parses `frame,id` pairs, with an optional header line.
pub fn parse_pairs(text: &str) -> IoResult<Vec<(u32, i64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("frame")) {
            continue;
        }
        let mut f = line.split(',');
        out.push((field(f.next(), "frame", i + 1)?, field(f.next(), "id", i + 1)?));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> IoResult<Vec<(u32, i64)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut text = String::new();
    for line in reader.lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_pairs(&text)
}
