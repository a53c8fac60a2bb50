//! Binary bag files, format `EMB1` (all integers and floats little-endian):
//!
//! ```text
//! offset 0   magic "EMB1"
//!        4   u32 version (= 1)
//!        8   u32 n   (rows)
//!       12   u32 d   (embedding dimension)
//!       16   u32 flags: bit0 = coords present, bit1 = patient_id present
//!       20   u32 slide_id byte length, then that many UTF-8 bytes
//!        .   [flags bit1] u32 patient_id byte length + UTF-8 bytes
//!        .   [flags bit0] n * 2 u32 grid coordinates (x, y per row)
//!        .   n * d f32 embeddings, row-major
//! ```
//!
//! Readers reject unknown flag bits, truncated payloads, and trailing
//! bytes, always reporting the byte offset of the problem.

use super::{EmbeddingBag, FeatureError};
use ndarray::Array2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"EMB1";
const VERSION: u32 = 1;
const FLAG_COORDS: u32 = 1;
const FLAG_PATIENT_ID: u32 = 2;

pub fn write_bag(bag: &EmbeddingBag, path: &Path) -> Result<(), FeatureError> {
    let io_err = |source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let mut flags = 0u32;
    if !bag.coords.is_empty() {
        flags |= FLAG_COORDS;
    }
    if !bag.patient_id.is_empty() {
        flags |= FLAG_PATIENT_ID;
    }
    let mut out = |bytes: &[u8]| w.write_all(bytes).map_err(io_err);
    out(&MAGIC)?;
    out(&VERSION.to_le_bytes())?;
    out(&(bag.n() as u32).to_le_bytes())?;
    out(&(bag.dim() as u32).to_le_bytes())?;
    out(&flags.to_le_bytes())?;
    out(&(bag.slide_id.len() as u32).to_le_bytes())?;
    out(bag.slide_id.as_bytes())?;
    if flags & FLAG_PATIENT_ID != 0 {
        out(&(bag.patient_id.len() as u32).to_le_bytes())?;
        out(bag.patient_id.as_bytes())?;
    }
    for c in &bag.coords {
        out(&c[0].to_le_bytes())?;
        out(&c[1].to_le_bytes())?;
    }
    for v in bag.embeddings.iter() {
        out(&v.to_le_bytes())?;
    }
    w.flush().map_err(io_err)
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn format_err(&self, reason: impl Into<String>) -> FeatureError {
        FeatureError::Format {
            offset: self.offset,
            reason: reason.into(),
        }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), FeatureError> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(self.format_err("unexpected end of file"))
            }
            Err(e) => Err(self.format_err(format!("read failed: {e}"))),
        }
    }

    fn u32(&mut self) -> Result<u32, FeatureError> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn f32(&mut self) -> Result<f32, FeatureError> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf)?;
        Ok(f32::from_le_bytes(buf))
    }

    fn string(&mut self, what: &str) -> Result<String, FeatureError> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(self.format_err(format!("{what} length {len} is implausible")));
        }
        let mut buf = vec![0u8; len];
        self.read_exact(&mut buf)?;
        String::from_utf8(buf)
            .map_err(|_| self.format_err(format!("{what} is not valid UTF-8")))
    }
}

pub fn read_bag(path: &Path) -> Result<EmbeddingBag, FeatureError> {
    let file = File::open(path).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader {
        inner: BufReader::new(file),
        offset: 0,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(FeatureError::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected \"EMB1\""),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FeatureError::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    if n == 0 || d == 0 {
        return Err(FeatureError::Format {
            offset: 8,
            reason: format!("empty bag ({n} rows, {d} columns)"),
        });
    }
    let flags = r.u32()?;
    if flags & !(FLAG_COORDS | FLAG_PATIENT_ID) != 0 {
        return Err(FeatureError::Format {
            offset: 16,
            reason: format!("unknown flag bits {flags:#x}"),
        });
    }
    let slide_id = r.string("slide_id")?;
    let patient_id = if flags & FLAG_PATIENT_ID != 0 {
        r.string("patient_id")?
    } else {
        String::new()
    };
    let mut coords = Vec::new();
    if flags & FLAG_COORDS != 0 {
        coords.reserve(n);
        for _ in 0..n {
            let x = r.u32()?;
            let y = r.u32()?;
            coords.push([x, y]);
        }
    }
    let mut values = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let at = r.offset;
        let v = r.f32()?;
        if !v.is_finite() {
            return Err(FeatureError::Format {
                offset: at,
                reason: format!("non-finite embedding value {v}"),
            });
        }
        values.push(v);
    }
    let mut one = [0u8; 1];
    if r.inner.read(&mut one).map_err(|e| r.format_err(e.to_string()))? != 0 {
        return Err(r.format_err("trailing bytes after embedding payload"));
    }
    let embeddings = Array2::from_shape_vec((n, d), values).expect("counted shape");
    EmbeddingBag::new(slide_id, patient_id, coords, embeddings)
}
