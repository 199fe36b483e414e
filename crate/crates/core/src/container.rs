//! Little-endian binary containers for datasets and checkpoints.
//!
//! Dataset layout:
//!
//! ```text
//! "NALIGN01"  u32 version  u64 count
//! count x { u64 pair_id  u8 split  tensor(fmri)  tensor(video)  tensor(caption) }
//! u32 crc32(everything after the magic)
//! tensor := u32 rank  rank x u32 extent  f32 payload
//! ```
//!
//! Named-tensor containers (checkpoints) share the framing but carry
//! `u32 name_len, utf8 name` before each tensor and an `f64` payload, so
//! parameters reload bit-exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::{Split, TripletSample};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"NALIGN01";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Payload {
    F32,
    F64,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor, payload: Payload) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &x in t.data() {
            match payload {
                Payload::F32 => self.buf.extend_from_slice(&(x as f32).to_le_bytes()),
                Payload::F64 => self.buf.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf[8..]);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("unexpected end of data reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn tensor(&mut self, payload: Payload, what: &str) -> Result<Tensor> {
        let at = self.pos as u64;
        let rank = self.u32(what)? as usize;
        if rank > 8 {
            return Err(Error::format(at, format!("implausible rank {rank} for {what}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(what)? as usize);
        }
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::format(at, format!("zero extent in {what}")));
        }
        let width = match payload {
            Payload::F32 => 4,
            Payload::F64 => 8,
        };
        let bytes = self.take(n.checked_mul(width).unwrap_or(usize::MAX), what)?;
        let data = bytes
            .chunks_exact(width)
            .map(|c| match payload {
                Payload::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                Payload::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect();
        Tensor::new(shape, data).map_err(|_| Error::format(at, format!("bad tensor {what}")))
    }
}

/// Checks magic, version and trailing CRC; returns a reader positioned after the version.
fn open<'a>(buf: &'a [u8], magic: &[u8; 8], version: u32) -> Result<Reader<'a>> {
    if buf.len() < 8 || &buf[..8] != magic {
        return Err(Error::format(
            0,
            format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    if buf.len() < 8 + 4 + 4 {
        return Err(Error::format(buf.len() as u64, "file too short"));
    }
    let body_end = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body_end..].try_into().unwrap());
    let mut r = Reader {
        buf: &buf[..body_end],
        pos: 8,
    };
    let v = r.u32("version")?;
    if v != version {
        return Err(Error::format(8, format!("unsupported version {v}, expected {version}")));
    }
    if crc32fast::hash(&buf[8..body_end]) != stored {
        return Err(Error::format(body_end as u64, "checksum mismatch"));
    }
    Ok(r)
}

pub fn encode_dataset(samples: &[TripletSample]) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u64(samples.len() as u64);
    for s in samples {
        w.u64(s.pair_id);
        w.u8(s.split.code());
        w.tensor(&s.fmri, Payload::F32);
        w.tensor(&s.video, Payload::F32);
        w.tensor(&s.caption, Payload::F32);
    }
    w.finish()
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<TripletSample>> {
    let mut r = open(buf, DATASET_MAGIC, DATASET_VERSION)?;
    let count = r.u64("sample count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let pair_id = r.u64("pair_id")?;
        let at = r.pos as u64;
        let split = Split::from_code(r.u8("split")?)
            .ok_or_else(|| Error::format(at, format!("invalid split code in sample {i}")))?;
        let fmri = r.tensor(Payload::F32, "fmri")?;
        let video = r.tensor(Payload::F32, "video")?;
        let caption = r.tensor(Payload::F32, "caption")?;
        out.push(TripletSample {
            pair_id,
            fmri,
            video,
            caption,
            split,
        });
    }
    if r.pos != r.buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last record"));
    }
    Ok(out)
}

pub fn write_dataset(samples: &[TripletSample], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(samples))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TripletSample>> {
    decode_dataset(&fs::read(path)?)
}

/// Encodes `(name, tensor)` entries with `f64` payloads under `magic`.
pub fn encode_named(magic: &[u8; 8], version: u32, entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(magic);
    w.u32(version);
    w.u64(entries.len() as u64);
    for (name, t) in entries {
        w.u32(name.len() as u32);
        w.buf.extend_from_slice(name.as_bytes());
        w.tensor(t, Payload::F64);
    }
    w.finish()
}

pub fn decode_named(buf: &[u8], magic: &[u8; 8], version: u32) -> Result<Vec<(String, Tensor)>> {
    let mut r = open(buf, magic, version)?;
    let count = r.u64("entry count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at, "entry name is not utf-8"))?
            .to_string();
        let t = r.tensor(Payload::F64, &name)?;
        out.push((name, t));
    }
    if r.pos != r.buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last entry"));
    }
    Ok(out)
}
