//! Little-endian snapshot encoding with CRC-32C framing.
//!
//! ```text
//! header : magic u32 | version u16 | step u64 | origin_rank u32 | entry_count u32 | crc32c u32
//! entry  : name_len u16 | name | origin_rank u32 | payload_len u64 | payload | crc32c u32
//! trailer: crc32c u32 over every preceding byte
//! ```

use crc::{Crc, CRC_32_ISCSI, CRC_64_XZ};

use super::SnapshotError;

pub const MAGIC: u32 = 0x4348_4B50;
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 26;
pub const TRAILER_LEN: usize = 4;

const CASTAGNOLI: Crc<u32> = Crc::<u32>::new(&CRC_32_ISCSI);
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn crc32c(bytes: &[u8]) -> u32 {
    CASTAGNOLI.checksum(bytes)
}

pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

/// One registered entity's captured state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotEntry {
    pub name: String,
    pub origin_rank: u32,
    pub payload: Vec<u8>,
    pub crc: u32,
}

impl SnapshotEntry {
    pub fn new(name: impl Into<String>, origin_rank: u32, payload: Vec<u8>) -> Self {
        let crc = crc32c(&payload);
        Self {
            name: name.into(),
            origin_rank,
            payload,
            crc,
        }
    }

    pub fn encoded_len(&self) -> usize {
        2 + self.name.len() + 4 + 8 + self.payload.len() + 4
    }
}

/// A decoded snapshot: every entity's entry for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotBuffer {
    pub step: u64,
    pub origin_rank: u32,
    pub entries: Vec<SnapshotEntry>,
}

impl SnapshotBuffer {
    pub fn entry(&self, name: &str) -> Option<&SnapshotEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.entries.iter().map(SnapshotEntry::encoded_len).sum::<usize>() + TRAILER_LEN
    }
}

pub fn encode_snapshot(buf: &SnapshotBuffer) -> Vec<u8> {
    let mut out = Vec::with_capacity(buf.encoded_len());
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&buf.step.to_le_bytes());
    out.extend_from_slice(&buf.origin_rank.to_le_bytes());
    out.extend_from_slice(&(buf.entries.len() as u32).to_le_bytes());
    let header_crc = crc32c(&out);
    out.extend_from_slice(&header_crc.to_le_bytes());
    for e in &buf.entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&e.origin_rank.to_le_bytes());
        out.extend_from_slice(&(e.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&e.payload);
        out.extend_from_slice(&e.crc.to_le_bytes());
    }
    let trailer = crc32c(&out);
    out.extend_from_slice(&trailer.to_le_bytes());
    out
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<SnapshotBuffer, SnapshotError> {
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(SnapshotError::Truncated);
    }
    let mut r = Reader::new(bytes);
    let magic = r.u32()?;
    if magic != MAGIC {
        return Err(SnapshotError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(SnapshotError::UnsupportedVersion(version));
    }
    let step = r.u64()?;
    let origin_rank = r.u32()?;
    let count = r.u32()?;
    let header_crc = r.u32()?;
    if crc32c(&bytes[..HEADER_LEN - 4]) != header_crc {
        return Err(SnapshotError::HeaderCrc);
    }
    let body_end = bytes.len() - TRAILER_LEN;
    let trailer = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if crc32c(&bytes[..body_end]) != trailer {
        return Err(SnapshotError::TrailerCrc);
    }
    let mut r = Reader::new(&bytes[..body_end]);
    r.skip(HEADER_LEN)?;
    let mut entries = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| SnapshotError::InvalidName)?
            .to_owned();
        let entry_origin = r.u32()?;
        let len = usize::try_from(r.u64()?).map_err(|_| SnapshotError::Truncated)?;
        let payload = r.take(len)?.to_vec();
        let crc = r.u32()?;
        if crc32c(&payload) != crc {
            return Err(SnapshotError::EntryCrc { entity: name });
        }
        entries.push(SnapshotEntry {
            name,
            origin_rank: entry_origin,
            payload,
            crc,
        });
    }
    if !r.is_empty() {
        return Err(SnapshotError::TrailingBytes);
    }
    Ok(SnapshotBuffer {
        step,
        origin_rank,
        entries,
    })
}

/// Bounds-checked little-endian cursor.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        let end = self.pos.checked_add(n).ok_or(SnapshotError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(SnapshotError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    pub fn skip(&mut self, n: usize) -> Result<(), SnapshotError> {
        self.take(n).map(|_| ())
    }

    pub fn u16(&mut self) -> Result<u16, SnapshotError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, SnapshotError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
