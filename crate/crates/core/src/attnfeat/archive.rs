//! The `UCAT` attention archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UCAT" | version u32 | count u64
//! index, sorted by key bytes:  key_len u16 | key | offset u64 | length u64
//! payloads, in index order:    N u16 | L u8 | H u8 | crc32 u32 | L·H·N·N × f32
//! ```
//!
//! `offset` is the absolute file position of a payload record and `length`
//! its full size including the 8-byte record header. The CRC covers the
//! float bytes. Readers load only the header and index, then binary-search
//! the index and seek straight to one payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Mutex;

use super::{AttentionProvider, AttentionTensor, SentKey};
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: [u8; 4] = *b"UCAT";
pub const ARCHIVE_VERSION: u32 = 1;

const HEADER_LEN: u64 = 4 + 4 + 8;
const RECORD_HEADER_LEN: u64 = 2 + 1 + 1 + 4;

/// One index record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveEntry {
    pub key: String,
    pub offset: u64,
    pub length: u64,
}

fn payload_len(t: &AttentionTensor) -> u64 {
    RECORD_HEADER_LEN + 4 * t.values.len() as u64
}

/// Writes `tensors` as an archive. Keys must be unique.
pub fn write_archive(path: &Path, tensors: &[AttentionTensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_archive_to(&mut w, tensors)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_archive_to<W: Write>(w: &mut W, tensors: &[AttentionTensor]) -> Result<()> {
    let mut order: Vec<(String, &AttentionTensor)> =
        tensors.iter().map(|t| (t.key.encode(), t)).collect();
    order.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    if let Some(dup) = order.windows(2).find(|p| p[0].0 == p[1].0) {
        return Err(Error::InvalidArgument(format!(
            "duplicate archive key {}",
            dup[0].1.key
        )));
    }
    for (_, t) in &order {
        if t.n_words > usize::from(u16::MAX) || t.n_layers > 255 || t.n_heads > 255 {
            return Err(Error::ShapeMismatch(format!(
                "{}: shape {}x{}x{} exceeds archive field widths",
                t.key, t.n_layers, t.n_heads, t.n_words
            )));
        }
    }

    let index_len: u64 = order.iter().map(|(k, _)| 2 + k.len() as u64 + 16).sum();
    w.write_all(&ARCHIVE_MAGIC)?;
    w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    w.write_all(&(order.len() as u64).to_le_bytes())?;

    let mut offset = HEADER_LEN + index_len;
    for (key, t) in &order {
        let len = payload_len(t);
        let key_len = u16::try_from(key.len())
            .map_err(|_| Error::InvalidArgument(format!("archive key too long: {}", t.key)))?;
        w.write_all(&key_len.to_le_bytes())?;
        w.write_all(key.as_bytes())?;
        w.write_all(&offset.to_le_bytes())?;
        w.write_all(&len.to_le_bytes())?;
        offset += len;
    }

    for (_, t) in &order {
        let mut bytes = Vec::with_capacity(4 * t.values.len());
        for v in &t.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&(t.n_words as u16).to_le_bytes())?;
        w.write_all(&[t.n_layers as u8, t.n_heads as u8])?;
        w.write_all(&crc32fast::hash(&bytes).to_le_bytes())?;
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::RawIo(e),
    })
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let mut b = [0; 2];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0; 4];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0; 8];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// A random-access archive reader. Concurrent `read` calls serialize on the inner reader.
#[derive(Debug)]
pub struct Archive<R> {
    reader: Mutex<R>,
    index: Vec<ArchiveEntry>,
}

impl Archive<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Archive::from_reader(BufReader::new(file))
    }
}

impl<R: Read + Seek> Archive<R> {
    /// Parses the header and index only.
    pub fn from_reader(mut reader: R) -> Result<Self> {
        let file_len = reader.seek(SeekFrom::End(0))?;
        reader.seek(SeekFrom::Start(0))?;

        let mut magic = [0; 4];
        read_exact_or_truncated(&mut reader, &mut magic, "archive header")?;
        if magic != ARCHIVE_MAGIC {
            return Err(Error::BadMagic {
                expected: ARCHIVE_MAGIC,
                found: magic,
            });
        }
        let version = read_u32(&mut reader, "archive header")?;
        if version != ARCHIVE_VERSION {
            return Err(Error::VersionMismatch {
                expected: ARCHIVE_VERSION,
                found: version,
            });
        }
        let count = read_u64(&mut reader, "archive header")?;
        // Each index record takes at least 18 bytes.
        if count > file_len.saturating_sub(HEADER_LEN) / 18 {
            return Err(Error::Truncated(format!(
                "index claims {count} entries in a {file_len}-byte file"
            )));
        }

        let mut index = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let key_len = read_u16(&mut reader, "archive index")?;
            let mut key = vec![0; usize::from(key_len)];
            read_exact_or_truncated(&mut reader, &mut key, "archive index")?;
            let key = String::from_utf8(key)
                .map_err(|_| Error::Corrupt("archive key is not UTF-8".into()))?;
            let offset = read_u64(&mut reader, "archive index")?;
            let length = read_u64(&mut reader, "archive index")?;
            if length < RECORD_HEADER_LEN
                || offset.checked_add(length).is_none_or(|end| end > file_len)
            {
                return Err(Error::Truncated(format!(
                    "payload of {key:?} at {offset}+{length} exceeds file length {file_len}"
                )));
            }
            index.push(ArchiveEntry {
                key,
                offset,
                length,
            });
        }
        if index
            .windows(2)
            .any(|p| p[0].key.as_bytes() >= p[1].key.as_bytes())
        {
            return Err(Error::Corrupt("archive index is not sorted".into()));
        }
        Ok(Archive {
            reader: Mutex::new(reader),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.index
    }

    pub fn keys(&self) -> Result<Vec<SentKey>> {
        self.index.iter().map(|e| SentKey::decode(&e.key)).collect()
    }

    pub fn contains(&self, key: &SentKey) -> bool {
        self.find(&key.encode()).is_some()
    }

    fn find(&self, raw: &str) -> Option<&ArchiveEntry> {
        self.index
            .binary_search_by(|e| e.key.as_bytes().cmp(raw.as_bytes()))
            .ok()
            .map(|i| &self.index[i])
    }

    pub fn read(&self, key: &SentKey) -> Result<AttentionTensor> {
        let entry = self
            .find(&key.encode())
            .ok_or_else(|| Error::MissingKey(key.to_string()))?;
        let mut buf = vec![0; entry.length as usize];
        {
            let mut reader = self.reader.lock().unwrap_or_else(|p| p.into_inner());
            reader.seek(SeekFrom::Start(entry.offset))?;
            read_exact_or_truncated(&mut *reader, &mut buf, "archive payload")?;
        }
        decode_payload(key.clone(), &buf)
    }

    /// Every tensor in index order.
    pub fn read_all(&self) -> Result<Vec<AttentionTensor>> {
        self.keys()?.iter().map(|k| self.read(k)).collect()
    }

    /// `(n_layers, n_heads)` of the first payload, reading only its record header.
    pub fn peek_shape(&self) -> Result<Option<(usize, usize)>> {
        let Some(entry) = self.index.first() else {
            return Ok(None);
        };
        let mut head = [0u8; 4];
        let mut reader = self.reader.lock().unwrap_or_else(|p| p.into_inner());
        reader.seek(SeekFrom::Start(entry.offset))?;
        read_exact_or_truncated(&mut *reader, &mut head, "archive payload")?;
        Ok(Some((usize::from(head[2]), usize::from(head[3]))))
    }
}

fn decode_payload(key: SentKey, buf: &[u8]) -> Result<AttentionTensor> {
    let n_words = usize::from(u16::from_le_bytes([buf[0], buf[1]]));
    let n_layers = usize::from(buf[2]);
    let n_heads = usize::from(buf[3]);
    let stored = u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]);
    let body = &buf[RECORD_HEADER_LEN as usize..];
    let expected = 4 * n_layers * n_heads * n_words * n_words;
    if body.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{key}: record header says {n_layers}x{n_heads}x{n_words}x{n_words} but payload holds {} bytes",
            body.len()
        )));
    }
    let computed = crc32fast::hash(body);
    if computed != stored {
        return Err(Error::ChecksumMismatch {
            what: format!("attention payload {key}"),
            stored,
            computed,
        });
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    AttentionTensor::new(key, n_words, n_layers, n_heads, values)
}

/// Serves attention straight from an archive file.
#[derive(Debug)]
pub struct ArchiveProvider {
    archive: Archive<BufReader<File>>,
    n_layers: usize,
    n_heads: usize,
}

impl ArchiveProvider {
    pub fn open(path: &Path) -> Result<Self> {
        let archive = Archive::open(path)?;
        let (n_layers, n_heads) = archive.peek_shape()?.unwrap_or((0, 0));
        Ok(ArchiveProvider {
            archive,
            n_layers,
            n_heads,
        })
    }

    pub fn archive(&self) -> &Archive<BufReader<File>> {
        &self.archive
    }
}

impl AttentionProvider for ArchiveProvider {
    fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn n_heads(&self) -> usize {
        self.n_heads
    }

    fn attention(&self, key: &SentKey, _words: &[String]) -> Result<AttentionTensor> {
        self.archive.read(key)
    }
}
