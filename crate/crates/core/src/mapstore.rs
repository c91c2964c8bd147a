//! Write-once, read-only key-value tables for the line <-> id mappings.
//!
//! Each store is a directory holding one sorted table file, `table.sst`:
//!
//! ```text
//! header   "NLKVSST1" | version u32
//! blocks   records (key_len u32 | val_len u32 | key | val)* | crc32 u32
//! index    block_count u64 | per block: offset u64 | len u32 | first_key_len u32 | first_key
//! footer   index_offset u64 | index_len u64 | entry_count u64 | "NLKVEND\0"
//! ```
//!
//! All integers are little-endian. Records are sorted by key bytes and packed
//! into ~4 KiB blocks. Opening a table reads only the footer and the sparse
//! block index; a lookup reads exactly one block with a positioned read.
//! Id keys are encoded big-endian so byte order equals numeric order.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};

const HEADER_MAGIC: &[u8; 8] = b"NLKVSST1";
const FOOTER_MAGIC: &[u8; 8] = b"NLKVEND\0";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 12;
const FOOTER_LEN: u64 = 32;
const BLOCK_TARGET: usize = 4096;
pub const TABLE_FILE: &str = "table.sst";

#[derive(Debug, Clone)]
struct BlockMeta {
    first_key: Box<[u8]>,
    offset: u64,
    len: u32,
}

/// An open sorted table. Immutable; safe to share between threads.
#[derive(Debug)]
pub struct KvTable {
    path: PathBuf,
    file: File,
    blocks: Vec<BlockMeta>,
    entry_count: u64,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Store(format!("{}: {what}", path.display()))
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Iterates `(key, value)` records inside one block payload.
fn records(payload: &[u8]) -> impl Iterator<Item = std::result::Result<(&[u8], &[u8]), &'static str>> {
    let mut at = 0;
    std::iter::from_fn(move || {
        if at >= payload.len() {
            return None;
        }
        if payload.len() - at < 8 {
            at = payload.len();
            return Some(Err("truncated record header"));
        }
        let kl = u32_at(payload, at) as usize;
        let vl = u32_at(payload, at + 4) as usize;
        let start = at + 8;
        if payload.len() - start < kl + vl {
            at = payload.len();
            return Some(Err("record overruns block"));
        }
        at = start + kl + vl;
        Some(Ok((&payload[start..start + kl], &payload[start + kl..start + kl + vl])))
    })
}

impl KvTable {
    /// Writes `entries`, which must be strictly increasing by key, to
    /// `dir/table.sst` and opens the result.
    pub fn write<K, V>(dir: &Path, entries: impl IntoIterator<Item = (K, V)>) -> Result<Self>
    where
        K: AsRef<[u8]>,
        V: AsRef<[u8]>,
    {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(TABLE_FILE);
        let mut w = BufWriter::new(File::create(&path).at(&path)?);
        w.write_all(HEADER_MAGIC).at(&path)?;
        w.write_all(&STORE_VERSION.to_le_bytes()).at(&path)?;

        let mut offset = HEADER_LEN;
        let mut blocks: Vec<BlockMeta> = Vec::new();
        let mut block = Vec::with_capacity(BLOCK_TARGET * 2);
        let mut first_key: Option<Vec<u8>> = None;
        let mut last_key: Option<Vec<u8>> = None;
        let mut count = 0u64;

        let mut flush = |block: &mut Vec<u8>, first: &mut Option<Vec<u8>>, w: &mut BufWriter<File>| -> Result<()> {
            let Some(first_key) = first.take() else {
                return Ok(());
            };
            let crc = crc32fast::hash(block);
            w.write_all(block).at(&path)?;
            w.write_all(&crc.to_le_bytes()).at(&path)?;
            blocks.push(BlockMeta {
                first_key: first_key.into_boxed_slice(),
                offset,
                len: block.len() as u32,
            });
            offset += block.len() as u64 + 4;
            block.clear();
            Ok(())
        };

        for (k, v) in entries {
            let (k, v) = (k.as_ref(), v.as_ref());
            if let Some(prev) = &last_key {
                if k <= prev.as_slice() {
                    return Err(Error::Build(if k == prev.as_slice() {
                        format!("duplicate key {:?}", String::from_utf8_lossy(k))
                    } else {
                        "keys must be written in sorted order".into()
                    }));
                }
            }
            if first_key.is_none() {
                first_key = Some(k.to_vec());
            }
            block.extend_from_slice(&(k.len() as u32).to_le_bytes());
            block.extend_from_slice(&(v.len() as u32).to_le_bytes());
            block.extend_from_slice(k);
            block.extend_from_slice(v);
            last_key = Some(k.to_vec());
            count += 1;
            if block.len() >= BLOCK_TARGET {
                flush(&mut block, &mut first_key, &mut w)?;
            }
        }
        flush(&mut block, &mut first_key, &mut w)?;

        let index_offset = offset;
        let mut index = Vec::new();
        index.extend_from_slice(&(blocks.len() as u64).to_le_bytes());
        for b in &blocks {
            index.extend_from_slice(&b.offset.to_le_bytes());
            index.extend_from_slice(&b.len.to_le_bytes());
            index.extend_from_slice(&(b.first_key.len() as u32).to_le_bytes());
            index.extend_from_slice(&b.first_key);
        }
        w.write_all(&index).at(&path)?;
        w.write_all(&index_offset.to_le_bytes()).at(&path)?;
        w.write_all(&(index.len() as u64).to_le_bytes()).at(&path)?;
        w.write_all(&count.to_le_bytes()).at(&path)?;
        w.write_all(FOOTER_MAGIC).at(&path)?;
        w.flush().at(&path)?;
        drop(w);
        Self::open(dir)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(TABLE_FILE);
        let file = File::open(&path).at(&path)?;
        let len = file.metadata().at(&path)?.len();
        if len < HEADER_LEN + FOOTER_LEN {
            return Err(corrupt(&path, "file too short"));
        }
        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact_at(&mut header, 0).at(&path)?;
        if &header[..8] != HEADER_MAGIC {
            return Err(corrupt(&path, "bad header magic"));
        }
        let version = u32_at(&header, 8);
        if version != STORE_VERSION {
            return Err(corrupt(&path, format!("store version {version}, expected {STORE_VERSION}")));
        }
        let mut footer = [0u8; FOOTER_LEN as usize];
        file.read_exact_at(&mut footer, len - FOOTER_LEN).at(&path)?;
        if &footer[24..] != FOOTER_MAGIC {
            return Err(corrupt(&path, "bad footer magic"));
        }
        let index_offset = u64_at(&footer, 0);
        let index_len = u64_at(&footer, 8);
        let entry_count = u64_at(&footer, 16);
        if index_offset.checked_add(index_len) != Some(len - FOOTER_LEN) || index_len < 8 {
            return Err(corrupt(&path, "index bounds do not match file size"));
        }
        let mut index = vec![0u8; index_len as usize];
        file.read_exact_at(&mut index, index_offset).at(&path)?;
        let n = u64_at(&index, 0) as usize;
        let mut blocks = Vec::with_capacity(n);
        let mut at = 8;
        for _ in 0..n {
            if index.len() < at + 16 {
                return Err(corrupt(&path, "truncated block index"));
            }
            let offset = u64_at(&index, at);
            let blen = u32_at(&index, at + 8);
            let kl = u32_at(&index, at + 12) as usize;
            at += 16;
            if index.len() < at + kl || offset + blen as u64 + 4 > index_offset {
                return Err(corrupt(&path, "block index entry out of bounds"));
            }
            blocks.push(BlockMeta {
                first_key: index[at..at + kl].into(),
                offset,
                len: blen,
            });
            at += kl;
        }
        Ok(Self {
            path,
            file,
            blocks,
            entry_count,
        })
    }

    pub fn len(&self) -> u64 {
        self.entry_count
    }

    pub fn is_empty(&self) -> bool {
        self.entry_count == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn read_block(&self, b: &BlockMeta) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; b.len as usize + 4];
        self.file.read_exact_at(&mut buf, b.offset).at(&self.path)?;
        let crc = u32_at(&buf, b.len as usize);
        buf.truncate(b.len as usize);
        if crc32fast::hash(&buf) != crc {
            return Err(corrupt(&self.path, format!("checksum mismatch in block at {}", b.offset)));
        }
        Ok(buf)
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        let idx = self.blocks.partition_point(|b| &*b.first_key <= key);
        if idx == 0 {
            return Ok(None);
        }
        let payload = self.read_block(&self.blocks[idx - 1])?;
        for rec in records(&payload) {
            let (k, v) = rec.map_err(|m| corrupt(&self.path, m))?;
            match k.cmp(key) {
                std::cmp::Ordering::Less => continue,
                std::cmp::Ordering::Equal => return Ok(Some(v.to_vec())),
                std::cmp::Ordering::Greater => break,
            }
        }
        Ok(None)
    }

    /// Visits every record in key order, one block in memory at a time.
    pub fn for_each(&self, mut f: impl FnMut(&[u8], &[u8]) -> Result<()>) -> Result<()> {
        for b in &self.blocks {
            let payload = self.read_block(b)?;
            for rec in records(&payload) {
                let (k, v) = rec.map_err(|m| corrupt(&self.path, m))?;
                f(k, v)?;
            }
        }
        Ok(())
    }

    /// Total bytes of the table file.
    pub fn file_bytes(&self) -> Result<u64> {
        Ok(self.file.metadata().at(&self.path)?.len())
    }
}

/// `line -> id` view.
#[derive(Debug)]
pub struct LineToId(KvTable);

/// `id -> line` view.
#[derive(Debug)]
pub struct IdToLine(KvTable);

impl LineToId {
    pub fn open(dir: &Path) -> Result<Self> {
        KvTable::open(dir).map(Self)
    }

    pub fn get_id(&self, line: &str) -> Result<Option<u32>> {
        match self.0.get(line.as_bytes())? {
            None => Ok(None),
            Some(v) if v.len() == 4 => Ok(Some(u32::from_le_bytes(v[..].try_into().unwrap()))),
            Some(v) => Err(corrupt(self.0.path(), format!("id value has {} bytes", v.len()))),
        }
    }

    pub fn table(&self) -> &KvTable {
        &self.0
    }
}

impl IdToLine {
    pub fn open(dir: &Path) -> Result<Self> {
        KvTable::open(dir).map(Self)
    }

    pub fn get_line(&self, id: u32) -> Result<Option<String>> {
        match self.0.get(&id.to_be_bytes())? {
            None => Ok(None),
            Some(v) => String::from_utf8(v)
                .map(Some)
                .map_err(|_| corrupt(self.0.path(), format!("line for id {id} is not UTF-8"))),
        }
    }

    pub fn table(&self) -> &KvTable {
        &self.0
    }
}

/// Both directions of the mapping.
#[derive(Debug)]
pub struct MapStore {
    pub line_to_id: LineToId,
    pub id_to_line: IdToLine,
}

impl MapStore {
    /// Persists a bijection of `(line, id)` pairs into two store directories.
    pub fn put_all<S: AsRef<str>>(
        line_to_id_dir: &Path,
        id_to_line_dir: &Path,
        pairs: impl IntoIterator<Item = (S, u32)>,
    ) -> Result<Self> {
        let mut by_line: Vec<(Vec<u8>, u32)> =
            pairs.into_iter().map(|(l, id)| (l.as_ref().as_bytes().to_vec(), id)).collect();
        by_line.sort_unstable();
        let l2i = KvTable::write(line_to_id_dir, by_line.iter().map(|(l, id)| (l.as_slice(), id.to_le_bytes())))?;

        let mut by_id: Vec<(u32, &[u8])> = by_line.iter().map(|(l, id)| (*id, l.as_slice())).collect();
        by_id.sort_unstable_by_key(|e| e.0);
        if let Some(w) = by_id.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Build(format!("duplicate id {}", w[0].0)));
        }
        let i2l = KvTable::write(id_to_line_dir, by_id.iter().map(|(id, l)| (id.to_be_bytes(), *l)))?;
        Ok(Self {
            line_to_id: LineToId(l2i),
            id_to_line: IdToLine(i2l),
        })
    }

    pub fn open(line_to_id_dir: &Path, id_to_line_dir: &Path) -> Result<Self> {
        Ok(Self {
            line_to_id: LineToId::open(line_to_id_dir)?,
            id_to_line: IdToLine::open(id_to_line_dir)?,
        })
    }

    pub fn get_id(&self, line: &str) -> Result<Option<u32>> {
        self.line_to_id.get_id(line)
    }

    pub fn get_line(&self, id: u32) -> Result<Option<String>> {
        self.id_to_line.get_line(id)
    }

    pub fn len(&self) -> u64 {
        self.line_to_id.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Full scan confirming the two directions are mutual inverses.
    pub fn verify_inverse(&self) -> Result<()> {
        if self.line_to_id.0.len() != self.id_to_line.0.len() {
            return Err(Error::Integrity(format!(
                "line->id has {} entries, id->line has {}",
                self.line_to_id.0.len(),
                self.id_to_line.0.len()
            )));
        }
        self.line_to_id.0.for_each(|k, _| {
            let line = std::str::from_utf8(k).map_err(|_| Error::Integrity("non-UTF-8 line key".into()))?;
            let id = self.get_id(line)?.expect("key present during scan");
            match self.get_line(id)? {
                Some(back) if back == line => Ok(()),
                other => Err(Error::Integrity(format!("id {id} maps back to {other:?}, not {line:?}"))),
            }
        })
    }
}
