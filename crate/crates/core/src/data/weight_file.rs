//! Versioned little-endian weight files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NNWT"
//! 4       4     version (u32) = 1
//! 8       32    graph fingerprint: SHA-256 over ordered (name, dims)
//! 40      4     entry count (u32)
//! 44      8     payload length in bytes (u64)
//! 52      4     CRC-32 (IEEE) of the payload (u32)
//! 56      ...   name table, per entry: name length (u16), UTF-8 name,
//!               rank (u8), rank x dim (u32)
//! ...     ...   payload: every entry's values as f32, entry order
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{fingerprint_of, ModelGraph};
use crate::weights::WeightStore;

pub const MAGIC: &[u8; 4] = b"NNWT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 56;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub fingerprint: [u8; 32],
    pub entry_count: u32,
    pub payload_len: u64,
    pub payload_crc: u32,
}

pub fn store_fingerprint(store: &WeightStore) -> [u8; 32] {
    fingerprint_of(store.entries().iter().map(|e| (e.name.as_str(), e.dims.as_slice())))
}

pub fn encode(store: &WeightStore) -> Result<Vec<u8>> {
    let mut table = Vec::new();
    for e in store.entries() {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Weight(format!("{} (name too long)", e.name)))?;
        table.extend_from_slice(&len.to_le_bytes());
        table.extend_from_slice(name);
        table.push(e.dims.len() as u8);
        for &d in &e.dims {
            let d = u32::try_from(d).map_err(|_| Error::Weight(format!("{} (dimension too large)", e.name)))?;
            table.extend_from_slice(&d.to_le_bytes());
        }
    }
    let mut payload = Vec::with_capacity(store.num_values() * 4);
    for e in store.entries() {
        for v in e.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + table.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&store_fingerprint(store));
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&table);
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.buf.len() as u64,
                reason: format!("truncated while reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a weight file image without checking it against any graph.
pub fn decode(bytes: &[u8]) -> Result<(Header, WeightStore)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "not a weight file (bad magic)".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let fingerprint: [u8; 32] = c.take(32, "fingerprint")?.try_into().expect("32 bytes");
    let entry_count = c.u32("entry count")?;
    let payload_len = c.u64("payload length")?;
    let payload_crc = c.u32("payload checksum")?;
    let mut table = Vec::with_capacity(entry_count as usize);
    for _ in 0..entry_count {
        let at = c.pos as u64;
        let len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                reason: "entry name is not UTF-8".into(),
            })?
            .to_string();
        let rank = c.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32("dimension")? as usize);
        }
        table.push((name, dims));
    }
    let expected: u64 = table.iter().map(|(_, d)| d.iter().product::<usize>() as u64 * 4).sum();
    if expected != payload_len {
        return Err(Error::Format {
            offset: 44,
            reason: format!("payload length {payload_len} disagrees with the name table ({expected})"),
        });
    }
    let payload_start = c.pos as u64;
    let payload = c.take(payload_len as usize, "payload")?;
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            reason: format!("{} trailing bytes", bytes.len() - c.pos),
        });
    }
    if crc32fast::hash(payload) != payload_crc {
        return Err(Error::Format {
            offset: payload_start,
            reason: "payload checksum mismatch".into(),
        });
    }
    let mut store = WeightStore::new();
    let mut values = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
    for (name, dims) in table {
        let n: usize = dims.iter().product();
        let v: Vec<f32> = values.by_ref().take(n).collect();
        store.insert(name.clone(), dims, v).map_err(|e| Error::Format {
            offset: payload_start,
            reason: format!("entry {name}: {e}"),
        })?;
    }
    Ok((
        Header {
            version,
            fingerprint,
            entry_count,
            payload_len,
            payload_crc,
        },
        store,
    ))
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_weights(store: &WeightStore, path: &Path) -> Result<()> {
    let bytes = encode(store)?;
    let file_name = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.{}.tmp", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Reads `path` and checks it against `graph`: fingerprint first, then each
/// entry's dims.
pub fn load_weights(path: &Path, graph: &ModelGraph) -> Result<WeightStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, store) = decode(&bytes)?;
    if header.fingerprint != graph.fingerprint() {
        return Err(Error::Compat(describe_mismatch(&store, graph)));
    }
    store.check_against(graph)?;
    Ok(store)
}

/// The first three positions where file and graph registries disagree.
fn describe_mismatch(store: &WeightStore, graph: &ModelGraph) -> String {
    let file: Vec<(&str, &[usize])> = store.entries().iter().map(|e| (e.name.as_str(), e.dims.as_slice())).collect();
    let want: Vec<(&str, &[usize])> = graph.params().iter().map(|p| (p.name.as_str(), p.dims.as_slice())).collect();
    let mut diffs = Vec::new();
    for i in 0..file.len().max(want.len()) {
        let (a, b) = (file.get(i), want.get(i));
        if a != b {
            let show = |e: Option<&(&str, &[usize])>| match e {
                Some((n, d)) => format!("{n}{d:?}"),
                None => "<none>".into(),
            };
            diffs.push(format!("#{i}: file {} vs graph {}", show(a), show(b)));
            if diffs.len() == 3 {
                break;
            }
        }
    }
    format!(
        "weight file does not match the model graph ({} vs {} entries); {}",
        file.len(),
        want.len(),
        diffs.join("; ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("a/kernel", vec![2, 3, 1, 1], (0..6).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap();
        s.insert("a/bias", vec![2], vec![f32::MIN_POSITIVE, -0.0]).unwrap();
        s
    }

    #[test]
    fn encode_decode_roundtrip_is_bit_exact() {
        let s = store();
        let bytes = encode(&s).unwrap();
        let (h, back) = decode(&bytes).unwrap();
        assert_eq!(h.entry_count, 2);
        assert_eq!(h.payload_len, 32);
        assert_eq!(encode(&back).unwrap(), bytes);
        assert_eq!(back.values("a/bias").unwrap()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&store()).unwrap();
        for cut in [0, 3, 20, HEADER_LEN + 5, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = encode(&store()).unwrap();
        let last = bytes.len() - 2;
        bytes[last] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }
}
