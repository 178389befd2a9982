//! Binary record container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "RNTN"  u32 version
//! repeated until EOF:
//!   u64 id  u32 rank  u64 dims[rank]  f64 data[product(dims)]
//! ```
//!
//! Parameter checkpoints and exported dataset splits share this framing.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RNTN";
pub const VERSION: u32 = 1;

pub fn write_records<'a, W: Write>(
    mut w: W,
    records: impl IntoIterator<Item = (u64, &'a Tensor)>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    for (id, t) in records {
        w.write_u64::<LittleEndian>(id)?;
        w.write_u32::<LittleEndian>(t.rank() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &x in t.data() {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Read for Counting<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

fn truncated(offset: u64, what: &str) -> Error {
    Error::Format {
        offset,
        reason: format!("truncated {what}"),
    }
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<(u64, Tensor)>> {
    let mut r = Counting {
        inner: r,
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| truncated(0, "header"))?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected \"RNTN\""),
        });
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| truncated(4, "header"))?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let mut out = Vec::new();
    loop {
        let start = r.offset;
        let mut first = [0u8; 1];
        if r.read(&mut first)? == 0 {
            break;
        }
        let mut rest = [0u8; 7];
        r.read_exact(&mut rest)
            .map_err(|_| truncated(start, "record id"))?;
        let mut idb = [0u8; 8];
        idb[0] = first[0];
        idb[1..].copy_from_slice(&rest);
        let id = u64::from_le_bytes(idb);
        let rank = r
            .read_u32::<LittleEndian>()
            .map_err(|_| truncated(r.offset, "rank"))?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = r
                .read_u64::<LittleEndian>()
                .map_err(|_| truncated(r.offset, "dims"))?;
            dims.push(d as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut data)
            .map_err(|_| truncated(r.offset, "tensor data"))?;
        let t = Tensor::new(dims, data).map_err(|e| Error::Format {
            offset: start,
            reason: e.to_string(),
        })?;
        out.push((id, t));
    }
    Ok(out)
}

pub fn save<W: Write>(w: W, store: &ParamStore) -> Result<()> {
    write_records(w, store.iter().map(|p| (p.id.0 as u64, &p.value)))
}

pub fn load<R: Read>(r: R, store: &mut ParamStore) -> Result<()> {
    store.load_values(read_records(r)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, [(7u64, &t)]).unwrap();
        assert_eq!(&buf[..4], b"RNTN");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..16], &7u64.to_le_bytes());
        assert_eq!(&buf[16..20], &2u32.to_le_bytes());
        assert_eq!(&buf[20..28], &1u64.to_le_bytes());
        assert_eq!(&buf[28..36], &2u64.to_le_bytes());
        assert_eq!(&buf[36..44], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 52);
    }

    #[test]
    fn store_round_trip() {
        let mut s = ParamStore::new();
        s.add(Tensor::new(vec![2, 3], (0..6).map(|i| i as f64 * 0.1).collect()).unwrap());
        s.add(Tensor::vector(vec![9.0]));
        let mut buf = Vec::new();
        save(&mut buf, &s).unwrap();
        let mut other = ParamStore::new();
        other.add_zeros(&[2, 3]);
        other.add_zeros(&[1]);
        load(buf.as_slice(), &mut other).unwrap();
        for (a, b) in s.iter().zip(other.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::vector(vec![1.0, 2.0]);
        let mut buf = Vec::new();
        write_records(&mut buf, [(0u64, &t)]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_records(bad.as_slice()),
            Err(Error::Format { offset: 0, .. })
        ));
        let short = &buf[..buf.len() - 3];
        match read_records(short) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("tensor data")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
