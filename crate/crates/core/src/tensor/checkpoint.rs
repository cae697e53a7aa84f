//! Binary tensor records: the magic `MOODPIPE1`, then per record a `u64`
//! name length, the UTF-8 name, a `u64` rank, `rank` `u64` dims and the
//! row-major `f64` values, all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 9] = b"MOODPIPE1";

pub fn write_records<W: Write>(mut w: W, records: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in records {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let end = *pos + 8;
    let chunk = bytes
        .get(*pos..end)
        .ok_or_else(|| Error::Checkpoint("truncated record".into()))?;
    *pos = end;
    Ok(u64::from_le_bytes(chunk.try_into().expect("8 bytes")))
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("unknown magic".into()));
    }
    let mut pos = MAGIC.len();
    let mut out = Vec::new();
    while pos < bytes.len() {
        let name_len = read_u64(&bytes, &mut pos)? as usize;
        let name_bytes = bytes
            .get(pos..pos + name_len)
            .ok_or_else(|| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        pos += name_len;
        let rank = read_u64(&bytes, &mut pos)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&bytes, &mut pos).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| read_u64(&bytes, &mut pos).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_records(std::io::BufWriter::new(f), records)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_records(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Looks up a record by name.
pub fn take<'a>(records: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    records
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout() {
        let recs = vec![("w".to_string(), Tensor::vector(vec![1.5]))];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let mut expected = b"MOODPIPE1".to_vec();
        expected.extend(1u64.to_le_bytes());
        expected.push(b'w');
        expected.extend(1u64.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1.5f64.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn unknown_magic_rejected() {
        let r = read_records(&b"MOODPIPE2\0\0"[..]);
        assert!(matches!(r, Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn records_round_trip(
            dims in proptest::collection::vec(1usize..4, 0..3),
            name in "[a-z_.0-9]{1,12}",
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (seed.wrapping_add(i as u64) as f64).sin()).collect();
            let recs = vec![(name, Tensor::new(dims, data).unwrap())];
            let mut buf = Vec::new();
            write_records(&mut buf, &recs).unwrap();
            prop_assert_eq!(read_records(&buf[..]).unwrap(), recs);
        }
    }
}
