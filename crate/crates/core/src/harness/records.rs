//! Files of named-tensor records: 4-byte magic, version u32, record count
//! u32, then per record a tensor count u32 followed by the tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_exact, read_tensor, read_u32, write_tensor, Tensor};

pub const VERSION: u32 = 1;

pub type Record = Vec<(String, Tensor)>;

pub fn field<'a>(rec: &'a Record, name: &str) -> Result<&'a Tensor> {
    rec.iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Data(format!("record has no field {name:?}")))
}

/// Reads a `1×1` field as a non-negative integer.
pub fn index_field(rec: &Record, name: &str) -> Result<usize> {
    let v = field(rec, name)?.data().first().copied().unwrap_or(-1.0);
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Data(format!("field {name:?} is not an index: {v}")));
    }
    Ok(v as usize)
}

pub fn write_records<W: Write>(w: &mut W, magic: &[u8; 4], records: &[Record]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for rec in records {
        w.write_all(&(rec.len() as u32).to_le_bytes())?;
        for (name, t) in rec {
            write_tensor(w, name, t)?;
        }
    }
    Ok(())
}

pub fn read_records<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<Vec<Record>> {
    let mut m = [0u8; 4];
    read_exact(r, &mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = read_u32(r)? as usize;
        if n > 1024 {
            return Err(Error::Format(format!("implausible field count {n}")));
        }
        let rec = (0..n).map(|_| read_tensor(r)).collect::<Result<Record>>()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save(path: &Path, magic: &[u8; 4], records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&mut w, magic, records)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path, magic: &[u8; 4]) -> Result<Vec<Record>> {
    let f = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_records(&mut BufReader::new(f), magic)
}
