//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HATCKPT1"
//! u64 seed, u64 step
//! u32 metadata length, metadata bytes (UTF-8, free-form, usually JSON)
//! u32 parameter count
//! per parameter:
//!   u32 name length, name bytes
//!   u32 group length, group bytes
//!   u64 rows, u64 cols, rows·cols × f64 (row-major)
//! ```

use std::io::{Read, Write};

use super::{NumericsError, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"HATCKPT1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub metadata: String,
    pub store: ParamStore,
}

fn bad(msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, NumericsError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String, NumericsError> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| bad("string is not UTF-8"))
}

fn write_string(w: &mut impl Write, s: &str) -> Result<(), NumericsError> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NumericsError> {
        w.write_all(MAGIC)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        write_string(w, &self.metadata)?;
        w.write_all(&(self.store.len() as u32).to_le_bytes())?;
        for p in self.store.params() {
            // stored names carry the group prefix; write the bare name
            let bare = p
                .name
                .strip_prefix(&format!("{}.", p.group))
                .unwrap_or(&p.name);
            write_string(w, bare)?;
            write_string(w, &p.group)?;
            w.write_all(&(p.value.rows() as u64).to_le_bytes())?;
            w.write_all(&(p.value.cols() as u64).to_le_bytes())?;
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NumericsError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                std::str::from_utf8(MAGIC).unwrap()
            )));
        }
        let seed = read_u64(r)?;
        let step = read_u64(r)?;
        let metadata = read_string(r)?;
        let n = read_u32(r)? as usize;
        let mut store = ParamStore::new(seed);
        for _ in 0..n {
            let name = read_string(r)?;
            let group = read_string(r)?;
            let rows = read_u64(r)? as usize;
            let cols = read_u64(r)? as usize;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| bad(format!("shape overflow for {name}")))?;
            let mut data = Vec::with_capacity(len);
            let mut b = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            store.add(&group, &name, Tensor::from_vec(rows, cols, data))?;
        }
        Ok(Checkpoint {
            seed,
            step,
            metadata,
            store,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NumericsError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NumericsError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut store = ParamStore::new(42);
        store
            .add(
                "top",
                "w",
                Tensor::from_vec(2, 2, vec![0.1, -3.5e-300, f64::MAX, 1.0 / 3.0]),
            )
            .unwrap();
        store.add("head", "b", Tensor::scalar(-0.0)).unwrap();
        let ck = Checkpoint {
            seed: 42,
            step: 17,
            metadata: "{\"d\":8}".into(),
            store,
        };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.seed, 42);
        assert_eq!(back.metadata, ck.metadata);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.store.lookup("top.w").map(|i| i.index()), Some(0));
    }

    #[test]
    fn wrong_magic_rejected() {
        let bytes = b"HATCKPT0\0\0\0\0\0\0\0\0".to_vec();
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    }
}
