//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MXF1"  u16 version  u16 flags (bit 0: 64-bit values)
//! u64 epoch
//! [u8; 32] rng seed  u64 rng stream  u128 rng word position
//! u32 table count, per table:
//!     str name, u32 entry count, per entry:
//!         str name, u32 rank, u64 dims[rank], values (f32 or f64)
//! u32 scalar count, per scalar: str name, f64 value
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use l2tww_autodiff::Tensor;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"MXF1";
pub const VERSION: u16 = 1;
const FLAG_F64: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub rng: RngState,
    pub tables: IndexMap<String, ParamSet>,
    pub scalars: IndexMap<String, f64>,
}

impl Checkpoint {
    pub fn table(&self, name: &str) -> Result<&ParamSet> {
        self.tables
            .get(name)
            .ok_or_else(|| Error::MissingParam(format!("checkpoint table {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(format!("checkpoint scalar {name}")))
    }

    /// Serializes with 32-bit values unless `f64` is set.
    pub fn to_bytes(&self, f64: bool) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((if f64 { FLAG_F64 } else { 0 }).to_le_bytes());
        out.extend(self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend(self.rng.stream.to_le_bytes());
        out.extend(self.rng.word_pos.to_le_bytes());
        out.extend((self.tables.len() as u32).to_le_bytes());
        for (name, table) in &self.tables {
            put_str(&mut out, name);
            out.extend((table.len() as u32).to_le_bytes());
            for (entry, t) in table.iter() {
                put_str(&mut out, entry);
                out.extend((t.rank() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend((d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    if f64 {
                        out.extend(v.to_le_bytes());
                    } else {
                        out.extend((v as f32).to_le_bytes());
                    }
                }
            }
        }
        out.extend((self.scalars.len() as u32).to_le_bytes());
        for (name, v) in &self.scalars {
            put_str(&mut out, name);
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, what };
        if r.take(4)? != MAGIC {
            return Err(r.err_at(0, "bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                supported: VERSION,
            });
        }
        let flags = r.u16()?;
        if flags & !FLAG_F64 != 0 {
            return Err(r.err_at(6, format!("unknown flags {flags:#06x}")));
        }
        let wide = flags & FLAG_F64 != 0;
        let epoch = r.u64()?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let rng = RngState {
            seed,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes")),
        };
        let mut tables = IndexMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let mut table = ParamSet::new();
            for _ in 0..r.u32()? {
                let entry = r.string()?;
                let rank = r.u32()? as usize;
                let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                let n = n.ok_or_else(|| r.err("tensor size overflows"))?;
                let width = if wide { 8 } else { 4 };
                let raw = r.take(n.checked_mul(width).ok_or_else(|| r.err("tensor size overflows"))?)?;
                let data = if wide {
                    raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
                } else {
                    raw.chunks(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect()
                };
                table.insert(entry, Tensor::new(&dims, data)?);
            }
            tables.insert(name, table);
        }
        let mut scalars = IndexMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            scalars.insert(name, r.f64()?);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self {
            epoch,
            rng,
            tables,
            scalars,
        })
    }

    pub fn save(&self, path: &Path, f64: bool) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes(f64)).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            what: self.what.to_string(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        self.err_at(self.pos, reason)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.err(format!("truncated: need {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err_at(at, "name is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        let mut theta = ParamSet::new();
        theta.insert("t.g1.b1.w", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.1 - 0.3));
        theta.insert("t.head.out.b", Tensor::new(&[2], vec![1.0 / 3.0, -2.5]).unwrap());
        let mut tables = IndexMap::new();
        tables.insert("theta".to_string(), theta);
        tables.insert("phi".to_string(), ParamSet::new());
        let mut scalars = IndexMap::new();
        scalars.insert("adam.step".to_string(), 12.0);
        Checkpoint {
            epoch: 3,
            rng: RngState::capture(&rng),
            tables,
            scalars,
        }
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes(true);
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, c);
        assert!(back.table("theta").unwrap().bitwise_eq(c.table("theta").unwrap()));
        assert_eq!(back.to_bytes(true), bytes);
    }

    #[test]
    fn f32_save_load_save_is_byte_identical() {
        let bytes = sample().to_bytes(false);
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.to_bytes(false), bytes);
        let v = back.table("theta").unwrap().get("t.head.out.b").unwrap().data()[0];
        assert_eq!(v, (1.0f64 / 3.0) as f32 as f64);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        a.next_u32();
        let mut b = RngState::capture(&a).restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut bytes = sample().to_bytes(true);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, "m"), Err(Error::Format { offset: 0, .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2, "m"),
            Err(Error::CheckpointVersion { found: 2, supported: 1 })
        ));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::from_bytes(&bytes, "m"), Err(Error::Format { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("state.ckpt");
        let c = sample();
        c.save(&p, true).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }
}
