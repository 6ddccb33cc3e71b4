//! Little-endian checkpoint format.
//!
//! ```text
//! "SDAN" | version u32 | bands C blocks scale seed (u32 each) | count u32
//! per parameter: name_len u16 | name utf-8 | rank u8 | extents u32×rank | values f64×Π extents
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{init_variant, SdanetConfig, SdanetModel, Variant};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDAN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in u32")))
}

pub fn write_checkpoint<W: Write>(model: &SdanetModel, mut out: W) -> Result<()> {
    let cfg = &model.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [cfg.bands, cfg.feat_channels, cfg.num_blocks, cfg.scale] {
        buf.extend_from_slice(&u32_of(v, "config field")?.to_le_bytes());
    }
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    buf.extend_from_slice(&u32_of(model.store.len(), "parameter count")?.to_le_bytes());
    for p in model.store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("parameter name too long: {}", p.name)))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        let rank = u8::try_from(p.value.rank()).map_err(|_| Error::Config("rank exceeds 255".into()))?;
        buf.push(rank);
        for &e in p.value.shape() {
            buf.extend_from_slice(&u32_of(e, "extent")?.to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_checkpoint(model: &SdanetModel, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<SdanetModel> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// A path with no file behind it is a format error at offset 0, like an
/// empty file; other read failures stay I/O errors.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SdanetModel> {
    let path = path.as_ref();
    match fs::read(path) {
        Ok(bytes) => decode(&bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::format(0, format!("no checkpoint at {}", path.display())))
        }
        Err(e) => Err(e.into()),
    }
}

fn decode(bytes: &[u8]) -> Result<SdanetModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"SDAN\""));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let mut fields = [0usize; 4];
    for f in &mut fields {
        *f = cur.u32("config")? as usize;
    }
    let config = SdanetConfig {
        bands: fields[0],
        feat_channels: fields[1],
        num_blocks: fields[2],
        scale: fields[3],
        seed: cur.u32("config")?,
    };
    config
        .validate()
        .map_err(|e| Error::format(8, format!("invalid config: {e}")))?;
    let count = cur.u32("parameter count")? as usize;

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let at = cur.pos as u64;
        let len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::format(at + 2, "parameter name is not utf-8"))?
            .to_owned();
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let values_at = cur.pos as u64;
        let raw = cur.take(n * 8, "values")?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(values_at + 8 * i as u64, format!("non-finite value in {name}")));
        }
        entries.push((at, name, shape, values));
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes after last parameter"));
    }

    let has = |prefix: &str| entries.iter().any(|(_, n, _, _)| n.starts_with(prefix));
    let variant = match (has("blocks.0.dcsa."), has("blocks.0.feffn.")) {
        (false, _) => Variant::NoDcsa,
        (_, false) => Variant::NoFeffn,
        _ => Variant::Full,
    };
    let mut model = init_variant(config, variant).map_err(|e| Error::format(8, e.to_string()))?;
    if model.store.len() != count {
        return Err(Error::format(
            28,
            format!("config implies {} parameters, file holds {count}", model.store.len()),
        ));
    }
    for (at, name, shape, values) in entries {
        let p = model
            .store
            .by_name_mut(&name)
            .ok_or_else(|| Error::format(at, format!("unknown parameter {name}")))?;
        if p.value.shape() != shape.as_slice() {
            return Err(Error::format(
                at,
                format!("{name} has shape {shape:?}, model expects {:?}", p.value.shape()),
            ));
        }
        p.value.data_mut().copy_from_slice(&values);
    }
    Ok(model)
}
