//! Binary parameter checkpoints tied to an architecture fingerprint.

use std::fs;
use std::path::Path;

use dzsr_autograd::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DZSRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Degradation,
    Zooming,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            Self::Degradation => 1,
            Self::Zooming => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(Self::Degradation),
            2 => Ok(Self::Zooming),
            _ => Err(Error::Checkpoint(format!("unknown checkpoint kind {c}"))),
        }
    }
}

pub fn fingerprint(arch: &str) -> [u8; 32] {
    Sha256::digest(arch.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub fingerprint: [u8; 32],
    /// Training configuration text the parameters came from.
    pub config: String,
    /// Architecture description hashed into `fingerprint`.
    pub arch: String,
    pub params: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn from_store(kind: CheckpointKind, arch: &str, config: &str, store: &ParamStore) -> Self {
        Self {
            kind,
            fingerprint: fingerprint(arch),
            config: config.to_string(),
            arch: arch.to_string(),
            params: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&self.fingerprint);
        put_str(&mut out, &self.config);
        put_str(&mut out, &self.arch);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let kind = CheckpointKind::from_code(r.take(1)?[0])?;
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let config = r.string()?;
        let arch = r.string()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string()?;
            let nd = r.u32()? as usize;
            let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push((name, Tensor::new(&shape, data)));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        if fingerprint != self::fingerprint(&arch) {
            return Err(Error::Checkpoint("stored fingerprint does not match its architecture".into()));
        }
        Ok(Self {
            kind,
            fingerprint,
            config,
            arch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    /// Copy parameters into `store` after checking kind, fingerprint,
    /// names and shapes.
    pub fn restore_into(&self, kind: CheckpointKind, arch: &str, store: &mut ParamStore) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        if self.fingerprint != fingerprint(arch) {
            return Err(Error::Checkpoint(format!(
                "architecture fingerprint mismatch: checkpoint has [{}], current is [{arch}]",
                self.arch
            )));
        }
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored parameters for {} expected",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, (name, t)) in ids.into_iter().zip(&self.params) {
            if store.name(id) != name || store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("parameter {name} does not fit {}", store.name(id))));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}
