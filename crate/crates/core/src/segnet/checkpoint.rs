//! Binary checkpoint: magic, format version, the model configuration as
//! JSON, then named tensors with their dims and little-endian `f32` values.
//! All integers are little-endian `u32`.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, Result, SegnetError};
use crate::autodiff::Tensor4;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LANDSEG\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION as usize);
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    put_u32(&mut buf, config.len());
    buf.extend_from_slice(&config);
    put_u32(&mut buf, model.params().len());
    for (name, t) in model.param_names().iter().zip(model.params()) {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        for d in t.dims() {
            put_u32(&mut buf, d);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|source| SegnetError::Io { path: path.to_path_buf(), source })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| SegnetError::Checkpoint {
            path: self.path.to_path_buf(),
            reason: "truncated".into(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()) as usize)
    }
}

/// Loads a checkpoint. When `expected` is given, a checkpoint written for
/// any other configuration is rejected.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Model> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|source| SegnetError::Io { path: path.to_path_buf(), source })?;
    let bad = |reason: &str| SegnetError::Checkpoint { path: path.to_path_buf(), reason: reason.into() };
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.bytes(8)? != CHECKPOINT_MAGIC {
        return Err(bad("not a landseg checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.bytes(len)?).map_err(|e| bad(&e.to_string()))?;
    if expected.is_some_and(|e| *e != config) {
        return Err(SegnetError::ConfigMismatch);
    }
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()?;
        let name = String::from_utf8(r.bytes(n)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let len: usize = dims.iter().product();
        let data = r.bytes(len * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor4::from_vec(dims, data)?));
    }
    if r.pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Model::from_parts(config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::build_model;

    fn small() -> ModelConfig {
        ModelConfig { num_classes: 3, encoder_widths: vec![4, 8], output_stride: 2, tile_size: 16, ..Default::default() }
    }

    #[test]
    fn round_trip() {
        let m = build_model(&small(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        assert_eq!(load_checkpoint(&p, Some(&small())).unwrap(), m);
        assert_eq!(load_checkpoint(&p, None).unwrap(), m);
    }

    #[test]
    fn rejects_other_config_and_garbage() {
        let m = build_model(&small(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let other = ModelConfig { num_classes: 4, ..small() };
        assert!(matches!(load_checkpoint(&p, Some(&other)), Err(SegnetError::ConfigMismatch)));

        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p, None), Err(SegnetError::Checkpoint { .. })));
        fs::write(&p, b"hello").unwrap();
        assert!(matches!(load_checkpoint(&p, None), Err(SegnetError::Checkpoint { .. })));
    }
}
