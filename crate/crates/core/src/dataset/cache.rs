//! Binary patch cache.
//!
//! Layout, little endian: magic `OCCPATCH`, version u32, channels u32,
//! count u64, then per patch: label u8, frame_id u32, row u32, col u32 and
//! `channels·32·32` f32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DatasetError, Patch, PatchLabel, PatchSource, Result, PATCH_SIZE};
use crate::tensor::Tensor;

pub const CACHE_MAGIC: &[u8; 8] = b"OCCPATCH";
pub const CACHE_VERSION: u32 = 1;

pub fn write_patch_cache(path: &Path, patches: &[Patch]) -> Result<()> {
    let channels = patches.first().map_or(0, Patch::channels);
    if let Some(p) = patches.iter().find(|p| p.channels() != channels) {
        return Err(DatasetError::ChannelMismatch {
            expected: channels,
            actual: p.channels(),
        });
    }
    let file = File::create(path).map_err(|e| DatasetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| DatasetError::io(path, e));
    put(CACHE_MAGIC)?;
    put(&CACHE_VERSION.to_le_bytes())?;
    put(&(channels as u32).to_le_bytes())?;
    put(&(patches.len() as u64).to_le_bytes())?;
    for p in patches {
        put(&[p.label.class_index() as u8])?;
        for v in [p.source.frame_id, p.source.row, p.source.col] {
            put(&(v as u32).to_le_bytes())?;
        }
        let bytes: Vec<u8> = p.data.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        put(&bytes)?;
    }
    w.flush().map_err(|e| DatasetError::io(path, e))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => DatasetError::TruncatedCache,
            _ => DatasetError::Format(e.to_string()),
        })
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn read_patch_cache(path: &Path) -> Result<Vec<Patch>> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };
    let mut magic = [0; 8];
    r.bytes(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(DatasetError::Format(format!("{} is not a patch cache", path.display())));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(DatasetError::Format(format!(
            "patch cache version {version}, expected {CACHE_VERSION}"
        )));
    }
    let channels = r.u32()? as usize;
    let mut count = [0; 8];
    r.bytes(&mut count)?;
    let count = u64::from_le_bytes(count) as usize;
    let values = channels * PATCH_SIZE * PATCH_SIZE;
    let mut patches = Vec::with_capacity(count.min(1 << 20));
    let mut raw = vec![0u8; values * 4];
    for _ in 0..count {
        let mut label = [0u8];
        r.bytes(&mut label)?;
        if label[0] > 1 {
            return Err(DatasetError::Format(format!("bad patch label {}", label[0])));
        }
        let frame_id = r.u32()? as usize;
        let row = r.u32()? as usize;
        let col = r.u32()? as usize;
        r.bytes(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        patches.push(Patch {
            data: Tensor::new(&[channels, PATCH_SIZE, PATCH_SIZE], data)?,
            label: PatchLabel::from_class_index(label[0] as usize),
            source: PatchSource { frame_id, row, col },
        });
    }
    let mut extra = [0u8];
    if r.inner.read(&mut extra).map_err(|e| DatasetError::io(path, e))? != 0 {
        return Err(DatasetError::Format("trailing bytes after patch cache".into()));
    }
    Ok(patches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(i: usize, label: PatchLabel) -> Patch {
        Patch {
            data: Tensor::from_fn(&[4, PATCH_SIZE, PATCH_SIZE], |k| (k + i) as f32 * 0.25).unwrap(),
            label,
            source: PatchSource {
                frame_id: i,
                row: 2 * i,
                col: 3 * i,
            },
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let patches = vec![patch(0, PatchLabel::Occlusion), patch(7, PatchLabel::NoOcclusion)];
        write_patch_cache(&path, &patches).unwrap();
        assert_eq!(read_patch_cache(&path).unwrap(), patches);
    }

    #[test]
    fn truncated_cache() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        write_patch_cache(&path, &[patch(1, PatchLabel::Occlusion)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [4, 20, 30, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(read_patch_cache(&path), Err(DatasetError::TruncatedCache)), "cut {cut}");
        }
    }

    #[test]
    fn mixed_channels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = patch(0, PatchLabel::Occlusion);
        let b = a.select_channels(3).unwrap();
        assert!(write_patch_cache(&dir.path().join("p.bin"), &[a, b]).is_err());
    }
}
