//! Binary tensor container.
//!
//! Layout (all little-endian): magic "KPRE", version u16, count u64, dim u32,
//! reference_norm f64, then `count` entries of (id u64, dim x f32). The same
//! container holds entity embeddings (id = entity id) and flattened model
//! parameters (id = parameter index, dim = 1). Values are widened to f64 in
//! memory.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{KprError, Result};

pub const MAGIC: [u8; 4] = *b"KPRE";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub dim: u32,
    pub reference_norm: f64,
    pub entries: Vec<(u64, Vec<f64>)>,
}

/// Writes bytes to a temp file next to the target, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| KprError::Io(std::io::Error::other("path has no file name")))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write(path: &Path, container: &Container) -> Result<()> {
    let dim = container.dim as usize;
    let mut buf =
        Vec::with_capacity(4 + 2 + 8 + 4 + 8 + container.entries.len() * (8 + dim * 4));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(container.entries.len() as u64).to_le_bytes());
    buf.extend_from_slice(&container.dim.to_le_bytes());
    buf.extend_from_slice(&container.reference_norm.to_le_bytes());
    for (id, vector) in &container.entries {
        if vector.len() != dim {
            return Err(KprError::Shape(format!(
                "container entry {id} has {} values, dim is {dim}",
                vector.len()
            )));
        }
        buf.extend_from_slice(&id.to_le_bytes());
        for &v in vector {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

pub fn read(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse(&bytes).map_err(|e| match e {
        KprError::Format(m) => KprError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn parse(bytes: &[u8]) -> Result<Container> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(KprError::Format("container truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4)?;
    if magic != MAGIC {
        return Err(KprError::Format("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(KprError::Format(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let reference_norm = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let id = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let mut vector = Vec::with_capacity(dim as usize);
        for _ in 0..dim {
            let v = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            vector.push(v as f64);
        }
        entries.push((id, vector));
    }
    if pos != bytes.len() {
        return Err(KprError::Format("trailing bytes after entries".into()));
    }
    Ok(Container {
        dim,
        reference_norm,
        entries,
    })
}
