use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use crate::dump_io::manifest::TensorRef;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads `∏shape` little-endian f32 values at `offset_bytes` of `root/path`.
/// Any NaN or infinity is an error.
pub fn load_tensor(root: &Path, tensor: &TensorRef) -> Result<Tensor> {
    let t = load_tensor_unchecked(root, tensor)?;
    if let Some(index) = t.first_non_finite() {
        return Err(Error::NonFiniteValue {
            path: root.join(&tensor.path),
            index,
        });
    }
    Ok(t)
}

/// Like [`load_tensor`] without the finiteness check. Validation uses this
/// so it can report non-finite values instead of aborting.
pub fn load_tensor_unchecked(root: &Path, tensor: &TensorRef) -> Result<Tensor> {
    let path = root.join(&tensor.path);
    let mut file = File::open(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
        _ => Error::Io(e),
    })?;
    let available = file.metadata()?.len();
    let needed = tensor.offset_bytes + tensor.byte_len();
    if available < needed {
        return Err(Error::ShortRead {
            path,
            needed,
            available,
        });
    }
    file.seek(SeekFrom::Start(tensor.offset_bytes))?;
    let mut bytes = vec![0u8; tensor.byte_len() as usize];
    file.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(tensor.shape.clone(), data)
}

/// Checks the file behind `tensor` exists and is long enough.
pub fn check_extent(root: &Path, tensor: &TensorRef) -> Result<()> {
    let path = root.join(&tensor.path);
    let available = match std::fs::metadata(&path) {
        Ok(m) => m.len(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path)),
        Err(e) => return Err(e.into()),
    };
    let needed = tensor.offset_bytes + tensor.byte_len();
    if available < needed {
        return Err(Error::ShortRead {
            path,
            needed,
            available,
        });
    }
    Ok(())
}
