//! Shared little-endian container for dense float matrices.
//!
//! Layout: 4-byte magic, `u32` version, `u64` rows, `u64` dim, then
//! row-major `f32` data, then an optional UTF-8 trailer (used for token
//! tables). Embedding files use magic `UBEM`, hidden-state files `UBHS`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BinFormatError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: unsupported format version {found}")]
    UnsupportedVersion { path: String, found: u32 },
    #[error("{path}: file truncated ({context})")]
    Truncated { path: String, context: String },
}

#[derive(Debug)]
pub struct MatrixFile {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub trailer: String,
}

pub fn write_matrix(
    path: &Path,
    magic: &[u8; 4],
    rows: usize,
    dim: usize,
    data: &[f32],
    trailer: &str,
) -> Result<(), BinFormatError> {
    assert_eq!(data.len(), rows * dim, "data must be rows*dim long");
    let io_err = |source| BinFormatError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    let mut writer = std::io::BufWriter::new(&mut file);
    let io_err = |source| BinFormatError::Io {
        path: path.display().to_string(),
        source,
    };
    writer.write_all(magic).map_err(io_err)?;
    writer.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    writer.write_all(&(rows as u64).to_le_bytes()).map_err(io_err)?;
    writer.write_all(&(dim as u64).to_le_bytes()).map_err(io_err)?;
    for value in data {
        writer.write_all(&value.to_le_bytes()).map_err(io_err)?;
    }
    writer.write_all(trailer.as_bytes()).map_err(io_err)?;
    Ok(())
}

pub fn read_matrix(path: &Path, magic: &[u8; 4]) -> Result<MatrixFile, BinFormatError> {
    let display = path.display().to_string();
    let mut file = fs::File::open(path).map_err(|source| BinFormatError::Io {
        path: display.clone(),
        source,
    })?;
    let mut reader = std::io::BufReader::new(&mut file);

    let mut head = [0u8; 4];
    reader.read_exact(&mut head).map_err(|_| BinFormatError::Truncated {
        path: display.clone(),
        context: "magic".into(),
    })?;
    if &head != magic {
        return Err(BinFormatError::BadMagic {
            path: display,
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&head).into_owned(),
        });
    }
    let mut u32buf = [0u8; 4];
    reader.read_exact(&mut u32buf).map_err(|_| BinFormatError::Truncated {
        path: display.clone(),
        context: "version".into(),
    })?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(BinFormatError::UnsupportedVersion {
            path: display,
            found: version,
        });
    }
    let mut u64buf = [0u8; 8];
    reader.read_exact(&mut u64buf).map_err(|_| BinFormatError::Truncated {
        path: display.clone(),
        context: "rows".into(),
    })?;
    let rows = u64::from_le_bytes(u64buf) as usize;
    reader.read_exact(&mut u64buf).map_err(|_| BinFormatError::Truncated {
        path: display.clone(),
        context: "dim".into(),
    })?;
    let dim = u64::from_le_bytes(u64buf) as usize;

    let mut data = vec![0f32; rows * dim];
    let mut f32buf = [0u8; 4];
    for (i, slot) in data.iter_mut().enumerate() {
        reader.read_exact(&mut f32buf).map_err(|_| BinFormatError::Truncated {
            path: display.clone(),
            context: format!("row {} of {rows}", i / dim.max(1)),
        })?;
        *slot = f32::from_le_bytes(f32buf);
    }
    let mut trailer = String::new();
    reader.read_to_string(&mut trailer).map_err(|source| BinFormatError::Io {
        path: display.clone(),
        source,
    })?;
    Ok(MatrixFile {
        rows,
        dim,
        data,
        trailer,
    })
}
