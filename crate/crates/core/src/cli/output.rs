//! Image artifacts: quantized PNG for viewing, raw little-endian `f32` with a
//! JSON sidecar for exact values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub height: usize,
    pub width: usize,
    pub dtype: String,
}

/// Write `<dir>/<name>.png`, `<name>.f32` and `<name>.json`.
pub fn write_image(dir: &Path, name: &str, grid: &Grid) -> Result<Vec<PathBuf>> {
    let png = dir.join(format!("{name}.png"));
    let raw = dir.join(format!("{name}.f32"));
    let json = dir.join(format!("{name}.json"));

    let pixels: Vec<u8> = grid.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(grid.width() as u32, grid.height() as u32, pixels)
        .expect("buffer size")
        .save(&png)
        .map_err(|e| Error::parse(&png, e.to_string()))?;

    let bytes: Vec<u8> = grid.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;

    let sidecar = RawSidecar {
        height: grid.height(),
        width: grid.width(),
        dtype: "float32_le".into(),
    };
    fs::write(&json, serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"))
        .map_err(|e| Error::io(&json, e))?;
    Ok(vec![png, raw, json])
}

/// Read a raw `f32` image; the sidecar is the same path with a `.json` extension.
pub fn read_raw(path: &Path) -> Result<Grid> {
    let json = path.with_extension("json");
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let meta: RawSidecar = serde_json::from_str(&text).map_err(|e| Error::parse(&json, e.to_string()))?;
    if meta.dtype != "float32_le" {
        return Err(Error::parse(&json, format!("unsupported dtype `{}`", meta.dtype)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != meta.height * meta.width * 4 {
        return Err(Error::parse(
            path,
            format!("expected {} bytes for {}x{}, found {}", meta.height * meta.width * 4, meta.height, meta.width, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Grid::new(meta.height, meta.width, data))
}
