use std::fmt::Write as _;
use std::path::Path;

use super::scenario::{DatasetSplit, Split};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "index\tsplit\tclass_id\tprototype_id\ttexture\tlocation\tshape";

/// Writes every adaptation image as `{split}_{index}.f32` (little-endian
/// 32-bit floats, row-major) plus `manifest.tsv`.
pub fn dump_dataset(dataset: &DatasetSplit, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut written = 0;
    for split in Split::ALL {
        for (index, s) in dataset.split(split).iter().enumerate() {
            let path = dir.join(format!("{}_{index}.f32", split.name()));
            let bytes: Vec<u8> = s
                .image
                .pixels()
                .iter()
                .flat_map(|&p| (p as f32).to_le_bytes())
                .collect();
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            let d = &dataset.descriptors[s.prototype_id];
            let _ = writeln!(
                manifest,
                "{index}\t{}\t{}\t{}\t{}\t{}\t{}",
                split.name(),
                s.class_id,
                s.prototype_id,
                d.texture,
                d.location,
                d.shape
            );
            written += 1;
        }
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(written)
}

/// Reads one dumped image back.
pub fn read_f32_image(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Input(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
