//! Dataset directories: numbered PPM/PGM files plus `labels.txt`.

use std::path::Path;

use super::{read_ppm, write_ppm, Image};
use crate::error::{Error, Result};

pub const LABELS_FILE: &str = "labels.txt";

fn image_name(i: usize, channels: usize) -> String {
    format!("{i:06}.{}", if channels == 1 { "pgm" } else { "ppm" })
}

pub fn write_manifest(dir: &Path, items: &[(Image, usize)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labels = String::new();
    for (i, (img, label)) in items.iter().enumerate() {
        write_ppm(&dir.join(image_name(i, img.channels)), img)?;
        labels.push_str(&format!("{label}\n"));
    }
    let path = dir.join(LABELS_FILE);
    std::fs::write(&path, labels).map_err(|e| Error::io(&path, e))
}

/// Reads `labels.txt`; line `i` labels image `00000i.ppm` (or `.pgm`).
pub fn read_manifest(dir: &Path) -> Result<Vec<(Image, usize)>> {
    let path = dir.join(LABELS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            offset += line.len() + 1;
            continue;
        }
        let label: usize = trimmed.parse().map_err(|_| Error::Parse {
            offset,
            msg: format!("{}: bad label {trimmed:?} on line {}", path.display(), i + 1),
        })?;
        let idx = out.len();
        let ppm = dir.join(image_name(idx, 3));
        let img = if ppm.exists() {
            read_ppm(&ppm)?
        } else {
            read_ppm(&dir.join(image_name(idx, 1)))?
        };
        out.push((img, label));
        offset += line.len() + 1;
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("{} lists no images", path.display())));
    }
    Ok(out)
}
