//! `RTDS` dataset files.
//!
//! ```text
//! "RTDS" | u32 version | u32 count | u32 classes | u32 C | u32 H | u32 W
//! count × ( u32 label | C·H·W × f32 )
//! ```
//!
//! All integers and floats little-endian. Pixel values must lie in `[0, 1]`.

use std::path::Path;

use super::bin::{read_file, write_file, Reader};
use super::Dataset;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RTDS";
pub const VERSION: u32 = 1;

pub fn encode(d: &Dataset) -> Vec<u8> {
    let [c, h, w] = d.image_shape();
    let mut out = Vec::with_capacity(28 + d.len() * (4 + 4 * d.sample_len()));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, d.len() as u32, d.num_classes() as u32, c as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..d.len() {
        out.extend_from_slice(&(d.labels()[i] as u32).to_le_bytes());
        for &p in d.image(i) {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error_at(at, format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("count")? as usize;
    let at = r.offset();
    let classes = r.u32("classes")? as usize;
    if classes == 0 {
        return Err(r.error_at(at, "class count is 0"));
    }
    let at = r.offset();
    let shape = [r.u32("channels")? as usize, r.u32("height")? as usize, r.u32("width")? as usize];
    let per: usize = shape.iter().product();
    if per == 0 {
        return Err(r.error_at(at, format!("image shape {shape:?} has a zero dimension")));
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count.saturating_mul(per).min(1 << 28));
    for i in 0..count {
        let at = r.offset();
        let label = r.u32("label")? as usize;
        if label >= classes {
            return Err(r.error_at(at, format!("sample {i}: label {label} ≥ {classes} classes")));
        }
        labels.push(label);
        let raw = r.take(4 * per, "pixels")?;
        for (j, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !(0.0..=1.0).contains(&v) {
                let off = at + 4 + 4 * j as u64;
                return Err(r.error_at(off, format!("sample {i}: pixel value {v} outside [0, 1]")));
            }
            pixels.push(v);
        }
    }
    if r.remaining() > 0 {
        return Err(r.error_at(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Dataset::new(shape, classes, labels, pixels)
}

pub fn save_binary_dataset(d: &Dataset, path: &Path) -> Result<()> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    write_file(path, &encode(d))
}

pub fn load_binary_dataset(path: &Path) -> Result<Dataset> {
    decode(&read_file(path)?, path)
}
