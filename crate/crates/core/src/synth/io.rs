//! Single-file client dataset format. Integers and floats are little-endian.
//!
//! ```text
//! header (29 bytes)
//!   [0..4)   magic "FMDS"
//!   [4..8)   u32 version (1)
//!   [8..12)  u32 client_id
//!   [12]     u8  level: 0 = L, 1 = B, 2 = I, 3 = U
//!   [13..17) u32 height
//!   [17..21) u32 width
//!   [21..25) u32 train count
//!   [25..29) u32 test count
//! then, per sample, train samples first, each in id order:
//!   u64          id
//!   H*W x f64    image, row-major
//!   H*W x u8     truth mask (0 or 1)
//!   label payload by level:
//!     L  H*W x u8 mask
//!     B  u8 has_box, then (if 1) u32 r0, c0, r1, c1
//!     I  u8 positive
//!     U  nothing
//! ```
//!
//! The appearance parameters are not part of the binary file; they travel in a
//! JSON sidecar written next to it.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::{BoundingBox, ClientDataset, DataSpec, RawLabel, Sample, ShiftSpec, Supervision, SupervisionLevel};
use crate::error::{Error, Result};
use crate::grid::Grid2D;

pub const DATASET_MAGIC: [u8; 4] = *b"FMDS";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(ds: &ClientDataset) -> Vec<u8> {
    let (h, w) = (ds.spec.height, ds.spec.width);
    let mut out = Vec::new();
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&ds.client_id.to_le_bytes());
    out.push(ds.level.code());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(ds.train().len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.test().len() as u32).to_le_bytes());
    for s in ds.train().iter().chain(ds.test()) {
        out.extend_from_slice(&s.id().to_le_bytes());
        for v in s.image().values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        push_mask(&mut out, s.truth_mask());
        match s.supervision().raw() {
            RawLabel::Pixel(mask) => push_mask(&mut out, mask),
            RawLabel::Box(None) => out.push(0),
            RawLabel::Box(Some(b)) => {
                out.push(1);
                for v in [b.r0, b.c0, b.r1, b.c1] {
                    out.extend_from_slice(&(v as u32).to_le_bytes());
                }
            }
            RawLabel::ImageClass { positive } => out.push(*positive as u8),
            RawLabel::Absent => {}
        }
    }
    out
}

fn push_mask(out: &mut Vec<u8>, mask: &Grid2D) {
    out.extend(mask.values().iter().map(|&v| (v >= 0.5) as u8));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Decode(format!(
                "dataset truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn grid_f64(&mut self, h: usize, w: usize) -> Result<Grid2D> {
        let raw = self.take(8 * h * w)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Grid2D::new(h, w, values)
    }

    fn mask(&mut self, h: usize, w: usize) -> Result<Grid2D> {
        let raw = self.take(h * w)?;
        if raw.iter().any(|&b| b > 1) {
            return Err(Error::Decode("mask byte outside {0, 1}".into()));
        }
        Grid2D::new(h, w, raw.iter().map(|&b| b as f64).collect())
    }
}

/// Decodes a dataset; `shift` comes from the sidecar (or defaults).
pub fn decode_dataset(bytes: &[u8], shift: ShiftSpec) -> Result<ClientDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Decode("bad dataset magic".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Decode(format!("unsupported dataset version {version}")));
    }
    let client_id = r.u32()?;
    let level_code = r.u8()?;
    let level = SupervisionLevel::from_code(level_code)
        .ok_or_else(|| Error::Decode(format!("unknown level code {level_code}")))?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n_train = r.u32()? as usize;
    let n_test = r.u32()? as usize;
    if h == 0 || w == 0 {
        return Err(Error::Decode("zero image size".into()));
    }

    let mut samples = Vec::with_capacity(n_train + n_test);
    for _ in 0..n_train + n_test {
        let id = r.u64()?;
        let image = r.grid_f64(h, w)?;
        let truth = r.mask(h, w)?;
        let supervision = match level {
            SupervisionLevel::PixelLevel => Supervision::pixel(r.mask(h, w)?)?,
            SupervisionLevel::BoundingBox => {
                let bbox = match r.u8()? {
                    0 => None,
                    1 => Some(BoundingBox {
                        r0: r.u32()? as usize,
                        c0: r.u32()? as usize,
                        r1: r.u32()? as usize,
                        c1: r.u32()? as usize,
                    }),
                    b => return Err(Error::Decode(format!("bad box flag {b}"))),
                };
                Supervision::bounding_box(h, w, bbox)?
            }
            SupervisionLevel::ImageLevel => match r.u8()? {
                b @ (0 | 1) => Supervision::image_class(h, w, b == 1),
                b => return Err(Error::Decode(format!("bad class flag {b}"))),
            },
            SupervisionLevel::Unlabeled => Supervision::unlabeled(h, w),
        };
        samples.push(Sample::new(id, image, truth, supervision)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Decode(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let test = samples.split_off(n_train);
    let spec = DataSpec {
        height: h,
        width: w,
        shift,
    };
    ClientDataset::new(client_id, level, spec, samples, test)
}

pub fn sidecar_json(ds: &ClientDataset) -> serde_json::Value {
    json!({
        "client_id": ds.client_id,
        "level": ds.level,
        "height": ds.spec.height,
        "width": ds.spec.width,
        "train": ds.train().len(),
        "test": ds.test().len(),
        "shift": ds.spec.shift,
        "healthy_fraction": ds.spec.shift.resolved_healthy_fraction(ds.level),
        "augmentation": "none",
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

/// Writes `path` and its `path.json` sidecar.
pub fn write_dataset(path: &Path, ds: &ClientDataset) -> Result<()> {
    fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar_json(ds)).expect("sidecar serializes");
    fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

pub fn read_dataset(path: &Path) -> Result<ClientDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let shift = match fs::read_to_string(&side) {
        Ok(text) => {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Decode(format!("{}: {e}", side.display())))?;
            serde_json::from_value(v["shift"].clone())
                .map_err(|e| Error::Decode(format!("{}: {e}", side.display())))?
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => ShiftSpec::default(),
        Err(e) => return Err(Error::io(&side, e)),
    };
    decode_dataset(&bytes, shift)
}
