//! Dataset directory layout:
//!
//! ```text
//! meta.json        format version, generator config, intrinsics, counts
//! samples.jsonl    one sample per line: id, image file, hands
//! images/<id>.imgf "IMGF", u32 version, u32 H, u32 W, u32 C, H*W*C f32 (LE)
//! ```
//!
//! All integers are little-endian; pixels are row-major and channel-last.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, GenConfig, HandAnnotation, SceneSample};
use crate::geometry::{xyz_to_uvd, CameraIntrinsics, HandSide, JointSet3D, JointSetUVD};
use crate::image::Image;

pub const META_VERSION: u32 = 1;
pub const IMAGE_MAGIC: &[u8; 4] = b"IMGF";
pub const IMAGE_VERSION: u32 = 1;
const IMAGE_HEADER_BYTES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub samples: usize,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    /// Split name, when generated as part of a split family.
    pub split: Option<String>,
    pub gen_config: GenConfig,
    pub intrinsics: CameraIntrinsics<f64>,
    pub counts: Counts,
}

impl DatasetMeta {
    pub fn new(gen_config: GenConfig, split: Option<String>, samples: &[SceneSample]) -> Result<Self, DataError> {
        let count = |side| samples.iter().filter(|s| s.hand(side).is_some()).count();
        Ok(Self {
            format_version: META_VERSION,
            split,
            intrinsics: gen_config.camera()?,
            counts: Counts { samples: samples.len(), left: count(HandSide::Left), right: count(HandSide::Right) },
            gen_config,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HandRecord {
    side: HandSide,
    uvd: JointSetUVD<f64>,
    xyz: Option<JointSet3D<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: usize,
    image: String,
    hands: Vec<HandRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Format { path: path.to_path_buf(), message: message.into() }
}

fn image_name(id: usize) -> String {
    format!("images/{id:06}.imgf")
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(IMAGE_HEADER_BYTES + 4 * img.data().len());
    out.extend_from_slice(IMAGE_MAGIC);
    for v in [IMAGE_VERSION, img.height() as u32, img.width() as u32, img.channels() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image, DataError> {
    if bytes.len() < IMAGE_HEADER_BYTES {
        return Err(format_err(path, "truncated image header"));
    }
    if &bytes[..4] != IMAGE_MAGIC {
        return Err(format_err(path, "bad image magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != IMAGE_VERSION {
        return Err(format_err(path, format!("unsupported image version {}", word(0))));
    }
    let (h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let want = IMAGE_HEADER_BYTES + 4 * h * w * c;
    if bytes.len() != want {
        return Err(format_err(path, format!("expected {want} bytes, found {} (truncated or padded)", bytes.len())));
    }
    let data = bytes[IMAGE_HEADER_BYTES..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Image::from_vec(h, w, c, data).expect("length checked above"))
}

/// Writes `ds` into `dir`, creating it if needed. Existing files with the
/// same names are overwritten.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), DataError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;

    let meta_path = dir.join("meta.json");
    let meta = serde_json::to_string_pretty(&ds.meta).expect("meta serializes");
    fs::write(&meta_path, meta + "\n").map_err(io_err(&meta_path))?;

    let lines_path = dir.join("samples.jsonl");
    let file = fs::File::create(&lines_path).map_err(io_err(&lines_path))?;
    let mut out = BufWriter::new(file);
    for s in &ds.samples {
        let name = image_name(s.id);
        let rec = SampleRecord {
            id: s.id,
            image: name.clone(),
            hands: s
                .hands
                .iter()
                .map(|h| HandRecord { side: h.side, uvd: h.uvd, xyz: h.xyz })
                .collect(),
        };
        let line = serde_json::to_string(&rec).expect("sample serializes");
        writeln!(out, "{line}").map_err(io_err(&lines_path))?;
        let img_path = dir.join(&name);
        fs::write(&img_path, encode_image(&s.image)).map_err(io_err(&img_path))?;
    }
    out.flush().map_err(io_err(&lines_path))?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta, DataError> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == META_VERSION as u64 => {}
        Some(v) => return Err(format_err(&path, format!("unsupported format_version {v}"))),
        None => return Err(format_err(&path, "missing format_version")),
    }
    let meta: DatasetMeta = serde_json::from_value(value).map_err(|e| format_err(&path, e.to_string()))?;
    meta.intrinsics.validate().map_err(|e| format_err(&path, e.to_string()))?;
    Ok(meta)
}

/// Loads a dataset written by [`write_dataset`]. The manifest is checked
/// before any sample is read.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta = read_meta(dir)?;
    let cam = meta.intrinsics;
    let lines_path = dir.join("samples.jsonl");
    let file = fs::File::open(&lines_path).map_err(io_err(&lines_path))?;
    let mut samples = Vec::with_capacity(meta.counts.samples);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&lines_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| format_err(&lines_path, format!("line {}: {m}", lineno + 1));
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let mut hands = Vec::with_capacity(rec.hands.len());
        for h in rec.hands {
            if hands.iter().any(|x: &HandAnnotation| x.side == h.side) {
                return Err(at(format!("two {} hands", h.side.name())));
            }
            if let Some(xyz) = &h.xyz {
                let expect = xyz_to_uvd(xyz, &cam).map_err(|e| at(e.to_string()))?;
                let off = expect
                    .joints()
                    .iter()
                    .zip(h.uvd.joints())
                    .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs() / b[k].abs().max(1.0)))
                    .fold(0.0, f64::max);
                if off > 1e-9 {
                    return Err(at("uvd disagrees with xyz under the dataset intrinsics".into()));
                }
            }
            hands.push(HandAnnotation { side: h.side, uvd: h.uvd, xyz: h.xyz });
        }
        hands.sort_by_key(|h| h.side.class_index());
        let img_path: PathBuf = dir.join(&rec.image);
        let bytes = fs::read(&img_path).map_err(io_err(&img_path))?;
        let image = decode_image(&bytes, &img_path)?;
        let g = &meta.gen_config;
        if (image.height(), image.width()) != (g.image_height, g.image_width) {
            return Err(format_err(&img_path, "image size differs from meta.json"));
        }
        samples.push(SceneSample { id: rec.id, image, hands, camera: cam });
    }
    if samples.len() != meta.counts.samples {
        return Err(format_err(
            &lines_path,
            format!("{} samples listed, meta.json declares {}", samples.len(), meta.counts.samples),
        ));
    }
    Ok(Dataset { meta, samples })
}
