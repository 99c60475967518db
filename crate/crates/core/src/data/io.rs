//! Dataset directories: `images/NNNNN.png` (8-bit RGB), `labels/NNNNN.png`
//! (8-bit indexed colour, index = class label) and `manifest.json`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RgbImage, Sample, SyntheticConfig};
use crate::error::{Error, Result};
use crate::hierarchy::{LabelMap, ValidatedHierarchy};

pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

/// Label palette: index 0 (background) is black, index `k` follows the usual
/// bit-interleaved segmentation colour map.
pub static PALETTE: [[u8; 3]; 256] = build_palette();

const fn build_palette() -> [[u8; 3]; 256] {
    let mut out = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        let mut j = 0;
        while j < 8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
            j += 1;
        }
        out[i] = [r, g, b];
        i += 1;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image: String,
    pub label: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    /// Node ids of the hierarchy the labels follow.
    pub hierarchy: Vec<String>,
    /// SHA-256 of the normalised hierarchy config.
    pub hierarchy_hash: String,
    pub generator: Option<SyntheticConfig>,
    /// Fraction of samples in which each leaf label appears.
    pub class_presence: BTreeMap<String, f64>,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn hierarchy_hash(h: &ValidatedHierarchy) -> String {
    let digest = Sha256::digest(h.spec().to_toml().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn class_presence(samples: &[Sample], h: &ValidatedHierarchy) -> BTreeMap<String, f64> {
    h.leaves()
        .into_iter()
        .map(|v| {
            let n = samples.iter().filter(|s| s.pyramid.mask(v).count() > 0).count();
            let frac = if samples.is_empty() { 0.0 } else { n as f64 / samples.len() as f64 };
            (h.id(v).to_string(), frac)
        })
        .collect()
}

fn manifest_for(samples: &[Sample], h: &ValidatedHierarchy, generator: Option<SyntheticConfig>) -> DatasetManifest {
    DatasetManifest {
        schema_version: SCHEMA_VERSION,
        hierarchy: h.nodes().map(|v| h.id(v).to_string()).collect(),
        hierarchy_hash: hierarchy_hash(h),
        generator,
        class_presence: class_presence(samples, h),
        samples: samples
            .iter()
            .enumerate()
            .map(|(i, s)| SampleEntry { image: format!("images/{i:05}.png"), label: format!("labels/{i:05}.png"), seed: s.seed })
            .collect(),
    }
}

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image { path: path.to_path_buf(), reason: reason.to_string() }
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| image_err(path, e))?;
    w.write_image_data(&img.data).map_err(|e| image_err(path, e))?;
    w.finish().map_err(|e| image_err(path, e))
}

/// 8-bit greyscale image, row-major.
pub fn write_gray_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height {
        return Err(image_err(path, "greyscale buffer size"));
    }
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| image_err(path, e))?;
    w.write_image_data(data).map_err(|e| image_err(path, e))?;
    w.finish().map_err(|e| image_err(path, e))
}

pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let max = labels.data.iter().copied().max().unwrap_or(0);
    if max > 255 {
        return Err(image_err(path, format!("label {max} does not fit an 8-bit palette")));
    }
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), labels.width as u32, labels.height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(PALETTE.iter().flatten().copied().collect::<Vec<u8>>());
    let mut w = enc.write_header().map_err(|e| image_err(path, e))?;
    let bytes: Vec<u8> = labels.data.iter().map(|&l| l as u8).collect();
    w.write_image_data(&bytes).map_err(|e| image_err(path, e))?;
    w.finish().map_err(|e| image_err(path, e))
}

fn decode(path: &Path, transformations: png::Transformations) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(transformations);
    let mut reader = dec.read_info().map_err(|e| image_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Any 8/16-bit PNG converted to 8-bit RGB.
pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let (info, buf) = decode(path, png::Transformations::EXPAND | png::Transformations::STRIP_16)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(image_err(path, format!("unsupported colour type {other:?}"))),
    };
    if data.len() != w * h * 3 {
        return Err(image_err(path, "unexpected pixel buffer size"));
    }
    Ok(RgbImage::new(w, h, data))
}

/// Raw 8-bit indices of an indexed or greyscale PNG.
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let (info, buf) = decode(path, png::Transformations::IDENTITY)?;
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed | png::ColorType::Grayscale, png::BitDepth::Eight) => {}
        (c, d) => return Err(image_err(path, format!("label image must be 8-bit indexed or greyscale, got {c:?} {d:?}"))),
    }
    let (w, h) = (info.width as usize, info.height as usize);
    if buf.len() != w * h {
        return Err(image_err(path, "unexpected label buffer size"));
    }
    Ok(LabelMap::new(w, h, buf.into_iter().map(u32::from).collect()))
}

/// Writes `samples` under `dir`; the manifest is written last.
pub fn write_dataset(samples: &[Sample], dir: &Path, h: &ValidatedHierarchy, generator: Option<SyntheticConfig>) -> Result<DatasetManifest> {
    for sub in ["images", "labels"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(format!("create {}", dir.join(sub).display()), e))?;
    }
    let manifest = manifest_for(samples, h, generator);
    for (s, entry) in samples.iter().zip(&manifest.samples) {
        write_rgb_png(&dir.join(&entry.image), &s.image)?;
        write_label_png(&dir.join(&entry.label), &s.labels)?;
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, text).map_err(|e| Error::io(format!("write {}", tmp.display()), e))?;
    fs::rename(&tmp, dir.join(MANIFEST)).map_err(|e| Error::io("publish manifest", e))?;
    Ok(manifest)
}

fn corrupt(path: PathBuf, reason: impl ToString) -> Error {
    Error::CorruptManifest { path, reason: reason.to_string() }
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| corrupt(path.clone(), e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| corrupt(path.clone(), e))?;
    let version = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt(path.clone(), "missing schema_version"))?;
    if version != SCHEMA_VERSION as u64 {
        return Err(Error::VersionMismatch { found: version as u32, expected: SCHEMA_VERSION });
    }
    serde_json::from_value(value).map_err(|e| corrupt(path, e))
}

/// Reads a dataset written by [`write_dataset`], validating labels against `h`.
pub fn read_dataset(dir: &Path, h: &ValidatedHierarchy) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    if manifest.hierarchy_hash != hierarchy_hash(h) {
        return Err(Error::Config(format!("dataset at {} was written for a different hierarchy", dir.display())));
    }
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let image = read_rgb_png(&dir.join(&e.image))?;
            let labels = read_label_png(&dir.join(&e.label))?;
            Sample::new(image, labels, e.seed, h)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("list {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads `dir/images/*.png` paired by file stem with `dir/labels/*.png`.
pub fn load_external(dir: &Path, h: &ValidatedHierarchy) -> Result<Dataset> {
    let images = png_files(&dir.join("images"))?;
    let mut samples = Vec::with_capacity(images.len());
    for (i, img_path) in images.iter().enumerate() {
        let stem = img_path.file_stem().expect("file has a name");
        let label_path = dir.join("labels").join(stem).with_extension("png");
        let image = read_rgb_png(img_path)?;
        let labels = read_label_png(&label_path)?;
        samples.push(Sample::new(image, labels, i as u64, h)?);
    }
    let mut manifest = manifest_for(&samples, h, None);
    for (entry, path) in manifest.samples.iter_mut().zip(&images) {
        let stem = path.file_stem().expect("file has a name").to_string_lossy();
        entry.image = format!("images/{stem}.png");
        entry.label = format!("labels/{stem}.png");
    }
    Ok(Dataset { manifest, samples })
}
