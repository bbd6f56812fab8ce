//! On-disk dataset layout:
//!
//! ```text
//! dataset.json
//! images/{id}.png          8-bit grayscale
//! masks/{id}_meta.png      0 / 255
//! masks/{id}_a{r}.png      r = 1..=R
//! ```

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tab_core::synth::{generate, Mask, Sample, SynthConfig};

use crate::error::{create_dir, read_json, write_json, CliError, Result};

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub annotators: usize,
    pub image_size: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Generator settings, when the data is synthetic.
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            other => Err(CliError::Config(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

/// Writes an 8-bit grayscale PNG.
pub fn write_gray(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), w * h);
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| CliError::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(pixels).map_err(err)?;
    writer.finish().map_err(err)
}

/// Reads an 8-bit grayscale PNG as `(width, height, pixels)`.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let err = |e: png::DecodingError| CliError::format(path, e.to_string());
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(CliError::format(
            path,
            format!("expected 8-bit grayscale, found {:?} at {:?}", info.color_type, info.bit_depth),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.png"))
}

fn meta_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("masks").join(format!("{id}_meta.png"))
}

fn annotator_path(dir: &Path, id: &str, r: usize) -> PathBuf {
    dir.join("masks").join(format!("{id}_a{r}.png"))
}

fn mask_pixels(m: &Mask) -> Vec<u8> {
    m.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect()
}

fn read_mask(path: &Path, size: usize) -> Result<Mask> {
    let (w, h, px) = read_gray(path)?;
    if (w, h) != (size, size) {
        return Err(CliError::format(path, format!("mask is {w}x{h}, expected {size}x{size}")));
    }
    if let Some(v) = px.iter().find(|&&v| v != 0 && v != 255) {
        return Err(CliError::format(path, format!("mask pixel value {v} is neither 0 nor 255")));
    }
    Ok(Mask::from_fn(size, size, |y, x| px[y * size + x] != 0))
}

pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, samples: &[&Sample]) -> Result<()> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;
    for s in samples {
        write_gray(&image_path(dir, &s.id), s.size, s.size, &s.image)?;
        write_gray(&meta_path(dir, &s.id), s.size, s.size, &mask_pixels(&s.meta))?;
        for (r, m) in s.annotators.iter().enumerate() {
            write_gray(&annotator_path(dir, &s.id, r + 1), s.size, s.size, &mask_pixels(m))?;
        }
    }
    write_json(&dir.join("dataset.json"), manifest)
}

/// Generates the synthetic set of `cfg` into `dir`.
pub fn generate_dataset(dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    let samples = generate(cfg)?;
    let (train, test) = cfg.splits();
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        annotators: cfg.annotators(),
        image_size: cfg.image_size,
        train: samples[train].iter().map(|s| s.id.clone()).collect(),
        test: samples[test].iter().map(|s| s.id.clone()).collect(),
        synth: Some(cfg.clone()),
    };
    write_dataset(dir, &manifest, &samples.iter().collect::<Vec<_>>())?;
    Ok(manifest)
}

fn load_sample(dir: &Path, id: &str, m: &DatasetManifest) -> Result<Sample> {
    let size = m.image_size;
    let path = image_path(dir, id);
    let (w, h, image) = read_gray(&path)?;
    if (w, h) != (size, size) {
        return Err(CliError::format(&path, format!("image is {w}x{h}, expected {size}x{size}")));
    }
    let meta = read_mask(&meta_path(dir, id), size)?;
    let annotators = (1..=m.annotators)
        .map(|r| read_mask(&annotator_path(dir, id, r), size))
        .collect::<Result<_>>()?;
    Ok(Sample {
        id: id.to_string(),
        size,
        image,
        meta,
        annotators,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("dataset.json");
    let manifest: DatasetManifest = read_json(&path)?;
    if manifest.version != DATASET_VERSION {
        return Err(CliError::format(&path, format!("dataset version {} is not supported", manifest.version)));
    }
    if manifest.annotators == 0 || manifest.image_size == 0 {
        return Err(CliError::format(&path, "annotators and image_size must be positive"));
    }
    let load = |ids: &[String]| ids.iter().map(|id| load_sample(dir, id, &manifest)).collect::<Result<Vec<_>>>();
    let train = load(&manifest.train)?;
    let test = load(&manifest.test)?;
    Ok(Dataset { manifest, train, test })
}
