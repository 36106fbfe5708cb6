//! `root/<class>/<image>.png` datasets with a JSON split file.

use std::fs;
use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{FlatError, Result};

use super::{ImageDataset, SplitTag};

pub const SPLIT_SPEC_FILE: &str = "split_spec.json";

/// Which classes are base vs. novel, and the per-class test share.
/// Within a class the files are sorted by name and the last
/// `round(n * test_fraction)` go to the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base: Vec<String>,
    pub novel: Vec<String>,
    pub test_fraction: f64,
}

impl SplitSpec {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FlatError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| FlatError::Data(format!("{}: malformed split spec: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(FlatError::config("test_fraction", format!("must lie in [0, 1), got {}", self.test_fraction)));
        }
        if let Some(c) = self.base.iter().find(|c| self.novel.contains(c)) {
            return Err(FlatError::Data(format!("class `{c}` is listed as both base and novel")));
        }
        if self.base.is_empty() || self.novel.is_empty() {
            return Err(FlatError::Data("split spec needs at least one base and one novel class".into()));
        }
        Ok(())
    }

    /// Number of test examples for a class with `n` images; at least one
    /// image always stays in training.
    pub fn n_test(&self, n: usize) -> usize {
        ((n as f64 * self.test_fraction).round() as usize).min(n.saturating_sub(1))
    }
}

fn png_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| FlatError::Data(format!("cannot read class directory {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| FlatError::io(dir, e))?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn decode(path: &Path, channels: usize, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| FlatError::Data(format!("cannot decode {}: {e}", path.display())))?;
    let img = if img.width() as usize != size || img.height() as usize != size {
        img.resize_exact(size as u32, size as u32, FilterType::Triangle)
    } else {
        img
    };
    let (w, h) = (size, size);
    let plane = w * h;
    let mut out = vec![0.0f32; channels * plane];
    match channels {
        1 => {
            for (i, p) in img.to_luma8().pixels().enumerate() {
                out[i] = p.0[0] as f32 / 255.0;
            }
        }
        3 => {
            for (i, p) in img.to_rgb8().pixels().enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = p.0[c] as f32 / 255.0;
                }
            }
        }
        c => return Err(FlatError::config("data.channels", format!("only 1 or 3 channels are supported, got {c}"))),
    }
    Ok(out)
}

/// Decodes every PNG under `root/<class>/` for the classes named in `spec`,
/// resizing (bilinear) to `size×size` and scaling to `[0, 1]`.
pub fn load_image_folder(root: impl AsRef<Path>, spec: &SplitSpec, channels: usize, size: usize) -> Result<ImageDataset> {
    let root = root.as_ref();
    spec.validate()?;
    let mut images = Vec::new();
    let mut classes = Vec::new();
    let mut splits = Vec::new();
    let names: Vec<String> = spec.base.iter().chain(&spec.novel).cloned().collect();
    for (c, name) in names.iter().enumerate() {
        let base = c < spec.base.len();
        let files = png_files(&root.join(name))?;
        if files.is_empty() {
            return Err(FlatError::Data(format!("class `{name}` has no PNG images under {}", root.display())));
        }
        let n_train = files.len() - spec.n_test(files.len());
        for (j, f) in files.iter().enumerate() {
            images.push(decode(f, channels, size)?);
            classes.push(c);
            splits.push(match (base, j < n_train) {
                (true, true) => SplitTag::BaseTrain,
                (true, false) => SplitTag::BaseTest,
                (false, true) => SplitTag::NovelTrain,
                (false, false) => SplitTag::NovelTest,
            });
        }
    }
    ImageDataset::new([channels, size, size], images, classes, splits, names, spec.base.len())
}

fn to_png(data: &[f32], channels: usize, size: usize) -> DynamicImage {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let plane = size * size;
    if channels == 1 || (0..plane).all(|i| (1..channels).all(|c| data[c * plane + i] == data[i])) {
        let buf: Vec<u8> = data[..plane].iter().map(|&v| q(v)).collect();
        DynamicImage::ImageLuma8(GrayImage::from_raw(size as u32, size as u32, buf).expect("sized buffer"))
    } else {
        let buf: Vec<u8> = (0..plane).flat_map(|i| (0..3).map(move |c| q(data[c * plane + i]))).collect();
        DynamicImage::ImageRgb8(RgbImage::from_raw(size as u32, size as u32, buf).expect("sized buffer"))
    }
}

/// Writes a dataset as `root/<class>/img_NNNN.png` plus `split_spec.json`.
/// Images whose channels are identical are stored as grayscale.
pub fn save_image_folder(dataset: &ImageDataset, root: impl AsRef<Path>, test_fraction: f64) -> Result<SplitSpec> {
    let root = root.as_ref();
    let [c, h, w] = dataset.geometry();
    if h != w {
        return Err(FlatError::Data(format!("only square images can be written, got {h}x{w}")));
    }
    let mut counters = vec![0usize; dataset.class_names().len()];
    for name in dataset.class_names() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| FlatError::io(&dir, e))?;
    }
    for i in 0..dataset.len() {
        let class = dataset.class_of(i);
        let path = root.join(&dataset.class_names()[class]).join(format!("img_{:04}.png", counters[class]));
        counters[class] += 1;
        to_png(dataset.image(i), c, h)
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| FlatError::Data(format!("cannot write {}: {e}", path.display())))?;
    }
    let spec = SplitSpec {
        base: dataset.class_names()[..dataset.n_base()].to_vec(),
        novel: dataset.class_names()[dataset.n_base()..].to_vec(),
        test_fraction,
    };
    let path = root.join(SPLIT_SPEC_FILE);
    let json = serde_json::to_string_pretty(&spec).expect("spec serializes");
    fs::write(&path, json).map_err(|e| FlatError::io(path, e))?;
    Ok(spec)
}
