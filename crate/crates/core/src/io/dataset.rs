//! Labeled image datasets: directory layout, subsampling, BMP ingestion.

use std::fs;
use std::path::Path;

use crate::error::{MdError, Result};
use crate::io::tensor_file::{self, atomic_write};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// An in-memory labeled dataset. Images are `[N, H, W, C]` f32; labels hold
/// one class id per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<u32>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Dataset> {
        let name = name.into();
        if images.rank() != 4 {
            return Err(MdError::shape(
                "dataset",
                format!("images must be [N,H,W,C], got rank {}", images.rank()),
            ));
        }
        if images.dim(0) != labels.len() {
            return Err(MdError::Format {
                path: name,
                detail: format!(
                    "length mismatch: {} images but {} labels",
                    images.dim(0),
                    labels.len()
                ),
            });
        }
        if num_classes < 2 {
            return Err(MdError::Config(format!(
                "dataset needs at least 2 classes, got {num_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(MdError::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            name,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]` of a single image.
    pub fn image_dims(&self) -> [usize; 3] {
        [self.images.dim(1), self.images.dim(2), self.images.dim(3)]
    }

    /// Elements per image (H·W·C).
    pub fn image_len(&self) -> usize {
        self.images.len() / self.images.dim(0)
    }

    /// Borrow image `i` as a flat slice.
    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.image_len();
        &self.images.data()[i * d..(i + 1) * d]
    }

    /// Write `images.mdtb`, `labels.mdtb` and `meta.txt` into `dir`
    /// (created if needed).
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| MdError::io(dir.display().to_string(), e))?;
        tensor_file::save_tensor(&dir.join("images.mdtb"), &self.images)?;
        tensor_file::save_labels(&dir.join("labels.mdtb"), &self.labels)?;
        let meta = format!("name={}\nnum_classes={}\n", self.name, self.num_classes);
        atomic_write(&dir.join("meta.txt"), meta.as_bytes())
    }

    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        let images: Tensor<f32> = tensor_file::load_tensor(&dir.join("images.mdtb"))?;
        let labels = tensor_file::load_labels(&dir.join("labels.mdtb"))?;
        let meta_path = dir.join("meta.txt");
        let meta = fs::read_to_string(&meta_path)
            .map_err(|e| MdError::io(meta_path.display().to_string(), e))?;
        let mut name = None;
        let mut num_classes = None;
        for (lineno, line) in meta.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MdError::format(
                    meta_path.display().to_string(),
                    format!("line {}: expected key=value, got '{line}'", lineno + 1),
                )
            })?;
            match key.trim() {
                "name" => name = Some(value.trim().to_string()),
                "num_classes" => {
                    let k: usize = value.trim().parse().map_err(|_| {
                        MdError::format(
                            meta_path.display().to_string(),
                            format!("num_classes is not an integer: '{}'", value.trim()),
                        )
                    })?;
                    num_classes = Some(k);
                }
                _ => {} // forward compatibility: unknown keys are ignored
            }
        }
        let name = name.ok_or_else(|| {
            MdError::format(meta_path.display().to_string(), "missing key 'name'")
        })?;
        let num_classes = num_classes.ok_or_else(|| {
            MdError::format(meta_path.display().to_string(), "missing key 'num_classes'")
        })?;
        Dataset::new(images, labels, num_classes, name)
    }

    /// Indices of every image with label `c`, in dataset order.
    pub fn class_indices(&self, c: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect()
    }

    /// Stratified subsample: each class keeps `round(count * fraction)`
    /// images, chosen by a seeded shuffle of that class's indices. The
    /// surviving images keep their original relative order. `fraction`
    /// must lie in (0, 1]; 1.0 returns the dataset unchanged.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(MdError::Config(format!(
                "subsample fraction must be in (0, 1], got {fraction}"
            )));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let mut keep = Vec::new();
        for c in 0..self.num_classes as u32 {
            let mut idx = self.class_indices(c);
            if idx.is_empty() {
                continue;
            }
            let take = ((idx.len() as f64) * fraction + 0.5).floor() as usize;
            let take = take.clamp(1, idx.len());
            let mut rng = CounterRng::stream(seed, c as u64);
            rng.shuffle(&mut idx);
            idx.truncate(take);
            keep.extend(idx);
        }
        keep.sort_unstable();

        let d = self.image_len();
        let mut data = Vec::with_capacity(keep.len() * d);
        let mut labels = Vec::with_capacity(keep.len());
        for &i in &keep {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [h, w, ch] = self.image_dims();
        Dataset::new(
            Tensor::new(&[keep.len(), h, w, ch], data)?,
            labels,
            self.num_classes,
            self.name.clone(),
        )
    }
}

/// Import a dataset from a tree of uncompressed 24-bit BMP files:
/// `root/<class-name>/*.bmp`. Class ids follow the lexicographic order of
/// the per-class directory names; files within a class are read in
/// lexicographic order. Every bitmap must share one width and height.
pub fn import_bmp_tree(root: &Path, name: impl Into<String>) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| MdError::io(root.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(MdError::Config(format!(
            "bmp import needs at least 2 class directories under {}, found {}",
            root.display(),
            class_dirs.len()
        )));
    }

    let mut images: Vec<(Vec<f32>, u32)> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| MdError::io(dir.display().to_string(), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .map(|x| x.eq_ignore_ascii_case("bmp"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        for file in files {
            let (pixels, w, h) = decode_bmp(&file)?;
            match dims {
                None => dims = Some((w, h)),
                Some((ew, eh)) if (w, h) != (ew, eh) => {
                    return Err(MdError::format(
                        file.display().to_string(),
                        format!("is {w}x{h}, expected {ew}x{eh} like the rest"),
                    ));
                }
                _ => {}
            }
            images.push((pixels, class as u32));
        }
    }
    let (w, h) = dims.ok_or_else(|| {
        MdError::Config(format!("no .bmp files found under {}", root.display()))
    })?;

    let n = images.len();
    let mut data = Vec::with_capacity(n * h * w * 3);
    let mut labels = Vec::with_capacity(n);
    for (pixels, label) in images {
        data.extend_from_slice(&pixels);
        labels.push(label);
    }
    Dataset::new(
        Tensor::new(&[n, h, w, 3], data)?,
        labels,
        class_dirs.len(),
        name,
    )
}

/// Decode one uncompressed 24-bit BMP into RGB f32 in [0,1], top-down
/// row-major. Returns `(pixels, width, height)`.
fn decode_bmp(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let what = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| MdError::io(what.clone(), e))?;
    let fail = |detail: String| MdError::format(what.clone(), detail);

    if bytes.len() < 54 {
        return Err(fail(format!("only {} bytes, shorter than a BMP header", bytes.len())));
    }
    if &bytes[0..2] != b"BM" {
        return Err(fail("bad magic, expected 'BM'".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let offset = u32_at(10) as usize;
    let width = u32_at(18) as i32;
    let height_raw = u32_at(22) as i32;
    let bpp = u16_at(28);
    let compression = u32_at(30);
    if bpp != 24 {
        return Err(fail(format!("{bpp} bits per pixel, only 24 supported")));
    }
    if compression != 0 {
        return Err(fail(format!(
            "compression mode {compression}, only uncompressed supported"
        )));
    }
    if width <= 0 || height_raw == 0 {
        return Err(fail(format!("bad dimensions {width}x{height_raw}")));
    }
    let w = width as usize;
    let top_down = height_raw < 0;
    let h = height_raw.unsigned_abs() as usize;
    let stride = (w * 3 + 3) / 4 * 4;
    let need = offset
        .checked_add(stride * h)
        .ok_or_else(|| fail("pixel array size overflows".into()))?;
    if bytes.len() < need {
        return Err(fail(format!(
            "truncated: pixel array needs {need} bytes, file has {}",
            bytes.len()
        )));
    }

    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let src_row = if top_down { y } else { h - 1 - y };
        let row = offset + src_row * stride;
        for x in 0..w {
            let p = row + x * 3;
            let (b, g, r) = (bytes[p], bytes[p + 1], bytes[p + 2]);
            out.push(r as f32 / 255.0);
            out.push(g as f32 / 255.0);
            out.push(b as f32 / 255.0);
        }
    }
    Ok((out, w, h))
}
