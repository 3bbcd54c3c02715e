//! Clean labeled image pools and their raw binary record format.
//!
//! A binary dataset is a manifest (TOML) plus a data file of fixed-size
//! records: one label byte followed by `C·H·W` pixel bytes, channel-major.
//! A 32×32 RGB record is 3073 bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    channels: usize,
    size: usize,
    num_classes: usize,
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(channels: usize, size: usize, num_classes: usize, images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() * channels * size * size {
            return Err(Error::Data(format!(
                "{} pixel values do not match {} records of {channels}×{size}×{size}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(Error::Data(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(Self {
            channels,
            size,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Records `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let n = self.image_len();
        Dataset {
            channels: self.channels,
            size: self.size,
            num_classes: self.num_classes,
            images: self.images[start * n..end * n].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }

    /// A `[k, c, h, w]` batch of the given records.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let x = Tensor::new(vec![idx.len(), self.channels, self.size, self.size], data)?;
        Ok((x, idx.iter().map(|&i| self.label(i)).collect()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryManifest {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub num_classes: usize,
    /// Record file, relative to the manifest's directory.
    pub data: String,
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a binary dataset described by the manifest at `path`.
pub fn read_binary(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: BinaryManifest = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if m.height != m.width {
        return Err(Error::Data(format!("images must be square, manifest declares {}×{}", m.height, m.width)));
    }
    let dpath = path.parent().unwrap_or_else(|| Path::new(".")).join(&m.data);
    let bytes = fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
    let rec = 1 + m.channels * m.height * m.width;
    if bytes.len() != rec * m.count {
        return Err(Error::Data(format!(
            "{} holds {} bytes, expected {} records of {rec}",
            dpath.display(),
            bytes.len(),
            m.count
        )));
    }
    let mut images = Vec::with_capacity(m.count * (rec - 1));
    let mut labels = Vec::with_capacity(m.count);
    for r in bytes.chunks_exact(rec) {
        labels.push(r[0]);
        images.extend(r[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(m.channels, m.height, m.num_classes, images, labels)
}

/// Writes `ds` as `stem.toml` + `stem.bin`, quantizing pixels to bytes.
pub fn write_binary(stem: &Path, ds: &Dataset) -> Result<PathBuf> {
    let (mpath, dpath) = (stem.with_extension("toml"), stem.with_extension("bin"));
    if let Some(dir) = mpath.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(ds.len() * (1 + ds.image_len()));
    for i in 0..ds.len() {
        bytes.push(ds.labels[i]);
        bytes.extend(ds.image(i).iter().map(|&v| quantize(v)));
    }
    fs::write(&dpath, bytes).map_err(|e| Error::io(&dpath, e))?;
    let m = BinaryManifest {
        channels: ds.channels,
        height: ds.size,
        width: ds.size,
        count: ds.len(),
        num_classes: ds.num_classes,
        data: dpath.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let text = toml::to_string(&m).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}
