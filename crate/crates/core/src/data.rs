//! Synthetic class-incremental image streams.
//!
//! Each class is a standard-normal template image; samples add gaussian
//! noise. Classes are assigned to chunks contiguously. Pixel values are
//! rounded to `f32` at generation so the on-disk `f32` blobs are lossless.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blob::{self, Dtype};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_chunks: usize,
    pub classes_per_chunk: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_chunks: 5,
            classes_per_chunk: 4,
            samples_per_class: 200,
            channels: 3,
            height: 16,
            width: 16,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_chunks", self.num_chunks),
            ("classes_per_chunk", self.classes_per_chunk),
            ("samples_per_class", self.samples_per_class),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    /// `[n, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedDataset {
    pub chunks: Vec<Chunk>,
    pub classes_per_chunk: usize,
    pub num_classes: usize,
    /// `[C, H, W]`
    pub image_shape: [usize; 3],
}

pub fn gen_synthetic_chunks(cfg: &DataConfig) -> Result<ChunkedDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pixels = cfg.channels * cfg.height * cfg.width;
    let num_classes = cfg.num_chunks * cfg.classes_per_chunk;
    let templates: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..pixels).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut chunks = Vec::with_capacity(cfg.num_chunks);
    for c in 0..cfg.num_chunks {
        let n = cfg.classes_per_chunk * cfg.samples_per_class;
        let mut data = Vec::with_capacity(n * pixels);
        let mut labels = Vec::with_capacity(n);
        for class in c * cfg.classes_per_chunk..(c + 1) * cfg.classes_per_chunk {
            for _ in 0..cfg.samples_per_class {
                for &t in &templates[class] {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push((t + cfg.noise_sigma * noise) as f32 as f64);
                }
                labels.push(class);
            }
        }
        chunks.push(Chunk {
            images: Tensor::new(vec![n, cfg.channels, cfg.height, cfg.width], data)?,
            labels,
        });
    }
    Ok(ChunkedDataset {
        chunks,
        classes_per_chunk: cfg.classes_per_chunk,
        num_classes,
        image_shape: [cfg.channels, cfg.height, cfg.width],
    })
}

impl ChunkedDataset {
    pub fn pixels(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Number of samples in chunks `0..=index`.
    pub fn cumulative_len(&self, index: usize) -> usize {
        self.chunks[..=index].iter().map(Chunk::len).sum()
    }

    /// Locates the `i`-th sample of the concatenated stream.
    pub fn locate(&self, mut i: usize) -> (usize, usize) {
        for (c, chunk) in self.chunks.iter().enumerate() {
            if i < chunk.len() {
                return (c, i);
            }
            i -= chunk.len();
        }
        panic!("sample index out of range");
    }

    /// Gathers samples by stream index into an image batch and labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let p = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * p);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (c, j) = self.locate(i);
            let chunk = &self.chunks[c];
            data.extend_from_slice(&chunk.images.data()[j * p..(j + 1) * p]);
            labels.push(chunk.labels[j]);
        }
        let [ch, h, w] = self.image_shape;
        let images = Tensor::new(vec![indices.len(), ch, h, w], data).expect("gathered size is consistent");
        (images, labels)
    }

    pub fn chunk_classes(&self, index: usize) -> std::ops::Range<usize> {
        index * self.classes_per_chunk..(index + 1) * self.classes_per_chunk
    }
}

/// Position in the chunk stream plus the sampling rng.
#[derive(Clone, Debug)]
pub struct StreamCursor {
    pub index: usize,
    rng: ChaCha8Rng,
}

impl StreamCursor {
    pub fn new(seed: u64) -> Self {
        StreamCursor { index: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn advance(&mut self, ds: &ChunkedDataset) -> Result<()> {
        if self.index + 1 >= ds.chunks.len() {
            return Err(Error::Config(format!("no chunk after {}", self.index)));
        }
        self.index += 1;
        Ok(())
    }
}

/// Draws `batch_size` samples uniformly, with replacement, from the union of
/// chunks `0..=cursor.index`.
pub fn cumulative_batch(ds: &ChunkedDataset, cursor: &mut StreamCursor, batch_size: usize) -> (Tensor, Vec<usize>) {
    let total = ds.cumulative_len(cursor.index);
    let idx: Vec<usize> = (0..batch_size).map(|_| cursor.rng.random_range(0..total)).collect();
    ds.gather(&idx)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChunkEntry {
    images: String,
    labels: String,
    samples: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    classes_per_chunk: usize,
    num_classes: usize,
    image_shape: [usize; 3],
    dtype: Dtype,
    chunks: Vec<ChunkEntry>,
}

const DATASET_FORMAT: &str = "plastinet-dataset-v1";

pub fn save_dataset(ds: &ChunkedDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (i, chunk) in ds.chunks.iter().enumerate() {
        let images = format!("chunk_{i}_images.bin");
        let labels = format!("chunk_{i}_labels.bin");
        blob::write_blob(&dir.join(&images), chunk.images.data(), Dtype::F32)?;
        blob::write_u32(&dir.join(&labels), &chunk.labels)?;
        entries.push(ChunkEntry { images, labels, samples: chunk.len() });
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        classes_per_chunk: ds.classes_per_chunk,
        num_classes: ds.num_classes,
        image_shape: ds.image_shape,
        dtype: Dtype::F32,
        chunks: entries,
    };
    blob::write_json(&dir.join("manifest.json"), &manifest)
}

/// Loads a dataset directory. Returns either a fully validated dataset or
/// an error; nothing partial.
pub fn load_dataset(dir: &Path) -> Result<ChunkedDataset> {
    let mpath = dir.join("manifest.json");
    let m: DatasetManifest = blob::read_json(&mpath)?;
    let invalid = |msg: String| Error::Validation { file: mpath.clone(), msg };
    if m.format != DATASET_FORMAT {
        return Err(invalid(format!("unsupported format `{}`", m.format)));
    }
    if m.dtype == Dtype::U32 {
        return Err(invalid("image dtype must be real".into()));
    }
    if m.chunks.is_empty() || m.classes_per_chunk == 0 {
        return Err(invalid("dataset has no chunks or classes".into()));
    }
    if m.num_classes != m.chunks.len() * m.classes_per_chunk {
        return Err(invalid(format!(
            "num_classes {} != {} chunks × {} classes",
            m.num_classes,
            m.chunks.len(),
            m.classes_per_chunk
        )));
    }
    let pixels: usize = m.image_shape.iter().product();
    let mut chunks = Vec::with_capacity(m.chunks.len());
    for (i, e) in m.chunks.iter().enumerate() {
        let data = blob::read_blob(&dir.join(&e.images), e.samples * pixels, m.dtype)?;
        let lpath = dir.join(&e.labels);
        let labels = blob::read_u32(&lpath, e.samples)?;
        let allowed = i * m.classes_per_chunk..(i + 1) * m.classes_per_chunk;
        if let Some(bad) = labels.iter().find(|l| !allowed.contains(l)) {
            return Err(Error::Validation {
                file: lpath,
                msg: format!("label {bad} outside chunk {i} classes {allowed:?}"),
            });
        }
        let [c, h, w] = m.image_shape;
        chunks.push(Chunk { images: Tensor::new(vec![e.samples, c, h, w], data)?, labels });
    }
    Ok(ChunkedDataset {
        chunks,
        classes_per_chunk: m.classes_per_chunk,
        num_classes: m.num_classes,
        image_shape: m.image_shape,
    })
}
