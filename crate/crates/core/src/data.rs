//! Datasets: an in-memory container, binary loaders for the two common
//! image-classification formats, and a synthetic generator for self-contained
//! experiments.
//!
//! Loaders scale pixel bytes to `[0, 1]` and then standardize each channel
//! to zero mean and unit variance over the whole set, so models see inputs
//! of comparable scale regardless of source. Images are stored
//! channels-last.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled images, stored flat in `[sample, height, width, channel]` order.
/// May be empty; consumers that need data (the trainer) reject empty sets.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<u32>,
    height: usize,
    width: usize,
    channels: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<u32>,
        height: usize,
        width: usize,
        channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(
                "dataset image extents must be positive".into(),
            ));
        }
        let per_image = height * width * channels;
        if images.len() != labels.len() * per_image {
            return Err(Error::Dimension(format!(
                "{} pixel values for {} labels of {per_image} pixels each",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset contains non-finite pixels".into()));
        }
        Ok(Dataset {
            images,
            labels,
            height,
            width,
            channels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(height, width, channels)` of each image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let per = self.height * self.width * self.channels;
        &self.images[index * per..(index + 1) * per]
    }

    /// Assembles the samples at `indices` into a `[n, h, w, c]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<u32>)> {
        if indices.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let per = self.height * self.width * self.channels;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let images = Tensor::new(
            vec![indices.len(), self.height, self.width, self.channels],
            data,
        )?;
        Ok((images, labels))
    }

    /// Shifts and scales each channel to zero mean and unit variance over
    /// the whole dataset. Constant channels are only shifted.
    pub fn standardize_per_channel(&mut self) {
        let c = self.channels;
        if self.images.is_empty() {
            return;
        }
        let rows = (self.images.len() / c) as f64;
        let mut mean = vec![0.0f64; c];
        for px in self.images.chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(px) {
                *m += v as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= rows;
        }
        let mut var = vec![0.0f64; c];
        for px in self.images.chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|&s| {
                let sd = (s / rows).sqrt();
                if sd > 1e-8 { 1.0 / sd } else { 1.0 }
            })
            .collect();
        for px in self.images.chunks_exact_mut(c) {
            for ((v, &m), &k) in px.iter_mut().zip(&mean).zip(&scale) {
                *v = ((*v as f64 - m) * k) as f32;
            }
        }
    }

    /// The first `count` samples of each class, in original order. Errors if
    /// some class has fewer than `count` samples.
    pub fn take_per_class(&self, count: usize) -> Result<Dataset> {
        let mut taken = vec![0usize; self.num_classes];
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if taken[l as usize] < count {
                taken[l as usize] += 1;
                images.extend_from_slice(self.image(i));
                labels.push(l);
            }
        }
        if let Some(cls) = taken.iter().position(|&t| t < count) {
            return Err(Error::Input(format!(
                "class {cls} has only {} samples, need {count}",
                taken[cls]
            )));
        }
        Dataset::new(
            images,
            labels,
            self.height,
            self.width,
            self.channels,
            self.num_classes,
        )
    }
}

struct BeReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> BeReader<'a> {
    fn err(&self, offset: u64, message: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            message,
        }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX image/label file pair (the MNIST container format: u8
/// tensors with big-endian headers). Pixels are scaled to `[0, 1]` and
/// standardized; the class count is taken from the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_buf = read_file(images_path)?;
    let mut r = BeReader {
        buf: &img_buf,
        pos: 0,
        path: images_path,
    };
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(r.err(
            0,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x} for u8 images"),
        ));
    }
    let count = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    let pixels = r.bytes(count * rows * cols, "pixel data")?;
    if r.pos != img_buf.len() {
        return Err(r.err(
            r.pos as u64,
            format!("{} trailing bytes after pixel data", img_buf.len() - r.pos),
        ));
    }

    let lab_buf = read_file(labels_path)?;
    let mut r = BeReader {
        buf: &lab_buf,
        pos: 0,
        path: labels_path,
    };
    let magic = r.u32_be("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(r.err(
            0,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x} for u8 labels"),
        ));
    }
    let lab_count = r.u32_be("label count")? as usize;
    if lab_count != count {
        return Err(r.err(4, format!("{lab_count} labels for {count} images")));
    }
    let labels: Vec<u32> = r.bytes(lab_count, "labels")?.iter().map(|&b| b as u32).collect();

    let images: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut ds = Dataset::new(images, labels, rows, cols, 1, num_classes)?;
    ds.standardize_per_channel();
    Ok(ds)
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_PLANE: usize = CIFAR_SIDE * CIFAR_SIDE;

fn parse_cifar_file(path: &Path, images: &mut Vec<f32>, labels: &mut Vec<u32>) -> Result<()> {
    let buf = read_file(path)?;
    if buf.is_empty() || buf.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (buf.len() - buf.len() % CIFAR_RECORD) as u64,
            message: format!(
                "file size {} is not a positive multiple of the {CIFAR_RECORD}-byte record",
                buf.len()
            ),
        });
    }
    for (rec, chunk) in buf.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = chunk[0];
        if label > 9 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (rec * CIFAR_RECORD) as u64,
                message: format!("label {label} out of range 0..=9"),
            });
        }
        labels.push(label as u32);
        // Records are planar RGB; interleave into channels-last.
        let planes = &chunk[1..];
        for p in 0..CIFAR_PLANE {
            for ch in 0..3 {
                images.push(planes[ch * CIFAR_PLANE + p] as f32 / 255.0);
            }
        }
    }
    Ok(())
}

/// Loads one CIFAR-10 binary batch file (rows of label byte + planar RGB).
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    parse_cifar_file(path, &mut images, &mut labels)?;
    let mut ds = Dataset::new(images, labels, CIFAR_SIDE, CIFAR_SIDE, 3, 10)?;
    ds.standardize_per_channel();
    Ok(ds)
}

/// Loads the five CIFAR-10 training batches from `dir`.
pub fn load_cifar10_train(dir: &Path) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        parse_cifar_file(&dir.join(format!("data_batch_{i}.bin")), &mut images, &mut labels)?;
    }
    let mut ds = Dataset::new(images, labels, CIFAR_SIDE, CIFAR_SIDE, 3, 10)?;
    ds.standardize_per_channel();
    Ok(ds)
}

/// Loads the CIFAR-10 test batch from `dir`.
pub fn load_cifar10_test(dir: &Path) -> Result<Dataset> {
    load_cifar10_binary(&dir.join("test_batch.bin"))
}

/// Which synthetic classification family to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    /// One Gaussian blob per class at a fixed ring position. Near-linearly
    /// separable; a small net saturates it within a couple of epochs.
    #[default]
    Blobs,
    /// A bright anchor blob plus a dimmer partner at a class-specific
    /// offset direction, the whole pair translated together per sample, and
    /// one faint distractor blob dropped at a random spot. Absolute
    /// position carries no class signal, so the net has to learn the
    /// two-blob relation; convergence takes many epochs instead of a few.
    Pairs,
}

/// Shape of the synthetic task. For [`SynthTask::Blobs`] each class is a
/// blob at a fixed ring position and `jitter` smears the per-class centers;
/// for [`SynthTask::Pairs`] the class lives in the anchor-to-partner
/// direction and `jitter` is the global translation of the pair. `noise`
/// is additive per-pixel, relative to the unit blob peak, in both.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub samples: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Std dev of additive per-pixel noise, relative to the unit blob peak.
    pub noise: f32,
    /// Std dev of the per-sample position jitter, in pixels.
    pub jitter: f32,
    #[serde(default)]
    pub task: SynthTask,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            samples: 512,
            classes: 4,
            height: 16,
            width: 16,
            channels: 1,
            noise: 0.25,
            jitter: 0.8,
            task: SynthTask::Blobs,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.height < 4 || self.width < 4 || self.channels == 0 {
            return Err(Error::Config(format!(
                "synthetic image extents {}x{}x{} too small",
                self.height, self.width, self.channels
            )));
        }
        if !self.noise.is_finite() || self.noise < 0.0 || !self.jitter.is_finite() || self.jitter < 0.0 {
            return Err(Error::Config("synthetic noise and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; the log argument is clamped away from zero.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A Gaussian bump dropped onto an accumulation buffer.
struct Bump {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: f64,
}

/// Generates a labeled synthetic set per `spec`, reproducibly from `seed`.
/// Classes are balanced (`label = index % classes`) and the result is
/// standardized like the file loaders' output.
pub fn synth_dataset_with(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let side = h.min(w) as f64;
    let (cy0, cx0) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);

    // Fixed per-class channel amplitudes so multi-channel tasks carry class
    // signal in the channel mix as well as in position.
    let mut amps = vec![0.0f64; spec.classes * c];
    for a in amps.iter_mut() {
        *a = 0.5 + 0.5 * rng.random::<f64>();
    }

    let mut images = Vec::with_capacity(spec.samples * h * w * c);
    let mut labels = Vec::with_capacity(spec.samples);
    let mut bumps: Vec<Bump> = Vec::with_capacity(3);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        labels.push(class as u32);
        let angle = std::f64::consts::TAU * class as f64 / spec.classes as f64;

        bumps.clear();
        match spec.task {
            SynthTask::Blobs => {
                bumps.push(Bump {
                    cy: cy0 + 0.30 * side * angle.sin() + spec.jitter as f64 * normal(&mut rng),
                    cx: cx0 + 0.30 * side * angle.cos() + spec.jitter as f64 * normal(&mut rng),
                    sigma: 0.14 * side,
                    amp: 1.0,
                });
            }
            SynthTask::Pairs => {
                let sigma = 0.09 * side;
                let reach = 0.22 * side;
                // The pair translates as a unit; only the offset direction
                // separates the classes.
                let ay = cy0 + spec.jitter as f64 * normal(&mut rng);
                let ax = cx0 + spec.jitter as f64 * normal(&mut rng);
                // Slight independent wobble keeps the relation from being
                // pixel-exact without blurring classes together.
                let wobble = 0.2 * sigma;
                bumps.push(Bump { cy: ay, cx: ax, sigma, amp: 1.0 });
                bumps.push(Bump {
                    cy: ay + reach * angle.sin() + wobble * normal(&mut rng),
                    cx: ax + reach * angle.cos() + wobble * normal(&mut rng),
                    sigma,
                    amp: 0.75,
                });
                // A faint decoy anywhere in the interior, so "some second
                // bright spot" is not enough to classify.
                let margin = 0.2 * side;
                bumps.push(Bump {
                    cy: margin + rng.random::<f64>() * (h as f64 - 1.0 - 2.0 * margin),
                    cx: margin + rng.random::<f64>() * (w as f64 - 1.0 - 2.0 * margin),
                    sigma,
                    amp: 0.5,
                });
            }
        }

        for y in 0..h {
            for x in 0..w {
                let mut base = 0.0f64;
                for b in &bumps {
                    let d2 = (y as f64 - b.cy).powi(2) + (x as f64 - b.cx).powi(2);
                    base += b.amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                for ch in 0..c {
                    // Pairs must not leak class through brightness, so its
                    // channel amplitudes are shared across classes.
                    let amp = match spec.task {
                        SynthTask::Blobs => amps[class * c + ch],
                        SynthTask::Pairs => amps[ch],
                    };
                    let v = amp * base + spec.noise as f64 * normal(&mut rng);
                    images.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }

    let mut ds = Dataset::new(images, labels, h, w, c, spec.classes)?;
    ds.standardize_per_channel();
    Ok(ds)
}

/// Default-shaped synthetic dataset: `samples` images of `classes`
/// well-separated blob classes. See [`SynthSpec`] for the knobs.
pub fn synth_dataset(samples: usize, classes: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_with(
        &SynthSpec {
            samples,
            classes,
            ..SynthSpec::default()
        },
        seed,
    )
}
