//! USPS loading, subsetting, class-correlated blur and convex probes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 16;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const CLASSES: usize = 10;
pub const USPS_TRAIN_SIZE: usize = 7291;
pub const USPS_TEST_SIZE: usize = 2007;

const CACHE_MAGIC: &[u8; 8] = b"USPSBIN\0";
const CACHE_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Greyscale images `[N, 1, H, W]` in `[0, 1]` with labels in `[0, 10)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        match images.shape() {
            [n, 1, _, _] if *n == labels.len() => {}
            s => {
                return Err(Error::dim("dataset", s, &[labels.len(), 1, 0, 0]));
            }
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("pixel value {v} outside [0, 1]"));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= CLASSES) {
            return Err(invalid!("label {y} outside [0, {CLASSES})"));
        }
        Ok(Dataset {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    /// Pixels of image `i`, row-major.
    pub fn image(&self, i: usize) -> &[f64] {
        let px = self.images.len() / self.len().max(1);
        &self.images.data()[i * px..(i + 1) * px]
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Ok(Dataset {
            images,
            labels,
            split: self.split,
        })
    }

    pub fn class_counts(&self) -> [usize; CLASSES] {
        let mut c = [0; CLASSES];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Index of the first sample with label `class`.
    pub fn first_of_class(&self, class: usize) -> Option<usize> {
        self.labels.iter().position(|&y| y == class)
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let got = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if got == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Parses one USPS text file (plain or gzip): `label p_1 … p_256` per line,
/// pixels in `[−1, 1]` remapped to `[0, 1]`.
pub fn load_usps_file(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = open_maybe_gz(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != PIXELS + 1 {
            return Err(parse_err(
                lineno,
                format!("expected {} fields, found {}", PIXELS + 1, fields.len()),
            ));
        }
        let label: f64 = fields[0]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad label {:?}", fields[0])))?;
        if label.fract() != 0.0 || !(0.0..CLASSES as f64).contains(&label) {
            return Err(parse_err(lineno, format!("label {label} outside 0..{CLASSES}")));
        }
        labels.push(label as usize);
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad pixel value {f:?}")))?;
            if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v) {
                return Err(parse_err(lineno, format!("pixel value {v} outside [-1, 1]")));
            }
            pixels.push(((v + 1.0) / 2.0).clamp(0.0, 1.0));
        }
    }
    let n = labels.len();
    let canonical = match split {
        Split::Train => USPS_TRAIN_SIZE,
        Split::Test => USPS_TEST_SIZE,
    };
    if n != canonical {
        log::warn!(
            "{}: {n} samples, expected {canonical} for the standard USPS {split:?} split",
            path.display()
        );
    }
    Dataset::new(
        Tensor::new([n, 1, IMAGE_SIDE, IMAGE_SIDE], pixels)?,
        labels,
        split,
    )
}

/// Loads a dataset from a USPS text file or a binary cache, detected by content.
pub fn load_dataset(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let mut magic = [0u8; 8];
    let is_cache = File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map(|_| &magic == CACHE_MAGIC)
        .unwrap_or(false);
    if is_cache {
        let ds = read_cache(path)?;
        if ds.split != split {
            log::warn!("{}: cache holds the {:?} split", path.display(), ds.split);
        }
        Ok(ds)
    } else {
        load_usps_file(path, split)
    }
}

pub fn load_usps(train: impl AsRef<Path>, test: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    Ok((
        load_dataset(train, Split::Train)?,
        load_dataset(test, Split::Test)?,
    ))
}

/// Binary cache: magic, version byte, split byte, `n h w` as u64 LE,
/// pixels as f64 LE, labels as u8.
pub fn write_cache(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let (h, wd) = ds.image_shape();
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&[CACHE_VERSION, matches!(ds.split, Split::Test) as u8])
        .map_err(io)?;
    for v in [ds.len(), h, wd] {
        w.write_all(&(v as u64).to_le_bytes()).map_err(io)?;
    }
    for v in ds.images.data() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    let labels: Vec<u8> = ds.labels.iter().map(|&y| y as u8).collect();
    w.write_all(&labels).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.to_string(),
    };
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 34 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("not a dataset cache file"));
    }
    if bytes[8] != CACHE_VERSION {
        return Err(bad(&format!("unsupported cache version {}", bytes[8])));
    }
    let split = if bytes[9] == 1 { Split::Test } else { Split::Train };
    let word = |i: usize| u64::from_le_bytes(bytes[10 + 8 * i..18 + 8 * i].try_into().unwrap()) as usize;
    let (n, h, w) = (word(0), word(1), word(2));
    let body = &bytes[34..];
    let px = n.checked_mul(h * w).ok_or_else(|| bad("header overflow"))?;
    if body.len() != px * 8 + n {
        return Err(bad("truncated or oversized cache body"));
    }
    let pixels = body[..px * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = body[px * 8..].iter().map(|&y| y as usize).collect();
    Dataset::new(Tensor::new([n, 1, h, w], pixels)?, labels, split)
}

/// Uniform random subset of `round(fraction·N)` samples, in original order.
pub fn starve(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid!("subset fraction must be in (0, 1], got {fraction}"));
    }
    let keep = (fraction * ds.len() as f64).round() as usize;
    if keep == 0 {
        return Err(invalid!(
            "fraction {fraction} of {} samples leaves an empty subset",
            ds.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, ds.len(), keep).into_vec();
    idx.sort_unstable();
    ds.subset(&idx)
}

/// Normalized `size × size` Gaussian kernel, row-major.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<Vec<f64>> {
    if size % 2 == 0 {
        return Err(invalid!("kernel size must be odd, got {size}"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid!("sigma must be positive, got {sigma}"));
    }
    let r = (size / 2) as f64;
    let mut k = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (i as f64 - r, j as f64 - r);
            k.push((-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Mirror index without repeating the edge: `-1 → 1`, `n → n − 2`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Convolves one `h × w` image with `kernel` using reflect padding.
pub fn blur_image(image: &[f64], h: usize, w: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..size {
                let sy = reflect(y as isize + ky as isize - r, h);
                for kx in 0..size {
                    let sx = reflect(x as isize + kx as isize - r, w);
                    acc += kernel[ky * size + kx] * image[sy * w + sx];
                }
            }
            out[y * w + x] = acc.clamp(0.0, 1.0);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurPolicy {
    /// `(lo, hi)` σ interval in pixels for each class.
    pub intervals: Vec<(f64, f64)>,
    pub kernel_size: usize,
}

impl Default for BlurPolicy {
    fn default() -> Self {
        BlurPolicy {
            intervals: (0..CLASSES)
                .map(|c| (0.05 + 0.2 * c as f64, 0.25 + 0.2 * c as f64))
                .collect(),
            kernel_size: 5,
        }
    }
}

impl BlurPolicy {
    pub fn new(intervals: Vec<(f64, f64)>, kernel_size: usize) -> Result<Self> {
        let p = BlurPolicy {
            intervals,
            kernel_size,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(invalid!("blur kernel size must be odd, got {}", self.kernel_size));
        }
        if self.intervals.len() != CLASSES {
            return Err(invalid!(
                "need one sigma interval per class ({CLASSES}), got {}",
                self.intervals.len()
            ));
        }
        for (c, &(lo, hi)) in self.intervals.iter().enumerate() {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(invalid!("class {c}: invalid sigma interval [{lo}, {hi}]"));
            }
        }
        for (c, w) in self.intervals.windows(2).enumerate() {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                return Err(invalid!(
                    "sigma intervals must increase strictly with class (classes {c} and {})",
                    c + 1
                ));
            }
        }
        Ok(())
    }

    pub fn sample_sigma<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> f64 {
        let (lo, hi) = self.intervals[class];
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    }
}

/// Blurs every image with a σ drawn from its class interval.
/// Returns the blurred dataset and the σ used for each image.
pub fn apply_class_blur_with_sigmas(
    ds: &Dataset,
    policy: &BlurPolicy,
    seed: u64,
) -> Result<(Dataset, Vec<f64>)> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = ds.image_shape();
    let mut pixels = Vec::with_capacity(ds.images.len());
    let mut sigmas = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let sigma = policy.sample_sigma(ds.labels[i], &mut rng);
        let kernel = gaussian_kernel(sigma, policy.kernel_size)?;
        pixels.extend(blur_image(ds.image(i), h, w, &kernel, policy.kernel_size));
        sigmas.push(sigma);
    }
    let images = Tensor::new(ds.images.shape().to_vec(), pixels)?;
    Ok((Dataset::new(images, ds.labels.clone(), ds.split)?, sigmas))
}

pub fn apply_class_blur(ds: &Dataset, policy: &BlurPolicy, seed: u64) -> Result<Dataset> {
    apply_class_blur_with_sigmas(ds, policy, seed).map(|(d, _)| d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub a: usize,
    pub b: usize,
    pub alphas: Vec<f64>,
}

/// `{k/9 : k = 0..9}`.
pub fn default_alphas() -> Vec<f64> {
    (0..10).map(|k| k as f64 / 9.0).collect()
}

impl ProbeConfig {
    pub fn new(a: usize, b: usize, alphas: Vec<f64>) -> Result<Self> {
        let cfg = ProbeConfig { a, b, alphas };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_default_alphas(a: usize, b: usize) -> Result<Self> {
        Self::new(a, b, default_alphas())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a < self.b && self.b < CLASSES) {
            return Err(invalid!(
                "probe pair must satisfy a < b < {CLASSES}, got ({}, {})",
                self.a,
                self.b
            ));
        }
        validate_alphas(&self.alphas)
    }
}

fn validate_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.first() != Some(&0.0) || alphas.last() != Some(&1.0) {
        return Err(invalid!("alpha grid must start at 0 and end at 1"));
    }
    if alphas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid!("alpha grid must be strictly increasing"));
    }
    Ok(())
}

/// `(1 − α)·a + α·b` for each α, clamped to `[0, 1]`.
pub fn convex_probe(a_img: &[f64], b_img: &[f64], alphas: &[f64]) -> Result<Vec<Vec<f64>>> {
    if a_img.len() != b_img.len() {
        return Err(Error::dim("convex_probe", &[a_img.len()], &[b_img.len()]));
    }
    validate_alphas(alphas)?;
    Ok(alphas
        .iter()
        .map(|&alpha| {
            a_img
                .iter()
                .zip(b_img)
                .map(|(x, y)| ((1.0 - alpha) * x + alpha * y).clamp(0.0, 1.0))
                .collect()
        })
        .collect())
}
