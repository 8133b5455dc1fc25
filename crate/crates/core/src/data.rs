//! Image/mask ingestion, resizing, one-hot encoding, dataset manifests and
//! splits, batching, and the synthetic lane generator.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::DynamicImage;

use crate::error::{contract, Error, Result};
use crate::par;
use crate::tensor::{Dims, Rng, Tensor4};

/// Mask bytes at or above this value are lane pixels.
pub const LANE_THRESHOLD: u8 = 128;
/// Mask bytes must lie within this distance of 0 or 255.
pub const MASK_TOLERANCE: u8 = 63;

/// Per-pixel 0/1 labels of a single image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        contract!(
            data.len() == h * w,
            "mask data length {} does not match {h}x{w}",
            data.len()
        );
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::Contract(format!(
                "mask entry {} at ({}, {}) is not binary",
                data[pos],
                pos % w,
                pos / w
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Labels of item `n` of a class map; any nonzero class counts as lane.
    pub fn from_class_map(map: &crate::tensor::ClassMap, n: usize) -> Self {
        Self {
            h: map.h,
            w: map.w,
            data: map.item(n).iter().map(|&c| u8::from(c != 0)).collect(),
        }
    }

    /// Arg-max labels of a one-hot `(1, 2, h, w)` mask tensor.
    pub fn from_one_hot(mask: &Tensor4) -> Self {
        Self::from_class_map(&crate::tensor::argmax_channel(mask), 0)
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(1, 3, h, w)` in `[0, 1]`.
    pub image: Tensor4,
    /// `(1, 2, h, w)` one-hot; channel 0 background, channel 1 lane.
    pub mask: Tensor4,
    pub source_id: String,
}

/// `(1, 2, h, w)` tensor with channel 0 = background and channel 1 = lane.
pub fn one_hot_encode(mask: &BinaryMask) -> Result<Tensor4> {
    if let Some(pos) = mask.data.iter().position(|&v| v > 1) {
        return Err(Error::Contract(format!(
            "mask entry {} at flat index {pos} is not binary",
            mask.data[pos]
        )));
    }
    let plane = mask.h * mask.w;
    let mut data = vec![0.0; 2 * plane];
    for (i, &v) in mask.data.iter().enumerate() {
        data[i] = f64::from(1 - v);
        data[plane + i] = f64::from(v);
    }
    Tensor4::from_vec(Dims::new(1, 2, mask.h, mask.w), data)
}

/// Bilinear resize with half-pixel centers and border clamping.
pub fn resize_bilinear(src: &Tensor4, target: (usize, usize)) -> Result<Tensor4> {
    let (th, tw) = target;
    contract!(th >= 1 && tw >= 1, "resize target must be at least 1x1, got {th}x{tw}");
    let d = src.dims();
    if (d.h, d.w) == (th, tw) {
        return Ok(src.clone());
    }
    let taps = |dst: usize, n_src: usize, n_dst: usize| -> (usize, usize, f64) {
        let s = (dst as f64 + 0.5) * (n_src as f64 / n_dst as f64) - 0.5;
        let s = s.clamp(0.0, (n_src - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_src - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..tw).map(|x| taps(x, d.w, tw)).collect();
    let ys: Vec<_> = (0..th).map(|y| taps(y, d.h, th)).collect();
    let od = Dims::new(d.n, d.c, th, tw);
    let mut out = vec![0.0; od.len()];
    par::for_each_chunk(&mut out, od.plane(), |plane, dst| {
        let sp = &src.data()[plane * d.plane()..(plane + 1) * d.plane()];
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = sp[y0 * d.w + x0] * (1.0 - fx) + sp[y0 * d.w + x1] * fx;
                let bottom = sp[y1 * d.w + x0] * (1.0 - fx) + sp[y1 * d.w + x1] * fx;
                dst[y * tw + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    });
    Tensor4::from_vec(od, out)
}

/// Nearest-neighbour resize of a binary mask, sampling at half-pixel centers.
pub fn resize_nearest(mask: &BinaryMask, target: (usize, usize)) -> BinaryMask {
    let (th, tw) = target;
    if (mask.h, mask.w) == (th, tw) {
        return mask.clone();
    }
    let pick = |dst: usize, n_src: usize, n_dst: usize| {
        (((dst as f64 + 0.5) * n_src as f64 / n_dst as f64) as usize).min(n_src - 1)
    };
    let mut data = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = pick(y, mask.h, th);
        for x in 0..tw {
            data.push(mask.get(sy, pick(x, mask.w, tw)));
        }
    }
    BinaryMask { h: th, w: tw, data }
}

fn decode_image(bytes: &[u8], label: &str) -> Result<DynamicImage> {
    image::load_from_memory(bytes).map_err(|e| Error::ImageDecode {
        path: label.to_string(),
        message: e.to_string(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Decodes 8-bit RGB bytes (PNG, JPEG, or binary PPM) into a `(1, 3, h, w)`
/// tensor scaled to `[0, 1]`.
pub fn decode_rgb(bytes: &[u8], label: &str) -> Result<Tensor4> {
    match decode_image(bytes, label)? {
        DynamicImage::ImageRgb8(img) => rgb_to_tensor(&img),
        other => Err(Error::ChannelLayout {
            path: label.to_string(),
            message: format!("expected 8-bit RGB, found {:?}", other.color()),
        }),
    }
}

pub fn rgb_to_tensor(img: &image::RgbImage) -> Result<Tensor4> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(px.0[c]) / 255.0;
        }
    }
    Tensor4::from_vec(Dims::new(1, 3, h, w), data)
}

/// Decodes an 8-bit single-channel mask (PNG or binary PGM) with lane = 255.
pub fn decode_mask(bytes: &[u8], label: &str) -> Result<BinaryMask> {
    let img = match decode_image(bytes, label)? {
        DynamicImage::ImageLuma8(img) => img,
        other => {
            return Err(Error::ChannelLayout {
                path: label.to_string(),
                message: format!("expected 8-bit grayscale mask, found {:?}", other.color()),
            })
        }
    };
    let mut data = Vec::with_capacity(img.len());
    for (x, y, px) in img.enumerate_pixels() {
        let v = px.0[0];
        if v > MASK_TOLERANCE && v < 255 - MASK_TOLERANCE {
            return Err(Error::InvalidMask {
                path: label.to_string(),
                value: v,
                x,
                y,
            });
        }
        data.push(u8::from(v >= LANE_THRESHOLD));
    }
    Ok(BinaryMask {
        h: img.height() as usize,
        w: img.width() as usize,
        data,
    })
}

/// Loads an image/mask pair, resizing the image bilinearly and the mask by
/// nearest neighbour to `target_dims = (h, w)`.
pub fn load_sample(image_path: &Path, mask_path: &Path, target_dims: (usize, usize)) -> Result<Sample> {
    let image_label = image_path.display().to_string();
    let mask_label = mask_path.display().to_string();
    let image = decode_rgb(&read_file(image_path)?, &image_label)?;
    let mask = decode_mask(&read_file(mask_path)?, &mask_label)?;
    let image = resize_bilinear(&image, target_dims)?;
    let mask = one_hot_encode(&resize_nearest(&mask, target_dims))?;
    Ok(Sample {
        image,
        mask,
        source_id: image_label,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}, expected train, val, or test")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

/// Image/mask pairs with their split assignment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parses `image<TAB>mask<TAB>split` lines. Relative paths are resolved
    /// against `base_dir`; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [image, mask, split] = fields[..] else {
                return Err(Error::Manifest {
                    line: i + 1,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            };
            let split = split.parse().map_err(|message| Error::Manifest {
                line: i + 1,
                message,
            })?;
            entries.push(ManifestEntry {
                image: base_dir.join(image),
                mask: base_dir.join(mask),
                split,
            });
        }
        let manifest = Self { entries };
        manifest.check_disjoint()?;
        Ok(manifest)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.image.display(), e.mask.display(), e.split))
            .collect()
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.image) {
                return Err(Error::Config(format!(
                    "image {} appears more than once in the manifest",
                    e.image.display()
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads every entry of `split`, in manifest order.
    pub fn load(&self, split: Split, target_dims: (usize, usize)) -> Result<Vec<Sample>> {
        let entries: Vec<_> = self.split(split).collect();
        for e in &entries {
            for p in [&e.image, &e.mask] {
                if !p.is_file() {
                    return Err(Error::io(
                        p.as_path(),
                        std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest"),
                    ));
                }
            }
        }
        par::map_indices(entries.len(), |i| {
            load_sample(&entries[i].image, &entries[i].mask, target_dims)
        })
        .into_iter()
        .collect()
    }
}

/// Seeded shuffle followed by contiguous train/val/test assignment.
///
/// Validation and test counts are `round(fraction · total)`; train takes the
/// remainder.
pub fn split_dataset(
    pairs: &[(PathBuf, PathBuf)],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    let (ft, fv, fs) = fractions;
    if pairs.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 entries to split, got {}",
            pairs.len()
        )));
    }
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let total = pairs.len();
    let n_val = (fv * total as f64).round() as usize;
    let n_test = (fs * total as f64).round() as usize;
    if n_val + n_test >= total {
        return Err(Error::Config(format!(
            "fractions leave no training entries out of {total}"
        )));
    }
    let n_train = total - n_val - n_test;
    let order = Rng::new(seed).permutation(total);
    let entries = order
        .into_iter()
        .enumerate()
        .map(|(rank, i)| ManifestEntry {
            image: pairs[i].0.clone(),
            mask: pairs[i].1.clone(),
            split: if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            },
        })
        .collect();
    let manifest = DatasetManifest { entries };
    manifest.check_disjoint()?;
    Ok(manifest)
}

/// Sample order for `epoch`, seeded with `seed + epoch`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    Rng::new(seed.wrapping_add(epoch)).permutation(n)
}

/// Concatenates samples into `(b, 3, h, w)` images and `(b, 2, h, w)` masks.
pub fn stack_samples(samples: &[Sample]) -> Result<(Tensor4, Tensor4)> {
    let images: Vec<&Tensor4> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor4> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor4::concat_batch(&images)?, Tensor4::concat_batch(&masks)?))
}

/// Shuffled mini-batches for one epoch; the last batch may be short.
pub fn batch_iterator(
    samples: &[Sample],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Result<(Tensor4, Tensor4)>> + '_ {
    let order = epoch_permutation(samples.len(), seed, epoch);
    let batch_size = batch_size.max(1);
    let n_batches = samples.len().div_ceil(batch_size);
    (0..n_batches).map(move |b| {
        let picked: Vec<Sample> = order[b * batch_size..((b + 1) * batch_size).min(order.len())]
            .iter()
            .map(|&i| samples[i].clone())
            .collect();
        stack_samples(&picked)
    })
}

/// Lane region of a synthetic image: a trapezoid whose parallel edges are
/// horizontal, in continuous pixel coordinates (`y` grows downward).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trapezoid {
    pub top_y: f64,
    pub bottom_y: f64,
    pub top_left: f64,
    pub top_right: f64,
    pub bottom_left: f64,
    pub bottom_right: f64,
}

impl Trapezoid {
    /// Whether the point lies inside (edges inclusive).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        if y < self.top_y || y > self.bottom_y {
            return false;
        }
        let t = (y - self.top_y) / (self.bottom_y - self.top_y);
        let left = self.top_left + t * (self.bottom_left - self.top_left);
        let right = self.top_right + t * (self.bottom_right - self.top_right);
        x >= left && x <= right
    }

    /// Corners clockwise from the top-left.
    pub fn vertices(&self) -> [(f64, f64); 4] {
        [
            (self.top_left, self.top_y),
            (self.top_right, self.top_y),
            (self.bottom_right, self.bottom_y),
            (self.bottom_left, self.bottom_y),
        ]
    }

    /// Membership of every pixel center.
    pub fn rasterize(&self, h: usize, w: usize) -> BinaryMask {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(u8::from(self.contains(x as f64 + 0.5, y as f64 + 0.5)));
            }
        }
        BinaryMask { h, w, data }
    }
}

/// A generated sample along with the pieces used to build it.
#[derive(Debug, Clone)]
pub struct SyntheticLane {
    pub sample: Sample,
    /// Image before additive noise.
    pub clean_image: Tensor4,
    pub lane: Trapezoid,
}

const LANE_FRACTION: (f64, f64) = (0.15, 0.45);
const LANE_RGB: [f64; 3] = [0.86, 0.82, 0.62];
const NOISE_SIGMA: f64 = 0.04;

/// Textured road background with a brighter perspective lane and noise.
pub fn synthetic_lane(rng: &mut Rng, dims: (usize, usize)) -> Result<SyntheticLane> {
    let (h, w) = dims;
    contract!(h >= 16 && w >= 16, "synthetic lane needs at least 16x16, got {h}x{w}");
    let (hf, wf) = (h as f64, w as f64);

    let (lane, mask) = loop {
        let top_y = hf * rng.uniform(0.30, 0.45);
        let bottom_width = wf * rng.uniform(0.45, 0.75);
        let top_width = wf * rng.uniform(0.08, 0.20);
        let bottom_center = rng.uniform(bottom_width / 2.0, wf - bottom_width / 2.0);
        let top_center = (bottom_center + wf * rng.uniform(-0.15, 0.15))
            .clamp(top_width / 2.0, wf - top_width / 2.0);
        let lane = Trapezoid {
            top_y,
            bottom_y: hf,
            top_left: top_center - top_width / 2.0,
            top_right: top_center + top_width / 2.0,
            bottom_left: bottom_center - bottom_width / 2.0,
            bottom_right: bottom_center + bottom_width / 2.0,
        };
        let mask = lane.rasterize(h, w);
        let frac = mask.count_ones() as f64 / (h * w) as f64;
        if (LANE_FRACTION.0..=LANE_FRACTION.1).contains(&frac) {
            break (lane, mask);
        }
    };

    let base = rng.uniform(0.18, 0.32);
    let tint = [rng.uniform(-0.02, 0.02), 0.0, rng.uniform(-0.02, 0.02)];
    let (fx, fy) = (rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9));
    let (px, py) = (rng.uniform(0.0, 6.3), rng.uniform(0.0, 6.3));
    let plane = h * w;
    let mut clean = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let texture = 0.05 * (fx * x as f64 + px).sin() * (fy * y as f64 + py).cos();
            let i = y * w + x;
            for c in 0..3 {
                clean[c * plane + i] = if mask.data[i] == 1 {
                    LANE_RGB[c] + 0.5 * texture
                } else {
                    base + tint[c] + texture
                };
            }
        }
    }
    let noisy = clean
        .iter()
        .map(|&v| (v + rng.normal(NOISE_SIGMA)).clamp(0.0, 1.0))
        .collect();
    let dims4 = Dims::new(1, 3, h, w);
    let sample = Sample {
        image: Tensor4::from_vec(dims4, noisy)?,
        mask: one_hot_encode(&mask)?,
        source_id: format!("synthetic-{}", rng.seed()),
    };
    Ok(SyntheticLane {
        sample,
        clean_image: Tensor4::from_vec(dims4, clean)?,
        lane,
    })
}

pub fn generate_synthetic_lane(rng: &mut Rng, dims: (usize, usize)) -> Result<Sample> {
    Ok(synthetic_lane(rng, dims)?.sample)
}

/// `count` consecutive samples from one generator seeded with `seed`.
pub fn synthetic_dataset(count: usize, dims: (usize, usize), seed: u64) -> Result<Vec<Sample>> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|i| {
            let mut s = generate_synthetic_lane(&mut rng, dims)?;
            s.source_id = format!("synthetic-{seed}-{i}");
            Ok(s)
        })
        .collect()
}
