//! Dense rank-4 tensors, the seeded RNG, and the few primitives every
//! layer kernel builds on.
//!
//! Layout is row-major with the batch axis outermost: element
//! `(n, c, y, x)` lives at `((n * C + c) * H + y) * W + x`.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Error, Result};

/// Extents of a [`Tensor4`]: batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one `h × w` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch item.
    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    fn validate(&self) -> Result<()> {
        contract!(
            self.n > 0 && self.c > 0 && self.h > 0 && self.w > 0,
            "tensor dims must be strictly positive, got {self}"
        );
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense `n × c × h × w` array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            data: vec![0.0; dims.len()],
        })
    }

    pub fn filled(dims: Dims, value: f64) -> Result<Self> {
        contract!(value.is_finite(), "fill value must be finite");
        dims.validate()?;
        Ok(Self {
            dims,
            data: vec![value; dims.len()],
        })
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        contract!(
            data.len() == dims.len(),
            "data length {} does not match dims {dims} ({} elements)",
            data.len(),
            dims.len()
        );
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor from kernel output that is finite by construction.
    pub(crate) fn from_raw(dims: Dims, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + y) * self.dims.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    /// The `(c, h, w)` slab of batch item `n`.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.dims.item();
        &self.data[n * len..(n + 1) * len]
    }

    /// Copies batch item `n` into a new single-item tensor.
    pub fn item_tensor(&self, n: usize) -> Tensor4 {
        Tensor4::from_raw(Dims { n: 1, ..self.dims }, self.item(n).to_vec())
    }

    /// Concatenates single- or multi-item tensors along the batch axis.
    pub fn concat_batch(parts: &[&Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("cannot concatenate zero tensors".into()))?;
        let mut dims = first.dims;
        dims.n = 0;
        let mut data = Vec::new();
        for (i, t) in parts.iter().enumerate() {
            let d = t.dims;
            contract!(
                (d.c, d.h, d.w) == (first.dims.c, first.dims.h, first.dims.w),
                "batch part {i} has dims {d}, expected ?x{}x{}x{}",
                first.dims.c,
                first.dims.h,
                first.dims.w
            );
            dims.n += d.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4::from_raw(dims, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4::from_raw(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Surrounds every plane with a zero border of width `pad`.
pub fn pad2d(t: &Tensor4, pad: usize) -> Tensor4 {
    if pad == 0 {
        return t.clone();
    }
    let d = t.dims();
    let out_dims = Dims::new(d.n, d.c, d.h + 2 * pad, d.w + 2 * pad);
    let mut out = vec![0.0; out_dims.len()];
    for (plane_in, plane_out) in t
        .data
        .chunks_exact(d.plane())
        .zip(out.chunks_exact_mut(out_dims.plane()))
    {
        for (y, row) in plane_in.chunks_exact(d.w).enumerate() {
            let start = (y + pad) * out_dims.w + pad;
            plane_out[start..start + d.w].copy_from_slice(row);
        }
    }
    Tensor4::from_raw(out_dims, out)
}

/// Removes a border of width `margin` from every plane.
pub fn crop2d(t: &Tensor4, margin: usize) -> Result<Tensor4> {
    let d = t.dims();
    contract!(
        d.h > 2 * margin && d.w > 2 * margin,
        "cannot crop margin {margin} from {}x{} planes",
        d.h,
        d.w
    );
    let out_dims = Dims::new(d.n, d.c, d.h - 2 * margin, d.w - 2 * margin);
    let mut out = Vec::with_capacity(out_dims.len());
    for plane in t.data.chunks_exact(d.plane()) {
        for y in margin..d.h - margin {
            out.extend_from_slice(&plane[y * d.w + margin..(y + 1) * d.w - margin]);
        }
    }
    Ok(Tensor4::from_raw(out_dims, out))
}

/// Per-pixel class indices, dims `(n, 1, h, w)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<usize>,
}

impl ClassMap {
    pub fn get(&self, n: usize, y: usize, x: usize) -> usize {
        self.data[(n * self.h + y) * self.w + x]
    }

    /// The `h × w` labels of batch item `n`.
    pub fn item(&self, n: usize) -> &[usize] {
        let len = self.h * self.w;
        &self.data[n * len..(n + 1) * len]
    }
}

/// Index of the largest channel at every pixel; ties go to the lowest index.
pub fn argmax_channel(t: &Tensor4) -> ClassMap {
    let d = t.dims();
    let plane = d.plane();
    let mut data = vec![0usize; d.n * plane];
    for n in 0..d.n {
        let item = t.item(n);
        for (p, label) in data[n * plane..(n + 1) * plane].iter_mut().enumerate() {
            let mut best = item[p];
            for c in 1..d.c {
                let v = item[c * plane + p];
                if v > best {
                    best = v;
                    *label = c;
                }
            }
        }
    }
    ClassMap {
        n: d.n,
        h: d.h,
        w: d.w,
        data,
    }
}

/// Deterministic seeded random source.
///
/// Not shared across threads; use [`Rng::fork`] to derive an independent
/// stream instead.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A new generator on stream `stream` of the same seed.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    pub fn normal(&mut self, sigma: f64) -> f64 {
        Normal::new(0.0, sigma)
            .expect("sigma must be positive and finite")
            .sample(&mut self.inner)
    }

    /// A uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.inner);
        idx
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Fills a tensor with i.i.d. `N(0, sigma²)` draws.
pub fn sample_gaussian(rng: &mut Rng, dims: Dims, sigma: f64) -> Result<Tensor4> {
    contract!(
        sigma > 0.0 && sigma.is_finite(),
        "sigma must be positive, got {sigma}"
    );
    dims.validate()?;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Contract(e.to_string()))?;
    let data = (0..dims.len()).map(|_| normal.sample(&mut rng.inner)).collect();
    Ok(Tensor4::from_raw(dims, data))
}
