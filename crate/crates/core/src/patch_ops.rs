//! Lossless image <-> patch-sequence conversion and the positional
//! embedding table.
//!
//! Ordering is frozen: patches are enumerated row-major over the patch
//! grid, and each patch is flattened row-major over (row, col, channel).
//! `merge_patches` is the exact inverse of `split_into_patches`; no
//! floating-point arithmetic touches the values, so the roundtrip is
//! bit-exact.

use crate::autodiff::{image_to_patches_value, patches_to_image_value};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{normal_tensor, rng_from_seed, sub_seed};
use crate::tensor::Tensor;

/// Non-overlapping flattened patches of an image plus grid geometry.
/// Row i of `vectors` is patch i; `d = k * k * channels` and
/// `n = grid_rows * grid_cols` hold by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub vectors: Tensor,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub k: usize,
    pub channels: usize,
}

impl PatchSequence {
    pub fn n(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn d(&self) -> usize {
        self.k * self.k * self.channels
    }
}

/// Cut an image into non-overlapping `k x k` patches (stride equals the
/// patch size) and flatten each into one row.
pub fn split_into_patches(image: &ImageTensor, k: usize) -> Result<PatchSequence> {
    if k == 0 {
        return Err(Error::Geometry("patch size k must be >= 1".into()));
    }
    let (h, w) = (image.height(), image.width());
    if h % k != 0 {
        return Err(Error::Geometry(format!(
            "image height {} is not divisible by patch size {}",
            h, k
        )));
    }
    if w % k != 0 {
        return Err(Error::Geometry(format!(
            "image width {} is not divisible by patch size {}",
            w, k
        )));
    }
    if !image.tensor().is_finite() {
        return Err(Error::Numeric("image contains non-finite pixels".into()));
    }
    Ok(PatchSequence {
        vectors: image_to_patches_value(image.tensor(), k),
        grid_rows: h / k,
        grid_cols: w / k,
        k,
        channels: image.channels(),
    })
}

/// Exact inverse of [`split_into_patches`] for the stated geometry.
pub fn merge_patches(seq: &PatchSequence, h: usize, w: usize) -> Result<ImageTensor> {
    if h != seq.grid_rows * seq.k || w != seq.grid_cols * seq.k {
        return Err(Error::Geometry(format!(
            "target {}x{} does not match patch grid {}x{} of {}px patches",
            h, w, seq.grid_rows, seq.grid_cols, seq.k
        )));
    }
    if seq.vectors.shape() != [seq.n(), seq.d()] {
        return Err(Error::Geometry(format!(
            "patch matrix {:?} does not match n={} d={}",
            seq.vectors.shape(),
            seq.n(),
            seq.d()
        )));
    }
    ImageTensor::from_tensor(patches_to_image_value(&seq.vectors, h, w, seq.k))
}

/// Learned positional embedding: a fixed seeded random source matrix of
/// shape `[n, d]` projected through a trainable `[d, d]` matrix. Only
/// the projection is a parameter; the random source is regenerated from
/// its seed for any patch count, which keeps the trainable manifest
/// independent of geometry.
#[derive(Clone, Debug)]
pub struct PositionalEmbedding {
    n: usize,
    d: usize,
    seed: u64,
    rv: Tensor,
    pub w_pe: Tensor,
}

impl PositionalEmbedding {
    /// `rv ~ N(0, 1)` from `seed`; `w_pe ~ N(0, 0.02)` from a derived
    /// sub-stream.
    pub fn new(n: usize, d: usize, seed: u64) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Config(format!(
                "positional embedding needs n, d >= 1 (got n={}, d={})",
                n, d
            )));
        }
        let rv = normal_tensor(&mut rng_from_seed(seed), &[n, d], 1.0);
        let w_pe = normal_tensor(&mut rng_from_seed(sub_seed(seed, "w_pe")), &[d, d], 0.02);
        Ok(PositionalEmbedding { n, d, seed, rv, w_pe })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The fixed random source rows for this embedding's own n.
    pub fn rv(&self) -> &Tensor {
        &self.rv
    }

    /// Random source for an arbitrary patch count, regenerated from the
    /// stored seed (cached clone when `n` matches).
    pub fn rv_for(&self, n: usize) -> Tensor {
        if n == self.n {
            self.rv.clone()
        } else {
            normal_tensor(&mut rng_from_seed(self.seed), &[n, self.d], 1.0)
        }
    }

    /// Embedding table `rv . w_pe`, recomputed on demand so it can never
    /// go stale after a parameter update.
    pub fn table(&self) -> Tensor {
        self.rv.matmul(&self.w_pe)
    }
}

/// Operation-style constructor alias for the embedding.
pub fn make_positional_embedding(n: usize, d: usize, seed: u64) -> Result<PositionalEmbedding> {
    PositionalEmbedding::new(n, d, seed)
}
