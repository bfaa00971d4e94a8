//! Dataset ingestion: corpus loading for the usual SR benchmark
//! directory layouts, bicubic low-resolution synthesis, and aligned
//! crop sampling for training.
//!
//! Low-resolution inputs are synthesized by antialiased bicubic
//! downsampling (the standard degradation track) since no degradation
//! model is prescribed; everything leaving this module lies in [0, 1].

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{load_image, ImageTensor};
use crate::resample::bicubic_resize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    All,
}

impl Split {
    pub(crate) fn subdir_candidates(&self) -> &'static [&'static str] {
        match self {
            Split::Train => &["DIV2K_train_HR", "train", "training"],
            Split::Valid => &["DIV2K_valid_HR", "valid", "validation"],
            Split::All => &[],
        }
    }
}

/// Directory a split would load from, when a split-specific
/// subdirectory exists under `root`.
pub fn split_dir(root: &Path, split: Split) -> Option<PathBuf> {
    split
        .subdir_candidates()
        .iter()
        .map(|c| root.join(c))
        .find(|p| p.is_dir())
}

#[derive(Clone, Debug)]
pub struct CorpusImage {
    pub id: String,
    pub image: ImageTensor,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn decode_all(paths: &[PathBuf], root: &Path) -> Result<Vec<CorpusImage>> {
    let mut images = Vec::new();
    for path in paths {
        match load_image(path) {
            Ok(image) => {
                let id = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("image")
                    .to_string();
                images.push(CorpusImage { id, image });
            }
            Err(e) => eprintln!("warning: skipping {}: {}", path.display(), e),
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!(
            "no decodable images under {}",
            root.display()
        )));
    }
    Ok(images)
}

/// Load every image of a corpus directory in deterministic
/// lexicographic order. A `manifest.txt` (one relative path per line)
/// overrides directory scanning; split-specific subdirectories
/// (DIV2K-style `DIV2K_train_HR`, or plain `train`/`valid`) are used
/// when present, otherwise the root itself is scanned. Unreadable
/// files are skipped with a warning; an empty result is fatal.
pub fn load_corpus(root: &Path, split: Split) -> Result<Vec<CorpusImage>> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "corpus directory {} does not exist",
            root.display()
        )));
    }
    let manifest = root.join("manifest.txt");
    if manifest.is_file() {
        return load_manifest(root, &manifest);
    }
    let dir = split
        .subdir_candidates()
        .iter()
        .map(|c| root.join(c))
        .find(|p| p.is_dir())
        .unwrap_or_else(|| root.to_path_buf());
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no image files found in {}",
            dir.display()
        )));
    }
    decode_all(&paths, root)
}

/// Load images listed in a manifest file (one path per line, relative
/// to `root`; blank lines and `#` comments are skipped). Order follows
/// the file.
pub fn load_manifest(root: &Path, manifest: &Path) -> Result<Vec<CorpusImage>> {
    let text = std::fs::read_to_string(manifest)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {}", manifest.display(), e)))?;
    let paths: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| root.join(l))
        .collect();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} lists no files",
            manifest.display()
        )));
    }
    decode_all(&paths, root)
}

/// Bicubic degradation by an integer factor. Dimensions that do not
/// divide are center-cropped to the largest divisible size first (and
/// reported); the returned pair is (lr, aligned hr).
pub fn synthesize_lr(hr: &ImageTensor, scale: usize) -> Result<(ImageTensor, ImageTensor)> {
    if scale == 0 {
        return Err(Error::Config("scale must be >= 1".into()));
    }
    let (h, w) = (hr.height(), hr.width());
    if h < scale || w < scale {
        return Err(Error::Geometry(format!(
            "image {}x{} smaller than scale {}",
            h, w, scale
        )));
    }
    let (ch, cw) = (h - h % scale, w - w % scale);
    let aligned = if (ch, cw) != (h, w) {
        eprintln!(
            "note: center-cropping {}x{} to {}x{} for scale {}",
            h, w, ch, cw, scale
        );
        hr.crop((h - ch) / 2, (w - cw) / 2, ch, cw)
    } else {
        hr.clone()
    };
    let lr = bicubic_resize(aligned.tensor(), ch / scale, cw / scale).map(|v| v.clamp(0.0, 1.0));
    Ok((ImageTensor::from_tensor(lr)?, aligned))
}

/// How the low-resolution side of a training pair is produced:
/// synthesized from the cropped HR patch (exact alignment, the
/// default), or cropped out of a pre-synthesized full LR image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CropMode {
    #[default]
    FromHrCrop,
    FromFullLr,
}

/// An aligned (lr, hr) training pair; `hr` dims are exactly
/// `scale` times the `lr` dims.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub lr: ImageTensor,
    pub hr: ImageTensor,
    pub scale: usize,
    pub source_id: String,
}

impl PairedSample {
    pub fn validate(&self) -> Result<()> {
        if self.hr.height() != self.scale * self.lr.height()
            || self.hr.width() != self.scale * self.lr.width()
        {
            return Err(Error::Geometry(format!(
                "pair misaligned: lr {}x{} vs hr {}x{} at scale {}",
                self.lr.height(),
                self.lr.width(),
                self.hr.height(),
                self.hr.width(),
                self.scale
            )));
        }
        Ok(())
    }
}

/// Draw one aligned random crop pair from an HR image. The crop offset
/// is sampled in LR coordinates; the HR window sits at `scale` times
/// that offset. Returns `None` (with a warning) when the image is too
/// small for the requested crop.
pub fn sample_training_pair(
    hr: &ImageTensor,
    source_id: &str,
    scale: usize,
    crop_lr: usize,
    mode: CropMode,
    rng: &mut ChaCha8Rng,
) -> Result<Option<PairedSample>> {
    if scale == 0 || crop_lr == 0 {
        return Err(Error::Config("scale and crop size must be >= 1".into()));
    }
    let (lr_h_avail, lr_w_avail) = (hr.height() / scale, hr.width() / scale);
    if lr_h_avail < crop_lr || lr_w_avail < crop_lr {
        eprintln!(
            "warning: {} ({}x{}) too small for a {}px LR crop at scale {}, skipping",
            source_id,
            hr.height(),
            hr.width(),
            crop_lr,
            scale
        );
        return Ok(None);
    }
    let y = rng.random_range(0..=lr_h_avail - crop_lr);
    let x = rng.random_range(0..=lr_w_avail - crop_lr);
    let hr_crop = hr.crop(scale * y, scale * x, scale * crop_lr, scale * crop_lr);
    let lr = match mode {
        CropMode::FromHrCrop => synthesize_lr(&hr_crop, scale)?.0,
        CropMode::FromFullLr => {
            let (lr_full, _) = synthesize_lr(hr, scale)?;
            lr_full.crop(y, x, crop_lr, crop_lr)
        }
    };
    let sample = PairedSample {
        lr,
        hr: hr_crop,
        scale,
        source_id: source_id.to_string(),
    };
    sample.validate()?;
    Ok(Some(sample))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{random_image, save_png};
    use crate::rng::rng_from_seed;

    fn write_corpus(dir: &Path, count: usize, size: usize, seed: u64) {
        let mut rng = rng_from_seed(seed);
        for i in 0..count {
            let img = random_image(&mut rng, size, size, 3);
            save_png(&img, &dir.join(format!("img_{i:03}.png"))).unwrap();
        }
    }

    #[test]
    fn loads_small_benchmark_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 5, 16, 1);
        let corpus = load_corpus(dir.path(), Split::All).unwrap();
        assert_eq!(corpus.len(), 5);
        let ids: Vec<&str> = corpus.iter().map(|c| c.id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted, "corpus must be lexicographically ordered");
    }

    #[test]
    fn loads_hundred_image_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 100, 8, 2);
        let corpus = load_corpus(dir.path(), Split::All).unwrap();
        assert_eq!(corpus.len(), 100);
    }

    #[test]
    fn split_subdirectory_preferred() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("DIV2K_train_HR")).unwrap();
        write_corpus(&dir.path().join("DIV2K_train_HR"), 3, 8, 3);
        write_corpus(dir.path(), 1, 8, 4);
        let corpus = load_corpus(dir.path(), Split::Train).unwrap();
        assert_eq!(corpus.len(), 3);
        let all = load_corpus(dir.path(), Split::All).unwrap();
        assert_eq!(all.len(), 1);
    }

    #[test]
    fn empty_directory_is_fatal_and_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_corpus(dir.path(), Split::All).unwrap_err().to_string();
        assert!(err.contains(dir.path().to_str().unwrap()), "{err}");
        let missing = dir.path().join("nope");
        let err = load_corpus(&missing, Split::All).unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
    }

    #[test]
    fn unreadable_files_skipped_with_survivors() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 2, 8, 5);
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let corpus = load_corpus(dir.path(), Split::All).unwrap();
        assert_eq!(corpus.len(), 2);
    }

    #[test]
    fn manifest_overrides_scanning() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 4, 8, 6);
        std::fs::write(
            dir.path().join("manifest.txt"),
            "# two picks\nimg_002.png\nimg_000.png\n",
        )
        .unwrap();
        let corpus = load_corpus(dir.path(), Split::All).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus[0].id, "img_002");
        assert_eq!(corpus[1].id, "img_000");
    }

    #[test]
    fn synthesize_constant_stays_constant() {
        let hr = ImageTensor::constant(16, 16, 3, 0.42);
        let (lr, aligned) = synthesize_lr(&hr, 2).unwrap();
        assert_eq!((lr.height(), lr.width()), (8, 8));
        assert_eq!(aligned, hr);
        assert!(lr.tensor().data().iter().all(|v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn synthesize_crops_indivisible_dims() {
        let mut rng = rng_from_seed(7);
        let hr = random_image(&mut rng, 19, 18, 3);
        let (lr, aligned) = synthesize_lr(&hr, 4).unwrap();
        assert_eq!((aligned.height(), aligned.width()), (16, 16));
        assert_eq!((lr.height(), lr.width()), (4, 4));
        // Centered: one row and one column trimmed from each leading edge.
        assert_eq!(aligned.pixel(0, 0, 0), hr.pixel(1, 1, 0));
    }

    #[test]
    fn synthesize_matches_direct_bicubic_on_ramp() {
        // Scalar oracle over the ramp: separable antialiased kernel.
        let hr = ImageTensor::from_fn(16, 16, 3, |y, x, c| {
            0.05 + 0.02 * y as f64 + 0.015 * x as f64 + 0.01 * c as f64
        });
        let (lr, _) = synthesize_lr(&hr, 2).unwrap();
        assert_eq!((lr.height(), lr.width()), (8, 8));
        let direct = bicubic_resize(hr.tensor(), 8, 8).map(|v| v.clamp(0.0, 1.0));
        assert_eq!(lr.tensor(), &direct);
        // An interior sample (kernel support fully inside the image)
        // reproduces the affine ramp at source position 2*i + 0.5.
        let expect = 0.05 + 0.02 * 6.5 + 0.015 * 6.5;
        assert!((lr.pixel(3, 3, 0) - expect).abs() < 1e-9, "{}", lr.pixel(3, 3, 0));
    }

    #[test]
    fn training_pair_alignment_and_determinism() {
        let mut rng = rng_from_seed(8);
        let hr = random_image(&mut rng, 40, 40, 3);
        let mut rng_a = rng_from_seed(9);
        let a = sample_training_pair(&hr, "img", 2, 8, CropMode::FromHrCrop, &mut rng_a)
            .unwrap()
            .unwrap();
        a.validate().unwrap();
        assert_eq!((a.lr.height(), a.hr.height()), (8, 16));
        assert!(a.lr.is_unit_range() && a.hr.is_unit_range());
        let mut rng_b = rng_from_seed(9);
        let b = sample_training_pair(&hr, "img", 2, 8, CropMode::FromHrCrop, &mut rng_b)
            .unwrap()
            .unwrap();
        assert_eq!(a.lr, b.lr);
        assert_eq!(a.hr, b.hr);
    }

    #[test]
    fn too_small_image_skips() {
        let mut rng = rng_from_seed(10);
        let hr = random_image(&mut rng, 12, 12, 3);
        let out = sample_training_pair(&hr, "tiny", 2, 8, CropMode::FromHrCrop, &mut rng).unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn crop_modes_agree_on_interior_crops() {
        // Away from image borders the bicubic kernel sees identical
        // support, so cropping commutes with downsampling.
        let mut rng = rng_from_seed(11);
        let hr = random_image(&mut rng, 64, 64, 3);
        let (lr_full, _) = synthesize_lr(&hr, 2).unwrap();
        // Interior window: LR offset (8, 8), size 8.
        let (y, x, crop) = (8usize, 8usize, 8usize);
        let hr_crop = hr.crop(2 * y, 2 * x, 2 * crop, 2 * crop);
        let (lr_a, _) = synthesize_lr(&hr_crop, 2).unwrap();
        let lr_b = lr_full.crop(y, x, crop, crop);
        // Borders of the crop differ (kernel support truncation); the
        // interior must agree to float precision.
        for yy in 2..crop - 2 {
            for xx in 2..crop - 2 {
                for c in 0..3 {
                    assert!(
                        (lr_a.pixel(yy, xx, c) - lr_b.pixel(yy, xx, c)).abs() < 1e-12,
                        "({yy},{xx},{c})"
                    );
                }
            }
        }
    }
}

/// Apply one of the eight axis-aligned orientations (identity, three
/// rotations, and their mirror images) to an image.
fn orient(img: &ImageTensor, code: u8) -> ImageTensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let rot90 = code & 0b100 != 0;
    let flip_y = code & 0b010 != 0;
    let flip_x = code & 0b001 != 0;
    let (oh, ow) = if rot90 { (w, h) } else { (h, w) };
    ImageTensor::from_fn(oh, ow, c, |y, x, ch| {
        let (mut sy, mut sx) = if rot90 { (x, y) } else { (y, x) };
        if flip_y {
            sy = (if rot90 { w } else { h }) - 1 - sy;
        }
        if flip_x {
            sx = (if rot90 { h } else { w }) - 1 - sx;
        }
        img.pixel(sy, sx, ch)
    })
}

/// Random flip/rotation applied consistently to both sides of a pair.
/// Square crops keep their geometry under every orientation.
pub fn augment_pair(pair: &mut PairedSample, rng: &mut ChaCha8Rng) {
    let code = rng.random_range(0..8u8);
    if code == 0 {
        return;
    }
    pair.lr = orient(&pair.lr, code);
    pair.hr = orient(&pair.hr, code);
}
