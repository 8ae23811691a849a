//! Dataset plumbing: sample types, file formats, resizing, splits.
//!
//! Images travel as `[3,H,W]` tensors with values on the 8-bit grid
//! `k/255`, masks as `[H,W]` integer class masks. Interchange formats
//! are binary PPM/PGM plus a tab-separated manifest, so a dataset is
//! portable with zero external tooling.

pub mod augment;
pub mod netpbm;
pub mod synthetic;

use std::path::{Path, PathBuf};

use crate::tensor::{ClassMask, Tensor};
use crate::{Error, Result};

pub use augment::{augment, sample_rng, AugmentConfig};
pub use synthetic::{generate_synthetic_dataset, generate_with, SyntheticConfig};

/// One image/mask pair.
#[derive(Clone, Debug)]
pub struct SegSample {
    /// `[3,H,W]`, values in `[0,1]`.
    pub image: Tensor<f64>,
    /// `[H,W]`, values in `[0, num_classes)`.
    pub mask: ClassMask,
    pub source_id: String,
}

impl SegSample {
    pub fn new(image: Tensor<f64>, mask: ClassMask, source_id: impl Into<String>) -> Result<Self> {
        let is = image.shape();
        let ms = mask.shape();
        if is.len() != 3 || is[0] != 3 {
            return Err(Error::shape("seg_sample", format!("image shape {:?}", is)));
        }
        if ms != [is[1], is[2]] {
            return Err(Error::shape(
                "seg_sample",
                format!("mask {:?} does not match image {:?}", ms, is),
            ));
        }
        Ok(SegSample { image, mask, source_id: source_id.into() })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Errors if any mask value reaches `classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        if let Some(&bad) = self.mask.data().iter().find(|&&v| v as usize >= classes) {
            return Err(Error::LabelOutOfRange { label: bad as usize, classes });
        }
        Ok(())
    }
}

/// Ordered class names with display colors. Index 0 is always the
/// background class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPalette {
    pub names: Vec<String>,
    pub colors: Vec<[u8; 3]>,
}

impl ClassPalette {
    /// Wound-bed tissue labels plus background.
    pub fn six_tissue() -> Self {
        ClassPalette {
            names: ["Background", "Granulation", "Slough", "Maceration", "Necrotic", "Bone", "Tendon"]
                .map(String::from)
                .to_vec(),
            colors: vec![
                [210, 180, 150],
                [196, 60, 60],
                [222, 198, 90],
                [232, 228, 208],
                [46, 34, 30],
                [240, 238, 220],
                [206, 202, 160],
            ],
        }
    }

    /// Diabetic-foot-ulcer labels.
    pub fn four_class() -> Self {
        ClassPalette {
            names: ["Background", "Granulation", "Callus", "Fibrin"].map(String::from).to_vec(),
            colors: vec![[210, 180, 150], [196, 60, 60], [224, 192, 148], [234, 224, 176]],
        }
    }

    /// Resolves a palette named in a run config.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "six_tissue" => Ok(Self::six_tissue()),
            "four_class" => Ok(Self::four_class()),
            other => Err(Error::Config(format!(
                "unknown palette {other:?}; expected \"six_tissue\" or \"four_class\""
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Decodes a PPM/PGM pair into a sample, checking dimensions against
/// each other and mask values against the palette.
pub fn load_sample(image_path: &Path, mask_path: &Path, palette: &ClassPalette) -> Result<SegSample> {
    let (iw, ih, rgb) = netpbm::read_ppm(image_path)?;
    let (mw, mh, gray) = netpbm::read_pgm(mask_path)?;
    if (iw, ih) != (mw, mh) {
        return Err(Error::shape(
            "load_sample",
            format!("image {iw}x{ih} vs mask {mw}x{mh}"),
        ));
    }
    // Interleaved RGB rows -> planar channels.
    let image = Tensor::from_fn(&[3, ih, iw], |i| {
        let (c, pix) = (i / (ih * iw), i % (ih * iw));
        rgb[pix * 3 + c] as f64 / 255.0
    });
    let mask = ClassMask::new(&[mh, mw], gray)?;
    let sample = SegSample::new(
        image,
        mask,
        image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    )?;
    sample.check_classes(palette.len())?;
    Ok(sample)
}

/// Writes a sample as a PPM/PGM pair, quantizing image values to the
/// 8-bit grid (round half up). Samples whose values already sit on the
/// grid survive a save/load round trip bit-exactly.
pub fn save_sample(sample: &SegSample, image_path: &Path, mask_path: &Path) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    let plane = h * w;
    let data = sample.image.data();
    let mut rgb = vec![0u8; 3 * plane];
    for pix in 0..plane {
        for c in 0..3 {
            rgb[pix * 3 + c] = (data[c * plane + pix].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    netpbm::write_ppm(image_path, w, h, &rgb)?;
    netpbm::write_pgm(mask_path, w, h, sample.mask.data())
}

/// Resizes to `size` x `size`: image bilinearly, mask nearest-neighbor
/// so labels stay valid class indices.
pub fn resize_sample(sample: &SegSample, size: usize) -> Result<SegSample> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::argument("resize_sample", format!("size {size} not divisible by 32")));
    }
    let (h, w) = (sample.height(), sample.width());
    if (h, w) == (size, size) {
        return Ok(sample.clone());
    }
    let plane = h * w;
    let mut image = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        image.extend(bilinear_resize_plane(
            &sample.image.data()[c * plane..(c + 1) * plane],
            h,
            w,
            size,
            size,
        ));
    }
    let mask = nearest_resize_mask(sample.mask.data(), h, w, size, size);
    SegSample::new(
        Tensor::new(&[3, size, size], image)?,
        ClassMask::new(&[size, size], mask)?,
        sample.source_id.clone(),
    )
}

/// Half-pixel-aligned bilinear resampling of one plane. The source
/// coordinate for output index `d` is `(d + 0.5) * in/out - 0.5`,
/// clamped into the source extent.
pub fn bilinear_resize_plane(
    src: &[f64],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let coord = |d: usize, out: usize, inn: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * inn as f64 / out as f64 - 0.5).max(0.0);
        let lo = (s as usize).min(inn - 1);
        (lo, (lo + 1).min(inn - 1), s - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, oh, h);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, ow, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Nearest-neighbor resampling with the same half-pixel alignment.
pub fn nearest_resize_mask(src: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let coord = |d: usize, out: usize, inn: usize| -> usize {
        (((d as f64 + 0.5) * inn as f64 / out as f64).floor() as usize).min(inn - 1)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = coord(y, oh, h);
        for x in 0..ow {
            out.push(src[sy * w + coord(x, ow, w)]);
        }
    }
    out
}

/// Writes one `image<TAB>mask` line per entry.
pub fn write_manifest(path: &Path, entries: &[(PathBuf, PathBuf)]) -> Result<()> {
    let mut text = String::new();
    for (img, mask) in entries {
        text.push_str(&format!("{}\t{}\n", img.display(), mask.display()));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses a manifest. Relative entries resolve against the manifest's
/// own directory so a dataset folder can move as a unit.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (img, mask) = line
            .split_once('\t')
            .ok_or_else(|| Error::Codec(format!("manifest line {}: missing tab", lineno + 1)))?;
        entries.push((resolve(img.trim()), resolve(mask.trim())));
    }
    Ok(entries)
}

/// Loads every manifest entry.
pub fn load_manifest_samples(path: &Path, palette: &ClassPalette) -> Result<Vec<SegSample>> {
    read_manifest(path)?
        .iter()
        .map(|(img, mask)| load_sample(img, mask, palette))
        .collect()
}

/// Seed-deterministic shuffle followed by a cumulative-rounding cut:
/// boundaries are `round(n * f1)` and `round(n * (f1 + f2))`, so 147
/// items at 0.8/0.1/0.1 give exactly 118/14/15.
pub fn split_dataset<T>(
    mut items: Vec<T>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::argument("split_dataset", "fractions outside [0,1]"));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::argument("split_dataset", "fractions must sum to 1"));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let n = items.len();
    let b1 = (n as f64 * fractions[0]).round() as usize;
    let b2 = ((n as f64 * (fractions[0] + fractions[1])).round() as usize).max(b1).min(n);
    let rest = items.split_off(b1.min(n));
    let mut val = rest;
    let test = val.split_off(b2 - b1.min(n));
    Ok((items, val, test))
}

/// Stacks samples into an `[N,3,H,W]` image batch and `[N,H,W]` mask
/// batch. All samples must share one extent.
pub fn batch_samples(samples: &[&SegSample]) -> Result<(Tensor<f64>, ClassMask)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::argument("batch_samples", "empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut image = Vec::with_capacity(samples.len() * 3 * h * w);
    let masks: Vec<&ClassMask> = samples.iter().map(|s| &s.mask).collect();
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape(
                "batch_samples",
                format!("{}x{} sample in a {h}x{w} batch", s.height(), s.width()),
            ));
        }
        image.extend_from_slice(s.image.data());
    }
    Ok((Tensor::new(&[samples.len(), 3, h, w], image)?, ClassMask::stack(&masks)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard_sample(h: usize, w: usize) -> SegSample {
        let image = Tensor::from_fn(&[3, h, w], |i| {
            let pix = i % (h * w);
            ((pix / w + pix % w) % 2) as f64 * (128.0 / 255.0)
        });
        let mask = ClassMask::new(
            &[h, w],
            (0..h * w).map(|p| ((p / w + p % w) % 2) as u8).collect(),
        )
        .unwrap();
        SegSample::new(image, mask, "checker").unwrap()
    }

    #[test]
    fn red_image_with_zero_mask_loads_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("red.ppm");
        let msk = dir.path().join("red.pgm");
        netpbm::write_ppm(&img, 2, 2, &[255, 0, 0, 255, 0, 0, 255, 0, 0, 255, 0, 0]).unwrap();
        netpbm::write_pgm(&msk, 2, 2, &[0; 4]).unwrap();
        let s = load_sample(&img, &msk, &ClassPalette::six_tissue()).unwrap();
        assert_eq!(&s.image.data()[..4], &[1.0; 4]);
        assert_eq!(&s.image.data()[4..], &[0.0; 8]);
        assert!(s.mask.data().iter().all(|&v| v == 0));
        assert_eq!(s.source_id, "red");
    }

    #[test]
    fn out_of_range_mask_value_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.ppm");
        let msk = dir.path().join("a.pgm");
        netpbm::write_ppm(&img, 1, 1, &[10, 20, 30]).unwrap();
        netpbm::write_pgm(&msk, 1, 1, &[9]).unwrap();
        assert!(matches!(
            load_sample(&img, &msk, &ClassPalette::six_tissue()),
            Err(Error::LabelOutOfRange { label: 9, classes: 7 })
        ));
    }

    #[test]
    fn mismatched_image_and_mask_dimensions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("b.ppm");
        let msk = dir.path().join("b.pgm");
        netpbm::write_ppm(&img, 2, 1, &[0; 6]).unwrap();
        netpbm::write_pgm(&msk, 1, 2, &[0; 2]).unwrap();
        assert!(load_sample(&img, &msk, &ClassPalette::four_class()).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let sample = checkerboard_sample(6, 4);
        let img = dir.path().join("s.ppm");
        let msk = dir.path().join("s.pgm");
        save_sample(&sample, &img, &msk).unwrap();
        let back = load_sample(&img, &msk, &ClassPalette::six_tissue()).unwrap();
        assert_eq!(back.image.data(), sample.image.data());
        assert_eq!(back.mask.data(), sample.mask.data());
    }

    #[test]
    fn resize_to_own_size_is_identity() {
        let sample = checkerboard_sample(32, 32);
        let resized = resize_sample(&sample, 32).unwrap();
        assert_eq!(resized.image.data(), sample.image.data());
        assert_eq!(resized.mask.data(), sample.mask.data());
    }

    #[test]
    fn resize_rejects_extents_off_the_stride_grid() {
        let sample = checkerboard_sample(32, 32);
        assert!(resize_sample(&sample, 100).is_err());
        assert!(resize_sample(&sample, 0).is_err());
    }

    #[test]
    fn resized_mask_only_contains_original_values() {
        let sample = checkerboard_sample(64, 64);
        let resized = resize_sample(&sample, 32).unwrap();
        assert!(resized.mask.data().iter().all(|&v| v <= 1));
        assert_eq!(resized.mask.shape(), &[32, 32]);
        assert_eq!(resized.image.shape(), &[3, 32, 32]);
    }

    #[test]
    fn downscale_matches_formula_at_spot_checked_pixels() {
        // Horizontal ramp: src[y*w + x] = x.
        let (h, w) = (256, 256);
        let src: Vec<f64> = (0..h * w).map(|i| (i % w) as f64).collect();
        let out = bilinear_resize_plane(&src, h, w, 224, 224);
        for &x in &[0usize, 17, 100, 223] {
            let s = ((x as f64 + 0.5) * 256.0 / 224.0 - 0.5).max(0.0);
            let (x0, fx) = (s as usize, s - (s as usize) as f64);
            let want = x0 as f64 * (1.0 - fx) + (x0 + 1).min(255) as f64 * fx;
            let got = out[50 * 224 + x];
            assert!((got - want).abs() < 1e-12, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn upsample_interior_interpolates_linearly() {
        // One row [0, 1] widened to four columns: half-pixel alignment
        // puts the outputs at source x = -0.25, 0.25, 0.75, 1.25.
        let out = bilinear_resize_plane(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn manifest_round_trip_and_relative_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("set.tsv");
        write_manifest(
            &manifest,
            &[(PathBuf::from("img/a.ppm"), PathBuf::from("msk/a.pgm"))],
        )
        .unwrap();
        let entries = read_manifest(&manifest).unwrap();
        assert_eq!(entries[0].0, dir.path().join("img/a.ppm"));
        assert_eq!(entries[0].1, dir.path().join("msk/a.pgm"));

        std::fs::write(&manifest, "no-tab-here\n").unwrap();
        assert!(matches!(read_manifest(&manifest), Err(Error::Codec(_))));
    }

    #[test]
    fn split_147_gives_paper_counts() {
        let items: Vec<usize> = (0..147).collect();
        let (train, val, test) = split_dataset(items, [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (118, 14, 15));
        let mut all: Vec<usize> = train.iter().chain(&val).chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..147).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_seed_deterministic() {
        let a = split_dataset((0..50).collect::<Vec<_>>(), [0.8, 0.1, 0.1], 9).unwrap();
        let b = split_dataset((0..50).collect::<Vec<_>>(), [0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(split_dataset(vec![1, 2, 3], [0.5, 0.1, 0.1], 0).is_err());
        assert!(split_dataset(vec![1, 2, 3], [1.2, -0.1, -0.1], 0).is_err());
    }

    #[test]
    fn batching_stacks_and_validates() {
        let a = checkerboard_sample(4, 4);
        let b = checkerboard_sample(4, 4);
        let (images, masks) = batch_samples(&[&a, &b]).unwrap();
        assert_eq!(images.shape(), &[2, 3, 4, 4]);
        assert_eq!(masks.shape(), &[2, 4, 4]);
        let c = checkerboard_sample(8, 8);
        assert!(batch_samples(&[&a, &c]).is_err());
        assert!(batch_samples(&[]).is_err());
    }

    #[test]
    fn palette_lookup_by_name() {
        assert_eq!(ClassPalette::by_name("six_tissue").unwrap().len(), 7);
        assert_eq!(ClassPalette::by_name("four_class").unwrap().len(), 4);
        assert!(ClassPalette::by_name("five").is_err());
        for p in [ClassPalette::six_tissue(), ClassPalette::four_class()] {
            assert_eq!(p.names[0], "Background");
            assert_eq!(p.names.len(), p.colors.len());
        }
    }
}
