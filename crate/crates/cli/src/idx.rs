//! IDX container reading and writing (the MNIST file format).
//!
//! Headers are big-endian: a magic word (0x803 for byte images with three
//! dimensions, 0x801 for byte labels with one), then one u32 per dimension,
//! then the payload. Pixels map to `[0, 1]` by dividing by 255; writing
//! quantizes back, so datasets on the 8-bit grid round-trip exactly.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sidp_core::data::Dataset;
use sidp_core::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Cursor<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        if self.bytes.len() < self.pos + 4 {
            bail!("truncated IDX file {}: header ends at byte {}", self.name, self.bytes.len());
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn payload(&self, expected: usize) -> Result<&'a [u8]> {
        let body = &self.bytes[self.pos..];
        if body.len() != expected {
            bail!(
                "truncated IDX file {}: expected {expected} payload bytes, found {}",
                self.name,
                body.len()
            );
        }
        Ok(body)
    }
}

/// Loads an image/label IDX pair into a dataset with pixels in `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = fs::read(images_path)
        .with_context(|| format!("reading IDX images from {}", images_path.display()))?;
    let label_bytes = fs::read(labels_path)
        .with_context(|| format!("reading IDX labels from {}", labels_path.display()))?;

    let iname = images_path.display().to_string();
    let mut img = Cursor { bytes: &image_bytes, pos: 0, name: &iname };
    let magic = img.u32_be()?;
    if magic != IMAGE_MAGIC {
        bail!("magic mismatch in {iname}: expected {IMAGE_MAGIC:#010x}, found {magic:#010x}");
    }
    let n = img.u32_be()? as usize;
    let h = img.u32_be()? as usize;
    let w = img.u32_be()? as usize;
    let pixels = img.payload(n * h * w)?;

    let lname = labels_path.display().to_string();
    let mut lab = Cursor { bytes: &label_bytes, pos: 0, name: &lname };
    let magic = lab.u32_be()?;
    if magic != LABEL_MAGIC {
        bail!("magic mismatch in {lname}: expected {LABEL_MAGIC:#010x}, found {magic:#010x}");
    }
    let n_labels = lab.u32_be()? as usize;
    if n_labels != n {
        bail!("count mismatch: {iname} declares {n} images but {lname} declares {n_labels} labels");
    }
    let raw_labels = lab.payload(n)?;

    if n == 0 {
        bail!("IDX pair {iname} / {lname} is empty");
    }
    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Tensor::new(data, vec![n, h * w])?;
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().unwrap() + 1;
    Ok(Dataset::new(images, labels, classes, Some((h, w)))?)
}

/// Writes a dataset back out as an IDX pair, quantizing pixels to bytes.
/// Datasets without explicit image dimensions are written as 1 x features.
pub fn save_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let n = dataset.len();
    let (h, w) = dataset.image_dims().unwrap_or((1, dataset.features()));
    if h * w != dataset.features() {
        bail!("image dims {h}x{w} do not cover {} features", dataset.features());
    }
    if dataset.classes() > 256 {
        bail!("IDX labels are single bytes; {} classes do not fit", dataset.classes());
    }

    let mut image_bytes = Vec::with_capacity(16 + n * h * w);
    image_bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(h as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in dataset.images().data() {
        image_bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }

    let mut label_bytes = Vec::with_capacity(8 + n);
    label_bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    label_bytes.extend(dataset.labels().iter().map(|&l| l as u8));

    fs::write(images_path, &image_bytes)
        .with_context(|| format!("writing IDX images to {}", images_path.display()))?;
    fs::write(labels_path, &label_bytes)
        .with_context(|| format!("writing IDX labels to {}", labels_path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use sidp_core::data::synthetic_classification;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("img");
        let labels = dir.path().join("lab");
        let ds = synthetic_classification(50, 12, 4, 7).unwrap();

        save_idx(&ds, &images, &labels).unwrap();
        let loaded = load_idx(&images, &labels).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.labels(), ds.labels());
        // Synthetic pixels sit on the 8-bit grid, so values survive exactly.
        assert_eq!(loaded.images().data(), ds.images().data());

        let images2 = dir.path().join("img2");
        let labels2 = dir.path().join("lab2");
        save_idx(&loaded, &images2, &labels2).unwrap();
        assert_eq!(fs::read(&images).unwrap(), fs::read(&images2).unwrap());
        assert_eq!(fs::read(&labels).unwrap(), fs::read(&labels2).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn any_byte_image_round_trips(
            n in 1usize..12,
            h in 1usize..6,
            w in 1usize..6,
            seed in 0u64..1000,
        ) {
            let mut rng = sidp_core::rng::RngStream::seed_from(seed);
            let pixels: Vec<f64> = (0..n * h * w)
                .map(|_| rng.below(256) as f64 / 255.0)
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.below(10) as usize).collect();
            let classes = labels.iter().max().unwrap() + 1;
            let images = Tensor::new(pixels, vec![n, h * w]).unwrap();
            let ds = Dataset::new(images, labels, classes, Some((h, w))).unwrap();

            let dir = tempfile::tempdir().unwrap();
            let ip = dir.path().join("i");
            let lp = dir.path().join("l");
            save_idx(&ds, &ip, &lp).unwrap();
            let loaded = load_idx(&ip, &lp).unwrap();
            proptest::prop_assert_eq!(loaded.images().data(), ds.images().data());
            proptest::prop_assert_eq!(loaded.labels(), ds.labels());
            proptest::prop_assert_eq!(loaded.image_dims(), Some((h, w)));
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("img");
        let labels = dir.path().join("lab");
        let ds = synthetic_classification(10, 4, 2, 1).unwrap();
        save_idx(&ds, &images, &labels).unwrap();

        // Labels handed over as images: wrong magic.
        let err = load_idx(&labels, &images).unwrap_err();
        assert!(err.to_string().contains("magic mismatch"), "{err}");
    }

    #[test]
    fn truncation_and_count_mismatch_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("img");
        let labels = dir.path().join("lab");
        let ds = synthetic_classification(10, 4, 2, 1).unwrap();
        save_idx(&ds, &images, &labels).unwrap();

        let empty = dir.path().join("empty");
        fs::write(&empty, b"").unwrap();
        let err = load_idx(&empty, &labels).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut clipped = fs::read(&images).unwrap();
        clipped.truncate(clipped.len() - 3);
        let short = dir.path().join("short");
        fs::write(&short, &clipped).unwrap();
        let err = load_idx(&short, &labels).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let other = synthetic_classification(9, 4, 2, 1).unwrap();
        let labels9 = dir.path().join("lab9");
        let img9 = dir.path().join("img9");
        save_idx(&other, &img9, &labels9).unwrap();
        let err = load_idx(&images, &labels9).unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{err}");
    }
}
