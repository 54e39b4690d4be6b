//! Datasets, synthetic data, Poisson lot sampling, and public batches.
//!
//! A [`Dataset`] stores flattened examples with values in `[0, 1]` plus
//! integer labels. The synthetic generator places class centers on scaled
//! axis corners of the unit box and adds norm-capped noise, which makes the
//! data provably linearly separable with a known margin. [`LotSampler`]
//! implements per-example Poisson inclusion (the sampling the privacy
//! accountant assumes), and [`PublicBatch`] carries a small set of rows that
//! are content-hash-verified to be disjoint from the training set.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Labelled examples with features flattened to `[n, features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    /// `(height, width)` when the features are a single-channel image.
    image_dims: Option<(usize, usize)>,
}

impl Dataset {
    /// Validates value range, label range, and counts.
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
        image_dims: Option<(usize, usize)>,
    ) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 2 {
            return Err(Error::data(format!("images must be [n, features], got {shape:?}")));
        }
        let (n, features) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(Error::data(format!("{} labels for {n} examples", labels.len())));
        }
        if classes == 0 {
            return Err(Error::data("dataset needs at least one class"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::data(format!("label {bad} out of range for {classes} classes")));
        }
        if let Some((h, w)) = image_dims {
            if h * w != features {
                return Err(Error::data(format!(
                    "image dims {h}x{w} do not match {features} features"
                )));
            }
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::data("feature values must lie in [0, 1]"));
        }
        Ok(Dataset { images, labels, classes, image_dims })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.image_dims
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Gathers the given examples into a `[b, ...example_shape]` batch.
    pub fn gather(&self, indices: &[usize], example_shape: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let features: usize = example_shape.iter().product();
        if features != self.features() {
            return Err(Error::shape(format!(
                "example shape {example_shape:?} does not match {} features",
                self.features()
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::arg(format!("index {i} out of range for {}", self.len())));
            }
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(example_shape);
        Ok((Tensor::new(data, shape)?, labels))
    }

    /// SHA-256 of one example's feature bytes (little-endian `f64`s).
    pub fn row_hash(&self, i: usize) -> [u8; 32] {
        hash_row(self.row(i))
    }
}

/// Knobs for [`synthetic_classification_with`].
#[derive(Debug, Clone, Copy)]
pub struct SyntheticOpts {
    /// Distance from 0.1 to the "hot" coordinate of each class center.
    pub spread: f64,
    /// Euclidean cap on the per-example noise vector.
    pub noise_radius: f64,
}

impl Default for SyntheticOpts {
    fn default() -> Self {
        SyntheticOpts { spread: 0.8, noise_radius: 0.04 }
    }
}

/// Linearly separable Gaussian blobs in the unit box.
///
/// Class `k`'s center is `0.1` everywhere except coordinate `k`, which is
/// `0.1 + spread`. Noise is Gaussian with its Euclidean norm clipped to
/// `noise_radius`, so with the default options any two classes are separated
/// by a margin of at least 0.5 (centers are `0.8 * sqrt(2)` apart along a
/// two-sparse direction; the cap and the 1/255 value quantization together
/// cost less than 0.1). Requires `classes <= dims`.
pub fn synthetic_classification(n: usize, dims: usize, classes: usize, seed: u64) -> Result<Dataset> {
    synthetic_classification_with(n, dims, classes, seed, SyntheticOpts::default())
}

/// [`synthetic_classification`] with explicit geometry. Margins are only
/// guaranteed for the default options; larger `noise_radius` values give
/// harder, possibly overlapping classes.
pub fn synthetic_classification_with(
    n: usize,
    dims: usize,
    classes: usize,
    seed: u64,
    opts: SyntheticOpts,
) -> Result<Dataset> {
    if classes == 0 || dims == 0 || n == 0 {
        return Err(Error::arg("n, dims, and classes must all be positive"));
    }
    if classes > dims {
        return Err(Error::arg(format!(
            "center construction needs classes <= dims, got {classes} > {dims}"
        )));
    }
    if opts.spread <= 0.0 || opts.noise_radius < 0.0 {
        return Err(Error::arg("spread must be positive and noise_radius nonnegative"));
    }
    let mut rng = RngStream::seed_from(seed);

    // Balanced labels, then a shuffled example order.
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);

    let mut data = vec![0.0; n * dims];
    let mut labels = vec![0usize; n];
    let mut noise = vec![0.0; dims];
    for (slot, &i) in order.iter().enumerate() {
        let class = i % classes;
        labels[slot] = class;
        rng.fill_normal(&mut noise, 0.0, opts.noise_radius / 2.0);
        let norm = crate::tensor::l2_norm(&noise);
        let shrink = if norm > opts.noise_radius { opts.noise_radius / norm } else { 1.0 };
        let row = &mut data[slot * dims..(slot + 1) * dims];
        for (j, r) in row.iter_mut().enumerate() {
            let center = if j == class { 0.1 + opts.spread } else { 0.1 };
            let v = (center + noise[j] * shrink).clamp(0.0, 1.0);
            // Quantize to the 8-bit grid so file round-trips are exact.
            *r = (v * 255.0).round() / 255.0;
        }
    }
    Dataset::new(Tensor::new(data, vec![n, dims])?, labels, classes, None)
}

/// Per-example Poisson sampler: each draw includes every example
/// independently with probability `lot_size / dataset_size`.
#[derive(Debug, Clone)]
pub struct LotSampler {
    dataset_size: usize,
    lot_size: usize,
}

impl LotSampler {
    pub fn new(dataset_size: usize, lot_size: usize) -> Result<Self> {
        if dataset_size == 0 || lot_size == 0 {
            return Err(Error::arg("dataset and lot sizes must be positive"));
        }
        if lot_size > dataset_size {
            return Err(Error::arg(format!(
                "lot size {lot_size} exceeds dataset size {dataset_size}"
            )));
        }
        Ok(LotSampler { dataset_size, lot_size })
    }

    /// Inclusion probability `q = L / N`.
    pub fn sampling_rate(&self) -> f64 {
        self.lot_size as f64 / self.dataset_size as f64
    }

    /// Nominal lot size `L` (gradient sums are normalized by this, not by the
    /// realized lot size).
    pub fn nominal_lot(&self) -> usize {
        self.lot_size
    }

    /// Draws one lot; the result may be empty, which is a valid lot.
    pub fn draw(&self, rng: &mut RngStream) -> Vec<usize> {
        let q = self.sampling_rate();
        (0..self.dataset_size).filter(|_| rng.uniform() < q).collect()
    }
}

/// A small batch of public rows with content hashes proving disjointness
/// from the private training set.
///
/// Rows are stored sorted by content hash, so equal row sets build identical
/// batches no matter the order they arrive in; anything computed from the
/// batch (statistics, predictions, the batch hash) is order-independent.
#[derive(Debug, Clone)]
pub struct PublicBatch {
    rows: Tensor,
    row_hashes: Vec<[u8; 32]>,
    batch_hash: [u8; 32],
}

impl PublicBatch {
    /// Samples `m >= 2` rows from `source` whose contents do not appear in
    /// `train`; rows that collide with the training set are skipped.
    pub fn draw(source: &Dataset, train: &Dataset, m: usize, rng: &mut RngStream) -> Result<Self> {
        if m < 2 {
            return Err(Error::arg(format!("public batch needs at least 2 rows, got {m}")));
        }
        if source.features() != train.features() {
            return Err(Error::shape(format!(
                "public source has {} features, train set has {}",
                source.features(),
                train.features()
            )));
        }
        let train_hashes: alloc::collections::BTreeSet<[u8; 32]> =
            (0..train.len()).map(|i| train.row_hash(i)).collect();

        let mut order: Vec<usize> = (0..source.len()).collect();
        rng.shuffle(&mut order);

        let features = source.features();
        let mut data = Vec::with_capacity(m * features);
        let mut row_hashes = Vec::with_capacity(m);
        for &i in &order {
            if row_hashes.len() == m {
                break;
            }
            let h = source.row_hash(i);
            if train_hashes.contains(&h) || row_hashes.contains(&h) {
                continue;
            }
            data.extend_from_slice(source.row(i));
            row_hashes.push(h);
        }
        if row_hashes.len() < m {
            return Err(Error::PublicDataOverlap {
                context: format!(
                    "only {} of {m} requested public rows are disjoint from the training set",
                    row_hashes.len()
                ),
            });
        }
        Self::from_parts(data, row_hashes, features)
    }

    /// Builds a batch from explicit `[m, features]` rows, verifying they are
    /// pairwise distinct and disjoint from `train`.
    pub fn from_rows(rows: &Tensor, train: &Dataset) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(Error::shape(format!("public rows must be [m, features], got {:?}", rows.shape())));
        }
        let (m, features) = (rows.shape()[0], rows.shape()[1]);
        if m < 2 {
            return Err(Error::arg(format!("public batch needs at least 2 rows, got {m}")));
        }
        if features != train.features() {
            return Err(Error::shape(format!(
                "public rows have {features} features, train set has {}",
                train.features()
            )));
        }
        let train_hashes: alloc::collections::BTreeSet<[u8; 32]> =
            (0..train.len()).map(|i| train.row_hash(i)).collect();
        let mut row_hashes = Vec::with_capacity(m);
        for i in 0..m {
            let h = hash_row(rows.row(i));
            if train_hashes.contains(&h) {
                return Err(Error::PublicDataOverlap {
                    context: format!("public row {i} appears in the training set"),
                });
            }
            if row_hashes.contains(&h) {
                return Err(Error::arg(format!("public row {i} duplicates an earlier row")));
            }
            row_hashes.push(h);
        }
        Self::from_parts(rows.data().to_vec(), row_hashes, features)
    }

    /// Sorts rows into hash order and seals the batch.
    fn from_parts(data: Vec<f64>, row_hashes: Vec<[u8; 32]>, features: usize) -> Result<Self> {
        let m = row_hashes.len();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by_key(|&i| row_hashes[i]);
        let mut sorted_data = Vec::with_capacity(m * features);
        let mut sorted_hashes = Vec::with_capacity(m);
        for &i in &order {
            sorted_data.extend_from_slice(&data[i * features..(i + 1) * features]);
            sorted_hashes.push(row_hashes[i]);
        }
        let rows = Tensor::new(sorted_data, vec![m, features])?;
        let batch_hash = hash_batch(&sorted_hashes);
        Ok(PublicBatch { rows, row_hashes: sorted_hashes, batch_hash })
    }

    /// Number of public rows.
    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The public rows as a `[m, features]` tensor.
    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    /// Rows reshaped to `[m, ...example_shape]`.
    pub fn rows_shaped(&self, example_shape: &[usize]) -> Result<Tensor> {
        let features: usize = example_shape.iter().product();
        if features != self.rows.shape()[1] {
            return Err(Error::shape(format!(
                "example shape {example_shape:?} does not match {} public features",
                self.rows.shape()[1]
            )));
        }
        let mut shape = vec![self.len()];
        shape.extend_from_slice(example_shape);
        self.rows.clone().reshaped(&shape)
    }

    /// Errors if any public row's content appears in `train`.
    pub fn ensure_disjoint(&self, train: &Dataset) -> Result<()> {
        let train_hashes: alloc::collections::BTreeSet<[u8; 32]> =
            (0..train.len()).map(|i| train.row_hash(i)).collect();
        for (k, h) in self.row_hashes.iter().enumerate() {
            if train_hashes.contains(h) {
                return Err(Error::PublicDataOverlap {
                    context: format!("public row {k} appears in the training set"),
                });
            }
        }
        Ok(())
    }

    /// Hash of the whole batch, stable across runs for the same rows.
    pub fn batch_hash_hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for b in &self.batch_hash {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

fn hash_row(row: &[f64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for v in row {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().into()
}

fn hash_batch(row_hashes: &[[u8; 32]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for h in row_hashes {
        hasher.update(h);
    }
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_validation_catches_bad_inputs() {
        let imgs = Tensor::new(vec![0.1, 0.2, 0.3, 0.4], vec![2, 2]).unwrap();
        assert!(Dataset::new(imgs.clone(), vec![0], 2, None).is_err()); // count
        assert!(Dataset::new(imgs.clone(), vec![0, 5], 2, None).is_err()); // label range
        assert!(Dataset::new(imgs.clone(), vec![0, 1], 2, Some((3, 3))).is_err()); // dims
        let bad = Tensor::new(vec![0.1, 1.2, 0.3, 0.4], vec![2, 2]).unwrap();
        assert!(Dataset::new(bad, vec![0, 1], 2, None).is_err()); // range
        assert!(Dataset::new(imgs, vec![0, 1], 2, Some((1, 2))).is_ok());
    }

    #[test]
    fn synthetic_blobs_have_promised_margin() {
        let ds = synthetic_classification(300, 8, 4, 99).unwrap();
        assert_eq!(ds.len(), 300);
        // For every class pair (a, b), the separating hyperplane is
        // orthogonal to u = (e_a - e_b)/sqrt(2) and passes through the
        // centers' midpoint, whose projection onto u is 0 by symmetry. The
        // signed distance of a point x is therefore (x_a - x_b)/sqrt(2).
        for a in 0..4usize {
            for b in 0..a {
                let mut min_margin = f64::INFINITY;
                for i in 0..ds.len() {
                    let y = ds.labels()[i];
                    if y != a && y != b {
                        continue;
                    }
                    let row = ds.row(i);
                    let proj = (row[a] - row[b]) / core::f64::consts::SQRT_2;
                    let signed = if y == a { proj } else { -proj };
                    min_margin = min_margin.min(signed);
                }
                assert!(min_margin >= 0.5, "pair ({a},{b}) margin {min_margin}");
            }
        }
    }

    #[test]
    fn synthetic_values_sit_on_the_8bit_grid() {
        let ds = synthetic_classification(50, 4, 3, 7).unwrap();
        for v in ds.images().data() {
            let scaled = v * 255.0;
            assert!((scaled - scaled.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn synthetic_labels_are_balanced() {
        let ds = synthetic_classification(300, 5, 3, 11).unwrap();
        let mut counts = [0usize; 3];
        for &l in ds.labels() {
            counts[l] += 1;
        }
        assert_eq!(counts, [100, 100, 100]);
    }

    #[test]
    fn synthetic_rejects_more_classes_than_dims() {
        assert!(synthetic_classification(10, 2, 3, 1).is_err());
    }

    #[test]
    fn lot_sampler_hits_expected_size() {
        let sampler = LotSampler::new(1000, 100).unwrap();
        let mut rng = RngStream::seed_from(4);
        let mut total = 0usize;
        let draws = 200;
        for _ in 0..draws {
            let lot = sampler.draw(&mut rng);
            assert!(lot.iter().all(|&i| i < 1000));
            total += lot.len();
        }
        let mean = total as f64 / draws as f64;
        assert!((mean - 100.0).abs() < 5.0, "mean lot size {mean}");
    }

    #[test]
    fn empty_lots_are_possible_and_valid() {
        let sampler = LotSampler::new(50, 1).unwrap();
        let mut rng = RngStream::seed_from(5);
        let empties = (0..200).filter(|_| sampler.draw(&mut rng).is_empty()).count();
        assert!(empties > 0, "q = 0.02 should produce empty lots");
    }

    #[test]
    fn lot_sampler_rejects_oversized_lots() {
        assert!(LotSampler::new(10, 11).is_err());
        assert!(LotSampler::new(0, 1).is_err());
    }

    #[test]
    fn public_batch_is_disjoint_and_deterministic() {
        let train = synthetic_classification(100, 6, 3, 1).unwrap();
        let source = synthetic_classification(80, 6, 3, 2).unwrap();
        let mut rng = RngStream::seed_from(9);
        let pb = PublicBatch::draw(&source, &train, 10, &mut rng).unwrap();
        assert_eq!(pb.len(), 10);
        pb.ensure_disjoint(&train).unwrap();
        assert_eq!(pb.batch_hash_hex().len(), 64);

        let mut rng2 = RngStream::seed_from(9);
        let pb2 = PublicBatch::draw(&source, &train, 10, &mut rng2).unwrap();
        assert_eq!(pb.batch_hash_hex(), pb2.batch_hash_hex());
    }

    #[test]
    fn public_batch_rejects_rows_from_the_training_set() {
        let train = synthetic_classification(40, 6, 3, 1).unwrap();
        let mut rng = RngStream::seed_from(3);
        // Drawing from the training set itself leaves no disjoint rows.
        let err = PublicBatch::draw(&train, &train, 5, &mut rng).unwrap_err();
        assert!(matches!(err, Error::PublicDataOverlap { .. }));
        assert!(PublicBatch::draw(&train, &train, 1, &mut rng).is_err());
    }

    #[test]
    fn public_batch_row_order_is_canonical() {
        let train = synthetic_classification(40, 6, 3, 1).unwrap();
        let source = synthetic_classification(30, 6, 3, 2).unwrap();
        let mut rng = RngStream::seed_from(5);
        let pb = PublicBatch::draw(&source, &train, 6, &mut rng).unwrap();

        // Rebuilding from the same rows in reversed order produces an
        // identical batch, bit for bit.
        let m = pb.len();
        let features = pb.rows().shape()[1];
        let mut reversed = Vec::with_capacity(m * features);
        for i in (0..m).rev() {
            reversed.extend_from_slice(pb.rows().row(i));
        }
        let shuffled = Tensor::new(reversed, vec![m, features]).unwrap();
        let pb2 = PublicBatch::from_rows(&shuffled, &train).unwrap();
        assert_eq!(pb.rows().data(), pb2.rows().data());
        assert_eq!(pb.batch_hash_hex(), pb2.batch_hash_hex());

        // Duplicated rows are rejected.
        let mut doubled = pb.rows().row(0).to_vec();
        doubled.extend_from_slice(pb.rows().row(0));
        let dup = Tensor::new(doubled, vec![2, features]).unwrap();
        assert!(PublicBatch::from_rows(&dup, &train).is_err());
    }

    #[test]
    fn ensure_disjoint_detects_overlap() {
        let train = synthetic_classification(30, 6, 3, 1).unwrap();
        let source = synthetic_classification(30, 6, 3, 2).unwrap();
        let mut rng = RngStream::seed_from(4);
        let pb = PublicBatch::draw(&source, &train, 4, &mut rng).unwrap();
        // Against its own source the batch is, by construction, overlapping.
        assert!(pb.ensure_disjoint(&source).is_err());
    }
}
