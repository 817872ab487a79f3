//! Dataset provisioning: synthetic Gaussian blobs, IDX files, seeded batching.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Matrix;
use crate::error::{bail, Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Radius of the sphere blob centers are drawn on.
pub const BLOB_RADIUS: f64 = 3.0;

/// Class pairs whose blob centers sit `0.5·spread` apart.
pub const OVERLAPPING_PAIRS: [(usize, usize); 2] = [(0, 1), (2, 3)];

/// Pixel statistics of an IDX-backed dataset, kept so it can be written back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdxMeta {
    pub rows: usize,
    pub cols: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub idx_meta: Option<IdxMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        let ds = Dataset { features, labels, num_classes, idx_meta: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.labels.len() {
            bail!(InvalidInput, "{} feature rows but {} labels", self.features.nrows(), self.labels.len());
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            bail!(InvalidInput, "label {bad} out of range for {} classes", self.num_classes);
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            bail!(InvalidInput, "non-finite feature value");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Dataset> {
        self.num_classes = num_classes;
        self.validate()?;
        Ok(self)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            idx_meta: self.idx_meta,
        }
    }

    /// Rows whose label is `class`.
    pub fn class_rows(&self, class: usize) -> Matrix {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
        self.features.select(Axis(0), &idx)
    }

    /// Seeded shuffle, then the first `round(n·val_fraction)` samples become
    /// the validation split. Returns `(train, val)`.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            bail!(InvalidArgument, "val_fraction must lie in [0, 1), got {val_fraction}");
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        let (val, train) = order.split_at(n_val);
        Ok((self.subset(train), self.subset(val)))
    }

    /// CSV with header `f0,...,f{d-1},label`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(csv_err)?;
        for (row, label) in self.features.rows().into_iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Gaussian blobs, one per class, ordered class by class.
///
/// Centers are random points on the sphere of radius 3. For each pair in
/// [`OVERLAPPING_PAIRS`] the second class is re-centered `0.5·spread` away from
/// the first, so those classes genuinely share features.
pub fn gen_blobs(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        bail!(InvalidArgument, "num_classes, per_class and dim must be >= 1");
    }
    if !(spread.is_finite() && spread > 0.0) {
        bail!(InvalidArgument, "spread must be positive, got {spread}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> =
        (0..num_classes).map(|_| unit_vector(&mut rng, dim).into_iter().map(|x| x * BLOB_RADIUS).collect()).collect();
    for (a, b) in OVERLAPPING_PAIRS {
        if b < num_classes {
            let dir = unit_vector(&mut rng, dim);
            centers[b] = centers[a].iter().zip(dir).map(|(c, d)| c + 0.5 * spread * d).collect();
        }
    }
    let n = num_classes * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for i in 0..per_class {
            let r = c * per_class + i;
            for (j, &mu) in center.iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                features[[r, j]] = mu + spread * z;
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, num_classes)
}

fn read_idx_header(r: &mut Cursor<&[u8]>, expected_magic: u32, what: &str) -> Result<Vec<usize>> {
    let magic = r.read_u32::<BigEndian>().map_err(|_| Error::Format(format!("{what}: file too short")))?;
    if magic != expected_magic {
        bail!(Format, "{what}: bad magic {magic:#010x}, expected {expected_magic:#010x}");
    }
    let ndim = (magic & 0xff) as usize;
    (0..ndim)
        .map(|_| r.read_u32::<BigEndian>().map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|_| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image/label pair from memory. See [`load_idx`].
pub fn parse_idx(images: &[u8], labels: &[u8], limit: Option<usize>) -> Result<Dataset> {
    let mut ri = Cursor::new(images);
    let dims = read_idx_header(&mut ri, IDX_IMAGES_MAGIC, "images")?;
    let (n_img, rows, cols) = (dims[0], dims[1], dims[2]);
    let mut rl = Cursor::new(labels);
    let n_lab = read_idx_header(&mut rl, IDX_LABELS_MAGIC, "labels")?[0];
    if n_img != n_lab {
        bail!(Format, "{n_img} images but {n_lab} labels");
    }
    let n = limit.map_or(n_img, |l| l.min(n_img));
    let pixels = rows * cols;

    let img_body = &images[ri.position() as usize..];
    let lab_body = &labels[rl.position() as usize..];
    if img_body.len() < n * pixels {
        bail!(Format, "image data truncated: need {} bytes, have {}", n * pixels, img_body.len());
    }
    if lab_body.len() < n {
        bail!(Format, "label data truncated: need {n} bytes, have {}", lab_body.len());
    }

    let mut features = Array2::from_shape_vec((n, pixels), img_body[..n * pixels].iter().map(|&b| b as f64 / 255.0).collect())
        .expect("sized above");
    let (mean, std) = if n == 0 {
        (0.0, 1.0)
    } else {
        let count = features.len() as f64;
        let mean = features.sum() / count;
        let var = features.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / count;
        (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
    };
    features.mapv_inplace(|x| (x - mean) / std);
    let labels: Vec<usize> = lab_body[..n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset { features, labels, num_classes, idx_meta: Some(IdxMeta { rows, cols, mean, std }) })
}

/// Reads an IDX image file (magic `0x00000803`) and label file (magic
/// `0x00000801`). Pixels are scaled to `[0, 1]`, then standardized with the
/// mean and standard deviation of the loaded subset. `limit` keeps the first
/// `limit` samples.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, limit: Option<usize>) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx(&images, &labels, limit)
}

/// Serializes an IDX-backed dataset back to `(images, labels)` bytes.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let Some(meta) = ds.idx_meta else {
        bail!(InvalidArgument, "dataset was not loaded from IDX; pixel statistics unknown");
    };
    let n = ds.len();
    let mut images = Vec::with_capacity(16 + n * meta.rows * meta.cols);
    images.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    for d in [n, meta.rows, meta.cols] {
        images.write_u32::<BigEndian>(d as u32)?;
    }
    for &x in ds.features.iter() {
        let px = ((x * meta.std + meta.mean) * 255.0).round().clamp(0.0, 255.0);
        images.push(px as u8);
    }
    let mut labels = Vec::with_capacity(8 + n);
    labels.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    labels.write_u32::<BigEndian>(n as u32)?;
    for &l in &ds.labels {
        if l > 255 {
            bail!(InvalidInput, "label {l} does not fit in an IDX byte");
        }
        labels.push(l as u8);
    }
    Ok((images, labels))
}

/// Shuffled mini-batches for one epoch.
///
/// The permutation comes from a ChaCha8 stream keyed by `seed` and selected by
/// `epoch`; the last batch may be short.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        bail!(InvalidArgument, "batch_size must be >= 1");
    }
    if ds.is_empty() {
        bail!(InvalidArgument, "cannot batch an empty dataset");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|idx| Batch {
            features: ds.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_deterministic() {
        let a = gen_blobs(4, 10, 3, 0.4, 1).unwrap();
        let b = gen_blobs(4, 10, 3, 0.4, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_blobs(4, 10, 3, 0.4, 2).unwrap());
    }

    #[test]
    fn blobs_collapse_to_centers() {
        let ds = gen_blobs(5, 1, 3, 1e-12, 3).unwrap();
        // same seed with a tiny spread: each sample is its center
        let tiny = gen_blobs(5, 1, 3, 1e-15, 3).unwrap();
        for (a, b) in ds.features.iter().zip(tiny.features.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (c, row) in ds.features.rows().into_iter().enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if c != 1 && c != 3 {
                assert!((norm - BLOB_RADIUS).abs() < 1e-9);
            }
        }
        // paired classes collapse onto their partner's center
        for (a, b) in OVERLAPPING_PAIRS {
            for j in 0..3 {
                assert!((ds.features[[a, j]] - ds.features[[b, j]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn blobs_paired_offset_is_half_spread() {
        let spread = 0.4;
        // with per_class large, class means approximate centers
        let ds = gen_blobs(4, 4000, 2, spread, 7).unwrap();
        let mean = |c: usize| ds.class_rows(c).mean_axis(Axis(0)).unwrap();
        let d = (&mean(0) - &mean(1)).mapv(|x| x * x).sum().sqrt();
        assert!((d - 0.5 * spread).abs() < 0.05, "{d}");
    }

    #[test]
    fn blobs_invalid() {
        assert!(gen_blobs(0, 1, 1, 0.1, 0).is_err());
        assert!(gen_blobs(2, 0, 1, 0.1, 0).is_err());
        assert!(gen_blobs(2, 1, 0, 0.1, 0).is_err());
        assert!(gen_blobs(2, 1, 1, 0.0, 0).is_err());
    }

    fn idx_fixture(magic_labels: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 4, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(&[0, 255, 0, 255, 255, 255, 0, 0, 51, 102, 153, 204, 0, 0, 0, 0]);
        let mut lab = Vec::new();
        for v in [magic_labels, 4] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(&[3, 1, 4, 1]);
        (img, lab)
    }

    #[test]
    fn idx_hand_built_fixture() {
        let (img, lab) = idx_fixture(IDX_LABELS_MAGIC);
        let ds = parse_idx(&img, &lab, None).unwrap();
        assert_eq!(ds.features.dim(), (4, 4));
        assert_eq!(ds.labels, vec![3, 1, 4, 1]);
        assert_eq!(ds.num_classes, 5);
        // Oracle: scale to [0,1], then global mean / population std.
        let raw = [0., 255., 0., 255., 255., 255., 0., 0., 51., 102., 153., 204., 0., 0., 0., 0.];
        let scaled: Vec<f64> = raw.iter().map(|v| v / 255.0).collect();
        let mean = scaled.iter().sum::<f64>() / 16.0;
        let std = (scaled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0).sqrt();
        for (got, s) in ds.features.iter().zip(&scaled) {
            assert!((got - (s - mean) / std).abs() < 1e-12);
        }
        let col_mean = ds.features.sum() / 16.0;
        assert!(col_mean.abs() < 1e-12);
    }

    #[test]
    fn idx_errors() {
        let (img, lab) = idx_fixture(0x0000_0802);
        assert!(matches!(parse_idx(&img, &lab, None), Err(Error::Format(_))));
        let (img, mut lab) = idx_fixture(IDX_LABELS_MAGIC);
        lab[7] = 3; // declares 3 labels for 4 images
        assert!(matches!(parse_idx(&img, &lab, None), Err(Error::Format(_))));
        let (img, lab) = idx_fixture(IDX_LABELS_MAGIC);
        assert!(matches!(parse_idx(&img[..20], &lab, None), Err(Error::Format(_))));
    }

    #[test]
    fn idx_limit() {
        let (img, lab) = idx_fixture(IDX_LABELS_MAGIC);
        let ds = parse_idx(&img, &lab, Some(2)).unwrap();
        assert_eq!(ds.labels, vec![3, 1]);
        let empty = parse_idx(&img, &lab, Some(0)).unwrap();
        assert!(empty.is_empty());
        assert!(batches(&empty, 4, 0, 0).is_err());
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_fixture(IDX_LABELS_MAGIC);
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        fs::write(&ip, &img).unwrap();
        fs::write(&lp, &lab).unwrap();
        let ds = load_idx(&ip, &lp, Some(3)).unwrap();
        let (img2, lab2) = encode_idx(&ds).unwrap();
        let back = parse_idx(&img2, &lab2, None).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let ds = gen_blobs(5, 1, 2, 0.1, 0).unwrap();
        let bs = batches(&ds, 2, 9, 0).unwrap();
        assert_eq!(bs.iter().map(|b| b.labels.len()).collect::<Vec<_>>(), vec![2, 2, 1]);
        assert_eq!(bs, batches(&ds, 2, 9, 0).unwrap());
        assert_ne!(bs, batches(&ds, 2, 9, 1).unwrap());

        let one = batches(&ds, 10, 9, 3).unwrap();
        assert_eq!(one.len(), 1);
        let mut seen = one[0].labels.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert!(batches(&ds, 0, 0, 0).is_err());
    }

    #[test]
    fn every_sample_once_per_epoch() {
        let ds = gen_blobs(3, 7, 2, 0.5, 4).unwrap();
        for epoch in 0..5 {
            let mut rows: Vec<Vec<u64>> = batches(&ds, 4, 1, epoch)
                .unwrap()
                .iter()
                .flat_map(|b| b.features.rows().into_iter().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect::<Vec<_>>())
                .collect();
            let mut all: Vec<Vec<u64>> =
                ds.features.rows().into_iter().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
            rows.sort();
            all.sort();
            assert_eq!(rows, all);
        }
    }

    #[test]
    fn split_partitions() {
        let ds = gen_blobs(4, 25, 2, 0.5, 4).unwrap();
        let (train, val) = ds.split(0.2, 3).unwrap();
        assert_eq!((train.len(), val.len()), (80, 20));
        assert_eq!(ds.split(0.2, 3).unwrap().1, val);
        assert!(ds.split(1.0, 0).is_err());
    }

    #[test]
    fn csv_export() {
        let ds = Dataset::new(ndarray::array![[0.5, -1.25], [2.0, 0.0]], vec![1, 0], 2).unwrap();
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "f0,f1,label\n0.5,-1.25,1\n2,0,0\n");
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(Array2::zeros((2, 1)), vec![0], 2).is_err());
        assert!(Dataset::new(Array2::zeros((1, 1)), vec![2], 2).is_err());
        assert!(Dataset::new(ndarray::array![[f64::NAN]], vec![0], 1).is_err());
    }
}
