//! Seeded multilayer perceptrons and their checkpoint format.
//!
//! Checkpoint layout, all integers little-endian `u64`, floats little-endian
//! IEEE-754 `f64`:
//!
//! ```text
//! "DCKD1"                       5-byte magic
//! seed, epoch, config_hash      metadata
//! n, size_0 .. size_{n-1}       layer sizes (input, hidden.., classes)
//! m, param_0 .. param_{m-1}     per layer: weight (fan_in × fan_out, row-major), then bias
//! sha256                        32-byte digest of everything above
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Matrix, Tensor};
use crate::error::{bail, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DCKD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// A chain of affine layers, ReLU between them, raw logits out.
#[derive(Debug)]
pub struct Model {
    layers: Vec<Layer>,
    sizes: Vec<usize>,
    seed: u64,
}

impl Model {
    /// Model from explicit `(weight, bias, activation)` triples.
    pub fn from_layers(layers: Vec<(Matrix, Matrix, Activation)>, seed: u64) -> Result<Model> {
        let Some(first) = layers.first() else {
            bail!(InvalidArgument, "model needs at least one layer");
        };
        let mut sizes = vec![first.0.nrows()];
        for (i, (w, b, _)) in layers.iter().enumerate() {
            if w.nrows() != *sizes.last().unwrap() {
                bail!(Shape, "layer {i}: weight has {} rows, expected {}", w.nrows(), sizes.last().unwrap());
            }
            if b.dim() != (1, w.ncols()) {
                bail!(Shape, "layer {i}: bias {:?}, expected (1, {})", b.dim(), w.ncols());
            }
            sizes.push(w.ncols());
        }
        if layers.last().unwrap().2 != Activation::None {
            bail!(InvalidArgument, "final layer must not have an activation");
        }
        let layers = layers
            .into_iter()
            .map(|(w, b, a)| Layer { weight: Tensor::param(w), bias: Tensor::param(b), activation: a })
            .collect();
        Ok(Model { layers, sizes, seed })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Trainable tensors in layer order (weight, bias, weight, bias, ...).
    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]).collect()
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.sizes)
    }

    /// Flat copy of all parameters in checkpoint order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.value().iter());
            out.extend(l.bias.value().iter());
        }
        out
    }

    /// Independent copy with its own parameter tensors.
    pub fn deep_clone(&self) -> Model {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer { weight: Tensor::param(l.weight.to_array()), bias: Tensor::param(l.bias.to_array()), activation: l.activation })
            .collect();
        Model { layers, sizes: self.sizes.clone(), seed: self.seed }
    }

    /// Overwrites this model's parameters with another model's values.
    pub fn copy_params_from(&self, other: &Model) -> Result<()> {
        if self.sizes != other.sizes {
            bail!(Shape, "copy_params_from: {:?} vs {:?}", self.sizes, other.sizes);
        }
        for (dst, src) in self.params().iter().zip(other.params()) {
            dst.set_value(src.to_array())?;
        }
        Ok(())
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            bail!(Shape, "batch has {} features, model expects {}", batch.ncols(), self.input_dim());
        }
        Ok(())
    }

    /// Differentiable logits for a batch (rows are samples).
    pub fn forward(&self, batch: &Matrix) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut h = Tensor::constant(batch.clone());
        for l in &self.layers {
            h = h.matmul(&l.weight)?.add_bias(&l.bias)?;
            if l.activation == Activation::Relu {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Logits without building a graph. Bit-identical to `forward`.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut h = batch.clone();
        for l in &self.layers {
            h = h.dot(&*l.weight.value()) + &*l.bias.value();
            if l.activation == Activation::Relu {
                h.mapv_inplace(|x| x.max(0.0));
            }
        }
        Ok(h)
    }

    pub fn to_checkpoint(&self, epoch: u64, config_hash: u64) -> Checkpoint {
        Checkpoint { sizes: self.sizes.clone(), seed: self.seed, epoch, config_hash, params: self.flat_params() }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        ckpt.validate()?;
        let mut offset = 0;
        let n_layers = ckpt.sizes.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (i, pair) in ckpt.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = Array2::from_shape_vec((fan_in, fan_out), ckpt.params[offset..offset + fan_in * fan_out].to_vec())
                .expect("sized by param_count");
            offset += fan_in * fan_out;
            let b = Array2::from_shape_vec((1, fan_out), ckpt.params[offset..offset + fan_out].to_vec())
                .expect("sized by param_count");
            offset += fan_out;
            let act = if i + 1 == n_layers { Activation::None } else { Activation::Relu };
            layers.push((w, b, act));
        }
        Model::from_layers(layers, ckpt.seed)
    }
}

/// `Σ (fan_in·fan_out + fan_out)` over consecutive size pairs.
pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        bail!(InvalidArgument, "need at least input and output sizes, got {sizes:?}");
    }
    if sizes.contains(&0) {
        bail!(InvalidArgument, "layer sizes must be >= 1, got {sizes:?}");
    }
    Ok(())
}

/// Builds an MLP with ReLU hidden layers.
///
/// Weights are drawn from `U(−√(6/fan_in), √(6/fan_in))` with a ChaCha8 stream
/// seeded by `seed`; biases start at zero.
pub fn build_mlp(sizes: &[usize], seed: u64) -> Result<Model> {
    validate_sizes(sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = sizes.len() - 1;
    let layers = sizes
        .windows(2)
        .enumerate()
        .map(|(i, p)| {
            let (fan_in, fan_out) = (p[0], p[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..bound));
            let act = if i + 1 == n_layers { Activation::None } else { Activation::Relu };
            (w, Array2::zeros((1, fan_out)), act)
        })
        .collect();
    Model::from_layers(layers, seed)
}

/// Plain-data model snapshot; the on-disk form of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub sizes: Vec<usize>,
    pub seed: u64,
    pub epoch: u64,
    pub config_hash: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    fn validate(&self) -> Result<()> {
        validate_sizes(&self.sizes).map_err(|e| Error::Format(e.to_string()))?;
        let expected = param_count(&self.sizes);
        if self.params.len() != expected {
            bail!(Format, "topology {:?} needs {expected} parameters, found {}", self.sizes, self.params.len());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + 8 * (self.sizes.len() + self.params.len()));
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [self.seed, self.epoch, self.config_hash, self.sizes.len() as u64] {
            buf.write_u64::<LittleEndian>(v).unwrap();
        }
        for &s in &self.sizes {
            buf.write_u64::<LittleEndian>(s as u64).unwrap();
        }
        buf.write_u64::<LittleEndian>(self.params.len() as u64).unwrap();
        for &p in &self.params {
            buf.write_f64::<LittleEndian>(p).unwrap();
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        const DIGEST: usize = 32;
        if bytes.len() < CHECKPOINT_MAGIC.len() + DIGEST || &bytes[..5] != CHECKPOINT_MAGIC {
            bail!(Format, "not a checkpoint (bad magic or too short)");
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
        if Sha256::digest(body).as_slice() != digest {
            bail!(Format, "checkpoint digest mismatch (truncated or corrupt)");
        }
        let mut r = Cursor::new(&body[5..]);
        let truncated = |_| Error::Format("checkpoint body truncated".into());
        let seed = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let epoch = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let config_hash = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let n = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        if n > body.len() / 8 {
            bail!(Format, "implausible topology length {n}");
        }
        let sizes = (0..n)
            .map(|_| r.read_u64::<LittleEndian>().map(|v| v as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(truncated)?;
        let m = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        if m > body.len() / 8 {
            bail!(Format, "implausible parameter count {m}");
        }
        let mut params = vec![0.0; m];
        r.read_f64_into::<LittleEndian>(&mut params).map_err(truncated)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            bail!(Format, "{} trailing bytes after parameter block", rest.len());
        }
        let ckpt = Checkpoint { sizes, seed, epoch, config_hash, params };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Rejects a checkpoint whose topology differs from `sizes`.
    pub fn expect_sizes(&self, sizes: &[usize]) -> Result<()> {
        if self.sizes != sizes {
            bail!(Format, "checkpoint topology {:?} does not match expected {:?}", self.sizes, sizes);
        }
        Ok(())
    }

    pub fn expect_config_hash(&self, hash: u64) -> Result<()> {
        if self.config_hash != hash {
            bail!(Format, "checkpoint config hash {:016x} does not match expected {hash:016x}", self.config_hash);
        }
        Ok(())
    }
}

pub fn save_checkpoint(model: &Model, epoch: u64, config_hash: u64, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model.to_checkpoint(epoch, config_hash).to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::from_bytes(&fs::read(path)?)?;
    Ok((Model::from_checkpoint(&ckpt)?, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn deterministic_build() {
        let a = build_mlp(&[4, 8, 3], 5).unwrap();
        let b = build_mlp(&[4, 8, 3], 5).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
    }

    #[test]
    fn distinct_seeds_differ() {
        let ms: Vec<_> = (0..3).map(|i| build_mlp(&[2, 16, 10], 7 + i).unwrap().flat_params()).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let max_diff = ms[i].iter().zip(&ms[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(max_diff > 0.0);
            }
        }
    }

    #[test]
    fn parameter_counting() {
        assert_eq!(build_mlp(&[2, 3], 0).unwrap().param_count(), 9);
        let m = build_mlp(&[2, 64, 64, 10], 0).unwrap();
        assert_eq!(m.param_count(), 2 * 64 + 64 + 64 * 64 + 64 + 64 * 10 + 10);
        assert_eq!(m.flat_params().len(), m.param_count());
    }

    #[test]
    fn init_respects_bound() {
        let m = build_mlp(&[784, 64, 10], 3).unwrap();
        let first = m.layers()[0].weight.value();
        let bound = (6.0f64 / 784.0).sqrt();
        assert!((bound - 0.0875).abs() < 1e-4);
        assert!(first.iter().all(|w| w.abs() < bound));
        assert!(m.layers().iter().all(|l| l.bias.value().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn invalid_sizes() {
        assert!(matches!(build_mlp(&[3], 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_mlp(&[3, 0, 2], 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn identity_and_zero_models() {
        let id = Model::from_layers(vec![(Array2::eye(3), Array2::zeros((1, 3)), Activation::None)], 0).unwrap();
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
        assert_eq!(id.forward(&x).unwrap().to_array(), x);

        let bias = array![[0.5, -1.0]];
        let zero = Model::from_layers(vec![(Array2::zeros((3, 2)), bias.clone(), Activation::None)], 0).unwrap();
        let y = zero.forward(&x).unwrap().to_array();
        for row in y.rows() {
            assert_eq!(row, bias.row(0));
        }
    }

    #[test]
    fn forward_matches_hand_composition() {
        let m = build_mlp(&[2, 4, 3], 42).unwrap();
        let x = array![[0.3, -1.2], [2.0, 0.5], [-0.7, -0.1]];
        let got = m.forward(&x).unwrap().to_array();
        // Oracle: explicit loops over the raw parameter arrays.
        let w1 = m.layers()[0].weight.to_array();
        let w2 = m.layers()[1].weight.to_array();
        for r in 0..3 {
            let mut h = [0.0; 4];
            for j in 0..4 {
                let mut s = 0.0;
                for i in 0..2 {
                    s += x[[r, i]] * w1[[i, j]];
                }
                h[j] = s.max(0.0);
            }
            for c in 0..3 {
                let mut s = 0.0;
                for j in 0..4 {
                    s += h[j] * w2[[j, c]];
                }
                assert!((got[[r, c]] - s).abs() < 1e-12);
            }
        }
        assert_eq!(m.predict(&x).unwrap(), got);
    }

    #[test]
    fn forward_dimension_mismatch() {
        let m = build_mlp(&[2, 3], 0).unwrap();
        assert!(matches!(m.forward(&Array2::zeros((1, 3))), Err(Error::Shape(_))));
        assert!(matches!(m.predict(&Array2::zeros((1, 3))), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = build_mlp(&[2, 5, 3], 9).unwrap();
        save_checkpoint(&m, 12, 0xfeed, &path).unwrap();
        let (back, ckpt) = load_checkpoint(&path).unwrap();
        assert_eq!((ckpt.seed, ckpt.epoch, ckpt.config_hash), (9, 12, 0xfeed));
        let x = array![[0.1, 0.2], [-3.0, 1.0]];
        assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert!(ckpt.expect_config_hash(0xfeed).is_ok());
        assert!(matches!(ckpt.expect_config_hash(1), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_layout_is_stable() {
        let m = Model::from_layers(vec![(array![[1.0, 2.0]], array![[0.5, -0.5]], Activation::None)], 3).unwrap();
        let bytes = m.to_checkpoint(1, 2).to_bytes();
        assert_eq!(&bytes[..5], b"DCKD1");
        assert_eq!(u64::from_le_bytes(bytes[5..13].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[29..37].try_into().unwrap()), 2); // topology length
        assert_eq!(u64::from_le_bytes(bytes[53..61].try_into().unwrap()), 4); // param count
        assert_eq!(f64::from_le_bytes(bytes[61..69].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 5 + 8 * 4 + 8 * 2 + 8 + 8 * 4 + 32);
    }

    #[test]
    fn truncated_or_corrupt_checkpoint() {
        let bytes = build_mlp(&[2, 3], 1).unwrap().to_checkpoint(0, 0).to_bytes();
        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_topology_reports_dimensions() {
        let ckpt = build_mlp(&[2, 3], 1).unwrap().to_checkpoint(0, 0);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        let err = back.expect_sizes(&[2, 4]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");

        // a body whose parameter block does not fit its topology
        let bad = Checkpoint { sizes: vec![2, 4], params: ckpt.params.clone(), ..ckpt.clone() };
        let mut raw = bad.to_bytes();
        raw.truncate(raw.len() - 32);
        let digest = Sha256::digest(&raw);
        raw.extend_from_slice(&digest);
        assert!(matches!(Checkpoint::from_bytes(&raw), Err(Error::Format(_))));
    }
}
