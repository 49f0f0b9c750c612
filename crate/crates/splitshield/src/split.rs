//! The three-way split architecture and its forward pipeline.
//!
//! A [`SplitModel`] is a head (device), an encoder (server) and a classifier
//! (device). The device sends head outputs ("representations") up, the server
//! returns encoder outputs ("features"), and the device finishes with logits.

use crate::error::{Error, Result};
use crate::nn::{AvgPool2d, Conv2d, Flatten, Linear, Relu, Residual, Sequential};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Magic bytes of the checkpoint format.
pub const CHECKPOINT_MAGIC: &[u8; 6] = b"PSCKPT";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Derive an independent deterministic RNG stream from a base seed.
///
/// Streams keep component initialization, shuffling, negative sampling,
/// noise, and attacks decoupled: consuming draws in one stream never shifts
/// another.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// RNG stream ids used across the crate.
pub mod streams {
    pub const HEAD_INIT: u64 = 10;
    pub const ENCODER_INIT: u64 = 11;
    pub const CLASSIFIER_INIT: u64 = 12;
    pub const GENERATOR_INIT: u64 = 13;
    pub const AUX_CLASSIFIER_INIT: u64 = 14;
    pub const SHUFFLE: u64 = 20;
    pub const NEGATIVES: u64 = 21;
    pub const NOISE_DEVICE: u64 = 22;
    pub const NOISE_SERVER: u64 = 23;
    pub const ATTACK: u64 = 30;
}

/// Architecture scale of [`build_default_architecture`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchScale {
    /// Small CNN for CPU-scale runs on 16x16 or 32x32 inputs.
    Desk,
    /// Wider net mirroring a residual-network split: first conv on the
    /// device, the body on the server, last block plus linear head on the
    /// device.
    PaperLike,
}

/// The split network: three parameter groups and their forward maps.
pub struct SplitModel<T: Scalar> {
    pub head: Sequential<T>,
    pub encoder: Sequential<T>,
    pub classifier: Sequential<T>,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
}

impl<T: Scalar> Clone for SplitModel<T> {
    fn clone(&self) -> Self {
        SplitModel {
            head: self.head.clone(),
            encoder: self.encoder.clone(),
            classifier: self.classifier.clone(),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
        }
    }
}

/// One minibatch: inputs, labels and positions in the full dataset.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        let b = inputs.batch_size();
        if b == 0 {
            return Err(Error::input("batch must contain at least one sample"));
        }
        if labels.len() != b || indices.len() != b {
            return Err(Error::input(format!(
                "batch size mismatch: {} inputs, {} labels, {} indices",
                b,
                labels.len(),
                indices.len()
            )));
        }
        let mut seen = indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::input("batch indices must be unique"));
        }
        Ok(Batch {
            inputs,
            labels,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// An in-memory labeled dataset; the leading axis of `inputs` indexes samples.
#[derive(Clone, Debug)]
pub struct Dataset<T: Scalar> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.batch_size() != labels.len() {
            return Err(Error::input(format!(
                "dataset has {} inputs but {} labels",
                inputs.batch_size(),
                labels.len()
            )));
        }
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Assemble a batch from dataset positions, validating labels against
    /// `num_classes`.
    pub fn batch(&self, indices: &[usize], num_classes: usize) -> Result<Batch<T>> {
        let inputs = self.inputs.gather_rows(indices)?;
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::input(format!(
                "label {} out of range for {} classes",
                bad, num_classes
            )));
        }
        Batch::new(inputs, labels, indices.to_vec())
    }

    /// Gather input rows by dataset index (negative-sample lookup).
    pub fn gather_inputs(&self, indices: &[usize]) -> Result<Tensor<T>> {
        self.inputs.gather_rows(indices)
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                self.labels.get(i).copied().ok_or_else(|| {
                    Error::input(format!("index {} out of range for dataset of {}", i, self.len()))
                })
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset<T>> {
        Ok(Dataset {
            inputs: self.inputs.gather_rows(indices)?,
            labels: self.gather_labels(indices)?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            inputs: self.inputs.cast(),
            labels: self.labels.clone(),
        }
    }
}

impl<T: Scalar> SplitModel<T> {
    pub fn new(
        head: Sequential<T>,
        encoder: Sequential<T>,
        classifier: Sequential<T>,
        input_shape: (usize, usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        let (c, h, w) = input_shape;
        let in_shape = vec![c, h, w];
        let r_shape = head.out_shape(&in_shape)?;
        let z_shape = encoder.out_shape(&r_shape)?;
        let out = classifier.out_shape(&z_shape)?;
        if out != [num_classes] {
            return Err(Error::Config(format!(
                "classifier produces {:?}, expected [{}]",
                out, num_classes
            )));
        }
        Ok(SplitModel {
            head,
            encoder,
            classifier,
            input_shape,
            num_classes,
        })
    }

    fn check_inputs(&self, inputs: &Tensor<T>) -> Result<()> {
        let (c, h, w) = self.input_shape;
        let sh = inputs.shape();
        if sh.len() != 4 || sh[1] != c || sh[2] != h || sh[3] != w {
            return Err(Error::input(format!(
                "expected inputs (B, {}, {}, {}), got {:?}",
                c, h, w, sh
            )));
        }
        Ok(())
    }

    /// Device side: representation `r` from raw inputs.
    pub fn forward_head(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_inputs(inputs)?;
        self.head.forward(inputs)
    }

    /// Server side: feature `z` from a representation.
    pub fn forward_encoder(&self, repr: &Tensor<T>) -> Result<Tensor<T>> {
        self.encoder.forward(repr)
    }

    /// Device side: logits from a feature.
    pub fn forward_classifier(&self, feature: &Tensor<T>) -> Result<Tensor<T>> {
        self.classifier.forward(feature)
    }

    /// The full inference pipeline, by definition the composition of the
    /// three component forwards.
    pub fn full_forward(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.forward_head(inputs)?;
        let z = self.forward_encoder(&r)?;
        self.forward_classifier(&z)
    }

    /// Per-sample representation shape.
    pub fn repr_shape(&self) -> Vec<usize> {
        let (c, h, w) = self.input_shape;
        self.head.out_shape(&[c, h, w]).expect("validated at construction")
    }

    /// Per-sample feature shape.
    pub fn feature_shape(&self) -> Vec<usize> {
        self.encoder
            .out_shape(&self.repr_shape())
            .expect("validated at construction")
    }

    pub fn cast_f64(&self) -> SplitModel<f64> {
        SplitModel {
            head: self.head.cast_f64(),
            encoder: self.encoder.cast_f64(),
            classifier: self.classifier.cast_f64(),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
        }
    }

    /// Named parameters of the three groups, prefixed `head.`, `encoder.`,
    /// `classifier.`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, net) in [
            ("head", &self.head),
            ("encoder", &self.encoder),
            ("classifier", &self.classifier),
        ] {
            for (name, p) in net.param_names().into_iter().zip(net.params()) {
                out.push((format!("{}.{}", prefix, name), p));
            }
        }
        out
    }
}

/// Build the stock split architecture for an input shape.
///
/// Desk scale keeps the whole suite CPU-sized: one conv head, a two-conv
/// encoder with a single downsampling stage, and a residual block plus linear
/// classifier. Paper-like widens everything and mirrors the
/// first-conv / body / last-block-plus-linear split of a residual network.
pub fn build_default_architecture<T: Scalar>(
    input_shape: (usize, usize, usize),
    num_classes: usize,
    scale: ArchScale,
    seed: u64,
) -> Result<SplitModel<T>> {
    let (c, h, w) = input_shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "degenerate input shape {:?}",
            input_shape
        )));
    }
    if num_classes == 0 {
        return Err(Error::Config("need at least one class".into()));
    }
    if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
        return Err(Error::Config(format!(
            "spatial dims must be multiples of 4 and at least 8, got {}x{}",
            h, w
        )));
    }
    let mut head_rng = derived_rng(seed, streams::HEAD_INIT);
    let mut enc_rng = derived_rng(seed, streams::ENCODER_INIT);
    let mut clf_rng = derived_rng(seed, streams::CLASSIFIER_INIT);

    let (head, encoder, classifier, feat_c) = match scale {
        ArchScale::Desk => {
            let head = Sequential::<T>::empty()
                .push(Conv2d::new(c, 8, 3, 1, 1, &mut head_rng))
                .push(Relu);
            let encoder = Sequential::<T>::empty()
                .push(Conv2d::new(8, 16, 3, 2, 1, &mut enc_rng))
                .push(Relu)
                .push(Conv2d::new(16, 16, 3, 1, 1, &mut enc_rng))
                .push(Relu);
            let classifier = Sequential::<T>::empty()
                .push(Residual::new(
                    Sequential::empty()
                        .push(Conv2d::new(16, 16, 3, 1, 1, &mut clf_rng))
                        .push(Relu)
                        .push(Conv2d::new(16, 16, 3, 1, 1, &mut clf_rng)),
                ))
                .push(Relu)
                .push(AvgPool2d { k: 2 })
                .push(Flatten)
                .push(Linear::new(16 * (h / 4) * (w / 4), num_classes, &mut clf_rng));
            (head, encoder, classifier, 16)
        }
        ArchScale::PaperLike => {
            let head = Sequential::<T>::empty()
                .push(Conv2d::new(c, 64, 3, 1, 1, &mut head_rng))
                .push(Relu);
            let encoder = Sequential::<T>::empty()
                .push(Residual::new(
                    Sequential::empty()
                        .push(Conv2d::new(64, 64, 3, 1, 1, &mut enc_rng))
                        .push(Relu)
                        .push(Conv2d::new(64, 64, 3, 1, 1, &mut enc_rng)),
                ))
                .push(Relu)
                .push(Conv2d::new(64, 128, 3, 2, 1, &mut enc_rng))
                .push(Relu)
                .push(Residual::new(
                    Sequential::empty()
                        .push(Conv2d::new(128, 128, 3, 1, 1, &mut enc_rng))
                        .push(Relu)
                        .push(Conv2d::new(128, 128, 3, 1, 1, &mut enc_rng)),
                ))
                .push(Relu);
            let classifier = Sequential::<T>::empty()
                .push(Residual::new(
                    Sequential::empty()
                        .push(Conv2d::new(128, 128, 3, 1, 1, &mut clf_rng))
                        .push(Relu)
                        .push(Conv2d::new(128, 128, 3, 1, 1, &mut clf_rng)),
                ))
                .push(Relu)
                .push(AvgPool2d { k: h / 2 })
                .push(Flatten)
                .push(Linear::new(128, num_classes, &mut clf_rng));
            (head, encoder, classifier, 128)
        }
    };
    let _ = feat_c;
    SplitModel::new(head, encoder, classifier, input_shape, num_classes)
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(u32::from_le_bytes(buf))
}

/// Serialize named parameter arrays into the versioned checkpoint layout:
/// magic, format version, then per array: name length, name bytes, ndim,
/// dims (u32 LE each) and the data as f32 LE.
pub fn write_checkpoint_bytes(entries: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    write_u32(&mut out, CHECKPOINT_VERSION)?;
    for (name, tensor) in entries {
        write_u32(&mut out, name.len() as u32)?;
        out.extend_from_slice(name.as_bytes());
        write_u32(&mut out, tensor.shape().len() as u32)?;
        for &d in tensor.shape() {
            write_u32(&mut out, d as u32)?;
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse a checkpoint, rejecting bad magic and unknown versions.
pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = bytes;
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unknown format version {}",
            version
        )));
    }
    let mut entries = Vec::new();
    while !r.is_empty() {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated data for {}", name)))?;
            data.push(f32::from_le_bytes(buf));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

pub fn save_checkpoint(path: &Path, entries: &[(String, &Tensor<f32>)]) -> Result<()> {
    let bytes = write_checkpoint_bytes(entries)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path)?;
    read_checkpoint_bytes(&bytes)
}

/// Overwrite a model's parameters from checkpoint entries (matched by name;
/// shapes must agree).
pub fn apply_checkpoint(model: &mut SplitModel<f32>, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    for (prefix, net) in [
        ("head", &mut model.head),
        ("encoder", &mut model.encoder),
        ("classifier", &mut model.classifier),
    ] {
        let names = net.param_names();
        for (name, p) in names.into_iter().zip(net.params_mut()) {
            let full = format!("{}.{}", prefix, name);
            let found = entries
                .iter()
                .find(|(n, _)| *n == full)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {}", full)))?;
            if found.1.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    full,
                    found.1.shape(),
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(found.1.data());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::s;

    fn fixed_input(b: usize) -> Tensor<f32> {
        Tensor::from_fn(&[b, 1, 16, 16], |i| ((i as f64 * 0.37).sin() * 0.5 + 0.5) as f32)
    }

    #[test]
    fn desk_architecture_produces_logits() {
        let model =
            build_default_architecture::<f32>((1, 16, 16), 10, ArchScale::Desk, 7).unwrap();
        let logits = model.full_forward(&fixed_input(3)).unwrap();
        assert_eq!(logits.shape(), &[3, 10]);
    }

    #[test]
    fn paper_like_head_channels_match_body_input() {
        // Shape-trace oracle: the head's output channel count must equal the
        // first conv channel count the body expects.
        let model =
            build_default_architecture::<f32>((3, 32, 32), 10, ArchScale::PaperLike, 7).unwrap();
        let r_shape = model.repr_shape();
        assert_eq!(r_shape[0], 64);
        // encoder accepts exactly that shape
        assert!(model.encoder.out_shape(&r_shape).is_ok());
        let logits = model
            .full_forward(&Tensor::from_fn(&[2, 3, 32, 32], |i| (i % 7) as f32 / 7.0))
            .unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
    }

    #[test]
    fn degenerate_shape_is_a_configuration_error() {
        let err = build_default_architecture::<f32>((0, 0, 0), 10, ArchScale::Desk, 7);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn full_forward_is_bitwise_composition() {
        let model =
            build_default_architecture::<f32>((1, 16, 16), 10, ArchScale::Desk, 3).unwrap();
        for trial in 0..10u64 {
            let x = Tensor::from_fn(&[2, 1, 16, 16], |i| {
                (((i as u64 + trial * 977) % 101) as f32) / 101.0
            });
            let direct = model.full_forward(&x).unwrap();
            let chained = model
                .forward_classifier(
                    &model
                        .forward_encoder(&model.forward_head(&x).unwrap())
                        .unwrap(),
                )
                .unwrap();
            assert_eq!(direct, chained);
        }
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let head = Sequential::<f32>::empty().push(Conv2d::zeros(1, 4, 3, 1, 1));
        let encoder = Sequential::empty().push(Conv2d::zeros(4, 4, 3, 2, 1));
        let classifier = Sequential::empty()
            .push(Flatten)
            .push(Linear::zeros(4 * 8 * 8, 10));
        let model = SplitModel::new(head, encoder, classifier, (1, 16, 16), 10).unwrap();
        let logits = model.full_forward(&fixed_input(2)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_shape_mismatch_is_input_contract_error() {
        let model =
            build_default_architecture::<f32>((1, 16, 16), 10, ArchScale::Desk, 3).unwrap();
        let bad = Tensor::<f32>::zeros(&[2, 1, 8, 8]);
        assert!(matches!(
            model.forward_head(&bad),
            Err(Error::InputContract(_))
        ));
    }

    #[test]
    fn seeded_models_are_identical() {
        let a = build_default_architecture::<f32>((1, 16, 16), 10, ArchScale::Desk, 99).unwrap();
        let b = build_default_architecture::<f32>((1, 16, 16), 10, ArchScale::Desk, 99).unwrap();
        let x = fixed_input(2);
        assert_eq!(a.full_forward(&x).unwrap(), b.full_forward(&x).unwrap());
        for ((na, pa), (nb, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let model = build_default_architecture::<f32>((1, 16, 16), 4, ArchScale::Desk, 5).unwrap();
        let entries = model.named_params();
        let named: Vec<(String, &Tensor<f32>)> = entries.clone();
        let bytes = write_checkpoint_bytes(&named).unwrap();
        let parsed = read_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(parsed.len(), entries.len());
        for ((n0, t0), (n1, t1)) in entries.iter().zip(parsed.iter()) {
            assert_eq!(n0, n1);
            assert_eq!(*t0, t1);
        }
        // applying a checkpoint onto a differently seeded model equalizes it
        let mut other =
            build_default_architecture::<f32>((1, 16, 16), 4, ArchScale::Desk, 6).unwrap();
        apply_checkpoint(&mut other, &parsed).unwrap();
        let x = fixed_input(2);
        assert_eq!(model.full_forward(&x).unwrap(), other.full_forward(&x).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_version() {
        let model = build_default_architecture::<f32>((1, 16, 16), 4, ArchScale::Desk, 5).unwrap();
        let named: Vec<(String, &Tensor<f32>)> = model.named_params();
        let mut bytes = write_checkpoint_bytes(&named).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            read_checkpoint_bytes(&bad_magic),
            Err(Error::Checkpoint(_))
        ));
        bytes[6] = 0xFF; // version field
        assert!(matches!(
            read_checkpoint_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn batch_rejects_duplicates_and_bad_labels() {
        let data = Dataset::new(
            Tensor::<f32>::from_fn(&[4, 1, 16, 16], |i| s(i as f64)),
            vec![0, 1, 2, 3],
        )
        .unwrap();
        assert!(data.batch(&[0, 0], 10).is_err());
        assert!(data.batch(&[0, 1], 2).is_err()); // label 2/3 out of range for 2 classes
        assert!(data.batch(&[1, 3], 10).is_ok());
    }
}
