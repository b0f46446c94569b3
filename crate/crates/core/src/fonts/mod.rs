//! Synthetic character dataset generated from glyph prototypes and affine
//! latent poses.
//!
//! Every image is `clamp(warp(prototype, compose_affine(pose)), 0, 1)`, so the
//! generative process is known exactly and differentiable in the pose.

mod glyphs;
mod io;

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, POSE_LEN};
use crate::error::{bail, Result};
use crate::manifold::Decoder;
use crate::rng;
use crate::tensor::Tensor;

pub use glyphs::{render, Style, LETTERS, STYLES};
pub use io::import_prototypes;

pub const NUM_CLASSES: usize = 10;
pub const DEFAULT_SIZE: usize = 28;

/// Affine latent factors: translation, shear, scale and rotation (radians).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentPose {
    pub t1: f64,
    pub t2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub s: f64,
    pub r: f64,
}

impl LatentPose {
    pub const IDENTITY: LatentPose = LatentPose { t1: 0.0, t2: 0.0, lambda1: 0.0, lambda2: 0.0, s: 1.0, r: 0.0 };

    pub fn to_array(&self) -> [f64; POSE_LEN] {
        [self.t1, self.t2, self.lambda1, self.lambda2, self.s, self.r]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { t1: v[0], t2: v[1], lambda1: v[2], lambda2: v[3], s: v[4], r: v[5] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Per-component sampling box for poses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRanges {
    pub lo: [f64; POSE_LEN],
    pub hi: [f64; POSE_LEN],
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            lo: [-0.2, -0.2, -0.5, -0.5, 0.75, -FRAC_PI_2],
            hi: [0.2, 0.2, 0.5, 0.5, 1.15, FRAC_PI_2],
        }
    }
}

impl PoseRanges {
    pub fn contains(&self, p: &LatentPose) -> bool {
        p.to_array()
            .iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lo[i] && *v <= self.hi[i])
    }

    pub fn clamp(&self, p: &mut [f64]) {
        for (i, v) in p.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }

    pub fn sample(&self, rng: &mut rng::Rng) -> LatentPose {
        let mut v = [0.0; POSE_LEN];
        for (i, x) in v.iter_mut().enumerate() {
            *x = rng.random_range(self.lo[i]..=self.hi[i]);
        }
        LatentPose::from_slice(&v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphPrototype {
    pub class_id: usize,
    pub font_id: usize,
    /// `[1, H, W]` with values in `[0, 1]`.
    pub bitmap: Tensor,
}

/// All prototypes of a dataset, indexed by prototype id.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    glyphs: Vec<GlyphPrototype>,
    height: usize,
    width: usize,
}

impl PrototypeSet {
    pub fn new(glyphs: Vec<GlyphPrototype>) -> Result<Self> {
        let Some(first) = glyphs.first() else {
            bail!(InvalidArgument, "prototype set is empty");
        };
        let shape = first.bitmap.shape().to_vec();
        if shape.len() != 3 || shape[0] != 1 {
            bail!(Shape, "prototype bitmaps must be [1, H, W], got {:?}", shape);
        }
        for g in &glyphs {
            if g.bitmap.shape() != shape.as_slice() {
                bail!(Shape, "prototype bitmaps differ in shape: {:?} vs {:?}", g.bitmap.shape(), shape);
            }
            if g.class_id >= NUM_CLASSES {
                bail!(InvalidArgument, "prototype class {} out of range", g.class_id);
            }
            if g.bitmap.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                bail!(InvalidArgument, "prototype bitmap values must lie in [0, 1]");
            }
        }
        Ok(Self { glyphs, height: shape[1], width: shape[2] })
    }

    /// The built-in procedural fonts: one prototype per style and letter.
    pub fn builtin(size: usize) -> Result<Self> {
        if size < 8 {
            bail!(InvalidArgument, "image size {size} is too small for glyphs");
        }
        let mut glyphs = Vec::new();
        for (font_id, style) in STYLES.iter().enumerate() {
            for class_id in 0..NUM_CLASSES {
                glyphs.push(GlyphPrototype { class_id, font_id, bitmap: render(class_id, style, size, size) });
            }
        }
        Self::new(glyphs)
    }

    pub fn glyphs(&self) -> &[GlyphPrototype] {
        &self.glyphs
    }

    pub fn get(&self, id: usize) -> &GlyphPrototype {
        &self.glyphs[id]
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [1, self.height, self.width]
    }

    pub fn ids_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.glyphs.len()).filter(|&i| self.glyphs[i].class_id == class).collect()
    }

    /// Bitmaps of the given prototype ids stacked into `[B, 1, H, W]`.
    pub fn stack(&self, ids: &[usize]) -> Tensor {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(ids.len() * plane);
        for &id in ids {
            data.extend_from_slice(self.glyphs[id].bitmap.data());
        }
        Tensor::from_parts(vec![ids.len(), 1, self.height, self.width], data)
    }
}

/// Record `clamp(warp(prototypes, A(poses)), 0, 1)` on the tape.
pub fn decode_on_tape(tape: &mut Tape, prototypes: Var, poses: Var) -> Result<Var> {
    let theta = tape.compose_affine(poses)?;
    let warped = tape.affine_warp(prototypes, theta)?;
    Ok(tape.clamp(warped, 0.0, 1.0))
}

/// Decode a batch of prototype bitmaps `[B, 1, H, W]` under poses `[B, 6]`.
pub fn decode_batch(prototypes: &Tensor, poses: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.constant(prototypes.clone());
    let z = tape.constant(poses.clone());
    let out = decode_on_tape(&mut tape, p, z)?;
    Ok(tape.value(out).clone())
}

/// The exact generative map for one prototype and pose; returns `[1, H, W]`.
pub fn true_decoder(prototype: &GlyphPrototype, pose: &LatentPose) -> Result<Tensor> {
    let shape = prototype.bitmap.shape().to_vec();
    let protos = prototype.bitmap.clone().reshape(&[1, shape[0], shape[1], shape[2]])?;
    let poses = Tensor::new(vec![1, POSE_LEN], pose.to_array().to_vec())?;
    decode_batch(&protos, &poses)?.reshape(&shape)
}

/// The true decoder with font and class fixed per batch row: the latent code
/// of row `i` is a pose and decodes through prototype `i`.
#[derive(Clone, Debug)]
pub struct TrueDecoder {
    prototypes: Tensor,
    ranges: PoseRanges,
}

impl TrueDecoder {
    pub fn new(prototypes: Tensor, ranges: PoseRanges) -> Result<Self> {
        if prototypes.ndim() != 4 {
            bail!(Shape, "prototypes must be [B, C, H, W], got {:?}", prototypes.shape());
        }
        Ok(Self { prototypes, ranges })
    }

    /// Decoder for the examples `indices` of a dataset.
    pub fn for_examples(data: &SyntheticDataset, indices: &[usize]) -> Self {
        let ids: Vec<usize> = indices.iter().map(|&i| data.prototype_ids[i]).collect();
        Self { prototypes: data.prototypes.stack(&ids), ranges: data.ranges }
    }

    pub fn ranges(&self) -> &PoseRanges {
        &self.ranges
    }
}

impl Decoder for TrueDecoder {
    fn latent_dim(&self) -> usize {
        POSE_LEN
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.ranges.lo.to_vec(), self.ranges.hi.to_vec())
    }

    fn output_shape(&self) -> &[usize] {
        &self.prototypes.shape()[1..]
    }

    fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let rows = tape.shape(z)[0];
        if rows != self.prototypes.rows() {
            bail!(Shape, "true decoder holds {} prototypes, got {rows} latent rows", self.prototypes.rows());
        }
        let p = tape.constant(self.prototypes.clone());
        decode_on_tape(tape, p, z)
    }

    fn select(&self, rows: &[usize]) -> Result<Box<dyn Decoder>> {
        Ok(Box::new(Self { prototypes: self.prototypes.select_rows(rows), ranges: self.ranges }))
    }
}

/// Labeled images with their exact latent codes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    /// `[N, 1, H, W]` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub poses: Vec<LatentPose>,
    pub prototype_ids: Vec<usize>,
    pub prototypes: Arc<PrototypeSet>,
    pub ranges: PoseRanges,
    pub seed: u64,
}

const GENERATE_CHUNK: usize = 256;

/// Generate `n` examples; example `k` has class `k mod 10`, a uniformly chosen
/// prototype of that class and a uniformly sampled pose, all drawn from the
/// stream `(seed, k)`. Prefixes of the output are themselves balanced.
pub fn generate_count(prototypes: Arc<PrototypeSet>, n: usize, ranges: PoseRanges, seed: u64) -> Result<SyntheticDataset> {
    let by_class: Vec<Vec<usize>> = (0..NUM_CLASSES).map(|c| prototypes.ids_of_class(c)).collect();
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        bail!(InvalidArgument, "no prototype for class {} ({})", c, LETTERS[c]);
    }
    for i in 0..POSE_LEN {
        if !(ranges.lo[i] <= ranges.hi[i]) {
            bail!(InvalidArgument, "pose range {i} is empty");
        }
    }
    let mut labels = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    let mut prototype_ids = Vec::with_capacity(n);
    for k in 0..n {
        let mut r = rng::stream(seed, "example", k as u64);
        let class = k % NUM_CLASSES;
        let ids = &by_class[class];
        prototype_ids.push(ids[r.random_range(0..ids.len())]);
        poses.push(ranges.sample(&mut r));
        labels.push(class);
    }
    let starts: Vec<usize> = (0..n).step_by(GENERATE_CHUNK).collect();
    let chunks: Vec<Tensor> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + GENERATE_CHUNK).min(n);
            let protos = prototypes.stack(&prototype_ids[s..e]);
            let pz: Vec<f64> = poses[s..e].iter().flat_map(|p| p.to_array()).collect();
            decode_batch(&protos, &Tensor::from_parts(vec![e - s, POSE_LEN], pz))
        })
        .collect::<Result<_>>()?;
    let [c, h, w] = prototypes.image_shape();
    let mut data = Vec::with_capacity(n * c * h * w);
    for t in &chunks {
        data.extend_from_slice(t.data());
    }
    Ok(SyntheticDataset {
        images: Tensor::from_parts(vec![n, c, h, w], data),
        labels,
        poses,
        prototype_ids,
        prototypes,
        ranges,
        seed,
    })
}

/// Balanced generation with `n_per_class` examples of every class.
pub fn generate(prototypes: Arc<PrototypeSet>, n_per_class: usize, seed: u64) -> Result<SyntheticDataset> {
    generate_count(prototypes, n_per_class * NUM_CLASSES, PoseRanges::default(), seed)
}

/// Disjoint train and test sets drawn from independent streams.
pub fn train_test(
    prototypes: Arc<PrototypeSet>,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(SyntheticDataset, SyntheticDataset)> {
    let r = PoseRanges::default();
    let train = generate_count(prototypes.clone(), n_train, r, rng::derive_seed(seed, "train", 0))?;
    let test = generate_count(prototypes, n_test, r, rng::derive_seed(seed, "test", 0))?;
    Ok((train, test))
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// The examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> SyntheticDataset {
        SyntheticDataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            poses: indices.iter().map(|&i| self.poses[i]).collect(),
            prototype_ids: indices.iter().map(|&i| self.prototype_ids[i]).collect(),
            prototypes: self.prototypes.clone(),
            ranges: self.ranges,
            seed: self.seed,
        }
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> SyntheticDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Poses of `indices` as a `[B, 6]` tensor.
    pub fn pose_tensor(&self, indices: &[usize]) -> Tensor {
        let data: Vec<f64> = indices.iter().flat_map(|&i| self.poses[i].to_array()).collect();
        Tensor::from_parts(vec![indices.len(), POSE_LEN], data)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Re-decode stored poses and compare with the stored images bit for bit.
    pub fn verify(&self) -> Result<bool> {
        let idx: Vec<usize> = (0..self.len()).collect();
        for chunk in idx.chunks(GENERATE_CHUNK) {
            let protos = self.prototypes.stack(&chunk.iter().map(|&i| self.prototype_ids[i]).collect::<Vec<_>>());
            let again = decode_batch(&protos, &self.pose_tensor(chunk))?;
            if again != self.images.select_rows(chunk) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
