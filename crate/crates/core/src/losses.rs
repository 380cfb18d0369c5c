//! Training objectives: pixel L1, perceptual, style (Gram), and the
//! temporal-patch adversarial pair.
//!
//! The feature space for the perceptual and style terms comes from a frozen,
//! seeded convolutional extractor rather than a pretrained network; this is
//! the crate's one intentional substitution and it is pinned by seed so every
//! run sees identical features.

use crate::adam::ParamMap;
use crate::graph::{Graph, TensorId};
use crate::model::{he_uniform, LeafMap, ModelError, ModelResult, LEAKY_SLOPE};
use crate::rng::stream_for;
use crate::scalar::Scalar;
use crate::spectral::{spectral_sigma, SpectralState};
use crate::tensor::{Tensor, TensorError, TensorResult};
use std::collections::BTreeMap;

/// Weights of the combined objective; defaults are the trained values
/// (1, 0.01, 200, 0.1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub style: f64,
    pub gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 1.0, perceptual: 0.01, style: 200.0, gan: 0.1 }
    }
}

/// Per-component loss values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport<T> {
    pub l1: T,
    pub perceptual: T,
    pub style: T,
    pub gan_g: T,
    pub total: T,
}

impl<T: Scalar> LossReport<T> {
    /// Weighted sum in fixed association order; the invariant
    /// `total == w.l1*l1 + w.p*p + w.s*s + w.gan*g` holds exactly in `T`.
    pub fn from_components(l1: T, perceptual: T, style: T, gan_g: T, w: &LossWeights) -> Self {
        let total = T::of_f64(w.l1) * l1 + T::of_f64(w.perceptual) * perceptual + T::of_f64(w.style) * style
            + T::of_f64(w.gan) * gan_g;
        LossReport { l1, perceptual, style, gan_g, total }
    }
}

/// Default seed of the frozen feature extractor.
pub const EXTRACTOR_SEED: u64 = 1234;
/// Extractor stage widths: 3 -> 16 -> 32 -> 64, each 3x3 stride 2.
pub const EXTRACTOR_CHANNELS: [usize; 4] = [3, 16, 32, 64];

/// Frozen, seeded convolutional feature pyramid. Never trained.
#[derive(Debug, Clone)]
pub struct FrozenExtractor<T> {
    pub seed: u64,
    weights: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> FrozenExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut weights = Vec::new();
        for i in 0..3 {
            let (ci, co) = (EXTRACTOR_CHANNELS[i], EXTRACTOR_CHANNELS[i + 1]);
            let name = format!("fx.c{}", i + 1);
            weights.push((he_uniform(seed, &format!("{name}.w"), &[co, ci, 3, 3], ci * 9), Tensor::zeros(&[co])));
        }
        FrozenExtractor { seed, weights }
    }

    pub(crate) fn leafs(&self, g: &mut Graph<T>) -> Vec<(TensorId, TensorId)> {
        self.weights.iter().map(|(w, b)| (g.leaf(w.clone(), false), g.leaf(b.clone(), false))).collect()
    }

    /// Feature pyramid of a `[1,3,H,W]` node: maps at H/2, H/4, H/8.
    pub(crate) fn extract_on_graph(
        &self,
        g: &mut Graph<T>,
        ids: &[(TensorId, TensorId)],
        img: TensorId,
    ) -> ModelResult<Vec<TensorId>> {
        let h = g.shape(img)[2];
        if h < 8 {
            return Err(ModelError::BadInput(format!("extractor needs H >= 8, got {h}")));
        }
        let mut x = img;
        let mut out = Vec::with_capacity(3);
        for &(w, b) in ids {
            let y = g.conv2d(x, w, b, 2, 1)?;
            x = g.leaky_relu(y, LEAKY_SLOPE)?;
            out.push(x);
        }
        Ok(out)
    }

    /// Deterministic three-level feature pyramid of a `[3,H,W]` image.
    pub fn extract(&self, img: &Tensor<T>) -> ModelResult<Vec<Tensor<T>>> {
        let [c, h, w] = *img.shape() else {
            return Err(ModelError::BadInput(format!("expected [3,H,W], got {:?}", img.shape())));
        };
        if c != 3 {
            return Err(ModelError::BadInput(format!("expected 3 channels, got {c}")));
        }
        let mut g: Graph<T> = Graph::new();
        let ids = self.leafs(&mut g);
        let x = g.leaf(img.clone().reshaped(vec![1, 3, h, w])?, false);
        let feats = self.extract_on_graph(&mut g, &ids, x)?;
        Ok(feats
            .into_iter()
            .map(|f| {
                let s = g.shape(f).to_vec();
                g.detach(f).reshaped(vec![s[1], s[2], s[3]]).expect("consistent")
            })
            .collect())
    }
}

/// Mean absolute difference of two same-shape tensors.
pub fn l1_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<T> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op: "l1_loss", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let mut s = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        s = s + (x - y).abs();
    }
    Ok(s / T::of_usize(a.len()))
}

/// Normalized Gram matrix `F Fᵀ / (C·H·W)` of a `[C,H,W]` feature map.
pub fn gram<T: Scalar>(f: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let mut g: Graph<T> = Graph::new();
    let x = g.leaf(f.clone(), false);
    let gm = g.gram(x)?;
    Ok(g.detach(gm))
}

/// Mean over extractor stages of the mean-abs feature difference.
pub(crate) fn perceptual_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    fx_ids: &[(TensorId, TensorId)],
    fx: &FrozenExtractor<T>,
    a: TensorId,
    b: TensorId,
) -> ModelResult<TensorId> {
    let fa = fx.extract_on_graph(g, fx_ids, a)?;
    let fb = fx.extract_on_graph(g, fx_ids, b)?;
    let mut acc: Option<TensorId> = None;
    for (xa, xb) in fa.into_iter().zip(fb) {
        let d = g.mean_abs_diff(xa, xb)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, d)?,
            None => d,
        });
    }
    Ok(g.scale(acc.expect("three stages"), 1.0 / 3.0)?)
}

/// Mean over extractor stages of the mean-abs Gram difference.
pub(crate) fn style_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    fx_ids: &[(TensorId, TensorId)],
    fx: &FrozenExtractor<T>,
    a: TensorId,
    b: TensorId,
) -> ModelResult<TensorId> {
    let fa = fx.extract_on_graph(g, fx_ids, a)?;
    let fb = fx.extract_on_graph(g, fx_ids, b)?;
    let mut acc: Option<TensorId> = None;
    for (xa, xb) in fa.into_iter().zip(fb) {
        let ga = g.gram(xa)?;
        let gb = g.gram(xb)?;
        let d = g.mean_abs_diff(ga, gb)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, d)?,
            None => d,
        });
    }
    Ok(g.scale(acc.expect("three stages"), 1.0 / 3.0)?)
}

fn image_pair_graph<T: Scalar>(
    fx: &FrozenExtractor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> ModelResult<(Graph<T>, Vec<(TensorId, TensorId)>, TensorId, TensorId)> {
    if a.shape() != b.shape() {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "loss",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }));
    }
    let [c, h, w] = *a.shape() else {
        return Err(ModelError::BadInput(format!("expected [3,H,W], got {:?}", a.shape())));
    };
    let mut g: Graph<T> = Graph::new();
    let fx_ids = fx.leafs(&mut g);
    let ia = g.leaf(a.clone().reshaped(vec![1, c, h, w])?, false);
    let ib = g.leaf(b.clone().reshaped(vec![1, c, h, w])?, false);
    Ok((g, fx_ids, ia, ib))
}

/// L1 distance in the frozen feature space.
pub fn perceptual_loss<T: Scalar>(fx: &FrozenExtractor<T>, a: &Tensor<T>, b: &Tensor<T>) -> ModelResult<T> {
    let (mut g, fx_ids, ia, ib) = image_pair_graph(fx, a, b)?;
    let out = perceptual_on_graph(&mut g, &fx_ids, fx, ia, ib)?;
    Ok(g.item(out))
}

/// L1 distance between Gram matrices in the frozen feature space.
pub fn style_loss<T: Scalar>(fx: &FrozenExtractor<T>, a: &Tensor<T>, b: &Tensor<T>) -> ModelResult<T> {
    let (mut g, fx_ids, ia, ib) = image_pair_graph(fx, a, b)?;
    let out = style_on_graph(&mut g, &fx_ids, fx, ia, ib)?;
    Ok(g.item(out))
}

/// All loss components of one output/target pair. `gan_g` is supplied by the
/// adversarial path (0 when disabled).
pub fn total_loss<T: Scalar>(
    output: &Tensor<T>,
    target: &Tensor<T>,
    gan_g: T,
    w: &LossWeights,
    fx: &FrozenExtractor<T>,
) -> ModelResult<LossReport<T>> {
    let l1 = l1_loss(output, target)?;
    let p = perceptual_loss(fx, output, target)?;
    let s = style_loss(fx, output, target)?;
    Ok(LossReport::from_components(l1, p, s, gan_g, w))
}

// ---- temporal-patch discriminator ----------------------------------------

/// Channel ladder of the six 3x3x3 layers: 3 -> 32 -> 64 -> 128 x4.
pub const DISC_CHANNELS: [usize; 7] = [3, 32, 64, 128, 128, 128, 128];

/// Discriminator parameter store (`disc.l{1..6}.{w,b}`).
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub params: ParamMap<T>,
}

impl<T: Scalar> PartialEq for Discriminator<T> {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

pub fn build_discriminator<T: Scalar>(seed: u64) -> Discriminator<T> {
    let mut params = ParamMap::new();
    for i in 0..6 {
        let (ci, co) = (DISC_CHANNELS[i], DISC_CHANNELS[i + 1]);
        let name = format!("disc.l{}", i + 1);
        let w_name = format!("{name}.w");
        params.insert(w_name.clone(), he_uniform(seed, &w_name, &[co, ci, 3, 3, 3], ci * 27));
        params.insert(format!("{name}.b"), Tensor::zeros(&[co]));
    }
    Discriminator { params }
}

/// Persisted power-iteration vectors, one per discriminator weight.
#[derive(Debug, Clone)]
pub struct SpectralStates<T> {
    pub states: BTreeMap<String, SpectralState<T>>,
}

impl<T: Scalar> SpectralStates<T> {
    pub fn new(disc: &Discriminator<T>, seed: u64) -> Self {
        let mut states = BTreeMap::new();
        for (name, w) in &disc.params {
            if name.ends_with(".w") {
                let mut rng = stream_for(seed, name);
                states.insert(name.clone(), SpectralState::init(w.shape()[0], &mut rng));
            }
        }
        SpectralStates { states }
    }
}

/// Estimate every weight's top singular value (power iteration, updating the
/// persisted vectors). One iteration per training step; tests use more.
pub fn spectral_sigmas<T: Scalar>(
    disc: &Discriminator<T>,
    states: &mut SpectralStates<T>,
    iters: usize,
) -> TensorResult<BTreeMap<String, T>> {
    let mut sigmas = BTreeMap::new();
    for (name, w) in &disc.params {
        if !name.ends_with(".w") {
            continue;
        }
        let st = states.states.get_mut(name).expect("state per weight");
        sigmas.insert(name.clone(), spectral_sigma(w, st, iters)?);
    }
    Ok(sigmas)
}

/// Six spectrally normalized 3D convolutions over a `[1,3,B,H,W]` volume;
/// LeakyReLU after every layer except the last.
pub(crate) fn discriminate_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    ids: &LeafMap,
    sigmas: &BTreeMap<String, T>,
    volume: TensorId,
) -> ModelResult<TensorId> {
    let mut x = volume;
    for i in 1..=6 {
        let w_name = format!("disc.l{i}.w");
        let w_raw = *ids.get(&w_name).ok_or_else(|| ModelError::MissingParam(w_name.clone()))?;
        let b = *ids.get(&format!("disc.l{i}.b")).ok_or_else(|| ModelError::MissingParam(format!("disc.l{i}.b")))?;
        let sigma = *sigmas.get(&w_name).ok_or_else(|| ModelError::MissingParam(format!("sigma {w_name}")))?;
        let w = g.scale(w_raw, 1.0 / sigma.as_f64())?;
        x = g.conv3d(x, w, b)?;
        if i < 6 {
            x = g.leaky_relu(x, LEAKY_SLOPE)?;
        }
    }
    Ok(x)
}

/// Score a batch `[B,3,H,W]` as one spatio-temporal volume (the batch axis
/// is the temporal axis). Returns the `[1,128,B,H,W]` patch-score volume.
pub fn discriminate<T: Scalar>(
    batch: &Tensor<T>,
    disc: &Discriminator<T>,
    states: &mut SpectralStates<T>,
    iters: usize,
) -> ModelResult<Tensor<T>> {
    let shape = batch.shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(ModelError::BadInput(format!("expected [B,3,H,W], got {shape:?}")));
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    if b < 2 {
        return Err(ModelError::BadInput(format!("temporal axis needs B >= 2, got {b}")));
    }
    let sigmas = spectral_sigmas(disc, states, iters)?;
    let mut g: Graph<T> = Graph::new();
    let ids: LeafMap = disc.params.iter().map(|(n, t)| (n.clone(), g.leaf(t.clone(), false))).collect();
    // [B,3,H,W] -> [1,3,B,H,W]
    let imgs: Vec<TensorId> = (0..b)
        .map(|bi| {
            let img = Tensor::new(shape[1..].to_vec(), batch.data()[bi * 3 * h * w..(bi + 1) * 3 * h * w].to_vec())
                .expect("consistent")
                .reshaped(vec![1, 3, h, w])
                .expect("consistent");
            g.leaf(img, false)
        })
        .collect();
    let volume = g.stack_temporal(&imgs)?;
    let out = discriminate_on_graph(&mut g, &ids, &sigmas, volume)?;
    Ok(g.detach(out))
}

/// Hinge objectives: `d = mean(relu(1-real)) + mean(relu(1+fake))`,
/// `g = -mean(fake)`.
pub fn gan_losses<T: Scalar>(real_scores: &Tensor<T>, fake_scores: &Tensor<T>) -> (T, T) {
    let mean_relu = |t: &Tensor<T>, flip: bool| {
        let mut s = T::zero();
        for &v in t.data() {
            let z = if flip { T::one() + v } else { T::one() - v };
            if z > T::zero() {
                s = s + z;
            }
        }
        s / T::of_usize(t.len())
    };
    let d_loss = mean_relu(real_scores, false) + mean_relu(fake_scores, true);
    let mut m = T::zero();
    for &v in fake_scores.data() {
        m = m + v;
    }
    let g_loss = -(m / T::of_usize(fake_scores.len()));
    (d_loss, g_loss)
}

/// In-graph hinge discriminator loss.
pub(crate) fn hinge_d_on_graph<T: Scalar>(g: &mut Graph<T>, real: TensorId, fake: TensorId) -> TensorResult<TensorId> {
    let one_minus_real = g.affine(real, -1.0, 1.0)?;
    let r = g.leaky_relu(one_minus_real, 0.0)?;
    let lr = g.mean(r)?;
    let one_plus_fake = g.affine(fake, 1.0, 1.0)?;
    let f = g.leaky_relu(one_plus_fake, 0.0)?;
    let lf = g.mean(f)?;
    g.add(lr, lf)
}

/// In-graph generator adversarial term `-mean(fake)`.
pub(crate) fn gan_g_on_graph<T: Scalar>(g: &mut Graph<T>, fake: TensorId) -> TensorResult<TensorId> {
    let m = g.mean(fake)?;
    g.scale(m, -1.0)
}
