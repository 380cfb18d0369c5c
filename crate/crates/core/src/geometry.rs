//! Patch partitioning and the hourglass stage schedule.
//!
//! A feature map `[C,H,W]` is tiled into `P*P` equal patches in row-major
//! patch order (left to right, top to bottom); the attention sequence index
//! equals the patch index. Partitioning is lossless and `arrange_back` is
//! its bit-exact inverse.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("partition {p} does not divide map extents {h}x{w}")]
    NonDivisible { p: usize, h: usize, w: usize },
    #[error("expected a [C,H,W] map, got shape {0:?}")]
    NotAMap(Vec<usize>),
    #[error("patch sequence is inconsistent: {0}")]
    BadSequence(String),
    #[error("input size {0} is not divisible by 32")]
    BadInputSize(usize),
}

/// Geometry of one attention stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    /// 1-based stage index.
    pub index: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Partition count per spatial dimension; the stage attends over `p*p`
    /// patches.
    pub p: usize,
    /// Flattened patch length `(h/p)*(w/p)*c`.
    pub d: usize,
}

impl StageSpec {
    pub fn new(index: usize, h: usize, c: usize, p: usize) -> Self {
        StageSpec { index, h, w: h, c, p, d: (h / p) * (h / p) * c }
    }

    /// Patch spatial extent in this stage's feature map.
    pub fn patch_extent(&self) -> usize {
        self.h / self.p
    }
}

/// A partitioned feature map: `p*p` patches of `(h/p) x (w/p) x c`.
#[derive(Debug, Clone)]
pub struct PatchSequence<T> {
    pub patches: Vec<Tensor<T>>,
    pub origin: StageSpec,
}

impl<T: Scalar> PatchSequence<T> {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Tile `map [C,H,W]` into `p*p` patches.
pub fn partition<T: Scalar>(map: &Tensor<T>, p: usize) -> Result<PatchSequence<T>, GeomError> {
    let [c, h, w] = *map.shape() else {
        return Err(GeomError::NotAMap(map.shape().to_vec()));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(GeomError::NonDivisible { p, h, w });
    }
    let (ph, pw) = (h / p, w / p);
    let data = map.data();
    let mut patches = Vec::with_capacity(p * p);
    for k in 0..p * p {
        let (pr, pc) = (k / p, k % p);
        let mut buf = Vec::with_capacity(c * ph * pw);
        for ci in 0..c {
            for y in 0..ph {
                let src = ci * h * w + (pr * ph + y) * w + pc * pw;
                buf.extend_from_slice(&data[src..src + pw]);
            }
        }
        patches.push(Tensor::new(vec![c, ph, pw], buf).expect("patch shape consistent"));
    }
    let spec = StageSpec { index: 0, h, w, c, p, d: ph * pw * c };
    Ok(PatchSequence { patches, origin: spec })
}

/// Exact inverse of [`partition`].
pub fn arrange_back<T: Scalar>(seq: &PatchSequence<T>) -> Result<Tensor<T>, GeomError> {
    let spec = seq.origin;
    if seq.patches.len() != spec.p * spec.p {
        return Err(GeomError::BadSequence(format!(
            "expected {} patches, got {}",
            spec.p * spec.p,
            seq.patches.len()
        )));
    }
    let (ph, pw) = (spec.h / spec.p, spec.w / spec.p);
    let patch_shape = [spec.c, ph, pw];
    let mut out = Tensor::zeros(&[spec.c, spec.h, spec.w]);
    for (k, patch) in seq.patches.iter().enumerate() {
        if patch.shape() != patch_shape {
            return Err(GeomError::BadSequence(format!(
                "patch {k} has shape {:?}, expected {:?}",
                patch.shape(),
                patch_shape
            )));
        }
        let (pr, pc) = (k / spec.p, k % spec.p);
        let src = patch.data();
        let dst = out.data_mut();
        for ci in 0..spec.c {
            for y in 0..ph {
                let d = ci * spec.h * spec.w + (pr * ph + y) * spec.w + pc * pw;
                let s = (ci * ph + y) * pw;
                dst[d..d + pw].copy_from_slice(&src[s..s + pw]);
            }
        }
    }
    Ok(out)
}

/// The five-stage hourglass: partition factors 2,4,8,4,2 with the channel
/// ladder `bc, 4bc, 16bc, 4bc, bc` and spatial extents `S, S/2, S/4, S/2, S`.
/// Patch spatial extent shrinks 4x per dimension down the first half while
/// the patch footprint in input coordinates halves per stage.
pub fn hourglass_schedule(input_hw: usize, base_channels: usize) -> Result<Vec<StageSpec>, GeomError> {
    if input_hw == 0 || input_hw % 32 != 0 {
        return Err(GeomError::BadInputSize(input_hw));
    }
    let s = input_hw;
    let bc = base_channels;
    Ok(vec![
        StageSpec::new(1, s, bc, 2),
        StageSpec::new(2, s / 2, 4 * bc, 4),
        StageSpec::new(3, s / 4, 16 * bc, 8),
        StageSpec::new(4, s / 2, 4 * bc, 4),
        StageSpec::new(5, s, bc, 2),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    #[test]
    fn partition_shapes_match_stage_table() {
        let m = Tensor::<f32>::zeros(&[16, 128, 128]);
        let seq = partition(&m, 2).unwrap();
        assert_eq!(seq.len(), 4);
        assert_eq!(seq.patches[0].shape(), &[16, 64, 64]);

        let m3 = Tensor::<f32>::zeros(&[256, 32, 32]);
        let seq3 = partition(&m3, 8).unwrap();
        assert_eq!(seq3.len(), 64);
        assert_eq!(seq3.patches[0].shape(), &[256, 4, 4]);
    }

    #[test]
    fn partition_p1_is_identity() {
        let mut rng = SplitMix64::new(3);
        let m = Tensor::<f64>::uniform(&[2, 8, 8], -1.0, 1.0, &mut rng);
        let seq = partition(&m, 1).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.patches[0].data(), m.data());
    }

    #[test]
    fn partition_rejects_non_divisible() {
        let m = Tensor::<f32>::zeros(&[3, 10, 10]);
        assert!(matches!(partition(&m, 4), Err(GeomError::NonDivisible { .. })));
    }

    #[test]
    fn arrange_back_shape_example() {
        let m = Tensor::<f32>::zeros(&[16, 128, 128]);
        let seq = partition(&m, 2).unwrap();
        let back = arrange_back(&seq).unwrap();
        assert_eq!(back.shape(), &[16, 128, 128]);
    }

    #[test]
    fn permuted_patches_do_not_arrange_back_to_original() {
        let mut rng = SplitMix64::new(8);
        let m = Tensor::<f64>::uniform(&[2, 8, 8], -1.0, 1.0, &mut rng);
        let mut seq = partition(&m, 2).unwrap();
        seq.patches.swap(0, 3);
        let back = arrange_back(&seq).unwrap();
        assert_ne!(back.data(), m.data());
    }

    #[test]
    fn schedule_at_128_matches_layer_table() {
        let st = hourglass_schedule(128, 16).unwrap();
        let extents: Vec<usize> = st.iter().map(|s| s.patch_extent()).collect();
        assert_eq!(extents, vec![64, 16, 4, 16, 64]);
        let ps: Vec<usize> = st.iter().map(|s| s.p).collect();
        assert_eq!(ps, vec![2, 4, 8, 4, 2]);
        let cs: Vec<usize> = st.iter().map(|s| s.c).collect();
        assert_eq!(cs, vec![16, 64, 256, 64, 16]);
        assert_eq!(st[2].d, 4 * 4 * 256);
    }

    #[test]
    fn schedule_at_256_scales_extents_only() {
        let st = hourglass_schedule(256, 16).unwrap();
        let hs: Vec<usize> = st.iter().map(|s| s.h).collect();
        assert_eq!(hs, vec![256, 128, 64, 128, 256]);
        let extents: Vec<usize> = st.iter().map(|s| s.patch_extent()).collect();
        assert_eq!(extents, vec![128, 32, 8, 32, 128]);
        let cs: Vec<usize> = st.iter().map(|s| s.c).collect();
        assert_eq!(cs, vec![16, 64, 256, 64, 16]);
    }

    #[test]
    fn schedule_rejects_bad_sizes() {
        assert!(hourglass_schedule(100, 16).is_err());
        assert!(hourglass_schedule(0, 16).is_err());
    }

    #[test]
    fn schedule_is_palindromic_and_footprint_halves() {
        for &s in &[32usize, 64, 128, 256] {
            let st = hourglass_schedule(s, 16).unwrap();
            for i in 0..5 {
                let j = 4 - i;
                assert_eq!((st[i].h, st[i].w, st[i].c, st[i].p), (st[j].h, st[j].w, st[j].c, st[j].p));
            }
            // First-half consecutive stages: patch extent ratio 4, input
            // footprint ratio 2 per dimension.
            for i in 0..2 {
                assert_eq!(st[i].patch_extent(), 4 * st[i + 1].patch_extent());
                let foot_i = (s / st[i].h) * st[i].patch_extent();
                let foot_next = (s / st[i + 1].h) * st[i + 1].patch_extent();
                assert_eq!(foot_i, 2 * foot_next);
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in 0u64..1000, p_idx in 0usize..3, c in 1usize..4) {
            let p = [2usize, 4, 8][p_idx];
            let hw = p * (1 + (seed as usize) % 5);
            let mut rng = SplitMix64::new(seed);
            let m = Tensor::<f32>::uniform(&[c, hw, hw], -1.0, 1.0, &mut rng);
            let seq = partition(&m, p).unwrap();
            let back = arrange_back(&seq).unwrap();
            prop_assert_eq!(back.data(), m.data());
        }
    }
}
