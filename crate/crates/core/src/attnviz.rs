//! Attention-map extraction and overlay rendering.
//!
//! The overlay follows the visualization layout: black partitioning lines at
//! patch boundaries, a white outline on the queried output patch, and a red
//! tint on every input patch proportional to its attention weight (the
//! strongest patch gets the full tint).

use crate::geometry::StageSpec;
use crate::model::{forward, ForwardOptions, ModelError, ModelResult, ModelWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Attention row of one queried output patch at one stage, captured from an
/// actual forward pass (not recomputed).
#[derive(Debug, Clone)]
pub struct AttentionRecord<T> {
    /// 1-based stage index.
    pub stage: usize,
    /// Full `[P*P, P*P]` row-stochastic matrix of the block's final layer.
    pub matrix: Tensor<T>,
    pub geom: StageSpec,
    /// Queried output patch as (row, col).
    pub target: (usize, usize),
    /// Channel-mean of the stage's input feature map, `[H,W]`.
    pub input_mean: Tensor<T>,
}

impl<T: Scalar> AttentionRecord<T> {
    /// The attention weights used to compute the queried output patch.
    pub fn row(&self) -> &[T] {
        let p = self.geom.p;
        let idx = self.target.0 * p + self.target.1;
        let n = p * p;
        &self.matrix.data()[idx * n..(idx + 1) * n]
    }
}

/// Run a capture-enabled forward pass and pull out the attention row for
/// `target_patch` at `stage` (default queried patch per the figures is the
/// top-left, (0, 0)).
pub fn extract_attention<T: Scalar>(
    weights: &ModelWeights<T>,
    input: &Tensor<T>,
    stage: usize,
    target_patch: (usize, usize),
) -> ModelResult<AttentionRecord<T>> {
    let rec = forward(input, weights, ForwardOptions { capture_attention: true, trace_shapes: false })?;
    let n_stages = rec.stages.len();
    if stage == 0 || stage > n_stages {
        return Err(ModelError::BadInput(format!("stage {stage} out of range 1..={n_stages}")));
    }
    let cap = &rec.stages[stage - 1];
    let p = cap.geom.p;
    if target_patch.0 >= p || target_patch.1 >= p {
        return Err(ModelError::BadInput(format!("patch {target_patch:?} out of range for P={p}")));
    }
    let matrix = cap.attention.last().expect("block has layers").clone();
    Ok(AttentionRecord {
        stage,
        matrix,
        geom: cap.geom,
        target: target_patch,
        input_mean: cap.input_mean.clone(),
    })
}

/// Normalize a record's channel-mean input map into a displayable
/// `[3,H,W]` grayscale image in [-1,1].
pub fn record_base_image<T: Scalar>(record: &AttentionRecord<T>) -> Tensor<T> {
    let (h, w) = (record.geom.h, record.geom.w);
    let data = record.input_mean.data();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in data {
        lo = lo.min(v.as_f64());
        hi = hi.max(v.as_f64());
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        for (i, v) in data.iter().enumerate() {
            out.data_mut()[c * h * w + i] = T::of_f64(2.0 * (v.as_f64() - lo) / span - 1.0);
        }
    }
    out
}

/// Draw grid lines, the target-patch outline, and per-patch attention tint
/// over a `[3,H,W]` base image matching the record's geometry.
pub fn render_attention_overlay<T: Scalar>(
    record: &AttentionRecord<T>,
    base_image: &Tensor<T>,
) -> ModelResult<Tensor<T>> {
    let [c, h, w] = *base_image.shape() else {
        return Err(ModelError::BadInput(format!("expected [3,H,W] base, got {:?}", base_image.shape())));
    };
    if c != 3 || h != record.geom.h || w != record.geom.w {
        return Err(ModelError::BadInput(format!(
            "base {:?} does not match stage geometry {}x{}",
            base_image.shape(),
            record.geom.h,
            record.geom.w
        )));
    }
    let p = record.geom.p;
    let (ph, pw) = (h / p, w / p);
    let row = record.row();
    let mut max_w = T::zero();
    for &v in row {
        if v > max_w {
            max_w = v;
        }
    }
    let mut out = base_image.clone();

    // Red tint per patch, normalized so the strongest weight is fully red.
    for (k, &weight) in row.iter().enumerate() {
        let t = if max_w > T::zero() { (weight / max_w).as_f64() } else { 0.0 };
        let f = 0.55 * t;
        let (pr, pc) = (k / p, k % p);
        for y in pr * ph..(pr + 1) * ph {
            for x in pc * pw..(pc + 1) * pw {
                let i = y * w + x;
                let d = out.data_mut();
                d[i] = T::of_f64((1.0 - f) * d[i].as_f64() + f * 1.0);
                d[h * w + i] = T::of_f64((1.0 - f) * d[h * w + i].as_f64() + f * -1.0);
                d[2 * h * w + i] = T::of_f64((1.0 - f) * d[2 * h * w + i].as_f64() + f * -1.0);
            }
        }
    }

    // Black partitioning lines at multiples of H/P (plus the far edges).
    let black = -T::one();
    let mut paint = |y: usize, x: usize, v: T| {
        for ci in 0..3 {
            out.data_mut()[ci * h * w + y * w + x] = v;
        }
    };
    for k in 0..=p {
        let y = (k * ph).min(h - 1);
        let x = (k * pw).min(w - 1);
        for i in 0..w {
            paint(y, i, black);
        }
        for i in 0..h {
            paint(i, x, black);
        }
    }

    // White outline on the queried patch.
    let (pr, pc) = record.target;
    let (y0, y1) = (pr * ph, ((pr + 1) * ph - 1).min(h - 1));
    let (x0, x1) = (pc * pw, ((pc + 1) * pw - 1).min(w - 1));
    let white = T::one();
    for x in x0..=x1 {
        paint(y0, x, white);
        paint(y1, x, white);
    }
    for y in y0..=y1 {
        paint(y, x0, white);
        paint(y, x1, white);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{decode_ppm, encode_ppm};
    use crate::model::{build_model, ArchVariant};
    use crate::rng::SplitMix64;

    fn test_input(s: usize, seed: u64) -> Tensor<f32> {
        let mut rng = SplitMix64::new(seed);
        Tensor::uniform(&[3, s, s], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn stage3_row_length_is_64_at_128() {
        let w = build_model::<f32>(ArchVariant::UAttention, 128, 3).unwrap();
        let rec = extract_attention(&w, &test_input(128, 1), 3, (0, 0)).unwrap();
        assert_eq!(rec.row().len(), 64);
        assert_eq!(rec.matrix.shape(), &[64, 64]);
        let sum: f32 = rec.row().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_stage_and_patch_are_errors() {
        let w = build_model::<f32>(ArchVariant::UAttention, 32, 3).unwrap();
        let img = test_input(32, 2);
        assert!(extract_attention(&w, &img, 0, (0, 0)).is_err());
        assert!(extract_attention(&w, &img, 6, (0, 0)).is_err());
        assert!(extract_attention(&w, &img, 1, (2, 0)).is_err());
    }

    #[test]
    fn zero_query_key_weights_give_uniform_attention() {
        let mut w = build_model::<f32>(ArchVariant::UAttention, 32, 4).unwrap();
        for (name, t) in w.params.iter_mut() {
            if name.contains(".wq.") || name.contains(".wk.") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let rec = extract_attention(&w, &test_input(32, 3), 2, (1, 1)).unwrap();
        let n = rec.geom.p * rec.geom.p;
        for &v in rec.row() {
            assert!((v - 1.0 / n as f32).abs() < 1e-7);
        }
    }

    #[test]
    fn overlay_uniform_attention_tints_patches_equally() {
        let mut w = build_model::<f32>(ArchVariant::UAttention, 32, 5).unwrap();
        for (name, t) in w.params.iter_mut() {
            if name.contains(".wq.") || name.contains(".wk.") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let rec = extract_attention(&w, &test_input(32, 4), 1, (0, 0)).unwrap();
        let base = Tensor::<f32>::zeros(&[3, rec.geom.h, rec.geom.w]);
        let img = render_attention_overlay(&rec, &base).unwrap();
        // Sample one interior pixel per patch; tint must be identical.
        let p = rec.geom.p;
        let (ph, pw) = (rec.geom.h / p, rec.geom.w / p);
        let first = img.data()[(ph / 2) * rec.geom.w + pw / 2];
        for pr in 0..p {
            for pc in 0..p {
                let y = pr * ph + ph / 2;
                let x = pc * pw + pw / 2;
                assert_eq!(img.data()[y * rec.geom.w + x], first);
            }
        }
    }

    #[test]
    fn overlay_draws_grid_and_outline() {
        let w = build_model::<f32>(ArchVariant::UAttention, 32, 6).unwrap();
        let rec = extract_attention(&w, &test_input(32, 5), 1, (0, 0)).unwrap();
        let base = record_base_image(&rec);
        let img = render_attention_overlay(&rec, &base).unwrap();
        let (h, ww) = (rec.geom.h, rec.geom.w);
        let ph = h / rec.geom.p;
        // Grid line at y = ph is black in all channels (off the outline).
        let x_probe = ww - 2;
        for c in 0..3 {
            assert_eq!(img.data()[c * h * ww + ph * ww + x_probe], -1.0);
        }
        // Target outline at (0,0): top edge is white inside the patch.
        for c in 0..3 {
            assert_eq!(img.data()[c * h * ww + 1], 1.0); // y=0, x=1
        }

        let bad = Tensor::<f32>::zeros(&[3, 8, 8]);
        assert!(render_attention_overlay(&rec, &bad).is_err());
    }

    #[test]
    fn overlay_round_trips_through_ppm() {
        let w = build_model::<f32>(ArchVariant::UAttention, 32, 7).unwrap();
        let rec = extract_attention(&w, &test_input(32, 6), 2, (0, 1)).unwrap();
        let base = record_base_image(&rec);
        let img = render_attention_overlay(&rec, &base).unwrap();
        let bytes = encode_ppm(&img);
        let back = decode_ppm(&bytes).unwrap();
        let again = encode_ppm(&back);
        assert_eq!(bytes, again);
    }
}
