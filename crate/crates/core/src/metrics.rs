//! Evaluation metrics: windowed SSIM, crop-based feature distance, and the
//! naive-tiling baseline.

use crate::data::{Image, TexturePair};
use crate::losses::{perceptual_loss, FrozenExtractor};
use crate::model::ModelError;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("image {0}x{0} smaller than the {1}x{1} window")]
    TooSmall(usize, usize),
    #[error("crop size {crop} does not fit image size {size}")]
    BadCrop { crop: usize, size: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let [c, h, w] = *a.shape() else {
        return Err(MetricError::ShapeMismatch(a.shape().to_vec(), vec![3, 0, 0]));
    };
    Ok((c, h, w))
}

/// Separable valid-mode Gaussian filter of an `[H,W]` plane in f64.
fn gauss_valid(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let win = gaussian_window();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, wk) in win.iter().enumerate() {
                s += wk * plane[y * w + x + k];
            }
            tmp[y * ow + x] = s;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, wk) in win.iter().enumerate() {
                s += wk * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Mean local SSIM over all valid 11x11 windows, averaged over channels.
/// Inputs in [-1,1] are mapped to [0,1]; dynamic range 1.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, MetricError> {
    let (c, h, w) = check_pair(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall(h.min(w), SSIM_WINDOW));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let hw = h * w;
    let mut total = 0.0;
    for ci in 0..c {
        let xa: Vec<f64> = a.data()[ci * hw..(ci + 1) * hw].iter().map(|v| (v.as_f64() + 1.0) / 2.0).collect();
        let xb: Vec<f64> = b.data()[ci * hw..(ci + 1) * hw].iter().map(|v| (v.as_f64() + 1.0) / 2.0).collect();
        let sq_a: Vec<f64> = xa.iter().map(|v| v * v).collect();
        let sq_b: Vec<f64> = xb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| x * y).collect();
        let mu_a = gauss_valid(&xa, h, w);
        let mu_b = gauss_valid(&xb, h, w);
        let e_a2 = gauss_valid(&sq_a, h, w);
        let e_b2 = gauss_valid(&sq_b, h, w);
        let e_ab = gauss_valid(&ab, h, w);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_a2[i] - ma * ma;
            let vb = e_b2[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Naive per-window reference SSIM: a direct double loop per window with no
/// shared machinery. Its only purpose is to check [`ssim`].
pub fn ssim_reference<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, MetricError> {
    let (c, h, w) = check_pair(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall(h.min(w), SSIM_WINDOW));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let hw = h * w;
    let mut total = 0.0;
    for ci in 0..c {
        let base = ci * hw;
        let mut acc = 0.0;
        let mut count = 0usize;
        for wy in 0..=(h - SSIM_WINDOW) {
            for wx in 0..=(w - SSIM_WINDOW) {
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                let (mut ea2, mut eb2, mut eab) = (0.0f64, 0.0f64, 0.0f64);
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let weight = win[ky] * win[kx];
                        let va = (a.data()[base + (wy + ky) * w + wx + kx].as_f64() + 1.0) / 2.0;
                        let vb = (b.data()[base + (wy + ky) * w + wx + kx].as_f64() + 1.0) / 2.0;
                        ma += weight * va;
                        mb += weight * vb;
                        ea2 += weight * va * va;
                        eb2 += weight * vb * vb;
                        eab += weight * va * vb;
                    }
                }
                let va = ea2 - ma * ma;
                let vb = eb2 - mb * mb;
                let cov = eab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / c as f64)
}

/// Mean perceptual distance over seed-determined aligned crop pairs
/// (crop side = `crop_frac` of the image side).
pub fn crop_feature_distance<T: Scalar>(
    fx: &FrozenExtractor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    n_crops: usize,
    crop_frac: f64,
    seed: u64,
) -> Result<f64, MetricError> {
    let (_, h, w) = check_pair(a, b)?;
    let crop = ((h as f64) * crop_frac).floor() as usize;
    if crop == 0 || crop > h || crop > w || crop < 8 {
        return Err(MetricError::BadCrop { crop, size: h });
    }
    let mut rng = SplitMix64::new(seed);
    let mut total = 0.0;
    for _ in 0..n_crops {
        let y0 = rng.next_below((h - crop + 1) as u64) as usize;
        let x0 = rng.next_below((w - crop + 1) as u64) as usize;
        let ca = crop_image(a, y0, x0, crop);
        let cb = crop_image(b, y0, x0, crop);
        total += perceptual_loss(fx, &ca, &cb)?.as_f64();
    }
    Ok(total / n_crops as f64)
}

/// Default crop count for [`crop_feature_distance`].
pub const CFD_CROPS: usize = 8;
/// Default crop fraction of the image side.
pub const CFD_FRAC: f64 = 0.5;

fn crop_image<T: Scalar>(img: &Tensor<T>, y0: usize, x0: usize, side: usize) -> Tensor<T> {
    let [c, h, w] = *img.shape() else { unreachable!("checked") };
    let _ = h;
    let mut out = Tensor::zeros(&[c, side, side]);
    for ci in 0..c {
        for y in 0..side {
            let src = ci * h * w + (y0 + y) * w + x0;
            let dst = ci * side * side + y * side;
            out.data_mut()[dst..dst + side].copy_from_slice(&img.data()[src..src + side]);
        }
    }
    out
}

/// Zero-learning baseline: repeat the known central crop 2x2.
pub fn naive_tile(pair: &TexturePair) -> Image {
    let [c, s, _] = *pair.target.shape() else {
        panic!("pair target must be [3,S,S]");
    };
    let lo = s / 4;
    let half = s / 2;
    let mut out = Tensor::zeros(&[c, s, s]);
    for ci in 0..c {
        for y in 0..s {
            for x in 0..s {
                let sy = lo + (y % half);
                let sx = lo + (x % half);
                out.data_mut()[ci * s * s + y * s + x] = pair.input.data()[ci * s * s + sy * s + sx];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, make_pair, ProceduralSpec, TextureKind};
    use crate::losses::EXTRACTOR_SEED;

    fn rand_img(seed: u64, s: usize) -> Image {
        let mut rng = SplitMix64::new(seed);
        Tensor::uniform(&[3, s, s], -1.0, 1.0, &mut rng)
    }

    fn checker01(s: usize, cell: usize) -> Image {
        let mut img = Tensor::zeros(&[3, s, s]);
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    img.data_mut()[c * s * s + y * s + x] = if (x / cell + y / cell) % 2 == 0 { 1.0 } else { -1.0 };
                }
            }
        }
        img
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let x = rand_img(1, 32);
        let v = ssim(&x, &x).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "ssim {v}");
    }

    #[test]
    fn ssim_symmetry_and_bounds() {
        let a = rand_img(2, 32);
        let b = rand_img(3, 32);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn ssim_of_inverted_checker_is_negative() {
        let x = checker01(32, 4);
        let mut inv = x.clone();
        for v in inv.data_mut() {
            *v = -*v;
        }
        let v = ssim(&x, &inv).unwrap();
        let r = ssim_reference(&x, &inv).unwrap();
        assert!(v < 0.0, "ssim {v}");
        assert!((v - r).abs() < 1e-6);
    }

    #[test]
    fn ssim_of_structure_vs_noise_is_low() {
        let tex = checker01(48, 6);
        let noise = rand_img(4, 48);
        let v = ssim(&tex, &noise).unwrap();
        let r = ssim_reference(&tex, &noise).unwrap();
        assert!(v < 0.2, "ssim {v}");
        assert!((v - r).abs() < 1e-6);
    }

    #[test]
    fn ssim_matches_reference_on_random_pairs() {
        for seed in 0..10u64 {
            let a = rand_img(100 + seed, 24);
            let b = rand_img(200 + seed, 24);
            let fast = ssim(&a, &b).unwrap();
            let naive = ssim_reference(&a, &b).unwrap();
            assert!((fast - naive).abs() < 1e-6, "seed {seed}: {fast} vs {naive}");
        }
    }

    #[test]
    fn ssim_rejects_small_and_mismatched() {
        let a = rand_img(5, 8);
        assert!(matches!(ssim(&a, &a), Err(MetricError::TooSmall(..))));
        let b = rand_img(6, 32);
        let c = rand_img(7, 16);
        assert!(matches!(ssim(&b, &c), Err(MetricError::ShapeMismatch(..))));
    }

    #[test]
    fn cfd_identity_determinism_and_defaults() {
        let fx = FrozenExtractor::<f32>::new(EXTRACTOR_SEED);
        let a = rand_img(8, 32);
        let d = crop_feature_distance(&fx, &a, &a, CFD_CROPS, CFD_FRAC, 9).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(CFD_CROPS, 8);

        let b = rand_img(9, 32);
        let d1 = crop_feature_distance(&fx, &a, &b, CFD_CROPS, CFD_FRAC, 9).unwrap();
        let d2 = crop_feature_distance(&fx, &a, &b, CFD_CROPS, CFD_FRAC, 9).unwrap();
        let d3 = crop_feature_distance(&fx, &a, &b, CFD_CROPS, CFD_FRAC, 10).unwrap();
        assert_eq!(d1, d2);
        assert!(d1 > 0.0);
        assert_ne!(d1, d3);

        assert!(matches!(
            crop_feature_distance(&fx, &a, &b, 8, 0.1, 1),
            Err(MetricError::BadCrop { .. })
        ));
    }

    #[test]
    fn naive_tile_quadrants_equal_crop() {
        let target = generate(&ProceduralSpec::new(TextureKind::BlobLattice, 3, 8), 64).unwrap();
        let pair = make_pair(&target).unwrap();
        let tiled = naive_tile(&pair);
        let s = 64;
        let lo = 16;
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let crop = pair.target.data()[c * s * s + (lo + y) * s + lo + x];
                    for (qy, qx) in [(0, 0), (0, 32), (32, 0), (32, 32)] {
                        assert_eq!(tiled.data()[c * s * s + (qy + y) * s + qx + x], crop);
                    }
                }
            }
        }
    }

    #[test]
    fn naive_tile_reproduces_perfectly_periodic_target() {
        // Full pattern period 16 divides the 32-pixel tile stride, so the
        // tiling is phase-aligned with the target everywhere.
        let target = generate(&ProceduralSpec::new(TextureKind::Checker, 5, 8), 64).unwrap();
        let pair = make_pair(&target).unwrap();
        let tiled = naive_tile(&pair);
        assert_eq!(tiled.data(), target.data());
    }

    #[test]
    fn metric_ordering_periodic_vs_aperiodic() {
        let periodic = generate(&ProceduralSpec::new(TextureKind::Checker, 5, 8), 64).unwrap();
        let p_pair = make_pair(&periodic).unwrap();
        let s_periodic = ssim(&naive_tile(&p_pair), &periodic).unwrap();

        let noise = generate(&ProceduralSpec::new(TextureKind::ValueNoise, 6, 8), 64).unwrap();
        let n_pair = make_pair(&noise).unwrap();
        let s_noise = ssim(&naive_tile(&n_pair), &noise).unwrap();
        assert!(s_noise < s_periodic, "aperiodic {s_noise} vs periodic {s_periodic}");
    }
}
