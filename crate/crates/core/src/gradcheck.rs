//! Central finite-difference verification of every differentiable op.
//!
//! The harness rebuilds the graph per evaluation, so the numeric side never
//! reuses any analytic machinery beyond the forward pass it is checking.

use crate::graph::{Graph, TensorId};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely: `|a-n| / max(1, |a|, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Check the gradients of `build` (a scalar-valued graph over the given
/// leaves) against 64-bit central differences. Returns the worst relative
/// error over all input elements.
pub fn fd_check<F>(build: &F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> TensorId + Sync,
{
    let sample: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.len()).map(move |ei| (ti, ei)))
        .collect();
    fd_check_sampled(build, inputs, &sample, 1e-5)
}

/// As [`fd_check`] but only at the sampled `(tensor, element)` positions.
pub fn fd_check_sampled<F>(build: &F, inputs: &[Tensor<f64>], sample: &[(usize, usize)], h_rel: f64) -> f64
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> TensorId + Sync,
{
    fd_check_generic::<f64, F>(build, inputs, sample, h_rel)
}

/// Scalar-generic core of the sampled check (the full-network criterion
/// runs it in f32). FD evaluations reuse one truncated graph per worker and
/// run in parallel over samples; each sample's value is independent of the
/// schedule.
pub fn fd_check_generic<T: Scalar, F>(build: &F, inputs: &[Tensor<T>], sample: &[(usize, usize)], h_rel: f64) -> f64
where
    F: Fn(&mut Graph<T>, &[TensorId]) -> TensorId + Sync,
{
    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &ids);
    g.backward(out).expect("backward failed during gradcheck");
    let analytic: Vec<Vec<T>> = ids.iter().map(|&id| g.grad(id).expect("missing grad").to_vec()).collect();

    // Pristine graph holding only the leaves, cloned per worker.
    let mut pristine = Graph::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| pristine.leaf(t.clone(), false)).collect();
    let base_len = pristine.len();

    let one_sample = |g: &mut Graph<T>, ti: usize, ei: usize| -> f64 {
        let x0 = g.value(ids[ti])[ei];
        let h = T::of_f64(h_rel) * x0.abs().max(T::one());
        g.set_leaf_element(ids[ti], ei, x0 + h);
        let out = build(g, &ids);
        let fp = g.item(out).as_f64();
        g.truncate(base_len);
        g.set_leaf_element(ids[ti], ei, x0 - h);
        let out = build(g, &ids);
        let fm = g.item(out).as_f64();
        g.truncate(base_len);
        g.set_leaf_element(ids[ti], ei, x0);
        let numeric = (fp - fm) / (2.0 * h.as_f64());
        rel_err(analytic[ti][ei].as_f64(), numeric)
    };

    if crate::par::threads() > 1 && sample.len() > 8 {
        use rayon::prelude::*;
        let chunk = sample.len().div_ceil(crate::par::threads() * 4).max(1);
        sample
            .par_chunks(chunk)
            .map(|chunk| {
                let mut g = pristine.clone();
                chunk.iter().map(|&(ti, ei)| one_sample(&mut g, ti, ei)).fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    } else {
        let mut g = pristine.clone();
        sample.iter().map(|&(ti, ei)| one_sample(&mut g, ti, ei)).fold(0.0, f64::max)
    }
}

fn rand_tensor(shape: &[usize], rng: &mut SplitMix64, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// One registered gradient check: a named op family, its tolerance, and a
/// runner returning the worst relative error.
pub struct OpCheck {
    pub name: &'static str,
    pub tol: f64,
    pub run: fn() -> f64,
}

/// Every differentiable op family, each exactly once.
pub fn registry() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "conv2d",
            tol: 1e-5,
            run: || {
                let mut rng = SplitMix64::new(0xC0);
                let x = rand_tensor(&[1, 2, 6, 6], &mut rng, -1.0, 1.0);
                let w = rand_tensor(&[3, 2, 3, 3], &mut rng, -0.7, 0.7);
                let b = rand_tensor(&[3], &mut rng, -0.3, 0.3);
                let e1 = fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1).unwrap();
                        g.sum(y).unwrap()
                    },
                    &[x.clone(), w.clone(), b.clone()],
                );
                let e2 = fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1).unwrap();
                        let z = g.tanh(y).unwrap();
                        g.sum(z).unwrap()
                    },
                    &[x, w, b],
                );
                e1.max(e2)
            },
        },
        OpCheck {
            name: "conv3d",
            tol: 1e-5,
            run: || {
                let mut rng = SplitMix64::new(0xC3);
                let x = rand_tensor(&[1, 2, 3, 4, 4], &mut rng, -1.0, 1.0);
                let w = rand_tensor(&[2, 2, 3, 3, 3], &mut rng, -0.5, 0.5);
                let b = rand_tensor(&[2], &mut rng, -0.3, 0.3);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let y = g.conv3d(ids[0], ids[1], ids[2]).unwrap();
                        let z = g.tanh(y).unwrap();
                        g.sum(z).unwrap()
                    },
                    &[x, w, b],
                )
            },
        },
        OpCheck {
            name: "bilinear_upsample_2x",
            tol: 1e-5,
            run: || {
                let mut rng = SplitMix64::new(0xB1);
                let x = rand_tensor(&[1, 2, 3, 4], &mut rng, -1.0, 1.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let y = g.bilinear_up2x(ids[0]).unwrap();
                        let z = g.tanh(y).unwrap();
                        g.sum(z).unwrap()
                    },
                    &[x],
                )
            },
        },
        OpCheck {
            name: "matmul",
            tol: 1e-5,
            run: || {
                let mut rng = SplitMix64::new(0xAA);
                let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
                let b = rand_tensor(&[4, 2], &mut rng, -1.0, 1.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let y = g.matmul(ids[0], ids[1]).unwrap();
                        let z = g.tanh(y).unwrap();
                        g.sum(z).unwrap()
                    },
                    &[a, b],
                )
            },
        },
        OpCheck {
            name: "matmul_bt",
            tol: 1e-5,
            run: || {
                let mut rng = SplitMix64::new(0xAB);
                let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
                let b = rand_tensor(&[5, 4], &mut rng, -1.0, 1.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let y = g.matmul_bt(ids[0], ids[1]).unwrap();
                        let z = g.tanh(y).unwrap();
                        g.sum(z).unwrap()
                    },
                    &[a, b],
                )
            },
        },
        OpCheck {
            name: "softmax_rows",
            tol: 1e-6,
            run: || {
                let mut rng = SplitMix64::new(0x50);
                let x = rand_tensor(&[3, 5], &mut rng, -2.0, 2.0);
                let w = rand_tensor(&[3, 5], &mut rng, -1.0, 1.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let s = g.softmax_rows(ids[0]).unwrap();
                        // Weighted sum probes the full Jacobian.
                        let prod = g.matmul_bt(s, ids[1]).unwrap();
                        let t = g.tanh(prod).unwrap();
                        g.sum(t).unwrap()
                    },
                    &[x, w],
                )
            },
        },
        OpCheck {
            name: "leaky_relu",
            tol: 1e-6,
            run: || {
                let mut rng = SplitMix64::new(0x1E);
                // Keep samples away from the kink at 0.
                let mut x = rand_tensor(&[4, 7], &mut rng, -2.0, 2.0);
                for v in x.data_mut() {
                    if v.abs() < 0.2 {
                        *v += 0.4 * v.signum() + if *v == 0.0 { 0.4 } else { 0.0 };
                    }
                }
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let y = g.leaky_relu(ids[0], 0.2).unwrap();
                        let z = g.tanh(y).unwrap();
                        g.sum(z).unwrap()
                    },
                    &[x],
                )
            },
        },
        OpCheck {
            name: "tanh",
            tol: 1e-6,
            run: || {
                let mut rng = SplitMix64::new(0x7A);
                let x = rand_tensor(&[3, 6], &mut rng, -2.0, 2.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let y = g.tanh(ids[0]).unwrap();
                        g.sum(y).unwrap()
                    },
                    &[x],
                )
            },
        },
        OpCheck {
            name: "layer_norm_channels",
            tol: 1e-5,
            run: || {
                let mut rng = SplitMix64::new(0x11);
                let x = rand_tensor(&[1, 4, 3, 3], &mut rng, -1.5, 1.5);
                let gain = rand_tensor(&[4], &mut rng, 0.5, 1.5);
                let bias = rand_tensor(&[4], &mut rng, -0.5, 0.5);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let y = g.layer_norm_channels(ids[0], ids[1], ids[2], 1e-5).unwrap();
                        let z = g.tanh(y).unwrap();
                        g.sum(z).unwrap()
                    },
                    &[x, gain, bias],
                )
            },
        },
        OpCheck {
            name: "add",
            tol: 1e-6,
            run: || {
                let mut rng = SplitMix64::new(0xAD);
                let a = rand_tensor(&[2, 3, 2, 2], &mut rng, -1.0, 1.0);
                let b = rand_tensor(&[2, 3, 2, 2], &mut rng, -1.0, 1.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let y = g.add(ids[0], ids[1]).unwrap();
                        let z = g.tanh(y).unwrap();
                        g.sum(z).unwrap()
                    },
                    &[a, b],
                )
            },
        },
        OpCheck {
            name: "affine",
            tol: 1e-6,
            run: || {
                let mut rng = SplitMix64::new(0xAF);
                let x = rand_tensor(&[3, 5], &mut rng, -1.0, 1.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let y = g.affine(ids[0], 0.35, -0.2).unwrap();
                        let z = g.tanh(y).unwrap();
                        g.sum(z).unwrap()
                    },
                    &[x],
                )
            },
        },
        OpCheck {
            name: "patches_to_rows",
            tol: 1e-6,
            run: || {
                let mut rng = SplitMix64::new(0x9A);
                let x = rand_tensor(&[1, 3, 4, 4], &mut rng, -1.0, 1.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let rows = g.patches_to_rows(ids[0], 2).unwrap();
                        let t = g.tanh(rows).unwrap();
                        g.sum(t).unwrap()
                    },
                    &[x],
                )
            },
        },
        OpCheck {
            name: "rows_to_map",
            tol: 1e-6,
            run: || {
                let mut rng = SplitMix64::new(0x9B);
                let rows = rand_tensor(&[4, 12], &mut rng, -1.0, 1.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let m = g.rows_to_map(ids[0], 2, (3, 4, 4)).unwrap();
                        let t = g.tanh(m).unwrap();
                        g.sum(t).unwrap()
                    },
                    &[rows],
                )
            },
        },
        OpCheck {
            name: "patch_batch",
            tol: 1e-6,
            run: || {
                let mut rng = SplitMix64::new(0x9C);
                let x = rand_tensor(&[1, 2, 4, 4], &mut rng, -1.0, 1.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let pb = g.map_to_patch_batch(ids[0], 2).unwrap();
                        let t = g.tanh(pb).unwrap();
                        let m = g.patch_batch_to_map(t, 2).unwrap();
                        let t2 = g.tanh(m).unwrap();
                        g.sum(t2).unwrap()
                    },
                    &[x],
                )
            },
        },
        OpCheck {
            name: "concat_channels",
            tol: 1e-6,
            run: || {
                let mut rng = SplitMix64::new(0xCC);
                let a = rand_tensor(&[1, 2, 3, 3], &mut rng, -1.0, 1.0);
                let b = rand_tensor(&[1, 3, 3, 3], &mut rng, -1.0, 1.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let y = g.concat_channels(ids[0], ids[1]).unwrap();
                        let z = g.tanh(y).unwrap();
                        g.sum(z).unwrap()
                    },
                    &[a, b],
                )
            },
        },
        OpCheck {
            name: "stack_temporal",
            tol: 1e-6,
            run: || {
                let mut rng = SplitMix64::new(0x57);
                let a = rand_tensor(&[1, 2, 3, 3], &mut rng, -1.0, 1.0);
                let b = rand_tensor(&[1, 2, 3, 3], &mut rng, -1.0, 1.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let y = g.stack_temporal(&[ids[0], ids[1]]).unwrap();
                        let z = g.tanh(y).unwrap();
                        g.sum(z).unwrap()
                    },
                    &[a, b],
                )
            },
        },
        OpCheck {
            name: "gram",
            tol: 1e-5,
            run: || {
                let mut rng = SplitMix64::new(0x99);
                let x = rand_tensor(&[3, 4, 4], &mut rng, -1.0, 1.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let gm = g.gram(ids[0]).unwrap();
                        let t = g.tanh(gm).unwrap();
                        g.sum(t).unwrap()
                    },
                    &[x],
                )
            },
        },
        OpCheck {
            name: "mean_abs_diff",
            tol: 1e-6,
            run: || {
                let mut rng = SplitMix64::new(0x3D);
                let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
                let b = rand_tensor(&[3, 4], &mut rng, 1.5, 3.0); // keep |a-b| away from 0
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| g.mean_abs_diff(ids[0], ids[1]).unwrap(),
                    &[a, b],
                )
            },
        },
        OpCheck {
            name: "mean",
            tol: 1e-6,
            run: || {
                let mut rng = SplitMix64::new(0x4E);
                let x = rand_tensor(&[4, 5], &mut rng, -1.0, 1.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let t = g.tanh(ids[0]).unwrap();
                        g.mean(t).unwrap()
                    },
                    &[x],
                )
            },
        },
        OpCheck {
            name: "sum",
            tol: 1e-6,
            run: || {
                let mut rng = SplitMix64::new(0x5E);
                let x = rand_tensor(&[4, 3], &mut rng, -1.0, 1.0);
                fd_check(
                    &|g: &mut Graph<f64>, ids: &[TensorId]| {
                        let t = g.tanh(ids[0]).unwrap();
                        g.sum(t).unwrap()
                    },
                    &[x],
                )
            },
        },
    ]
}

/// Tolerance of the full-network sampled-parameter check (f32).
pub const FULL_NETWORK_TOL: f64 = 1e-3;

/// Full-network check: gradient of a scalar loss through the whole
/// generator at a 32x32 input in training precision (f32), verified by
/// central differences on a stratified sample covering `sample_fraction`
/// of all parameter elements. Returns the worst relative error.
pub fn full_network_check(sample_fraction: f64) -> f64 {
    use crate::model::{build_model, forward_on_graph, ArchVariant, ForwardOptions, LeafMap};
    let weights = build_model::<f32>(ArchVariant::UAttention, 32, 13).expect("32 is a valid size");
    let mut rng = SplitMix64::new(0xF11);
    let img = Tensor::<f32>::uniform(&[1, 3, 32, 32], -0.9, 0.9, &mut rng);
    let target = Tensor::<f32>::uniform(&[1, 3, 32, 32], -0.9, 0.9, &mut rng);

    let names: Vec<String> = weights.params.keys().cloned().collect();
    let mut inputs: Vec<Tensor<f32>> = vec![img];
    inputs.extend(names.iter().map(|n| weights.params[n].clone()));

    // Stratified deterministic sample: every k-th element of the
    // concatenated parameter vector (the image leaf is excluded).
    let total: usize = inputs.iter().skip(1).map(|t| t.len()).sum();
    let step = ((1.0 / sample_fraction).round() as usize).max(1);
    let mut sample = Vec::with_capacity(total / step + 1);
    let mut global = 0usize;
    for (ti, t) in inputs.iter().enumerate().skip(1) {
        for ei in 0..t.len() {
            if global % step == 0 {
                sample.push((ti, ei));
            }
            global += 1;
        }
    }

    let variant = weights.variant;
    fd_check_generic::<f32, _>(
        &move |g: &mut Graph<f32>, ids: &[TensorId]| {
            let mut leaf_map = LeafMap::new();
            for (i, n) in names.iter().enumerate() {
                leaf_map.insert(n.clone(), ids[i + 1]);
            }
            let built = forward_on_graph(g, &leaf_map, variant, ids[0], ForwardOptions::default()).expect("forward");
            let tgt = g.leaf(target.clone(), false);
            g.mean_abs_diff(built.output, tgt).expect("loss")
        },
        &inputs,
        &sample,
        1e-2,
    )
}

/// Run checks whose name passes `filter`, printing one line per op.
/// Returns `true` when all pass `tol`.
pub fn run_registry(filter: Option<&[String]>, tol_override: Option<f64>) -> bool {
    let mut all_ok = true;
    for check in registry() {
        if let Some(names) = filter {
            if !names.iter().any(|n| n == check.name) {
                continue;
            }
        }
        let tol = tol_override.unwrap_or(check.tol);
        let err = (check.run)();
        let ok = err < tol;
        all_ok &= ok;
        println!("{:<22} worst_rel_err {:.3e}  tol {:.1e}  {}", check.name, err, tol, if ok { "PASS" } else { "FAIL" });
    }
    all_ok
}
