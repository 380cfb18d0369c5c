// Temporary probe: time the forward graph section by section.
use uattn_core::graph::Graph;
use uattn_core::model::{build_model, ArchVariant};
use uattn_core::rng::SplitMix64;
use uattn_core::Tensor;

#[test]
#[ignore]
fn probe() {
    let w = build_model::<f32>(ArchVariant::UAttention, 32, 1).unwrap();
    let mut rng = SplitMix64::new(3);
    let img = Tensor::<f32>::uniform(&[3, 32, 32], -1.0, 1.0, &mut rng);

    let t0 = std::time::Instant::now();
    let mut g: Graph<f32> = Graph::new();
    let _ids: std::collections::BTreeMap<String, _> =
        w.params.iter().map(|(n, t)| (n.clone(), g.leaf(t.clone(), false))).collect();
    eprintln!("leaf_params: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0);

    let t0 = std::time::Instant::now();
    let _img_leaf = g.leaf(img.clone().reshaped(vec![1, 3, 32, 32]).unwrap(), false);
    eprintln!("img leaf: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0);

    use uattn_core::model::{forward, ForwardOptions};
    for _ in 0..3 {
        let t0 = std::time::Instant::now();
        let _ = forward(&img, &w, ForwardOptions::default()).unwrap();
        eprintln!("full forward: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0);
    }
}
