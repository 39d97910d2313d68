mod common;

use rand::seq::SliceRandom;
use rand::RngExt;
use ribeval::fusion::gradcheck::{check, Instance};
use ribeval::fusion::{fuse, voxelize, ChannelTransform, FeatureGrid, FusionLayer, PointFeatures, Pooling};

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..30 {
        for pooling in [Pooling::Average, Pooling::Max] {
            let r = check(seed, pooling).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }
}

#[test]
fn voxelize_ignores_point_order() {
    let mut rng = common::rng(8);
    for seed in 0..20 {
        let inst = Instance::random(seed, Pooling::Average).unwrap();
        let pf = &inst.points;
        let mut order: Vec<usize> = (0..pf.len()).collect();
        order.shuffle(&mut rng);
        let cp = pf.channels();
        let shuffled = PointFeatures::new(
            order.iter().map(|i| pf.coords()[*i]).collect(),
            order.iter().flat_map(|i| pf.feature(*i).to_vec()).collect(),
            cp,
            pf.extent(),
        )
        .unwrap();
        for pooling in [Pooling::Average, Pooling::Max] {
            let (a, _) = voxelize(pf, inst.resolution, pooling).unwrap();
            let (b, _) = voxelize(&shuffled, inst.resolution, pooling).unwrap();
            assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(a.occupancy(), b.occupancy());
        }
    }
}

fn dyadic(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-64..=64) as f64 / 16.0).collect()
}

#[test]
fn fuse_decomposes_exactly_on_dyadic_values() {
    let mut rng = common::rng(2);
    for _ in 0..50 {
        let (cv, cp, r) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3usize));
        let cells = r * r * r;
        let fv = FeatureGrid::new(cv, r, dyadic(&mut rng, cv * cells)).unwrap();
        let pooled = FeatureGrid::new(cp, r, dyadic(&mut rng, cp * cells)).unwrap();
        let t = ChannelTransform::new(cp, cv, dyadic(&mut rng, cp * cv), dyadic(&mut rng, cv)).unwrap();
        let zero_p = FeatureGrid::zeros(cp, r);
        let with = fuse(&fv, &zero_p, &t).unwrap();
        let without = fuse(&FeatureGrid::zeros(cv, r), &zero_p, &t).unwrap();
        for ((a, b), v) in with.values().iter().zip(without.values()).zip(fv.values()) {
            assert_eq!(a - b, *v);
        }
        let zero_t = fuse(&fv, &pooled, &ChannelTransform::zeros(cp, cv)).unwrap();
        assert_eq!(zero_t.values(), fv.values());
    }
}

#[test]
fn backward_needs_matching_shapes() {
    let inst = Instance::random(1, Pooling::Average).unwrap();
    let mut layer = FusionLayer::new(inst.transform.clone(), inst.resolution, Pooling::Average);
    layer.forward(&inst.voxel, &inst.points).unwrap();
    let wrong = FeatureGrid::zeros(inst.voxel.channels() + 1, inst.resolution);
    assert!(layer.backward(&wrong).is_err());
}

#[test]
fn f32_interface() {
    let pf = PointFeatures::from_f32(&[[0.5, 0.5, 0.5], [0.25, 0.75, 0.5]], &[1.0, 3.0], 1, 1.0).unwrap();
    let (g, _) = voxelize(&pf, 1, Pooling::Average).unwrap();
    assert_eq!(g.to_f32(), vec![2.0f32]);
}
