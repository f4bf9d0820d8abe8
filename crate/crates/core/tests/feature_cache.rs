use std::collections::BTreeMap;

use msseg_core::cascade::{CascadeModel, FeatureCache};
use msseg_core::ops::Dims3;
use msseg_core::phantom::{generate_case, DomainSpec, PhantomSpec};
use msseg_core::{Case, Model, PostprocessConfig};

fn case(seed: u64) -> Case {
    let spec = PhantomSpec {
        dims: Dims3::cube(12),
        brain_radii: [0.6, 0.7, 0.6],
        lesion_count: (1, 2),
        lesion_radius: (1.0, 1.5),
        lesion_volume_ml: (0.005, 0.02),
        ..PhantomSpec::default()
    };
    generate_case(&spec, &DomainSpec::reference(), seed).unwrap()
}

/// Gate at 0 so every brain voxel reaches net 2.
fn cascade(net1: Model<f32>, net2: Model<f32>) -> CascadeModel {
    CascadeModel { net1, net2, post: PostprocessConfig::default(), stage1_threshold: 0.0, provenance: BTreeMap::new() }
}

/// Same conv stage, different fully connected weights.
fn retuned(model: &Model<f32>) -> Model<f32> {
    let mut m = model.clone();
    let fc = m.feature_boundary();
    for v in m.param_mut(fc, 0).data_mut() {
        *v *= -1.5;
    }
    m
}

#[test]
fn cached_inference_is_bitwise_equal_to_direct() {
    let c = case(1);
    let model = cascade(Model::canonical(3), Model::canonical(4));
    let cache = FeatureCache::new();
    let direct = model.infer_detailed(&c).unwrap();
    let cold = model.infer_cached(&c, &cache).unwrap();
    let warm = model.infer_cached(&c, &cache).unwrap();
    for out in [&cold, &warm] {
        assert_eq!(out.stage1.data(), direct.stage1.data());
        assert_eq!(out.probability.data(), direct.probability.data());
    }
    assert_eq!(cache.len(), 2 * c.brain_mask.count());
}

#[test]
fn shared_conv_stage_reuses_entries() {
    let c = case(2);
    let source = cascade(Model::canonical(5), Model::canonical(6));
    let adapted = cascade(retuned(&source.net1), retuned(&source.net2));
    let cache = FeatureCache::new();
    source.infer_cached(&c, &cache).unwrap();
    let filled = cache.len();
    let out = adapted.infer_cached(&c, &cache).unwrap();
    assert_eq!(cache.len(), filled);
    assert_eq!(out.probability.data(), adapted.infer_detailed(&c).unwrap().probability.data());
    assert_ne!(out.probability.data(), source.infer_detailed(&c).unwrap().probability.data());
}

#[test]
fn batch_size_does_not_change_scores() {
    let c = case(3);
    let model = cascade(Model::canonical(7), Model::canonical(8));
    let whole = model.infer_detailed(&c).unwrap();
    let small = model.infer_batched(&c, 7).unwrap();
    assert_eq!(whole.probability.data(), small.probability.data());
}
