use std::collections::BTreeSet;

use posenc::attention::multi_head_self_attention;
use posenc::model::{AblationConfig, Branch, LateFusion, Model, ModelDims, ModelInput};
use posenc::recurrent::bilstm;
use posenc::streams::PoseTensor;
use posenc::verify::{run_gradcheck, Scope};
use posenc::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VARIANTS: [&str; 4] = ["baseline", "seu", "seu+teu", "full"];

fn pose(dims: &ModelDims, rng: &mut ChaCha8Rng) -> PoseTensor {
    PoseTensor::new(Tensor::uniform([dims.frames, dims.joints, dims.coords], 1.0, rng)).unwrap()
}

fn names(m: &Model) -> BTreeSet<String> {
    m.params.names().map(str::to_string).collect()
}

fn pose_branch_out(model: &Model, p: &PoseTensor) -> Tensor {
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let x = tape.constant(p.tensor());
    let out = model.pose_branch(&mut tape, &bound, x).unwrap();
    tape.value(out).clone()
}

#[test]
fn default_pose_branch_shape() {
    let dims = ModelDims::default();
    let model = Model::build(AblationConfig::full(Branch::Pose), dims.clone(), 0).unwrap();
    let p = pose(&dims, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(pose_branch_out(&model, &p).shape(), &[84, 256]);
    let probs = model.predict(ModelInput { pose: Some(&p), features: None }).unwrap();
    assert_eq!(probs.len(), 4);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

#[test]
fn default_two_branch_shapes() {
    let dims = ModelDims::default();
    let model = Model::build(AblationConfig::full(Branch::Both), dims.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = pose(&dims, &mut rng);
    let f = Tensor::uniform([20, 1536], 1.0, &mut rng);
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let (pv, fv) = (tape.constant(p.tensor()), tape.constant(&f));
    let po = model.pose_branch(&mut tape, &bound, pv).unwrap();
    let ro = model.rgb_branch(&mut tape, &bound, fv).unwrap();
    assert_eq!(tape.shape(po), &[84, 256]);
    assert_eq!(tape.shape(ro), &[20, 256]);
    let fused = tape.concat(&[po, ro], 0).unwrap();
    assert_eq!(tape.shape(fused), &[104, 256]);
    let probs = model.late_fuse_and_classify(&mut tape, &bound, Some(po), Some(ro)).unwrap();
    assert_eq!(tape.shape(probs), &[4]);
    assert!((tape.value(probs).data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

#[test]
fn rgb_width_must_be_the_feature_dimension() {
    let dims = ModelDims::tiny();
    let model = Model::build(AblationConfig::full(Branch::Rgb), dims.clone(), 0).unwrap();
    let f = Tensor::zeros([dims.frames, dims.rgb_dim + 1]);
    let err = model.predict(ModelInput { pose: None, features: Some(&f) }).unwrap_err();
    assert!(matches!(err, posenc::Error::Dimension { .. }), "{err}");
}

#[test]
fn variants_nest_by_parameter_name() {
    for branch in [Branch::Pose, Branch::Both] {
        for dims in [ModelDims::default(), ModelDims::tiny()] {
            let models: Vec<Model> = VARIANTS
                .iter()
                .map(|v| Model::build(AblationConfig::variant(v, branch).unwrap(), dims.clone(), 3).unwrap())
                .collect();
            for pair in models.windows(2) {
                assert!(names(&pair[0]).is_subset(&names(&pair[1])));
                assert!(pair[0].parameter_count() <= pair[1].parameter_count());
            }
            assert!(models[0].parameter_count() < models[1].parameter_count());
            let attention = names(&models[3]).difference(&names(&models[2])).cloned().collect::<Vec<_>>();
            assert!(!attention.is_empty() && attention.iter().all(|n| n.contains(".attention.")));
        }
    }
}

#[test]
fn builds_are_deterministic_in_the_seed() {
    let a = Model::build(AblationConfig::full(Branch::Both), ModelDims::tiny(), 9).unwrap();
    let b = Model::build(AblationConfig::full(Branch::Both), ModelDims::tiny(), 9).unwrap();
    let c = Model::build(AblationConfig::full(Branch::Both), ModelDims::tiny(), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params, c.params);
}

#[test]
fn attention_block_is_the_only_difference_to_the_teu_variant() {
    let dims = ModelDims::tiny();
    let full = Model::build(AblationConfig::full(Branch::Pose), dims.clone(), 5).unwrap();
    let mut no_att = Model::build(AblationConfig::variant("seu+teu", Branch::Pose).unwrap(), dims.clone(), 6).unwrap();
    for name in names(&no_att) {
        no_att.params.set(&name, full.params.get(&name).unwrap().clone()).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let p = pose(&dims, &mut rng);
        let mut tape = Tape::new();
        let bound = full.params.bind_frozen(&mut tape);
        let x = tape.constant(p.tensor());
        let feats = full.pose_features(&mut tape, &bound, x).unwrap();
        let plain = bilstm(&mut tape, &bound, "pose.lstm.fwd", "pose.lstm.bwd", feats).unwrap();
        let att = multi_head_self_attention(&mut tape, &bound, "pose.attention", feats, &dims.pose_attention()).unwrap();
        let attended = bilstm(&mut tape, &bound, "pose.lstm.fwd", "pose.lstm.bwd", att).unwrap();

        let full_out = pose_branch_out(&full, &p);
        let no_att_out = pose_branch_out(&no_att, &p);
        assert!(full_out.max_abs_diff(tape.value(attended)) <= 1e-10);
        assert!(no_att_out.max_abs_diff(tape.value(plain)) <= 1e-10);
        assert!(full_out.max_abs_diff(&no_att_out) > 1e-6);
    }
}

#[test]
fn zero_classifier_gives_uniform_probabilities() {
    let dims = ModelDims::tiny();
    let mut model = Model::build(AblationConfig::full(Branch::Pose), dims.clone(), 0).unwrap();
    for name in ["classifier.weight", "classifier.bias"] {
        model.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let p = pose(&dims, &mut ChaCha8Rng::seed_from_u64(8));
    let probs = model.predict(ModelInput { pose: Some(&p), features: None }).unwrap();
    let u = 1.0 / dims.num_classes as f64;
    assert!(probs.iter().all(|&v| (v - u).abs() < 1e-15));
}

#[test]
fn attention_only_rgb_branch_permutes_with_its_frames() {
    let dims = ModelDims::tiny();
    let ablation = AblationConfig {
        bypass_recurrent: true,
        ..AblationConfig::full(Branch::Rgb)
    };
    let model = Model::build(ablation, dims.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let f = Tensor::uniform([dims.frames, dims.rgb_dim], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..dims.frames).collect();
        perm.shuffle(&mut rng);
        let pf = Tensor::from_rows(&perm.iter().map(|&i| f.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind_frozen(&mut tape);
        let (fv, pv) = (tape.constant(&f), tape.constant(&pf));
        let out = model.rgb_branch(&mut tape, &bound, fv).unwrap();
        let out_p = model.rgb_branch(&mut tape, &bound, pv).unwrap();
        let (out, out_p) = (tape.value(out), tape.value(out_p));
        for (row, &src) in perm.iter().enumerate() {
            for (a, b) in out_p.row(row).iter().zip(out.row(src)) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn model_gradients_cover_every_parameter_tensor() {
    let report = run_gradcheck(Scope::Model, 0).unwrap();
    let audited: BTreeSet<String> = report.iter().map(|c| c.component.clone()).collect();
    let model = Model::build(AblationConfig::full(Branch::Both), ModelDims::tiny(), 0).unwrap();
    assert_eq!(audited, names(&model));
    for c in &report {
        assert!(c.passed(), "{}: {:e}", c.component, c.max_rel_error);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn classifier_output_is_a_distribution(
        seed in any::<u64>(),
        scale in 0.01f64..50.0,
        branch in prop_oneof![Just(Branch::Pose), Just(Branch::Rgb), Just(Branch::Both)],
        variant in 0usize..4,
        feature_fusion in any::<bool>(),
    ) {
        let dims = ModelDims {
            late_fusion: if feature_fusion { LateFusion::Feature } else { LateFusion::Time },
            ..ModelDims::tiny()
        };
        let model = Model::build(AblationConfig::variant(VARIANTS[variant], branch).unwrap(), dims.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let p = PoseTensor::new(Tensor::uniform([dims.frames, dims.joints, dims.coords], scale, &mut rng)).unwrap();
        let f = Tensor::uniform([dims.frames, dims.rgb_dim], scale, &mut rng);
        let probs = model.predict(ModelInput { pose: Some(&p), features: Some(&f) }).unwrap();
        prop_assert_eq!(probs.len(), dims.num_classes);
        prop_assert!(probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
