mod common;

use common::{flatten, max_abs_diff, tiny};
use legrad_core::model::{Classifier, ClassifierKind, ModelBundle, Pooling};
use legrad_core::tensor::{Tensor, TensorContainer};
use legrad_core::Error;
use proptest::prelude::*;

fn both_poolings() -> [Pooling; 2] {
    [Pooling::ClsToken, Pooling::AttnPooler]
}

#[test]
fn zero_image_and_kernel_embed_to_positions() {
    let mut m = tiny(1, 1, 1, 8, 4, Pooling::ClsToken);
    m.weights.patch_embed.weight =
        Tensor::zeros(m.weights.patch_embed.weight.shape().to_vec()).unwrap();
    m.weights.patch_embed.bias = Some(Tensor::zeros([8]).unwrap());
    let size = m.config.image_size;
    let z0 = m.embed(&Tensor::zeros([3, size, size]).unwrap()).unwrap();
    let mut expected = m.weights.pos_embed.clone();
    let cls = m.weights.cls_token.as_ref().unwrap();
    for (e, c) in expected.row_mut(0).iter_mut().zip(cls.data()) {
        *e += c;
    }
    assert_eq!(z0, expected);
}

#[test]
fn single_nonzero_patch_changes_one_row() {
    let m = tiny(2, 1, 1, 8, 9, Pooling::ClsToken);
    let size = m.config.image_size;
    let zero = Tensor::zeros([3, size, size]).unwrap();
    let mut one = zero.clone();
    // Pixel (5, 6) sits in grid cell (1, 1), patch 4, token 5.
    one.data_mut()[size * size + 5 * size + 6] = 1.0;
    let (a, b) = (m.embed(&zero).unwrap(), m.embed(&one).unwrap());
    let changed: Vec<usize> = (0..m.config.num_tokens())
        .filter(|&i| a.row(i) != b.row(i))
        .collect();
    assert_eq!(changed, vec![5]);
}

#[test]
fn embed_matches_per_patch_oracle() {
    for pooling in both_poolings() {
        let m = tiny(3, 1, 2, 8, 16, pooling);
        let image = common::image_for(&m, 3);
        let z0 = m.embed(&image).unwrap();
        let oracle = flatten(&common::embed(&m, &image));
        assert!(max_abs_diff(z0.data(), &oracle) <= 1e-6);
    }
}

#[test]
fn zero_layer_trace_is_just_the_embedding() {
    let mut m = tiny(4, 1, 1, 8, 4, Pooling::ClsToken);
    m.config.layers = 0;
    m.weights.blocks.clear();
    let z0 = m.embed(&common::image_for(&m, 4)).unwrap();
    let trace = m.forward_trace(&z0).unwrap();
    assert_eq!(trace.tokens, vec![z0]);
    assert!(trace.blocks.is_empty());
    assert_eq!(trace.attention_maps().count(), 0);
}

#[test]
fn attention_rows_are_stochastic() {
    for seed in 0..6 {
        for pooling in both_poolings() {
            let m = tiny(seed, 3, 2, 8, 9, pooling);
            let trace = m
                .forward_trace(&m.embed(&common::image_for(&m, seed)).unwrap())
                .unwrap();
            let mut maps: Vec<&Tensor<f64>> = trace.attention_maps().collect();
            if pooling == Pooling::AttnPooler {
                maps.extend((0..=3).map(|l| trace.pooler_attention(l).unwrap()));
            }
            for a in maps {
                let cols = a.shape()[2];
                for row in a.data().chunks(cols) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
                    assert!(row.iter().all(|&p| p >= 0.0));
                }
            }
        }
    }
}

#[test]
fn forward_matches_straight_line_reference() {
    for pooling in both_poolings() {
        let m = tiny(5, 2, 2, 8, 4, pooling);
        let image = common::image_for(&m, 5);
        let trace = m.forward_trace(&m.embed(&image).unwrap()).unwrap();
        let (zs, maps) = common::forward(&m, &image);
        for l in 0..=2 {
            assert!(
                max_abs_diff(trace.tokens[l].data(), &flatten(&zs[l])) <= 1e-6,
                "Z^{l}"
            );
        }
        for l in 1..=2 {
            let oracle: Vec<f64> = maps[l - 1].iter().flat_map(flatten).collect();
            assert!(
                max_abs_diff(trace.attention(l).data(), &oracle) <= 1e-6,
                "A^{l}"
            );
        }
        let embedding = common::head(&m, &zs[2]);
        assert!(max_abs_diff(&trace.heads[2].embedding, &embedding) <= 1e-6);
        assert!(max_abs_diff(&m.image_embedding(&image).unwrap(), &embedding) <= 1e-6);
    }
}

#[test]
fn non_finite_activation_names_the_layer() {
    let mut m = tiny(6, 3, 1, 8, 4, Pooling::ClsToken);
    m.weights.blocks[1].fc2.weight = m.weights.blocks[1].fc2.weight.map(|_| f64::MAX);
    let err = m
        .forward_trace(&m.embed(&common::image_for(&m, 6)).unwrap())
        .unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteActivation { layer: 2, .. }),
        "{err}"
    );
}

#[test]
fn trace_reproduces_every_layer_bitwise() {
    for pooling in both_poolings() {
        let m = tiny(7, 3, 2, 12, 9, pooling);
        let trace = m
            .forward_trace(&m.embed(&common::image_for(&m, 7)).unwrap())
            .unwrap();
        for l in 1..=3 {
            let (z, cache) = m.block_forward(l, &trace.tokens[l - 1], None).unwrap();
            assert_eq!(z, trace.tokens[l]);
            assert_eq!(cache, trace.blocks[l - 1]);
        }
    }
}

#[test]
fn f32_and_f64_forwards_agree() {
    for pooling in both_poolings() {
        let m64 = tiny(8, 3, 2, 16, 16, pooling);
        let m32: ModelBundle<f32> = m64.cast().unwrap();
        let image = common::image_for(&m64, 8);
        let image32 = Tensor::new(
            image.shape().to_vec(),
            image.data().iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let t64 = m64.forward_trace(&m64.embed(&image).unwrap()).unwrap();
        let t32 = m32.forward_trace(&m32.embed(&image32).unwrap()).unwrap();
        let widened: Vec<f64> = t32
            .final_tokens()
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        assert!(max_abs_diff(t64.final_tokens().data(), &widened) <= 1e-3);
    }
}

// Pooling heads.

#[test]
fn pool_cls_identity_head_returns_class_token() {
    let mut m = tiny(9, 2, 2, 8, 4, Pooling::ClsToken);
    m.weights.norm = None;
    m.weights.proj = Some(Tensor::eye(8).unwrap());
    let trace = m
        .forward_trace(&m.embed(&common::image_for(&m, 9)).unwrap())
        .unwrap();
    assert_eq!(m.pool_cls(&trace).unwrap(), trace.final_tokens().row(0));
    m.weights.proj = None;
    let trace = m
        .forward_trace(&m.embed(&common::image_for(&m, 9)).unwrap())
        .unwrap();
    assert_eq!(m.pool_cls(&trace).unwrap(), trace.final_tokens().row(0));
}

#[test]
fn pool_cls_zero_projection_is_zero() {
    let mut m = tiny(10, 1, 1, 8, 4, Pooling::ClsToken);
    m.weights.proj = Some(Tensor::zeros([8, 8]).unwrap());
    let trace = m
        .forward_trace(&m.embed(&common::image_for(&m, 10)).unwrap())
        .unwrap();
    assert_eq!(m.pool_cls(&trace).unwrap(), vec![0.0; 8]);
}

#[test]
fn pool_cls_matches_composed_oracle() {
    let m = tiny(11, 2, 2, 8, 9, Pooling::ClsToken);
    let trace = m
        .forward_trace(&m.embed(&common::image_for(&m, 11)).unwrap())
        .unwrap();
    let oracle = common::head(&m, &common::to_rows(trace.final_tokens()));
    assert!(max_abs_diff(&m.pool_cls(&trace).unwrap(), &oracle) <= 1e-6);
    let pooler = tiny(11, 2, 2, 8, 9, Pooling::AttnPooler);
    assert!(matches!(
        pooler.pool_cls(&trace),
        Err(Error::WrongPooling { .. })
    ));
}

#[test]
fn pool_attn_zero_keys_average_values() {
    let mut m = tiny(12, 1, 2, 8, 9, Pooling::AttnPooler);
    let pool = m.weights.pooler.as_mut().unwrap();
    pool.key.weight = Tensor::zeros([8, 8]).unwrap();
    let tokens = common::to_rows(
        &Tensor::new([9, 8], common::image_for(&m, 12).data()[..72].to_vec()).unwrap(),
    );
    let t = Tensor::new([9, 8], flatten(&tokens)).unwrap();
    let (pooled, attn) = m.pool_attn(&t).unwrap();
    assert!(attn.data().iter().all(|&a| (a - 1.0 / 9.0).abs() < 1e-15));
    let v = &m.weights.pooler.as_ref().unwrap().value;
    let mut mean = vec![0.0; 8];
    for r in &tokens {
        for (m, x) in mean.iter_mut().zip(common::linear(&v.weight, None, r)) {
            *m += x / 9.0;
        }
    }
    assert!(max_abs_diff(&pooled, &mean) <= 1e-12);
}

#[test]
fn pool_attn_single_token() {
    let m = tiny(13, 1, 1, 8, 1, Pooling::AttnPooler);
    let z = Tensor::new([1, 8], (0..8).map(|i| i as f64 / 4.0 - 1.0).collect()).unwrap();
    let (pooled, attn) = m.pool_attn(&z).unwrap();
    assert_eq!(attn.shape(), [1, 1, 1]);
    assert_eq!(attn.data(), [1.0]);
    let wv = common::linear(
        &m.weights.pooler.as_ref().unwrap().value.weight,
        None,
        z.data(),
    );
    assert!(max_abs_diff(&pooled, &wv) <= 1e-12);
}

#[test]
fn pool_attn_matches_term_by_term() {
    for heads in [1, 2] {
        let mut m = tiny(14, 1, 2, 8, 16, Pooling::AttnPooler);
        m.config.pooler_heads = Some(heads);
        let z = Tensor::new([16, 8], common::image_for(&m, 14).data()[..128].to_vec()).unwrap();
        let (pooled, attn) = m.pool_attn(&z).unwrap();
        let (oracle, maps) = common::pool_minimal(&m, &common::to_rows(&z));
        assert!(max_abs_diff(&pooled, &oracle) <= 1e-6);
        assert!(max_abs_diff(attn.data(), &flatten(&maps)) <= 1e-6);
        assert_eq!(attn.shape(), [heads, 1, 16]);
    }
    let cls = tiny(14, 1, 1, 8, 4, Pooling::ClsToken);
    assert!(cls.pool_attn(&Tensor::zeros([5, 8]).unwrap()).is_err());
}

// Classification.

fn learned(weight: Tensor<f64>) -> Classifier<f64> {
    Classifier {
        name: "c".into(),
        kind: ClassifierKind::LearnedHead,
        labels: Vec::new(),
        weight,
    }
}

#[test]
fn classify_identity_head_is_the_embedding() {
    let m = tiny(15, 1, 1, 4, 1, Pooling::ClsToken);
    let z = [0.5, -1.0, 2.0, 0.25];
    assert_eq!(
        m.classify(&z, &learned(Tensor::eye(4).unwrap())).unwrap(),
        z
    );
}

#[test]
fn classify_orthogonal_column_scores_zero() {
    let m = tiny(15, 1, 1, 4, 1, Pooling::ClsToken);
    let c = Tensor::new([4, 2], vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let y = m.classify(&[3.0, 0.0, 1.0, 1.0], &learned(c)).unwrap();
    assert_eq!(y[0], 0.0);
    assert!(m
        .classify(&[1.0; 3], &learned(Tensor::eye(4).unwrap()))
        .is_err());
}

#[test]
fn text_classifier_is_scale_invariant() {
    let m = tiny(16, 1, 1, 8, 4, Pooling::ClsToken);
    let text = m.classifier(Some("text")).unwrap();
    let z: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 3.0).collect();
    let z10: Vec<f64> = z.iter().map(|v| v * 10.0).collect();
    let (a, b) = (
        m.classify(&z, text).unwrap(),
        m.classify(&z10, text).unwrap(),
    );
    assert!(max_abs_diff(&a, &b) <= 1e-15);
    for c in 0..text.num_classes() {
        let col = text.column(c);
        assert!((col.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-4);
    }
}

proptest! {
    #[test]
    fn permuting_columns_permutes_scores(perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(), seed in 0u64..50) {
        let m = tiny(seed, 1, 1, 8, 4, Pooling::ClsToken);
        let text = m.classifier(Some("text")).unwrap();
        let z = common::image_for(&m, seed).data()[..8].to_vec();
        let mut permuted = text.clone();
        for (new, &old) in perm.iter().enumerate() {
            for r in 0..8 {
                permuted.weight.data_mut()[r * 5 + new] = text.weight.data()[r * 5 + old];
            }
        }
        let y = m.classify(&z, text).unwrap();
        let yp = m.classify(&z, &permuted).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            prop_assert_eq!(yp[new], y[old]);
        }
    }
}

#[test]
fn bundle_round_trips_through_container_bytes() {
    for pooling in both_poolings() {
        let m = tiny(17, 2, 2, 8, 4, pooling);
        let bytes = m.to_container().unwrap().to_bytes().unwrap();
        let back =
            ModelBundle::<f64>::from_container(&TensorContainer::from_bytes(&bytes).unwrap())
                .unwrap();
        assert_eq!(back, m);
        let again = back.to_container().unwrap().to_bytes().unwrap();
        assert_eq!(again, bytes);
    }
}

#[test]
fn shape_inconsistent_container_is_rejected() {
    let m = tiny(18, 1, 1, 8, 4, Pooling::ClsToken);
    let mut c = m.to_container().unwrap();
    let mut bad = TensorContainer::new(c.metadata.clone());
    for (name, t) in c.tensors() {
        if name == "pos_embed" {
            bad.push(name.clone(), Tensor::<f64>::zeros([3, 8]).unwrap())
                .unwrap();
        } else {
            bad.push(name.clone(), t.clone()).unwrap();
        }
    }
    c = bad;
    assert!(matches!(
        ModelBundle::<f64>::from_container(&c),
        Err(Error::WeightShape { .. })
    ));
}
