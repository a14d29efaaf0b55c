use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use visaware_core::fusion::{EncoderConfig, VisualEncoder};
use visaware_core::heads::{tag_sequence, TagHead};
use visaware_core::nn::LayerNorm;
use visaware_core::{Graph, ParamStore, Tensor};

const IMAGE_DIM: usize = 5;

fn cfg() -> EncoderConfig {
    EncoderConfig {
        dim: 8,
        heads: 2,
        fusion_heads: 2,
        layers: 2,
        ff_dim: 16,
        max_len: 12,
    }
}

fn build(seed: u64) -> (ParamStore, VisualEncoder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = VisualEncoder::new(&mut store, 20, IMAGE_DIM, &cfg(), &mut rng).unwrap();
    (store, enc)
}

/// Row-wise standardization with unit gain and zero bias.
fn layer_norm_oracle(x: &Tensor) -> Vec<f64> {
    let mut out = Vec::new();
    for row in x.iter_rows() {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        out.extend(
            row.iter()
                .map(|v| (v - mean) / (var + LayerNorm::EPS).sqrt()),
        );
    }
    out
}

fn permuted(images: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let mut order: Vec<usize> = (0..images.rows()).collect();
    order.shuffle(rng);
    images.select_rows(&order).unwrap()
}

#[test]
fn no_images_reduces_to_normalized_text_states() {
    let (store, enc) = build(1);
    let mut g = Graph::new();
    let out = enc.forward(&mut g, &store, &[3, 4, 5, 6, 7], None).unwrap();
    assert!(g.value(out.attended).data().iter().all(|&v| v == 0.0));
    let want = layer_norm_oracle(g.value(out.hidden));
    let err = g
        .value(out.fused)
        .data()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-9, "{err}");
}

#[test]
fn identical_images_give_identical_attended_rows() {
    let (store, enc) = build(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let one = Tensor::randn(&[IMAGE_DIM], 1.0, &mut rng);
    let images = Tensor::from_rows(&[one.data(), one.data(), one.data()]).unwrap();
    let single = Tensor::from_rows(&[one.data()]).unwrap();
    let mut g = Graph::new();
    let many = enc
        .forward(&mut g, &store, &[4, 5, 6], Some(&images))
        .unwrap();
    let alone = enc
        .forward(&mut g, &store, &[4, 5, 6], Some(&single))
        .unwrap();
    let a = g.value(many.attended);
    for r in 1..a.rows() {
        assert!(a
            .row(r)
            .iter()
            .zip(a.row(0))
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }
    assert!(a.max_abs_diff(g.value(alone.attended)) < 1e-12);
    for w in &many.cross_attention {
        assert!(g
            .value(*w)
            .data()
            .iter()
            .all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
    }
}

#[test]
fn projection_commutes_with_row_permutation() {
    let (store, enc) = build(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = Tensor::randn(&[6, IMAGE_DIM], 1.0, &mut rng);
    let order = [3, 0, 5, 1, 4, 2];
    let mut g = Graph::new();
    let a = g.constant(images.clone());
    let b = g.constant(images.select_rows(&order).unwrap());
    let pa = enc.images.forward(&mut g, &store, a).unwrap();
    let pb = enc.images.forward(&mut g, &store, b).unwrap();
    assert_eq!(g.value(pa).select_rows(&order).unwrap(), *g.value(pb));
    assert!(g.value(pa).data().iter().all(|&v| v >= 0.0));
}

#[test]
fn tag_predictions_ignore_image_order() {
    let (mut store, enc) = build(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let head = TagHead::new(&mut store, "tags", 8, 4, &mut rng).unwrap();
    let images = Tensor::randn(&[5, IMAGE_DIM], 1.0, &mut rng);
    let tokens = [2, 9, 11, 4];
    let base = tag_sequence(
        &enc.encode(&store, &tokens, Some(&images)).unwrap(),
        &head,
        &store,
    )
    .unwrap();
    for _ in 0..10 {
        let p = permuted(&images, &mut rng);
        let other = tag_sequence(
            &enc.encode(&store, &tokens, Some(&p)).unwrap(),
            &head,
            &store,
        )
        .unwrap();
        assert!(base.max_abs_diff(&other) <= 1e-9);
        for i in 0..tokens.len() {
            assert_eq!(
                visaware_core::heads::argmax(base.row(i)),
                visaware_core::heads::argmax(other.row(i))
            );
        }
    }
}

#[test]
fn images_change_the_fused_states() {
    let (store, enc) = build(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let images = Tensor::randn(&[3, IMAGE_DIM], 1.0, &mut rng);
    let with = enc.encode(&store, &[5, 6, 7], Some(&images)).unwrap();
    let without = enc.encode(&store, &[5, 6, 7], None).unwrap();
    assert!(with.value.max_abs_diff(&without.value) > 1e-3);
}

#[test]
fn overlong_or_empty_sentences_are_rejected() {
    let (store, enc) = build(10);
    assert!(enc.encode(&store, &[], None).is_err());
    assert!(enc.encode(&store, &[1; 13], None).is_err());
    assert!(enc.encode(&store, &[25], None).is_err());
    let wrong = Tensor::zeros(&[2, IMAGE_DIM + 1]);
    assert!(enc.encode(&store, &[1, 2], Some(&wrong)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fused_output_is_permutation_invariant(
        m in 1usize..8,
        len in 1usize..10,
        seed in 0u64..10_000,
    ) {
        let (store, enc) = build(seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Tensor::randn(&[m, IMAGE_DIM], 1.0, &mut rng);
        let tokens: Vec<usize> = (0..len).map(|i| (i * 7 + seed as usize) % 20).collect();
        let base = enc.encode(&store, &tokens, Some(&images)).unwrap();
        let p = permuted(&images, &mut rng);
        let other = enc.encode(&store, &tokens, Some(&p)).unwrap();
        prop_assert!(base.value.max_abs_diff(&other.value) <= 1e-9);
    }
}
