use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visaware_core::embedding::{
    mine_hard_negative, train_embedding, triplet_loss, weldon_pool, EmbeddingConfig,
    EmbeddingModel, EmbeddingTrainer, SharedEmbedding, TrainingPair, WeldonConfig,
};
use visaware_core::{Error, Tensor};

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full sort per channel, top values summed descending, bottom ascending.
fn weldon_oracle(regions: &Tensor, cfg: &WeldonConfig) -> Vec<f64> {
    let (r, d) = (regions.shape()[0], regions.shape()[1]);
    (0..d)
        .map(|c| {
            let mut col: Vec<f64> = (0..r).map(|i| regions.at(i, c)).collect();
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut top = 0.0;
            for v in &col[..cfg.k_plus] {
                top += v;
            }
            let mut out = top / cfg.k_plus as f64;
            if cfg.k_minus > 0 {
                col.reverse();
                let mut bottom = 0.0;
                for v in &col[..cfg.k_minus] {
                    bottom += v;
                }
                out += cfg.beta * (bottom / cfg.k_minus as f64);
            }
            out
        })
        .collect()
}

fn small_config() -> EmbeddingConfig {
    EmbeddingConfig {
        text_dim: 8,
        shared_dim: 6,
        max_len: 12,
        batch_size: 8,
        epochs: 10,
        ..EmbeddingConfig::default()
    }
}

/// Two clusters of images, captions naming the cluster.
fn toy_pairs(seed: u64) -> (Vec<TrainingPair>, BTreeMap<String, Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [
        Tensor::randn(&[5], 2.0, &mut rng),
        Tensor::randn(&[5], 2.0, &mut rng),
    ];
    let mut pairs = Vec::new();
    let mut images = BTreeMap::new();
    for n in 0..40 {
        let k = n % 2;
        let mut rows = Vec::new();
        for _ in 0..6 {
            let noise = Tensor::randn(&[5], 0.3, &mut rng);
            rows.push(
                centers[k]
                    .data()
                    .iter()
                    .zip(noise.data())
                    .map(|(c, e)| c + e)
                    .collect::<Vec<_>>(),
            );
        }
        let id = format!("img{n}");
        images.insert(id.clone(), Tensor::from_rows(&rows).unwrap());
        let tokens = vec![4 + k, 6 + rng.random_range(0..3), 4 + k];
        pairs.push(TrainingPair { tokens, image: id });
    }
    (pairs, images)
}

#[test]
fn weldon_column_example() {
    let regions = Tensor::new(vec![3, 1], vec![3.0, 1.0, 2.0]).unwrap();
    let cfg = WeldonConfig {
        k_plus: 1,
        k_minus: 1,
        beta: 1.0,
    };
    assert_eq!(weldon_pool(&regions, &cfg).unwrap().data(), &[4.0]);
}

#[test]
fn weldon_random_10x8_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[10, 8], 1.0, &mut rng);
    let cfg = WeldonConfig::default();
    let got = weldon_pool(&x, &cfg).unwrap();
    for (a, b) in got.data().iter().zip(weldon_oracle(&x, &cfg)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn hard_negative_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let anchor =
            SharedEmbedding::normalized(Tensor::randn(&[8], 1.0, &mut rng).into_data()).unwrap();
        let cands: Vec<SharedEmbedding> = (0..32)
            .map(|_| {
                SharedEmbedding::normalized(Tensor::randn(&[8], 1.0, &mut rng).into_data()).unwrap()
            })
            .collect();
        let forbidden: Vec<usize> = (0..3).map(|_| rng.random_range(0..32)).collect();
        let mut best = None;
        for (j, c) in cands.iter().enumerate() {
            if forbidden.contains(&j) {
                continue;
            }
            let s = dot(anchor.as_slice(), c.as_slice());
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        assert_eq!(
            mine_hard_negative(&anchor, &cands, &forbidden).unwrap(),
            best.unwrap().0
        );
    }
    let a = SharedEmbedding::normalized(vec![1.0, 0.0]).unwrap();
    let same = vec![a.clone(), a.clone()];
    assert_eq!(mine_hard_negative(&a, &same, &[]).unwrap(), 0);
    assert!(matches!(
        mine_hard_negative(&a, &same, &[0, 1]),
        Err(Error::NoNegative)
    ));
}

#[test]
fn training_lowers_the_loss_and_is_deterministic() {
    let (pairs, images) = toy_pairs(5);
    let (m1, log1) = train_embedding(&pairs, &images, 10, &small_config(), 11).unwrap();
    let (m2, log2) = train_embedding(&pairs, &images, 10, &small_config(), 11).unwrap();
    assert!(
        log1.epoch_losses[9] < log1.epoch_losses[0],
        "{:?}",
        log1.epoch_losses
    );
    assert_eq!(log1, log2);
    assert!(m1.store.bit_identical(&m2.store));
}

#[test]
fn unknown_image_is_an_ingestion_error() {
    let (mut pairs, images) = toy_pairs(5);
    pairs[3].image = "nowhere".into();
    assert!(matches!(
        train_embedding(&pairs, &images, 10, &small_config(), 1),
        Err(Error::Ingestion(_))
    ));
    assert!(matches!(
        train_embedding(&[], &images, 10, &small_config(), 1),
        Err(Error::Ingestion(_))
    ));
}

#[test]
fn aligned_paths_with_zero_margin_do_not_move() {
    let mut cfg = small_config();
    cfg.alpha = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = EmbeddingModel::new(cfg, 10, 5, &mut rng).unwrap();
    // zero token table: every sentence maps to the projection bias; the
    // image projection is reduced to the same bias
    let b = Tensor::randn(&[6], 1.0, &mut rng);
    let s = &mut model.store;
    s.set(model.text.embed, Tensor::zeros(&[10, 8])).unwrap();
    s.set(model.text.projection.bias.unwrap(), b.clone())
        .unwrap();
    s.set(model.image.projection.weight, Tensor::zeros(&[5, 6]))
        .unwrap();
    s.set(model.image.projection.bias.unwrap(), b).unwrap();
    let before = model.store.clone();
    let mut trainer = EmbeddingTrainer::new(model).unwrap();
    let texts: Vec<&[usize]> = vec![&[4, 5], &[6], &[7, 8, 9]];
    let pooled = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let (loss, _) = trainer.step(&texts, &pooled, &[0, 1, 2]).unwrap().unwrap();
    assert_eq!(loss, 0.0);
    assert!(trainer.model.store.bit_identical(&before));
}

proptest! {
    #[test]
    fn weldon_equals_oracle(r in 2usize..12, d in 1usize..6, kp in 1usize..6, km in 0usize..6, beta in -1.0f64..2.0, seed in 0u64..10_000) {
        prop_assume!(kp + km <= r);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[r, d], 1.0, &mut rng);
        let cfg = WeldonConfig { k_plus: kp, k_minus: km, beta };
        let got = weldon_pool(&x, &cfg).unwrap();
        let want = weldon_oracle(&x, &cfg);
        prop_assert_eq!(got.data(), want.as_slice());
    }

    #[test]
    fn triplet_loss_is_a_hinge(
        a in prop::collection::vec(-1.0f64..1.0, 4),
        b in prop::collection::vec(-1.0f64..1.0, 4),
        c in prop::collection::vec(-1.0f64..1.0, 4),
        alpha in 0.0f64..1.0,
    ) {
        prop_assume!([&a, &b, &c].iter().all(|v| dot(v, v) > 1e-3));
        let (x, y, z) = (unit(a), unit(b), unit(c));
        let l = triplet_loss(&x, &y, &z, alpha).unwrap();
        prop_assert!(l >= 0.0);
        let margin = dot(&x, &y) - dot(&x, &z);
        prop_assert_eq!(l == 0.0, margin >= alpha);
    }

    #[test]
    fn triplet_loss_is_rotation_invariant(
        a in prop::collection::vec(-1.0f64..1.0, 3),
        b in prop::collection::vec(-1.0f64..1.0, 3),
        c in prop::collection::vec(-1.0f64..1.0, 3),
        theta in 0.0f64..6.3,
        phi in 0.0f64..6.3,
    ) {
        prop_assume!([&a, &b, &c].iter().all(|v| dot(v, v) > 1e-3));
        let rot = |v: &[f64]| {
            // rotation about z then about x
            let (s, k) = theta.sin_cos();
            let (x, y, z) = (k * v[0] - s * v[1], s * v[0] + k * v[1], v[2]);
            let (s, k) = phi.sin_cos();
            vec![x, k * y - s * z, s * y + k * z]
        };
        let (x, y, z) = (unit(a), unit(b), unit(c));
        let l = triplet_loss(&x, &y, &z, 0.2).unwrap();
        let lr = triplet_loss(&rot(&x), &rot(&y), &rot(&z), 0.2).unwrap();
        prop_assert!((l - lr).abs() < 1e-12);
    }

    #[test]
    fn text_embeddings_have_unit_norm(tokens in prop::collection::vec(0usize..10, 1..12), seed in 0u64..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = EmbeddingModel::new(small_config(), 10, 5, &mut rng).unwrap();
        let e = model.encode_text(&tokens).unwrap();
        let n = dot(e.as_slice(), e.as_slice()).sqrt();
        prop_assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn image_embeddings_have_unit_norm(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = EmbeddingModel::new(small_config(), 10, 5, &mut rng).unwrap();
        let regions = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let e = model.encode_image(&regions).unwrap();
        prop_assert!((dot(e.as_slice(), e.as_slice()).sqrt() - 1.0).abs() < 1e-6);
    }
}
