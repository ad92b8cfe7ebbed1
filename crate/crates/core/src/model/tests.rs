use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::compute::{dot, matvec_acc, relu};
use crate::error::Error;
use crate::features::VisualFeature;
use crate::text::{TokenSequence, BOS, EOS, UNK};

const FEATURE_DIM: usize = 12;

fn dims(vocab: usize) -> Dims {
    Dims {
        vocab,
        embed: 4,
        state: 6,
        feature: FEATURE_DIM,
    }
}

fn random_params(variant: Variant, d: Dims, seed: u64) -> ModelParams {
    let mut p = ModelParams::zeros(variant, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in p.tensors_mut() {
        t.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    }
    p
}

fn feature(seed: u64) -> VisualFeature {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits: Vec<bool> = (0..FEATURE_DIM).map(|_| rng.random_bool(0.4)).collect();
    VisualFeature::from_bits(&bits)
}

fn sampler(vocab: usize) -> NegativeSampler {
    let mut w: Vec<f64> = (0..vocab).map(|i| ((i + 2) as f64).ln()).collect();
    w[BOS] = 0.0;
    w[UNK] = 0.0;
    NegativeSampler::from_weights(w).unwrap()
}

fn seq(ids: &[usize]) -> TokenSequence {
    let mut v = vec![BOS];
    v.extend_from_slice(ids);
    v.push(EOS);
    TokenSequence::new(v).unwrap()
}

#[test]
fn gradients_match_finite_differences_for_every_variant() {
    let v = 15;
    let s = sampler(v);
    let cfg = LossConfig {
        sampler: &s,
        num_negatives: 5,
        lambda: 0.7,
    };
    for (k, variant) in Variant::ALL.into_iter().enumerate() {
        let p = random_params(variant, dims(v), 10 + k as u64);
        let f = variant.uses_features();
        let batch = vec![
            (seq(&[4, 7, UNK, 9]), f.then(|| feature(1))),
            (seq(&[12, 3, 3]), f.then(|| feature(2))),
        ];
        let rep = check_model_gradients(&p, &batch, &cfg, 77, 1e-4, 1e-4).unwrap();
        assert!(rep.passed(), "{variant}: {rep:?}");
    }
}

#[test]
fn zero_visual_projection_reduces_a_to_text() {
    let v = 12;
    let s = sampler(v);
    let cfg = LossConfig {
        sampler: &s,
        num_negatives: 4,
        lambda: 1.0,
    };
    let text = random_params(Variant::Text, dims(v), 3);
    let mut a = ModelParams::zeros(Variant::A, dims(v));
    for ((_, dst), (_, src)) in a.tensors_mut().into_iter().zip(text.tensors()) {
        dst.copy_from_slice(src);
    }
    assert!(a.w_image.as_ref().unwrap().as_slice().iter().all(|&x| x == 0.0));
    let s1 = seq(&[5, 6, 7]);
    let f = feature(4);
    let lt = sentence_forward(&text, &s1, None, &cfg, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
    let la = sentence_forward(&a, &s1, Some(&f), &cfg, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
    assert_eq!(lt.total, la.total);
}

#[test]
fn lambda_zero_removes_aux_term() {
    let v = 12;
    let s = sampler(v);
    let p = random_params(Variant::B, dims(v), 5);
    let sq = seq(&[3, 4, 5, 6]);
    let f = feature(9);
    let with = |lambda| {
        let cfg = LossConfig {
            sampler: &s,
            num_negatives: 4,
            lambda,
        };
        sentence_forward(&p, &sq, Some(&f), &cfg, &mut ChaCha8Rng::seed_from_u64(2), None).unwrap()
    };
    let zero = with(0.0);
    assert_eq!(zero.aux, 0.0);
    assert_eq!(zero.total, zero.base);
    let one = with(1.0);
    assert_eq!(one.base, zero.base);
    assert!(one.aux > 0.0);
}

#[test]
fn model_b_aux_is_distance_of_final_state() {
    let v = 10;
    let s = sampler(v);
    let p = random_params(Variant::B, dims(v), 6);
    let sq = seq(&[3, 4]);
    let f = feature(3);
    let cfg = LossConfig {
        sampler: &s,
        num_negatives: 3,
        lambda: 2.0,
    };
    let out = sentence_forward(&p, &sq, Some(&f), &cfg, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
    // Zero start, consume BOS, 3, 4; EOS is never an input.
    let mut h = vec![0.0; 6];
    for &tok in &[BOS, 3, 4] {
        h = gru_step(&p, p.embedding.row(tok), &h).unwrap().0;
    }
    let target = project_image(&p, &f).unwrap().out;
    let dist = h.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!((out.aux - 2.0 * dist).abs() < 1e-12);
}

#[test]
fn model_c_aux_vanishes_when_embeddings_match_image() {
    let v = 10;
    let s = sampler(v);
    let mut p = random_params(Variant::C, dims(v), 8);
    let f = feature(5);
    let target = project_image(&p, &f).unwrap().out;
    for w in [3, 4, 5] {
        p.embedding.row_mut(w).copy_from_slice(&target);
    }
    let cfg = LossConfig {
        sampler: &s,
        num_negatives: 3,
        lambda: 1.0,
    };
    let out = sentence_forward(&p, &seq(&[3, 4, 5, UNK]), Some(&f), &cfg, &mut ChaCha8Rng::seed_from_u64(0), None)
        .unwrap();
    assert_eq!(out.aux, 0.0);
    // And the aux gradient at equality is exactly zero.
    let mut tape = GradTape::for_params(&p);
    let cfg0 = LossConfig { lambda: 0.0, ..cfg };
    let mut tape0 = GradTape::for_params(&p);
    sentence_forward(&p, &seq(&[3, 4, 5]), Some(&f), &cfg, &mut ChaCha8Rng::seed_from_u64(1), Some(&mut tape)).unwrap();
    sentence_forward(&p, &seq(&[3, 4, 5]), Some(&f), &cfg0, &mut ChaCha8Rng::seed_from_u64(1), Some(&mut tape0)).unwrap();
    assert_eq!(tape, tape0);
}

#[test]
fn aux_terms_non_negative() {
    let v = 10;
    let s = sampler(v);
    let cfg = LossConfig {
        sampler: &s,
        num_negatives: 3,
        lambda: 1.0,
    };
    for seed in 0..20 {
        for variant in [Variant::B, Variant::C] {
            let p = random_params(variant, dims(v), seed);
            let out = sentence_forward(&p, &seq(&[3, 4, 8]), Some(&feature(seed)), &cfg, &mut ChaCha8Rng::seed_from_u64(seed), None)
                .unwrap();
            assert!(out.aux >= 0.0);
        }
    }
}

#[test]
fn visual_init_examples() {
    let v = 8;
    let mut p = random_params(Variant::A, dims(v), 1);
    let f = feature(2);
    for x in p.w_image.as_mut().unwrap().as_mut_slice() {
        *x = 0.0;
    }
    p.b_image = Some(vec![0.0; 6]);
    assert_eq!(visual_init(&p, Some(&f)).unwrap(), vec![0.0; 6]);

    let p = random_params(Variant::A, dims(v), 3);
    let zero = VisualFeature::zeros(FEATURE_DIM);
    let want: Vec<f64> = p.b_image.as_ref().unwrap().iter().map(|&b| relu(b)).collect();
    assert_eq!(visual_init(&p, Some(&zero)).unwrap(), want);

    for seed in 0..10 {
        let p = random_params(Variant::B, dims(v), seed);
        assert!(visual_init(&p, Some(&feature(seed))).unwrap().iter().all(|&x| x >= 0.0));
    }
    let t = random_params(Variant::Text, dims(v), 0);
    assert_eq!(visual_init(&t, None).unwrap(), vec![0.0; 6]);
    assert!(matches!(visual_init(&p, None), Err(Error::Data(_))));
}

#[test]
fn missing_feature_and_empty_content() {
    let v = 8;
    let s = sampler(v);
    let cfg = LossConfig {
        sampler: &s,
        num_negatives: 3,
        lambda: 1.0,
    };
    let p = random_params(Variant::A, dims(v), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        sentence_forward(&p, &seq(&[3]), None, &cfg, &mut rng, None),
        Err(Error::Data(_))
    ));
    let t = random_params(Variant::Text, dims(v), 1);
    assert!(matches!(
        sentence_forward(&t, &seq(&[]), None, &cfg, &mut rng, None),
        Err(Error::EmptySequence)
    ));
    assert!(matches!(
        sentence_forward(&t, &seq(&[UNK, UNK]), None, &cfg, &mut rng, None),
        Err(Error::EmptySequence)
    ));
}

#[test]
fn embedding_row_edit_moves_tied_logit() {
    let v = 9;
    for variant in [Variant::Text, Variant::A, Variant::ANoShare] {
        let mut p = random_params(variant, dims(v), 4);
        let h: Vec<f64> = (0..6).map(|i| 0.1 * i as f64 - 0.2).collect();
        let mut d = vec![0.0; 4];
        matvec_acc(&p.w_decode, &h, &mut d);
        let w = 5;
        let logit = |p: &ModelParams| dot(p.softmax().row(w), &d) + p.b_softmax[w];
        let before = logit(&p);
        let delta = [0.3, -0.1, 0.25, 0.05];
        for (x, dx) in p.embedding.row_mut(w).iter_mut().zip(&delta) {
            *x += dx;
        }
        let change = logit(&p) - before;
        if variant.shares_softmax() {
            assert!((change - dot(&delta, &d)).abs() < 1e-12);
        } else {
            assert_eq!(change, 0.0);
        }
    }
}

#[test]
fn unit_update_gate_is_identity_carry() {
    let mut p = random_params(Variant::Text, dims(8), 2);
    p.w_update.fill(0.0);
    p.b_update = vec![800.0; 6];
    let h_prev = vec![0.5, -0.25, 0.1, 0.0, 0.9, -0.6];
    let (h, cache) = gru_step(&p, &[1.0, 2.0, -1.0, 0.5], &h_prev).unwrap();
    assert!(cache.update.iter().all(|&u| u == 1.0));
    assert_eq!(h, h_prev);
}
