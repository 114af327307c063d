use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use ragtta::embedder::EmbeddingVector;
use ragtta::metrics::{
    clap_score, fad, frechet_distance, inception_score, kl_event, posterior_from_embedding, EventPosterior,
    GaussianFit,
};
use ragtta::Error;

fn gaussian_samples(n: usize, mean: &[f64], std: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            mean.iter()
                .zip(std)
                .map(|(m, s)| Normal::new(*m, *s).unwrap().sample(&mut rng))
                .collect()
        })
        .collect()
}

#[test]
fn fad_of_two_draws_from_one_gaussian_is_small() {
    let mean = [0.5, -1.0, 0.0, 2.0, 0.1, 0.0, -0.3, 1.0];
    let std = [1.0, 0.5, 2.0, 1.0, 0.7, 1.2, 0.9, 1.0];
    let a = gaussian_samples(10_000, &mean, &std, 1);
    let b = gaussian_samples(10_000, &mean, &std, 2);
    let d = fad(&a, &b).unwrap();
    assert!(d < 0.05, "fad {d}");
    assert!(fad(&a, &a).unwrap() < 1e-9);
}

/// For diagonal covariances the distance is `|mu1 - mu2|^2 + sum (s1 - s2)^2`.
#[test]
fn frechet_distance_diagonal_closed_form() {
    use nalgebra::{DMatrix, DVector};
    let m1 = DVector::from_vec(vec![1.0, 2.0, -1.0]);
    let m2 = DVector::from_vec(vec![0.0, 2.5, 1.0]);
    let s1 = [1.0f64, 4.0, 0.25];
    let s2 = [9.0f64, 1.0, 0.25];
    let a = GaussianFit::new(m1.clone(), DMatrix::from_diagonal(&DVector::from_vec(s1.to_vec())), 10).unwrap();
    let b = GaussianFit::new(m2.clone(), DMatrix::from_diagonal(&DVector::from_vec(s2.to_vec())), 10).unwrap();
    let want: f64 = (&m1 - &m2).norm_squared()
        + s1.iter().zip(&s2).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>();
    let got = frechet_distance(&a, &b).unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert!((frechet_distance(&b, &a).unwrap() - want).abs() < 1e-9);
}

#[test]
fn fad_needs_enough_samples() {
    let few = gaussian_samples(4, &[0.0; 8], &[1.0; 8], 3);
    assert!(matches!(fad(&few, &few), Err(Error::InsufficientSamples { .. })));
}

fn posterior(v: Vec<f64>) -> EventPosterior {
    EventPosterior::new(v).unwrap()
}

proptest! {
    #[test]
    fn kl_of_identical_posteriors_is_zero(seed in any::<u64>(), n in 1usize..20, c in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps: Vec<EventPosterior> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng).exp()).collect();
                let z: f64 = raw.iter().sum();
                posterior(raw.into_iter().map(|x| x / z).collect())
            })
            .collect();
        prop_assert!(kl_event(&ps, &ps).unwrap().abs() < 1e-12);
        let is = inception_score(&ps).unwrap();
        prop_assert!(is >= 1.0 - 1e-12 && is <= c as f64 + 1e-9);
    }

    #[test]
    fn kl_matches_loop(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let raw: Vec<f64> = (0..5).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng).exp()).collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / z).collect::<Vec<f64>>()
        };
        let (p, q) = (draw(), draw());
        let want: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        let got = kl_event(&[posterior(p)], &[posterior(q)]).unwrap();
        prop_assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn posterior_is_a_softmax_of_squared_distances(seed in any::<u64>(), temp in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = || {
            let v: Vec<f64> = (0..6).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
            EmbeddingVector::normalize(&v).unwrap()
        };
        let protos: Vec<EmbeddingVector> = (0..4).map(|_| unit()).collect();
        let e = unit().to_f64();
        let logits: Vec<f64> = protos
            .iter()
            .map(|p| -p.to_f64().iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / temp)
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let got = posterior_from_embedding(&e, &protos, temp).unwrap();
        for (g, l) in got.probs().iter().zip(&logits) {
            prop_assert!((g - l.exp() / z).abs() < 1e-9);
        }
    }
}

#[test]
fn clap_score_is_mean_cosine_in_percent() {
    let a = EmbeddingVector::normalize(&[1.0, 0.0]).unwrap();
    let b = EmbeddingVector::normalize(&[0.0, 1.0]).unwrap();
    let c = EmbeddingVector::normalize(&[1.0, 1.0]).unwrap();
    let s = clap_score(&[a.clone(), a.clone(), b.clone()], &[a.clone(), b.clone(), c.clone()]).unwrap();
    let want = 100.0 * (1.0 + 0.0 + std::f64::consts::FRAC_1_SQRT_2) / 3.0;
    assert!((s - want).abs() < 1e-5);
    assert!(clap_score(&[a.clone()], &[]).is_err());
    assert!(clap_score(&[], &[]).is_err());
}
