//! Evaluation metrics: Inception Score, CLAP-style score, event-posterior KL and
//! Fréchet distance between Gaussian fits of embedding sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codec_features::LatentFeature;
use crate::embedder::{AudioEmbedder, EmbeddingVector, PrototypeTable};
use crate::error::{Error, Result};

pub const KL_EPSILON: f64 = 1e-10;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Probabilities over the classifier's event classes.
#[derive(Clone, Debug, PartialEq)]
pub struct EventPosterior(Vec<f64>);

impl EventPosterior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Invalid(format!("invalid posterior {probs:?}")));
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("posterior sums to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Nearest-prototype softmax classifier over embedding space.
pub struct EventClassifier<'a> {
    embedder: &'a dyn AudioEmbedder,
    classes: Vec<String>,
    prototypes: Vec<EmbeddingVector>,
    temperature: f64,
}

impl<'a> EventClassifier<'a> {
    pub fn new(
        embedder: &'a dyn AudioEmbedder,
        table: &PrototypeTable,
        temperature: f64,
    ) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::Invalid("classifier has no prototypes".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature {temperature}")));
        }
        let (classes, prototypes) = table.iter().map(|(k, v)| (k.clone(), v.clone())).unzip();
        Ok(Self {
            embedder,
            classes,
            prototypes,
            temperature,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn classify_event(&self, f: &LatentFeature) -> Result<EventPosterior> {
        let e = self.embedder.embed_audio(f)?;
        posterior_from_embedding(&e.to_f64(), &self.prototypes, self.temperature)
    }
}

/// `softmax(-||e - p_c||^2 / temperature)` over prototypes `p_c`.
pub fn posterior_from_embedding(
    e: &[f64],
    prototypes: &[EmbeddingVector],
    temperature: f64,
) -> Result<EventPosterior> {
    if prototypes.is_empty() {
        return Err(Error::Invalid("classifier has no prototypes".into()));
    }
    let logits: Vec<f64> = prototypes
        .iter()
        .map(|p| {
            if p.dim() != e.len() {
                return Err(Error::DimensionMismatch(format!(
                    "embedding dim {} vs prototype dim {}",
                    e.len(),
                    p.dim()
                )));
            }
            let d2: f64 = p
                .values()
                .iter()
                .zip(e)
                .map(|(&a, &b)| (a as f64 - b).powi(2))
                .sum();
            Ok(-d2 / temperature)
        })
        .collect::<Result<_>>()?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    EventPosterior::new(exps.into_iter().map(|x| x / z).collect())
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(KL_EPSILON).ln() - qi.max(KL_EPSILON).ln()))
        .sum()
}

/// `exp(mean_i KL(p_i || p_bar))`.
pub fn inception_score(posteriors: &[EventPosterior]) -> Result<f64> {
    let first = posteriors
        .first()
        .ok_or_else(|| Error::Invalid("inception score of no posteriors".into()))?;
    let c = first.probs().len();
    let mut marginal = vec![0.0; c];
    for p in posteriors {
        if p.probs().len() != c {
            return Err(Error::DimensionMismatch("posteriors over different classes".into()));
        }
        for (m, &x) in marginal.iter_mut().zip(p.probs()) {
            *m += x;
        }
    }
    let n = posteriors.len() as f64;
    marginal.iter_mut().for_each(|m| *m /= n);
    let mean_kl = posteriors.iter().map(|p| kl(p.probs(), &marginal)).sum::<f64>() / n;
    Ok(mean_kl.max(0.0).exp())
}

/// `100 x` mean cosine similarity of paired audio/text embeddings.
pub fn clap_score(gen: &[EmbeddingVector], text: &[EmbeddingVector]) -> Result<f64> {
    if gen.len() != text.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} audio vs {} text embeddings",
            gen.len(),
            text.len()
        )));
    }
    if gen.is_empty() {
        return Err(Error::Invalid("clap score of no pairs".into()));
    }
    let total: f64 = gen.iter().zip(text).map(|(a, t)| a.dot(t)).sum();
    Ok(100.0 * total / gen.len() as f64)
}

/// Mean instance-level `KL(ref_i || gen_i)`, log arguments clamped at [`KL_EPSILON`].
pub fn kl_event(reference: &[EventPosterior], generated: &[EventPosterior]) -> Result<f64> {
    if reference.len() != generated.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} reference vs {} generated posteriors",
            reference.len(),
            generated.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::Invalid("KL of no pairs".into()));
    }
    let mut total = 0.0;
    for (r, g) in reference.iter().zip(generated) {
        if r.probs().len() != g.probs().len() {
            return Err(Error::DimensionMismatch("posteriors over different classes".into()));
        }
        total += kl(r.probs(), g.probs()).max(0.0);
    }
    Ok(total / reference.len() as f64)
}

/// Mean and (unbiased) covariance of a sample set.
#[derive(Clone, Debug)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl GaussianFit {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!(
                "mean dim {d} vs covariance {:?}",
                covariance.shape()
            )));
        }
        Ok(Self {
            mean,
            covariance,
            count,
        })
    }

    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let d = samples
            .first()
            .map(|s| s.len())
            .ok_or(Error::InsufficientSamples { needed: 2, got: 0 })?;
        if samples.len() < d + 1 {
            return Err(Error::InsufficientSamples {
                needed: d + 1,
                got: samples.len(),
            });
        }
        let n = samples.len();
        let mut mean = DVector::zeros(d);
        for s in samples {
            if s.len() != d {
                return Err(Error::DimensionMismatch("ragged sample set".into()));
            }
            mean += DVector::from_column_slice(s);
        }
        mean /= n as f64;
        let mut centered = DMatrix::zeros(n, d);
        for (i, s) in samples.iter().enumerate() {
            for j in 0..d {
                centered[(i, j)] = s[j] - mean[j];
            }
        }
        let mut covariance = centered.transpose() * &centered / (n as f64 - 1.0);
        covariance = (&covariance + covariance.transpose()) * 0.5;
        Self::new(mean, covariance, n)
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`, with the trace of the root
/// taken from the eigenvalues of `S1^{1/2} S2 S1^{1/2}` (negatives clipped).
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::DimensionMismatch(format!(
            "fit dims {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let diff = &a.mean - &b.mean;
    let root_a = psd_sqrt(&a.covariance);
    let inner = &root_a * &b.covariance * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = diff.dot(&diff) + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_root;
    Ok(d.max(0.0))
}

pub fn fad(reference: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    frechet_distance(&GaussianFit::fit(reference)?, &GaussianFit::fit(generated)?)
}

/// The four metrics plus bookkeeping, as written to `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub is: f64,
    pub clap_pct: f64,
    pub kl: f64,
    pub fad: f64,
    pub n_samples: usize,
    pub config_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn post(p: &[f64]) -> EventPosterior {
        EventPosterior::new(p.to_vec()).unwrap()
    }

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalize(v).unwrap()
    }

    #[test]
    fn posterior_limits() {
        let protos = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[-1.0, 0.0])];
        let p = posterior_from_embedding(&[1.0, 0.0], &protos, 1e-3).unwrap();
        assert!((p.probs()[0] - 1.0).abs() < 1e-12);
        let eq = vec![unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])];
        let p = posterior_from_embedding(&[0.0, 1.0], &eq, 0.1).unwrap();
        assert!((p.probs()[0] - 0.5).abs() < 1e-12);
        assert!(posterior_from_embedding(&[1.0], &[], 0.1).is_err());
    }

    #[test]
    fn inception_score_closed_forms() {
        let uniform: Vec<_> = (0..7).map(|_| post(&[0.25; 4])).collect();
        assert!((inception_score(&uniform).unwrap() - 1.0).abs() < 1e-12);
        let c = 5;
        let spread: Vec<_> = (0..3 * c)
            .map(|i| {
                let mut v = vec![0.0; c];
                v[i % c] = 1.0;
                post(&v)
            })
            .collect();
        assert!((inception_score(&spread).unwrap() - c as f64).abs() < 1e-9);
        let same: Vec<_> = (0..4).map(|_| post(&[0.0, 1.0, 0.0])).collect();
        assert!((inception_score(&same).unwrap() - 1.0).abs() < 1e-12);
        assert!(inception_score(&[]).is_err());
    }

    #[test]
    fn kl_closed_form_and_clamp() {
        let v = kl_event(&[post(&[0.5, 0.5])], &[post(&[0.25, 0.75])]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.1438).abs() < 1e-4);
        let same = kl_event(&[post(&[0.2, 0.8])], &[post(&[0.2, 0.8])]).unwrap();
        assert_eq!(same, 0.0);
        let clamped = kl_event(&[post(&[0.5, 0.5])], &[post(&[1.0, 0.0])]).unwrap();
        assert!(clamped.is_finite() && clamped > 0.0);
        assert!(kl_event(&[post(&[1.0])], &[]).is_err());
    }

    #[test]
    fn clap_score_cases() {
        let a = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        assert!((clap_score(&a, &a).unwrap() - 100.0).abs() < 1e-9);
        let b = vec![unit(&[0.0, 1.0]), unit(&[1.0, 0.0])];
        assert!(clap_score(&a, &b).unwrap().abs() < 1e-9);
        assert!(clap_score(&a, &b[..1]).is_err());
    }

    #[test]
    fn clap_score_null_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut draw = || {
            let v: Vec<f64> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
            unit(&v)
        };
        let n = 1000;
        let a: Vec<_> = (0..n).map(|_| draw()).collect();
        let b: Vec<_> = (0..n).map(|_| draw()).collect();
        // Cosine of random unit vectors in 32-D has std 1/sqrt(32).
        let sigma = 100.0 / (32f64).sqrt() / (n as f64).sqrt();
        assert!(clap_score(&a, &b).unwrap().abs() < 3.0 * sigma);
    }

    #[test]
    fn fad_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        assert!(fad(&set, &set).unwrap().abs() < 1e-8);

        let a = GaussianFit::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0), 0)
            .unwrap();
        let b = GaussianFit::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 1.0), 0)
            .unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);

        assert!(matches!(
            fad(&set[..4], &set),
            Err(Error::InsufficientSamples { needed: 5, got: 4 })
        ));
    }

    #[test]
    fn fad_is_symmetric_and_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut draw = |shift: f64, scale: f64| -> Vec<Vec<f64>> {
            (0..200)
                .map(|_| {
                    (0..3)
                        .map(|j| shift + scale * (j + 1) as f64 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                        .collect()
                })
                .collect()
        };
        let x = draw(0.0, 1.0);
        let y = draw(0.5, 0.7);
        let d1 = fad(&x, &y).unwrap();
        let d2 = fad(&y, &x).unwrap();
        assert!((d1 - d2).abs() < 1e-8);
        let (c, s) = (0.6f64, 0.8f64);
        let rot = |v: &Vec<f64>| vec![c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
        let xr: Vec<_> = x.iter().map(rot).collect();
        let yr: Vec<_> = y.iter().map(rot).collect();
        assert!((fad(&xr, &yr).unwrap() - d1).abs() < 1e-6);
    }
}
