//! Inception score over a pluggable classifier, and patch-grid response
//! statistics of a discriminator.

use crate::diffcore::{Shape4, Tensor4};
use crate::error::{Error, Result};
use crate::networks::{ConvClassifier, PatchDiscriminator};
use serde::Serialize;

pub const DEFAULT_SPLITS: usize = 10;

/// A frozen image classifier producing class posteriors.
pub trait ClassifierHead {
    fn id(&self) -> String;
    fn classes(&self) -> usize;
    /// One probability vector per image, in input order.
    fn probabilities(&self, images: &[Tensor4]) -> Result<Vec<Vec<f64>>>;
}

impl ClassifierHead for ConvClassifier {
    fn id(&self) -> String {
        self.source_id().to_string()
    }

    fn classes(&self) -> usize {
        ConvClassifier::classes(self)
    }

    fn probabilities(&self, images: &[Tensor4]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            out.extend(self.predict(&Tensor4::stack(chunk)?)?);
        }
        Ok(out)
    }
}

/// Same posterior (uniform over `classes`) for every image.
#[derive(Clone, Copy, Debug)]
pub struct UniformStub {
    pub classes: usize,
}

impl ClassifierHead for UniformStub {
    fn id(&self) -> String {
        format!("stub-uniform:{}", self.classes)
    }
    fn classes(&self) -> usize {
        self.classes
    }
    fn probabilities(&self, images: &[Tensor4]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![1.0 / self.classes as f64; self.classes]; images.len()])
    }
}

/// One-hot posterior on class `i mod classes` for the `i`-th image.
#[derive(Clone, Copy, Debug)]
pub struct CyclingOneHotStub {
    pub classes: usize,
}

impl ClassifierHead for CyclingOneHotStub {
    fn id(&self) -> String {
        format!("stub-onehot:{}", self.classes)
    }
    fn classes(&self) -> usize {
        self.classes
    }
    fn probabilities(&self, images: &[Tensor4]) -> Result<Vec<Vec<f64>>> {
        Ok((0..images.len())
            .map(|i| {
                let mut p = vec![0.0; self.classes];
                p[i % self.classes] = 1.0;
                p
            })
            .collect())
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

fn validate_probs(probs: &[Vec<f64>]) -> Result<usize> {
    let c = probs.first().map(Vec::len).unwrap_or(0);
    if c < 2 {
        return Err(Error::invalid("inception score needs at least 2 classes"));
    }
    for (i, p) in probs.iter().enumerate() {
        if p.len() != c {
            return Err(Error::shape("inception_score", c, p.len()));
        }
        let s: f64 = p.iter().sum();
        if p.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    Ok(c)
}

/// `exp(mean KL(p(y|x) ‖ p(y)))` per contiguous split, then mean and
/// population standard deviation over splits.
pub fn inception_score_from_probs(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if splits == 0 || probs.len() < splits {
        return Err(Error::invalid(format!(
            "inception score needs at least {splits} images, got {}",
            probs.len()
        )));
    }
    let c = validate_probs(probs)?;
    let n = probs.len();
    let scores: Vec<f64> = (0..splits)
        .map(|k| {
            let part = &probs[k * n / splits..(k + 1) * n / splits];
            let m = part.len() as f64;
            let marginal: Vec<f64> = (0..c)
                .map(|j| compensated_sum(part.iter().map(|p| p[j])) / m)
                .collect();
            let kl = compensated_sum(part.iter().map(|p| {
                p.iter()
                    .zip(&marginal)
                    .filter(|(pv, _)| **pv > 0.0)
                    .map(|(pv, qv)| pv * (pv.ln() - qv.ln()))
                    .sum::<f64>()
            })) / m;
            kl.exp().clamp(1.0, c as f64)
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

pub fn inception_score(clf: &dyn ClassifierHead, images: &[Tensor4], splits: usize) -> Result<(f64, f64)> {
    if images.len() < splits {
        return Err(Error::invalid(format!(
            "inception score needs at least {splits} images, got {}",
            images.len()
        )));
    }
    inception_score_from_probs(&clf.probabilities(images)?, splits)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreReport {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_images: usize,
    pub splits: usize,
    pub classifier_id: String,
}

impl ScoreReport {
    pub fn inception(clf: &dyn ClassifierHead, images: &[Tensor4], splits: usize) -> Result<Self> {
        let (mean, std) = inception_score(clf, images, splits)?;
        Ok(ScoreReport {
            metric: "inception_score".into(),
            mean,
            std,
            n_images: images.len(),
            splits,
            classifier_id: clf.id(),
        })
    }

    /// Warning printed next to every score: values depend on the classifier.
    pub fn provenance_warning(&self) -> String {
        format!(
            "warning: inception score computed with classifier `{}`; values are only comparable between runs using that same classifier",
            self.classifier_id
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ResponseStats {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchResponseSummary {
    pub real: ResponseStats,
    pub fake: ResponseStats,
    /// Per-cell mean response, `(1, 1, g, g)`.
    pub real_heatmap: Tensor4,
    pub fake_heatmap: Tensor4,
}

fn responses(d: &PatchDiscriminator, imgs: &[Tensor4]) -> Result<(ResponseStats, Tensor4)> {
    if imgs.is_empty() {
        return Err(Error::invalid("patch_response_stats needs at least one image"));
    }
    let mut grids = Vec::with_capacity(imgs.len());
    for img in imgs {
        grids.push(d.forward(img)?.0);
    }
    let all = Tensor4::stack(&grids)?;
    let g = all.shape().h();
    let n = all.shape().n();
    let mean = all.mean();
    let variance = all.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
    let mut heat = Tensor4::zeros(Shape4::new(1, 1, g, g));
    for i in 0..n {
        for (h, v) in heat.data_mut().iter_mut().zip(all.sample(i)) {
            *h += v / n as f64;
        }
    }
    Ok((ResponseStats { mean, variance }, heat))
}

pub fn patch_response_stats(d: &PatchDiscriminator, real: &[Tensor4], fake: &[Tensor4]) -> Result<PatchResponseSummary> {
    let (real_stats, real_heatmap) = responses(d, real)?;
    let (fake_stats, fake_heatmap) = responses(d, fake)?;
    Ok(PatchResponseSummary {
        real: real_stats,
        fake: fake_stats,
        real_heatmap,
        fake_heatmap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imgs(n: usize) -> Vec<Tensor4> {
        vec![Tensor4::zeros(Shape4::new(1, 3, 4, 4)); n]
    }

    #[test]
    fn uniform_posterior_scores_one() {
        for c in [2, 3, 10] {
            let (m, s) = inception_score(&UniformStub { classes: c }, &imgs(50), 10).unwrap();
            assert_eq!(m, 1.0);
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn balanced_one_hot_scores_class_count() {
        for c in [2, 5, 7] {
            let (m, _) = inception_score(&CyclingOneHotStub { classes: c }, &imgs(c * 4), 2).unwrap();
            assert!((m - c as f64).abs() < 1e-6, "{m}");
        }
    }

    #[test]
    fn too_few_images_rejected() {
        assert!(inception_score(&UniformStub { classes: 3 }, &imgs(4), 10).is_err());
        assert!(inception_score_from_probs(&[vec![1.0]], 1).is_err());
        assert!(inception_score_from_probs(&[vec![0.7, 0.7]], 1).is_err());
    }
}
