//! Vector primitives shared by every stage: unit embeddings, cosine
//! similarity, temperature softmax and probability vectors.
//!
//! Storage on disk is 32-bit, but everything here is `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TataError};

const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Image,
    Text,
    Multimodal,
}

/// A finite real vector tagged with the modality it came from.
///
/// Constructors that go through [`l2_normalize`] guarantee unit norm;
/// [`Embedding::from_raw`] only checks finiteness and exists for inputs that
/// are already normalized (file payloads) or deliberately not (test inputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
    role: Role,
}

impl Embedding {
    pub fn from_raw(values: Vec<f64>, role: Role) -> Result<Self> {
        if values.is_empty() {
            return Err(TataError::Empty("embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TataError::NonFinite);
        }
        Ok(Self { values, role })
    }

    pub fn normalized(values: Vec<f64>, role: Role) -> Result<Self> {
        l2_normalize(&values, role)
    }

    /// `normalize([first, second])`, tagged multimodal.
    pub fn concat(first: &Embedding, second: &Embedding) -> Result<Self> {
        let mut values = Vec::with_capacity(first.dim() + second.dim());
        values.extend_from_slice(&first.values);
        values.extend_from_slice(&second.values);
        l2_normalize(&values, Role::Multimodal)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn squared_distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn l2_normalize(v: &[f64], role: Role) -> Result<Embedding> {
    if v.is_empty() {
        return Err(TataError::Empty("vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(TataError::NonFinite);
    }
    let n = norm(v);
    if n < ZERO_NORM {
        return Err(TataError::ZeroVector);
    }
    Ok(Embedding {
        values: v.iter().map(|x| x / n).collect(),
        role,
    })
}

/// Cosine similarity on raw slices, clamped to [-1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(TataError::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu < ZERO_NORM || nv < ZERO_NORM {
        return Err(TataError::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn cosine_sim(u: &Embedding, v: &Embedding) -> Result<f64> {
    cosine(&u.values, &v.values)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// A probability vector over the class set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredictionDistribution {
    probs: Vec<f64>,
}

impl PredictionDistribution {
    /// Validates entries in [0, 1] summing to 1 within 1e-9.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(TataError::Empty("distribution"));
        }
        if probs
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0 + 1e-12)
        {
            return Err(TataError::InvalidValue {
                field: "probs",
                reason: "entries must lie in [0, 1]".into(),
            });
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TataError::InvalidValue {
                field: "probs",
                reason: format!("entries sum to {total}"),
            });
        }
        Ok(Self { probs })
    }

    pub(crate) fn from_probs_unchecked(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, class: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[class] = 1.0;
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn max(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `exp(s_i / tau) / sum_j exp(s_j / tau)`, with the max score subtracted first.
pub fn softmax_temp(scores: &[f64], tau: f64) -> Result<PredictionDistribution> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(TataError::NonPositiveTemperature(tau));
    }
    if scores.is_empty() {
        return Err(TataError::Empty("scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(TataError::NonFinite);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(PredictionDistribution {
        probs: exps.into_iter().map(|e| e / total).collect(),
    })
}

/// Coordinate-wise arithmetic mean of equal-length vectors.
pub fn mean_vector<'a, I>(vectors: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next().ok_or(TataError::EmptyMembers)?;
    let mut acc = first.to_vec();
    let mut count = 1usize;
    for v in iter {
        if v.len() != acc.len() {
            return Err(TataError::DimensionMismatch {
                expected: acc.len(),
                actual: v.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        count += 1;
    }
    let inv = 1.0 / count as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}
