//! The adaptation state machine.
//!
//! A bootstrap pass clusters the test images into one pseudo-labeled
//! prototype per class. Each test sample is then scored twice: against the
//! prototypes by distance covariance (vision-vision) and against
//! attribute-enhanced class prompts by cosine (vision-language). The two
//! distributions are fused, refined by soft voting over cached neighbors, and
//! confident samples are admitted back into the class store.

mod stream;

pub use stream::{
    process_stream, PredictionRecord, Resources, StreamOutcome, StreamRecord, Summary,
};

use crate::bdc::{bdc_matrix, dcov2, BdcMatrix};
use crate::clustering::{kmeans_with, normalized_centroids, update_centroid};
use crate::config::{PseudoLabeling, RunConfig};
use crate::error::{Result, TataError};
use crate::exec::Execution;
use crate::numerics::{
    cosine, cosine_sim, l2_normalize, softmax_temp, Embedding, PredictionDistribution, Role,
};
use crate::textspace::{assign_nouns, textual_analog, NounBank, TextSpace};

/// A confident sample kept in a class's store.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub image: Embedding,
    pub feature: Embedding,
    pub distribution: PredictionDistribution,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub class_index: usize,
    pub label_name: String,
    /// Centroid from the last clustering; acts as a permanent member.
    pub base_centroid: Embedding,
    pub centroid: Embedding,
    pub bdc: BdcMatrix,
    pub members: Vec<Member>,
}

impl ClassPrototype {
    fn new(class_index: usize, label_name: String, centroid: Embedding) -> Result<Self> {
        let bdc = bdc_matrix(&centroid)?;
        Ok(Self {
            class_index,
            label_name,
            base_centroid: centroid.clone(),
            centroid,
            bdc,
            members: Vec::new(),
        })
    }

    /// Centroid = normalized mean of members plus the base centroid.
    fn refresh(&mut self) -> Result<()> {
        let mut refs: Vec<&Embedding> = self.members.iter().map(|m| &m.feature).collect();
        refs.push(&self.base_centroid);
        self.centroid = update_centroid(&refs)?;
        self.bdc = bdc_matrix(&self.centroid)?;
        Ok(())
    }
}

/// How a test image becomes a vision-vision feature.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSpace {
    /// `f_v` alone.
    Image,
    /// `normalize([f_v, f_t])` with `f_t` the textual analog over this space.
    Multimodal(TextSpace),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptState {
    pub prototypes: Vec<ClassPrototype>,
    pub features: FeatureSpace,
    /// Plain "a photo of a {class}" embeddings.
    pub class_text: Vec<Embedding>,
    pub updates: usize,
    pub config: RunConfig,
    pub seed: u64,
}

impl AdaptState {
    pub fn n_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn feature(&self, f_v: &Embedding) -> Result<Embedding> {
        match &self.features {
            FeatureSpace::Image => Ok(f_v.clone()),
            FeatureSpace::Multimodal(space) => {
                let f_t = textual_analog(f_v, space, self.config.tau_tilde)?;
                Embedding::concat(f_v, &f_t)
            }
        }
    }

    pub fn member_count(&self) -> usize {
        self.prototypes.iter().map(|p| p.members.len()).sum()
    }
}

/// Class text embedding lifted into the vision-vision feature space.
fn lift_text(t: &Embedding, features: &FeatureSpace) -> Result<Embedding> {
    match features {
        FeatureSpace::Image => Ok(t.clone()),
        FeatureSpace::Multimodal(_) => Embedding::concat(t, t),
    }
}

/// Row `i` holds `p(class | centroid_i)` under a temperature-`tau` softmax.
fn label_posteriors(
    centroids: &[Embedding],
    class_text: &[Embedding],
    tau: f64,
) -> Result<Vec<Vec<f64>>> {
    if centroids.len() != class_text.len() {
        return Err(TataError::CountMismatch(centroids.len(), class_text.len()));
    }
    centroids
        .iter()
        .map(|c| {
            let sims = class_text
                .iter()
                .map(|t| cosine_sim(t, c))
                .collect::<Result<Vec<_>>>()?;
            Ok(softmax_temp(&sims, tau)?.probs().to_vec())
        })
        .collect()
}

/// Class label for each centroid, one-to-one by greedy matching.
pub fn pseudo_label(
    centroids: &[Embedding],
    class_text: &[Embedding],
    tau: f64,
) -> Result<Vec<usize>> {
    let post = label_posteriors(centroids, class_text, tau)?;
    let n = centroids.len();
    let mut labels = vec![usize::MAX; n];
    let mut class_used = vec![false; n];
    for _ in 0..n {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in post.iter().enumerate() {
            if labels[i] != usize::MAX {
                continue;
            }
            for (m, &p) in row.iter().enumerate() {
                if !class_used[m] && best.is_none_or(|(_, _, b)| p > b) {
                    best = Some((i, m, p));
                }
            }
        }
        let (i, m, _) = best.expect("an unmatched pair remains");
        labels[i] = m;
        class_used[m] = true;
    }
    Ok(labels)
}

/// Per-centroid argmax labels; classes may repeat or go unclaimed.
pub fn pseudo_label_argmax(
    centroids: &[Embedding],
    class_text: &[Embedding],
    tau: f64,
) -> Result<Vec<usize>> {
    Ok(label_posteriors(centroids, class_text, tau)?
        .iter()
        .map(|row| crate::numerics::argmax(row))
        .collect())
}

pub fn vv_inference(f_m: &Embedding, state: &AdaptState) -> Result<PredictionDistribution> {
    vv_inference_with(f_m, state, Execution::default())
}

pub fn vv_inference_with(
    f_m: &Embedding,
    state: &AdaptState,
    exec: Execution,
) -> Result<PredictionDistribution> {
    if state.prototypes.is_empty() {
        return Err(TataError::UninitializedState);
    }
    let cfg = &state.config;
    if !cfg.toggles.bdc {
        let scores = exec
            .map(&state.prototypes, |p| {
                cosine(f_m.as_slice(), p.centroid.as_slice())
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        return softmax_temp(&scores, cfg.tau);
    }
    let query = bdc_matrix(f_m)?;
    let mut scores = exec
        .map(&state.prototypes, |p| dcov2(&query, &p.bdc))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    if cfg.vv_self_scale {
        let scale = dcov2(&query, &query)?;
        if scale > 0.0 {
            scores.iter_mut().for_each(|s| *s /= scale);
        }
    }
    softmax_temp(&scores, cfg.tau_vv)
}

pub fn vl_inference(
    f_v: &Embedding,
    class_embeddings: &[Embedding],
    tau: f64,
) -> Result<PredictionDistribution> {
    if class_embeddings.is_empty() {
        return Err(TataError::CountMismatch(0, 1));
    }
    let sims = class_embeddings
        .iter()
        .map(|t| cosine_sim(f_v, t))
        .collect::<Result<Vec<_>>>()?;
    softmax_temp(&sims, tau)
}

/// `(alpha * p_vv + p_vl) / (1 + alpha)`.
pub fn fuse(
    p_vv: &PredictionDistribution,
    p_vl: &PredictionDistribution,
    alpha: f64,
) -> Result<PredictionDistribution> {
    if p_vv.len() != p_vl.len() {
        return Err(TataError::LengthMismatch(p_vv.len(), p_vl.len()));
    }
    if alpha.is_nan() || alpha < 0.0 {
        return Err(TataError::NegativeAlpha(alpha));
    }
    let scale = 1.0 + alpha;
    Ok(PredictionDistribution::from_probs_unchecked(
        p_vv.probs()
            .iter()
            .zip(p_vl.probs())
            .map(|(v, l)| (alpha * v + l) / scale)
            .collect(),
    ))
}

/// Averages `p` with the stored distributions of the `k3` cached members
/// nearest to `f_v`. Returns the refined distribution and the neighbor count.
pub fn soft_vote(
    p: &PredictionDistribution,
    f_v: &Embedding,
    state: &AdaptState,
    k3: usize,
) -> Result<(PredictionDistribution, usize)> {
    if k3 == 0 || state.member_count() == 0 {
        return Ok((p.clone(), 0));
    }
    let mut scored: Vec<(f64, &Member)> = Vec::with_capacity(state.member_count());
    for m in state.prototypes.iter().flat_map(|p| &p.members) {
        scored.push((cosine_sim(f_v, &m.image)?, m));
    }
    // stable: equal similarities keep store order
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let used = k3.min(scored.len());
    let mut acc = p.probs().to_vec();
    for (_, m) in &scored[..used] {
        if m.distribution.len() != acc.len() {
            return Err(TataError::LengthMismatch(m.distribution.len(), acc.len()));
        }
        for (a, q) in acc.iter_mut().zip(m.distribution.probs()) {
            *a += q;
        }
    }
    let inv = 1.0 / (used + 1) as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok((PredictionDistribution::from_probs_unchecked(acc), used))
}

/// Admits the sample into its argmax class if `max(p_hat) >= theta`.
/// Returns whether the state changed.
pub fn admit(
    f_v: &Embedding,
    f_m: &Embedding,
    p_hat: &PredictionDistribution,
    state: &mut AdaptState,
) -> Result<bool> {
    let confidence = p_hat.max();
    if confidence.is_nan() || confidence < state.config.theta {
        return Ok(false);
    }
    let class = p_hat.argmax();
    let capacity = state.config.capacity;
    let proto = state
        .prototypes
        .get_mut(class)
        .ok_or(TataError::UninitializedState)?;
    proto.members.push(Member {
        image: f_v.clone(),
        feature: f_m.clone(),
        distribution: p_hat.clone(),
        confidence,
    });
    if proto.members.len() > capacity {
        let mut worst = 0;
        for (i, m) in proto.members.iter().enumerate() {
            if m.confidence < proto.members[worst].confidence {
                worst = i;
            }
        }
        proto.members.remove(worst);
    }
    proto.refresh()?;
    state.updates += 1;
    Ok(true)
}

/// Builds the class store from a set of test images.
///
/// K-means on the images gives semantic centers. With multimodal clustering
/// enabled, nouns are assigned to those centers and K-means is re-run on
/// `[f_v, f_t]`, where `f_t` is each image's textual analog. The resulting
/// centroids are pseudo-labeled against the class text embeddings.
pub fn bootstrap(
    images: &[Embedding],
    nouns: Option<&NounBank>,
    class_names: &[String],
    class_text: &[Embedding],
    config: &RunConfig,
) -> Result<AdaptState> {
    bootstrap_with(
        images,
        nouns,
        class_names,
        class_text,
        config,
        Execution::default(),
    )
}

pub fn bootstrap_with(
    images: &[Embedding],
    nouns: Option<&NounBank>,
    class_names: &[String],
    class_text: &[Embedding],
    config: &RunConfig,
    exec: Execution,
) -> Result<AdaptState> {
    let n = class_names.len();
    if class_text.len() != n {
        return Err(TataError::CountMismatch(n, class_text.len()));
    }
    if n == 0 {
        return Err(TataError::InvalidN(0));
    }
    if images.len() < n {
        return Err(TataError::TooFewSamples {
            needed: n,
            got: images.len(),
        });
    }
    let visual = kmeans_with(images, n, config.seed, exec)?;

    let (features, clustered) = if config.toggles.mac {
        let bank = nouns.ok_or_else(|| TataError::InvalidValue {
            field: "nouns",
            reason: "multimodal clustering needs a noun bank".into(),
        })?;
        let space = assign_nouns(bank, &visual.centroids, config.k1)?;
        let tau_tilde = config.tau_tilde;
        let multimodal = exec
            .map(images, |f_v| {
                let f_t = textual_analog(f_v, &space, tau_tilde)?;
                Embedding::concat(f_v, &f_t)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let refined = kmeans_with(&multimodal, n, config.seed, exec)?;
        (FeatureSpace::Multimodal(space), refined)
    } else {
        (FeatureSpace::Image, visual)
    };

    let role = match features {
        FeatureSpace::Image => Role::Image,
        FeatureSpace::Multimodal(_) => Role::Multimodal,
    };
    let centroids = normalized_centroids(&clustered, role)?;
    let lifted = class_text
        .iter()
        .map(|t| lift_text(t, &features))
        .collect::<Result<Vec<_>>>()?;
    let prototype_centroids = match config.pseudo_labeling {
        PseudoLabeling::Greedy => {
            let labels = pseudo_label(&centroids, &lifted, config.tau)?;
            let mut by_class: Vec<Option<Embedding>> = vec![None; n];
            for (c, &m) in centroids.iter().zip(&labels) {
                by_class[m] = Some(c.clone());
            }
            by_class
                .into_iter()
                .map(|c| c.expect("greedy matching is one-to-one"))
                .collect::<Vec<_>>()
        }
        PseudoLabeling::Argmax => {
            let labels = pseudo_label_argmax(&centroids, &lifted, config.tau)?;
            (0..n)
                .map(|m| {
                    let claimed: Vec<&Embedding> = centroids
                        .iter()
                        .zip(&labels)
                        .filter(|(_, &l)| l == m)
                        .map(|(c, _)| c)
                        .collect();
                    if claimed.is_empty() {
                        // unclaimed class: fall back to its own text embedding
                        l2_normalize(lifted[m].as_slice(), role)
                    } else {
                        update_centroid(&claimed)
                    }
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let prototypes = prototype_centroids
        .into_iter()
        .enumerate()
        .map(|(m, c)| ClassPrototype::new(m, class_names[m].clone(), c))
        .collect::<Result<Vec<_>>>()?;
    Ok(AdaptState {
        prototypes,
        features,
        class_text: class_text.to_vec(),
        updates: 0,
        config: config.clone(),
        seed: config.seed,
    })
}

/// Re-runs the bootstrap on `images`, carrying each class's members over.
pub(crate) fn recluster(
    state: &AdaptState,
    images: &[Embedding],
    nouns: Option<&NounBank>,
) -> Result<AdaptState> {
    let names: Vec<String> = state
        .prototypes
        .iter()
        .map(|p| p.label_name.clone())
        .collect();
    let mut next = bootstrap(images, nouns, &names, &state.class_text, &state.config)?;
    let features = next.features.clone();
    let tau_tilde = state.config.tau_tilde;
    for (new, old) in next.prototypes.iter_mut().zip(&state.prototypes) {
        // member features must live in the new feature space
        new.members = old
            .members
            .iter()
            .map(|m| {
                let feature = match &features {
                    FeatureSpace::Image => m.image.clone(),
                    FeatureSpace::Multimodal(space) => {
                        Embedding::concat(&m.image, &textual_analog(&m.image, space, tau_tilde)?)?
                    }
                };
                Ok(Member {
                    feature,
                    ..m.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        new.refresh()?;
    }
    next.updates = state.updates;
    Ok(next)
}

#[cfg(test)]
mod tests;
