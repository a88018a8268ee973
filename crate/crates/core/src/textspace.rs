//! The noun-based text space with its textual analogs of image features.
//! Attribute selection for prompt enhancement lives here too.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::error::{Result, TataError};
use crate::numerics::{cosine, l2_normalize, softmax_temp, Embedding, Role};

/// Default temperature of the textual-analog softmax.
pub const DEFAULT_TAU_TILDE: f64 = 0.005;
pub const DEFAULT_K1: usize = 5;
pub const DEFAULT_ATTRIBUTE_BANK_SIZE: usize = 2000;

/// A bank of texts with their (unit-norm) prompt embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    texts: Vec<String>,
    embeddings: Vec<Embedding>,
}

/// Nouns, each encoded as "a photo of {noun}".
pub type NounBank = TextBank;
/// Attributes, each encoded as "The photo is {attribute}".
pub type AttributeBank = TextBank;

impl TextBank {
    pub fn new(texts: Vec<String>, embeddings: Vec<Embedding>) -> Result<Self> {
        if texts.is_empty() {
            return Err(TataError::Empty("text bank"));
        }
        if texts.len() != embeddings.len() {
            return Err(TataError::CountMismatch(texts.len(), embeddings.len()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = texts.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(TataError::InvalidValue {
                field: "texts",
                reason: format!("duplicate entry {dup:?}"),
            });
        }
        let dim = embeddings[0].dim();
        let embeddings = embeddings
            .into_iter()
            .map(|e| {
                if e.dim() != dim {
                    return Err(TataError::DimensionMismatch {
                        expected: dim,
                        actual: e.dim(),
                    });
                }
                l2_normalize(e.as_slice(), Role::Text)
            })
            .collect::<Result<_>>()?;
        Ok(Self { texts, embeddings })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn text(&self, i: usize) -> &str {
        &self.texts[i]
    }

    pub fn embedding(&self, i: usize) -> &Embedding {
        &self.embeddings[i]
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].dim()
    }
}

/// The nouns chosen for each semantic center, `k1` per center.
#[derive(Debug, Clone, PartialEq)]
pub struct TextSpace {
    /// Bank indices per center, best first.
    groups: Vec<Vec<usize>>,
    /// Flattened `(text, embedding)` entries in group order; `H = N * k1`.
    texts: Vec<String>,
    embeddings: Vec<Embedding>,
}

impl TextSpace {
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// H, the total number of selected entries.
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    /// A space holding exactly the given embeddings as one group.
    pub fn from_entries(texts: Vec<String>, embeddings: Vec<Embedding>) -> Result<Self> {
        if embeddings.is_empty() || texts.len() != embeddings.len() {
            return Err(TataError::CountMismatch(texts.len(), embeddings.len()));
        }
        Ok(Self {
            groups: vec![(0..embeddings.len()).collect()],
            texts,
            embeddings,
        })
    }
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// For each center, the `k1` nouns with the highest `p(center | noun)`, where
/// `p` is a softmax over the noun's cosine similarity to every center.
pub fn assign_nouns(bank: &NounBank, centers: &[Embedding], k1: usize) -> Result<TextSpace> {
    if k1 == 0 {
        return Err(TataError::InvalidCount(k1));
    }
    if centers.is_empty() {
        return Err(TataError::EmptyCentroids);
    }
    let needed = centers.len() * k1;
    if bank.len() < needed {
        return Err(TataError::BankTooSmall {
            needed,
            got: bank.len(),
        });
    }
    // posterior[k][i] = p(y = i | T_k)
    let posterior: Vec<Vec<f64>> = bank
        .embeddings
        .iter()
        .map(|noun| {
            let sims = centers
                .iter()
                .map(|c| cosine(noun.as_slice(), c.as_slice()))
                .collect::<Result<Vec<_>>>()?;
            Ok(softmax_temp(&sims, 1.0)?.probs().to_vec())
        })
        .collect::<Result<_>>()?;

    let mut groups = Vec::with_capacity(centers.len());
    for i in 0..centers.len() {
        let column: Vec<f64> = posterior.iter().map(|p| p[i]).collect();
        let mut order: Vec<usize> = (0..bank.len()).collect();
        order.sort_by(by_score_then_index(&column));
        order.truncate(k1);
        groups.push(order);
    }
    let flat: Vec<usize> = groups.iter().flatten().copied().collect();
    Ok(TextSpace {
        texts: flat.iter().map(|&k| bank.texts[k].clone()).collect(),
        embeddings: flat.iter().map(|&k| bank.embeddings[k].clone()).collect(),
        groups,
    })
}

/// Softmax weights of the image feature over the text-space entries.
pub fn analog_weights(f_v: &Embedding, space: &TextSpace, tau_tilde: f64) -> Result<Vec<f64>> {
    if space.is_empty() {
        return Err(TataError::Empty("text space"));
    }
    let sims = space
        .embeddings
        .iter()
        .map(|t| cosine(f_v.as_slice(), t.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax_temp(&sims, tau_tilde)?.probs().to_vec())
}

/// Similarity-weighted aggregate of text-space embeddings, unit-normalized.
pub fn textual_analog(f_v: &Embedding, space: &TextSpace, tau_tilde: f64) -> Result<Embedding> {
    let weights = analog_weights(f_v, space, tau_tilde)?;
    let mut acc = vec![0.0; space.embeddings[0].dim()];
    for (w, t) in weights.iter().zip(&space.embeddings) {
        for (a, x) in acc.iter_mut().zip(t.as_slice()) {
            *a += w * x;
        }
    }
    l2_normalize(&acc, Role::Text)
}

/// Bank indices of the `n_attr` attributes most similar to `f_v`, best first.
pub fn select_attribute_indices(
    f_v: &Embedding,
    bank: &AttributeBank,
    n_attr: usize,
) -> Result<Vec<usize>> {
    if n_attr == 0 || n_attr > bank.len() {
        return Err(TataError::InvalidCount(n_attr));
    }
    let sims = bank
        .embeddings
        .iter()
        .map(|a| cosine(f_v.as_slice(), a.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..bank.len()).collect();
    let cmp = by_score_then_index(&sims);
    if n_attr < order.len() {
        order.select_nth_unstable_by(n_attr - 1, &cmp);
        order.truncate(n_attr);
    }
    order.sort_by(cmp);
    Ok(order)
}

pub fn select_attributes<'a>(
    f_v: &Embedding,
    bank: &'a AttributeBank,
    n_attr: usize,
) -> Result<Vec<&'a str>> {
    Ok(select_attribute_indices(f_v, bank, n_attr)?
        .into_iter()
        .map(|i| bank.text(i))
        .collect())
}

/// `"a {attributes} photo of a {class}"`, or `"a photo of a {class}"` with no attributes.
pub fn compose_prompt<S: AsRef<str>>(class_name: &str, attributes: &[S]) -> Result<String> {
    if class_name.trim().is_empty() {
        return Err(TataError::EmptyClassName);
    }
    if attributes.is_empty() {
        return Ok(format!("a photo of a {class_name}"));
    }
    let joined = attributes
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ");
    Ok(format!("a {joined} photo of a {class_name}"))
}
