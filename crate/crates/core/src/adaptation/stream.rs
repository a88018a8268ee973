use std::collections::HashSet;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{admit, bootstrap, fuse, recluster, soft_vote, vl_inference, vv_inference, AdaptState};
use crate::config::{Mode, RunConfig};
use crate::encoder::{Encoder, MemoEncoder};
use crate::error::{Result, TataError};
use crate::numerics::{Embedding, Role};
use crate::textspace::{compose_prompt, select_attributes, AttributeBank, NounBank};

/// One test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecord {
    pub id: String,
    pub image: Embedding,
    /// Ground truth, used only for the summary.
    pub label: Option<usize>,
}

impl StreamRecord {
    pub fn new(id: impl Into<String>, image: Embedding, label: Option<usize>) -> Self {
        Self {
            id: id.into(),
            image: image.with_role(Role::Image),
            label,
        }
    }
}

/// Everything the pipeline reads besides the stream itself.
pub struct Resources<'a> {
    pub class_names: &'a [String],
    pub nouns: Option<&'a NounBank>,
    pub attributes: Option<&'a AttributeBank>,
    pub encoder: &'a dyn Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub pred: usize,
    pub class: String,
    pub probs: Vec<f64>,
    pub soft_voted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub labeled: usize,
    pub correct: usize,
    /// Fraction of labeled samples whose top-1 prediction is correct.
    pub top1_accuracy: Option<f64>,
    pub skipped: usize,
    pub admissions: usize,
    pub reclusters: usize,
}

impl Summary {
    pub fn from_predictions(predictions: &[PredictionRecord]) -> Self {
        let labeled = predictions.iter().filter(|p| p.label.is_some()).count();
        let correct = predictions
            .iter()
            .filter(|p| p.label == Some(p.pred))
            .count();
        Self {
            count: predictions.len(),
            labeled,
            correct,
            top1_accuracy: (labeled > 0).then(|| correct as f64 / labeled as f64),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub predictions: Vec<PredictionRecord>,
    pub summary: Summary,
    /// State right after the (last) bootstrap, before any admission.
    pub initial_state: Option<AdaptState>,
    pub final_state: Option<AdaptState>,
}

struct Prompts<'a> {
    encoder: MemoEncoder<&'a dyn Encoder>,
    class_names: &'a [String],
    plain: Vec<Embedding>,
}

impl<'a> Prompts<'a> {
    fn new(encoder: &'a dyn Encoder, class_names: &'a [String]) -> Result<Self> {
        let encoder = MemoEncoder::new(encoder);
        let none: [&str; 0] = [];
        let texts = class_names
            .iter()
            .map(|c| compose_prompt(c, &none))
            .collect::<Result<Vec<_>>>()?;
        let plain = encoder.encode_texts(&texts)?;
        Ok(Self {
            encoder,
            class_names,
            plain,
        })
    }

    fn composed(&self, attributes: &[&str]) -> Result<Vec<Embedding>> {
        let texts = self
            .class_names
            .iter()
            .map(|c| compose_prompt(c, attributes))
            .collect::<Result<Vec<_>>>()?;
        self.encoder.encode_texts(&texts)
    }
}

/// Runs the full pipeline over `records` in order.
pub fn process_stream(
    records: &[StreamRecord],
    res: &Resources,
    config: &RunConfig,
) -> Result<StreamOutcome> {
    config.validate()?;
    let n = res.class_names.len();
    if n == 0 {
        return Err(TataError::InvalidN(0));
    }
    if let Some(expected) = config.classes {
        if expected != n {
            return Err(TataError::InvalidValue {
                field: "classes",
                reason: format!("config says {expected}, class list has {n}"),
            });
        }
    }
    let toggles = config.toggles;
    let attributes = if toggles.aap {
        Some(res.attributes.ok_or_else(|| TataError::InvalidValue {
            field: "attributes",
            reason: "attribute-assisted prompting needs an attribute bank".into(),
        })?)
    } else {
        None
    };
    let prompts = Prompts::new(res.encoder, res.class_names)?;
    let dim = prompts.plain[0].dim();

    let mut seen = HashSet::new();
    let mut skipped = 0;
    let valid: Vec<&StreamRecord> = records
        .iter()
        .filter(|r| {
            let ok = if r.image.dim() != dim {
                warn!("skipping {}: dimension {} != {dim}", r.id, r.image.dim());
                false
            } else if r.label.is_some_and(|l| l >= n) {
                warn!("skipping {}: label out of range", r.id);
                false
            } else if !seen.insert(r.id.as_str()) {
                warn!("skipping {}: duplicate id", r.id);
                false
            } else {
                true
            };
            if !ok {
                skipped += 1;
            }
            ok
        })
        .collect();

    let mut state: Option<AdaptState> = None;
    let mut initial_state = None;
    let mut reclusters = 0;
    if toggles.needs_state() && config.mode == Mode::Transductive && !valid.is_empty() {
        let images: Vec<Embedding> = valid.iter().map(|r| r.image.clone()).collect();
        let s = bootstrap(&images, res.nouns, res.class_names, &prompts.plain, config)?;
        initial_state = Some(s.clone());
        state = Some(s);
    }
    let warmup = config.warmup.max(n);
    let mut seen_images: Vec<Embedding> = Vec::new();
    let mut admissions = 0;
    let mut since_recluster = 0;
    let mut predictions = Vec::with_capacity(valid.len());

    for record in &valid {
        let f_v = &record.image;
        let class_embs = match attributes {
            Some(bank) => prompts.composed(&select_attributes(f_v, bank, config.n_attr)?)?,
            None => prompts.plain.clone(),
        };
        let p_vl = vl_inference(f_v, &class_embs, config.tau)?;

        let (p_hat, soft_voted, f_m) = match &state {
            Some(s) => {
                let f_m = s.feature(f_v)?;
                let p = if toggles.vision_vision() {
                    fuse(&vv_inference(&f_m, s)?, &p_vl, config.alpha)?
                } else {
                    p_vl
                };
                // soft voting waits until every class holds k3 members
                let covered = s.prototypes.iter().all(|p| p.members.len() >= config.k3);
                let (p_hat, used) = if toggles.sv && covered {
                    soft_vote(&p, f_v, s, config.k3)?
                } else {
                    (p, 0)
                };
                (p_hat, used > 0, Some(f_m))
            }
            None => (p_vl, false, None),
        };

        let pred = p_hat.argmax();
        predictions.push(PredictionRecord {
            id: record.id.clone(),
            pred,
            class: res.class_names[pred].clone(),
            probs: p_hat.probs().to_vec(),
            soft_voted,
            label: record.label,
        });

        if let (Some(s), Some(f_m)) = (state.as_mut(), f_m) {
            if admit(f_v, &f_m, &p_hat, s)? {
                admissions += 1;
                since_recluster += 1;
            }
        }

        if config.mode == Mode::Streaming && toggles.needs_state() {
            seen_images.push(f_v.clone());
            match &state {
                None if seen_images.len() >= warmup => {
                    let s = bootstrap(
                        &seen_images,
                        res.nouns,
                        res.class_names,
                        &prompts.plain,
                        config,
                    )?;
                    debug!("bootstrapped on {} records", seen_images.len());
                    initial_state = Some(s.clone());
                    state = Some(s);
                }
                Some(s) if config.recluster > 0 && since_recluster >= config.recluster => {
                    state = Some(recluster(s, &seen_images, res.nouns)?);
                    since_recluster = 0;
                    reclusters += 1;
                    debug!("re-clustered on {} records", seen_images.len());
                }
                _ => {}
            }
        }
    }

    let mut summary = Summary::from_predictions(&predictions);
    summary.skipped = skipped;
    summary.admissions = admissions;
    summary.reclusters = reclusters;
    Ok(StreamOutcome {
        predictions,
        summary,
        initial_state,
        final_state: state,
    })
}
