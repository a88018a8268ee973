//! Synthetic domain-shift benchmark.
//!
//! A seeded stand-in for a vision-language model and two test domains:
//!
//! * Each class has a unit Gaussian text anchor `a_c`. Its fine-grained
//!   nouns sit close to the anchor in text space, while the matching visual
//!   sub-modes spread further out, so raw image clusters are looser than the
//!   nouns that describe them.
//! * Each attribute `j` has a generic direction `e_j` (what "The photo is
//!   {attribute}" encodes) and a linear appearance map `T_j`.
//! * The encoder maps `"a {attrs} photo of a {class}"` to
//!   `normalize(A a_class + lambda * mean_j e_j)` with `A = I + beta * sum_j T_j`,
//!   so attribute words change what the class looks like.
//! * Source-domain images are sub-mode vectors plus isotropic noise. The
//!   shifted domain rotates every sub-mode by a hidden orthogonal map `Q`
//!   and renders it through a fixed set of style attributes. Prompts carrying
//!   the right attributes undo the style part; only the test images
//!   themselves reveal the rotation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adaptation::StreamRecord;
use crate::config::Toggles;
use crate::encoder::{EncodeKind, EncodeRequest, Encoder, FixtureCache};
use crate::error::{Result, TataError};
use crate::numerics::{dot, l2_normalize, Embedding, Role};
use crate::textspace::{compose_prompt, select_attributes, TextBank};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Visual sub-modes (and matching nouns) per class.
    pub submodes: usize,
    /// Spread of visual sub-modes around the class anchor.
    pub image_spread: f64,
    /// Spread of the matching nouns around the class anchor.
    pub noun_spread: f64,
    pub distractor_nouns: usize,
    pub attributes: usize,
    /// Style attributes that render the shifted domain.
    pub style_attributes: usize,
    /// Strength of each attribute's appearance map.
    pub beta: f64,
    /// Weight of the generic attribute direction.
    pub lambda: f64,
    /// How far the hidden rotation `Q` is from the identity.
    pub rotation: f64,
    /// Expected noise norm of source-domain images.
    pub source_noise: f64,
    /// Expected noise norm of shifted-domain images.
    pub shifted_noise: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 128,
            per_class: 40,
            submodes: 3,
            image_spread: 1.0,
            noun_spread: 0.2,
            distractor_nouns: 60,
            attributes: 40,
            style_attributes: 3,
            beta: 0.6,
            lambda: 1.5,
            rotation: 1.2,
            source_noise: 0.1,
            shifted_noise: 0.5,
        }
    }
}

impl SyntheticParams {
    /// Applies `name=value` pairs, as used by the command-line tools.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let bad = || TataError::InvalidValue {
            field: "synthetic",
            reason: format!("cannot set {name} to {value:?}"),
        };
        let int = || value.parse::<usize>().map_err(|_| bad());
        let float = || value.parse::<f64>().map_err(|_| bad());
        match name {
            "classes" => self.classes = int()?,
            "dim" => self.dim = int()?,
            "per_class" => self.per_class = int()?,
            "submodes" => self.submodes = int()?,
            "image_spread" => self.image_spread = float()?,
            "noun_spread" => self.noun_spread = float()?,
            "distractor_nouns" => self.distractor_nouns = int()?,
            "attributes" => self.attributes = int()?,
            "style_attributes" => self.style_attributes = int()?,
            "beta" => self.beta = float()?,
            "lambda" => self.lambda = float()?,
            "rotation" => self.rotation = float()?,
            "source_noise" => self.source_noise = float()?,
            "shifted_noise" => self.shifted_noise = float()?,
            _ => return Err(bad()),
        }
        Ok(())
    }
}

/// The generative model; also usable directly as an [`Encoder`] for text.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub params: SyntheticParams,
    pub class_names: Vec<String>,
    pub attribute_names: Vec<String>,
    anchors: Vec<Vec<f64>>,
    /// Per class and sub-mode: (visual direction, noun direction).
    submodes: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    attribute_dirs: Vec<Vec<f64>>,
    /// Row-major `dim x dim` appearance maps.
    maps: Vec<Vec<f64>>,
    /// Row-major hidden rotation of the shifted domain.
    rotation: Vec<f64>,
    /// `T_j a_c`, indexed `[j][c]`.
    mapped_anchors: Vec<Vec<Vec<f64>>>,
    pub style: Vec<usize>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_of(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    unit_of(gaussian(rng, dim))
}

fn add_scaled(acc: &mut [f64], v: &[f64], s: f64) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += s * x;
    }
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    m.chunks_exact(v.len()).map(|row| dot(row, v)).collect()
}

/// Orthonormalizes the rows of `I + strength * G` (Gram-Schmidt).
fn near_identity_rotation(rng: &mut ChaCha8Rng, d: usize, strength: f64) -> Vec<f64> {
    let scale = strength / (d as f64).sqrt();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    for i in 0..d {
        let mut v: Vec<f64> = gaussian(rng, d).into_iter().map(|x| x * scale).collect();
        v[i] += 1.0;
        for u in &rows {
            let p = dot(&v, u);
            add_scaled(&mut v, u, -p);
        }
        rows.push(unit_of(v));
    }
    rows.concat()
}

impl SyntheticWorld {
    pub fn new(params: SyntheticParams, seed: u64) -> Result<Self> {
        if params.classes == 0
            || params.dim < 4
            || params.submodes == 0
            || params.attributes < params.style_attributes
        {
            return Err(TataError::InvalidValue {
                field: "synthetic",
                reason: "need classes, submodes >= 1, dim >= 4, attributes >= style_attributes"
                    .into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = params.dim;
        let anchors: Vec<Vec<f64>> = (0..params.classes).map(|_| unit(&mut rng, d)).collect();
        let submodes = anchors
            .iter()
            .map(|a| {
                (0..params.submodes)
                    .map(|_| {
                        let u = unit(&mut rng, d);
                        let (mut visual, mut noun) = (a.clone(), a.clone());
                        add_scaled(&mut visual, &u, params.image_spread);
                        add_scaled(&mut noun, &u, params.noun_spread);
                        (unit_of(visual), unit_of(noun))
                    })
                    .collect()
            })
            .collect();
        let attribute_dirs = (0..params.attributes).map(|_| unit(&mut rng, d)).collect();
        let scale = 1.0 / (d as f64).sqrt();
        let maps: Vec<Vec<f64>> = (0..params.attributes)
            .map(|_| {
                gaussian(&mut rng, d * d)
                    .into_iter()
                    .map(|x| x * scale)
                    .collect()
            })
            .collect();
        let rotation = near_identity_rotation(&mut rng, d, params.rotation);
        let mapped_anchors = maps
            .iter()
            .map(|m: &Vec<f64>| anchors.iter().map(|a| mat_vec(m, a)).collect())
            .collect();
        let mut order: Vec<usize> = (0..params.attributes).collect();
        order.shuffle(&mut rng);
        let mut style = order[..params.style_attributes].to_vec();
        style.sort_unstable();
        Ok(Self {
            class_names: (0..params.classes)
                .map(|c| format!("class{c:02}"))
                .collect(),
            attribute_names: (0..params.attributes)
                .map(|j| format!("attr{j:02}"))
                .collect(),
            params,
            anchors,
            submodes,
            attribute_dirs,
            maps,
            rotation,
            mapped_anchors,
            style,
        })
    }

    /// `(I + beta * sum_j T_j) v + lambda * mean_j e_j`.
    fn render(&self, v: &[f64], attributes: &[usize]) -> Vec<f64> {
        let mapped: Vec<Vec<f64>> = attributes
            .iter()
            .map(|&j| mat_vec(&self.maps[j], v))
            .collect();
        self.render_mapped(v, attributes, &mapped)
    }

    fn render_mapped<V: AsRef<[f64]>>(
        &self,
        v: &[f64],
        attributes: &[usize],
        mapped: &[V],
    ) -> Vec<f64> {
        let mut out = v.to_vec();
        if attributes.is_empty() {
            return out;
        }
        for m in mapped {
            add_scaled(&mut out, m.as_ref(), self.params.beta);
        }
        let w = self.params.lambda / attributes.len() as f64;
        for &j in attributes {
            add_scaled(&mut out, &self.attribute_dirs[j], w);
        }
        out
    }

    fn text_embedding(&self, prompt: &str) -> Result<Embedding> {
        let unknown = || TataError::Encoder(format!("synthetic encoder cannot parse {prompt:?}"));
        if let Some(attr) = prompt.strip_prefix("The photo is ") {
            let j = self
                .attribute_names
                .iter()
                .position(|a| a == attr)
                .ok_or_else(unknown)?;
            return l2_normalize(&self.attribute_dirs[j], Role::Text);
        }
        let rest = prompt.strip_prefix("a ").ok_or_else(unknown)?;
        if let Some(noun) = rest
            .strip_prefix("photo of ")
            .filter(|r| !r.starts_with("a "))
        {
            return self.noun_embedding(noun).ok_or_else(unknown);
        }
        let (attrs, class) = match rest.split_once("photo of a ") {
            Some((attrs, class)) => (attrs.trim(), class),
            None => return Err(unknown()),
        };
        let c = self
            .class_names
            .iter()
            .position(|n| n == class)
            .ok_or_else(unknown)?;
        let mut ids = Vec::new();
        for word in attrs.split_whitespace() {
            ids.push(
                self.attribute_names
                    .iter()
                    .position(|a| a == word)
                    .ok_or_else(unknown)?,
            );
        }
        let mapped: Vec<&[f64]> = ids
            .iter()
            .map(|&j| self.mapped_anchors[j][c].as_slice())
            .collect();
        l2_normalize(
            &self.render_mapped(&self.anchors[c], &ids, &mapped),
            Role::Text,
        )
    }

    fn noun_name(class: usize, k: usize) -> String {
        format!("noun{class:02}x{k}")
    }

    fn noun_embedding(&self, noun: &str) -> Option<Embedding> {
        let body = noun.strip_prefix("noun")?;
        let (c, k) = body.split_once('x')?;
        let (_, v) = self
            .submodes
            .get(c.parse::<usize>().ok()?)?
            .get(k.parse::<usize>().ok()?)?;
        l2_normalize(v, Role::Text).ok()
    }

    /// Sub-mode nouns of every class plus random distractors, in a fixed shuffled order.
    pub fn noun_bank(&self, seed: u64) -> Result<TextBank> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f756e);
        let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
        for (c, modes) in self.submodes.iter().enumerate() {
            for (k, (_, noun)) in modes.iter().enumerate() {
                entries.push((Self::noun_name(c, k), noun.clone()));
            }
        }
        for i in 0..self.params.distractor_nouns {
            entries.push((format!("distractor{i:03}"), unit(&mut rng, self.params.dim)));
        }
        entries.shuffle(&mut rng);
        let (texts, vecs): (Vec<String>, Vec<Vec<f64>>) = entries.into_iter().unzip();
        let embs = vecs
            .iter()
            .map(|v| l2_normalize(v, Role::Text))
            .collect::<Result<Vec<_>>>()?;
        TextBank::new(texts, embs)
    }

    pub fn attribute_bank(&self) -> Result<TextBank> {
        let embs = self
            .attribute_dirs
            .iter()
            .map(|v| l2_normalize(v, Role::Text))
            .collect::<Result<Vec<_>>>()?;
        TextBank::new(self.attribute_names.clone(), embs)
    }

    fn images(&self, shifted: bool, seed: u64, prefix: &str) -> Result<Vec<StreamRecord>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = &self.params;
        let noise = if shifted {
            p.shifted_noise
        } else {
            p.source_noise
        };
        let mut records = Vec::with_capacity(p.classes * p.per_class);
        for c in 0..p.classes {
            for _ in 0..p.per_class {
                let k = rng.random_range(0..p.submodes);
                let (base, _) = &self.submodes[c][k];
                let mut v = if shifted {
                    let rotated = mat_vec(&self.rotation, base);
                    unit_of(self.render(&rotated, &self.style))
                } else {
                    base.clone()
                };
                add_scaled(
                    &mut v,
                    &gaussian(&mut rng, p.dim),
                    noise / (p.dim as f64).sqrt(),
                );
                records.push((c, v));
            }
        }
        records.shuffle(&mut rng);
        records
            .into_iter()
            .enumerate()
            .map(|(i, (c, v))| {
                Ok(StreamRecord::new(
                    format!("{prefix}{i:05}"),
                    l2_normalize(&v, Role::Image)?,
                    Some(c),
                ))
            })
            .collect()
    }
}

impl Encoder for SyntheticWorld {
    fn encode(&self, requests: &[EncodeRequest]) -> Result<Vec<Embedding>> {
        requests
            .iter()
            .map(|r| match r.kind {
                EncodeKind::Text => self.text_embedding(&r.payload),
                EncodeKind::Image => Err(TataError::Encoder(
                    "synthetic world has no image files".into(),
                )),
            })
            .collect()
    }
}

/// Everything one benchmark seed produces.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub world: SyntheticWorld,
    pub nouns: TextBank,
    pub attributes: TextBank,
    pub source: Vec<StreamRecord>,
    pub shifted: Vec<StreamRecord>,
    /// Every prompt a run with `n_attr` attributes can ask for on either domain.
    pub prompts: FixtureCache,
}

impl SyntheticBenchmark {
    pub fn generate(params: SyntheticParams, seed: u64, n_attr: usize) -> Result<Self> {
        let world = SyntheticWorld::new(params, seed)?;
        let nouns = world.noun_bank(seed)?;
        let attributes = world.attribute_bank()?;
        let source = world.images(false, seed.wrapping_add(1), "src")?;
        let shifted = world.images(true, seed.wrapping_add(2), "shf")?;

        let none: [&str; 0] = [];
        let mut texts: Vec<String> = world
            .class_names
            .iter()
            .map(|c| compose_prompt(c, &none))
            .collect::<Result<_>>()?;
        for r in source.iter().chain(&shifted) {
            let attrs = select_attributes(&r.image, &attributes, n_attr)?;
            for c in &world.class_names {
                texts.push(compose_prompt(c, &attrs)?);
            }
        }
        texts.sort();
        texts.dedup();
        let embs = world.encode_texts(&texts)?;
        let prompts = FixtureCache::from_texts(&texts, &embs)?;
        Ok(Self {
            world,
            nouns,
            attributes,
            source,
            shifted,
            prompts,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.world.class_names
    }
}

/// The cumulative component rows: zero-shot, +AAP, +BDC, +MAC, +SV.
pub fn toggle_ladder() -> [(&'static str, Toggles); 5] {
    let mut t = Toggles::none();
    let zero = t;
    t.aap = true;
    let aap = t;
    t.bdc = true;
    let bdc = t;
    t.mac = true;
    let mac = t;
    t.sv = true;
    [
        ("zero-shot", zero),
        ("+aap", aap),
        ("+aap+bdc", bdc),
        ("+aap+bdc+mac", mac),
        ("+aap+bdc+mac+sv", t),
    ]
}
