use super::*;
use crate::config::Toggles;
use crate::numerics::PredictionDistribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn emb(v: &[f64], role: Role) -> Embedding {
    l2_normalize(v, role).unwrap()
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize, role: Role) -> Embedding {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    emb(&v, role)
}

fn basis(d: usize, i: usize) -> Embedding {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    emb(&v, Role::Image)
}

fn dist(p: &[f64]) -> PredictionDistribution {
    PredictionDistribution::from_probs(p.to_vec()).unwrap()
}

/// Image-space state whose prototypes sit at the given centroids.
fn state_with(centroids: Vec<Embedding>, config: RunConfig) -> AdaptState {
    let prototypes = centroids
        .iter()
        .enumerate()
        .map(|(m, c)| ClassPrototype::new(m, format!("c{m}"), c.clone()).unwrap())
        .collect();
    AdaptState {
        prototypes,
        features: FeatureSpace::Image,
        class_text: centroids,
        updates: 0,
        config,
        seed: 0,
    }
}

fn literal_config() -> RunConfig {
    RunConfig {
        tau_vv: 1.0,
        vv_self_scale: false,
        ..RunConfig::default()
    }
}

// ---------- pseudo-labeling ----------

#[test]
fn pseudo_label_identity_on_matching_centroids() {
    let t: Vec<Embedding> = (0..4).map(|i| basis(4, i)).collect();
    assert_eq!(pseudo_label(&t, &t, 0.01).unwrap(), vec![0, 1, 2, 3]);
}

#[test]
fn pseudo_label_single_class() {
    let t = vec![basis(3, 0)];
    let c = vec![basis(3, 2)];
    assert_eq!(pseudo_label(&c, &t, 0.01).unwrap(), vec![0]);
}

#[test]
fn pseudo_label_is_a_permutation_even_when_all_centroids_agree() {
    let t: Vec<Embedding> = (0..5).map(|i| basis(5, i)).collect();
    let c = vec![basis(5, 0); 5];
    let mut labels = pseudo_label(&c, &t, 0.01).unwrap();
    labels.sort_unstable();
    assert_eq!(labels, vec![0, 1, 2, 3, 4]);
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Greedy matching picks the highest remaining entry each round, so its result
/// is the assignment whose descending-sorted probabilities are lexicographically largest.
#[test]
fn pseudo_label_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let t: Vec<Embedding> = (0..4)
            .map(|_| random_unit(&mut rng, 6, Role::Image))
            .collect();
        let c: Vec<Embedding> = (0..4)
            .map(|_| random_unit(&mut rng, 6, Role::Image))
            .collect();
        let tau = 0.1;
        let post: Vec<Vec<f64>> = c
            .iter()
            .map(|ci| {
                let s: Vec<f64> = t.iter().map(|tm| cosine_sim(ci, tm).unwrap()).collect();
                softmax_temp(&s, tau).unwrap().probs().to_vec()
            })
            .collect();
        let key = |p: &[usize]| {
            let mut v: Vec<f64> = p.iter().enumerate().map(|(i, &m)| post[i][m]).collect();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v
        };
        let best = permutations(4)
            .into_iter()
            .max_by(|a, b| key(a).partial_cmp(&key(b)).unwrap())
            .unwrap();
        assert_eq!(pseudo_label(&c, &t, tau).unwrap(), best);
    }
}

#[test]
fn pseudo_label_argmax_may_repeat() {
    let t: Vec<Embedding> = (0..3).map(|i| basis(3, i)).collect();
    let c = vec![basis(3, 1); 3];
    assert_eq!(pseudo_label_argmax(&c, &t, 0.01).unwrap(), vec![1, 1, 1]);
}

// ---------- vision-vision ----------

#[test]
fn vv_uniform_when_prototypes_coincide() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = random_unit(&mut rng, 16, Role::Image);
    let state = state_with(vec![c; 4], RunConfig::default());
    let q = random_unit(&mut rng, 16, Role::Image);
    for p in vv_inference(&q, &state).unwrap().probs() {
        assert!((p - 0.25).abs() < 1e-12);
    }
}

#[test]
fn vv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centroids: Vec<Embedding> = (0..5)
        .map(|_| random_unit(&mut rng, 16, Role::Image))
        .collect();
    let q = random_unit(&mut rng, 16, Role::Image);

    // naive dCov2: 4x4 reshape, explicit double centering
    let naive = |a: &Embedding, b: &Embedding| -> f64 {
        let centered = |e: &Embedding| {
            let v = e.as_slice();
            let mut d = [[0.0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    let s: f64 = (0..4).map(|k| (v[i * 4 + k] - v[j * 4 + k]).powi(2)).sum();
                    d[i][j] = s.sqrt();
                }
            }
            let total: f64 = d.iter().flatten().sum::<f64>() / 16.0;
            let mut a = [[0.0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    let ri: f64 = d[i].iter().sum::<f64>() / 4.0;
                    let cj: f64 = (0..4).map(|k| d[k][j]).sum::<f64>() / 4.0;
                    a[i][j] = d[i][j] - ri - cj + total;
                }
            }
            a
        };
        let (x, y) = (centered(a), centered(b));
        let mut s = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                s += x[i][j] * y[i][j];
            }
        }
        (s / 16.0).max(0.0)
    };

    let expect = |scale: f64, tau: f64| -> Vec<f64> {
        let scores: Vec<f64> = centroids.iter().map(|c| naive(&q, c) / scale).collect();
        let m = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| ((s - m) / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    };

    let literal = state_with(centroids.clone(), literal_config());
    let got = vv_inference(&q, &literal).unwrap();
    for (g, w) in got.probs().iter().zip(expect(1.0, 1.0)) {
        assert!((g - w).abs() < 1e-12);
    }

    let cfg = RunConfig::default();
    let tau_vv = cfg.tau_vv;
    let scaled = state_with(centroids.clone(), cfg);
    let got = vv_inference(&q, &scaled).unwrap();
    for (g, w) in got.probs().iter().zip(expect(naive(&q, &q), tau_vv)) {
        assert!((g - w).abs() < 1e-9);
    }
}

#[test]
fn vv_prefers_the_query_prototype() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let centroids: Vec<Embedding> = (0..4)
        .map(|_| random_unit(&mut rng, 16, Role::Image))
        .collect();
    let state = state_with(centroids.clone(), RunConfig::default());
    assert_eq!(vv_inference(&centroids[2], &state).unwrap().argmax(), 2);
}

#[test]
fn vv_uses_cosine_when_bdc_is_off() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centroids: Vec<Embedding> = (0..3)
        .map(|_| random_unit(&mut rng, 9, Role::Image))
        .collect();
    let cfg = RunConfig {
        toggles: Toggles {
            bdc: false,
            ..Toggles::all()
        },
        ..RunConfig::default()
    };
    let q = random_unit(&mut rng, 9, Role::Image);
    let state = state_with(centroids.clone(), cfg);
    let sims: Vec<f64> = centroids
        .iter()
        .map(|c| cosine_sim(&q, c).unwrap())
        .collect();
    let want = softmax_temp(&sims, 0.01).unwrap();
    assert_eq!(vv_inference(&q, &state).unwrap(), want);
}

#[test]
fn vv_requires_prototypes() {
    let state = state_with(vec![], RunConfig::default());
    assert!(matches!(
        vv_inference(&basis(4, 0), &state),
        Err(TataError::UninitializedState)
    ));
}

#[test]
fn vv_sequential_equals_parallel() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let centroids: Vec<Embedding> = (0..20)
        .map(|_| random_unit(&mut rng, 64, Role::Image))
        .collect();
    let state = state_with(centroids, RunConfig::default());
    let q = random_unit(&mut rng, 64, Role::Image);
    let a = vv_inference_with(&q, &state, Execution::Sequential).unwrap();
    let b = vv_inference_with(&q, &state, Execution::default()).unwrap();
    assert_eq!(a, b);
}

// ---------- vision-language ----------

#[test]
fn vl_sharp_at_default_temperature() {
    let f = emb(&[0.0, 0.1, 1.0], Role::Image);
    let classes: Vec<Embedding> = (0..3).map(|i| basis(3, i)).collect();
    let p = vl_inference(&f, &classes, 0.01).unwrap();
    assert!(p.probs()[2] >= 1.0 - 1e-6);
}

#[test]
fn vl_uniform_when_equidistant() {
    let f = emb(&[1.0, 1.0, 1.0], Role::Image);
    let classes: Vec<Embedding> = (0..3).map(|i| basis(3, i)).collect();
    for p in vl_inference(&f, &classes, 0.01).unwrap().probs() {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn vl_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = random_unit(&mut rng, 12, Role::Image);
    let classes: Vec<Embedding> = (0..6)
        .map(|_| random_unit(&mut rng, 12, Role::Text))
        .collect();
    let tau = 0.2;
    let raw: Vec<f64> = classes
        .iter()
        .map(|c| {
            let s: f64 = f
                .as_slice()
                .iter()
                .zip(c.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            (s / tau).exp()
        })
        .collect();
    let z: f64 = raw.iter().sum();
    let got = vl_inference(&f, &classes, tau).unwrap();
    for (g, r) in got.probs().iter().zip(&raw) {
        assert!((g - r / z).abs() < 1e-12);
    }
}

// ---------- fusion ----------

#[test]
fn fuse_alpha_zero_is_vision_language() {
    let vv = dist(&[0.9, 0.1]);
    let vl = dist(&[0.3, 0.7]);
    assert_eq!(fuse(&vv, &vl, 0.0).unwrap(), vl);
}

#[test]
fn fuse_example_values() {
    let out = fuse(&dist(&[0.8, 0.2]), &dist(&[0.2, 0.8]), 1.75).unwrap();
    assert!((out.probs()[0] - 0.581_818_181_818_181_8).abs() < 1e-12);
    assert!((out.probs()[1] - 0.418_181_818_181_818_2).abs() < 1e-12);
}

#[test]
fn fuse_fixed_point_and_validation() {
    let p = dist(&[0.2, 0.5, 0.3]);
    let out = fuse(&p, &p, 3.0).unwrap();
    for (a, b) in out.probs().iter().zip(p.probs()) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(matches!(
        fuse(&p, &p, -0.1),
        Err(TataError::NegativeAlpha(_))
    ));
    assert!(matches!(
        fuse(&p, &dist(&[0.5, 0.5]), 1.0),
        Err(TataError::LengthMismatch(3, 2))
    ));
}

// ---------- soft voting ----------

fn with_members(members: Vec<(Embedding, PredictionDistribution)>, n: usize) -> AdaptState {
    let d = members.first().map_or(4, |m| m.0.dim());
    let mut state = state_with((0..n).map(|i| basis(d, i)).collect(), RunConfig::default());
    for (img, p) in members {
        let c = p.argmax();
        state.prototypes[c].members.push(Member {
            feature: img.clone(),
            image: img,
            confidence: p.max(),
            distribution: p,
        });
    }
    state
}

#[test]
fn soft_vote_identity_without_neighbors() {
    let p = dist(&[0.6, 0.4]);
    let empty = with_members(vec![], 2);
    let (out, used) = soft_vote(&p, &basis(4, 0), &empty, 4).unwrap();
    assert_eq!((out, used), (p.clone(), 0));
    let full = with_members(vec![(basis(4, 0), dist(&[1.0, 0.0]))], 2);
    let (out, used) = soft_vote(&p, &basis(4, 0), &full, 0).unwrap();
    assert_eq!((out, used), (p, 0));
}

#[test]
fn soft_vote_example() {
    let state = with_members(
        vec![
            (basis(4, 0), dist(&[1.0, 0.0])),
            (emb(&[1.0, 0.1, 0.0, 0.0], Role::Image), dist(&[1.0, 0.0])),
        ],
        2,
    );
    let (out, used) = soft_vote(&dist(&[0.7, 0.3]), &basis(4, 0), &state, 4).unwrap();
    assert_eq!(used, 2);
    assert!((out.probs()[0] - 0.9).abs() < 1e-12);
    assert!((out.probs()[1] - 0.1).abs() < 1e-12);
}

#[test]
fn soft_vote_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 3;
    let members: Vec<(Embedding, PredictionDistribution)> = (0..20)
        .map(|_| {
            let img = random_unit(&mut rng, 8, Role::Image);
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
            let z: f64 = raw.iter().sum();
            (img, dist(&raw.iter().map(|x| x / z).collect::<Vec<_>>()))
        })
        .collect();
    let state = with_members(members.clone(), n);
    let q = random_unit(&mut rng, 8, Role::Image);
    let p = dist(&[0.2, 0.3, 0.5]);
    let k3 = 4;

    let mut order: Vec<usize> = (0..members.len()).collect();
    let sim = |i: usize| cosine_sim(&q, &members[i].0).unwrap();
    order.sort_by(|&a, &b| sim(b).partial_cmp(&sim(a)).unwrap());
    let mut want = p.probs().to_vec();
    for &i in &order[..k3] {
        for (w, x) in want.iter_mut().zip(members[i].1.probs()) {
            *w += x;
        }
    }
    let (out, used) = soft_vote(&p, &q, &state, k3).unwrap();
    assert_eq!(used, k3);
    for (o, w) in out.probs().iter().zip(&want) {
        assert!((o - w / (k3 + 1) as f64).abs() < 1e-12);
    }
    assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

// ---------- admission ----------

#[test]
fn admit_rejects_below_gate() {
    let mut state = state_with((0..2).map(|i| basis(4, i)).collect(), RunConfig::default());
    let before = state.clone();
    let f = basis(4, 0);
    assert!(!admit(&f, &f, &dist(&[0.54, 0.46]), &mut state).unwrap());
    assert_eq!(state, before);
}

#[test]
fn admit_at_centroid_is_a_fixed_point() {
    let mut state = state_with((0..2).map(|i| basis(4, i)).collect(), RunConfig::default());
    let f = basis(4, 1);
    assert!(admit(&f, &f, &dist(&[0.1, 0.9]), &mut state).unwrap());
    let c = state.prototypes[1].centroid.as_slice();
    for (a, b) in c.iter().zip(f.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn admit_evicts_least_confident_and_touches_one_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = RunConfig::default();
    let capacity = cfg.capacity;
    let mut state = state_with((0..3).map(|i| basis(16, i)).collect(), cfg);
    let untouched = state.prototypes[2].clone();
    let confidences = [0.9, 0.6, 0.95, 0.8, 0.7, 0.99, 0.85, 0.75, 0.92];
    for &c in &confidences {
        let f = random_unit(&mut rng, 16, Role::Image);
        assert!(admit(&f, &f, &dist(&[c, 1.0 - c, 0.0]), &mut state).unwrap());
    }
    let p0 = &state.prototypes[0];
    assert_eq!(p0.members.len(), capacity);
    assert!(p0.members.iter().all(|m| m.confidence != 0.6));
    assert_eq!(state.prototypes[2], untouched);
    assert!(state.prototypes[1].members.is_empty());
    assert_eq!(state.updates, confidences.len());

    let mut refs: Vec<&Embedding> = p0.members.iter().map(|m| &m.feature).collect();
    refs.push(&p0.base_centroid);
    let want = update_centroid(&refs).unwrap();
    assert_eq!(p0.centroid, want);
    assert_eq!(p0.bdc, bdc_matrix(&want).unwrap());
}

// ---------- bootstrap ----------

struct Blobs {
    images: Vec<Embedding>,
    labels: Vec<usize>,
    text: Vec<Embedding>,
}

fn blobs(n: usize, d: usize, per: usize, seed: u64) -> Blobs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // random anchors: coordinate-permuted anchors can share a distance structure
    let text: Vec<Embedding> = (0..n)
        .map(|_| random_unit(&mut rng, d, Role::Text))
        .collect();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (c, anchor) in text.iter().enumerate() {
        for _ in 0..per {
            let v: Vec<f64> = anchor
                .as_slice()
                .iter()
                .map(|x| {
                    x + 0.05
                        * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect();
            images.push(emb(&v, Role::Image));
            labels.push(c);
        }
    }
    Blobs {
        images,
        labels,
        text,
    }
}

fn image_only() -> RunConfig {
    RunConfig {
        toggles: Toggles {
            mac: false,
            ..Toggles::all()
        },
        ..RunConfig::default()
    }
}

#[test]
fn bootstrap_recovers_blob_classes() {
    let b = blobs(4, 16, 10, 1);
    let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
    let state = bootstrap(&b.images, None, &names, &b.text, &image_only()).unwrap();
    assert_eq!(state.n_classes(), 4);
    let centroids: Vec<Embedding> = state
        .prototypes
        .iter()
        .map(|p| p.centroid.clone())
        .collect();
    for (img, &label) in b.images.iter().zip(&b.labels) {
        assert_eq!(crate::clustering::assign(img, &centroids).unwrap(), label);
    }
    for (m, p) in state.prototypes.iter().enumerate() {
        assert!(cosine_sim(&p.centroid, &b.text[m]).unwrap() > 0.95);
        assert_eq!(p.label_name, names[m]);
    }
}

#[test]
fn bootstrap_with_exactly_n_images() {
    let b = blobs(3, 6, 1, 2);
    let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
    let state = bootstrap(&b.images, None, &names, &b.text, &image_only()).unwrap();
    for (m, p) in state.prototypes.iter().enumerate() {
        assert!(cosine_sim(&p.centroid, &b.images[m]).unwrap() > 1.0 - 1e-9);
    }
    assert!(matches!(
        bootstrap(&b.images[..2], None, &names, &b.text, &image_only()),
        Err(TataError::TooFewSamples { needed: 3, got: 2 })
    ));
}

#[test]
fn bootstrap_multimodal_is_deterministic_and_parallel_safe() {
    let b = blobs(3, 8, 8, 3);
    let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let noun_embs: Vec<Embedding> = (0..12)
        .map(|_| random_unit(&mut rng, 8, Role::Text))
        .collect();
    let noun_texts: Vec<String> = (0..12).map(|i| format!("noun{i}")).collect();
    let bank = NounBank::new(noun_texts, noun_embs).unwrap();
    let cfg = RunConfig {
        k1: 2,
        ..RunConfig::default()
    };
    let a = bootstrap_with(
        &b.images,
        Some(&bank),
        &names,
        &b.text,
        &cfg,
        Execution::Sequential,
    )
    .unwrap();
    let c = bootstrap_with(
        &b.images,
        Some(&bank),
        &names,
        &b.text,
        &cfg,
        Execution::default(),
    )
    .unwrap();
    assert_eq!(a, c);
    assert!(matches!(a.features, FeatureSpace::Multimodal(_)));
    assert_eq!(a.prototypes[0].centroid.dim(), 16);
    assert!(matches!(
        bootstrap(&b.images, None, &names, &b.text, &cfg),
        Err(TataError::InvalidValue { field: "nouns", .. })
    ));
}

#[test]
fn argmax_labeling_fills_unclaimed_classes() {
    let b = blobs(3, 6, 5, 4);
    let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
    // every centroid looks like class 0 to the text side
    let text = vec![b.text[0].clone(), b.text[0].clone(), b.text[0].clone()];
    let cfg = RunConfig {
        pseudo_labeling: PseudoLabeling::Argmax,
        ..image_only()
    };
    let state = bootstrap(&b.images, None, &names, &text, &cfg).unwrap();
    assert_eq!(state.n_classes(), 3);
    assert!(state
        .prototypes
        .iter()
        .all(|p| (p.centroid.norm() - 1.0).abs() < 1e-12));
}
