//! Runtime self-check of the distance-covariance kernel against naive loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bdc::{bdc_from_observations, dcov2, ObservationMatrix};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn naive_dcov2(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let centered = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let r = m.len();
        let mut d = vec![vec![0.0; r]; r];
        for i in 0..r {
            for j in 0..r {
                let s: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                d[i][j] = s.sqrt();
            }
        }
        let mut row = vec![0.0; r];
        let mut col = vec![0.0; r];
        let mut all = 0.0;
        for i in 0..r {
            for j in 0..r {
                row[i] += d[i][j] / r as f64;
                col[j] += d[i][j] / r as f64;
                all += d[i][j] / (r * r) as f64;
            }
        }
        let mut a = vec![vec![0.0; r]; r];
        for i in 0..r {
            for j in 0..r {
                a[i][j] = d[i][j] - row[i] - col[j] + all;
            }
        }
        a
    };
    let (a, b) = (centered(x), centered(y));
    let r = x.len();
    let mut s = 0.0;
    for i in 0..r {
        for j in 0..r {
            s += a[i][j] * b[i][j];
        }
    }
    s / (r * r) as f64
}

fn random_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..r)
        .map(|_| (0..c).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

fn kernel(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let a = bdc_from_observations(&ObservationMatrix::from_rows(x)?);
    let b = bdc_from_observations(&ObservationMatrix::from_rows(y)?);
    dcov2(&a, &b)
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Random orthogonal matrix via Gram-Schmidt.
fn orthogonal(rng: &mut ChaCha8Rng, c: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(c);
    while q.len() < c {
        let mut v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    q
}

fn transform(rows: &[Vec<f64>], q: &[Vec<f64>], shift: &[f64]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            (0..q.len())
                .map(|i| q[i].iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + shift[i])
                .collect()
        })
        .collect()
}

pub fn run(seed: u64, trials: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (x, y) = (random_rows(&mut rng, 8, 4), random_rows(&mut rng, 8, 4));
        worst = worst.max(relative(kernel(&x, &y)?, naive_dcov2(&x, &y)));
    }
    checks.push(Check {
        name: "loop-oracle",
        passed: worst <= 1e-9,
        detail: format!("{trials} pairs of 8x4, max relative error {worst:.3e}"),
    });

    let mut worst = 0.0f64;
    for _ in 0..trials {
        let p: Vec<Vec<f64>> = random_rows(&mut rng, 2, 3);
        let q: Vec<Vec<f64>> = random_rows(&mut rng, 2, 3);
        let dist = |m: &[Vec<f64>]| {
            m[0].iter()
                .zip(&m[1])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let want = dist(&p) * dist(&q) / 4.0;
        worst = worst.max((kernel(&p, &q)? - want).abs());
    }
    checks.push(Check {
        name: "two-point-closed-form",
        passed: worst <= 1e-10,
        detail: format!("max absolute error {worst:.3e}"),
    });

    let (mut t_worst, mut o_worst) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let (x, y) = (random_rows(&mut rng, 6, 5), random_rows(&mut rng, 6, 5));
        let base = kernel(&x, &y)?;
        let shift: Vec<f64> = (0..5).map(|_| rng.random_range(-10.0..10.0)).collect();
        let id: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..5).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let shifted = kernel(&transform(&x, &id, &shift), &y)?;
        t_worst = t_worst.max(relative(shifted, base));
        let q = orthogonal(&mut rng, 5);
        let zero = vec![0.0; 5];
        let rotated = kernel(&transform(&x, &q, &zero), &transform(&y, &q, &zero))?;
        o_worst = o_worst.max(relative(rotated, base));
    }
    checks.push(Check {
        name: "translation-invariance",
        passed: t_worst <= 1e-9,
        detail: format!("max relative change {t_worst:.3e}"),
    });
    checks.push(Check {
        name: "orthogonal-invariance",
        passed: o_worst <= 1e-9,
        detail: format!("max relative change {o_worst:.3e}"),
    });

    let mut margin = 0.0f64;
    let mut asym = 0.0f64;
    let mut negative = 0usize;
    for _ in 0..trials {
        let r = rng.random_range(2..12);
        let x = random_rows(&mut rng, r, 3);
        let a = bdc_from_observations(&ObservationMatrix::from_rows(&x)?);
        margin = margin.max(a.max_abs_margin() / r as f64);
        asym = asym.max(a.max_asymmetry());
        if dcov2(&a, &a)? < 0.0 {
            negative += 1;
        }
    }
    checks.push(Check {
        name: "double-centering-margins",
        passed: margin <= 1e-7,
        detail: format!("max |row or column sum| / r = {margin:.3e}"),
    });
    checks.push(Check {
        name: "symmetry",
        passed: asym <= 1e-12,
        detail: format!("max asymmetry {asym:.3e}"),
    });
    checks.push(Check {
        name: "non-negative-self-covariance",
        passed: negative == 0,
        detail: format!("{negative} negative values"),
    });
    Ok(checks)
}
