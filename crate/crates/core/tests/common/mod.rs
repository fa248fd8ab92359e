//! Brute-force grid oracle over the admissible set for n <= 2, with
//! hierarchical zoom around the best grid points.
//!
//! For n = 2 a point is `(s, theta)`: the feasible radii along a direction
//! form an interval `[r_lo(theta), beta]`, found by bisection on membership,
//! and `r = r_lo + s (beta - r_lo)`. The inner boundary is `s = 0`.

#![allow(dead_code)]

use std::f64::consts::PI;

use dualmax::nalgebra::{DMatrix, DVector};
use dualmax::uncertainty;
use dualmax::{ConeParams, DataMatrix, ProblemData};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn p1() -> (ProblemData, ConeParams) {
    let pd = ProblemData::scalar(1.0, 0.5, 1.0, 2.0, 5.0).unwrap();
    let cone = uncertainty::compute_cone(&pd).unwrap();
    (pd, cone)
}

pub fn s(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

const DIRECTIONS: usize = 10_000;
const RADII: usize = 100;
const LINE_POINTS: usize = 10_000;
const KEEP: usize = 8;
const LEVELS: usize = 9;
const LOCAL: usize = 21;
const MAX_MOVES: usize = 200;

#[derive(Debug, Clone)]
pub struct OracleMax {
    pub point: DVector<f64>,
    pub value: f64,
}

/// Grid points of the admissible set, in polar coordinates `(r, theta)` for
/// n = 2 and signed radius for n = 1.
pub struct Grid<'a> {
    pd: &'a ProblemData,
    cone: &'a ConeParams,
    coarse: Vec<Vec<f64>>,
    points: Vec<DVector<f64>>,
    steps: Vec<f64>,
}

impl<'a> Grid<'a> {
    pub fn new(pd: &'a ProblemData, cone: &'a ConeParams) -> Self {
        let n = pd.n();
        assert!(n <= 2, "grid oracle covers n <= 2");
        let beta = pd.beta();
        let mut coarse = Vec::new();
        let steps = if n == 1 {
            let h = 2.0 * beta / (LINE_POINTS - 1) as f64;
            for i in 0..LINE_POINTS {
                coarse.push(vec![-beta + h * i as f64]);
            }
            for v in [1.0, -1.0, beta, -beta] {
                coarse.push(vec![v]);
            }
            vec![h]
        } else {
            let hs = 1.0 / (RADII - 1) as f64;
            let ht = 2.0 * PI / DIRECTIONS as f64;
            for i in 0..RADII {
                for j in 0..DIRECTIONS {
                    coarse.push(vec![hs * i as f64, ht * j as f64]);
                }
            }
            vec![hs, ht]
        };
        let mut g = Grid { pd, cone, coarse, points: Vec::new(), steps };
        let coarse = std::mem::take(&mut g.coarse);
        g.coarse = coarse.into_iter().filter(|c| g.admissible(c)).collect();
        g.points = g.coarse.iter().map(|c| g.to_vector(c)).collect();
        g
    }

    pub fn len(&self) -> usize {
        self.coarse.len()
    }

    pub fn to_vector(&self, c: &[f64]) -> DVector<f64> {
        if self.pd.n() == 1 {
            return DVector::from_element(1, c[0]);
        }
        let beta = self.pd.beta();
        let lo = self.inner_radius(c[1]).unwrap_or(beta);
        let r = lo + c[0].clamp(0.0, 1.0) * (beta - lo);
        DVector::from_vec(vec![r * c[1].cos(), r * c[1].sin()])
    }

    /// Smallest admissible radius along direction `theta`.
    fn inner_radius(&self, theta: f64) -> Option<f64> {
        let d = DVector::from_vec(vec![theta.cos(), theta.sin()]);
        let ok = |r: f64| uncertainty::member_cone(self.pd, self.cone, &(&d * r));
        let (mut lo, mut hi) = (1.0, self.pd.beta());
        if !ok(hi) {
            return None;
        }
        if ok(lo) {
            return Some(lo);
        }
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi)
    }

    fn admissible(&self, c: &[f64]) -> bool {
        if self.pd.n() == 2 {
            return (0.0..=1.0).contains(&c[0])
                && self.inner_radius(c[1]).is_some()
                && uncertainty::member_cone(self.pd, self.cone, &self.to_vector(c));
        }
        let beta = self.pd.beta();
        if c[0].abs() < 1.0 - 1e-15 || c[0].abs() > beta * (1.0 + 1e-15) {
            return false;
        }
        uncertainty::member_cone(self.pd, self.cone, &self.to_vector(c))
    }

    /// Maximum of `f` over the admissible set.
    pub fn maximize<F: Fn(&DVector<f64>) -> f64>(&self, f: F) -> OracleMax {
        let eval = |c: &Vec<f64>| f(&self.to_vector(c));
        let mut scored: Vec<(f64, Vec<f64>)> =
            self.coarse.iter().zip(&self.points).map(|(c, p)| (f(p), c.clone())).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        scored.truncate(KEEP);
        let mut best = scored[0].clone();
        for (v0, c0) in scored {
            let (mut v, mut c) = (v0, c0);
            let mut h: Vec<f64> = self.steps.clone();
            for _ in 0..LEVELS {
                // Recentre at this scale until no neighbour improves.
                for _ in 0..MAX_MOVES {
                    let (lv, lc) = self.local(&eval, &c, &h);
                    if lv <= v {
                        break;
                    }
                    v = lv;
                    c = lc;
                }
                h.iter_mut().for_each(|x| *x /= (LOCAL as f64 - 1.0) / 4.0);
            }
            if v > best.0 {
                best = (v, c);
            }
        }
        OracleMax { point: self.to_vector(&best.1), value: best.0 }
    }

    pub fn minimize<F: Fn(&DVector<f64>) -> f64>(&self, f: F) -> OracleMax {
        let m = self.maximize(|b| -f(b));
        OracleMax { point: m.point, value: -m.value }
    }

    fn local<E: Fn(&Vec<f64>) -> f64>(&self, eval: &E, center: &[f64], h: &[f64]) -> (f64, Vec<f64>) {
        let half = (LOCAL / 2) as f64;
        let mut best = (f64::NEG_INFINITY, center.to_vec());
        let dims = center.len();
        let total = LOCAL.pow(dims as u32);
        for k in 0..total {
            let mut c = center.to_vec();
            let mut idx = k;
            for d in 0..dims {
                let i = (idx % LOCAL) as f64 - half;
                idx /= LOCAL;
                c[d] += i * h[d];
            }
            if self.pd.n() == 1 {
                let beta = self.pd.beta();
                c[0] = c[0].clamp(-beta, beta);
            } else {
                c[0] = c[0].clamp(0.0, 1.0);
            }
            if !self.admissible(&c) {
                continue;
            }
            let v = eval(&c);
            if v > best.0 {
                best = (v, c);
            }
        }
        best
    }
}

/// Statistic from `len` random transitions of `x+ = Ax + B u + sigma w`.
pub fn random_statistic<R: Rng>(
    pd: &ProblemData,
    cone: &ConeParams,
    len: usize,
    sigma: f64,
    rng: &mut R,
) -> DataMatrix {
    let n = pd.n();
    let b = uncertainty::sample(pd, cone, rng).unwrap();
    let mut data = DataMatrix::new(n);
    for _ in 0..len {
        let x = normal_vec(n, rng);
        let u: f64 = StandardNormal.sample(rng);
        let w = normal_vec(n, rng) * sigma;
        let xn = pd.a() * &x + &b * u + w;
        data.update(&x, u, &xn).unwrap();
    }
    data
}

pub fn normal_vec<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Fixed n = 2 instances: one of cone kind, one where every direction is
/// admissible.
pub fn planar_instances() -> Vec<ProblemData> {
    let cone_kind = ProblemData::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.4]),
        DMatrix::from_row_slice(2, 2, &[0.6, 0.1, 0.1, 0.5]),
        0.5,
        2.0,
        6.0,
    )
    .unwrap();
    let all_kind = ProblemData::new(
        DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.1, 0.2]),
        DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.3]),
        0.5,
        1.8,
        3.0,
    )
    .unwrap();
    vec![cone_kind, all_kind]
}

/// Relative objective gap used by the optimizer-vs-oracle comparisons.
pub fn rel_gap(found: f64, oracle: f64) -> f64 {
    (found - oracle).abs() / oracle.abs().max(1.0)
}

#[derive(Debug, Clone)]
pub struct OracleQuery {
    pub n: usize,
    pub label: &'static str,
    pub found: f64,
    pub oracle: f64,
    pub gap: f64,
}

/// Compares `select_bhat`, `min_B z_B`, `z_bar` and `min_norm_sq` with the grid
/// oracle on `per_instance` random `(x, Z)` queries for each instance.
pub fn oracle_comparisons(instances: &[ProblemData], per_instance: usize, seed: u64) -> Vec<OracleQuery> {
    use dualmax::policy::{self, EstimateObjective};
    use dualmax::{bellman, statistics};
    use rand::SeedableRng;

    let mut out = Vec::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for pd in instances {
        let cone = uncertainty::compute_cone(pd).unwrap();
        let grid = Grid::new(pd, &cone);
        assert!(grid.len() > 0, "empty oracle grid");
        let n = pd.n();
        let mut push = |label, found: f64, oracle: f64| {
            out.push(OracleQuery { n, label, found, oracle, gap: rel_gap(found, oracle) });
        };
        let mn = uncertainty::min_norm_sq(pd, &cone).unwrap();
        push("min_norm_sq", mn, grid.minimize(|b| b.norm_squared()).value);
        for _ in 0..per_instance {
            let len = rng.random_range(0..12);
            let sigma = [0.1, 1.0, 3.0][rng.random_range(0..3)];
            let data = random_statistic(pd, &cone, len, sigma, &mut rng);
            let x = normal_vec(n, &mut rng) * [0.1, 1.0, 10.0][rng.random_range(0..3)];
            let obj = EstimateObjective::new(pd, &data, &x);
            let b_hat = policy::select_bhat(pd, &data, &cone, &x).unwrap();
            push("select_bhat", obj.value(&b_hat), grid.maximize(|b| obj.value(b)).value);
            let parts = data.parts(pd);
            push("min_z", bellman::min_misfit(pd, &data, &cone).unwrap(), grid.minimize(|b| parts.z(b)).value);
            let zbar = statistics::z_bar(pd, &data, &cone).unwrap();
            let avg = |b: &DVector<f64>| 0.5 * (statistics::z_b(pd, &data, b) + statistics::z_b(pd, &data, &(-b)));
            push("z_bar", zbar, grid.minimize(avg).value);
        }
    }
    out
}
