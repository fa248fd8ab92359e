//! The admissible set of input vectors.
//!
//! Membership is characterized through the eigen-decomposition of
//! `M = A'A - (1 - gamma^-2)(I - S)`:
//!
//! * `Empty` when the second eigenvalue of `M` is positive,
//! * `All` when the top eigenvalue is nonpositive (only the annulus
//!   `1 <= |B| <= beta` constrains `B`),
//! * `Cone` otherwise: `|B' A U1| >= sqrt(lambda1 (|B|^2 + Rbar))`, i.e. a
//!   second-order cone and its mirror image, intersected with the annulus.
//!
//! `member_direct` evaluates the defining matrix inequality itself and is
//! kept independent of the eigen form so the two can be compared.
//!
//! Extremal queries go through [`maximize_over_set`], a multistart local
//! ascent over a radial parameterization of the set. Inside one cone branch a
//! point is `B = r (cos|s| w + sin|s| E s/|s|)` where `w` is the unit vector
//! along `A U1`, `E` spans its orthogonal complement and `s = h(r) u` with
//! `h(r)` the cap half-angle admissible at radius `r` and `|u| <= 1`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{DualError, Result};
use crate::linalg;
use crate::problem::ProblemData;

/// Number of starting points scored by [`maximize_over_set`].
pub const MULTISTART_COUNT: usize = 64;
/// Local ascents run from the best-scoring distinct starts.
const ASCENTS: usize = 8;
const START_SEED: u64 = 0x5eed_0b5e_7a11_c0de;
const REL_TOL: f64 = 1e-9;
const MAX_POLISH_SWEEPS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SetKind {
    Empty,
    All,
    Cone,
}

/// Eigen-characterization of the admissible set.
#[derive(Debug, Clone)]
pub struct ConeParams {
    pub kind: SetKind,
    /// Eigenvalues of `A'A - (1 - gamma^-2)(I - S)`, descending.
    pub lambda: Vec<f64>,
    /// Unit eigenvector of the top eigenvalue; present for `Cone`.
    pub u1: Option<DVector<f64>>,
    /// Tolerance band for boundary decisions, `1e-9 (1 + |A|^2)`.
    pub band: f64,
    region: Region,
}

#[derive(Debug, Clone)]
enum Region {
    Empty,
    Annulus { lo: f64, hi: f64 },
    Cone(ConeRegion),
}

#[derive(Debug, Clone)]
struct ConeRegion {
    axis: DVector<f64>,
    axis_norm: f64,
    complement: DMatrix<f64>,
    lambda1: f64,
    rbar: f64,
    r_lo: f64,
    r_hi: f64,
}

impl ConeRegion {
    /// Largest admissible angle from the axis at radius `r`.
    fn half_angle(&self, r: f64) -> f64 {
        let c = (self.lambda1 * (1.0 + self.rbar / (r * r))).sqrt() / self.axis_norm;
        c.clamp(-1.0, 1.0).acos()
    }

    /// Coordinates are `(r, u)` with `|u| <= 1`; the angle from the axis is
    /// `|u| half_angle(r)`, so the cone boundary is `|u| = 1` at every radius.
    fn embed(&self, branch: f64, coords: &[f64], out: &mut DVector<f64>) {
        let r = coords[0];
        let s = &coords[1..];
        let limit = self.half_angle(r);
        let phi = limit * s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sinc = if phi < 1e-8 { 1.0 - phi * phi / 6.0 } else { phi.sin() / phi };
        out.copy_from(&self.axis);
        *out *= phi.cos();
        for (j, sj) in s.iter().enumerate() {
            out.axpy(sinc * limit * sj, &self.complement.column(j), 1.0);
        }
        *out *= branch * r;
    }

    fn retract(&self, coords: &mut [f64]) {
        coords[0] = coords[0].clamp(self.r_lo, self.r_hi);
        let s = &mut coords[1..];
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1.0 {
            s.iter_mut().for_each(|v| *v /= norm);
        }
    }

    /// Coordinates of the point of the given branch closest in direction to `b`.
    fn coords_of(&self, branch: f64, b: &DVector<f64>) -> Vec<f64> {
        let n = self.axis.len();
        let mut coords = vec![0.0; n];
        let r = b.norm();
        coords[0] = r;
        if r > 0.0 && n > 1 {
            let d = b * (branch / r);
            let phi = d.dot(&self.axis).clamp(-1.0, 1.0).acos();
            let t = self.complement.transpose() * &d;
            let tn = t.norm();
            let limit = self.half_angle(r.clamp(self.r_lo, self.r_hi));
            if tn > 0.0 && limit > 0.0 {
                for j in 0..n - 1 {
                    coords[j + 1] = phi / limit * t[j] / tn;
                }
            }
        }
        self.retract(&mut coords);
        coords
    }
}

pub fn compute_cone(pd: &ProblemData) -> Result<ConeParams> {
    let n = pd.n();
    let a = pd.a();
    let m = cone_matrix(pd);
    let eig = linalg::symmetric_eigen_desc(&m)?;
    let lambda = eig.values.clone();
    let band = 1e-9 * (1.0 + pd.a_norm().powi(2));
    let lambda1 = lambda[0];
    let lambda2 = if n >= 2 { lambda[1] } else { f64::NEG_INFINITY };
    let kind = if lambda2 > band {
        SetKind::Empty
    } else if lambda1 <= 0.0 {
        SetKind::All
    } else {
        SetKind::Cone
    };

    let mut u1 = DVector::from_column_slice(eig.vectors.column(0).as_slice());
    u1 /= u1.norm();
    let pivot = u1.iamax();
    if u1[pivot] < 0.0 {
        u1 = -u1;
    }

    let region = match kind {
        SetKind::Empty => Region::Empty,
        SetKind::All => Region::Annulus { lo: 1.0, hi: pd.beta() },
        SetKind::Cone => {
            let axis_vec = a * &u1;
            let axis_norm = axis_vec.norm();
            let excess = axis_norm * axis_norm - lambda1;
            if excess <= 0.0 {
                Region::Empty
            } else {
                let r_min_sq = lambda1 * pd.rbar() / excess;
                let axis = &axis_vec / axis_norm;
                Region::Cone(ConeRegion {
                    complement: linalg::orthonormal_complement(&axis),
                    axis,
                    axis_norm,
                    lambda1,
                    rbar: pd.rbar(),
                    r_lo: r_min_sq.sqrt().max(1.0),
                    r_hi: pd.beta(),
                })
            }
        }
    };
    let u1 = (kind == SetKind::Cone).then_some(u1);
    Ok(ConeParams { kind, lambda, u1, band, region })
}

/// `A'A - (1 - gamma^-2)(I - S)`.
pub fn cone_matrix(pd: &ProblemData) -> DMatrix<f64> {
    let n = pd.n();
    let a = pd.a();
    let m = a.transpose() * a - (DMatrix::identity(n, n) - pd.s()) * pd.gain_factor();
    linalg::symmetrize(&m)
}

fn annulus_ok(pd: &ProblemData, norm: f64) -> bool {
    let tol = 1e-12 * pd.beta();
    norm >= 1.0 - tol && norm <= pd.beta() + tol
}

/// Smallest eigenvalue of `A'B (|B|^2 + Rbar)^-1 B'A - M`; nonnegative iff `B`
/// satisfies the dissipativity inequality.
pub fn direct_margin(pd: &ProblemData, b: &DVector<f64>) -> Result<f64> {
    let v = pd.a().transpose() * b;
    let denom = b.norm_squared() + pd.rbar();
    let lhs = if denom > 0.0 { &v * v.transpose() / denom } else { DMatrix::zeros(pd.n(), pd.n()) };
    linalg::min_eigenvalue(&(lhs - cone_matrix(pd)))
}

/// Membership from the defining matrix inequality.
pub fn member_direct(pd: &ProblemData, b: &DVector<f64>) -> bool {
    if b.len() != pd.n() || !annulus_ok(pd, b.norm()) {
        return false;
    }
    let band = 1e-9 * (1.0 + pd.a_norm().powi(2));
    direct_margin(pd, b).map(|m| m >= -band).unwrap_or(false)
}

/// `|B' A U1| - sqrt(lambda1 (|B|^2 + Rbar))` for a `Cone` set.
pub fn cone_margin(pd: &ProblemData, cone: &ConeParams, b: &DVector<f64>) -> Option<f64> {
    let u1 = cone.u1.as_ref()?;
    let proj = b.dot(&(pd.a() * u1)).abs();
    Some(proj - (cone.lambda[0] * (b.norm_squared() + pd.rbar())).sqrt())
}

/// Membership from the eigen (cone) characterization.
pub fn member_cone(pd: &ProblemData, cone: &ConeParams, b: &DVector<f64>) -> bool {
    if b.len() != pd.n() || !annulus_ok(pd, b.norm()) {
        return false;
    }
    match cone.kind {
        SetKind::Empty => false,
        SetKind::All => true,
        SetKind::Cone => cone_margin(pd, cone, b).is_some_and(|m| m >= -cone.band),
    }
}

/// `min |B|^2` over the admissible set.
pub fn min_norm_sq(pd: &ProblemData, cone: &ConeParams) -> Result<f64> {
    match &cone.region {
        Region::Empty => Err(DualError::Infeasible(format!("set kind {:?}, eigenvalues {:?}", cone.kind, cone.lambda))),
        Region::Annulus { lo, .. } => Ok(lo * lo),
        Region::Cone(c) => {
            if c.r_lo > pd.beta() * (1.0 + 1e-12) {
                Err(DualError::Infeasible(format!("minimum admissible norm {} exceeds beta = {}", c.r_lo, pd.beta())))
            } else {
                Ok(c.r_lo * c.r_lo)
            }
        }
    }
}

fn ensure_nonempty(pd: &ProblemData, cone: &ConeParams) -> Result<()> {
    min_norm_sq(pd, cone).map(|_| ())
}

/// Draws an admissible `B`. Both cone branches and the full radius range are
/// covered; the law is uniform in (branch, radius, cap coordinates), not in `B`.
pub fn sample<R: Rng + ?Sized>(pd: &ProblemData, cone: &ConeParams, rng: &mut R) -> Result<DVector<f64>> {
    ensure_nonempty(pd, cone)?;
    let n = pd.n();
    match &cone.region {
        Region::Empty => unreachable!("checked above"),
        Region::Annulus { lo, hi } => {
            let mut d = random_direction(n, rng);
            let r = rng.random_range(*lo..=*hi);
            d *= r;
            Ok(d)
        }
        Region::Cone(c) => {
            let branch = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let r = if c.r_hi > c.r_lo { rng.random_range(c.r_lo..=c.r_hi) } else { c.r_lo };
            let mut coords = vec![r; n];
            if n > 1 {
                let dir = random_direction(n - 1, rng);
                let radius = rng.random::<f64>().powf(1.0 / (n - 1) as f64);
                for j in 0..n - 1 {
                    coords[j + 1] = dir[j] * radius;
                }
            }
            c.retract(&mut coords);
            let mut b = DVector::zeros(n);
            c.embed(branch, &coords, &mut b);
            Ok(b)
        }
    }
}

fn random_direction<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let norm: f64 = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Result of a maximization over the admissible set.
#[derive(Debug, Clone)]
pub struct Maximum {
    pub point: DVector<f64>,
    pub value: f64,
}

/// Maximizes `f` over the admissible set by multistart projected ascent.
///
/// `hints` are directions worth starting from (both signs are used). The start
/// set is otherwise fixed, so results are deterministic.
pub fn maximize_over_set<F>(pd: &ProblemData, cone: &ConeParams, f: F, hints: &[DVector<f64>]) -> Result<Maximum>
where
    F: Fn(&DVector<f64>) -> f64,
{
    ensure_nonempty(pd, cone)?;
    let best = match &cone.region {
        Region::Empty => unreachable!("checked above"),
        Region::Annulus { lo, hi } if pd.n() == 1 => maximize_intervals(&f, &[(*lo, *hi, 1.0), (*lo, *hi, -1.0)]),
        Region::Cone(c) if pd.n() == 1 => {
            let dir = c.axis[0];
            maximize_intervals(&f, &[(c.r_lo, c.r_hi, dir), (c.r_lo, c.r_hi, -dir)])
        }
        Region::Annulus { lo, hi } => maximize_annulus(&f, pd.n(), *lo, *hi, hints),
        Region::Cone(c) => maximize_cone(&f, c, hints),
    };
    if !best.value.is_finite() {
        return Err(DualError::Numeric(format!("objective not finite at optimum ({})", best.value)));
    }
    Ok(best)
}

/// One-dimensional case: `B = sign * r` with `r` in each `[lo, hi]`.
fn maximize_intervals<F: Fn(&DVector<f64>) -> f64>(f: &F, pieces: &[(f64, f64, f64)]) -> Maximum {
    let per_piece = MULTISTART_COUNT / pieces.len();
    let mut buf = DVector::zeros(1);
    let mut eval = |sign: f64, r: f64| {
        buf[0] = sign * r;
        f(&buf)
    };
    let mut best = (f64::NEG_INFINITY, 0.0, 1.0);
    for &(lo, hi, sign) in pieces {
        if hi <= lo {
            let v = eval(sign, lo);
            if v > best.0 {
                best = (v, lo, sign);
            }
            continue;
        }
        let grid: Vec<f64> = (0..per_piece).map(|i| lo + (hi - lo) * i as f64 / (per_piece - 1) as f64).collect();
        let vals: Vec<f64> = grid.iter().map(|&r| eval(sign, r)).collect();
        for i in 0..grid.len() {
            let left = if i == 0 { f64::NEG_INFINITY } else { vals[i - 1] };
            let right = if i + 1 == grid.len() { f64::NEG_INFINITY } else { vals[i + 1] };
            if vals[i] < left || vals[i] < right {
                continue;
            }
            let a = grid[i.saturating_sub(1)];
            let b = grid[(i + 1).min(grid.len() - 1)];
            let (r, v) = golden_max(|r| eval(sign, r), a, b, grid[i], vals[i]);
            if v > best.0 {
                best = (v, r, sign);
            }
        }
    }
    Maximum { point: DVector::from_element(1, best.2 * best.1), value: best.0 }
}

/// Golden-section search on `[a, b]`; keeps the incumbent if it is better.
fn golden_max<G: FnMut(f64) -> f64>(mut g: G, mut a: f64, mut b: f64, x0: f64, f0: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut best = (x0, f0);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = g(c);
    let mut fd = g(d);
    let scale = a.abs().max(b.abs()).max(1.0);
    while b - a > 1e-13 * scale {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = g(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = g(d);
        }
    }
    for (x, v) in [(c, fc), (d, fd), (a, g(a)), (b, g(b))] {
        if v > best.1 {
            best = (x, v);
        }
    }
    best
}

trait Chart {
    fn dim(&self) -> usize;
    fn retract(&self, y: &mut [f64]);
    fn embed(&self, y: &[f64], out: &mut DVector<f64>);
}

struct AnnulusChart {
    lo: f64,
    hi: f64,
    n: usize,
}

impl Chart for AnnulusChart {
    fn dim(&self) -> usize {
        self.n
    }
    fn retract(&self, y: &mut [f64]) {
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            y[0] = self.lo;
        } else {
            let target = norm.clamp(self.lo, self.hi);
            y.iter_mut().for_each(|v| *v *= target / norm);
        }
    }
    fn embed(&self, y: &[f64], out: &mut DVector<f64>) {
        out.as_mut_slice().copy_from_slice(y);
    }
}

struct BranchChart<'a> {
    region: &'a ConeRegion,
    branch: f64,
}

impl Chart for BranchChart<'_> {
    fn dim(&self) -> usize {
        self.region.axis.len()
    }
    fn retract(&self, y: &mut [f64]) {
        self.region.retract(y);
    }
    fn embed(&self, y: &[f64], out: &mut DVector<f64>) {
        self.region.embed(self.branch, y, out);
    }
}

fn maximize_annulus<F: Fn(&DVector<f64>) -> f64>(f: &F, n: usize, lo: f64, hi: f64, hints: &[DVector<f64>]) -> Maximum {
    let chart = AnnulusChart { lo, hi, n };
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(MULTISTART_COUNT);
    for h in hints.iter().filter(|h| h.len() == n && h.norm() > 0.0) {
        for sign in [1.0, -1.0] {
            for r in [lo, hi] {
                starts.push(h.iter().map(|v| sign * r * v / h.norm()).collect());
            }
        }
    }
    for k in 0..n {
        for sign in [1.0, -1.0] {
            let mut y = vec![0.0; n];
            y[k] = sign * hi;
            starts.push(y);
        }
    }
    while starts.len() < MULTISTART_COUNT {
        let d = random_direction(n, &mut rng);
        let r = rng.random_range(lo..=hi);
        starts.push(d.iter().map(|v| v * r).collect());
    }
    starts.truncate(MULTISTART_COUNT);
    run_starts(f, &[(&chart as &dyn Chart, starts)])
}

fn maximize_cone<F: Fn(&DVector<f64>) -> f64>(f: &F, region: &ConeRegion, hints: &[DVector<f64>]) -> Maximum {
    let n = region.axis.len();
    let plus = BranchChart { region, branch: 1.0 };
    let minus = BranchChart { region, branch: -1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut per_branch: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    let mid = 0.5 * (region.r_lo + region.r_hi);
    for (slot, branch) in [(0usize, 1.0), (1usize, -1.0)] {
        for r in [region.r_lo, mid, region.r_hi] {
            let mut y = vec![0.0; n];
            y[0] = r;
            per_branch[slot].push(y);
        }
        for h in hints.iter().filter(|h| h.len() == n && h.norm() > 0.0) {
            for sign in [1.0, -1.0] {
                for r in [region.r_lo, region.r_hi] {
                    let b = h * (sign * r / h.norm());
                    per_branch[slot].push(region.coords_of(branch, &b));
                }
            }
        }
    }
    for starts in per_branch.iter_mut() {
        while starts.len() < MULTISTART_COUNT / 2 {
            let r = if region.r_hi > region.r_lo { rng.random_range(region.r_lo..=region.r_hi) } else { region.r_lo };
            let mut y = vec![r; n];
            let dir = random_direction(n - 1, &mut rng);
            let radius = rng.random::<f64>().powf(1.0 / (n - 1) as f64);
            for j in 0..n - 1 {
                y[j + 1] = dir[j] * radius;
            }
            starts.push(y);
        }
        starts.truncate(MULTISTART_COUNT / 2);
    }
    let [p, m] = per_branch;
    run_starts(f, &[(&plus as &dyn Chart, p), (&minus as &dyn Chart, m)])
}

/// Scores every start, then runs local ascent from the best few that are not
/// near-duplicates of one already chosen.
fn run_starts<F: Fn(&DVector<f64>) -> f64>(f: &F, groups: &[(&dyn Chart, Vec<Vec<f64>>)]) -> Maximum {
    let dim = groups[0].0.dim();
    let mut buf = DVector::zeros(dim);
    let mut scored: Vec<(f64, usize, Vec<f64>, DVector<f64>)> = Vec::new();
    for (g, (chart, starts)) in groups.iter().enumerate() {
        for start in starts {
            let mut y = start.clone();
            chart.retract(&mut y);
            chart.embed(&y, &mut buf);
            let v = f(&buf);
            scored.push((if v.is_nan() { f64::NEG_INFINITY } else { v }, g, y, buf.clone()));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let scale = scored.iter().map(|s| s.3.norm()).fold(1.0, f64::max);
    let mut chosen: Vec<&DVector<f64>> = Vec::new();
    let mut best: Option<Maximum> = None;
    for (_, g, y, point) in &scored {
        if chosen.len() == ASCENTS {
            break;
        }
        if chosen.iter().any(|c| (*c - point).norm() <= 1e-3 * scale) {
            continue;
        }
        chosen.push(point);
        let chart = groups[*g].0;
        let (y, v) = local_ascent(f, chart, y.clone(), &mut buf);
        if best.as_ref().is_none_or(|b| v > b.value) {
            chart.embed(&y, &mut buf);
            best = Some(Maximum { point: buf.clone(), value: v });
        }
    }
    best.expect("at least one start")
}

/// Projected gradient ascent with adaptive steps, then a compass polish.
fn local_ascent<F: Fn(&DVector<f64>) -> f64>(
    f: &F,
    chart: &dyn Chart,
    mut y: Vec<f64>,
    buf: &mut DVector<f64>,
) -> (Vec<f64>, f64) {
    let dim = chart.dim();
    let eval = |y: &[f64], buf: &mut DVector<f64>| {
        chart.embed(y, buf);
        let v = f(buf);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    chart.retract(&mut y);
    let mut fy = eval(&y, buf);
    let mut step = 0.1;
    let mut grad = vec![0.0; dim];
    let mut trial = vec![0.0; dim];
    for _ in 0..300 {
        for i in 0..dim {
            let h = 1e-6 * y[i].abs().max(1.0);
            let orig = y[i];
            y[i] = orig + h;
            let up = eval(&y, buf);
            y[i] = orig - h;
            let down = eval(&y, buf);
            y[i] = orig;
            grad[i] = if up.is_finite() && down.is_finite() { (up - down) / (2.0 * h) } else { 0.0 };
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm == 0.0 {
            break;
        }
        let mut improved = false;
        while step * gnorm > 1e-14 {
            for i in 0..dim {
                trial[i] = y[i] + step * grad[i] / gnorm;
            }
            chart.retract(&mut trial);
            let ft = eval(&trial, buf);
            if ft > fy {
                let gain = ft - fy;
                y.copy_from_slice(&trial);
                fy = ft;
                step *= 2.0;
                improved = gain > REL_TOL * 1e-3 * (1.0 + fy.abs());
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    // Compass polish handles kinks and corners of the retraction.
    let mut delta = 1e-3;
    let mut sweeps = 0;
    while delta > 1e-12 && sweeps < MAX_POLISH_SWEEPS {
        sweeps += 1;
        let mut moved = false;
        for i in 0..dim {
            for sign in [1.0, -1.0] {
                trial.copy_from_slice(&y);
                trial[i] += sign * delta * y[i].abs().max(1.0);
                chart.retract(&mut trial);
                let ft = eval(&trial, buf);
                if ft > fy {
                    y.copy_from_slice(&trial);
                    fy = ft;
                    moved = true;
                }
            }
        }
        if moved {
            delta = (delta * 2.0).min(0.1);
        } else {
            delta *= 0.1;
        }
    }
    (y, fy)
}
