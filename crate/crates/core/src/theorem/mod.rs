//! Numerical checks that minimized ER-form objectives over exact
//! factorizations of a small tensor match its (rank-D) tensor nuclear norm.
//!
//! An instance is an `I × J × K` tensor (head × relation × tail) composed from
//! rank-`D` factors `P` (I×D), `R` (J×D), `Q` (K×D). Factorizations are
//! searched over the same shapes, with relation `j` acting as `diag(R_j)`.

mod solver;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{KgError, Result};
use crate::rng;

pub use solver::{augmented_lagrangian, bfgs, Solution, SolverOptions};

/// Relative reconstruction residual below which a factorization counts as exact.
pub const FEASIBILITY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// `X̂_ijk = x_i R_j x_kᵀ`.
    Bilinear,
    /// `X̂_ijk = ½(‖x_i R_j‖² + ‖x_k‖² - ‖x_i R_j - x_k‖²)`, the inner product
    /// recovered from squared distances.
    Distance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Thm1,
    Thm2,
    Thm3,
    Thm4,
    Amgm4,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Thm1, Variant::Thm2, Variant::Thm3, Variant::Thm4, Variant::Amgm4];

    pub fn norm_order(self) -> u8 {
        match self {
            Variant::Thm3 | Variant::Thm4 => 3,
            _ => 2,
        }
    }

    pub fn mechanism(self) -> Mechanism {
        match self {
            Variant::Thm2 | Variant::Thm4 => Mechanism::Distance,
            _ => Mechanism::Bilinear,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Thm1 => "thm1",
            Variant::Thm2 => "thm2",
            Variant::Thm3 => "thm3",
            Variant::Thm4 => "thm4",
            Variant::Amgm4 => "amgm4",
        }
    }

    /// Accepted band around ratio 1.
    pub fn tolerance(self) -> f64 {
        match self {
            Variant::Amgm4 => 0.05,
            _ => 0.10,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = KgError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| KgError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub rank: usize,
}

impl Shape {
    pub fn n_vars(&self) -> usize {
        (self.i + self.j + self.k) * self.rank
    }

    pub fn n_entries(&self) -> usize {
        self.i * self.j * self.k
    }

    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.j + j) * self.k + k
    }
}

/// Factor matrices stored row-major and packed as `[P | R | Q]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub shape: Shape,
    pub z: Vec<f64>,
}

impl Factors {
    pub fn new(shape: Shape, z: Vec<f64>) -> Result<Self> {
        if z.len() != shape.n_vars() {
            return Err(KgError::Shape {
                expected: shape.n_vars(),
                got: z.len(),
            });
        }
        Ok(Factors { shape, z })
    }

    pub fn p(&self, i: usize, d: usize) -> f64 {
        self.z[i * self.shape.rank + d]
    }

    pub fn r(&self, j: usize, d: usize) -> f64 {
        self.z[(self.shape.i + j) * self.shape.rank + d]
    }

    pub fn q(&self, k: usize, d: usize) -> f64 {
        self.z[(self.shape.i + self.shape.j + k) * self.shape.rank + d]
    }

    /// Column `d` of each factor: `(p_d, r_d, q_d)`.
    pub fn component(&self, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let s = self.shape;
        (
            (0..s.i).map(|i| self.p(i, d)).collect(),
            (0..s.j).map(|j| self.r(j, d)).collect(),
            (0..s.k).map(|k| self.q(k, d)).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremInstance {
    pub shape: Shape,
    pub norm_order: u8,
    pub mechanism: Mechanism,
    pub seed: u64,
    /// Row-major `[i][j][k]`.
    pub target: Vec<f64>,
    /// The factors the target was composed from.
    pub generator: Factors,
}

impl TheoremInstance {
    pub fn target_norm(&self) -> f64 {
        self.target.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.target[self.shape.idx(i, j, k)]
    }
}

/// Bilinear composition `Σ_d P_id R_jd Q_kd`.
pub fn compose(f: &Factors) -> Vec<f64> {
    let s = f.shape;
    let mut out = vec![0.0; s.n_entries()];
    for i in 0..s.i {
        for j in 0..s.j {
            for k in 0..s.k {
                out[s.idx(i, j, k)] = (0..s.rank).map(|d| f.p(i, d) * f.r(j, d) * f.q(k, d)).sum();
            }
        }
    }
    out
}

/// Composition through squared distances; equal to [`compose`] up to rounding.
pub fn compose_distance(f: &Factors) -> Vec<f64> {
    let s = f.shape;
    let mut out = vec![0.0; s.n_entries()];
    for i in 0..s.i {
        for j in 0..s.j {
            let a: Vec<f64> = (0..s.rank).map(|d| f.p(i, d) * f.r(j, d)).collect();
            for k in 0..s.k {
                let (mut na, mut nq, mut nd) = (0.0, 0.0, 0.0);
                for (d, av) in a.iter().enumerate() {
                    let q = f.q(k, d);
                    na += av * av;
                    nq += q * q;
                    nd += (av - q) * (av - q);
                }
                out[s.idx(i, j, k)] = 0.5 * (na + nq - nd);
            }
        }
    }
    out
}

pub fn instance_from_factors(factors: Factors, norm_order: u8, mechanism: Mechanism, seed: u64) -> Result<TheoremInstance> {
    if !matches!(norm_order, 2 | 3) {
        return Err(KgError::Config(format!("norm order must be 2 or 3, got {norm_order}")));
    }
    let target = match mechanism {
        Mechanism::Bilinear => compose(&factors),
        Mechanism::Distance => compose_distance(&factors),
    };
    Ok(TheoremInstance {
        shape: factors.shape,
        norm_order,
        mechanism,
        seed,
        target,
        generator: factors,
    })
}

/// Random instance with factor entries uniform in `[-1, 1)`.
pub fn make_instance(i: usize, j: usize, k: usize, rank: usize, norm_order: u8, mechanism: Mechanism, seed: u64) -> Result<TheoremInstance> {
    if i == 0 || j == 0 || k == 0 || rank == 0 {
        return Err(KgError::Config("instance dimensions must be >= 1".into()));
    }
    let shape = Shape { i, j, k, rank };
    let mut rng = rng::seeded(seed);
    let z = (0..shape.n_vars()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    instance_from_factors(Factors::new(shape, z)?, norm_order, mechanism, seed)
}

// ---------------------------------------------------------------------------
// objectives

fn pow_t(x: f64, t: u8) -> f64 {
    if t == 2 {
        x * x
    } else {
        x.abs().powi(3)
    }
}

fn dpow_t(x: f64, t: u8) -> f64 {
    if t == 2 {
        2.0 * x
    } else {
        3.0 * x.abs() * x
    }
}

/// `‖x‖_t` and its gradient (zero at the origin).
fn norm_t(x: &[f64], t: u8) -> (f64, Vec<f64>) {
    let s: f64 = x.iter().map(|&v| pow_t(v, t)).sum();
    if s == 0.0 {
        return (0.0, vec![0.0; x.len()]);
    }
    if t == 2 {
        let n = s.sqrt();
        (n, x.iter().map(|v| v / n).collect())
    } else {
        let n = s.cbrt();
        (n, x.iter().map(|v| v.abs() * v / (n * n)).collect())
    }
}

/// `Σ_d ‖p_d‖_t ‖r_d‖_t ‖q_d‖_t` with gradient over the packed factors.
pub fn nuclear_objective(f: &Factors, t: u8) -> (f64, Vec<f64>) {
    let s = f.shape;
    let mut g = vec![0.0; s.n_vars()];
    let mut total = 0.0;
    for d in 0..s.rank {
        let (p, r, q) = f.component(d);
        let (np, gp) = norm_t(&p, t);
        let (nr, gr) = norm_t(&r, t);
        let (nq, gq) = norm_t(&q, t);
        total += np * nr * nq;
        for i in 0..s.i {
            g[i * s.rank + d] += gp[i] * nr * nq;
        }
        for j in 0..s.j {
            g[(s.i + j) * s.rank + d] += np * gr[j] * nq;
        }
        for k in 0..s.k {
            g[(s.i + s.j + k) * s.rank + d] += np * nr * gq[k];
        }
    }
    (total, g)
}

/// The ER-form objective of `variant` with gradient over the packed factors.
pub fn variant_objective(f: &Factors, variant: Variant) -> (f64, Vec<f64>) {
    let s = f.shape;
    let sqrt_j = (s.j as f64).sqrt();
    let t = variant.norm_order();
    let mut g = vec![0.0; s.n_vars()];
    let pi = |i: usize, d: usize| i * s.rank + d;
    let ri = |j: usize, d: usize| (s.i + j) * s.rank + d;
    let qi = |k: usize, d: usize| (s.i + s.j + k) * s.rank + d;

    if variant == Variant::Amgm4 {
        let c = 1.0 / (2.0 * sqrt_j);
        let mut total = 0.0;
        for j in 0..s.j {
            for d in 0..s.rank {
                let r = f.r(j, d);
                for i in 0..s.i {
                    let p = f.p(i, d);
                    total += p * p * r * r;
                    g[pi(i, d)] += c * 2.0 * p * r * r;
                    g[ri(j, d)] += c * 2.0 * p * p * r;
                }
                for k in 0..s.k {
                    let q = f.q(k, d);
                    total += q * q;
                    g[qi(k, d)] += c * 2.0 * q;
                }
            }
        }
        return (c * total, g);
    }

    let (sign, c) = match variant {
        Variant::Thm1 | Variant::Thm3 => (-1.0, 1.0 / sqrt_j),
        Variant::Thm2 => (1.0, 1.0 / (2.0 * sqrt_j)),
        _ => (1.0, 1.0 / (4.0 * sqrt_j)),
    };
    let mut total = 0.0;
    for i in 0..s.i {
        for j in 0..s.j {
            for k in 0..s.k {
                for d in 0..s.rank {
                    let (p, r, q) = (f.p(i, d), f.r(j, d), f.q(k, d));
                    let u = p + sign * q;
                    let v = u * r;
                    total += pow_t(p, t) + pow_t(q, t) + pow_t(v, t);
                    let dv = dpow_t(v, t);
                    g[pi(i, d)] += c * (dpow_t(p, t) + dv * r);
                    g[qi(k, d)] += c * (dpow_t(q, t) + sign * dv * r);
                    g[ri(j, d)] += c * dv * u;
                }
            }
        }
    }
    (c * total, g)
}

/// Reconstruction residual `compose(z) - target` and its Jacobian.
fn reconstruction(shape: Shape, target: &[f64], z: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let f = Factors { shape, z: z.to_vec() };
    let mut c = compose(&f);
    for (ci, ti) in c.iter_mut().zip(target) {
        *ci -= ti;
    }
    let s = shape;
    let mut jac = DMatrix::zeros(s.n_entries(), s.n_vars());
    for i in 0..s.i {
        for j in 0..s.j {
            for k in 0..s.k {
                let row = s.idx(i, j, k);
                for d in 0..s.rank {
                    let (p, r, q) = (f.p(i, d), f.r(j, d), f.q(k, d));
                    jac[(row, i * s.rank + d)] += r * q;
                    jac[(row, (s.i + j) * s.rank + d)] += p * q;
                    jac[(row, (s.i + s.j + k) * s.rank + d)] += p * r;
                }
            }
        }
    }
    (c, jac)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub factors: Factors,
    pub residual: f64,
    pub restarts: usize,
    pub feasible_restarts: usize,
}

/// Best feasible minimum of `objective` over exact rank-D factorizations of
/// the target, across `restarts` seeded starting points.
pub fn minimize_over_factorizations(
    instance: &TheoremInstance,
    objective: &dyn Fn(&Factors) -> (f64, Vec<f64>),
    restarts: usize,
    seed: u64,
) -> Result<Estimate> {
    if restarts == 0 {
        return Err(KgError::Config("restarts must be >= 1".into()));
    }
    let shape = instance.shape;
    let scale = instance.target_norm();
    if scale == 0.0 {
        return Ok(Estimate {
            value: 0.0,
            factors: Factors {
                shape,
                z: vec![0.0; shape.n_vars()],
            },
            residual: 0.0,
            restarts: 0,
            feasible_restarts: 0,
        });
    }
    let f = |z: &[f64]| objective(&Factors { shape, z: z.to_vec() });
    let c = |z: &[f64]| reconstruction(shape, &instance.target, z);
    let opts = SolverOptions::default();
    let mut best: Option<Solution> = None;
    let mut best_residual = f64::INFINITY;
    let mut feasible = 0;
    for restart in 0..restarts {
        let mut rng = rng::seeded(rng::derive(seed, &[restart as u64]));
        let z0 = (0..shape.n_vars()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sol = augmented_lagrangian(&f, &c, z0, scale, &opts);
        best_residual = best_residual.min(sol.residual);
        if sol.residual < FEASIBILITY_TOL && sol.value.is_finite() {
            feasible += 1;
            if best.as_ref().map_or(true, |b| sol.value < b.value) {
                best = Some(sol);
            }
        }
    }
    let sol = best.ok_or_else(|| {
        KgError::Infeasible(format!(
            "no restart of {restarts} reached relative residual {FEASIBILITY_TOL:e}; best {best_residual:e}"
        ))
    })?;
    Ok(Estimate {
        value: sol.value,
        factors: Factors { shape, z: sol.z },
        residual: sol.residual,
        restarts,
        feasible_restarts: feasible,
    })
}

/// Rank-D tensor nuclear `t`-norm estimate.
pub fn nuclear_estimate(instance: &TheoremInstance, restarts: usize) -> Result<Estimate> {
    let t = instance.norm_order;
    minimize_over_factorizations(instance, &|f| nuclear_objective(f, t), restarts, rng::derive(instance.seed, &[101]))
}

pub fn check_variant(instance: &TheoremInstance, variant: Variant) -> Result<()> {
    if variant.mechanism() != instance.mechanism {
        return Err(KgError::Config(format!(
            "{} requires the {:?} mechanism, instance is {:?}",
            variant.name(),
            variant.mechanism(),
            instance.mechanism
        )));
    }
    if variant.norm_order() != instance.norm_order {
        return Err(KgError::Config(format!(
            "{} uses norm order {}, instance has {}",
            variant.name(),
            variant.norm_order(),
            instance.norm_order
        )));
    }
    Ok(())
}

pub fn er_objective_min(instance: &TheoremInstance, variant: Variant, restarts: usize) -> Result<Estimate> {
    check_variant(instance, variant)?;
    minimize_over_factorizations(
        instance,
        &|f| variant_objective(f, variant),
        restarts,
        rng::derive(instance.seed, &[202, variant as u64]),
    )
}

/// `max_d |‖p_d‖_C ‖r_d‖_C / (√J ‖q_d‖_C) - 1|` over non-negligible components.
/// `‖x‖_C` is the 2-norm for `t = 2` and `(Σ|x_i|³)^{1/2}` for `t = 3`.
pub fn balancedness_residual(f: &Factors, t: u8) -> f64 {
    let cnorm = |x: &[f64]| -> f64 {
        if t == 2 {
            x.iter().map(|v| v * v).sum::<f64>().sqrt()
        } else {
            x.iter().map(|v| v.abs().powi(3)).sum::<f64>().sqrt()
        }
    };
    let sqrt_j = (f.shape.j as f64).sqrt();
    let comps: Vec<(f64, f64)> = (0..f.shape.rank)
        .map(|d| {
            let (p, r, q) = f.component(d);
            (cnorm(&p) * cnorm(&r), sqrt_j * cnorm(&q))
        })
        .collect();
    let biggest = comps.iter().map(|(a, b)| a.max(*b)).fold(0.0, f64::max);
    comps
        .iter()
        .filter(|(a, b)| a.max(*b) > 1e-6 * biggest)
        .map(|(a, b)| if *b == 0.0 { f64::INFINITY } else { (a / b - 1.0).abs() })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheckReport {
    pub variant: Variant,
    pub mechanism: Mechanism,
    pub shape: Shape,
    pub norm_order: u8,
    pub seed: u64,
    pub lhs_value: f64,
    pub nuclear_estimate: f64,
    pub ratio: f64,
    pub equality_residual: f64,
    pub restarts: usize,
    pub feasible_restarts: usize,
    pub reconstruction_residual: f64,
    pub tolerance: f64,
    /// Ratio lies outside `1 ± tolerance`.
    pub flagged: bool,
}

impl TheoremCheckReport {
    /// The gate used for the exact-equality variant: ratio within tolerance
    /// and a balanced minimizer.
    pub fn passes_equality_gate(&self) -> bool {
        !self.flagged && self.equality_residual < 0.05
    }
}

pub fn check_theorem(instance: &TheoremInstance, variant: Variant, restarts: usize) -> Result<TheoremCheckReport> {
    check_variant(instance, variant)?;
    let lhs = er_objective_min(instance, variant, restarts)?;
    let nuc = nuclear_estimate(instance, restarts)?;
    let ratio = if nuc.value == 0.0 {
        if lhs.value == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        lhs.value / nuc.value
    };
    let tolerance = variant.tolerance();
    let equality_residual = if instance.target_norm() == 0.0 {
        0.0
    } else {
        balancedness_residual(&lhs.factors, variant.norm_order())
    };
    Ok(TheoremCheckReport {
        variant,
        mechanism: instance.mechanism,
        shape: instance.shape,
        norm_order: instance.norm_order,
        seed: instance.seed,
        lhs_value: lhs.value,
        nuclear_estimate: nuc.value,
        ratio,
        equality_residual,
        restarts,
        feasible_restarts: lhs.feasible_restarts.min(nuc.feasible_restarts),
        reconstruction_residual: lhs.residual.max(nuc.residual),
        tolerance,
        flagged: !((1.0 - tolerance)..=(1.0 + tolerance)).contains(&ratio),
    })
}
