//! Univariate orthonormal polynomial families matched to probability measures.
//!
//! Every family lives on a *standardized germ* ξ:
//!
//! | measure            | germ ξ                     | family     |
//! |--------------------|----------------------------|------------|
//! | `gaussian(μ, σ)`   | standard normal            | Hermite (probabilists') |
//! | `uniform(lo, hi)`  | uniform on [-1, 1]         | Legendre   |
//! | `gamma(k)`         | Gamma(k, 1) on [0, ∞)      | Laguerre, α = k − 1 |
//! | `beta(p, q)`       | 2·Beta(p, q) − 1 on [-1, 1]| Jacobi, α = q − 1, β = p − 1 |
//! | `custom`           | the density itself         | Stieltjes  |
//!
//! The physical parameter is recovered from the germ through the affine map
//! returned by [`MeasureDescriptor::germ_affine`].
//!
//! Polynomials are stored through the monic three-term recurrence
//! `p_{n+1}(x) = (x − a_n) p_n(x) − b_n p_{n−1}(x)` and normalized by
//! `h_n = sqrt(E[p_n²])`, so `φ_n = p_n / h_n` is orthonormal.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::error::{Error, Result};
use crate::linalg::symmetric_jacobi;

/// Points in the fixed composite rule used to discretize custom densities.
pub const DEFAULT_STIELTJES_POINTS: usize = 512;
/// Norms below this abort orthonormalization.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Allowed deviation of a custom density's integral from 1.
pub const DENSITY_NORMALIZATION_TOL: f64 = 1e-8;

const PANEL_POINTS: usize = 8;
const SAMPLER_GRID: usize = 4096;

pub type DensityFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A user-supplied probability density on a finite interval.
#[derive(Clone)]
pub struct CustomDensity {
    pub label: String,
    pub density: DensityFn,
    pub support: (f64, f64),
}

impl CustomDensity {
    pub fn new(
        label: impl Into<String>,
        support: (f64, f64),
        density: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            density: Arc::new(density),
            support,
        }
    }
}

impl fmt::Debug for CustomDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomDensity")
            .field("label", &self.label)
            .field("support", &self.support)
            .finish_non_exhaustive()
    }
}

impl PartialEq for CustomDensity {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label && self.support == other.support && Arc::ptr_eq(&self.density, &other.density)
    }
}

/// Probability measure of one uncertain parameter component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureDescriptor {
    Gaussian {
        mean: f64,
        stddev: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    Gamma {
        shape: f64,
    },
    Beta {
        p: f64,
        q: f64,
    },
    #[serde(skip)]
    Custom(CustomDensity),
}

impl MeasureDescriptor {
    pub fn custom(
        label: impl Into<String>,
        support: (f64, f64),
        density: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        MeasureDescriptor::Custom(CustomDensity::new(label, support, density))
    }

    /// Checks the parameter invariants. Custom densities are additionally
    /// checked for normalization when discretized.
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            MeasureDescriptor::Gaussian { mean, stddev } => mean.is_finite() && *stddev > 0.0,
            MeasureDescriptor::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            MeasureDescriptor::Gamma { shape } => shape.is_finite() && *shape > 0.0,
            MeasureDescriptor::Beta { p, q } => p.is_finite() && q.is_finite() && *p > 0.0 && *q > 0.0,
            MeasureDescriptor::Custom(c) => {
                c.support.0.is_finite() && c.support.1.is_finite() && c.support.0 < c.support.1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidMeasure(format!("{self:?}")))
        }
    }

    pub fn is_closed_form(&self) -> bool {
        !matches!(self, MeasureDescriptor::Custom(_))
    }

    /// Whether the germ distribution is symmetric about zero.
    pub fn is_symmetric(&self) -> bool {
        match self {
            MeasureDescriptor::Gaussian { .. } | MeasureDescriptor::Uniform { .. } => true,
            MeasureDescriptor::Beta { p, q } => p == q,
            _ => false,
        }
    }

    /// Name of the germ family; two measures with equal labels share a basis.
    pub fn family_label(&self) -> String {
        match self {
            MeasureDescriptor::Gaussian { .. } => "hermite".into(),
            MeasureDescriptor::Uniform { .. } => "legendre".into(),
            MeasureDescriptor::Gamma { shape } => format!("laguerre({shape})"),
            MeasureDescriptor::Beta { p, q } => format!("jacobi({p},{q})"),
            MeasureDescriptor::Custom(c) => format!("custom({})", c.label),
        }
    }

    /// `(offset, scale)` such that the physical parameter is `offset + scale·ξ`.
    pub fn germ_affine(&self) -> (f64, f64) {
        match self {
            MeasureDescriptor::Gaussian { mean, stddev } => (*mean, *stddev),
            MeasureDescriptor::Uniform { lo, hi } => ((lo + hi) / 2.0, (hi - lo) / 2.0),
            _ => (0.0, 1.0),
        }
    }

    /// Support of the germ.
    pub fn germ_support(&self) -> (f64, f64) {
        match self {
            MeasureDescriptor::Gaussian { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            MeasureDescriptor::Uniform { .. } | MeasureDescriptor::Beta { .. } => (-1.0, 1.0),
            MeasureDescriptor::Gamma { .. } => (0.0, f64::INFINITY),
            MeasureDescriptor::Custom(c) => c.support,
        }
    }

    /// Analytic raw moment `E[ξ^k]` of the germ (custom densities use the
    /// composite rule).
    pub fn germ_raw_moment(&self, k: usize) -> Result<f64> {
        Ok(match self {
            MeasureDescriptor::Gaussian { .. } => {
                if k % 2 == 1 {
                    0.0
                } else {
                    (1..k).step_by(2).map(|j| j as f64).product()
                }
            }
            MeasureDescriptor::Uniform { .. } => {
                if k % 2 == 1 {
                    0.0
                } else {
                    1.0 / (k as f64 + 1.0)
                }
            }
            MeasureDescriptor::Gamma { shape } => (0..k).map(|i| shape + i as f64).product(),
            MeasureDescriptor::Beta { p, q } => {
                // ξ = 2B − 1 with B ~ Beta(p, q)
                let beta_moment = |j: usize| -> f64 { (0..j).map(|i| (p + i as f64) / (p + q + i as f64)).product() };
                (0..=k)
                    .map(|j| {
                        let sign = if (k - j).is_multiple_of(2) { 1.0 } else { -1.0 };
                        binomial(k, j) * 2f64.powi(j as i32) * sign * beta_moment(j)
                    })
                    .sum()
            }
            MeasureDescriptor::Custom(c) => {
                let (nodes, weights) = discretize(c, DEFAULT_STIELTJES_POINTS)?;
                nodes.iter().zip(&weights).map(|(x, w)| w * x.powi(k as i32)).sum()
            }
        })
    }

    pub fn germ_sampler(&self) -> Result<GermSampler> {
        self.validate()?;
        Ok(match self {
            MeasureDescriptor::Gaussian { .. } => GermSampler::Normal,
            MeasureDescriptor::Uniform { .. } => GermSampler::Uniform,
            MeasureDescriptor::Gamma { shape } => GermSampler::Gamma {
                draw: rand_distr::Gamma::new(*shape, 1.0).map_err(|e| Error::InvalidMeasure(e.to_string()))?,
                cdf: statrs::distribution::Gamma::new(*shape, 1.0).map_err(|e| Error::InvalidMeasure(e.to_string()))?,
            },
            MeasureDescriptor::Beta { p, q } => GermSampler::Beta {
                draw: rand_distr::Beta::new(*p, *q).map_err(|e| Error::InvalidMeasure(e.to_string()))?,
                cdf: statrs::distribution::Beta::new(*p, *q).map_err(|e| Error::InvalidMeasure(e.to_string()))?,
            },
            MeasureDescriptor::Custom(c) => GermSampler::tabulated(c)?,
        })
    }
}

/// Draws germ samples and evaluates germ quantiles.
#[derive(Debug, Clone)]
pub enum GermSampler {
    Normal,
    Uniform,
    Gamma {
        draw: rand_distr::Gamma<f64>,
        cdf: statrs::distribution::Gamma,
    },
    Beta {
        draw: rand_distr::Beta<f64>,
        cdf: statrs::distribution::Beta,
    },
    Tabulated {
        grid: Vec<f64>,
        cdf: Vec<f64>,
    },
}

impl GermSampler {
    fn tabulated(c: &CustomDensity) -> Result<Self> {
        let (lo, hi) = c.support;
        let h = (hi - lo) / SAMPLER_GRID as f64;
        let grid: Vec<f64> = (0..=SAMPLER_GRID).map(|i| lo + h * i as f64).collect();
        let dens: Vec<f64> = grid.iter().map(|&x| (c.density)(x).max(0.0)).collect();
        let mut cdf = Vec::with_capacity(grid.len());
        let mut acc = 0.0;
        cdf.push(0.0);
        for w in dens.windows(2) {
            acc += 0.5 * h * (w[0] + w[1]);
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::NonNormalizedDensity { integral: acc });
        }
        for v in cdf.iter_mut() {
            *v /= acc;
        }
        Ok(GermSampler::Tabulated { grid, cdf })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            GermSampler::Normal => StandardNormal.sample(rng),
            GermSampler::Uniform => 2.0 * rng.random::<f64>() - 1.0,
            GermSampler::Gamma { draw, .. } => draw.sample(rng),
            GermSampler::Beta { draw, .. } => 2.0 * draw.sample(rng) - 1.0,
            GermSampler::Tabulated { .. } => self.quantile(rng.random::<f64>()),
        }
    }

    /// Inverse CDF of the germ at `u ∈ (0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            GermSampler::Normal => statrs::distribution::Normal::standard().inverse_cdf(u),
            GermSampler::Uniform => 2.0 * u - 1.0,
            GermSampler::Gamma { cdf, .. } => cdf.inverse_cdf(u),
            GermSampler::Beta { cdf, .. } => 2.0 * cdf.inverse_cdf(u) - 1.0,
            GermSampler::Tabulated { grid, cdf } => {
                let k = cdf.partition_point(|&c| c < u).clamp(1, cdf.len() - 1);
                let (c0, c1) = (cdf[k - 1], cdf[k]);
                let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
                grid[k - 1] + t * (grid[k] - grid[k - 1])
            }
        }
    }
}

/// Univariate orthonormal family given by monic recurrence coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialFamily {
    pub measure: MeasureDescriptor,
    pub max_degree: usize,
    /// Monic recurrence coefficients `a_0..a_max`.
    pub recur_a: Vec<f64>,
    /// Monic recurrence coefficients `b_0..b_max`, with `b_0 = 1`.
    pub recur_b: Vec<f64>,
    /// `h_n = sqrt(E[p_n²])`.
    pub norms: Vec<f64>,
    quad_points: usize,
}

/// Closed-form (Askey-scheme) family for Gaussian, uniform, gamma and beta
/// measures.
pub fn build_family(measure: &MeasureDescriptor, max_degree: usize) -> Result<PolynomialFamily> {
    measure.validate()?;
    let n = max_degree + 1;
    let (recur_a, recur_b): (Vec<f64>, Vec<f64>) = match measure {
        MeasureDescriptor::Gaussian { .. } => (0..n).map(|k| (0.0, b0_or(k, k as f64))).unzip(),
        MeasureDescriptor::Uniform { .. } => (0..n)
            .map(|k| {
                let k2 = (k * k) as f64;
                (0.0, b0_or(k, k2 / (4.0 * k2 - 1.0)))
            })
            .unzip(),
        MeasureDescriptor::Gamma { shape } => (0..n)
            .map(|k| {
                let kf = k as f64;
                (2.0 * kf + shape, b0_or(k, kf * (kf + shape - 1.0)))
            })
            .unzip(),
        MeasureDescriptor::Beta { p, q } => (0..n).map(|k| jacobi_recurrence(k, q - 1.0, p - 1.0)).unzip(),
        MeasureDescriptor::Custom(c) => return Err(Error::UnsupportedMeasure(c.label.clone())),
    };
    let norms = norms_from_b(&recur_b);
    Ok(PolynomialFamily {
        measure: measure.clone(),
        max_degree,
        recur_a,
        recur_b,
        norms,
        quad_points: DEFAULT_STIELTJES_POINTS,
    })
}

fn b0_or(k: usize, v: f64) -> f64 {
    if k == 0 {
        1.0
    } else {
        v
    }
}

/// Monic Jacobi recurrence on [-1, 1] for weight (1−x)^α (1+x)^β.
fn jacobi_recurrence(k: usize, alpha: f64, beta: f64) -> (f64, f64) {
    let s = alpha + beta;
    let kf = k as f64;
    let a = if k == 0 {
        (beta - alpha) / (s + 2.0)
    } else {
        (beta * beta - alpha * alpha) / ((2.0 * kf + s) * (2.0 * kf + s + 2.0))
    };
    let b = match k {
        0 => 1.0,
        1 => 4.0 * (1.0 + alpha) * (1.0 + beta) / ((2.0 + s).powi(2) * (3.0 + s)),
        _ => {
            let t = 2.0 * kf + s;
            4.0 * kf * (kf + alpha) * (kf + beta) * (kf + s) / (t * t * (t + 1.0) * (t - 1.0))
        }
    };
    (a, b)
}

fn norms_from_b(b: &[f64]) -> Vec<f64> {
    let mut acc = 1.0;
    b.iter()
        .enumerate()
        .map(|(k, bk)| {
            if k > 0 {
                acc *= bk;
            }
            acc.sqrt()
        })
        .collect()
}

/// Composite Gauss–Legendre discretization of a custom density:
/// `n_points / 8` panels of 8 nodes each. Weights include the density and
/// are returned unnormalized.
fn discretize(c: &CustomDensity, n_points: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let panels = n_points.div_ceil(PANEL_POINTS).max(1);
    let legendre = build_family(&MeasureDescriptor::Uniform { lo: -1.0, hi: 1.0 }, PANEL_POINTS)?;
    let base = gauss_rule(&legendre, PANEL_POINTS)?;
    let (lo, hi) = c.support;
    let h = (hi - lo) / panels as f64;
    let mut nodes = Vec::with_capacity(panels * PANEL_POINTS);
    let mut weights = Vec::with_capacity(panels * PANEL_POINTS);
    for p in 0..panels {
        let mid = lo + h * (p as f64 + 0.5);
        for (x, w) in base.nodes.iter().zip(&base.weights) {
            let node = mid + 0.5 * h * x;
            let dens = (c.density)(node);
            if !dens.is_finite() || dens < 0.0 {
                return Err(Error::InvalidMeasure(format!(
                    "density of `{}` is {dens} at {node}",
                    c.label
                )));
            }
            nodes.push(node);
            weights.push(h * w * dens);
        }
    }
    Ok((nodes, weights))
}

/// Family for an arbitrary density via the discretized Stieltjes procedure.
///
/// The density is discretized on a composite rule with `quad_points` nodes
/// (see [`DEFAULT_STIELTJES_POINTS`]).
pub fn stieltjes_family(
    measure: &MeasureDescriptor,
    max_degree: usize,
    quad_points: usize,
) -> Result<PolynomialFamily> {
    let c = match measure {
        MeasureDescriptor::Custom(c) => c,
        other => {
            return Err(Error::InvalidArgument(format!(
                "stieltjes_family expects a custom density, got {}; use build_family",
                other.family_label()
            )))
        }
    };
    measure.validate()?;
    if quad_points < PANEL_POINTS || quad_points <= max_degree {
        return Err(Error::InvalidArgument(format!(
            "{quad_points} quadrature points cannot resolve degree {max_degree}"
        )));
    }
    let (nodes, mut weights) = discretize(c, quad_points)?;
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > DENSITY_NORMALIZATION_TOL {
        return Err(Error::NonNormalizedDensity { integral: total });
    }
    for w in weights.iter_mut() {
        *w /= total;
    }

    let n = max_degree + 1;
    let mut recur_a = Vec::with_capacity(n);
    let mut recur_b = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    let mut p_prev = vec![0.0; nodes.len()];
    let mut p_cur = vec![1.0; nodes.len()];
    let mut norm2_prev = 1.0;
    for k in 0..n {
        let norm2: f64 = weights.iter().zip(&p_cur).map(|(w, p)| w * p * p).sum();
        let h = norm2.sqrt();
        if !(h >= DEGENERATE_NORM) {
            return Err(Error::DegenerateMeasure { degree: k, norm: h });
        }
        let a = weights
            .iter()
            .zip(&p_cur)
            .zip(&nodes)
            .map(|((w, p), x)| w * x * p * p)
            .sum::<f64>()
            / norm2;
        let b = if k == 0 { 1.0 } else { norm2 / norm2_prev };
        recur_a.push(a);
        recur_b.push(b);
        norms.push(h);
        let next: Vec<f64> = nodes
            .iter()
            .zip(p_cur.iter().zip(&p_prev))
            .map(|(x, (pc, pp))| (x - a) * pc - b * pp)
            .collect();
        p_prev = std::mem::replace(&mut p_cur, next);
        norm2_prev = norm2;
    }
    Ok(PolynomialFamily {
        measure: measure.clone(),
        max_degree,
        recur_a,
        recur_b,
        norms,
        quad_points,
    })
}

impl PolynomialFamily {
    /// The same family rebuilt with recurrence depth `max_degree`.
    pub fn with_depth(&self, max_degree: usize) -> Result<PolynomialFamily> {
        if max_degree == self.max_degree {
            return Ok(self.clone());
        }
        if self.measure.is_closed_form() {
            build_family(&self.measure, max_degree)
        } else {
            stieltjes_family(&self.measure, max_degree, self.quad_points.max(max_degree + 1))
        }
    }

    /// Orthonormal `φ_degree(x)`.
    pub fn eval(&self, degree: usize, x: f64) -> Result<f64> {
        if degree > self.max_degree {
            return Err(Error::DegreeOutOfRange {
                degree,
                max: self.max_degree,
            });
        }
        let (mut p_prev, mut p_cur) = (0.0, 1.0);
        for k in 0..degree {
            let next = (x - self.recur_a[k]) * p_cur - self.recur_b[k] * p_prev;
            p_prev = p_cur;
            p_cur = next;
        }
        Ok(p_cur / self.norms[degree])
    }

    /// `φ_0(x)..φ_up_to(x)`; `up_to` is clamped to `max_degree`.
    pub fn eval_all(&self, up_to: usize, x: f64) -> Vec<f64> {
        let up_to = up_to.min(self.max_degree);
        let mut out = Vec::with_capacity(up_to + 1);
        let (mut p_prev, mut p_cur) = (0.0, 1.0);
        for k in 0..=up_to {
            out.push(p_cur / self.norms[k]);
            if k < up_to {
                let next = (x - self.recur_a[k]) * p_cur - self.recur_b[k] * p_prev;
                p_prev = p_cur;
                p_cur = next;
            }
        }
        out
    }

    /// Power-basis coefficients `[c_0, .., c_degree]` of `φ_degree`.
    pub fn monomial_coefficients(&self, degree: usize) -> Result<Vec<f64>> {
        if degree > self.max_degree {
            return Err(Error::DegreeOutOfRange {
                degree,
                max: self.max_degree,
            });
        }
        let mut p_prev: Vec<f64> = vec![];
        let mut p_cur = vec![1.0];
        for k in 0..degree {
            let mut next = vec![0.0; k + 2];
            for (i, c) in p_cur.iter().enumerate() {
                next[i + 1] += c;
                next[i] -= self.recur_a[k] * c;
            }
            for (i, c) in p_prev.iter().enumerate() {
                next[i] -= self.recur_b[k] * c;
            }
            p_prev = std::mem::replace(&mut p_cur, next);
        }
        Ok(p_cur.iter().map(|c| c / self.norms[degree]).collect())
    }

    /// Monic `p_n(x)` and its derivative.
    fn monic_with_derivative(&self, n: usize, x: f64) -> (f64, f64) {
        let (mut p_prev, mut p_cur) = (0.0, 1.0);
        let (mut d_prev, mut d_cur) = (0.0, 0.0);
        for k in 0..n {
            let next = (x - self.recur_a[k]) * p_cur - self.recur_b[k] * p_prev;
            let dnext = p_cur + (x - self.recur_a[k]) * d_cur - self.recur_b[k] * d_prev;
            p_prev = p_cur;
            p_cur = next;
            d_prev = d_cur;
            d_cur = dnext;
        }
        (p_cur, d_cur)
    }
}

/// Convenience wrapper matching the free-function style of the module.
pub fn eval_poly(family: &PolynomialFamily, degree: usize, point: f64) -> Result<f64> {
    family.eval(degree, point)
}

/// Gauss rule for a probability measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub exact_degree: usize,
}

impl QuadratureRule {
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, w)| w * f(x)).sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// `n_nodes`-point Gauss rule via the symmetric Jacobi matrix of the
/// recurrence (Golub–Welsch). Nodes are polished by Newton on `p_n` and
/// weights come from the Christoffel function `1 / Σ_k φ_k(x)²`.
pub fn gauss_rule(family: &PolynomialFamily, n_nodes: usize) -> Result<QuadratureRule> {
    if n_nodes == 0 || n_nodes > family.max_degree + 1 {
        return Err(Error::InvalidArgument(format!(
            "{n_nodes} nodes requested, family supports 1..={}",
            family.max_degree + 1
        )));
    }
    let n = n_nodes;
    let mut jac = vec![vec![0.0; n]; n];
    for i in 0..n {
        jac[i][i] = family.recur_a[i];
        if i + 1 < n {
            let off = family.recur_b[i + 1].sqrt();
            jac[i][i + 1] = off;
            jac[i + 1][i] = off;
        }
    }
    let (mut nodes, _) = symmetric_jacobi(jac)?;
    nodes.sort_by(|a, b| a.total_cmp(b));

    // Newton polish; only accept steps that reduce |p_n|.
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (p, dp) = family.monic_with_derivative(n, *x);
            if dp == 0.0 || p == 0.0 {
                break;
            }
            let cand = *x - p / dp;
            let (pc, _) = family.monic_with_derivative(n, cand);
            if pc.abs() < p.abs() {
                *x = cand;
            } else {
                break;
            }
        }
    }

    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| 1.0 / family.eval_all(n - 1, x).iter().map(|v| v * v).sum::<f64>())
        .collect();
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::Numerical("Gauss weights are not finite".into()));
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        exact_degree: 2 * n - 1,
    })
}

/// Quadrature approximation of `E[f(ξ) g(ξ)]` under the family's measure.
pub fn inner_product(
    _family: &PolynomialFamily,
    f: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
    rule: &QuadratureRule,
) -> f64 {
    rule.integrate(|x| f(x) * g(x))
}

pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
