//! Multivariate total-degree bases over independent germ components.
//!
//! Basis functions are tensor products `φ_α(ξ) = Π_i φ_{α_i}(ξ_i)` with
//! `‖α‖₁ ≤ d`, ordered graded-lexicographically: by total degree, then by
//! descending exponent of the first component, then the second, and so on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orthopoly::{gauss_rule, GermSampler, MeasureDescriptor, PolynomialFamily, QuadratureRule};

/// Largest basis we agree to enumerate.
pub const MAX_BASIS_SIZE: usize = 1 << 20;
/// Triple products at or below this magnitude are treated as zero.
pub const TRIPLE_SPARSITY: f64 = 1e-12;
/// Current version of the serialized basis artifact.
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    pub fn total_degree(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// `(n_germ + d)! / (n_germ! d!)`, or a size error on overflow.
pub fn basis_size(n_germ: usize, degree: usize) -> Result<usize> {
    let err = || Error::BasisSize { n_germ, degree };
    let k = n_germ.min(degree) as u128;
    let n = (n_germ + degree) as u128;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i).ok_or_else(err)? / (i + 1);
    }
    usize::try_from(acc).map_err(|_| err())
}

/// Tensorized quadrature over the germ.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRule {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub exact_degree: usize,
}

impl TensorRule {
    pub fn from_rules(rules: &[QuadratureRule]) -> TensorRule {
        let mut points = vec![vec![]];
        let mut weights = vec![1.0];
        for r in rules {
            let mut np = Vec::with_capacity(points.len() * r.len());
            let mut nw = Vec::with_capacity(points.len() * r.len());
            for (p, w) in points.iter().zip(&weights) {
                for (x, wx) in r.nodes.iter().zip(&r.weights) {
                    let mut q = p.clone();
                    q.push(*x);
                    np.push(q);
                    nw.push(w * wx);
                }
            }
            points = np;
            weights = nw;
        }
        let exact_degree = rules.iter().map(|r| r.exact_degree).min().unwrap_or(usize::MAX);
        TensorRule {
            points,
            weights,
            exact_degree,
        }
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| w * f(p)).sum()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalDegreeBasis {
    families: Vec<PolynomialFamily>,
    degree: usize,
    indices: Vec<MultiIndex>,
}

/// Builds the total-degree basis of degree `d` over the given families.
pub fn total_degree_basis(families: Vec<PolynomialFamily>, d: usize) -> Result<TotalDegreeBasis> {
    if families.is_empty() {
        return Err(Error::InvalidArgument("basis needs at least one germ dimension".into()));
    }
    let n = families.len();
    let size = basis_size(n, d)?;
    if size > MAX_BASIS_SIZE {
        return Err(Error::BasisSize { n_germ: n, degree: d });
    }
    let families = families
        .into_iter()
        .map(|f| if f.max_degree < d { f.with_depth(d) } else { Ok(f) })
        .collect::<Result<Vec<_>>>()?;

    let mut indices = Vec::with_capacity(size);
    let mut scratch = vec![0usize; n];
    for deg in 0..=d {
        compositions(deg, 0, &mut scratch, &mut indices);
    }
    debug_assert_eq!(indices.len(), size);
    Ok(TotalDegreeBasis {
        families,
        degree: d,
        indices,
    })
}

/// Appends all exponent vectors summing to `remaining` over positions
/// `pos..`, first component descending.
fn compositions(remaining: usize, pos: usize, scratch: &mut [usize], out: &mut Vec<MultiIndex>) {
    if pos + 1 == scratch.len() {
        scratch[pos] = remaining;
        out.push(MultiIndex(scratch.to_vec()));
        return;
    }
    for e in (0..=remaining).rev() {
        scratch[pos] = e;
        compositions(remaining - e, pos + 1, scratch, out);
    }
    scratch[pos] = 0;
}

impl TotalDegreeBasis {
    /// Convenience: closed-form families for each measure, then the basis.
    pub fn from_measures(measures: &[MeasureDescriptor], d: usize) -> Result<TotalDegreeBasis> {
        let fams = measures
            .iter()
            .map(|m| crate::orthopoly::build_family(m, d))
            .collect::<Result<Vec<_>>>()?;
        total_degree_basis(fams, d)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_germ(&self) -> usize {
        self.families.len()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn families(&self) -> &[PolynomialFamily] {
        &self.families
    }

    pub fn measures(&self) -> Vec<MeasureDescriptor> {
        self.families.iter().map(|f| f.measure.clone()).collect()
    }

    /// Position of a multi-index in the basis ordering.
    pub fn position(&self, index: &MultiIndex) -> Option<usize> {
        self.indices.iter().position(|i| i == index)
    }

    /// Position of `φ_1(ξ_dim)` (the first-order term of one component).
    pub fn linear_position(&self, dim: usize) -> Option<usize> {
        let mut e = vec![0; self.n_germ()];
        *e.get_mut(dim)? = 1;
        self.position(&MultiIndex(e))
    }

    /// Identifier used to check that two expansions share a basis.
    pub fn id(&self) -> String {
        let fams: Vec<String> = self.families.iter().map(|f| f.measure.family_label()).collect();
        format!("{}|d={}", fams.join("x"), self.degree)
    }

    /// Same germ families and same degree.
    pub fn compatible(&self, other: &TotalDegreeBasis) -> bool {
        std::ptr::eq(self, other)
            || (self.degree == other.degree
                && self.families.len() == other.families.len()
                && self
                    .families
                    .iter()
                    .zip(&other.families)
                    .all(|(a, b)| a.measure.family_label() == b.measure.family_label()))
    }

    fn check_dim(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.n_germ() {
            return Err(Error::DimensionMismatch {
                what: "germ point",
                expected: self.n_germ(),
                found: xi.len(),
            });
        }
        Ok(())
    }

    /// `Φ(ξ) = [φ_0(ξ), .., φ_L(ξ)]`.
    pub fn eval(&self, xi: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(xi)?;
        let tables: Vec<Vec<f64>> = self
            .families
            .iter()
            .zip(xi)
            .map(|(f, &x)| f.eval_all(self.degree, x))
            .collect();
        Ok(self
            .indices
            .iter()
            .map(|a| a.0.iter().zip(&tables).map(|(&e, t)| t[e]).product())
            .collect())
    }

    /// One-dimensional Gauss rules with `n_nodes` per germ dimension.
    pub fn rules_1d(&self, n_nodes: usize) -> Result<Vec<QuadratureRule>> {
        self.families
            .iter()
            .map(|f| {
                let fam = if f.max_degree + 1 < n_nodes {
                    f.with_depth(n_nodes - 1)?
                } else {
                    f.clone()
                };
                gauss_rule(&fam, n_nodes)
            })
            .collect()
    }

    /// Tensor rule exact for total degree `exact_degree` in every component.
    pub fn tensor_rule(&self, exact_degree: usize) -> Result<TensorRule> {
        let n_nodes = exact_degree / 2 + 1;
        Ok(TensorRule::from_rules(&self.rules_1d(n_nodes)?))
    }

    /// Exact expansion coefficients of the germ monomial `Π ξ_i^{s_i}`.
    pub fn monomial_to_basis(&self, monomial: &MultiIndex) -> Result<Vec<f64>> {
        if monomial.dim() != self.n_germ() {
            return Err(Error::DimensionMismatch {
                what: "monomial",
                expected: self.n_germ(),
                found: monomial.dim(),
            });
        }
        let deg = monomial.total_degree();
        if deg > self.degree {
            return Err(Error::ExactnessExceeded {
                degree: deg,
                cap: self.degree,
            });
        }
        let rule = self.tensor_rule(2 * self.degree)?;
        let mut coeffs = vec![0.0; self.len()];
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let mono: f64 = p.iter().zip(&monomial.0).map(|(x, &s)| x.powi(s as i32)).product();
            for (c, phi) in coeffs.iter_mut().zip(self.eval(p)?) {
                *c += w * mono * phi;
            }
        }
        Ok(coeffs)
    }

    /// Triple-product tensor `E[φ_i φ_j φ_l]`.
    ///
    /// Entries factor across independent germ components; each factor is a
    /// one-dimensional Gauss rule with `⌈(3d+1)/2⌉` nodes, exact for degree 3d.
    pub fn triple_products(&self) -> Result<TripleProductTensor> {
        let d = self.degree;
        let n_nodes = (3 * d + 1).div_ceil(2).max(1);
        let rules = self.rules_1d(n_nodes)?;
        let tables: Vec<Vec<f64>> = self
            .families
            .iter()
            .zip(&rules)
            .map(|(f, r)| {
                let fam = f.with_depth(d.max(f.max_degree))?;
                let vals: Vec<Vec<f64>> = r.nodes.iter().map(|&x| fam.eval_all(d, x)).collect();
                let mut t = vec![0.0; (d + 1).pow(3)];
                for a in 0..=d {
                    for b in 0..=d {
                        for c in 0..=d {
                            t[(a * (d + 1) + b) * (d + 1) + c] =
                                vals.iter().zip(&r.weights).map(|(v, w)| w * v[a] * v[b] * v[c]).sum();
                        }
                    }
                }
                Ok(t)
            })
            .collect::<Result<_>>()?;

        let size = self.len();
        let idx = |a: usize, b: usize, c: usize| (a * (d + 1) + b) * (d + 1) + c;
        let mut canonical = Vec::new();
        for i in 0..size {
            for j in i..size {
                for l in j..size {
                    let v: f64 = (0..self.n_germ())
                        .map(|k| tables[k][idx(self.indices[i].0[k], self.indices[j].0[k], self.indices[l].0[k])])
                        .product();
                    if v.abs() > TRIPLE_SPARSITY {
                        canonical.push((i, j, l, v));
                    }
                }
            }
        }
        Ok(TripleProductTensor::from_canonical(self.id(), size, canonical))
    }

    /// Draws a germ point with independent components.
    pub fn germ_samplers(&self) -> Result<Vec<GermSampler>> {
        self.families.iter().map(|f| f.measure.germ_sampler()).collect()
    }

    pub fn sample_germ<R: Rng + ?Sized>(samplers: &[GermSampler], rng: &mut R) -> Vec<f64> {
        samplers.iter().map(|s| s.sample(rng)).collect()
    }

    pub fn to_artifact(&self, tensor: Option<&TripleProductTensor>) -> Result<BasisArtifact> {
        if self.families.iter().any(|f| !f.measure.is_closed_form()) {
            return Err(Error::Serialization("custom-density bases cannot be serialized".into()));
        }
        Ok(BasisArtifact {
            version: ARTIFACT_VERSION,
            basis_id: self.id(),
            measures: self.measures(),
            degree: self.degree,
            indices: self.indices.clone(),
            triples: tensor.map(|t| t.canonical.clone()),
        })
    }
}

/// Sparse, fully symmetric `E[φ_i φ_j φ_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleProductTensor {
    basis_id: String,
    size: usize,
    /// Nonzeros with `i ≤ j ≤ l`.
    canonical: Vec<(usize, usize, usize, f64)>,
    /// For each output index `l`, every `(i, j, value)` with all orderings.
    slices: Vec<Vec<(usize, usize, f64)>>,
}

impl TripleProductTensor {
    fn from_canonical(basis_id: String, size: usize, canonical: Vec<(usize, usize, usize, f64)>) -> Self {
        let mut slices: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); size];
        for &(i, j, l, v) in &canonical {
            let mut perms = vec![(i, j, l), (i, l, j), (j, i, l), (j, l, i), (l, i, j), (l, j, i)];
            perms.sort_unstable();
            perms.dedup();
            for (a, b, c) in perms {
                slices[c].push((a, b, v));
            }
        }
        for s in slices.iter_mut() {
            s.sort_by_key(|&(a, b, _)| (a, b));
        }
        TripleProductTensor {
            basis_id,
            size,
            canonical,
            slices,
        }
    }

    pub fn basis_id(&self) -> &str {
        &self.basis_id
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn nnz_canonical(&self) -> usize {
        self.canonical.len()
    }

    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        let Some(slice) = self.slices.get(l) else {
            return 0.0;
        };
        slice
            .binary_search_by_key(&(i, j), |&(a, b, _)| (a, b))
            .map(|k| slice[k].2)
            .unwrap_or(0.0)
    }

    /// All `(i, j, T(i, j, l))` for a fixed `l`.
    pub fn slice(&self, l: usize) -> &[(usize, usize, f64)] {
        &self.slices[l]
    }

    pub fn canonical(&self) -> &[(usize, usize, usize, f64)] {
        &self.canonical
    }
}

/// Versioned JSON cache of a basis and (optionally) its tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisArtifact {
    pub version: u32,
    pub basis_id: String,
    pub measures: Vec<MeasureDescriptor>,
    pub degree: usize,
    pub indices: Vec<MultiIndex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triples: Option<Vec<(usize, usize, usize, f64)>>,
}

impl BasisArtifact {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<BasisArtifact> {
        Ok(serde_json::from_str(s)?)
    }

    /// Rebuilds the basis, verifying the stored index list, and restores the
    /// tensor if one was cached.
    pub fn restore(&self) -> Result<(TotalDegreeBasis, Option<TripleProductTensor>)> {
        if self.version != ARTIFACT_VERSION {
            return Err(Error::Serialization(format!(
                "basis artifact version {} (expected {ARTIFACT_VERSION})",
                self.version
            )));
        }
        let basis = TotalDegreeBasis::from_measures(&self.measures, self.degree)?;
        if basis.indices != self.indices || basis.id() != self.basis_id {
            return Err(Error::Serialization("cached index list does not match basis".into()));
        }
        let tensor = self
            .triples
            .clone()
            .map(|t| TripleProductTensor::from_canonical(basis.id(), basis.len(), t));
        Ok((basis, tensor))
    }
}
