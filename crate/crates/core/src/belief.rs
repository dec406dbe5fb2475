//! Dirac-mixture beliefs over network weights and their moment features.
//!
//! A belief holds `G` independent groups. Each group is a mixture of `K`
//! point masses in `D` dimensions: locations `h[g][i][d]` and logits whose
//! softmax gives the mixture weights `α[g][i]`. The network weight vector is
//! the per-coordinate moment tensor `E[(Θ_d^(g))^j]` for `j = 1..=M`,
//! flattened group-major, then coordinate, then moment order.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Locations are projected onto `[-LOCATION_BOUND, LOCATION_BOUND]` after every step.
pub const LOCATION_BOUND: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeliefShape {
    /// Number of independent groups `G`.
    pub groups: usize,
    /// Point masses per group `K`.
    pub deltas: usize,
    /// Coordinates per group `D`.
    pub dim: usize,
    /// Highest moment order `M`.
    pub order: usize,
}

impl BeliefShape {
    pub fn new(groups: usize, deltas: usize, dim: usize, order: usize) -> Result<Self> {
        if groups == 0 || deltas == 0 || dim == 0 || order == 0 {
            return Err(Error::invalid(format!(
                "belief shape needs G, K, D, M >= 1, got ({groups}, {deltas}, {dim}, {order})"
            )));
        }
        Ok(Self {
            groups,
            deltas,
            dim,
            order,
        })
    }

    /// Smallest shape with coordinates of size `dim` whose features cover `n_weights`.
    pub fn covering(n_weights: usize, deltas: usize, dim: usize, order: usize) -> Result<Self> {
        if dim == 0 || order == 0 {
            return Err(Error::invalid("D and M must be at least 1"));
        }
        let per_group = dim * order;
        Self::new(n_weights.div_ceil(per_group).max(1), deltas, dim, order)
    }

    pub fn n_features(&self) -> usize {
        self.groups * self.dim * self.order
    }

    pub fn n_locations(&self) -> usize {
        self.groups * self.deltas * self.dim
    }

    pub fn n_logits(&self) -> usize {
        self.groups * self.deltas
    }

    /// Flat index of feature `(group, coord, order)` with `order` in `1..=M`.
    pub fn feature_index(&self, group: usize, coord: usize, order: usize) -> usize {
        (group * self.dim + coord) * self.order + (order - 1)
    }

    pub fn location_index(&self, group: usize, delta: usize, coord: usize) -> usize {
        (group * self.deltas + delta) * self.dim + coord
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    shape: BeliefShape,
    locations: Vec<f64>,
    logits: Vec<f64>,
}

/// Gradient of a scalar with respect to every belief parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefGradient {
    pub locations: Vec<f64>,
    pub logits: Vec<f64>,
}

impl BeliefGradient {
    pub fn zeros(shape: &BeliefShape) -> Self {
        Self {
            locations: vec![0.0; shape.n_locations()],
            logits: vec![0.0; shape.n_logits()],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.locations.iter().chain(&self.logits)
    }

    pub fn add_scaled(&mut self, other: &BeliefGradient, scale: f64) {
        for (a, b) in self.locations.iter_mut().zip(&other.locations) {
            *a += scale * b;
        }
        for (a, b) in self.logits.iter_mut().zip(&other.logits) {
            *a += scale * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

impl Belief {
    pub fn new(shape: BeliefShape, locations: Vec<f64>, logits: Vec<f64>) -> Result<Self> {
        if locations.len() != shape.n_locations() {
            return Err(Error::DimensionMismatch {
                what: "belief locations",
                expected: shape.n_locations(),
                actual: locations.len(),
            });
        }
        if logits.len() != shape.n_logits() {
            return Err(Error::DimensionMismatch {
                what: "belief logits",
                expected: shape.n_logits(),
                actual: logits.len(),
            });
        }
        if locations.iter().chain(&logits).any(|x| !x.is_finite()) {
            return Err(Error::invalid("belief parameters must be finite"));
        }
        Ok(Self {
            shape,
            locations,
            logits,
        })
    }

    /// Random belief: every location of coordinate `c` (in `0..G*D`, group-major)
    /// drawn from `N(0, coord_scales[c]²)`; logits start at zero.
    pub fn initialize<R: Rng + ?Sized>(
        shape: BeliefShape,
        coord_scales: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        let n_coords = shape.groups * shape.dim;
        if coord_scales.len() != n_coords {
            return Err(Error::DimensionMismatch {
                what: "initialization scales",
                expected: n_coords,
                actual: coord_scales.len(),
            });
        }
        let mut locations = vec![0.0; shape.n_locations()];
        for g in 0..shape.groups {
            for i in 0..shape.deltas {
                for d in 0..shape.dim {
                    let z: f64 = StandardNormal.sample(rng);
                    let scale = coord_scales[g * shape.dim + d];
                    locations[shape.location_index(g, i, d)] =
                        (z * scale).clamp(-LOCATION_BOUND, LOCATION_BOUND);
                }
            }
        }
        Self::new(shape, locations, vec![0.0; shape.n_logits()])
    }

    pub fn shape(&self) -> &BeliefShape {
        &self.shape
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn location(&self, group: usize, delta: usize, coord: usize) -> f64 {
        self.locations[self.shape.location_index(group, delta, coord)]
    }

    /// Mixture weights of one group.
    pub fn alphas(&self, group: usize) -> Vec<f64> {
        let k = self.shape.deltas;
        softmax(&self.logits[group * k..(group + 1) * k])
    }

    /// `Σ_i α_i exp(v·h_i)` for one group.
    pub fn mgf(&self, group: usize, v: &[f64]) -> Result<f64> {
        self.check_group(group)?;
        if v.len() != self.shape.dim {
            return Err(Error::DimensionMismatch {
                what: "mgf argument",
                expected: self.shape.dim,
                actual: v.len(),
            });
        }
        // Normalizing once by the unnormalized weight sum keeps mgf(0) == 1 exactly.
        let k = self.shape.deltas;
        let logits = &self.logits[group * k..(group + 1) * k];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for (i, l) in logits.iter().enumerate() {
            let e = (l - max).exp();
            let dot: f64 = (0..self.shape.dim)
                .map(|d| v[d] * self.location(group, i, d))
                .sum();
            num += e * dot.exp();
            den += e;
        }
        Ok(num / den)
    }

    /// `E[(Θ_coord)^order]` within `group`, as a weighted power sum.
    pub fn moment(&self, group: usize, coord: usize, order: usize) -> Result<f64> {
        self.check_group(group)?;
        if coord >= self.shape.dim || order == 0 || order > self.shape.order {
            return Err(Error::invalid(format!(
                "moment index out of range: coord {coord}, order {order}"
            )));
        }
        let alphas = self.alphas(group);
        Ok(alphas
            .iter()
            .enumerate()
            .map(|(i, a)| a * self.location(group, i, coord).powi(order as i32))
            .sum())
    }

    pub fn features(&self) -> MgfFeatures {
        let s = self.shape;
        let mut data = vec![0.0; s.n_features()];
        for g in 0..s.groups {
            let alphas = self.alphas(g);
            for d in 0..s.dim {
                let base = s.feature_index(g, d, 1);
                for (i, a) in alphas.iter().enumerate() {
                    let h = self.location(g, i, d);
                    let mut power = 1.0;
                    for slot in &mut data[base..base + s.order] {
                        power *= h;
                        *slot += a * power;
                    }
                }
            }
        }
        MgfFeatures { shape: s, data }
    }

    /// Features of the point belief that keeps only delta `delta` in every group.
    pub fn restricted_features(&self, delta: usize) -> MgfFeatures {
        let s = self.shape;
        let mut data = vec![0.0; s.n_features()];
        for g in 0..s.groups {
            for d in 0..s.dim {
                let base = s.feature_index(g, d, 1);
                let h = self.location(g, delta, d);
                let mut power = 1.0;
                for slot in &mut data[base..base + s.order] {
                    power *= h;
                    *slot = power;
                }
            }
        }
        MgfFeatures { shape: s, data }
    }

    /// Trace of the parameter covariance, summed over groups.
    pub fn epistemic_variance(&self) -> f64 {
        let s = self.shape;
        let mut total = 0.0;
        for g in 0..s.groups {
            let alphas = self.alphas(g);
            for d in 0..s.dim {
                let (mut m1, mut m2) = (0.0, 0.0);
                for (i, a) in alphas.iter().enumerate() {
                    let h = self.location(g, i, d);
                    m1 += a * h;
                    m2 += a * h * h;
                }
                total += (m2 - m1 * m1).max(0.0);
            }
        }
        total
    }

    pub fn jacobian(&self) -> FeatureJacobian<'_> {
        FeatureJacobian {
            belief: self,
            alphas: (0..self.shape.groups).map(|g| self.alphas(g)).collect(),
            features: self.features(),
        }
    }

    /// `self - step * grad`, with locations projected back into the bound.
    pub fn stepped(&self, direction: &BeliefGradient, step: f64) -> Result<Belief> {
        if direction.locations.len() != self.locations.len()
            || direction.logits.len() != self.logits.len()
        {
            return Err(Error::DimensionMismatch {
                what: "belief gradient",
                expected: self.locations.len() + self.logits.len(),
                actual: direction.locations.len() + direction.logits.len(),
            });
        }
        let locations = self
            .locations
            .iter()
            .zip(&direction.locations)
            .map(|(h, g)| (h - step * g).clamp(-LOCATION_BOUND, LOCATION_BOUND))
            .collect();
        let logits = self
            .logits
            .iter()
            .zip(&direction.logits)
            .map(|(l, g)| l - step * g)
            .collect();
        Belief::new(self.shape, locations, logits)
    }

    /// One-line summary for diagnostics.
    pub fn summary(&self) -> String {
        let abs_max = |xs: &[f64]| xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        format!(
            "G={} K={} D={} M={} max|h|={:.4e} max|logit|={:.4e} epistemic_var={:.4e} finite={}",
            self.shape.groups,
            self.shape.deltas,
            self.shape.dim,
            self.shape.order,
            abs_max(&self.locations),
            abs_max(&self.logits),
            self.epistemic_variance(),
            self.locations
                .iter()
                .chain(&self.logits)
                .all(|x| x.is_finite()),
        )
    }

    fn check_group(&self, group: usize) -> Result<()> {
        if group >= self.shape.groups {
            return Err(Error::invalid(format!(
                "group {group} out of range (G = {})",
                self.shape.groups
            )));
        }
        Ok(())
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Moment tensor of shape `(G, D, M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MgfFeatures {
    shape: BeliefShape,
    data: Vec<f64>,
}

impl MgfFeatures {
    pub fn shape(&self) -> &BeliefShape {
        &self.shape
    }

    /// Entry `E[(Θ_coord^(group))^order]`, `order` in `1..=M`.
    pub fn get(&self, group: usize, coord: usize, order: usize) -> f64 {
        self.data[self.shape.feature_index(group, coord, order)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Matrix-free Jacobian of the moment features with respect to locations and logits.
#[derive(Debug, Clone)]
pub struct FeatureJacobian<'a> {
    belief: &'a Belief,
    alphas: Vec<Vec<f64>>,
    features: MgfFeatures,
}

impl FeatureJacobian<'_> {
    pub fn features(&self) -> &MgfFeatures {
        &self.features
    }

    /// `Jᵀ · grad_features`.
    pub fn transpose_apply(&self, grad_features: &[f64]) -> Result<BeliefGradient> {
        let s = *self.belief.shape();
        if grad_features.len() != s.n_features() {
            return Err(Error::DimensionMismatch {
                what: "feature gradient",
                expected: s.n_features(),
                actual: grad_features.len(),
            });
        }
        let mut out = BeliefGradient::zeros(&s);
        for g in 0..s.groups {
            let alphas = &self.alphas[g];
            for d in 0..s.dim {
                let base = s.feature_index(g, d, 1);
                let upstream = &grad_features[base..base + s.order];
                let moments = &self.features.data[base..base + s.order];
                for (i, a) in alphas.iter().enumerate() {
                    let h = self.belief.location(g, i, d);
                    // Σ_j G_j · j h^(j-1) and Σ_j G_j · (h^j - m_j).
                    let mut prev = 1.0;
                    let mut d_loc = 0.0;
                    let mut d_weight = 0.0;
                    for (j, (gj, mj)) in upstream.iter().zip(moments).enumerate() {
                        d_loc += gj * (j + 1) as f64 * prev;
                        prev *= h;
                        d_weight += gj * (prev - mj);
                    }
                    out.locations[s.location_index(g, i, d)] += a * d_loc;
                    out.logits[g * s.deltas + i] += a * d_weight;
                }
            }
        }
        Ok(out)
    }

    /// Dense Jacobian, rows = features, columns = locations followed by logits.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        let s = *self.belief.shape();
        let n = s.n_features();
        (0..n)
            .map(|row| {
                let mut unit = vec![0.0; n];
                unit[row] = 1.0;
                let col = self
                    .transpose_apply(&unit)
                    .expect("unit vector has feature length");
                col.locations.into_iter().chain(col.logits).collect()
            })
            .collect()
    }
}

/// `∇L(φ) = Jᵀ ∇L(m̃(φ))`.
pub fn chain_gradient(
    jacobian: &FeatureJacobian<'_>,
    grad_features: &[f64],
) -> Result<BeliefGradient> {
    jacobian.transpose_apply(grad_features)
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    groups: usize,
    deltas: usize,
    dim: usize,
    order: usize,
    /// `[group][delta][coord]`
    locations: Vec<Vec<Vec<f64>>>,
    /// `[group][delta]`
    logits: Vec<Vec<f64>>,
}

impl Belief {
    /// Self-describing JSON document; floats are written in shortest round-trip form.
    pub fn to_checkpoint(&self) -> String {
        let s = self.shape;
        let locations = (0..s.groups)
            .map(|g| {
                (0..s.deltas)
                    .map(|i| (0..s.dim).map(|d| self.location(g, i, d)).collect())
                    .collect()
            })
            .collect();
        let logits = self.logits.chunks(s.deltas).map(|c| c.to_vec()).collect();
        let doc = Checkpoint {
            groups: s.groups,
            deltas: s.deltas,
            dim: s.dim,
            order: s.order,
            locations,
            logits,
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serializes")
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let doc: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("belief checkpoint: {e}")))?;
        let shape = BeliefShape::new(doc.groups, doc.deltas, doc.dim, doc.order)?;
        let bad = |what: &str| Error::Format(format!("belief checkpoint: ragged {what}"));
        if doc.locations.len() != shape.groups || doc.logits.len() != shape.groups {
            return Err(bad("group arrays"));
        }
        let mut locations = Vec::with_capacity(shape.n_locations());
        for group in &doc.locations {
            if group.len() != shape.deltas {
                return Err(bad("locations"));
            }
            for delta in group {
                if delta.len() != shape.dim {
                    return Err(bad("locations"));
                }
                locations.extend_from_slice(delta);
            }
        }
        let mut logits = Vec::with_capacity(shape.n_logits());
        for group in &doc.logits {
            if group.len() != shape.deltas {
                return Err(bad("logits"));
            }
            logits.extend_from_slice(group);
        }
        Belief::new(shape, locations, logits)
    }
}
