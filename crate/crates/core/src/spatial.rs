// SPDX-License-Identifier: Apache-2.0

//! Neighbourhood systems, spatially structured sparsity masks, pooled
//! designs and lag-length grids.
//!
//! Locations are indexed `0..S`. Ring `i = 0` of a location is the location
//! itself; rings `1..=n` are disjoint, symmetric sets of other locations,
//! ordered from closest to furthest.

use crate::bvar::DesignLayout;
use crate::error::{Error, Result};

/// Per-location rings `N_1(s), .., N_n(s)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighbourhoodSystem {
    rings: Vec<Vec<Vec<usize>>>,
    num_rings: usize,
}

impl NeighbourhoodSystem {
    /// `S` locations without any neighbours.
    pub fn isolated(locations: usize) -> Self {
        Self {
            rings: vec![Vec::new(); locations],
            num_rings: 0,
        }
    }

    /// Builds concentric rings from Euclidean distances between points.
    pub fn from_points(points: &[Vec<f64>], radii: &[f64]) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid("all points must have the same dimension"));
        }
        let n = points.len();
        let mut dist = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let d = points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                dist[i][j] = d;
                dist[j][i] = d;
            }
        }
        Self::from_distance_matrix(&dist, radii)
    }

    /// Builds rings from a precomputed distance matrix (e.g. road distances).
    ///
    /// `N_i(s) = { s' != s : radii[i-2] < d(s, s') <= radii[i-1] }` with an
    /// implicit inner radius of zero, so a distance equal to a radius lands in
    /// the inner ring.
    pub fn from_distance_matrix(dist: &[Vec<f64>], radii: &[f64]) -> Result<Self> {
        validate_radii(radii)?;
        let n = dist.len();
        for (i, row) in dist.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "distance matrix row",
                    expected: n,
                    actual: row.len(),
                });
            }
            if row[i] != 0.0 {
                return Err(Error::invalid(format!(
                    "distance matrix diagonal must be zero (entry {i} is {})",
                    row[i]
                )));
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (dist[i][j], dist[j][i]);
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::invalid(format!(
                        "distance ({i}, {j}) must be finite and non-negative, got {a}"
                    )));
                }
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::invalid(format!(
                        "distance matrix is not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        let mut rings = vec![vec![Vec::new(); radii.len()]; n];
        for (s, ring_set) in rings.iter_mut().enumerate() {
            for (other, &d) in dist[s].iter().enumerate() {
                if other == s || d <= 0.0 {
                    continue;
                }
                if let Some(i) = radii.iter().position(|&r| d <= r) {
                    ring_set[i].push(other);
                }
            }
        }
        Ok(Self {
            rings,
            num_rings: radii.len(),
        })
    }

    /// Takes rings as given (`rings[s][i - 1] = N_i(s)`) and checks the
    /// definition: disjoint, symmetric, never containing `s` itself.
    pub fn from_rings(mut rings: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        let n = rings.len();
        let num_rings = rings.iter().map(Vec::len).max().unwrap_or(0);
        for ring_set in rings.iter_mut() {
            ring_set.resize(num_rings, Vec::new());
            for ring in ring_set.iter_mut() {
                ring.sort_unstable();
                ring.dedup();
            }
        }
        let system = Self { rings, num_rings };
        for s in 0..n {
            let mut seen = vec![false; n];
            seen[s] = true;
            for i in 1..=num_rings {
                for &other in system.ring(s, i) {
                    if other >= n {
                        return Err(Error::invalid(format!("location {other} out of range")));
                    }
                    if seen[other] {
                        return Err(Error::invalid(format!(
                            "rings of location {s} are not disjoint (location {other})"
                        )));
                    }
                    seen[other] = true;
                    if !system.ring(other, i).contains(&s) {
                        return Err(Error::invalid(format!(
                            "ring {i} is not symmetric between {s} and {other}"
                        )));
                    }
                }
            }
        }
        Ok(system)
    }

    pub fn locations(&self) -> usize {
        self.rings.len()
    }

    /// Number of rings `n` beyond the implicit ring 0.
    pub fn num_rings(&self) -> usize {
        self.num_rings
    }

    /// `N_i(s)` for `i >= 1`, sorted ascending.
    pub fn ring(&self, s: usize, i: usize) -> &[usize] {
        assert!(i >= 1 && i <= self.num_rings, "ring index {i} out of range");
        &self.rings[s][i - 1]
    }

    /// Members of ring `i` including the implicit `N_0(s) = {s}`.
    pub fn members(&self, s: usize, i: usize) -> Vec<usize> {
        if i == 0 {
            vec![s]
        } else {
            self.ring(s, i).to_vec()
        }
    }

    /// Checks disjointness and symmetry of every ring.
    pub fn satisfies_definition(&self) -> bool {
        Self::from_rings(self.rings.clone()).is_ok()
    }
}

fn validate_radii(radii: &[f64]) -> Result<()> {
    if radii.is_empty() {
        return Err(Error::invalid("at least one radius is required"));
    }
    let mut prev = 0.0;
    for &r in radii {
        if !r.is_finite() || r <= prev {
            return Err(Error::invalid(format!(
                "radii must be positive and strictly increasing, got {radii:?}"
            )));
        }
        prev = r;
    }
    Ok(())
}

/// Coordinates of a `rows × cols` unit grid, numbered row-major.
pub fn grid_points(rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| vec![r as f64, c as f64]))
        .collect()
}

/// Decay of spatial dependence: `Π(l)` is the outermost ring that still
/// affects a location after `l` periods.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecaySpec {
    pi: Vec<usize>,
}

impl DecaySpec {
    /// `pi[l - 1] = Π(l)`.
    pub fn new(pi: Vec<usize>) -> Self {
        Self { pi }
    }

    /// `Π ≡ value` on `1..=lags`.
    pub fn constant(lags: usize, value: usize) -> Self {
        Self {
            pi: vec![value; lags],
        }
    }

    /// Decreases linearly from `n` at lag 1 towards zero at lag `lags + 1`.
    pub fn linear(lags: usize, n: usize) -> Self {
        let pi = (1..=lags)
            .map(|l| ((n * (lags + 1 - l)) as f64 / lags as f64).ceil() as usize)
            .map(|v| v.min(n))
            .collect();
        Self { pi }
    }

    pub fn pi(&self, lag: usize) -> usize {
        self.pi[lag - 1]
    }

    pub fn lags(&self) -> usize {
        self.pi.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.pi
    }
}

/// How coefficients within a ring are tied together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Pooling {
    /// One coefficient per allowed `(s, s')` pair.
    #[default]
    None,
    /// One coefficient per `(s, lag, ring)`.
    PerLocationRing,
    /// One coefficient per `(lag, ring)`, shared by all locations.
    GlobalRing,
}

/// Label of one free lag coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupLabel {
    Pair {
        lag: usize,
        target: usize,
        source: usize,
    },
    LocationRing {
        lag: usize,
        target: usize,
        ring: usize,
    },
    Ring {
        lag: usize,
        ring: usize,
    },
}

/// Per-lag `S × S` sparsity pattern plus the regressor grouping used by
/// pooled designs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    locations: usize,
    pooling: Pooling,
    /// `allowed[l - 1][s * S + s']`.
    allowed: Vec<Vec<bool>>,
    /// `groups[s][l - 1]`: source sets summed into one regressor each.
    groups: Vec<Vec<Vec<Vec<usize>>>>,
    /// Ring index of each group when pooled; `None` for pair groups.
    group_rings: Vec<Vec<Vec<Option<usize>>>>,
}

/// Builds the SSBVAR sparsity pattern for `lags` lags.
pub fn sparsity_pattern(
    lags: usize,
    nbh: &NeighbourhoodSystem,
    decay: &DecaySpec,
    pooling: Pooling,
) -> Result<SparsityMask> {
    if decay.lags() < lags {
        return Err(Error::invalid(format!(
            "decay defined on {} lags, model needs {lags}",
            decay.lags()
        )));
    }
    let n = nbh.num_rings();
    for l in 1..=lags {
        if decay.pi(l) > n {
            return Err(Error::invalid(format!(
                "decay Π({l}) = {} exceeds the number of rings {n}",
                decay.pi(l)
            )));
        }
    }
    let s_count = nbh.locations();
    let mut allowed = vec![vec![false; s_count * s_count]; lags];
    let mut groups = vec![vec![Vec::new(); lags]; s_count];
    let mut group_rings = vec![vec![Vec::new(); lags]; s_count];
    for l in 1..=lags {
        let pi = decay.pi(l);
        for s in 0..s_count {
            let mut sources = Vec::new();
            for i in 0..=pi {
                let members = nbh.members(s, i);
                for &src in &members {
                    allowed[l - 1][s * s_count + src] = true;
                }
                if pooling != Pooling::None {
                    groups[s][l - 1].push(members.clone());
                    group_rings[s][l - 1].push(Some(i));
                }
                sources.extend(members);
            }
            if pooling == Pooling::None {
                sources.sort_unstable();
                for src in sources {
                    groups[s][l - 1].push(vec![src]);
                    group_rings[s][l - 1].push(None);
                }
            }
        }
    }
    Ok(SparsityMask {
        locations: s_count,
        pooling,
        allowed,
        groups,
        group_rings,
    })
}

impl SparsityMask {
    /// Every coefficient free: the unrestricted VAR pattern.
    pub fn full(locations: usize, lags: usize) -> Self {
        let mut groups = vec![vec![Vec::new(); lags]; locations];
        let mut group_rings = vec![vec![Vec::new(); lags]; locations];
        for s in 0..locations {
            for l in 0..lags {
                groups[s][l] = (0..locations).map(|src| vec![src]).collect();
                group_rings[s][l] = vec![None; locations];
            }
        }
        Self {
            locations,
            pooling: Pooling::None,
            allowed: vec![vec![true; locations * locations]; lags],
            groups,
            group_rings,
        }
    }

    /// Only own lags: independent autoregressions per location.
    pub fn diagonal(locations: usize, lags: usize) -> Self {
        sparsity_pattern(
            lags,
            &NeighbourhoodSystem::isolated(locations),
            &DecaySpec::constant(lags, 0),
            Pooling::None,
        )
        .expect("isolated pattern is always valid")
    }

    pub fn lags(&self) -> usize {
        self.allowed.len()
    }

    pub fn locations(&self) -> usize {
        self.locations
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn allowed(&self, lag: usize, target: usize, source: usize) -> bool {
        self.allowed[lag - 1][target * self.locations + source]
    }

    /// Row `target` of the lag-`lag` mask.
    pub fn row(&self, lag: usize, target: usize) -> &[bool] {
        let s = self.locations;
        &self.allowed[lag - 1][target * s..(target + 1) * s]
    }

    pub fn entry_count(&self, lag: usize) -> usize {
        self.allowed[lag - 1].iter().filter(|&&b| b).count()
    }

    /// Regressor groups of `target` at `lag`; each group's values are summed.
    pub fn groups(&self, target: usize, lag: usize) -> &[Vec<usize>] {
        &self.groups[target][lag - 1]
    }

    /// Distinct free lag coefficients (ring 0 included in pooled modes).
    pub fn group_labels(&self) -> Vec<GroupLabel> {
        let mut labels = Vec::new();
        for l in 1..=self.lags() {
            for s in 0..self.locations {
                for (g, ring) in self.groups[s][l - 1]
                    .iter()
                    .zip(&self.group_rings[s][l - 1])
                {
                    let label = match (self.pooling, ring) {
                        (Pooling::None, _) | (_, None) => GroupLabel::Pair {
                            lag: l,
                            target: s,
                            source: g[0],
                        },
                        (Pooling::PerLocationRing, Some(i)) => GroupLabel::LocationRing {
                            lag: l,
                            target: s,
                            ring: *i,
                        },
                        (Pooling::GlobalRing, Some(i)) => GroupLabel::Ring { lag: l, ring: *i },
                    };
                    labels.push(label);
                }
            }
        }
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    /// Number of free lag coefficients, counting ring 0.
    pub fn free_lag_parameters(&self) -> usize {
        self.group_labels().len()
    }

    /// Free lag coefficients when the self-lag (ring 0) is not counted. For
    /// pooled modes this is `S · Σ Π(l)` or `Σ Π(l)`.
    pub fn free_lag_parameters_excluding_self(&self) -> usize {
        self.group_labels()
            .into_iter()
            .filter(|label| match *label {
                GroupLabel::Pair { target, source, .. } => target != source,
                GroupLabel::LocationRing { ring, .. } | GroupLabel::Ring { ring, .. } => ring != 0,
            })
            .count()
    }
}

/// `L(T) = max(1, floor(C · (T / ln T)^{1/6}))`, clamped to 1 for `T <= 2`.
pub fn lag_for_sample_size(t: usize, c: f64) -> usize {
    if t <= 2 {
        return 1;
    }
    let t = t as f64;
    let value = c * (t / t.ln()).powf(1.0 / 6.0);
    (value.floor() as usize).max(1)
}

/// All lag lengths between `L(t1)` and `L(t2)` inclusive.
pub fn lag_grid(t1: usize, t2: usize, c: f64) -> Result<Vec<usize>> {
    if t1 < 1 || t1 > t2 {
        return Err(Error::invalid(format!(
            "lag grid needs 1 <= T1 <= T2, got T1 = {t1}, T2 = {t2}"
        )));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::invalid(format!(
            "lag grid constant must be positive, got {c}"
        )));
    }
    let lo = lag_for_sample_size(t1, c);
    let hi = lag_for_sample_size(t2, c);
    Ok((lo..=hi).collect())
}

/// Regression structure of one (SS)BVAR: lags, exogenous count and mask.
///
/// Coefficient order follows `(α, vec(B), Ã_1, .., Ã_L)`: per location an
/// intercept, its exogenous loadings, then the masked lag coefficients lag by
/// lag with sources in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsbvarStructure {
    mask: SparsityMask,
    exogenous: usize,
}

impl SsbvarStructure {
    pub fn new(mask: SparsityMask, exogenous: usize) -> Self {
        Self { mask, exogenous }
    }

    /// Unrestricted BVAR with `lags` lags on `locations` series.
    pub fn unrestricted(locations: usize, lags: usize) -> Self {
        Self::new(SparsityMask::full(locations, lags), 0)
    }

    /// Independent Bayesian autoregressions sharing one noise scale.
    pub fn autoregressive(locations: usize, lags: usize) -> Self {
        Self::new(SparsityMask::diagonal(locations, lags), 0)
    }

    pub fn mask(&self) -> &SparsityMask {
        &self.mask
    }

    pub fn lags(&self) -> usize {
        self.mask.lags()
    }

    pub fn locations(&self) -> usize {
        self.mask.locations()
    }

    pub fn exogenous(&self) -> usize {
        self.exogenous
    }

    fn lag_columns(&self, s: usize) -> usize {
        (1..=self.lags())
            .map(|l| self.mask.groups(s, l).len())
            .sum()
    }

    /// Coefficient blocks: one per location, or a single shared block under
    /// global ring pooling.
    pub fn layout(&self) -> DesignLayout {
        let s_count = self.locations();
        match self.mask.pooling() {
            Pooling::GlobalRing => {
                let shared: usize = if s_count == 0 { 0 } else { self.lag_columns(0) };
                DesignLayout::new(
                    vec![0; s_count],
                    vec![s_count * (1 + self.exogenous) + shared],
                )
            }
            _ => DesignLayout::new(
                (0..s_count).collect(),
                (0..s_count)
                    .map(|s| 1 + self.exogenous + self.lag_columns(s))
                    .collect(),
            ),
        }
    }

    /// Design row of location `s`; `history[l - 1]` holds `y_{t-l}`.
    pub fn design_row(&self, history: &[&[f64]], exogenous: &[f64], s: usize) -> Vec<f64> {
        let mut row = Vec::new();
        self.write_design_row(history, exogenous, s, &mut row);
        row
    }

    pub(crate) fn write_design_row(
        &self,
        history: &[&[f64]],
        exogenous: &[f64],
        s: usize,
        row: &mut Vec<f64>,
    ) {
        assert!(
            history.len() >= self.lags(),
            "design row needs {} lags of history, got {}",
            self.lags(),
            history.len()
        );
        assert_eq!(exogenous.len(), self.exogenous, "exogenous vector length");
        let s_count = self.locations();
        row.clear();
        if self.mask.pooling() == Pooling::GlobalRing {
            row.extend((0..s_count).map(|j| if j == s { 1.0 } else { 0.0 }));
            for &z in exogenous {
                row.extend((0..s_count).map(|j| if j == s { z } else { 0.0 }));
            }
        } else {
            row.push(1.0);
            row.extend_from_slice(exogenous);
        }
        for l in 1..=self.lags() {
            let past = history[l - 1];
            for group in self.mask.groups(s, l) {
                row.push(group.iter().map(|&src| past[src]).sum());
            }
        }
    }

    pub fn design_rows(&self, history: &[&[f64]], exogenous: &[f64]) -> Vec<Vec<f64>> {
        (0..self.locations())
            .map(|s| self.design_row(history, exogenous, s))
            .collect()
    }
}
