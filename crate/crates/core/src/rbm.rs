//! Discrete restricted Boltzmann machines with categorical units.
//!
//! The joint over visible states `x` and hidden states `y` is
//! `p(x, y) ∝ exp(x' W y + b·x + c·y)` in the stacked one-hot encoding, with
//! an exact partition function obtained by exhaustive enumeration. The module
//! also provides constructive parameter synthesis: realizing mixtures of
//! product distributions with disjoint supports (one hidden slot per product
//! term), realizing block-constant distributions over cylinder partitions,
//! and the hidden-capacity predicate governing universal approximation.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution as _, Normal};

use crate::distributions::{Dist, ProductDist};
use crate::error::{Error, Result};
use crate::state_space::StateSpace;

/// Bias applied to hidden slots that carry no mixture term. The slot then
/// contributes a constant factor that cancels after normalization.
fn unused_slot_bias(sharpness: f64) -> f64 {
    -(10.0 * sharpness + 50.0)
}

/// Stacked one-hot columns for every state of `space`, one row per state.
pub(crate) fn one_hot_matrix(space: &StateSpace) -> Array2<f64> {
    let mut m = Array2::zeros((space.size(), space.one_hot_dim()));
    for (i, state) in space.states().enumerate() {
        let col = space.one_hot(&state).expect("states are valid");
        for (j, v) in col.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

/// Interaction and bias parameters of a discrete RBM.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmParams {
    visible: StateSpace,
    hidden: StateSpace,
    /// Interaction matrix, `one_hot_dim(visible) x one_hot_dim(hidden)`.
    pub w: Array2<f64>,
    /// Visible bias, length `one_hot_dim(visible)`.
    pub b: Array1<f64>,
    /// Hidden bias, length `one_hot_dim(hidden)`.
    pub c: Array1<f64>,
}

impl RbmParams {
    pub fn new(
        visible: StateSpace,
        hidden: StateSpace,
        w: Array2<f64>,
        b: Array1<f64>,
        c: Array1<f64>,
    ) -> Result<Self> {
        let (dv, dh) = (visible.one_hot_dim(), hidden.one_hot_dim());
        if w.dim() != (dv, dh) || b.len() != dv || c.len() != dh {
            return Err(Error::Schema(format!(
                "parameter shapes {:?}/{}/{} do not match one-hot dims {dv}x{dh}",
                w.dim(),
                b.len(),
                c.len()
            )));
        }
        if w.iter().chain(b.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("parameters must be finite".into()));
        }
        Ok(Self {
            visible,
            hidden,
            w,
            b,
            c,
        })
    }

    pub fn zeros(visible: StateSpace, hidden: StateSpace) -> Self {
        let (dv, dh) = (visible.one_hot_dim(), hidden.one_hot_dim());
        Self {
            visible,
            hidden,
            w: Array2::zeros((dv, dh)),
            b: Array1::zeros(dv),
            c: Array1::zeros(dh),
        }
    }

    /// Gaussian initialization with standard deviation `sigma`.
    pub fn random<R: Rng + ?Sized>(
        visible: StateSpace,
        hidden: StateSpace,
        sigma: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, sigma).expect("sigma >= 0");
        let (dv, dh) = (visible.one_hot_dim(), hidden.one_hot_dim());
        Self {
            visible,
            hidden,
            w: Array2::from_shape_fn((dv, dh), |_| normal.sample(rng)),
            b: Array1::from_shape_fn(dv, |_| normal.sample(rng)),
            c: Array1::from_shape_fn(dh, |_| normal.sample(rng)),
        }
    }

    pub fn visible(&self) -> &StateSpace {
        &self.visible
    }

    pub fn hidden(&self) -> &StateSpace {
        &self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len() + self.c.len()
    }

    /// Energies `x' W y + b x + c y` for every visible/hidden state pair.
    pub(crate) fn energy_table(&self) -> Array2<f64> {
        let xoh = one_hot_matrix(&self.visible);
        let yoh = one_hot_matrix(&self.hidden);
        let mut e = xoh.dot(&self.w).dot(&yoh.t());
        let bx = xoh.dot(&self.b);
        let cy = yoh.dot(&self.c);
        for ((i, j), v) in e.indexed_iter_mut() {
            *v += bx[i] + cy[j];
        }
        e
    }

    /// Exact joint distribution on the product space visible x hidden.
    pub fn joint(&self) -> Result<Dist> {
        let joint_space = self.visible.concat(&self.hidden)?;
        let e = self.energy_table();
        let shift = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = e.iter().map(|&v| (v - shift).exp()).collect();
        Dist::from_weights(joint_space, weights)
    }

    /// Visible marginal by full joint enumeration.
    pub fn visible_marginal(&self) -> Result<Dist> {
        let joint = self.joint()?;
        let sy = self.hidden.size();
        let mass: Vec<f64> = joint
            .mass()
            .chunks(sy)
            .map(|row| row.iter().sum())
            .collect();
        Dist::new(self.visible.clone(), mass)
    }

    /// Visible marginal through the per-state factorization over hidden
    /// units: an independent route that must agree with
    /// [`RbmParams::visible_marginal`] to within rounding.
    pub fn visible_marginal_factorized(&self) -> Result<Dist> {
        let xoh = one_hot_matrix(&self.visible);
        let u = xoh.dot(&self.w); // (sx, dh) activations before hidden bias
        let bx = xoh.dot(&self.b);
        let mut logw = vec![0.0f64; self.visible.size()];
        for (x, lw) in logw.iter_mut().enumerate() {
            *lw = bx[x];
            for j in 0..self.hidden.num_units() {
                let off = self.hidden.one_hot_offset(j);
                let width = self.hidden.card(j) as usize - 1;
                // log-sum-exp over the zero state and the unit's active slots
                let mut m = 0.0f64;
                for v in 0..width {
                    m = m.max(u[(x, off + v)] + self.c[off + v]);
                }
                let mut s = (-m).exp();
                for v in 0..width {
                    s += (u[(x, off + v)] + self.c[off + v] - m).exp();
                }
                *lw += m + s.ln();
            }
        }
        let shift = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logw.iter().map(|&v| (v - shift).exp()).collect();
        Dist::from_weights(self.visible.clone(), weights)
    }
}

/// A mixture of product distributions in the shape the synthesis consumes:
/// a designated base product plus one group of product terms per hidden
/// unit. Groups must have pairwise disjoint supports and group `i` may carry
/// at most `card(i) - 1` terms.
#[derive(Debug, Clone)]
pub struct GroupedMixture {
    pub space: StateSpace,
    /// Mixture weight of the base product; must be positive.
    pub base_weight: f64,
    pub base: ProductDist,
    /// `groups[i]` holds the `(weight, product)` terms assigned to hidden unit `i`.
    pub groups: Vec<Vec<(f64, ProductDist)>>,
}

impl GroupedMixture {
    /// Total mixture evaluated at a state (base plus all group terms).
    pub fn eval_state(&self, state: &[u32]) -> f64 {
        let mut v = self.base_weight * self.base.eval_state(state);
        for group in &self.groups {
            for (w, p) in group {
                v += w * p.eval_state(state);
            }
        }
        v
    }

    pub fn to_dist(&self) -> Result<Dist> {
        let mass: Vec<f64> = self.space.states().map(|s| self.eval_state(&s)).collect();
        Dist::new(self.space.clone(), mass)
    }
}

/// Replaces exactly-zero factor entries by `exp(-sharpness)`; positive
/// entries are untouched so representable targets stay exact.
fn clamp_factor(factor: &[f64], sharpness: f64) -> Vec<f64> {
    let floor = (-sharpness).exp();
    factor
        .iter()
        .map(|&p| if p == 0.0 { floor } else { p })
        .collect()
}

/// Depth scale for the base product's zero clamps, relative to the slots'.
///
/// Slot terms of different hidden units multiply in the visible marginal, so
/// a spurious state can pick up `g_i(x) g_j(x) / p_0(x)` after clamping.
/// With the base clamped at `exp(-beta K)` and slots at `exp(-K)`, keeping
/// every foreign slot activation `exp(-K z + beta K z_0)` below
/// `exp(-K / 2)` needs `beta <= (z - 1/2) / z_0` over all states and slots,
/// where `z` counts a slot's zero factors at the state and `z_0` the
/// base's. With at most one slot-carrying unit there are no cross products
/// and the full depth is safe.
fn base_clamp_scale(target: &GroupedMixture) -> f64 {
    let space = &target.space;
    let active_units = target
        .groups
        .iter()
        .filter(|g| g.iter().any(|(w, _)| *w > 0.0))
        .count();
    if active_units <= 1 {
        return 1.0;
    }
    let mut beta = 1.0f64;
    for state in space.states() {
        let z0 = (0..space.num_units())
            .filter(|&j| target.base.factor(j)[state[j] as usize] == 0.0)
            .count();
        if z0 == 0 {
            continue;
        }
        for group in &target.groups {
            for (w, g) in group {
                if *w == 0.0 {
                    continue;
                }
                let z = (0..space.num_units())
                    .filter(|&j| g.factor(j)[state[j] as usize] == 0.0)
                    .count();
                if z == 0 {
                    continue; // this slot owns the state
                }
                beta = beta.min((z as f64 - 0.5) / z0 as f64);
            }
        }
    }
    beta
}

/// Synthesizes RBM parameters whose visible marginal approaches the grouped
/// mixture as `sharpness` grows, choosing the smallest hidden space that
/// fits each group.
pub fn synth_rbm_mixture(target: &GroupedMixture, sharpness: f64) -> Result<RbmParams> {
    if target.groups.is_empty() {
        return Err(Error::Schema("at least one hidden unit required".into()));
    }
    let hidden_cards: Vec<u32> = target
        .groups
        .iter()
        .map(|g| (g.len() + 1).max(2) as u32)
        .collect();
    synth_rbm_mixture_into(target, &StateSpace::new(&hidden_cards)?, sharpness)
}

/// Like [`synth_rbm_mixture`] but with an explicit hidden space; group `i`
/// must fit into `hidden.card(i) - 1` slots.
pub fn synth_rbm_mixture_into(
    target: &GroupedMixture,
    hidden: &StateSpace,
    sharpness: f64,
) -> Result<RbmParams> {
    let space = &target.space;
    target.base.space().expect_same(space)?;
    if target.groups.len() != hidden.num_units() {
        return Err(Error::Schema(format!(
            "{} groups for {} hidden units",
            target.groups.len(),
            hidden.num_units()
        )));
    }
    if !(target.base_weight > 0.0) {
        return Err(Error::Domain("base weight must be positive".into()));
    }
    let mut total = target.base_weight;
    for (i, group) in target.groups.iter().enumerate() {
        if group.len() > hidden.card(i) as usize - 1 {
            return Err(Error::Capacity(format!(
                "group {i} has {} terms but hidden unit {i} offers {} slots",
                group.len(),
                hidden.card(i) - 1
            )));
        }
        for (w, p) in group {
            if !(*w >= 0.0) {
                return Err(Error::Domain("term weights must be >= 0".into()));
            }
            p.space().expect_same(space)?;
            total += w;
        }
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "mixture weights sum to {total}, expected 1"
        )));
    }

    // support disjointness across groups, on the unclamped products
    let mut support_owner: Vec<Option<usize>> = vec![None; space.size()];
    for (i, group) in target.groups.iter().enumerate() {
        for (w, p) in group {
            if *w == 0.0 {
                continue;
            }
            for (idx, state) in space.states().enumerate() {
                if p.eval_state(&state) > 0.0 {
                    match support_owner[idx] {
                        Some(owner) if owner != i => {
                            return Err(Error::Constraint(format!(
                                "groups {owner} and {i} overlap on state {state:?}"
                            )));
                        }
                        _ => support_owner[idx] = Some(i),
                    }
                }
            }
        }
    }

    let base_sharpness = base_clamp_scale(target) * sharpness;
    let base_factors: Vec<Vec<f64>> = target
        .base
        .factors()
        .iter()
        .map(|f| clamp_factor(f, base_sharpness))
        .collect();

    let dv = space.one_hot_dim();
    let dh = hidden.one_hot_dim();
    let mut w = Array2::zeros((dv, dh));
    let mut b = Array1::zeros(dv);
    let mut c = Array1::from_elem(dh, unused_slot_bias(sharpness));

    for j in 0..space.num_units() {
        let off = space.one_hot_offset(j);
        let f = &base_factors[j];
        for v in 1..space.card(j) as usize {
            b[off + v - 1] = f[v].ln() - f[0].ln();
        }
    }

    for (i, group) in target.groups.iter().enumerate() {
        let hoff = hidden.one_hot_offset(i);
        for (slot, (weight, product)) in group.iter().enumerate() {
            if *weight == 0.0 {
                continue; // slot keeps its vanishing bias
            }
            let col = hoff + slot;
            let mut bias = (weight / target.base_weight).ln();
            for j in 0..space.num_units() {
                let off = space.one_hot_offset(j);
                let t = clamp_factor(product.factor(j), sharpness);
                let base = &base_factors[j];
                let anchor = t[0].ln() - base[0].ln();
                bias += anchor;
                for v in 1..space.card(j) as usize {
                    w[(off + v - 1, col)] = t[v].ln() - base[v].ln() - anchor;
                }
            }
            c[col] = bias;
        }
    }

    RbmParams::new(space.clone(), hidden.clone(), w, b, c)
}

/// Synthesizes a block-constant target over the cylinder partition generated
/// by fixing `fixed_coords`. The target must be constant on each block and
/// the hidden space must satisfy the mixture-capacity inequality.
pub fn synth_rbm_partition(
    target: &Dist,
    fixed_coords: &[usize],
    hidden: &StateSpace,
    sharpness: f64,
) -> Result<RbmParams> {
    let space = target.space();
    let n = space.num_units();
    for &c in fixed_coords {
        if c >= n {
            return Err(Error::Schema(format!("fixed coordinate {c} out of range")));
        }
    }
    let mut sorted = fixed_coords.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != fixed_coords.len() {
        return Err(Error::Schema("duplicate fixed coordinate".into()));
    }

    // capacity: 1 + sum(card - 1) >= (prod of fixed cards) / largest fixed card
    let capacity = 1 + hidden.one_hot_dim();
    let prod: u128 = fixed_coords.iter().map(|&c| space.card(c) as u128).product();
    let max_card = fixed_coords
        .iter()
        .map(|&c| space.card(c) as u128)
        .max()
        .unwrap_or(1);
    let needed = prod / max_card;
    if (capacity as u128) < needed {
        return Err(Error::Capacity(format!(
            "partition needs {needed} mixture slots, hidden space offers {capacity}"
        )));
    }

    let mixture = partition_grouped_mixture(target, fixed_coords, hidden, 1e-9)?;
    synth_rbm_mixture_into(&mixture, hidden, sharpness)
}

/// Groups the block-uniform components of a block-constant `target` along the
/// largest-cardinality fixed coordinate and packs the resulting products
/// greedily (largest weight first) into the hidden units' slots.
pub(crate) fn partition_grouped_mixture(
    target: &Dist,
    fixed_coords: &[usize],
    hidden: &StateSpace,
    flatness_tol: f64,
) -> Result<GroupedMixture> {
    let space = target.space();
    let free_coords: Vec<usize> = (0..space.num_units())
        .filter(|c| !fixed_coords.contains(c))
        .collect();
    let group_coord = fixed_coords
        .iter()
        .copied()
        .max_by_key(|&c| space.card(c))
        .unwrap_or(0);
    let grouping = !fixed_coords.is_empty();
    let other_fixed: Vec<usize> = fixed_coords
        .iter()
        .copied()
        .filter(|&c| c != group_coord)
        .collect();

    // block masses keyed by the full fixed pattern
    let block_interior: f64 = free_coords
        .iter()
        .map(|&c| space.card(c) as f64)
        .product();
    let mut block_mass: std::collections::BTreeMap<Vec<u32>, f64> = Default::default();
    let mut pattern_state: std::collections::BTreeMap<Vec<u32>, Vec<u32>> = Default::default();
    for (idx, state) in space.states().enumerate() {
        let key: Vec<u32> = fixed_coords.iter().map(|&c| state[c]).collect();
        *block_mass.entry(key.clone()).or_insert(0.0) += target.prob(idx);
        pattern_state.entry(key).or_insert(state);
    }

    for (idx, state) in space.states().enumerate() {
        let key: Vec<u32> = fixed_coords.iter().map(|&c| state[c]).collect();
        let expect = block_mass[&key] / block_interior;
        if (target.prob(idx) - expect).abs() > flatness_tol {
            return Err(Error::Constraint(format!(
                "target is not constant on the block of {state:?}"
            )));
        }
    }

    // one group per assignment of the non-grouping fixed coordinates
    let mut groups: std::collections::BTreeMap<Vec<u32>, (f64, Vec<f64>)> = Default::default();
    let group_card = if grouping {
        space.card(group_coord) as usize
    } else {
        1
    };
    for (key, &mass) in &block_mass {
        let state = &pattern_state[key];
        let gkey: Vec<u32> = other_fixed.iter().map(|&c| state[c]).collect();
        let entry = groups
            .entry(gkey)
            .or_insert_with(|| (0.0, vec![0.0; group_card]));
        entry.0 += mass;
        if grouping {
            entry.1[state[group_coord] as usize] += mass;
        } else {
            entry.1[0] += mass;
        }
    }

    let mut weighted: Vec<(f64, ProductDist)> = Vec::new();
    for (gkey, (weight, along)) in groups {
        if weight <= 0.0 {
            continue;
        }
        let mut factors: Vec<Vec<f64>> = Vec::with_capacity(space.num_units());
        for c in 0..space.num_units() {
            if grouping && c == group_coord {
                factors.push(along.iter().map(|&m| m / weight).collect());
            } else if let Some(pos) = other_fixed.iter().position(|&oc| oc == c) {
                let mut f = vec![0.0; space.card(c) as usize];
                f[gkey[pos] as usize] = 1.0;
                factors.push(f);
            } else {
                factors.push(vec![1.0 / space.card(c) as f64; space.card(c) as usize]);
            }
        }
        weighted.push((weight, ProductDist::new(space.clone(), factors)?));
    }
    if weighted.is_empty() {
        return Err(Error::Domain("target carries no mass".into()));
    }

    // largest group becomes the base; the rest fill hidden slots greedily
    weighted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("weights are finite"));
    let (base_weight, base) = weighted.remove(0);
    let mut packed: Vec<Vec<(f64, ProductDist)>> = vec![Vec::new(); hidden.num_units()];
    let mut unit = 0usize;
    for term in weighted {
        while unit < hidden.num_units() && packed[unit].len() >= hidden.card(unit) as usize - 1 {
            unit += 1;
        }
        if unit == hidden.num_units() {
            return Err(Error::Capacity(
                "not enough hidden slots for the partition blocks".into(),
            ));
        }
        packed[unit].push(term);
    }

    Ok(GroupedMixture {
        space: space.clone(),
        base_weight,
        base,
        groups: packed,
    })
}

/// Outcome of the hidden-capacity universality test.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmUniversality {
    /// Coordinates covered by the capacity inequality (0-based).
    pub covered: Vec<usize>,
    /// Product of the cardinalities left uncovered.
    pub leftover: u64,
    /// `ln(leftover)`, the divergence bound in nats.
    pub bound_nats: f64,
    pub universal: bool,
}

/// Finds the coordinate set maximizing covered cardinality subject to
/// `1 + sum_j (card_j - 1) >= prod(covered) / max(covered)`, exhaustively
/// over subsets. Refuses more than 20 visible units.
pub fn rbm_universal_condition(
    visible: &StateSpace,
    hidden: &StateSpace,
) -> Result<RbmUniversality> {
    let n = visible.num_units();
    if n > 20 {
        return Err(Error::Resource(format!(
            "subset search over {n} > 20 visible units refused"
        )));
    }
    let capacity = 1 + hidden.one_hot_dim() as u128;
    let total: u128 = visible.cards().iter().map(|&q| q as u128).product();
    let mut best: Option<(u128, u32)> = None; // (covered product, mask)
    for mask in 1u32..(1 << n) {
        let mut prod: u128 = 1;
        let mut max_card: u128 = 1;
        for i in 0..n {
            if mask >> i & 1 == 1 {
                let q = visible.card(i) as u128;
                prod *= q;
                max_card = max_card.max(q);
            }
        }
        if prod / max_card <= capacity {
            let better = match best {
                None => true,
                Some((p, _)) => prod > p,
            };
            if better {
                best = Some((prod, mask));
            }
        }
    }
    let (covered_prod, mask) = best.expect("singletons always satisfy the inequality");
    let covered: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
    let leftover = (total / covered_prod) as u64;
    Ok(RbmUniversality {
        covered,
        leftover,
        bound_nats: (leftover as f64).ln(),
        universal: leftover == 1,
    })
}
