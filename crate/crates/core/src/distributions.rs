//! Exact distributions on finite state spaces: Kullback-Leibler divergence,
//! partition models and their divergence-minimizing projections, mixtures of
//! product distributions, Dirichlet and empirical sampling.
//!
//! All divergences are computed and stored in nats; conversion to another
//! log base is a reporting concern.

use rand::Rng;
use rand_distr::{Distribution as _, Gamma};

use crate::error::{Error, Result};
use crate::state_space::StateSpace;

/// Mass must sum to one within this tolerance.
pub const MASS_TOL: f64 = 1e-12;

/// A dense exact probability distribution over a [`StateSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dist {
    space: StateSpace,
    mass: Vec<f64>,
}

impl Dist {
    pub fn new(space: StateSpace, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != space.size() {
            return Err(Error::Schema(format!(
                "mass vector has {} entries, space {space} has {}",
                mass.len(),
                space.size()
            )));
        }
        if mass.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Domain("mass entries must be finite and >= 0".into()));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::Domain(format!(
                "mass sums to {total}, expected 1 within {MASS_TOL}"
            )));
        }
        Ok(Self { space, mass })
    }

    /// Normalizes a non-negative weight vector. Errors on a zero/invalid total.
    pub fn from_weights(space: StateSpace, mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !total.is_finite() || total <= 0.0 {
            return Err(Error::Domain(format!("weights sum to {total}")));
        }
        for w in &mut weights {
            *w /= total;
        }
        Dist::new(space, weights)
    }

    pub fn uniform(space: StateSpace) -> Self {
        let n = space.size();
        let mass = vec![1.0 / n as f64; n];
        Self { space, mass }
    }

    pub fn point_mass(space: StateSpace, state: &[u32]) -> Result<Self> {
        let idx = space.index(state)?;
        let mut mass = vec![0.0; space.size()];
        mass[idx] = 1.0;
        Ok(Self { space, mass })
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn prob(&self, idx: usize) -> f64 {
        self.mass[idx]
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.mass
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, _)| i)
    }

    /// Largest absolute pointwise difference.
    pub fn linf_distance(&self, other: &Dist) -> f64 {
        self.mass
            .iter()
            .zip(&other.mass)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Reorders units so new unit `i` is old unit `perm[i]`.
    pub fn permute_units(&self, perm: &[usize]) -> Result<Dist> {
        let new_space = self.space.permuted(perm)?;
        let mut mass = vec![0.0; self.mass.len()];
        for (idx, &p) in self.mass.iter().enumerate() {
            let state = self.space.unindex(idx);
            let new_state: Vec<u32> = perm.iter().map(|&c| state[c]).collect();
            mass[new_space.index(&new_state)?] = p;
        }
        Ok(Dist {
            space: new_space,
            mass,
        })
    }

    /// Inverse-CDF sampler over flat indices.
    pub fn sampler(&self) -> DistSampler {
        let mut cum = Vec::with_capacity(self.mass.len());
        let mut acc = 0.0;
        for &p in &self.mass {
            acc += p;
            cum.push(acc);
        }
        DistSampler { cum }
    }
}

/// Precomputed cumulative table for repeated sampling from one [`Dist`].
#[derive(Debug, Clone)]
pub struct DistSampler {
    cum: Vec<f64>,
}

impl DistSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        match self
            .cum
            .binary_search_by(|c| c.partial_cmp(&u).expect("cdf is finite"))
        {
            Ok(i) | Err(i) => i.min(self.cum.len() - 1),
        }
    }
}

/// `D(p || q)` in nats; `+inf` iff `supp(p)` is not contained in `supp(q)`.
pub fn kl(p: &Dist, q: &Dist) -> Result<f64> {
    p.space.expect_same(&q.space)?;
    let mut acc = 0.0;
    for (&pp, &qq) in p.mass.iter().zip(&q.mass) {
        if pp > 0.0 {
            if qq == 0.0 {
                return Ok(f64::INFINITY);
            }
            acc += pp * (pp / qq).ln();
        }
    }
    // tiny negative values arise from rounding when p == q
    Ok(acc.max(0.0))
}

/// A partition of the state indices into disjoint blocks covering everything.
#[derive(Debug, Clone)]
pub struct PartitionModel {
    space: StateSpace,
    blocks: Vec<Vec<usize>>,
    block_of: Vec<usize>,
    coarseness: usize,
}

impl PartitionModel {
    pub fn new(space: StateSpace, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let mut block_of = vec![usize::MAX; space.size()];
        for (b, blk) in blocks.iter().enumerate() {
            if blk.is_empty() {
                return Err(Error::Schema(format!("block {b} is empty")));
            }
            for &idx in blk {
                if idx >= space.size() {
                    return Err(Error::Schema(format!("state {idx} out of range")));
                }
                if block_of[idx] != usize::MAX {
                    return Err(Error::Schema(format!("state {idx} in two blocks")));
                }
                block_of[idx] = b;
            }
        }
        if block_of.iter().any(|&b| b == usize::MAX) {
            return Err(Error::Schema("blocks do not cover the space".into()));
        }
        let coarseness = blocks.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Self {
            space,
            blocks,
            block_of,
            coarseness,
        })
    }

    /// Every state its own block: the model is the full simplex.
    pub fn singletons(space: StateSpace) -> Self {
        let blocks = (0..space.size()).map(|i| vec![i]).collect();
        Self::new(space, blocks).expect("singleton partition is valid")
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block_of(&self, idx: usize) -> usize {
        self.block_of[idx]
    }

    pub fn coarseness(&self) -> usize {
        self.coarseness
    }
}

/// Divergence-minimizing projection onto the partition model: each block's
/// mass spread uniformly within the block.
pub fn project_to_partition(p: &Dist, pm: &PartitionModel) -> Result<Dist> {
    p.space.expect_same(&pm.space)?;
    let mut block_mass = vec![0.0; pm.blocks.len()];
    for (idx, &mass) in p.mass.iter().enumerate() {
        block_mass[pm.block_of[idx]] += mass;
    }
    let mut mass = vec![0.0; p.mass.len()];
    for (b, blk) in pm.blocks.iter().enumerate() {
        let share = block_mass[b] / blk.len() as f64;
        for &idx in blk {
            mass[idx] = share;
        }
    }
    Dist::new(p.space.clone(), mass)
}

/// Worst-case divergence to the partition model: `ln(coarseness)`.
pub fn partition_max_kl(pm: &PartitionModel) -> f64 {
    (pm.coarseness as f64).ln()
}

/// One draw from the symmetric Dirichlet `Dir(a, ..., a)` over the simplex on
/// `space`, via normalized Gamma(a, 1) variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(space: &StateSpace, a: f64, rng: &mut R) -> Result<Dist> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Domain(format!("concentration must be > 0, got {a}")));
    }
    let gamma = Gamma::new(a, 1.0)
        .map_err(|e| Error::Domain(format!("gamma parameters rejected: {e}")))?;
    loop {
        let weights: Vec<f64> = (0..space.size()).map(|_| gamma.sample(rng)).collect();
        let total: f64 = weights.iter().sum();
        // at very small `a` all variates can underflow to zero; redraw
        if total > 0.0 && total.is_finite() {
            return Dist::from_weights(space.clone(), weights);
        }
    }
}

/// Empirical distribution `(1/N) sum_j delta_{x_j}` from flat state indices.
pub fn empirical_from_samples(space: &StateSpace, samples: &[usize]) -> Result<Dist> {
    if samples.is_empty() {
        return Err(Error::Domain("empty sample list".into()));
    }
    let mut counts = vec![0usize; space.size()];
    for &s in samples {
        if s >= space.size() {
            return Err(Error::Domain(format!(
                "sample index {s} out of range for {space}"
            )));
        }
        counts[s] += 1;
    }
    let n = samples.len() as f64;
    Dist::new(
        space.clone(),
        counts.into_iter().map(|c| c as f64 / n).collect(),
    )
}

/// A fully factorized distribution, one factor per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductDist {
    space: StateSpace,
    factors: Vec<Vec<f64>>,
}

impl ProductDist {
    pub fn new(space: StateSpace, factors: Vec<Vec<f64>>) -> Result<Self> {
        if factors.len() != space.num_units() {
            return Err(Error::Schema("one factor per unit required".into()));
        }
        for (i, f) in factors.iter().enumerate() {
            if f.len() != space.card(i) as usize {
                return Err(Error::Schema(format!(
                    "factor {i} has {} entries, unit has cardinality {}",
                    f.len(),
                    space.card(i)
                )));
            }
            if f.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Domain("factor entries must be >= 0".into()));
            }
            let total: f64 = f.iter().sum();
            if (total - 1.0).abs() > MASS_TOL {
                return Err(Error::Domain(format!(
                    "factor {i} sums to {total}, expected 1"
                )));
            }
        }
        Ok(Self { space, factors })
    }

    /// Uniform on every unit.
    pub fn uniform(space: StateSpace) -> Self {
        let factors = space
            .cards()
            .iter()
            .map(|&q| vec![1.0 / q as f64; q as usize])
            .collect();
        Self { space, factors }
    }

    /// Point mass at `state`.
    pub fn delta(space: StateSpace, state: &[u32]) -> Result<Self> {
        space.index(state)?;
        let factors = state
            .iter()
            .zip(space.cards())
            .map(|(&v, &q)| {
                let mut f = vec![0.0; q as usize];
                f[v as usize] = 1.0;
                f
            })
            .collect();
        Ok(Self { space, factors })
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn factors(&self) -> &[Vec<f64>] {
        &self.factors
    }

    pub fn factor(&self, unit: usize) -> &[f64] {
        &self.factors[unit]
    }

    pub fn eval_state(&self, state: &[u32]) -> f64 {
        state
            .iter()
            .zip(&self.factors)
            .map(|(&v, f)| f[v as usize])
            .product()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.factors.iter().all(|f| f.iter().all(|&p| p > 0.0))
    }

    pub fn to_dist(&self) -> Result<Dist> {
        let mass: Vec<f64> = self.space.states().map(|s| self.eval_state(&s)).collect();
        Dist::new(self.space.clone(), mass)
    }
}

/// A convex mixture of product distributions.
#[derive(Debug, Clone)]
pub struct MixtureOfProducts {
    space: StateSpace,
    terms: Vec<(f64, ProductDist)>,
}

impl MixtureOfProducts {
    pub fn new(space: StateSpace, terms: Vec<(f64, ProductDist)>) -> Result<Self> {
        let mut total = 0.0;
        for (w, p) in &terms {
            if !(*w >= 0.0) || !w.is_finite() {
                return Err(Error::Domain("mixture weights must be >= 0".into()));
            }
            space.expect_same(p.space())?;
            total += w;
        }
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::Domain(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { space, terms })
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn terms(&self) -> &[(f64, ProductDist)] {
        &self.terms
    }

    pub fn eval_state(&self, state: &[u32]) -> f64 {
        self.terms
            .iter()
            .map(|(w, p)| w * p.eval_state(state))
            .sum()
    }

    pub fn to_dist(&self) -> Result<Dist> {
        let mass: Vec<f64> = self.space.states().map(|s| self.eval_state(&s)).collect();
        Dist::new(self.space.clone(), mass)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(cards: &[u32], mass: &[f64]) -> Dist {
        Dist::new(StateSpace::new(cards).unwrap(), mass.to_vec()).unwrap()
    }

    #[test]
    fn kl_identical_is_zero() {
        let p = dist(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_point_mass_vs_uniform() {
        let space = StateSpace::new(&[2, 2]).unwrap();
        let p = Dist::point_mass(space.clone(), &[1, 0]).unwrap();
        let q = Dist::uniform(space);
        assert!((kl(&p, &q).unwrap() - 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_two_term_hand_value() {
        let p = dist(&[2, 2], &[0.5, 0.5, 0.0, 0.0]);
        let q = dist(&[2, 2], &[0.25, 0.25, 0.25, 0.25]);
        assert!((kl(&p, &q).unwrap() - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_infinite_outside_support() {
        let p = dist(&[2, 2], &[0.5, 0.5, 0.0, 0.0]);
        let q = dist(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(kl(&p, &q).unwrap(), f64::INFINITY);
        // and q has no mass outside p's support, so the reverse is finite
        assert!(kl(&q, &p).unwrap().is_finite());
    }

    #[test]
    fn kl_space_mismatch() {
        let p = dist(&[2, 2], &[0.25; 4]);
        let q = dist(&[4], &[0.25; 4]);
        assert!(matches!(kl(&p, &q), Err(Error::SpaceMismatch { .. })));
    }

    fn pairs_partition() -> PartitionModel {
        let space = StateSpace::new(&[2, 2, 2]).unwrap();
        let blocks = vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]];
        PartitionModel::new(space, blocks).unwrap()
    }

    #[test]
    fn projection_fixes_uniform() {
        let pm = pairs_partition();
        let u = Dist::uniform(pm.space().clone());
        let proj = project_to_partition(&u, &pm).unwrap();
        assert!(u.linf_distance(&proj) < 1e-15);
    }

    #[test]
    fn projection_of_point_mass_and_optimality_oracle() {
        let pm = pairs_partition();
        let p = Dist::point_mass(pm.space().clone(), &[0, 0, 0]).unwrap();
        let proj = project_to_partition(&p, &pm).unwrap();
        assert!((proj.prob(0) - 0.5).abs() < 1e-15);
        assert!((proj.prob(1) - 0.5).abs() < 1e-15);
        let d_star = kl(&p, &proj).unwrap();
        assert!((d_star - 2.0f64.ln()).abs() < 1e-12);

        // oracle: no random block-constant distribution beats the projection
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let w: Vec<f64> = (0..4).map(|_| rng.gen_range(1e-6..1.0)).collect();
            let total: f64 = w.iter().sum();
            let mass: Vec<f64> = (0..8).map(|i| w[i / 2] / (2.0 * total)).collect();
            let q = Dist::new(pm.space().clone(), mass).unwrap();
            assert!(kl(&p, &q).unwrap() >= d_star - 1e-12);
        }
    }

    #[test]
    fn projection_with_singleton_blocks_is_identity() {
        let space = StateSpace::new(&[2, 2]).unwrap();
        let pm = PartitionModel::singletons(space.clone());
        let p = dist(&[2, 2], &[0.4, 0.3, 0.2, 0.1]);
        assert_eq!(project_to_partition(&p, &pm).unwrap(), p);
        assert_eq!(partition_max_kl(&pm), 0.0);
    }

    #[test]
    fn partition_max_kl_values() {
        assert!((partition_max_kl(&pairs_partition()) - 2.0f64.ln()).abs() < 1e-15);

        // 8 states, blocks (4,2,2): the bound is attained on the 4-block
        let space = StateSpace::new(&[2, 2, 2]).unwrap();
        let pm = PartitionModel::new(
            space.clone(),
            vec![vec![0, 1, 2, 3], vec![4, 5], vec![6, 7]],
        )
        .unwrap();
        let bound = partition_max_kl(&pm);
        assert!((bound - 4.0f64.ln()).abs() < 1e-15);
        let mut worst: f64 = 0.0;
        for state in space.states() {
            let p = Dist::point_mass(space.clone(), &state).unwrap();
            let proj = project_to_partition(&p, &pm).unwrap();
            worst = worst.max(kl(&p, &proj).unwrap());
        }
        assert!((worst - bound).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_large_a_concentrates_at_uniform() {
        let space = StateSpace::new(&[2, 2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mean = vec![0.0; 8];
        let n = 10_000;
        for _ in 0..n {
            let d = sample_dirichlet(&space, 100.0, &mut rng).unwrap();
            for (m, &p) in mean.iter_mut().zip(d.mass()) {
                *m += p;
            }
        }
        for m in &mean {
            assert!((m / n as f64 - 0.125).abs() < 0.02);
        }
    }

    #[test]
    fn dirichlet_a1_first_coordinate_uniform_ks() {
        // Dir(1,1) on two states makes the first coordinate U[0,1]
        let space = StateSpace::new(&[2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 10_000;
        let mut xs: Vec<f64> = (0..n)
            .map(|_| sample_dirichlet(&space, 1.0, &mut rng).unwrap().prob(0))
            .collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            ks = ks.max((x - lo).abs()).max((x - hi).abs());
        }
        // asymptotic 1% critical value
        assert!(ks < 1.6276 / (n as f64).sqrt(), "KS statistic {ks}");
    }

    #[test]
    fn dirichlet_rejects_bad_concentration() {
        let space = StateSpace::new(&[2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_dirichlet(&space, 0.0, &mut rng).is_err());
        assert!(sample_dirichlet(&space, -1.0, &mut rng).is_err());
    }

    #[test]
    fn empirical_counting() {
        let space = StateSpace::new(&[2, 2]).unwrap();
        let s00 = space.index(&[0, 0]).unwrap();
        let s11 = space.index(&[1, 1]).unwrap();
        let p = empirical_from_samples(&space, &[s00, s00, s11]).unwrap();
        assert!((p.prob(s00) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.prob(s11) - 1.0 / 3.0).abs() < 1e-15);

        let single = empirical_from_samples(&space, &[s11]).unwrap();
        assert_eq!(single.prob(s11), 1.0);

        let all: Vec<usize> = (0..4).collect();
        let unif = empirical_from_samples(&space, &all).unwrap();
        assert!(unif.linf_distance(&Dist::uniform(space.clone())) < 1e-15);

        assert!(empirical_from_samples(&space, &[]).is_err());
        assert!(empirical_from_samples(&space, &[9]).is_err());
    }

    #[test]
    fn mixture_evaluates_like_dense_expansion() {
        let space = StateSpace::new(&[2, 3]).unwrap();
        let p1 = ProductDist::new(
            space.clone(),
            vec![vec![0.3, 0.7], vec![0.2, 0.5, 0.3]],
        )
        .unwrap();
        let p2 = ProductDist::delta(space.clone(), &[1, 2]).unwrap();
        let mix = MixtureOfProducts::new(space.clone(), vec![(0.6, p1), (0.4, p2)]).unwrap();
        let dense = mix.to_dist().unwrap();
        for (idx, state) in space.states().enumerate() {
            assert!((mix.eval_state(&state) - dense.prob(idx)).abs() < 1e-15);
        }
    }
}
