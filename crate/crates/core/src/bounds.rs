//! Closed-form approximation-error and feasibility formulas, evaluated for
//! arbitrary architectures, plus the Dirichlet expectation bound.
//!
//! All values are computed and stored in nats. [`BoundsReport`] collects the
//! formulas relevant to one architecture and renders them as a text table in
//! a chosen display base.

use crate::dbn::{best_plan_choice, param_count_uniform};
use crate::error::{Error, Result};
use crate::rbm::{rbm_universal_condition, RbmUniversality};
use crate::state_space::StateSpace;

/// Digamma via the shift recurrence and the asymptotic series; absolute
/// error well below 1e-12 on the positive axis.
pub fn digamma(x: f64) -> f64 {
    assert!(x > 0.0 && x.is_finite(), "digamma needs x > 0, got {x}");
    let mut x = x;
    let mut acc = 0.0;
    while x < 8.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    // ln x - 1/(2x) - sum B_{2n} / (2n x^{2n})
    let inv2 = (1.0 / x) * (1.0 / x);
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
    acc + x.ln() - 0.5 / x - series
}

/// Minimal-depth datum of the binary special case: width `2^(k-1) + k`
/// becomes universal at `1 + 2^(2^(k-1))` layers, and the exponent is
/// sandwiched by `2^n / (2 (n - log2 n))` from below and the same with an
/// extra `-1` in the denominator from above.
#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Depth {
    pub k: u32,
    pub width: u64,
    pub min_depth: u128,
    pub sandwich_lower: f64,
    pub sandwich_mid: f64,
    pub sandwich_upper: f64,
}

pub fn theorem1_depth(k: u32) -> Result<Theorem1Depth> {
    if k == 0 || k > 7 {
        return Err(Error::Domain(format!("k must be in 1..=7, got {k}")));
    }
    let half_exp = 1u64 << (k - 1); // 2^(k-1)
    let width = half_exp + k as u64;
    let min_depth = 1u128 + (1u128 << half_exp);
    let n = width as f64;
    let mid = (half_exp as f64).exp2();
    let lower = n.exp2() / (2.0 * (n - n.log2()));
    let upper = n.exp2() / (2.0 * (n - n.log2() - 1.0));
    if !(lower <= mid && mid <= upper) {
        return Err(Error::Constraint(format!(
            "depth sandwich violated at k={k}: {lower} <= {mid} <= {upper}"
        )));
    }
    Ok(Theorem1Depth {
        k,
        width,
        min_depth,
        sandwich_lower: lower,
        sandwich_mid: mid,
        sandwich_upper: upper,
    })
}

/// Divergence bound of a constant-width network at a given depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DbnBound {
    pub bound_nats: f64,
    pub coarseness: u64,
    /// Chosen window size and sharing depth, when a window exists.
    pub window: Option<(usize, usize)>,
    /// True when the value falls back to the top RBM's own bound.
    pub rbm_fallback: bool,
}

/// Evaluates the depth-dependent bound for `cards` at `depth` layers (all
/// layers sharing the visible state space). Falls back to the plain RBM
/// bound when no sharing window exists (single-unit spaces).
pub fn dbn_bound(cards: &[u32], depth: usize) -> Result<DbnBound> {
    if depth < 2 {
        return Err(Error::Domain("depth must be at least 2".into()));
    }
    let mut sorted = cards.to_vec();
    sorted.sort_unstable_by_key(|&q| std::cmp::Reverse(q));
    if let Some(choice) = best_plan_choice(&sorted, depth) {
        Ok(DbnBound {
            bound_nats: choice.bound_nats,
            coarseness: choice.coarseness,
            window: Some((choice.m, choice.s_len)),
            rbm_fallback: false,
        })
    } else {
        let space = StateSpace::new(cards)?;
        let r = rbm_universal_condition(&space, &space)?;
        Ok(DbnBound {
            bound_nats: r.bound_nats,
            coarseness: r.leftover,
            window: None,
            rbm_fallback: true,
        })
    }
}

/// Hidden-capacity divergence bound of an RBM (Λ-search over subsets).
pub fn rbm_bound(visible: &StateSpace, hidden: &StateSpace) -> Result<RbmUniversality> {
    rbm_universal_condition(visible, hidden)
}

/// Expected divergence from a symmetric-Dirichlet draw to a partition model
/// of coarseness `c`: `psi(a + 1) - psi(c a + 1) + ln c` nats.
pub fn dirichlet_expectation_bound(a: f64, c: u64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Domain(format!("concentration must be > 0, got {a}")));
    }
    if c == 0 {
        return Err(Error::Domain("coarseness must be >= 1".into()));
    }
    let cf = c as f64;
    Ok(digamma(a + 1.0) - digamma(cf * a + 1.0) + cf.ln())
}

/// Smallest depth at which the parameter count of a constant-`q`, width-`n`
/// network reaches the dimension `q^n - 1` of the target simplex.
pub fn depth_lower_bound(q: u32, width: usize) -> Result<usize> {
    if q < 2 || width == 0 {
        return Err(Error::Domain("need q >= 2 and width >= 1".into()));
    }
    let d = (width as u128) * (q as u128 - 1);
    let dim = (q as u128)
        .checked_pow(width as u32)
        .ok_or_else(|| Error::Resource("q^n overflows".into()))?
        - 1;
    // params(L) = (L-1) d (d+1) + d
    let needed = dim.saturating_sub(d);
    let steps = needed.div_ceil(d * (d + 1));
    Ok((1 + steps).max(2) as usize)
}

/// Reference value: the worst divergence to a single layer of `n`
/// independent `q`-ary units.
pub fn independence_max_divergence(q: u32, width: usize) -> f64 {
    (width as f64 - 1.0) * (q as f64).ln()
}

/// Display base for reports; values are stored in nats either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogBase {
    E,
    Two,
    /// Base `q` with `q` the largest visible cardinality.
    Q,
}

impl LogBase {
    fn divisor(&self, cards: &[u32]) -> f64 {
        match self {
            LogBase::E => 1.0,
            LogBase::Two => 2.0f64.ln(),
            LogBase::Q => (cards.iter().copied().max().unwrap_or(2) as f64).ln(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundEntry {
    pub name: String,
    /// Divergence-like values in nats; `None` for counts and depths.
    pub value_nats: Option<f64>,
    pub detail: String,
}

/// Every closed-form bound relevant to one architecture.
#[derive(Debug, Clone)]
pub struct BoundsReport {
    pub visible_cards: Vec<u32>,
    pub depth: Option<usize>,
    pub hidden_cards: Option<Vec<u32>>,
    pub dirichlet_a: Option<f64>,
    pub entries: Vec<BoundEntry>,
}

/// Builds the report for a visible space with either a network depth (all
/// layers equal) or an explicit hidden space (two layers), or both.
pub fn bounds_report(
    visible_cards: &[u32],
    depth: Option<usize>,
    hidden_cards: Option<&[u32]>,
    dirichlet_a: Option<f64>,
) -> Result<BoundsReport> {
    let visible = StateSpace::new(visible_cards)?;
    let mut entries = Vec::new();
    let uniform_q = visible_cards
        .windows(2)
        .all(|w| w[0] == w[1])
        .then(|| visible_cards[0]);

    let mut reference_coarseness: Option<u64> = None;

    if let Some(l) = depth {
        let b = dbn_bound(visible_cards, l)?;
        reference_coarseness = Some(b.coarseness);
        entries.push(BoundEntry {
            name: format!("dbn bound (depth {l})"),
            value_nats: Some(b.bound_nats),
            detail: match b.window {
                Some((m, s)) => format!("coarseness {}, window {m}, sharing {s}", b.coarseness),
                None => format!("coarseness {}, top-RBM fallback", b.coarseness),
            },
        });
    }
    let hidden = match hidden_cards {
        Some(h) => Some(StateSpace::new(h)?),
        None => depth.map(|_| visible.clone()),
    };
    if let Some(h) = &hidden {
        let r = rbm_bound(&visible, h)?;
        if reference_coarseness.is_none() {
            reference_coarseness = Some(r.leftover);
        }
        entries.push(BoundEntry {
            name: format!("rbm bound (hidden {h})"),
            value_nats: Some(r.bound_nats),
            detail: format!(
                "leftover {}, covered coordinates {:?}",
                r.leftover, r.covered
            ),
        });
    }
    if let Some(q) = uniform_q {
        let n = visible_cards.len();
        entries.push(BoundEntry {
            name: "independence-model max divergence".into(),
            value_nats: Some(independence_max_divergence(q, n)),
            detail: "single-layer reference".into(),
        });
        entries.push(BoundEntry {
            name: "parameter-count depth lower bound".into(),
            value_nats: None,
            detail: format!("depth >= {}", depth_lower_bound(q, n)?),
        });
        if q == 2 {
            // width of the form 2^(k-1) + k admits the binary depth formula
            for k in 1..=7u32 {
                let t = theorem1_depth(k)?;
                if t.width == n as u64 {
                    entries.push(BoundEntry {
                        name: format!("binary universal depth (k={k})"),
                        value_nats: None,
                        detail: format!(
                            "depth >= {} (sandwich {:.4} <= {} <= {:.4})",
                            t.min_depth, t.sandwich_lower, t.sandwich_mid, t.sandwich_upper
                        ),
                    });
                }
            }
        }
        if let Some(l) = depth {
            entries.push(BoundEntry {
                name: "parameter count".into(),
                value_nats: None,
                detail: format!("{}", param_count_uniform(q, n, l)),
            });
        }
    }
    if let (Some(a), Some(c)) = (dirichlet_a, reference_coarseness) {
        entries.push(BoundEntry {
            name: format!("expected divergence bound (Dir a={a}, c={c})"),
            value_nats: Some(dirichlet_expectation_bound(a, c)?),
            detail: "mean over Dirichlet targets".into(),
        });
    }

    Ok(BoundsReport {
        visible_cards: visible_cards.to_vec(),
        depth,
        hidden_cards: hidden_cards.map(<[u32]>::to_vec),
        dirichlet_a,
        entries,
    })
}

impl BoundsReport {
    /// Aligned text table; divergence values converted to `base` for display.
    pub fn render(&self, base: LogBase) -> String {
        let div = base.divisor(&self.visible_cards);
        let unit = match base {
            LogBase::E => "nats",
            LogBase::Two => "bits",
            LogBase::Q => "base-q",
        };
        let width = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .max()
            .unwrap_or(0);
        let mut out = format!("architecture {:?}\n", self.visible_cards);
        if let Some(l) = self.depth {
            out.push_str(&format!("depth        {l}\n"));
        }
        for e in &self.entries {
            match e.value_nats {
                Some(v) => out.push_str(&format!(
                    "{:width$}  {:>12.6} {unit}  [{}]\n",
                    e.name,
                    v / div,
                    e.detail
                )),
                None => out.push_str(&format!("{:width$}  {:>12}       [{}]\n", e.name, "-", e.detail)),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn digamma_known_values() {
        assert!((digamma(1.0) + EULER_GAMMA).abs() < 1e-13);
        assert!((digamma(2.0) - (1.0 - EULER_GAMMA)).abs() < 1e-13);
        assert!((digamma(0.5) + EULER_GAMMA + 2.0 * 2.0f64.ln()).abs() < 1e-13);
        // large-argument asymptotics: psi(x) ~ ln x - 1/(2x)
        let x = 1e8;
        assert!((digamma(x) - (x.ln() - 0.5 / x)).abs() < 1e-12);
    }

    #[test]
    fn theorem1_examples_and_sandwich() {
        let t1 = theorem1_depth(1).unwrap();
        assert_eq!((t1.width, t1.min_depth), (2, 3));
        let t2 = theorem1_depth(2).unwrap();
        assert_eq!((t2.width, t2.min_depth), (4, 5));
        let t3 = theorem1_depth(3).unwrap();
        assert_eq!((t3.width, t3.min_depth), (7, 17));
        for k in 1..=6 {
            let t = theorem1_depth(k).unwrap();
            assert!(t.sandwich_lower <= t.sandwich_mid && t.sandwich_mid <= t.sandwich_upper);
        }
        assert!(theorem1_depth(0).is_err());
    }

    #[test]
    fn dbn_bound_examples() {
        let b = dbn_bound(&[2, 2, 2], 5).unwrap();
        assert_eq!(b.bound_nats, 0.0);
        assert_eq!(b.coarseness, 1);

        let b = dbn_bound(&[2, 2, 2], 3).unwrap();
        assert!((b.bound_nats - 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(b.coarseness, 2);

        // q-ary width q^(k-1) + k turns universal at 2 + (q^(q^(k-1)) - 1)/(q - 1)
        let q = 2u32;
        let k = 2u32;
        let width = q.pow(k - 1) as usize + k as usize;
        let depth = 2 + (q.pow(q.pow(k - 1)) as usize - 1) / (q as usize - 1);
        let b = dbn_bound(&vec![q; width], depth).unwrap();
        assert_eq!(b.bound_nats, 0.0);
        let b = dbn_bound(&vec![q; width], depth - 1).unwrap();
        assert!(b.bound_nats > 0.0);
    }

    #[test]
    fn dbn_bound_single_unit_falls_back_to_the_rbm() {
        let b = dbn_bound(&[5], 4).unwrap();
        assert!(b.rbm_fallback);
        assert_eq!(b.bound_nats, 0.0); // one unit: the RBM already covers it
    }

    #[test]
    fn dbn_bound_monotone_in_depth() {
        let mut prev = f64::INFINITY;
        for depth in 2..=10 {
            let b = dbn_bound(&[2, 2, 2, 2], depth).unwrap();
            assert!(b.bound_nats <= prev + 1e-12);
            prev = b.bound_nats;
        }
    }

    #[test]
    fn rbm_bound_examples() {
        let v = StateSpace::new(&[2, 2, 2]).unwrap();
        let r = rbm_bound(&v, &StateSpace::new(&[2, 2, 2]).unwrap()).unwrap();
        assert_eq!(r.bound_nats, 0.0);
        let r = rbm_bound(&v, &StateSpace::new(&[2]).unwrap()).unwrap();
        assert!((r.bound_nats - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_expectation_bound_values() {
        assert_eq!(dirichlet_expectation_bound(3.7, 1).unwrap(), 0.0);
        let v = dirichlet_expectation_bound(1.0, 2).unwrap();
        assert!((v - (2.0f64.ln() - 0.5)).abs() < 1e-12);
        // psi(2) - psi(3) = -1/2 exactly, via the recurrence
        assert!(dirichlet_expectation_bound(1e6, 2).unwrap() < 1e-5);
        assert!(dirichlet_expectation_bound(0.0, 2).is_err());
        assert!(dirichlet_expectation_bound(1.0, 0).is_err());
    }

    #[test]
    fn dirichlet_expectation_bound_is_between_zero_and_log_c() {
        for c in [1u64, 2, 3, 4, 8] {
            for a in [0.05, 0.3, 1.0, 5.0, 100.0] {
                let v = dirichlet_expectation_bound(a, c).unwrap();
                assert!(v >= -1e-14, "a={a} c={c}: {v}");
                assert!(v <= (c as f64).ln() + 1e-14, "a={a} c={c}: {v}");
            }
        }
    }

    #[test]
    fn depth_lower_bound_examples() {
        assert_eq!(depth_lower_bound(2, 3).unwrap(), 2);
        assert_eq!(depth_lower_bound(2, 4).unwrap(), 2);
        // n = 10 binary: 1023 parameters needed, 110 gained per layer
        let l = depth_lower_bound(2, 10).unwrap();
        assert_eq!(l, 11);
        assert!(param_count_uniform(2, 10, l) >= (1 << 10) - 1);
        assert!(param_count_uniform(2, 10, l - 1) < (1 << 10) - 1);
    }

    #[test]
    fn report_renders_all_entries() {
        let report = bounds_report(&[2, 2, 2], Some(3), None, Some(0.5)).unwrap();
        let text = report.render(LogBase::E);
        assert!(text.contains("dbn bound"));
        assert!(text.contains("rbm bound"));
        assert!(text.contains("independence-model"));
        assert!(text.contains("expected divergence"));
        // base conversion rescales values
        let bits = report.render(LogBase::Two);
        assert!(bits.contains("bits"));
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn digamma_recurrence(x in 0.05f64..50.0) {
            let lhs = digamma(x + 1.0);
            let rhs = digamma(x) + 1.0 / x;
            prop_assert!((lhs - rhs).abs() < 1e-11, "x={x}: {lhs} vs {rhs}");
        }
    }
}
