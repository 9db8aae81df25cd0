//! Directed DBN layers as stochastic maps, single-unit conditional models,
//! and the star parameter construction used for probability sharing.
//!
//! A layer's conditional factorizes over output units: each unit applies an
//! independent softmax to an affine function of the input's one-hot encoding.
//! The synthesizers here produce three kinds of unit behavior at finite
//! sharpness `K`:
//!
//! * copy: reproduce one input coordinate near-deterministically;
//! * star: on a designated cylinder of input patterns emit a prescribed
//!   output distribution selected by one free input coordinate, and copy
//!   otherwise;
//! * combinations of the two across units, which realize simultaneous
//!   probability multi-sharing steps in a single layer.
//!
//! Dominance ordering of the finite surrogate: target parameters are bounded
//! by `max_norm`, guard penalties use `K0 = K * (1 + max_norm)`, and the
//! copy-coordinate penalties use `Kv = 10 * K0`.

use ndarray::{Array1, Array2};

use crate::distributions::Dist;
use crate::error::{Error, Result};
use crate::rbm::one_hot_matrix;
use crate::state_space::{CylinderSet, StateSpace};

/// Per-output-unit affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitParams {
    /// Interaction block, `(card - 1) x one_hot_dim(input)`.
    pub theta: Array2<f64>,
    /// Bias, length `card - 1`.
    pub bias: Array1<f64>,
}

/// Parameters of one directed layer: input space, output space, and one
/// affine block per output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    input: StateSpace,
    output: StateSpace,
    units: Vec<UnitParams>,
}

impl LayerParams {
    pub fn new(input: StateSpace, output: StateSpace, units: Vec<UnitParams>) -> Result<Self> {
        if units.len() != output.num_units() {
            return Err(Error::Schema(format!(
                "{} unit blocks for {} output units",
                units.len(),
                output.num_units()
            )));
        }
        let dh = input.one_hot_dim();
        for (i, u) in units.iter().enumerate() {
            let rows = output.card(i) as usize - 1;
            if u.theta.dim() != (rows, dh) || u.bias.len() != rows {
                return Err(Error::Schema(format!(
                    "unit {i}: block shape {:?}/{} does not match ({rows}, {dh})",
                    u.theta.dim(),
                    u.bias.len()
                )));
            }
            if u.theta.iter().chain(u.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Domain("layer parameters must be finite".into()));
            }
        }
        Ok(Self {
            input,
            output,
            units,
        })
    }

    pub fn zeros(input: StateSpace, output: StateSpace) -> Self {
        let dh = input.one_hot_dim();
        let units = (0..output.num_units())
            .map(|i| UnitParams {
                theta: Array2::zeros((output.card(i) as usize - 1, dh)),
                bias: Array1::zeros(output.card(i) as usize - 1),
            })
            .collect();
        Self {
            input,
            output,
            units,
        }
    }

    pub fn input(&self) -> &StateSpace {
        &self.input
    }

    pub fn output(&self) -> &StateSpace {
        &self.output
    }

    pub fn units(&self) -> &[UnitParams] {
        &self.units
    }

    pub fn units_mut(&mut self) -> &mut [UnitParams] {
        &mut self.units
    }

    pub fn param_count(&self) -> usize {
        self.units
            .iter()
            .map(|u| u.theta.len() + u.bias.len())
            .sum()
    }

    /// Distribution of output unit `i` given the input one-hot vector.
    fn unit_softmax(&self, i: usize, yoh: &[f64]) -> Vec<f64> {
        let u = &self.units[i];
        let card = self.output.card(i) as usize;
        let mut act = vec![0.0f64; card];
        for (v, a) in act.iter_mut().enumerate().skip(1) {
            let row = u.theta.row(v - 1);
            *a = row.iter().zip(yoh).map(|(&t, &y)| t * y).sum::<f64>() + u.bias[v - 1];
        }
        let m = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for a in &mut act {
            *a = (*a - m).exp();
            total += *a;
        }
        for a in &mut act {
            *a /= total;
        }
        act
    }

    /// Full conditional `p(. | y)` for the input state with flat index `y_idx`.
    pub fn conditional(&self, y_idx: usize) -> Result<Dist> {
        let y = self.input.unindex(y_idx);
        let yoh = self.input.one_hot(&y)?;
        let per_unit: Vec<Vec<f64>> = (0..self.output.num_units())
            .map(|i| self.unit_softmax(i, &yoh))
            .collect();
        let mass: Vec<f64> = self
            .output
            .states()
            .map(|x| {
                x.iter()
                    .enumerate()
                    .map(|(i, &v)| per_unit[i][v as usize])
                    .product()
            })
            .collect();
        Dist::from_weights(self.output.clone(), mass)
    }

    /// Per-unit softmax tables, each `input.size() x card(i)`.
    pub(crate) fn unit_tables(&self) -> Vec<Array2<f64>> {
        let yoh = one_hot_matrix(&self.input);
        let sy = self.input.size();
        (0..self.output.num_units())
            .map(|i| {
                let card = self.output.card(i) as usize;
                let mut t = Array2::zeros((sy, card));
                for y in 0..sy {
                    let row: Vec<f64> = yoh.row(y).iter().copied().collect();
                    let p = self.unit_softmax(i, &row);
                    for (v, &pv) in p.iter().enumerate() {
                        t[(y, v)] = pv;
                    }
                }
                t
            })
            .collect()
    }

    /// Row-stochastic matrix of the layer, `input.size() x output.size()`.
    pub fn conditional_table(&self) -> Result<Array2<f64>> {
        let sy = self.input.size();
        let sx = self.output.size();
        let unit_tables = self.unit_tables();
        let mut table = Array2::from_elem((sy, sx), 1.0);
        for (x, state) in self.output.states().enumerate() {
            for y in 0..sy {
                let mut p = 1.0;
                for (i, &v) in state.iter().enumerate() {
                    p *= unit_tables[i][(y, v as usize)];
                }
                table[(y, x)] = p;
            }
        }
        Ok(table)
    }

    /// Pushes a distribution through the layer's stochastic map.
    pub fn apply(&self, q: &Dist) -> Result<Dist> {
        q.space().expect_same(&self.input)?;
        let table = self.conditional_table()?;
        let mut mass = vec![0.0f64; self.output.size()];
        for (y, &qy) in q.mass().iter().enumerate() {
            if qy == 0.0 {
                continue;
            }
            for (x, m) in mass.iter_mut().enumerate() {
                *m += qy * table[(y, x)];
            }
        }
        Dist::from_weights(self.output.clone(), mass)
    }
}

/// Single-unit conditional model: output over a `card`-ary unit given the
/// whole input layer, parameterized by one matrix whose first column is the
/// bias.
#[derive(Debug, Clone, PartialEq)]
pub struct StarParams {
    input: StateSpace,
    v_card: u32,
    /// `(v_card - 1) x (1 + one_hot_dim(input))`; column 0 is the bias.
    pub theta: Array2<f64>,
}

impl StarParams {
    pub fn input(&self) -> &StateSpace {
        &self.input
    }

    pub fn v_card(&self) -> u32 {
        self.v_card
    }

    /// `p(. | y)` over the output values.
    pub fn conditional(&self, y: &[u32]) -> Result<Vec<f64>> {
        let yoh = self.input.one_hot(y)?;
        let card = self.v_card as usize;
        let mut act = vec![0.0f64; card];
        for (v, a) in act.iter_mut().enumerate().skip(1) {
            let row = self.theta.row(v - 1);
            *a = row[0]
                + row
                    .iter()
                    .skip(1)
                    .zip(&yoh)
                    .map(|(&t, &y)| t * y)
                    .sum::<f64>();
        }
        let m = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for a in &mut act {
            *a = (*a - m).exp();
            total += *a;
        }
        Ok(act.into_iter().map(|a| a / total).collect())
    }
}

/// Vertex-pointing direction in natural-parameter space with unique argmax
/// at `v`: +1 on `v`'s one-hot entry and -1 elsewhere; all -1 for `v = 0`.
fn vertex_direction(card: usize, v: usize) -> Vec<f64> {
    let mut dir = vec![-1.0; card - 1];
    if v > 0 {
        dir[v - 1] = 1.0;
    }
    dir
}

/// Natural parameters of a target distribution: zero entries clamped to
/// `exp(-sharpness)` and renormalized, then `ln(t_v / t_0)` per value.
fn target_natural_params(target: &[f64], sharpness: f64) -> Result<Vec<f64>> {
    if target.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Domain("target entries must be >= 0".into()));
    }
    let total: f64 = target.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("target sums to {total}, expected 1")));
    }
    let floor = (-sharpness).exp();
    let clamped: Vec<f64> = target
        .iter()
        .map(|&p| if p == 0.0 { floor } else { p })
        .collect();
    let renorm: f64 = clamped.iter().sum();
    Ok(clamped
        .iter()
        .skip(1)
        .map(|&p| (p / renorm).ln() - (clamped[0] / renorm).ln())
        .collect())
}

/// Core star builder shared by [`synth_star`] and [`synth_sharing_layer`].
///
/// `source` must fix `copy_coord` (at the value the sharing starts from) and
/// leave `select` free. Additional free coordinates of `source` are ignored
/// by the unit: the emitted distribution depends only on the select
/// coordinate. For inputs off the source pattern the unit copies
/// `copy_coord` near-deterministically.
fn star_unit_blocks(
    input: &StateSpace,
    copy_coord: usize,
    select: usize,
    source: &CylinderSet,
    targets: &[Vec<f64>],
    sharpness: f64,
) -> Result<(Array2<f64>, Array1<f64>)> {
    source.validate(input)?;
    if select == copy_coord {
        return Err(Error::Constraint(
            "select coordinate must differ from the sharing unit".into(),
        ));
    }
    if !source.free().contains(&select) {
        return Err(Error::Constraint(format!(
            "select coordinate {select} is not free in the source cylinder"
        )));
    }
    let copy_value = *source.fixed().get(&copy_coord).ok_or_else(|| {
        Error::Constraint(format!(
            "source cylinder must fix the sharing coordinate {copy_coord}"
        ))
    })?;
    let card = input.card(copy_coord) as usize;
    let d = card - 1;
    if targets.len() != input.card(select) as usize {
        return Err(Error::Schema(format!(
            "{} targets for select cardinality {}",
            targets.len(),
            input.card(select)
        )));
    }
    for t in targets {
        if t.len() != card {
            return Err(Error::Schema(format!(
                "target length {} does not match output cardinality {card}",
                t.len()
            )));
        }
    }

    let thetas: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| target_natural_params(t, sharpness))
        .collect::<Result<_>>()?;
    let max_norm = thetas
        .iter()
        .flat_map(|t| t.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let k0 = sharpness * (1.0 + max_norm);
    let kv = 10.0 * k0;

    let dh = input.one_hot_dim();
    let mut theta = Array2::zeros((d, dh));
    let mut bias = Array1::zeros(d);

    // select block: bias carries theta^0, columns the differences
    for (row, &v) in thetas[0].iter().enumerate() {
        bias[row] += v;
    }
    let soff = input.one_hot_offset(select);
    for w in 1..input.card(select) as usize {
        for row in 0..d {
            theta[(row, soff + w - 1)] = thetas[w][row] - thetas[0][row];
        }
    }

    // guard coordinates: any off-pattern value pushes toward the copy value
    let guard_dir = vertex_direction(card, copy_value as usize);
    for (&j, &fixed_value) in source.fixed() {
        if j == copy_coord {
            continue;
        }
        let joff = input.one_hot_offset(j);
        // pen(j, u) = [u != fixed] * k0 * guard_dir; column u carries
        // pen(j, u) - pen(j, 0) and the bias absorbs pen(j, 0)
        for u in 1..input.card(j) as u32 {
            let pen_u = if u == fixed_value { 0.0 } else { k0 };
            let pen_0 = if fixed_value == 0 { 0.0 } else { k0 };
            let scale = pen_u - pen_0;
            if scale != 0.0 {
                for row in 0..d {
                    theta[(row, joff + u as usize - 1)] += scale * guard_dir[row];
                }
            }
        }
        if fixed_value != 0 {
            for row in 0..d {
                bias[row] += k0 * guard_dir[row];
            }
        }
    }

    // copy coordinate: dominant vertex directions per off-source value
    let coff = input.one_hot_offset(copy_coord);
    let pen0: Vec<f64> = if copy_value == 0 {
        vec![0.0; d]
    } else {
        vertex_direction(card, 0).iter().map(|&x| kv * x).collect()
    };
    for row in 0..d {
        bias[row] += pen0[row];
    }
    for v in 1..card {
        let pen: Vec<f64> = if v as u32 == copy_value {
            vec![0.0; d]
        } else {
            vertex_direction(card, v).iter().map(|&x| kv * x).collect()
        };
        for row in 0..d {
            theta[(row, coff + v - 1)] += pen[row] - pen0[row];
        }
    }

    Ok((theta, bias))
}

/// Star parameters for a single output unit whose space equals the last
/// input unit's space. `z` must be a one-dimensional cylinder whose free
/// coordinate is not the last one; `targets[w]` is emitted when the free
/// coordinate has value `w`, and `delta` at the last input coordinate is
/// approached everywhere else.
pub fn synth_star(
    input: &StateSpace,
    z: &CylinderSet,
    targets: &[Vec<f64>],
    sharpness: f64,
) -> Result<StarParams> {
    let last = input.num_units() - 1;
    if z.free().len() != 1 {
        return Err(Error::Schema(
            "star cylinder must have exactly one free coordinate".into(),
        ));
    }
    let select = *z.free().iter().next().expect("one free coordinate");
    if select == last {
        return Err(Error::Constraint(
            "free coordinate must not be the output-defining last unit".into(),
        ));
    }
    let (theta, bias) = star_unit_blocks(input, last, select, z, targets, sharpness)?;
    let d = input.card(last) as usize - 1;
    let mut packed = Array2::zeros((d, 1 + input.one_hot_dim()));
    for row in 0..d {
        packed[(row, 0)] = bias[row];
        for col in 0..input.one_hot_dim() {
            packed[(row, col + 1)] = theta[(row, col)];
        }
    }
    Ok(StarParams {
        input: input.clone(),
        v_card: input.card(last),
        theta: packed,
    })
}

fn copy_unit_blocks(space: &StateSpace, unit: usize, sharpness: f64) -> (Array2<f64>, Array1<f64>) {
    let card = space.card(unit) as usize;
    let d = card - 1;
    let mut theta = Array2::zeros((d, space.one_hot_dim()));
    let dir0 = vertex_direction(card, 0);
    let bias = Array1::from_vec(dir0.iter().map(|&x| sharpness * x).collect());
    let off = space.one_hot_offset(unit);
    for v in 1..card {
        let dir = vertex_direction(card, v);
        for row in 0..d {
            theta[(row, off + v - 1)] = sharpness * (dir[row] - dir0[row]);
        }
    }
    (theta, bias)
}

/// Layer reproducing its input: output unit `i` copies input coordinate `i`
/// with gain `sharpness` (zero gain degenerates to the uniform map).
pub fn synth_copy_layer(space: &StateSpace, sharpness: f64) -> LayerParams {
    let units = (0..space.num_units())
        .map(|i| {
            let (theta, bias) = copy_unit_blocks(space, i, sharpness);
            UnitParams { theta, bias }
        })
        .collect();
    LayerParams {
        input: space.clone(),
        output: space.clone(),
        units,
    }
}

/// One probability multi-sharing assignment inside a layer: output `unit`
/// redistributes the source states of `source` according to `targets`,
/// selected by the value of the `select` coordinate.
#[derive(Debug, Clone)]
pub struct StarTask {
    pub unit: usize,
    pub source: CylinderSet,
    pub select: usize,
    /// One distribution over the unit's values per select-coordinate value.
    pub targets: Vec<Vec<f64>>,
}

/// Builds a layer realizing all `tasks` simultaneously while every other
/// output unit copies its input coordinate.
pub fn synth_sharing_layer(
    space: &StateSpace,
    tasks: &[StarTask],
    sharpness: f64,
) -> Result<LayerParams> {
    let n = space.num_units();
    let mut by_unit: Vec<Option<&StarTask>> = vec![None; n];
    for task in tasks {
        if task.unit >= n {
            return Err(Error::Schema(format!("unit {} out of range", task.unit)));
        }
        if by_unit[task.unit].is_some() {
            return Err(Error::Schema(format!(
                "two star tasks assigned to unit {}",
                task.unit
            )));
        }
        by_unit[task.unit] = Some(task);
    }
    for (i, a) in tasks.iter().enumerate() {
        for b in tasks.iter().skip(i + 1) {
            if !a.source.is_disjoint_with(&b.source) {
                return Err(Error::Constraint(format!(
                    "star sources of units {} and {} are not disjoint",
                    a.unit, b.unit
                )));
            }
        }
    }
    let units = (0..n)
        .map(|i| {
            let (theta, bias) = match by_unit[i] {
                Some(task) => star_unit_blocks(
                    space,
                    task.unit,
                    task.select,
                    &task.source,
                    &task.targets,
                    sharpness,
                )?,
                None => copy_unit_blocks(space, i, sharpness),
            };
            Ok(UnitParams { theta, bias })
        })
        .collect::<Result<Vec<_>>>()?;
    LayerParams::new(space.clone(), space.clone(), units)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(
        input: &StateSpace,
        output: &StateSpace,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> LayerParams {
        let dh = input.one_hot_dim();
        let units = (0..output.num_units())
            .map(|i| {
                let d = output.card(i) as usize - 1;
                UnitParams {
                    theta: Array2::from_shape_fn((d, dh), |_| rng.gen_range(-sigma..sigma)),
                    bias: Array1::from_shape_fn(d, |_| rng.gen_range(-sigma..sigma)),
                }
            })
            .collect();
        LayerParams::new(input.clone(), output.clone(), units).unwrap()
    }

    fn kl_vec(want: &[f64], got: &[f64]) -> f64 {
        want.iter()
            .zip(got)
            .filter(|(&w, _)| w > 0.0)
            .map(|(&w, &m)| w * (w / m).ln())
            .sum()
    }

    #[test]
    fn zero_parameters_give_uniform_conditional() {
        let input = StateSpace::new(&[2, 3]).unwrap();
        let output = StateSpace::new(&[2, 2]).unwrap();
        let layer = LayerParams::zeros(input.clone(), output.clone());
        for y in 0..input.size() {
            let cond = layer.conditional(y).unwrap();
            assert!(cond.linf_distance(&Dist::uniform(output.clone())) < 1e-15);
        }
    }

    #[test]
    fn single_binary_output_is_a_sigmoid_of_the_bias() {
        let input = StateSpace::new(&[2, 2]).unwrap();
        let output = StateSpace::new(&[2]).unwrap();
        for t in [-2.0f64, -0.3, 0.0, 1.7] {
            let layer = LayerParams::new(
                input.clone(),
                output.clone(),
                vec![UnitParams {
                    theta: Array2::zeros((1, 2)),
                    bias: Array1::from_vec(vec![t]),
                }],
            )
            .unwrap();
            let sigma = 1.0 / (1.0 + (-t).exp());
            for y in 0..input.size() {
                let cond = layer.conditional(y).unwrap();
                assert!((cond.prob(1) - sigma).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conditionals_normalize_for_random_parameters() {
        let input = StateSpace::new(&[3, 2]).unwrap();
        let output = StateSpace::new(&[2, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let layer = random_layer(&input, &output, 3.0, &mut rng);
            let table = layer.conditional_table().unwrap();
            for y in 0..input.size() {
                let total: f64 = (0..output.size()).map(|x| table[(y, x)]).sum();
                assert!((total - 1.0).abs() < 1e-12);
                assert!((0..output.size()).all(|x| table[(y, x)] >= 0.0));
            }
        }
    }

    #[test]
    fn apply_on_point_mass_matches_conditional() {
        let input = StateSpace::new(&[2, 2]).unwrap();
        let output = StateSpace::new(&[2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = random_layer(&input, &output, 2.0, &mut rng);
        for y in 0..input.size() {
            let state = input.unindex(y);
            let delta = Dist::point_mass(input.clone(), &state).unwrap();
            let pushed = layer.apply(&delta).unwrap();
            let cond = layer.conditional(y).unwrap();
            assert!(pushed.linf_distance(&cond) < 1e-15);
        }
    }

    #[test]
    fn apply_is_linear_in_the_input() {
        let input = StateSpace::new(&[2, 2]).unwrap();
        let output = StateSpace::new(&[2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let layer = random_layer(&input, &output, 1.5, &mut rng);
        let p = Dist::new(input.clone(), vec![0.1, 0.4, 0.3, 0.2]).unwrap();
        let q = Dist::new(input.clone(), vec![0.25; 4]).unwrap();
        let lambda = 0.35;
        let mix_mass: Vec<f64> = p
            .mass()
            .iter()
            .zip(q.mass())
            .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        let mix = Dist::new(input.clone(), mix_mass).unwrap();
        let lhs = layer.apply(&mix).unwrap();
        let pa = layer.apply(&p).unwrap();
        let qa = layer.apply(&q).unwrap();
        let rhs_mass: Vec<f64> = pa
            .mass()
            .iter()
            .zip(qa.mass())
            .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        let rhs = Dist::new(output.clone(), rhs_mass).unwrap();
        assert!(lhs.linf_distance(&rhs) < 1e-12);
    }

    #[test]
    fn copy_layer_reproduces_every_point_mass() {
        let space = StateSpace::new(&[2, 2, 2]).unwrap();
        let layer = synth_copy_layer(&space, 40.0);
        for y in 0..space.size() {
            let state = space.unindex(y);
            let delta = Dist::point_mass(space.clone(), &state).unwrap();
            let out = layer.apply(&delta).unwrap();
            let tv: f64 = out
                .mass()
                .iter()
                .zip(delta.mass())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 1e-6, "total variation {tv} at state {state:?}");
        }
    }

    #[test]
    fn copy_layer_zero_gain_degenerates_to_uniform() {
        let space = StateSpace::new(&[2, 3]).unwrap();
        let layer = synth_copy_layer(&space, 0.0);
        let out = layer
            .apply(&Dist::point_mass(space.clone(), &[1, 2]).unwrap())
            .unwrap();
        assert!(out.linf_distance(&Dist::uniform(space.clone())) < 1e-15);
    }

    #[test]
    fn two_copy_layers_compose_to_one() {
        let space = StateSpace::new(&[2, 2, 2]).unwrap();
        let layer = synth_copy_layer(&space, 40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = crate::distributions::sample_dirichlet(&space, 1.0, &mut rng).unwrap();
        let once = layer.apply(&p).unwrap();
        let twice = layer.apply(&once).unwrap();
        assert!(once.linf_distance(&twice) < 1e-5);
        assert!(p.linf_distance(&twice) < 1e-5);
    }

    #[test]
    fn star_with_delta_targets_is_the_trivial_map() {
        let input = StateSpace::new(&[2, 2]).unwrap();
        // Z = Y_1 x {0}: free coordinate 0, last coordinate fixed at 0
        let z = CylinderSet::from_fixed(2, &[(1, 0)]).unwrap();
        let delta0 = vec![1.0, 0.0];
        let star = synth_star(&input, &z, &[delta0.clone(), delta0], 20.0).unwrap();
        for y in input.states() {
            let p = star.conditional(&y).unwrap();
            let expect = y[1] as usize;
            let d = -p[expect].ln();
            assert!(d < 1e-8, "divergence {d} at input {y:?}");
        }
    }

    #[test]
    fn star_binary_two_targets() {
        let input = StateSpace::new(&[2, 2]).unwrap();
        let z = CylinderSet::from_fixed(2, &[(1, 0)]).unwrap();
        let q00 = vec![0.3, 0.7];
        let q10 = vec![0.9, 0.1];
        let star = synth_star(&input, &z, &[q00.clone(), q10.clone()], 50.0).unwrap();
        for (y, want) in [(vec![0u32, 0u32], &q00), (vec![1, 0], &q10)] {
            let p = star.conditional(&y).unwrap();
            assert!(kl_vec(want, &p) < 1e-4, "divergence at {y:?}");
        }
        for y in [vec![0u32, 1u32], vec![1, 1]] {
            let p = star.conditional(&y).unwrap();
            assert!(p[1] > 1.0 - 1e-4, "copy failed at {y:?}: {p:?}");
        }
    }

    #[test]
    fn star_ternary_exhaustive_contract() {
        let input = StateSpace::new(&[3, 2, 3]).unwrap();
        // Z frees coordinate 0; coordinates 1 and 2 fixed at (1, 2)
        let z = CylinderSet::from_fixed(3, &[(1, 1), (2, 2)]).unwrap();
        let targets = vec![
            vec![0.2, 0.5, 0.3],
            vec![0.7, 0.1, 0.2],
            vec![0.05, 0.05, 0.9],
        ];
        let star = synth_star(&input, &z, &targets, 50.0).unwrap();
        for y in input.states() {
            let p = star.conditional(&y).unwrap();
            if z.contains(&y) {
                let want = &targets[y[0] as usize];
                assert!(kl_vec(want, &p) < 1e-4, "divergence at {y:?}");
            } else {
                assert!(p[y[2] as usize] > 1.0 - 1e-4, "copy failed at {y:?}");
            }
        }
    }

    #[test]
    fn star_error_decays_with_sharpness() {
        let input = StateSpace::new(&[2, 2]).unwrap();
        let z = CylinderSet::from_fixed(2, &[(1, 0)]).unwrap();
        let targets = vec![vec![0.3, 0.7], vec![0.9, 0.1]];
        let mut prev = f64::INFINITY;
        for k in [20.0, 30.0, 40.0, 50.0] {
            let star = synth_star(&input, &z, &targets, k).unwrap();
            let mut worst: f64 = 0.0;
            for y in input.states() {
                let p = star.conditional(&y).unwrap();
                let want: Vec<f64> = if z.contains(&y) {
                    targets[y[0] as usize].clone()
                } else {
                    let mut d = vec![0.0; 2];
                    d[y[1] as usize] = 1.0;
                    d
                };
                worst = worst.max(kl_vec(&want, &p));
            }
            assert!(worst <= prev + 1e-9, "error grew at sharpness {k}");
            prev = worst;
        }
    }

    #[test]
    fn star_rejects_bad_shapes() {
        let input = StateSpace::new(&[2, 2]).unwrap();
        // free coordinate equals the last unit
        let z = CylinderSet::from_fixed(2, &[(0, 0)]).unwrap();
        assert!(matches!(
            synth_star(&input, &z, &[vec![1.0, 0.0], vec![1.0, 0.0]], 20.0),
            Err(Error::Constraint(_))
        ));
        // a two-dimensional cylinder is not a valid public star argument
        let z2 = CylinderSet::from_fixed(2, &[]).unwrap();
        assert!(matches!(
            synth_star(&input, &z2, &[vec![1.0, 0.0], vec![1.0, 0.0]], 20.0),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn sharing_layer_without_tasks_equals_copy_layer() {
        let space = StateSpace::new(&[2, 3]).unwrap();
        let a = synth_sharing_layer(&space, &[], 30.0).unwrap();
        let b = synth_copy_layer(&space, 30.0);
        assert_eq!(a, b);
    }

    #[test]
    fn sharing_layer_splits_mass_from_one_source() {
        // move mass from (0,0) across coordinate 0 with split (0.4, 0.6)
        let space = StateSpace::new(&[2, 2]).unwrap();
        let task = StarTask {
            unit: 0,
            source: CylinderSet::from_fixed(2, &[(0, 0)]).unwrap(),
            select: 1,
            targets: vec![vec![0.4, 0.6], vec![1.0, 0.0]],
        };
        let layer = synth_sharing_layer(&space, &[task], 50.0).unwrap();
        let input = Dist::point_mass(space.clone(), &[0, 0]).unwrap();
        let out = layer.apply(&input).unwrap();
        let want = Dist::new(space.clone(), vec![0.4, 0.0, 0.6, 0.0]).unwrap();
        assert!(out.linf_distance(&want) < 1e-4);
    }

    #[test]
    fn sharing_layer_three_simultaneous_multi_sharing_steps() {
        // one star on the 4-ary unit of {0,1,2} x {0,1,2,3} realizes three
        // multi-sharing steps at once: each source state (u, 0) spreads over
        // its whole row, so a 3-point support reaches any prescribed
        // 12-state distribution with positive row masses.
        let space = StateSpace::new(&[3, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let raw: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let want = Dist::new(space.clone(), raw.iter().map(|&x| x / total).collect()).unwrap();

        let mut row_mass = [0.0f64; 3];
        for u in 0..3usize {
            for v in 0..4usize {
                row_mass[u] += want.prob(space.index(&[u as u32, v as u32]).unwrap());
            }
        }
        let targets: Vec<Vec<f64>> = (0..3)
            .map(|u| {
                (0..4)
                    .map(|v| want.prob(space.index(&[u as u32, v as u32]).unwrap()) / row_mass[u])
                    .collect()
            })
            .collect();
        let task = StarTask {
            unit: 1,
            source: CylinderSet::from_fixed(2, &[(1, 0)]).unwrap(),
            select: 0,
            targets,
        };
        let layer = synth_sharing_layer(&space, &[task], 50.0).unwrap();

        let mut input_mass = vec![0.0; 12];
        for u in 0..3usize {
            input_mass[space.index(&[u as u32, 0]).unwrap()] = row_mass[u];
        }
        let input = Dist::new(space.clone(), input_mass).unwrap();
        let out = layer.apply(&input).unwrap();
        assert!(out.linf_distance(&want) < 1e-4);
        // mass accounting: each row keeps its planned mass
        for u in 0..3usize {
            let got: f64 = (0..4)
                .map(|v| out.prob(space.index(&[u as u32, v as u32]).unwrap()))
                .sum();
            assert!((got - row_mass[u]).abs() < 1e-4);
        }
    }

    #[test]
    fn sharing_layer_rejects_conflicts() {
        let space = StateSpace::new(&[2, 2, 2]).unwrap();
        let task = |unit: usize, fixed: &[(usize, u32)], select: usize| StarTask {
            unit,
            source: CylinderSet::from_fixed(3, fixed).unwrap(),
            select,
            targets: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        };
        // two tasks on one unit
        let err = synth_sharing_layer(
            &space,
            &[task(0, &[(0, 0), (1, 0)], 2), task(0, &[(0, 0), (1, 1)], 2)],
            20.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        // overlapping sources on different units
        let err = synth_sharing_layer(
            &space,
            &[task(0, &[(0, 0), (1, 0)], 2), task(1, &[(1, 0), (0, 0)], 2)],
            20.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Constraint(_)));
    }

    #[test]
    fn sharing_layer_with_dont_care_coordinate() {
        // the source frees coordinate 1 beyond the select coordinate 2: the
        // split applies identically across the ignored coordinate's values
        let space = StateSpace::new(&[2, 2, 2]).unwrap();
        let targets = vec![vec![0.25, 0.75], vec![0.8, 0.2]];
        let task = StarTask {
            unit: 0,
            source: CylinderSet::from_fixed(3, &[(0, 0)]).unwrap(),
            select: 2,
            targets: targets.clone(),
        };
        let layer = synth_sharing_layer(&space, &[task], 50.0).unwrap();
        for ignored in 0..2u32 {
            for sel in 0..2u32 {
                let input = Dist::point_mass(space.clone(), &[0, ignored, sel]).unwrap();
                let out = layer.apply(&input).unwrap();
                for v in 0..2u32 {
                    let idx = space.index(&[v, ignored, sel]).unwrap();
                    assert!((out.prob(idx) - targets[sel as usize][v as usize]).abs() < 1e-4);
                }
            }
        }
    }
}
