//! Exact maximum-likelihood training by full enumeration, contrastive
//! divergence with blocked Gibbs sweeps over categorical units, and the
//! combined warm-start protocol.
//!
//! The exact phase ascends the data log-likelihood with a backtracking line
//! search, so the divergence to the data distribution never increases across
//! iterations. Contrastive divergence provides a cheap warm start; deep
//! networks can warm-start with greedy layer-wise pretraining instead.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditional_layers::{LayerParams, UnitParams};
use crate::dbn::DbnParams;
use crate::distributions::{kl, Dist};
use crate::error::{Error, Result};
use crate::rbm::{one_hot_matrix, RbmParams};
use crate::state_space::StateSpace;

/// Training phases to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMethod {
    /// Contrastive divergence only (greedy pretraining for deep networks).
    Cd,
    /// Exact-gradient ascent from a random initialization.
    ExactMl,
    /// Contrastive-divergence warm start followed by exact-gradient ascent.
    CdThenMl,
}

/// Hyperparameters for [`train_rbm`] and [`train_dbn`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: TrainMethod,
    /// Gibbs sweeps per contrastive-divergence update.
    pub cd_k: usize,
    /// Number of contrastive-divergence updates.
    pub cd_epochs: usize,
    pub cd_learning_rate: f64,
    /// States drawn from the data distribution per update.
    pub batch_size: usize,
    pub ml_max_iters: usize,
    /// Stop the exact phase when the gradient sup-norm falls below this.
    pub ml_grad_tol: f64,
    pub restarts: usize,
    /// Standard deviation of the Gaussian parameter initialization.
    pub init_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: TrainMethod::CdThenMl,
            cd_k: 1,
            cd_epochs: 200,
            cd_learning_rate: 0.05,
            batch_size: 100,
            ml_max_iters: 5000,
            ml_grad_tol: 1e-7,
            restarts: 5,
            init_sigma: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cd_k == 0 {
            return Err(Error::Domain("cd_k must be >= 1".into()));
        }
        if self.cd_learning_rate <= 0.0 {
            return Err(Error::Domain("learning rate must be > 0".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Domain("restarts must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a master seed and a stream index.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_add(0x1234_5678_9abc_def0)))
}

// --- exact RBM gradient -----------------------------------------------------

/// Log-likelihood gradient of an RBM, one block per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub c: Array1<f64>,
}

impl RbmGrad {
    pub fn sup_norm(&self) -> f64 {
        self.w
            .iter()
            .chain(self.b.iter())
            .chain(self.c.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// Hidden-given-visible conditional table `p(y | x)`, rows indexed by
/// visible state.
fn hidden_given_visible(params: &RbmParams) -> Array2<f64> {
    let e = params.energy_table();
    let mut t = e;
    for mut row in t.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    t
}

/// Exact gradient of `sum_x data(x) ln p(x)`: data expectations of the
/// sufficient statistics minus model expectations, both by enumeration.
pub fn exact_ml_gradient(params: &RbmParams, data: &Dist) -> Result<RbmGrad> {
    data.space().expect_same(params.visible())?;
    let xoh = one_hot_matrix(params.visible());
    let yoh = one_hot_matrix(params.hidden());
    let joint = params.joint()?;
    let sy = params.hidden().size();
    let model = Array2::from_shape_fn((params.visible().size(), sy), |(x, y)| {
        joint.prob(x * sy + y)
    });
    let posterior = hidden_given_visible(params);
    let mut diff = posterior;
    for ((x, _), v) in diff.indexed_iter_mut() {
        *v *= data.prob(x);
    }
    diff -= &model;
    let w = xoh.t().dot(&diff).dot(&yoh);
    let b = xoh.t().dot(&diff.sum_axis(Axis(1)));
    let c = yoh.t().dot(&diff.sum_axis(Axis(0)));
    Ok(RbmGrad { w, b, c })
}

/// `sum_x data(x) ln p(x)` with the partition function computed exactly.
pub fn rbm_log_likelihood(params: &RbmParams, data: &Dist) -> Result<f64> {
    data.space().expect_same(params.visible())?;
    let marg = params.visible_marginal_factorized()?;
    Ok(data
        .mass()
        .iter()
        .zip(marg.mass())
        .filter(|(&d, _)| d > 0.0)
        .map(|(&d, &m)| d * m.ln())
        .sum())
}

// --- blocked Gibbs sampling -------------------------------------------------

fn sample_unit<R: Rng + ?Sized>(activations: &[f64], rng: &mut R) -> u32 {
    // softmax over {0} with implicit activation 0 plus the given slots
    let m = activations.iter().cloned().fold(0.0f64, f64::max);
    let mut weights = Vec::with_capacity(activations.len() + 1);
    weights.push((-m).exp());
    let mut total = weights[0];
    for &a in activations {
        let w = (a - m).exp();
        weights.push(w);
        total += w;
    }
    let mut r = rng.gen::<f64>() * total;
    for (v, &w) in weights.iter().enumerate() {
        r -= w;
        if r <= 0.0 {
            return v as u32;
        }
    }
    (weights.len() - 1) as u32
}

/// Samples hidden unit values given the visible state with flat index `x`.
pub fn sample_hidden_given_visible<R: Rng + ?Sized>(
    params: &RbmParams,
    x_idx: usize,
    rng: &mut R,
) -> Vec<u32> {
    let xstate = params.visible().unindex(x_idx);
    let xoh = params.visible().one_hot(&xstate).expect("state is valid");
    let hidden = params.hidden();
    let mut y = Vec::with_capacity(hidden.num_units());
    for j in 0..hidden.num_units() {
        let off = hidden.one_hot_offset(j);
        let width = hidden.card(j) as usize - 1;
        let acts: Vec<f64> = (0..width)
            .map(|v| {
                let col = off + v;
                xoh.iter()
                    .zip(params.w.column(col))
                    .map(|(&x, &w)| x * w)
                    .sum::<f64>()
                    + params.c[col]
            })
            .collect();
        y.push(sample_unit(&acts, rng));
    }
    y
}

/// Samples a visible state (flat index) given hidden unit values.
pub fn sample_visible_given_hidden<R: Rng + ?Sized>(
    params: &RbmParams,
    y_state: &[u32],
    rng: &mut R,
) -> usize {
    let yoh = params.hidden().one_hot(y_state).expect("state is valid");
    let visible = params.visible();
    let mut idx = 0usize;
    for i in 0..visible.num_units() {
        let off = visible.one_hot_offset(i);
        let width = visible.card(i) as usize - 1;
        let acts: Vec<f64> = (0..width)
            .map(|v| {
                let row = off + v;
                params
                    .w
                    .row(row)
                    .iter()
                    .zip(&yoh)
                    .map(|(&w, &y)| w * y)
                    .sum::<f64>()
                    + params.b[row]
            })
            .collect();
        let value = sample_unit(&acts, rng);
        idx += value as usize * visible.stride(i);
    }
    idx
}

/// One blocked sweep: hidden given visible, then visible given hidden.
pub fn gibbs_sweep<R: Rng + ?Sized>(params: &RbmParams, x_idx: usize, rng: &mut R) -> usize {
    let y = sample_hidden_given_visible(params, x_idx, rng);
    sample_visible_given_hidden(params, &y, rng)
}

/// Expected hidden one-hot statistics given a visible state.
fn hidden_expectation(params: &RbmParams, x_idx: usize) -> Array1<f64> {
    let xstate = params.visible().unindex(x_idx);
    let xoh = params.visible().one_hot(&xstate).expect("state is valid");
    let hidden = params.hidden();
    let mut e = Array1::zeros(hidden.one_hot_dim());
    for j in 0..hidden.num_units() {
        let off = hidden.one_hot_offset(j);
        let width = hidden.card(j) as usize - 1;
        let acts: Vec<f64> = (0..width)
            .map(|v| {
                let col = off + v;
                xoh.iter()
                    .zip(params.w.column(col))
                    .map(|(&x, &w)| x * w)
                    .sum::<f64>()
                    + params.c[col]
            })
            .collect();
        let m = acts.iter().cloned().fold(0.0f64, f64::max);
        let mut total = (-m).exp();
        let mut exps = Vec::with_capacity(width);
        for &a in &acts {
            let w = (a - m).exp();
            exps.push(w);
            total += w;
        }
        for (v, w) in exps.into_iter().enumerate() {
            e[off + v] = w / total;
        }
    }
    e
}

/// One CD-k update on a batch of visible states: positive statistics from
/// the data with expected hidden units, negative statistics from `k`
/// alternating blocked Gibbs sweeps.
pub fn cd_update<R: Rng + ?Sized>(
    params: &RbmParams,
    batch: &[usize],
    k: usize,
    learning_rate: f64,
    rng: &mut R,
) -> Result<RbmParams> {
    if k == 0 {
        return Err(Error::Domain("cd_k must be >= 1".into()));
    }
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let visible = params.visible();
    let (dv, dh) = (visible.one_hot_dim(), params.hidden().one_hot_dim());
    let mut gw: Array2<f64> = Array2::zeros((dv, dh));
    let mut gb: Array1<f64> = Array1::zeros(dv);
    let mut gc: Array1<f64> = Array1::zeros(dh);
    for &x0 in batch {
        let xs0 = visible.unindex(x0);
        let xoh0 = Array1::from_vec(visible.one_hot(&xs0)?);
        let ph0 = hidden_expectation(params, x0);

        let mut xk = x0;
        for _ in 0..k {
            xk = gibbs_sweep(params, xk, rng);
        }
        let xsk = visible.unindex(xk);
        let xohk = Array1::from_vec(visible.one_hot(&xsk)?);
        let phk = hidden_expectation(params, xk);

        for i in 0..dv {
            for j in 0..dh {
                gw[(i, j)] += xoh0[i] * ph0[j] - xohk[i] * phk[j];
            }
        }
        gb += &(&xoh0 - &xohk);
        gc += &(&ph0 - &phk);
    }
    let scale = learning_rate / batch.len() as f64;
    RbmParams::new(
        visible.clone(),
        params.hidden().clone(),
        &params.w + &(gw * scale),
        &params.b + &(gb * scale),
        &params.c + &(gc * scale),
    )
}

// --- line-search ascent -------------------------------------------------------

/// Gradient ascent with a backtracking Armijo line search. Returns the
/// final point and the objective trace (one entry per accepted step).
fn ascend(
    theta0: Vec<f64>,
    objective: &dyn Fn(&[f64]) -> f64,
    gradient: &dyn Fn(&[f64]) -> Vec<f64>,
    max_iters: usize,
    grad_tol: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut theta = theta0;
    let mut trace = vec![objective(&theta)];
    let mut step = 1.0f64;
    for _ in 0..max_iters {
        let g = gradient(&theta);
        let sup = g.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        if sup < grad_tol {
            break;
        }
        let f0 = *trace.last().expect("trace is non-empty");
        let g2: f64 = g.iter().map(|v| v * v).sum();
        let mut t = step * 2.0;
        let mut accepted = false;
        while t > 1e-14 {
            let trial: Vec<f64> = theta.iter().zip(&g).map(|(&p, &d)| p + t * d).collect();
            let f1 = objective(&trial);
            if f1 >= f0 + 1e-4 * t * g2 {
                theta = trial;
                trace.push(f1);
                step = t;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break; // no ascent direction step acceptable at this scale
        }
    }
    (theta, trace)
}

fn pack_rbm(params: &RbmParams) -> Vec<f64> {
    params
        .w
        .iter()
        .chain(params.b.iter())
        .chain(params.c.iter())
        .copied()
        .collect()
}

fn unpack_rbm(template: &RbmParams, theta: &[f64]) -> RbmParams {
    let (dv, dh) = (template.w.nrows(), template.w.ncols());
    let w = Array2::from_shape_vec((dv, dh), theta[..dv * dh].to_vec()).expect("shape matches");
    let b = Array1::from_vec(theta[dv * dh..dv * dh + dv].to_vec());
    let c = Array1::from_vec(theta[dv * dh + dv..].to_vec());
    RbmParams::new(
        template.visible().clone(),
        template.hidden().clone(),
        w,
        b,
        c,
    )
    .expect("shapes preserved")
}

/// Result of a training run: best parameters, final divergence to the data,
/// and the divergence trace of the winning restart's exact phase.
#[derive(Debug, Clone)]
pub struct TrainedRbm {
    pub params: RbmParams,
    pub divergence_nats: f64,
    pub trace: Vec<f64>,
}

fn data_entropy(data: &Dist) -> f64 {
    -data
        .mass()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Trains an RBM on an exact data distribution. Runs `restarts` independent
/// seeded runs (optional CD warm start, then exact ascent) and returns the
/// one with the smallest final divergence `D(data || model)`.
pub fn train_rbm(
    visible: &StateSpace,
    hidden: &StateSpace,
    data: &Dist,
    cfg: &TrainConfig,
) -> Result<TrainedRbm> {
    cfg.validate()?;
    data.space().expect_same(visible)?;
    let entropy = data_entropy(data);
    let mut best: Option<TrainedRbm> = None;
    for restart in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, restart as u64));
        let mut params = RbmParams::random(visible.clone(), hidden.clone(), cfg.init_sigma, &mut rng);

        if matches!(cfg.method, TrainMethod::Cd | TrainMethod::CdThenMl) {
            let sampler = data.sampler();
            for _ in 0..cfg.cd_epochs {
                let batch: Vec<usize> = (0..cfg.batch_size)
                    .map(|_| sampler.sample(&mut rng))
                    .collect();
                params = cd_update(&params, &batch, cfg.cd_k, cfg.cd_learning_rate, &mut rng)?;
            }
        }

        let mut trace = Vec::new();
        if matches!(cfg.method, TrainMethod::ExactMl | TrainMethod::CdThenMl) {
            let template = params.clone();
            let data_for_obj = data.clone();
            let objective = move |theta: &[f64]| {
                let p = unpack_rbm(&template, theta);
                rbm_log_likelihood(&p, &data_for_obj).expect("spaces match")
            };
            let template = params.clone();
            let data_for_grad = data.clone();
            let gradient = move |theta: &[f64]| {
                let p = unpack_rbm(&template, theta);
                let g = exact_ml_gradient(&p, &data_for_grad).expect("spaces match");
                g.w.iter()
                    .chain(g.b.iter())
                    .chain(g.c.iter())
                    .copied()
                    .collect()
            };
            let (theta, ll_trace) = ascend(
                pack_rbm(&params),
                &objective,
                &gradient,
                cfg.ml_max_iters,
                cfg.ml_grad_tol,
            );
            params = unpack_rbm(&params, &theta);
            trace = ll_trace.into_iter().map(|ll| -entropy - ll).collect();
        }

        let divergence = kl(data, &params.visible_marginal_factorized()?)?;
        if best
            .as_ref()
            .map(|b| divergence < b.divergence_nats)
            .unwrap_or(true)
        {
            best = Some(TrainedRbm {
                params,
                divergence_nats: divergence,
                trace,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

// --- deep network training ----------------------------------------------------

/// Log-likelihood gradient of a full network.
#[derive(Debug, Clone)]
pub struct DbnGrad {
    pub rbm: RbmGrad,
    /// `layers[i][u]` holds `(theta, bias)` gradients for layer `i`, unit `u`.
    pub layers: Vec<Vec<(Array2<f64>, Array1<f64>)>>,
}

impl DbnGrad {
    pub fn sup_norm(&self) -> f64 {
        let mut m = self.rbm.sup_norm();
        for layer in &self.layers {
            for (t, b) in layer {
                m = t.iter().chain(b.iter()).fold(m, |acc, &v| acc.max(v.abs()));
            }
        }
        m
    }
}

pub fn dbn_log_likelihood(params: &DbnParams, data: &Dist) -> Result<f64> {
    data.space().expect_same(params.visible_space())?;
    let marg = params.visible_marginal()?;
    Ok(data
        .mass()
        .iter()
        .zip(marg.mass())
        .filter(|(&d, _)| d > 0.0)
        .map(|(&d, &m)| d * m.ln())
        .sum())
}

/// Exact network gradient over the fully enumerated joint of all layers.
pub fn exact_dbn_gradient(params: &DbnParams, data: &Dist) -> Result<DbnGrad> {
    data.space().expect_same(params.visible_space())?;
    let depth = params.depth();
    let spaces = params.spaces();
    let sizes: Vec<usize> = spaces.iter().map(StateSpace::size).collect();
    let joint = params.joint()?;

    // marginal of the visible layer from the same joint
    let tail: usize = sizes[1..].iter().product();
    let marg: Vec<f64> = joint.mass().chunks(tail).map(|c| c.iter().sum()).collect();

    // posterior-weighted pair tables: visible-layer weights for the RBM pair
    // and (input, output) weights for every directed layer
    let top = depth - 2;
    let mut rbm_pos: Array2<f64> = Array2::zeros((sizes[top], sizes[top + 1]));
    let mut layer_pos: Vec<Array2<f64>> = (0..depth - 2)
        .map(|i| Array2::zeros((sizes[i + 1], sizes[i])))
        .collect();

    let mut layer_idx = vec![0usize; depth];
    for &p in joint.mass() {
        if p > 0.0 {
            let x0 = layer_idx[0];
            if data.prob(x0) > 0.0 {
                let w = data.prob(x0) * p / marg[x0];
                rbm_pos[(layer_idx[top], layer_idx[top + 1])] += w;
                for (i, table) in layer_pos.iter_mut().enumerate() {
                    table[(layer_idx[i + 1], layer_idx[i])] += w;
                }
            }
        }
        let mut pos = depth;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            layer_idx[pos] += 1;
            if layer_idx[pos] < sizes[pos] {
                break;
            }
            layer_idx[pos] = 0;
        }
    }

    // RBM block: posterior pair expectation minus the RBM's own joint
    let rbm = params.rbm();
    let xoh = one_hot_matrix(rbm.visible());
    let yoh = one_hot_matrix(rbm.hidden());
    let rbm_joint = rbm.joint()?;
    let sy = rbm.hidden().size();
    let mut diff = rbm_pos;
    for ((x, y), v) in diff.indexed_iter_mut() {
        *v -= rbm_joint.prob(x * sy + y);
    }
    let rbm_grad = RbmGrad {
        w: xoh.t().dot(&diff).dot(&yoh),
        b: xoh.t().dot(&diff.sum_axis(Axis(1))),
        c: yoh.t().dot(&diff.sum_axis(Axis(0))),
    };

    // directed layers: per unit, observed one-hot minus conditional softmax
    let mut layer_grads = Vec::with_capacity(depth - 2);
    for (i, layer) in params.layers().iter().enumerate() {
        let input = layer.input();
        let output = layer.output();
        let yoh_in = one_hot_matrix(input);
        let unit_tables = layer.unit_tables();
        let pair = &layer_pos[i];
        let mut per_unit = Vec::with_capacity(output.num_units());
        for u in 0..output.num_units() {
            let card = output.card(u) as usize;
            // observed value counts per input state
            let mut observed = Array2::zeros((input.size(), card));
            for (x, state) in output.states().enumerate() {
                let v = state[u] as usize;
                for y in 0..input.size() {
                    observed[(y, v)] += pair[(y, x)];
                }
            }
            let row_mass = observed.sum_axis(Axis(1));
            let expected = {
                let mut e = unit_tables[u].clone();
                for ((y, _), val) in e.indexed_iter_mut() {
                    *val *= row_mass[y];
                }
                e
            };
            let resid = &observed - &expected; // (sy, card)
            let active = resid.slice(ndarray::s![.., 1..]);
            let theta = active.t().dot(&yoh_in);
            let bias = active.sum_axis(Axis(0));
            per_unit.push((theta, bias.to_owned()));
        }
        layer_grads.push(per_unit);
    }

    Ok(DbnGrad {
        rbm: rbm_grad,
        layers: layer_grads,
    })
}

fn pack_dbn(params: &DbnParams) -> Vec<f64> {
    let mut v = pack_rbm(params.rbm());
    for layer in params.layers() {
        for unit in layer.units() {
            v.extend(unit.theta.iter());
            v.extend(unit.bias.iter());
        }
    }
    v
}

fn unpack_dbn(template: &DbnParams, theta: &[f64]) -> DbnParams {
    let rbm_len = template.rbm().param_count();
    let rbm = unpack_rbm(template.rbm(), &theta[..rbm_len]);
    let mut offset = rbm_len;
    let mut layers: Vec<LayerParams> = Vec::with_capacity(template.layers().len());
    for layer in template.layers() {
        let mut units: Vec<UnitParams> = Vec::with_capacity(layer.units().len());
        for u in layer.units() {
            let (rows, cols) = u.theta.dim();
            let theta_block =
                Array2::from_shape_vec((rows, cols), theta[offset..offset + rows * cols].to_vec())
                    .expect("shape matches");
            offset += rows * cols;
            let bias = Array1::from_vec(theta[offset..offset + rows].to_vec());
            offset += rows;
            units.push(UnitParams {
                theta: theta_block,
                bias,
            });
        }
        layers.push(
            LayerParams::new(layer.input().clone(), layer.output().clone(), units)
                .expect("shapes preserved"),
        );
    }
    DbnParams::new(template.spaces().to_vec(), rbm, layers).expect("shapes preserved")
}

fn pack_dbn_grad(g: &DbnGrad) -> Vec<f64> {
    let mut v: Vec<f64> = g
        .rbm
        .w
        .iter()
        .chain(g.rbm.b.iter())
        .chain(g.rbm.c.iter())
        .copied()
        .collect();
    for layer in &g.layers {
        for (t, b) in layer {
            v.extend(t.iter());
            v.extend(b.iter());
        }
    }
    v
}

/// Directed layer reading out a trained RBM's visible-given-hidden
/// conditional, used for greedy layer-wise warm starts.
fn rbm_as_directed_layer(rbm: &RbmParams) -> LayerParams {
    let visible = rbm.visible();
    let units = (0..visible.num_units())
        .map(|u| {
            let off = visible.one_hot_offset(u);
            let rows = visible.card(u) as usize - 1;
            let theta = Array2::from_shape_fn((rows, rbm.hidden().one_hot_dim()), |(r, c)| {
                rbm.w[(off + r, c)]
            });
            let bias = Array1::from_shape_fn(rows, |r| rbm.b[off + r]);
            UnitParams { theta, bias }
        })
        .collect();
    LayerParams::new(rbm.hidden().clone(), visible.clone(), units).expect("shapes match")
}

/// Pushes a data distribution up through a trained RBM: `sum_x d(x) p(y|x)`.
fn hidden_marginal_given(rbm: &RbmParams, data: &Dist) -> Result<Dist> {
    let posterior = hidden_given_visible(rbm);
    let mut mass = vec![0.0f64; rbm.hidden().size()];
    for (x, &d) in data.mass().iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        for (y, m) in mass.iter_mut().enumerate() {
            *m += d * posterior[(x, y)];
        }
    }
    Dist::from_weights(rbm.hidden().clone(), mass)
}

/// Greedy layer-wise warm start: CD-train an RBM per directed layer while
/// lifting the data upward, then CD-train the top RBM.
fn greedy_pretrain(
    space: &StateSpace,
    depth: usize,
    data: &Dist,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<DbnParams> {
    let cd_cfg = TrainConfig {
        method: TrainMethod::Cd,
        restarts: 1,
        seed,
        ..cfg.clone()
    };
    let mut current = data.clone();
    let mut layers = Vec::with_capacity(depth - 2);
    for level in 0..depth - 2 {
        let stage_cfg = TrainConfig {
            seed: derive_seed(seed, 1000 + level as u64),
            ..cd_cfg.clone()
        };
        let trained = train_rbm(space, space, &current, &stage_cfg)?;
        layers.push(rbm_as_directed_layer(&trained.params));
        current = hidden_marginal_given(&trained.params, &current)?;
    }
    let top_cfg = TrainConfig {
        seed: derive_seed(seed, 2000),
        ..cd_cfg
    };
    let top = train_rbm(space, space, &current, &top_cfg)?;
    DbnParams::new(vec![space.clone(); depth], top.params, layers)
}

/// Result of a deep-network training run.
#[derive(Debug, Clone)]
pub struct TrainedDbn {
    pub params: DbnParams,
    pub divergence_nats: f64,
    pub trace: Vec<f64>,
}

/// Trains a constant-width network of `depth` layers on an exact data
/// distribution. Warm starts follow `cfg.method`: greedy layer-wise
/// pretraining plays the role of the contrastive-divergence phase; the
/// reported model always comes from the exact fine-tune unless the method
/// is pure CD.
pub fn train_dbn(
    space: &StateSpace,
    depth: usize,
    data: &Dist,
    cfg: &TrainConfig,
) -> Result<TrainedDbn> {
    cfg.validate()?;
    data.space().expect_same(space)?;
    if depth < 2 {
        return Err(Error::Schema("depth must be at least 2".into()));
    }
    let entropy = data_entropy(data);
    let mut best: Option<TrainedDbn> = None;
    for restart in 0..cfg.restarts {
        let run_seed = derive_seed(cfg.seed, restart as u64);
        let mut params = match cfg.method {
            TrainMethod::Cd | TrainMethod::CdThenMl => {
                greedy_pretrain(space, depth, data, cfg, run_seed)?
            }
            TrainMethod::ExactMl => {
                let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
                let rbm = RbmParams::random(space.clone(), space.clone(), cfg.init_sigma, &mut rng);
                let layers = (0..depth - 2)
                    .map(|_| {
                        let dh = space.one_hot_dim();
                        let units = (0..space.num_units())
                            .map(|i| {
                                let d = space.card(i) as usize - 1;
                                UnitParams {
                                    theta: Array2::from_shape_fn((d, dh), |_| {
                                        cfg.init_sigma * standard_normal(&mut rng)
                                    }),
                                    bias: Array1::from_shape_fn(d, |_| {
                                        cfg.init_sigma * standard_normal(&mut rng)
                                    }),
                                }
                            })
                            .collect();
                        LayerParams::new(space.clone(), space.clone(), units).expect("valid shapes")
                    })
                    .collect();
                DbnParams::new(vec![space.clone(); depth], rbm, layers)?
            }
        };

        let mut trace = Vec::new();
        if matches!(cfg.method, TrainMethod::ExactMl | TrainMethod::CdThenMl) {
            let template = params.clone();
            let data_obj = data.clone();
            let objective = move |theta: &[f64]| {
                let p = unpack_dbn(&template, theta);
                dbn_log_likelihood(&p, &data_obj).expect("spaces match")
            };
            let template = params.clone();
            let data_grad = data.clone();
            let gradient = move |theta: &[f64]| {
                let p = unpack_dbn(&template, theta);
                pack_dbn_grad(&exact_dbn_gradient(&p, &data_grad).expect("spaces match"))
            };
            let (theta, ll_trace) = ascend(
                pack_dbn(&params),
                &objective,
                &gradient,
                cfg.ml_max_iters,
                cfg.ml_grad_tol,
            );
            params = unpack_dbn(&params, &theta);
            trace = ll_trace.into_iter().map(|ll| -entropy - ll).collect();
        }

        let divergence = kl(data, &params.visible_marginal()?)?;
        if best
            .as_ref()
            .map(|b| divergence < b.divergence_nats)
            .unwrap_or(true)
        {
            best = Some(TrainedDbn {
                params,
                divergence_nats: divergence,
                trace,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution as _, StandardNormal};
    StandardNormal.sample(rng)
}
