//! Hand-derived reverse-mode gradients and a central-difference oracle.

use std::fmt;
use std::ops::{Deref, DerefMut};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::vocab::{END, START};
use crate::error::{Error, Result};
use crate::model::{
    self, init_params, FeedMode, ForwardTrace, ModelConfig, ModelParams, TensorKind,
};
use crate::tensor::{self, Activation, Vector};

/// Gradient tensors, shaped exactly like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(ModelParams);

impl Gradients {
    pub fn zeros(config: &ModelConfig) -> Self {
        Gradients(ModelParams::zeros(config))
    }

    pub fn into_inner(self) -> ModelParams {
        self.0
    }

    /// `self += other`, tensor by tensor in fixed order.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (dst, src) in self.0.tensors_mut().into_iter().zip(other.0.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.0.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g *= factor);
        }
    }
}

impl Deref for Gradients {
    type Target = ModelParams;

    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for Gradients {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

/// `Σ ‖W‖²` over weight matrices only (no biases, no embedding).
pub fn weight_penalty(params: &ModelParams) -> f64 {
    params
        .tensors()
        .iter()
        .filter(|t| t.kind == TensorKind::Weight)
        .map(|t| t.data.iter().fold(0.0, |acc, x| acc + x * x))
        .sum()
}

/// Adds `∂(l2 · Σ‖W‖²)/∂W = 2·l2·W` to every weight-matrix gradient.
pub fn add_l2(grads: &mut Gradients, params: &ModelParams, l2_coeff: f64) {
    if l2_coeff == 0.0 {
        return;
    }
    for (g, p) in grads.0.tensors_mut().into_iter().zip(params.tensors()) {
        if g.kind != TensorKind::Weight {
            continue;
        }
        for (gv, pv) in g.data.iter_mut().zip(p.data) {
            *gv += 2.0 * l2_coeff * pv;
        }
    }
}

/// Regularized objective: mean cross-entropy plus the L2 weight penalty.
pub fn regularized_loss(
    params: &ModelParams,
    config: &ModelConfig,
    token_ids: &[usize],
    feature: &Vector,
    l2_coeff: f64,
) -> Result<f64> {
    let data = model::sequence_loss(params, config, token_ids, feature)?;
    Ok(data + l2_coeff * weight_penalty(params))
}

/// Accumulates `scale · ∂(cross-entropy)/∂θ` for one trace into `grads`.
pub fn accumulate_sequence_grad(
    params: &ModelParams,
    config: &ModelConfig,
    trace: &ForwardTrace,
    target_ids: &[usize],
    scale: f64,
    grads: &mut Gradients,
) -> Result<()> {
    let steps = trace.len();
    if target_ids.len() != steps || steps == 0 {
        return Err(Error::Data(format!(
            "{} targets for a trace of {steps} timesteps",
            target_ids.len()
        )));
    }
    if let Some(&bad) = target_ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::Data(format!("target id {bad} out of range")));
    }

    let h = config.hidden_dim;
    let depth = config.depth;
    let act = config.activation;
    let shared = params.wh_trans.is_empty();
    let fed_image = trace.fed_image();
    let zero_state = Vector::zeros(h);
    let norm = scale / steps as f64;

    // Gradient flowing into the fed (post-dropout) projected image.
    let mut d_image = vec![0.0; h];
    // Gradient reaching h_N(t) from timestep t + 1.
    let mut carry = vec![0.0; h];

    for t in (0..steps).rev() {
        let st = &trace.steps[t];
        let h_prev = if t == 0 {
            &zero_state
        } else {
            trace.steps[t - 1].top_hidden()
        };

        let mut dz = st.probs.clone();
        dz[target_ids[t]] -= 1.0;
        dz.iter_mut().for_each(|v| *v *= norm);

        grads.wd.add_outer(&dz, st.top_hidden());
        for (b, d) in grads.bd.iter_mut().zip(dz.iter()) {
            *b += d;
        }

        let mut dh = std::mem::take(&mut carry);
        params.wd.matvec_t_acc(&dz, &mut dh);

        for k in (2..=depth).rev() {
            let mut da = dh;
            for ((d, &a), &o) in da.iter_mut().zip(st.pre[k - 1].iter()).zip(st.hidden[k - 1].iter()) {
                *d *= act.derivative(a, o);
            }
            let below = &st.hidden[k - 2];
            if shared {
                grads.wh_rec.add_outer(&da, below);
            } else {
                grads.wh_trans[k - 2].add_outer(&da, below);
            }
            for (b, d) in grads.bh[k - 1].iter_mut().zip(&da) {
                *b += d;
            }
            let mut next = vec![0.0; h];
            params.transition(k).matvec_t_acc(&da, &mut next);
            dh = next;
        }

        let mut da1 = dh;
        for ((d, &a), &o) in da1.iter_mut().zip(st.pre[0].iter()).zip(st.hidden[0].iter()) {
            *d *= act.derivative(a, o);
        }
        grads.ws.add_outer(&da1, &st.x);
        grads.wh_rec.add_outer(&da1, h_prev);
        for (b, d) in grads.bh[0].iter_mut().zip(&da1) {
            *b += d;
        }

        let mut dx = vec![0.0; config.embed_dim];
        params.ws.matvec_t_acc(&da1, &mut dx);
        if let Some(masks) = trace.masks.as_ref().and_then(|m| m.input.as_ref()) {
            for (d, m) in dx.iter_mut().zip(masks[t].iter()) {
                *d *= m;
            }
        }
        for (e, d) in grads.embedding.row_mut(st.input_id).iter_mut().zip(&dx) {
            *e += d;
        }

        for ((di, &d), &g) in d_image.iter_mut().zip(&da1).zip(st.gate.iter()) {
            *di += d * g;
        }

        let mut d_prev = vec![0.0; h];
        params.wh_rec.matvec_t_acc(&da1, &mut d_prev);

        if config.feed_mode == FeedMode::LearnedGate {
            let dga: Vec<f64> = da1
                .iter()
                .zip(fed_image.iter())
                .zip(st.gate.iter())
                .map(|((&d, &p), &g)| d * p * g * (1.0 - g))
                .collect();
            grads.wg.add_outer(&dga, h_prev);
            for (b, d) in grads.bg.iter_mut().zip(&dga) {
                *b += d;
            }
            params.wg.matvec_t_acc(&dga, &mut d_prev);
        }
        carry = d_prev;
    }

    if let Some(mask) = trace.masks.as_ref().and_then(|m| m.image.as_ref()) {
        for (d, m) in d_image.iter_mut().zip(mask.iter()) {
            *d *= m;
        }
    }
    grads.wi.add_outer(&d_image, &trace.feature);
    for (b, d) in grads.bi.iter_mut().zip(&d_image) {
        *b += d;
    }
    Ok(())
}

/// Full gradient of `cross-entropy + l2_coeff · Σ‖W‖²` for one sequence.
pub fn backward_sequence(
    params: &ModelParams,
    config: &ModelConfig,
    trace: &ForwardTrace,
    target_ids: &[usize],
    l2_coeff: f64,
) -> Result<Gradients> {
    let mut grads = Gradients::zeros(config);
    accumulate_sequence_grad(params, config, trace, target_ids, 1.0, &mut grads)?;
    add_l2(&mut grads, params, l2_coeff);
    Ok(grads)
}

/// `(f(x + eps) - f(x - eps)) / (2 eps)`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Position of one scalar parameter: tensor index in
/// [`ModelParams::tensors`] order plus flat offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCoord {
    pub tensor: usize,
    pub index: usize,
}

fn with_coord<T>(
    params: &mut ModelParams,
    coord: ParamCoord,
    value: f64,
    f: impl FnOnce(&ModelParams) -> T,
) -> T {
    let original = {
        let mut ts = params.tensors_mut();
        let slot = &mut ts[coord.tensor].data[coord.index];
        std::mem::replace(slot, value)
    };
    let out = f(params);
    params.tensors_mut()[coord.tensor].data[coord.index] = original;
    out
}

fn read_coord(params: &ModelParams, coord: ParamCoord) -> f64 {
    params.tensors()[coord.tensor].data[coord.index]
}

/// Numerical derivative of the regularized loss along one coordinate.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_grad(
    params: &ModelParams,
    config: &ModelConfig,
    token_ids: &[usize],
    feature: &Vector,
    coord: ParamCoord,
    eps: f64,
    l2_coeff: f64,
) -> Result<f64> {
    let mut scratch = params.clone();
    let x = read_coord(params, coord);
    let plus = with_coord(&mut scratch, coord, x + eps, |p| {
        regularized_loss(p, config, token_ids, feature, l2_coeff)
    })?;
    let minus = with_coord(&mut scratch, coord, x - eps, |p| {
        regularized_loss(p, config, token_ids, feature, l2_coeff)
    })?;
    Ok((plus - minus) / (2.0 * eps))
}

/// `(tanh x - tanh y)` from `d = x - y` without cancellation.
fn tanh_diff(x: f64, y: f64, d: f64) -> f64 {
    d.sinh() / (x.cosh() * y.cosh())
}

fn act_diff(act: Activation, x: f64, y: f64, d: f64) -> f64 {
    match act {
        Activation::Tanh => tanh_diff(x, y, d),
        Activation::Relu => match (x > 0.0, y > 0.0) {
            (true, true) => d,
            (false, false) => 0.0,
            _ => x.max(0.0) - y.max(0.0),
        },
    }
}

/// `W+·v+ - W-·v-` as `W-·dv + dW·v+`.
fn product_diff(w_minus: &tensor::Matrix, dw: &tensor::Matrix, v_plus: &[f64], dv: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w_minus.rows()];
    w_minus.matvec_acc(dv, &mut out);
    dw.matvec_acc(v_plus, &mut out);
    out
}

fn logits(params: &ModelParams, h: &[f64]) -> Vec<f64> {
    let mut z = params.bd.to_vec();
    params.wd.matvec_acc(h, &mut z);
    z
}

/// `L(plus) - L(minus)` for the regularized loss of one sequence (no
/// dropout), propagated as differences through every layer so that the
/// roundoff scales with the size of the change rather than with `L`.
pub fn loss_difference(
    minus: &ModelParams,
    plus: &ModelParams,
    config: &ModelConfig,
    token_ids: &[usize],
    feature: &Vector,
    l2_coeff: f64,
) -> Result<f64> {
    let tr_m = model::forward_sequence(minus, config, token_ids, feature, None)?;
    let tr_p = model::forward_sequence(plus, config, token_ids, feature, None)?;
    let mut delta = plus.clone();
    for (d, m) in delta.tensors_mut().into_iter().zip(minus.tensors()) {
        for (dv, mv) in d.data.iter_mut().zip(m.data) {
            *dv -= mv;
        }
    }
    let act = config.activation;
    let h = config.hidden_dim;

    let mut dp = delta.bi.to_vec();
    delta.wi.matvec_acc(feature, &mut dp);

    let zero = vec![0.0; h];
    let mut dh_prev = zero.clone();
    let mut total = 0.0;
    for (i, (sm, sp)) in tr_m.steps.iter().zip(&tr_p.steps).enumerate() {
        let h_prev_m: &[f64] = if i == 0 { &zero } else { tr_m.steps[i - 1].top_hidden() };
        let h_prev_p: &[f64] = if i == 0 { &zero } else { tr_p.steps[i - 1].top_hidden() };

        let dx = delta.embedding.row(sm.input_id);
        let mut da = product_diff(&minus.ws, &delta.ws, &sp.x, dx);
        let rec = product_diff(&minus.wh_rec, &delta.wh_rec, h_prev_p, &dh_prev);
        let dg: Vec<f64> = match config.feed_mode {
            FeedMode::LearnedGate => {
                let mut pre_m = minus.bg.to_vec();
                minus.wg.matvec_acc(h_prev_m, &mut pre_m);
                let mut pre_p = plus.bg.to_vec();
                plus.wg.matvec_acc(h_prev_p, &mut pre_p);
                let dpre = product_diff(&minus.wg, &delta.wg, h_prev_p, &dh_prev);
                (0..h)
                    .map(|j| {
                        let d = dpre[j] + delta.bg[j];
                        0.5 * tanh_diff(0.5 * pre_p[j], 0.5 * pre_m[j], 0.5 * d)
                    })
                    .collect()
            }
            _ => zero.clone(),
        };
        for j in 0..h {
            da[j] += rec[j]
                + sm.gate[j] * dp[j]
                + dg[j] * tr_p.projected_image[j]
                + delta.bh[0][j];
        }
        let mut dh: Vec<f64> = (0..h)
            .map(|j| act_diff(act, sp.pre[0][j], sm.pre[0][j], da[j]))
            .collect();
        for k in 2..=config.depth {
            let mut da = product_diff(minus.transition(k), delta.transition(k), &sp.hidden[k - 2], &dh);
            for j in 0..h {
                da[j] += delta.bh[k - 1][j];
            }
            dh = (0..h)
                .map(|j| act_diff(act, sp.pre[k - 1][j], sm.pre[k - 1][j], da[j]))
                .collect();
        }

        let mut dz = product_diff(&minus.wd, &delta.wd, sp.top_hidden(), &dh);
        for (z, b) in dz.iter_mut().zip(delta.bd.iter()) {
            *z += b;
        }
        let z_m = logits(minus, sm.top_hidden());
        let m = z_m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut s, mut ds) = (0.0, 0.0);
        for (zm, d) in z_m.iter().zip(&dz) {
            let e = (zm - m).exp();
            s += e;
            ds += e * d.exp_m1();
        }
        let target = token_ids[i + 1];
        total += (ds / s).ln_1p() - dz[target];
        dh_prev = dh;
    }
    let mut dpen = 0.0;
    for ((d, m), p) in delta.tensors().iter().zip(minus.tensors()).zip(plus.tensors()) {
        if d.kind != TensorKind::Weight {
            continue;
        }
        for ((dv, mv), pv) in d.data.iter().zip(m.data).zip(p.data) {
            if *dv != 0.0 {
                dpen += dv * (mv + pv);
            }
        }
    }
    Ok(total / tr_m.len() as f64 + l2_coeff * dpen)
}

/// True when a ReLU unit sits within `10·eps` of its kink in any of the
/// traces, or flips side between them.
fn near_kink(traces: &[&ForwardTrace], eps: f64) -> bool {
    let margin = 10.0 * eps;
    let close = traces.iter().any(|tr| {
        tr.steps
            .iter()
            .flat_map(|s| s.pre.iter())
            .flat_map(|v| v.iter())
            .any(|a| a.abs() < margin)
    });
    if close {
        return true;
    }
    let (first, rest) = traces.split_first().expect("non-empty");
    rest.iter().any(|tr| {
        tr.steps.iter().zip(&first.steps).any(|(a, b)| {
            a.pre
                .iter()
                .flat_map(|v| v.iter())
                .zip(b.pre.iter().flat_map(|v| v.iter()))
                .any(|(x, y)| (*x > 0.0) != (*y > 0.0))
        })
    })
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub samples: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub l2_coeff: f64,
    pub max_tokens: usize,
    /// Perturbs the analytic gradient so the check must fail. Test hook.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples: 600,
            eps: 1e-5,
            tolerance: 1e-5,
            l2_coeff: 1e-3,
            max_tokens: 6,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Offender {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// The analytic gradient of the whole tensor is exactly zero.
    pub all_zero: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub activation: Activation,
    pub feed_mode: FeedMode,
    pub depth: usize,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub n_checked: usize,
    pub n_skipped: usize,
    pub tensors: Vec<TensorCheck>,
    pub worst: Option<Offender>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            write!(
                f,
                "tensor {} checked {} skipped {} max_rel_err {:.3e}",
                t.name, t.checked, t.skipped, t.max_rel_err
            )?;
            if t.all_zero {
                f.write_str(" zero")?;
            }
            writeln!(f)?;
        }
        write!(
            f,
            "gradcheck activation {} feed_mode {} depth {} checked {} skipped {} max_rel_err {:.3e} {}",
            self.activation,
            self.feed_mode,
            self.depth,
            self.n_checked,
            self.n_skipped,
            self.max_rel_err,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        if let (false, Some(w)) = (self.passed(), &self.worst) {
            write!(
                f,
                "\nworst {}[{}] analytic {:.12e} numeric {:.12e} rel_err {:.3e}",
                w.tensor, w.index, w.analytic, w.numeric, w.rel_err
            )?;
        }
        Ok(())
    }
}

/// Spreads `total` draws over tensors round-robin, never exceeding a tensor's size.
fn allocate_samples(sizes: &[usize], total: usize) -> Vec<usize> {
    let mut quota = vec![0; sizes.len()];
    let mut left = total;
    while left > 0 {
        let mut progressed = false;
        for (q, &size) in quota.iter_mut().zip(sizes) {
            if left == 0 {
                break;
            }
            if *q < size {
                *q += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    quota
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient to central differences on randomly sampled
/// coordinates of a randomly initialized model and a random short sequence.
pub fn gradient_check(
    config: &ModelConfig,
    seed: u64,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(config, rng.random());
    for t in params.tensors_mut() {
        if t.kind == TensorKind::Bias {
            t.data
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.2..0.2));
        }
    }

    let max_len = options.max_tokens.max(3);
    let len = rng.random_range(3..=max_len);
    let mut tokens = vec![START];
    tokens.extend((0..len - 2).map(|_| rng.random_range(3..config.vocab_size)));
    tokens.push(END);
    let feature: Vector = (0..config.feature_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect::<Vec<_>>()
        .into();

    let trace = model::forward_sequence(&params, config, &tokens, &feature, None)?;
    let mut analytic = backward_sequence(&params, config, &trace, &tokens[1..], options.l2_coeff)?;
    if options.inject_fault {
        for t in analytic.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g = *g * 1.01 + 1e-3);
        }
    }

    let names: Vec<String> = params.tensors().into_iter().map(|t| t.name).collect();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    let quotas = allocate_samples(&sizes, options.samples);

    let analytic_views = analytic.tensors();
    let mut report = GradCheckReport {
        activation: config.activation,
        feed_mode: config.feed_mode,
        depth: config.depth,
        tolerance: options.tolerance,
        max_rel_err: 0.0,
        n_checked: 0,
        n_skipped: 0,
        tensors: Vec::with_capacity(names.len()),
        worst: None,
    };

    for (ti, (name, &quota)) in names.iter().zip(&quotas).enumerate() {
        let mut check = TensorCheck {
            name: name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            all_zero: analytic_views[ti].data.iter().all(|&g| g == 0.0),
        };
        for index in index::sample(&mut rng, sizes[ti], quota).into_iter() {
            let coord = ParamCoord { tensor: ti, index };
            let x = read_coord(&params, coord);
            let mut lo = params.clone();
            lo.tensors_mut()[ti].data[index] = x - options.eps;
            let mut hi = params.clone();
            hi.tensors_mut()[ti].data[index] = x + options.eps;
            if config.activation == Activation::Relu {
                let tr_hi = model::forward_sequence(&hi, config, &tokens, &feature, None)?;
                let tr_lo = model::forward_sequence(&lo, config, &tokens, &feature, None)?;
                if near_kink(&[&trace, &tr_hi, &tr_lo], options.eps) {
                    check.skipped += 1;
                    continue;
                }
            }
            let numeric = loss_difference(&lo, &hi, config, &tokens, &feature, options.l2_coeff)?
                / (2.0 * options.eps);
            let a = analytic_views[ti].data[index];
            let err = relative_error(a, numeric);
            check.checked += 1;
            check.max_rel_err = check.max_rel_err.max(err);
            if report.worst.as_ref().is_none_or(|w| err > w.rel_err) {
                report.worst = Some(Offender {
                    tensor: name.clone(),
                    index,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
        report.n_checked += check.checked;
        report.n_skipped += check.skipped;
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.tensors.push(check);
    }
    Ok(report)
}

/// Small configuration used for gradient checking.
pub fn gradcheck_config(activation: Activation, feed_mode: FeedMode, depth: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        embed_dim: 8,
        hidden_dim: 10,
        depth,
        feature_dim: 16,
        activation,
        feed_mode,
        max_decode_len: 10,
        share_transition_weights: false,
    }
}

/// Clips every gradient coordinate to `[-bound, bound]`.
pub fn clip_gradients(grads: &mut Gradients, bound: f64) -> Result<()> {
    for t in grads.tensors_mut() {
        tensor::clip_in_place(t.data, bound)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_sequence, DropoutMasks};
    use crate::tensor::Matrix;

    fn setup(mode: FeedMode, depth: usize) -> (ModelConfig, ModelParams, Vec<usize>, Vector) {
        let config = gradcheck_config(Activation::Tanh, mode, depth);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = init_params(&config, 3);
        for t in params.tensors_mut() {
            if t.kind == TensorKind::Bias {
                t.data.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
            }
        }
        let tokens = vec![START, 5, 9, 5, 12, END];
        let feature: Vector = (0..config.feature_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<_>>()
            .into();
        (config, params, tokens, feature)
    }

    #[test]
    fn central_difference_on_quadratic() {
        let d = central_difference(|w| w * w, 3.0, 1e-5);
        assert!((d - 6.0).abs() < 1e-9);
    }

    #[test]
    fn central_difference_error_shrinks_quadratically() {
        let (config, params, tokens, feature) = setup(FeedMode::LearnedGate, 2);
        let coord = ParamCoord { tensor: 1, index: 7 };
        let trace = forward_sequence(&params, &config, &tokens, &feature, None).unwrap();
        let exact = backward_sequence(&params, &config, &trace, &tokens[1..], 0.0)
            .unwrap()
            .tensors()[1]
            .data[7];
        let err = |eps| {
            (finite_difference_grad(&params, &config, &tokens, &feature, coord, eps, 0.0).unwrap()
                - exact)
                .abs()
        };
        let coarse = err(1e-2);
        let fine = err(1e-3);
        // O(eps^2): a tenfold smaller step cuts the error by roughly 100x.
        assert!(fine < coarse / 30.0, "coarse {coarse:e} fine {fine:e}");
    }

    #[test]
    fn no_image_path_without_feeding() {
        let (config, params, tokens, feature) = setup(FeedMode::None, 2);
        let trace = forward_sequence(&params, &config, &tokens, &feature, None).unwrap();
        let g = backward_sequence(&params, &config, &trace, &tokens[1..], 0.0).unwrap();
        for t in [&g.wi, &g.wg] {
            assert!(t.as_slice().iter().all(|&x| x == 0.0));
        }
        for t in [&g.bi, &g.bg] {
            assert!(t.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn fixed_schedules_leave_gate_parameters_untouched() {
        for mode in [FeedMode::FirstStepOnly, FeedMode::Always] {
            let (config, params, tokens, feature) = setup(mode, 2);
            let trace = forward_sequence(&params, &config, &tokens, &feature, None).unwrap();
            let g = backward_sequence(&params, &config, &trace, &tokens[1..], 0.0).unwrap();
            assert!(g.wg.as_slice().iter().all(|&x| x == 0.0));
            assert!(g.bg.iter().all(|&x| x == 0.0));
            assert!(g.wi.as_slice().iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn l2_term_is_linear() {
        let (config, params, tokens, feature) = setup(FeedMode::LearnedGate, 2);
        let trace = forward_sequence(&params, &config, &tokens, &feature, None).unwrap();
        let lambda = 0.25;
        let base = backward_sequence(&params, &config, &trace, &tokens[1..], 0.0).unwrap();
        let reg = backward_sequence(&params, &config, &trace, &tokens[1..], lambda).unwrap();
        for ((b, r), p) in base.tensors().iter().zip(reg.tensors()).zip(params.tensors()) {
            for ((bv, rv), pv) in b.data.iter().zip(r.data).zip(p.data) {
                let expected = if p.kind == TensorKind::Weight {
                    2.0 * lambda * pv
                } else {
                    0.0
                };
                assert!(((rv - bv) - expected).abs() < 1e-15, "{}", p.name);
            }
        }
    }

    #[test]
    fn every_coordinate_matches_finite_differences() {
        for mode in FeedMode::ALL {
            let (config, params, tokens, feature) = setup(mode, 2);
            let trace = forward_sequence(&params, &config, &tokens, &feature, None).unwrap();
            let g = backward_sequence(&params, &config, &trace, &tokens[1..], 1e-3).unwrap();
            for (ti, t) in g.tensors().iter().enumerate() {
                for index in 0..t.data.len() {
                    let n = finite_difference_grad(
                        &params,
                        &config,
                        &tokens,
                        &feature,
                        ParamCoord { tensor: ti, index },
                        1e-5,
                        1e-3,
                    )
                    .unwrap();
                    let err = relative_error(t.data[index], n);
                    assert!(err < 1e-5, "{mode} {}[{index}]: {} vs {n}", t.name, t.data[index]);
                }
            }
        }
    }

    #[test]
    fn dropout_masks_are_respected_by_backward() {
        let (config, params, tokens, feature) = setup(FeedMode::LearnedGate, 2);
        let steps = tokens.len() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut mask = |n: usize| -> Vector {
            (0..n)
                .map(|_| if rng.random_bool(0.5) { 2.0 } else { 0.0 })
                .collect::<Vec<_>>()
                .into()
        };
        let masks = DropoutMasks {
            input: Some((0..steps).map(|_| mask(config.embed_dim)).collect()),
            image: Some(mask(config.hidden_dim)),
        };
        let trace = forward_sequence(&params, &config, &tokens, &feature, Some(&masks)).unwrap();
        let g = backward_sequence(&params, &config, &trace, &tokens[1..], 0.0).unwrap();
        // With fixed masks the loss is a smooth function of the parameters.
        let loss = |p: &ModelParams| {
            let tr = forward_sequence(p, &config, &tokens, &feature, Some(&masks)).unwrap();
            model::cross_entropy_loss(&tr, &tokens[1..]).unwrap()
        };
        let mut scratch = params.clone();
        for (ti, t) in g.tensors().iter().enumerate() {
            for index in (0..t.data.len()).step_by(7) {
                let coord = ParamCoord { tensor: ti, index };
                let x = read_coord(&params, coord);
                let plus = with_coord(&mut scratch, coord, x + 1e-5, loss);
                let minus = with_coord(&mut scratch, coord, x - 1e-5, loss);
                let n = (plus - minus) / 2e-5;
                assert!(relative_error(t.data[index], n) < 1e-5, "{}[{index}]", t.name);
            }
        }
    }

    #[test]
    fn embedding_gradient_touches_only_input_rows() {
        let (config, params, tokens, feature) = setup(FeedMode::LearnedGate, 3);
        let trace = forward_sequence(&params, &config, &tokens, &feature, None).unwrap();
        let g = backward_sequence(&params, &config, &trace, &tokens[1..], 0.0).unwrap();
        let inputs = &tokens[..tokens.len() - 1];
        for row in 0..config.vocab_size {
            let nonzero = g.embedding.row(row).iter().any(|&x| x != 0.0);
            assert_eq!(nonzero, inputs.contains(&row), "row {row}");
        }
    }

    #[test]
    fn feature_perturbation_is_invisible_without_feeding() {
        let (config, params, tokens, feature) = setup(FeedMode::None, 2);
        let mut other = feature.clone();
        other.iter_mut().for_each(|x| *x = -3.0 * *x + 1.0);
        let grad = |f: &Vector| {
            let tr = forward_sequence(&params, &config, &tokens, f, None).unwrap();
            backward_sequence(&params, &config, &tr, &tokens[1..], 1e-3).unwrap()
        };
        assert_eq!(grad(&feature), grad(&other));
    }

    #[test]
    fn shared_transition_gradients_check_out() {
        let mut config = gradcheck_config(Activation::Tanh, FeedMode::LearnedGate, 3);
        config.share_transition_weights = true;
        let report = gradient_check(&config, 4, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn gradient_check_passes_for_all_modes_and_depths() {
        for mode in FeedMode::ALL {
            for depth in 1..=3 {
                let config = gradcheck_config(Activation::Tanh, mode, depth);
                let report = gradient_check(&config, 0, &GradCheckOptions::default()).unwrap();
                assert!(report.passed(), "{report}");
                assert!(report.n_checked >= 500);
            }
        }
    }

    #[test]
    fn relu_check_skips_kinks_and_passes_elsewhere() {
        for mode in FeedMode::ALL {
            let config = gradcheck_config(Activation::Relu, mode, 2);
            let report = gradient_check(&config, 0, &GradCheckOptions::default()).unwrap();
            assert!(report.passed(), "{report}");
            assert!(report.n_checked > 0);
        }
    }

    #[test]
    fn kink_detection_flags_small_preactivations() {
        let (config, params, tokens, feature) = setup(FeedMode::LearnedGate, 1);
        let mut trace = forward_sequence(&params, &config, &tokens, &feature, None).unwrap();
        trace.steps[0].pre[0][0] = 5e-5;
        assert!(near_kink(&[&trace], 1e-5));
        trace.steps[0].pre[0][0] = 1e-3;
        let mut flipped = trace.clone();
        flipped.steps[0].pre[0][0] = -1e-3;
        assert!(near_kink(&[&trace, &flipped], 1e-5));
    }

    #[test]
    fn first_step_mode_reports_zero_gate_gradients() {
        // With L2 off: weight decay alone would still move `wg`.
        let config = gradcheck_config(Activation::Tanh, FeedMode::FirstStepOnly, 2);
        let options = GradCheckOptions {
            l2_coeff: 0.0,
            ..Default::default()
        };
        let report = gradient_check(&config, 0, &options).unwrap();
        for name in ["wg", "bg"] {
            let t = report.tensors.iter().find(|t| t.name == name).unwrap();
            assert!(t.all_zero && t.max_rel_err == 0.0);
        }
        assert!(report.to_string().contains("tensor wg checked"));
    }

    #[test]
    fn loss_difference_agrees_with_direct_subtraction() {
        for act in [Activation::Tanh, Activation::Relu] {
            for mode in FeedMode::ALL {
                let (mut config, minus, tokens, feature) = setup(mode, 3);
                config.activation = act;
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let mut plus = minus.clone();
                for t in plus.tensors_mut() {
                    t.data.iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05));
                }
                let direct = regularized_loss(&plus, &config, &tokens, &feature, 1e-2).unwrap()
                    - regularized_loss(&minus, &config, &tokens, &feature, 1e-2).unwrap();
                let d = loss_difference(&minus, &plus, &config, &tokens, &feature, 1e-2).unwrap();
                assert!((d - direct).abs() < 1e-12, "{act} {mode}: {d} vs {direct}");
            }
        }
    }

    #[test]
    fn injected_fault_fails_the_check() {
        let config = gradcheck_config(Activation::Tanh, FeedMode::LearnedGate, 2);
        let options = GradCheckOptions {
            inject_fault: true,
            ..Default::default()
        };
        let report = gradient_check(&config, 0, &options).unwrap();
        assert!(!report.passed());
        let text = report.to_string();
        assert!(text.contains("FAIL") && text.contains("worst"), "{text}");
    }

    #[test]
    fn sample_allocation_respects_sizes() {
        assert_eq!(allocate_samples(&[2, 10, 1], 9), vec![2, 6, 1]);
        assert_eq!(allocate_samples(&[2, 1], 9), vec![2, 1]);
    }

    #[test]
    fn clipping_bounds_every_coordinate() {
        let config = gradcheck_config(Activation::Tanh, FeedMode::LearnedGate, 2);
        let mut g = Gradients::zeros(&config);
        g.wd = Matrix::from_vec(20, 10, (0..200).map(|i| i as f64 - 100.0).collect()).unwrap();
        clip_gradients(&mut g, 5.0).unwrap();
        assert!(g.wd.as_slice().iter().all(|x| x.abs() <= 5.0));
        assert_eq!(g.wd.get(0, 0), -5.0);
    }
}
