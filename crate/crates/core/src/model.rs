//! Memory-gated deep-transition RNN: parameters, forward recurrence and loss.
//!
//! One timestep with depth `N` computes
//!
//! ```text
//! g(t)   = σ(Wg · h_N(t-1) + bg)                          (learned gate)
//! h_1(t) = f(Ws · x(t) + Wh_rec · h_N(t-1) + g(t) ∘ p + bh[1])
//! h_k(t) = f(Wh_trans[k] · h_{k-1}(t) + bh[k])            k = 2..N
//! y(t)   = softmax(Wd · h_N(t) + bd)
//! ```
//!
//! where `p = Wi · feature + bi` is the projected image, computed once per
//! sequence. With `N = 1` and [`FeedMode::None`] this is a plain Elman RNN.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::vocab::{END, START};
use crate::error::{Error, Result};
use crate::tensor::{self, Activation, Matrix, Vector};

/// Image-injection schedule for the first hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeedMode {
    /// Gate computed from the previous top hidden state.
    #[default]
    LearnedGate,
    /// Gate is all ones at the first timestep and zero afterwards.
    FirstStepOnly,
    /// Gate is all ones at every timestep.
    Always,
    /// Gate is zero everywhere; the image is never seen.
    None,
}

impl FeedMode {
    pub const ALL: [FeedMode; 4] = [
        FeedMode::LearnedGate,
        FeedMode::FirstStepOnly,
        FeedMode::Always,
        FeedMode::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeedMode::LearnedGate => "learned",
            FeedMode::FirstStepOnly => "first_step",
            FeedMode::Always => "always",
            FeedMode::None => "none",
        }
    }
}

impl FromStr for FeedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "learned" | "learned_gate" | "gate" => Ok(FeedMode::LearnedGate),
            "first_step" | "first" => Ok(FeedMode::FirstStepOnly),
            "always" => Ok(FeedMode::Always),
            "none" => Ok(FeedMode::None),
            other => Err(Error::Config(format!(
                "unknown feed mode `{other}` (expected learned|first_step|always|none)"
            ))),
        }
    }
}

impl fmt::Display for FeedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub feature_dim: usize,
    pub activation: Activation,
    pub feed_mode: FeedMode,
    pub max_decode_len: usize,
    pub share_transition_weights: bool,
}

impl ModelConfig {
    /// Default architecture (`H = 512`, `N = 2`, `D = 256`, ReLU, learned gate)
    /// for the given vocabulary and feature sizes.
    pub fn new(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 256,
            hidden_dim: 512,
            depth: 2,
            feature_dim,
            activation: Activation::Relu,
            feed_mode: FeedMode::LearnedGate,
            max_decode_len: 50,
            share_transition_weights: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 4 (START, END, UNK and one word), got {}",
                self.vocab_size
            )));
        }
        for (name, value) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("depth", self.depth),
            ("feature_dim", self.feature_dim),
        ] {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Which regularization rule a parameter tensor falls under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Weight,
    Bias,
}

/// Borrowed view of one named parameter tensor.
#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub kind: TensorKind,
    pub dims: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct TensorMut<'a> {
    pub name: String,
    pub kind: TensorKind,
    pub data: &'a mut [f64],
}

/// All learnable tensors.
///
/// `wh_trans[k - 2]` drives layer `k` for `k = 2..=N`. When the config sets
/// `share_transition_weights`, `wh_trans` is empty and `wh_rec` is used for
/// every transition as well.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Matrix,
    pub ws: Matrix,
    pub wh_rec: Matrix,
    pub wh_trans: Vec<Matrix>,
    pub wd: Matrix,
    pub wi: Matrix,
    pub wg: Matrix,
    pub bh: Vec<Vector>,
    pub bd: Vector,
    pub bi: Vector,
    pub bg: Vector,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, d, h, f, n) = (
            config.vocab_size,
            config.embed_dim,
            config.hidden_dim,
            config.feature_dim,
            config.depth,
        );
        let n_trans = if config.share_transition_weights {
            0
        } else {
            n - 1
        };
        Self {
            embedding: Matrix::zeros(v, d),
            ws: Matrix::zeros(h, d),
            wh_rec: Matrix::zeros(h, h),
            wh_trans: (0..n_trans).map(|_| Matrix::zeros(h, h)).collect(),
            wd: Matrix::zeros(v, h),
            wi: Matrix::zeros(h, f),
            wg: Matrix::zeros(h, h),
            bh: (0..n).map(|_| Vector::zeros(h)).collect(),
            bd: Vector::zeros(v),
            bi: Vector::zeros(h),
            bg: Vector::zeros(h),
        }
    }

    /// Transition matrix feeding layer `k` (2-based, as in `h_k`).
    pub fn transition(&self, k: usize) -> &Matrix {
        if self.wh_trans.is_empty() {
            &self.wh_rec
        } else {
            &self.wh_trans[k - 2]
        }
    }

    pub fn depth(&self) -> usize {
        self.bh.len()
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        fn mat<'a>(name: String, kind: TensorKind, m: &'a Matrix) -> TensorRef<'a> {
            TensorRef {
                name,
                kind,
                dims: vec![m.rows(), m.cols()],
                data: m.as_slice(),
            }
        }
        fn vec<'a>(name: String, v: &'a Vector) -> TensorRef<'a> {
            TensorRef {
                name,
                kind: TensorKind::Bias,
                dims: vec![v.len()],
                data: v.as_slice(),
            }
        }
        let mut out = vec![
            mat("embedding".into(), TensorKind::Embedding, &self.embedding),
            mat("ws".into(), TensorKind::Weight, &self.ws),
            mat("wh_rec".into(), TensorKind::Weight, &self.wh_rec),
        ];
        for (i, m) in self.wh_trans.iter().enumerate() {
            out.push(mat(format!("wh_trans.{}", i + 2), TensorKind::Weight, m));
        }
        out.push(mat("wd".into(), TensorKind::Weight, &self.wd));
        out.push(mat("wi".into(), TensorKind::Weight, &self.wi));
        out.push(mat("wg".into(), TensorKind::Weight, &self.wg));
        for (i, b) in self.bh.iter().enumerate() {
            out.push(vec(format!("bh.{}", i + 1), b));
        }
        out.push(vec("bd".into(), &self.bd));
        out.push(vec("bi".into(), &self.bi));
        out.push(vec("bg".into(), &self.bg));
        out
    }

    /// Mutable views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = vec![
            TensorMut {
                name: "embedding".into(),
                kind: TensorKind::Embedding,
                data: self.embedding.as_mut_slice(),
            },
            TensorMut {
                name: "ws".into(),
                kind: TensorKind::Weight,
                data: self.ws.as_mut_slice(),
            },
            TensorMut {
                name: "wh_rec".into(),
                kind: TensorKind::Weight,
                data: self.wh_rec.as_mut_slice(),
            },
        ];
        for (i, m) in self.wh_trans.iter_mut().enumerate() {
            out.push(TensorMut {
                name: format!("wh_trans.{}", i + 2),
                kind: TensorKind::Weight,
                data: m.as_mut_slice(),
            });
        }
        for (name, m) in [
            ("wd", &mut self.wd),
            ("wi", &mut self.wi),
            ("wg", &mut self.wg),
        ] {
            out.push(TensorMut {
                name: name.into(),
                kind: TensorKind::Weight,
                data: m.as_mut_slice(),
            });
        }
        for (i, b) in self.bh.iter_mut().enumerate() {
            out.push(TensorMut {
                name: format!("bh.{}", i + 1),
                kind: TensorKind::Bias,
                data: b.as_mut_slice(),
            });
        }
        for (name, b) in [
            ("bd", &mut self.bd),
            ("bi", &mut self.bi),
            ("bg", &mut self.bg),
        ] {
            out.push(TensorMut {
                name: name.into(),
                kind: TensorKind::Bias,
                data: b.as_mut_slice(),
            });
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// True when every tensor has the shape `config` prescribes.
    pub fn matches(&self, config: &ModelConfig) -> bool {
        let reference = ModelParams::zeros(config);
        let a = self.tensors();
        let b = reference.tensors();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|(x, y)| x.name == y.name && x.dims == y.dims)
    }
}

/// Glorot-uniform weights from a seeded ChaCha stream, zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |m: &mut Matrix| {
        let scale = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
        for w in m.as_mut_slice() {
            *w = rng.random_range(-scale..=scale);
        }
    };
    fill(&mut params.embedding);
    fill(&mut params.ws);
    fill(&mut params.wh_rec);
    for m in &mut params.wh_trans {
        fill(m);
    }
    fill(&mut params.wd);
    fill(&mut params.wi);
    fill(&mut params.wg);
    params
}

/// Inverted-dropout masks for one sequence. `None` means the site is not dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    /// One mask of length `D` per timestep, applied to `x(t)`.
    pub input: Option<Vec<Vector>>,
    /// Mask of length `H` applied to the projected image.
    pub image: Option<Vector>,
}

/// Everything one timestep produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub input_id: usize,
    /// Word vector after dropout.
    pub x: Vector,
    pub gate: Vector,
    pub pre: Vec<Vector>,
    pub hidden: Vec<Vector>,
    pub probs: Vector,
}

impl StepTrace {
    pub fn top_hidden(&self) -> &Vector {
        self.hidden.last().expect("depth >= 1")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub steps: Vec<StepTrace>,
    /// `Wi · feature + bi`, before dropout.
    pub projected_image: Vector,
    pub feature: Vector,
    pub masks: Option<DropoutMasks>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Projected image as fed to the first layer, i.e. after dropout.
    pub fn fed_image(&self) -> Vector {
        match self.masks.as_ref().and_then(|m| m.image.as_ref()) {
            Some(mask) => self
                .projected_image
                .iter()
                .zip(mask.iter())
                .map(|(p, m)| p * m)
                .collect::<Vec<_>>()
                .into(),
            None => self.projected_image.clone(),
        }
    }
}

pub fn project_image(params: &ModelParams, feature: &Vector) -> Result<Vector> {
    let mut p = tensor::matvec(&params.wi, feature)?;
    for (x, b) in p.iter_mut().zip(params.bi.iter()) {
        *x += b;
    }
    Ok(p)
}

/// Gate vector `g(t)` for timestep `t` (1-based).
pub fn compute_gate(params: &ModelParams, h_prev: &Vector, mode: FeedMode, t: usize) -> Vector {
    let h = params.bg.len();
    match mode {
        FeedMode::LearnedGate => {
            let mut a = params.bg.clone();
            params.wg.matvec_acc(h_prev, &mut a);
            a.iter_mut().for_each(|x| *x = tensor::sigmoid_scalar(*x));
            a
        }
        FeedMode::FirstStepOnly => Vector::filled(h, if t == 1 { 1.0 } else { 0.0 }),
        FeedMode::Always => Vector::filled(h, 1.0),
        FeedMode::None => Vector::zeros(h),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub gate: Vector,
    pub pre: Vec<Vector>,
    pub hidden: Vec<Vector>,
    pub probs: Vector,
}

/// One timestep of the recurrence. `x_t` and `projected_image` are taken as
/// given, so any dropout must already be applied.
pub fn step(
    params: &ModelParams,
    config: &ModelConfig,
    x_t: &Vector,
    h_prev: &Vector,
    projected_image: &Vector,
    t: usize,
) -> Result<StepOutput> {
    let h = config.hidden_dim;
    if x_t.len() != config.embed_dim {
        return Err(Error::shape(
            "step input",
            format!("embed_dim {}", config.embed_dim),
            format!("x of length {}", x_t.len()),
        ));
    }
    if h_prev.len() != h || projected_image.len() != h {
        return Err(Error::shape(
            "step state",
            format!("hidden_dim {h}"),
            format!(
                "h_prev {} / projected image {}",
                h_prev.len(),
                projected_image.len()
            ),
        ));
    }
    let act = config.activation;
    let gate = compute_gate(params, h_prev, config.feed_mode, t);

    let mut pre = Vec::with_capacity(config.depth);
    let mut hidden = Vec::with_capacity(config.depth);

    let mut a1 = Vector::zeros(h);
    params.ws.matvec_acc(x_t, &mut a1);
    params.wh_rec.matvec_acc(h_prev, &mut a1);
    for ((a, g), p) in a1.iter_mut().zip(gate.iter()).zip(projected_image.iter()) {
        *a += g * p;
    }
    for (a, b) in a1.iter_mut().zip(params.bh[0].iter()) {
        *a += b;
    }
    let mut h1 = a1.clone();
    act.apply(&mut h1);
    pre.push(a1);
    hidden.push(h1);

    for k in 2..=config.depth {
        let mut a = params.bh[k - 1].clone();
        params.transition(k).matvec_acc(&hidden[k - 2], &mut a);
        let mut hk = a.clone();
        act.apply(&mut hk);
        pre.push(a);
        hidden.push(hk);
    }

    let mut probs = params.bd.clone();
    params.wd.matvec_acc(hidden.last().unwrap(), &mut probs);
    tensor::softmax_in_place(&mut probs);

    Ok(StepOutput {
        gate,
        pre,
        hidden,
        probs,
    })
}

fn check_tokens(config: &ModelConfig, token_ids: &[usize]) -> Result<()> {
    if token_ids.len() < 2 {
        return Err(Error::Data(format!(
            "sequence needs at least START and END, got {} token(s)",
            token_ids.len()
        )));
    }
    if token_ids[0] != START || *token_ids.last().unwrap() != END {
        return Err(Error::Data(
            "sequence must begin with START and end with END".into(),
        ));
    }
    if let Some(&bad) = token_ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} out of range for vocabulary of size {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Teacher-forced pass: inputs are `token_ids[..T-1]`, targets `token_ids[1..]`.
pub fn forward_sequence(
    params: &ModelParams,
    config: &ModelConfig,
    token_ids: &[usize],
    feature: &Vector,
    masks: Option<&DropoutMasks>,
) -> Result<ForwardTrace> {
    check_tokens(config, token_ids)?;
    if feature.len() != config.feature_dim {
        return Err(Error::shape(
            "forward_sequence feature",
            format!("feature_dim {}", config.feature_dim),
            format!("feature of length {}", feature.len()),
        ));
    }
    let steps_n = token_ids.len() - 1;
    if let Some(m) = masks {
        if let Some(input) = &m.input {
            if input.len() < steps_n || input.iter().any(|v| v.len() != config.embed_dim) {
                return Err(Error::shape(
                    "dropout input masks",
                    format!("{steps_n} x {}", config.embed_dim),
                    format!("{} masks", input.len()),
                ));
            }
        }
        if let Some(image) = &m.image {
            if image.len() != config.hidden_dim {
                return Err(Error::shape(
                    "dropout image mask",
                    config.hidden_dim,
                    image.len(),
                ));
            }
        }
    }

    let projected_image = project_image(params, feature)?;
    let mut trace = ForwardTrace {
        steps: Vec::with_capacity(steps_n),
        projected_image,
        feature: feature.clone(),
        masks: masks.cloned(),
    };
    let fed_image = trace.fed_image();
    let zero_state = Vector::zeros(config.hidden_dim);

    for (i, &input_id) in token_ids[..steps_n].iter().enumerate() {
        let mut x: Vector = params.embedding.row(input_id).into();
        if let Some(mask) = masks.and_then(|m| m.input.as_ref()) {
            for (xv, m) in x.iter_mut().zip(mask[i].iter()) {
                *xv *= m;
            }
        }
        let h_prev = trace.steps.last().map_or(&zero_state, StepTrace::top_hidden);
        let out = step(params, config, &x, h_prev, &fed_image, i + 1)?;
        trace.steps.push(StepTrace {
            input_id,
            x,
            gate: out.gate,
            pre: out.pre,
            hidden: out.hidden,
            probs: out.probs,
        });
    }
    Ok(trace)
}

/// Mean over timesteps of `-ln y(t)[target_t]`.
pub fn cross_entropy_loss(trace: &ForwardTrace, target_ids: &[usize]) -> Result<f64> {
    if target_ids.len() != trace.len() {
        return Err(Error::Data(format!(
            "{} targets for a trace of {} timesteps",
            target_ids.len(),
            trace.len()
        )));
    }
    if trace.is_empty() {
        return Err(Error::Data("empty trace".into()));
    }
    let mut total = 0.0;
    for (step, &target) in trace.steps.iter().zip(target_ids) {
        let p = *step.probs.get(target).ok_or_else(|| {
            Error::Data(format!(
                "target id {target} out of range for vocabulary of size {}",
                step.probs.len()
            ))
        })?;
        total -= p.ln();
    }
    Ok(total / trace.len() as f64)
}

/// Forward pass without dropout followed by the cross-entropy of the
/// teacher-forced targets.
pub fn sequence_loss(
    params: &ModelParams,
    config: &ModelConfig,
    token_ids: &[usize],
    feature: &Vector,
) -> Result<f64> {
    let trace = forward_sequence(params, config, token_ids, feature, None)?;
    cross_entropy_loss(&trace, &token_ids[1..])
}
