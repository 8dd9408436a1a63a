//! The DessiLBI update family and baselines.
//!
//! Every penalized layer carries a triple `(W, V, Γ)`. `W` descends the
//! augmented loss `L̄(W,Γ) = L̂(W) + ‖W−Γ‖²/(2ν)`, `V` integrates the
//! Γ-gradient, and `Γ = κ·prox(V)` stays sparse. Biases and unpenalized
//! layers follow the plain SGD component of the chosen variant. All steps are
//! sequential and deterministic; one state is owned by one training driver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerSpec, NetworkSpec, ParamSet};
use crate::penalty::{self, Grouping, PenaltyKind, PenaltySpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Naive,
    Momentum,
    MomentumWeightDecay,
    MagnitudeScaled,
}

/// Per-epoch step size: `alpha0 · factor^(epoch / every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl AlphaSchedule {
    pub fn constant(alpha0: f64) -> AlphaSchedule {
        AlphaSchedule { alpha0, decay_factor: 1.0, decay_every: 1 }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let k = if self.decay_every == 0 { 0 } else { epoch / self.decay_every };
        self.alpha0 * self.decay_factor.powi(k as i32)
    }
}

impl Default for AlphaSchedule {
    fn default() -> AlphaSchedule {
        AlphaSchedule { alpha0: 0.1, decay_factor: 0.1, decay_every: 30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kappa: f64,
    pub nu: f64,
    pub alpha: AlphaSchedule,
    pub variant: Variant,
    /// Momentum factor τ.
    pub momentum: f64,
    /// Decoupled additive weight-decay coefficient.
    pub weight_decay: f64,
    /// Floor for the magnitude-scaling factor β.
    pub beta_floor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> OptimizerConfig {
        OptimizerConfig {
            kappa: 1.0,
            nu: 10.0,
            alpha: AlphaSchedule::default(),
            variant: Variant::Momentum,
            momentum: 0.9,
            weight_decay: 0.0,
            beta_floor: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa <= 0.0 || self.nu <= 0.0 || self.alpha.alpha0 <= 0.0 {
            return Err(Error::Argument(
                "kappa, nu, and alpha0 must all be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Argument(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 || self.beta_floor <= 0.0 {
            return Err(Error::Argument(
                "weight_decay must be >= 0 and beta_floor > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Sparse companion variables of one penalized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledVars {
    pub v: Tensor,
    pub gamma: Tensor,
    /// Subgradient of `Ω_λ` at `gamma`; kept current by the reformulated
    /// iteration, recoverable as `V − Γ/κ` on the plain path.
    pub subgrad: Tensor,
    pub grouping: Grouping,
}

/// Coupled optimizer state: live parameters plus `(V, Γ, g)` per penalized
/// layer and momentum buffers for everything.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledState {
    pub params: ParamSet,
    /// Parallel to `params.entries`; `None` for unpenalized layers.
    pub coupled: Vec<Option<CoupledVars>>,
    pub weight_momentum: Vec<Tensor>,
    pub bias_momentum: Vec<Option<Tensor>>,
    pub penalty: PenaltySpec,
    pub step: u64,
}

/// Grouping a layer's coupled variables use: conv weights group per output
/// filter under the group-lasso kind, everything else per element.
pub fn grouping_for(layer: &LayerSpec, kind: PenaltyKind) -> Grouping {
    match (layer, kind) {
        (LayerSpec::Conv2d { in_channels, kernel, .. }, PenaltyKind::GroupLasso) => {
            Grouping::per_filter(*in_channels, *kernel, *kernel)
        }
        _ => Grouping::per_element(),
    }
}

impl CoupledState {
    /// Fresh state: `V = Γ = 0`, zero momentum, zero subgradient.
    pub fn new(net: &NetworkSpec, params: ParamSet, penalty: PenaltySpec) -> Result<CoupledState> {
        penalty.validate()?;
        let mut coupled = Vec::with_capacity(params.entries.len());
        for entry in &params.entries {
            let layer = net.layer_at(&entry.path)?;
            let penalize = match layer {
                LayerSpec::Dense { penalize, .. } | LayerSpec::Conv2d { penalize, .. } => *penalize,
                _ => false,
            };
            if penalize {
                let grouping = grouping_for(layer, penalty.kind);
                grouping.check(&entry.weight)?;
                coupled.push(Some(CoupledVars {
                    v: Tensor::zeros(entry.weight.shape()),
                    gamma: Tensor::zeros(entry.weight.shape()),
                    subgrad: Tensor::zeros(entry.weight.shape()),
                    grouping,
                }));
            } else {
                coupled.push(None);
            }
        }
        let weight_momentum =
            params.entries.iter().map(|e| Tensor::zeros(e.weight.shape())).collect();
        let bias_momentum = params
            .entries
            .iter()
            .map(|e| e.bias.as_ref().map(|b| Tensor::zeros(b.shape())))
            .collect();
        Ok(CoupledState { params, coupled, weight_momentum, bias_momentum, penalty, step: 0 })
    }

    /// State with no coupled variables at all; the carrier for plain SGD
    /// baselines and masked retraining.
    pub fn unpenalized(params: ParamSet) -> CoupledState {
        let n = params.entries.len();
        let weight_momentum =
            params.entries.iter().map(|e| Tensor::zeros(e.weight.shape())).collect();
        let bias_momentum = params
            .entries
            .iter()
            .map(|e| e.bias.as_ref().map(|b| Tensor::zeros(b.shape())))
            .collect();
        CoupledState {
            params,
            coupled: vec![None; n],
            weight_momentum,
            bias_momentum,
            penalty: PenaltySpec::lasso(0.0),
            step: 0,
        }
    }

    /// Largest `‖Γ − κ·prox(V)‖∞` over penalized layers. Zero-extent layers
    /// trivially satisfy the invariant.
    pub fn invariant_deviation(&self, kappa: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for vars in self.coupled.iter().flatten() {
            let expect = penalty::prox(&vars.v, &self.penalty, &vars.grouping)
                .expect("state grouping is valid")
                .scale(kappa);
            for (a, b) in expect.data().iter().zip(vars.gamma.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    fn check_grads(&self, grads: &ParamSet) -> Result<()> {
        if grads.entries.len() != self.params.entries.len() {
            return Err(Error::Dimension("gradient set does not match state".into()));
        }
        for (g, p) in grads.entries.iter().zip(&self.params.entries) {
            if g.weight.shape() != p.weight.shape() {
                return Err(Error::Dimension(format!(
                    "gradient shape {:?} does not match weights {:?} at {}",
                    g.weight.shape(),
                    p.weight.shape(),
                    p.path
                )));
            }
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        if !self.params.is_finite() {
            return Err(Error::Numeric("non-finite parameter after update".into()));
        }
        Ok(())
    }
}

fn bias_sgd(
    state: &mut CoupledState,
    grads: &ParamSet,
    idx: usize,
    rate: f64,
    tau: f64,
    weight_decay: f64,
) {
    let (Some(bias), Some(gb)) =
        (&mut state.params.entries[idx].bias, &grads.entries[idx].bias)
    else {
        return;
    };
    let buf = state.bias_momentum[idx].as_mut().expect("momentum allocated with bias");
    for ((b, m), g) in bias.data_mut().iter_mut().zip(buf.data_mut()).zip(gb.data()) {
        *m = tau * *m + g;
        let decay = if weight_decay != 0.0 { weight_decay * *b } else { 0.0 };
        *b -= rate * *m + decay;
    }
}

/// One update of the plain discretization:
/// `W ← W − κα·∇_W L̄`, `V ← V − α·∇_Γ L̄`, `Γ ← κ·prox(V)`,
/// with `∇_W L̄ = grads + (W−Γ)/ν` and `∇_Γ L̄ = (Γ−W)/ν`.
pub fn dessilbi_step(
    state: &mut CoupledState,
    grads: &ParamSet,
    cfg: &OptimizerConfig,
    alpha: f64,
) -> Result<()> {
    step_inner(state, grads, cfg, alpha, Mode::Plain { momentum: false })
}

/// Momentum (and optional decoupled weight-decay) variant: the velocity
/// accumulates `∇_W L̄`, the `V`/`Γ` updates are unchanged.
pub fn dessilbi_step_momentum(
    state: &mut CoupledState,
    grads: &ParamSet,
    cfg: &OptimizerConfig,
    alpha: f64,
) -> Result<()> {
    step_inner(state, grads, cfg, alpha, Mode::Plain { momentum: true })
}

/// Magnitude-scaling variant: per weight/filter `j` of layer `i`,
/// `β_j = max(β_min, min(1, 1/‖W_j‖*)·(1 − supp(Γ^i)/#groups))` damps the
/// `V` update and `ε_j = ‖W_j‖*` rescales `Γ`, so `V` magnitudes stay
/// comparable across layers. `‖·‖*` is `|·|` for element groups and the
/// ℓ2-norm for filter groups.
pub fn dessilbi_step_scaled(
    state: &mut CoupledState,
    grads: &ParamSet,
    cfg: &OptimizerConfig,
    alpha: f64,
) -> Result<()> {
    step_inner(state, grads, cfg, alpha, Mode::Scaled)
}

enum Mode {
    Plain { momentum: bool },
    Scaled,
}

fn step_inner(
    state: &mut CoupledState,
    grads: &ParamSet,
    cfg: &OptimizerConfig,
    alpha: f64,
    mode: Mode,
) -> Result<()> {
    cfg.validate()?;
    state.check_grads(grads)?;
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::Argument(format!("step size must be positive, got {alpha}")));
    }
    let (kappa, nu) = (cfg.kappa, cfg.nu);
    let rate = kappa * alpha;
    let (tau, wd) = match mode {
        Mode::Plain { momentum: true } => (cfg.momentum, cfg.weight_decay),
        _ => (0.0, 0.0),
    };
    for idx in 0..state.params.entries.len() {
        match &mut state.coupled[idx] {
            Some(vars) => {
                let w = &mut state.params.entries[idx].weight;
                let gw = &grads.entries[idx].weight;
                // scaling factors come from W_k, before the W update
                let scaling = match mode {
                    Mode::Scaled => Some(scaling_factors(w, &vars.gamma, &vars.grouping, cfg)),
                    Mode::Plain { .. } => None,
                };
                let buf = &mut state.weight_momentum[idx];
                let n = w.len();
                let wd_old: Vec<f64> = if wd != 0.0 { w.data().to_vec() } else { Vec::new() };
                for i in 0..n {
                    let wv = w.data()[i];
                    let gv = vars.gamma.data()[i];
                    let grad_w_bar = gw.data()[i] + (wv - gv) / nu;
                    let grad_gamma_bar = (gv - wv) / nu;
                    let direction = if tau != 0.0 || matches!(mode, Mode::Plain { momentum: true }) {
                        let m = &mut buf.data_mut()[i];
                        *m = tau * *m + grad_w_bar;
                        *m
                    } else {
                        grad_w_bar
                    };
                    w.data_mut()[i] -= rate * direction;
                    let beta = scaling.as_ref().map_or(1.0, |s| s.beta[i / vars.grouping.chunk]);
                    vars.v.data_mut()[i] -= alpha * beta * grad_gamma_bar;
                }
                if wd != 0.0 {
                    for (wv, old) in w.data_mut().iter_mut().zip(&wd_old) {
                        *wv -= wd * old;
                    }
                }
                let prox = penalty::prox(&vars.v, &state.penalty, &vars.grouping)?;
                vars.gamma = match &scaling {
                    None => prox.scale(kappa),
                    Some(s) => {
                        let mut g = prox;
                        for (i, v) in g.data_mut().iter_mut().enumerate() {
                            *v *= kappa * s.epsilon[i / vars.grouping.chunk];
                        }
                        g
                    }
                };
            }
            None => {
                let w = &mut state.params.entries[idx].weight;
                let gw = &grads.entries[idx].weight;
                let buf = &mut state.weight_momentum[idx];
                for ((wv, m), g) in w.data_mut().iter_mut().zip(buf.data_mut()).zip(gw.data()) {
                    *m = tau * *m + g;
                    let decay = if wd != 0.0 { wd * *wv } else { 0.0 };
                    *wv -= rate * *m + decay;
                }
            }
        }
        bias_sgd(state, grads, idx, rate, tau, wd);
    }
    state.step += 1;
    state.check_finite()
}

struct ScalingFactors {
    beta: Vec<f64>,
    epsilon: Vec<f64>,
}

fn scaling_factors(
    w: &Tensor,
    gamma: &Tensor,
    grouping: &Grouping,
    cfg: &OptimizerConfig,
) -> ScalingFactors {
    let groups = grouping.group_count(w.len());
    let active = penalty::active_groups(gamma, grouping);
    let vacancy = 1.0 - if groups == 0 { 0.0 } else { active as f64 / groups as f64 };
    let mut beta = Vec::with_capacity(groups);
    let mut epsilon = Vec::with_capacity(groups);
    for g in w.data().chunks_exact(grouping.chunk) {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = if norm > 0.0 { (1.0 / norm).min(1.0) } else { 1.0 };
        beta.push((inv * vacancy).max(cfg.beta_floor));
        epsilon.push(norm);
    }
    ScalingFactors { beta, epsilon }
}

/// One update of the equivalent reformulated iteration that maintains the
/// subgradient `g` explicitly:
/// `W ← W − κα·∇_W L̄`,
/// `Γ ← prox_{κΩ}(Γ + κ(g − α·∇_Γ L̄))`,
/// `g ← g − (Γ' − Γ + κα·∇_Γ L̄)/κ`.
/// From the shared zero initialization this reproduces the plain path.
pub fn lbi_reformulated_step(
    state: &mut CoupledState,
    grads: &ParamSet,
    cfg: &OptimizerConfig,
    alpha: f64,
) -> Result<()> {
    cfg.validate()?;
    state.check_grads(grads)?;
    let (kappa, nu) = (cfg.kappa, cfg.nu);
    let rate = kappa * alpha;
    let threshold = kappa * state.penalty.lambda;
    for idx in 0..state.params.entries.len() {
        match &mut state.coupled[idx] {
            Some(vars) => {
                let w = &mut state.params.entries[idx].weight;
                let gw = &grads.entries[idx].weight;
                let n = w.len();
                let mut arg = Tensor::zeros(w.shape());
                let mut grad_gamma_bar = vec![0.0; n];
                for i in 0..n {
                    let wv = w.data()[i];
                    let gv = vars.gamma.data()[i];
                    let ggb = (gv - wv) / nu;
                    grad_gamma_bar[i] = ggb;
                    let grad_w_bar = gw.data()[i] + (wv - gv) / nu;
                    w.data_mut()[i] -= rate * grad_w_bar;
                    arg.data_mut()[i] = gv + kappa * (vars.subgrad.data()[i] - alpha * ggb);
                }
                let gamma_new = penalty::prox_scaled(&arg, threshold, &vars.grouping)?;
                for i in 0..n {
                    let delta = gamma_new.data()[i] - vars.gamma.data()[i]
                        + kappa * alpha * grad_gamma_bar[i];
                    vars.subgrad.data_mut()[i] -= delta / kappa;
                }
                vars.gamma = gamma_new;
                // keep V in sync so the Γ = κ·prox(V) invariant stays checkable
                let mut v = vars.subgrad.clone();
                v.axpy(1.0 / kappa, &vars.gamma)?;
                vars.v = v;
            }
            None => {
                let w = &mut state.params.entries[idx].weight;
                let gw = &grads.entries[idx].weight;
                for (wv, g) in w.data_mut().iter_mut().zip(gw.data()) {
                    *wv -= rate * g;
                }
            }
        }
        bias_sgd(state, grads, idx, rate, 0.0, 0.0);
    }
    state.step += 1;
    state.check_finite()
}

/// Mirror-descent step with the elastic-net mirror
/// `Ω̄(W) = Ω_λ(W) + ‖W‖²/(2κ)`:
/// `Z ← Z − α·∇L(W)`, then `W = κ·prox(Z)`.
pub fn mda_step(
    z: &Tensor,
    grads: &Tensor,
    alpha: f64,
    kappa: f64,
    spec: &PenaltySpec,
    grouping: &Grouping,
) -> Result<(Tensor, Tensor)> {
    if kappa <= 0.0 {
        return Err(Error::Argument(format!("kappa must be positive, got {kappa}")));
    }
    if alpha < 0.0 {
        return Err(Error::Argument(format!("alpha must be non-negative, got {alpha}")));
    }
    let mut z_next = z.clone();
    z_next.axpy(-alpha, grads)?;
    let w_next = penalty::prox(&z_next, spec, grouping)?.scale(kappa);
    Ok((z_next, w_next))
}

/// Standard momentum SGD with decoupled additive weight decay, ignoring any
/// coupled variables the state carries.
pub fn sgd_step(
    state: &mut CoupledState,
    grads: &ParamSet,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    state.check_grads(grads)?;
    for idx in 0..state.params.entries.len() {
        let w = &mut state.params.entries[idx].weight;
        let gw = &grads.entries[idx].weight;
        let buf = &mut state.weight_momentum[idx];
        for ((wv, m), g) in w.data_mut().iter_mut().zip(buf.data_mut()).zip(gw.data()) {
            *m = momentum * *m + g;
            let decay = if weight_decay != 0.0 { weight_decay * *wv } else { 0.0 };
            *wv -= lr * *m + decay;
        }
        bias_sgd(state, grads, idx, lr, momentum, weight_decay);
    }
    state.step += 1;
    state.check_finite()
}

/// Largest admissible constant step size, `2/(κ·(Lip + 1/ν))`.
pub fn max_step_size(kappa: f64, nu: f64, lip: f64) -> Result<f64> {
    if kappa <= 0.0 || nu <= 0.0 || lip <= 0.0 {
        return Err(Error::Argument(
            "max_step_size needs positive kappa, nu, and Lipschitz constant".into(),
        ));
    }
    Ok(2.0 / (kappa * (lip + 1.0 / nu)))
}

/// Applies the step matching `cfg.variant`.
pub fn variant_step(
    state: &mut CoupledState,
    grads: &ParamSet,
    cfg: &OptimizerConfig,
    alpha: f64,
) -> Result<()> {
    match cfg.variant {
        Variant::Naive => dessilbi_step(state, grads, cfg, alpha),
        Variant::Momentum | Variant::MomentumWeightDecay => {
            dessilbi_step_momentum(state, grads, cfg, alpha)
        }
        Variant::MagnitudeScaled => dessilbi_step_scaled(state, grads, cfg, alpha),
    }
}
