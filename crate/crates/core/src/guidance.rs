//! Guided sampling: a positive and a negative noise prediction combined as
//! `eps_pos + gamma * (eps_pos - eps_neg)`.
//!
//! The negative prediction depends on the method: the null class (CFG),
//! orthogonal token perturbations at selected blocks (TPG), identity
//! attention (PAG) or blurred attention (SEG).

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, HookAction, HookSite, Hooks};
use crate::diffusion::{ddim_step, ddpm_step_to, sampling_timesteps, NoiseSchedule};
use crate::error::{Error, Result};
use crate::perturb::{PerturbKind, PerturbOp};
use crate::rng::{Domain, SeededRng};

/// Anything that predicts noise under per-call hooks.
pub trait EpsModel: Sync {
    fn predict(
        &self,
        x: &Array2<f64>,
        t: usize,
        classes: &[usize],
        hooks: &Hooks,
    ) -> Result<Array2<f64>>;
    fn sample_dim(&self) -> usize;
    fn depth(&self) -> usize;
    fn tokens(&self) -> usize;
    fn null_class(&self) -> usize;
    /// Whether the null class was seen in training.
    fn null_trained(&self) -> bool;
    fn default_layers(&self) -> Vec<usize>;
}

impl EpsModel for Denoiser {
    fn predict(
        &self,
        x: &Array2<f64>,
        t: usize,
        classes: &[usize],
        hooks: &Hooks,
    ) -> Result<Array2<f64>> {
        Denoiser::predict(self, x, t, classes, hooks)
    }

    fn sample_dim(&self) -> usize {
        self.config().sample_dim()
    }

    fn depth(&self) -> usize {
        self.config().depth
    }

    fn tokens(&self) -> usize {
        self.config().tokens()
    }

    fn null_class(&self) -> usize {
        self.config().null_class()
    }

    fn null_trained(&self) -> bool {
        Denoiser::null_trained(self)
    }

    fn default_layers(&self) -> Vec<usize> {
        self.config().default_perturbed_layers()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    None,
    Cfg,
    Tpg,
    Pag,
    Seg,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::None,
        Method::Cfg,
        Method::Tpg,
        Method::Pag,
        Method::Seg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Cfg => "cfg",
            Method::Tpg => "tpg",
            Method::Pag => "pag",
            Method::Seg => "seg",
        }
    }

    pub fn default_gamma(self) -> f64 {
        match self {
            Method::None => 0.0,
            Method::Cfg => 5.0,
            Method::Tpg | Method::Pag | Method::Seg => 3.0,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown guidance method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub method: Method,
    pub gamma: f64,
    /// Blocks that receive the negative-pass modification; `None` picks the
    /// model's middle third.
    pub layers: Option<Vec<usize>>,
    pub perturb_kind: PerturbKind,
    /// Where token perturbations act: the block's hidden tokens
    /// (`token-input`) or only the attention branch (`attention-input`).
    pub perturb_site: HookSite,
    pub seg_sigma: f64,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::for_method(Method::Tpg)
    }
}

impl GuidanceConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            gamma: method.default_gamma(),
            layers: None,
            perturb_kind: PerturbKind::Shuffle,
            perturb_site: HookSite::TokenInput,
            seg_sigma: 2.0,
            seed: 0,
        }
    }

    pub fn resolved_layers<M: EpsModel + ?Sized>(&self, model: &M) -> Vec<usize> {
        self.layers
            .clone()
            .unwrap_or_else(|| model.default_layers())
    }

    pub fn validate<M: EpsModel + ?Sized>(&self, model: &M) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        let depth = model.depth();
        if let Some(&layer) = self.resolved_layers(model).iter().find(|&&l| l >= depth) {
            return Err(Error::InvalidHook { layer, depth });
        }
        if self.method == Method::Seg && !(self.seg_sigma > 0.0 && self.seg_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "seg_sigma must be positive, got {}",
                self.seg_sigma
            )));
        }
        if self.perturb_site == HookSite::AttentionMap {
            return Err(Error::InvalidConfig(
                "token perturbations act at token-input or attention-input".into(),
            ));
        }
        if self.method == Method::Cfg && !model.null_trained() {
            return Err(Error::UnsupportedMethod(
                "CFG needs a model trained with cond_dropout_p > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Null,
    Class(usize),
}

impl Condition {
    pub fn class_index<M: EpsModel + ?Sized>(self, model: &M) -> usize {
        match self {
            Condition::Null => model.null_class(),
            Condition::Class(c) => c,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Null => f.write_str("null"),
            Condition::Class(c) => write!(f, "{c}"),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "null" | "none" | "uncond" | "\u{2205}" => Ok(Condition::Null),
            other => other.parse().map(Condition::Class).map_err(|_| {
                Error::InvalidConfig(format!(
                    "condition must be a class index or \"null\", got {s:?}"
                ))
            }),
        }
    }
}

impl Serialize for Condition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Condition::Null => s.serialize_str("null"),
            Condition::Class(c) => s.serialize_u64(*c as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(c) => Ok(Condition::Class(c as usize)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Ddim,
    Ddpm,
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddim" => Ok(Solver::Ddim),
            "ddpm" => Ok(Solver::Ddpm),
            _ => Err(Error::InvalidConfig(format!("unknown solver {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleRun {
    pub solver: Solver,
    pub steps: usize,
    pub batch: usize,
    pub condition: Condition,
    pub seed: u64,
    /// Keep every intermediate `x_t`.
    pub record_trajectory: bool,
}

impl Default for SampleRun {
    fn default() -> Self {
        Self {
            solver: Solver::Ddim,
            steps: 50,
            batch: 16,
            condition: Condition::Null,
            seed: 0,
            record_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub samples: Array2<f64>,
    /// `(t, x_t)` from `x_T` down to the final sample at `t = 0`.
    pub trajectory: Vec<(usize, Array2<f64>)>,
    pub forward_passes: usize,
}

/// `eps_pos + gamma * (eps_pos - eps_neg)`.
pub fn combine(eps_pos: &Array2<f64>, eps_neg: &Array2<f64>, gamma: f64) -> Result<Array2<f64>> {
    if eps_pos.dim() != eps_neg.dim() {
        return Err(Error::ShapeMismatch(format!(
            "combine: {:?} vs {:?}",
            eps_pos.dim(),
            eps_neg.dim()
        )));
    }
    Ok(ndarray::Zip::from(eps_pos)
        .and(eps_neg)
        .map_collect(|&p, &n| p + gamma * (p - n)))
}

/// Hooks for the negative pass at step `t`. Token perturbations at block
/// `k` are drawn from `(gcfg.seed, k, t)`.
pub fn negative_hooks<M: EpsModel + ?Sized>(
    model: &M,
    gcfg: &GuidanceConfig,
    t: usize,
) -> Result<Hooks> {
    let mut hooks = Hooks::none();
    for k in gcfg.resolved_layers(model) {
        hooks = match gcfg.method {
            Method::Tpg => {
                let op = PerturbOp::for_site(gcfg.perturb_kind, model.tokens(), gcfg.seed, k, t)?;
                hooks.with_at(k, gcfg.perturb_site, HookAction::TokenPerturb(op))?
            }
            Method::Pag => hooks.with(k, HookAction::AttentionIdentity)?,
            Method::Seg => hooks.with(
                k,
                HookAction::AttentionBlur {
                    sigma: gcfg.seg_sigma,
                },
            )?,
            Method::None | Method::Cfg => return Ok(Hooks::none()),
        };
    }
    Ok(hooks)
}

pub fn negative_eps<M: EpsModel + ?Sized>(
    model: &M,
    x_t: &Array2<f64>,
    t: usize,
    classes: &[usize],
    gcfg: &GuidanceConfig,
) -> Result<Array2<f64>> {
    match gcfg.method {
        Method::None => Err(Error::UnsupportedMethod(
            "unguided sampling has no negative prediction".into(),
        )),
        Method::Cfg => {
            if !model.null_trained() {
                return Err(Error::UnsupportedMethod(
                    "CFG needs a model trained with cond_dropout_p > 0".into(),
                ));
            }
            let null = vec![model.null_class(); classes.len()];
            model.predict(x_t, t, &null, &Hooks::none())
        }
        Method::Tpg | Method::Pag | Method::Seg => {
            if gcfg.resolved_layers(model).is_empty() {
                log::warn!("{} with no layers: negative equals positive", gcfg.method);
            }
            let hooks = negative_hooks(model, gcfg, t)?;
            model.predict(x_t, t, classes, &hooks)
        }
    }
}

/// Positive and negative predictions at `x_t`. The negative is `None`
/// for unguided runs.
pub fn eps_pair<M: EpsModel + ?Sized>(
    model: &M,
    x_t: &Array2<f64>,
    t: usize,
    classes: &[usize],
    gcfg: &GuidanceConfig,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    let pos = model.predict(x_t, t, classes, &Hooks::none())?;
    if gcfg.method == Method::None {
        return Ok((pos, None));
    }
    let neg = negative_eps(model, x_t, t, classes, gcfg)?;
    Ok((pos, Some(neg)))
}

/// Runs a full reverse trajectory with one shared condition.
pub fn sample<M: EpsModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    gcfg: &GuidanceConfig,
    run: &SampleRun,
) -> Result<SampleOutput> {
    let classes = vec![run.condition.class_index(model); run.batch];
    sample_with_classes(model, sched, gcfg, run, &classes)
}

/// Like [`sample`] with one class per batch row; `run.batch` and
/// `run.condition` are ignored. The initial noise comes from stream
/// `(run.seed, InitNoise)` and solver noise at step `t` from
/// `(run.seed, Solver, t)`, so neither depends on how many forward passes
/// the method takes.
pub fn sample_with_classes<M: EpsModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    gcfg: &GuidanceConfig,
    run: &SampleRun,
    classes: &[usize],
) -> Result<SampleOutput> {
    if classes.is_empty() {
        return Err(Error::InvalidConfig("batch must be at least 1".into()));
    }
    gcfg.validate(model)?;
    let ts = sampling_timesteps(sched.steps(), run.steps)?;
    let dim = model.sample_dim();
    let b = classes.len();
    let mut init = SeededRng::new(run.seed, Domain::InitNoise, 0, 0);
    let mut x = Array2::from_shape_vec((b, dim), init.normals(b * dim)).expect("sized");
    let mut trajectory = Vec::new();
    if run.record_trajectory {
        trajectory.push((ts[0], x.clone()));
    }
    let mut passes = 0;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let (pos, neg) = eps_pair(model, &x, t, classes, gcfg)?;
        passes += 1 + usize::from(neg.is_some());
        let eps = match neg {
            Some(neg) => combine(&pos, &neg, gcfg.gamma)?,
            None => pos,
        };
        x = match run.solver {
            Solver::Ddim => ddim_step(&x, &eps, t, t_prev, sched)?,
            Solver::Ddpm => {
                let mut rng = SeededRng::new(run.seed, Domain::Solver, 0, t as u64);
                ddpm_step_to(&x, &eps, t, t_prev, sched, &mut rng)?
            }
        };
        if run.record_trajectory {
            trajectory.push((t_prev, x.clone()));
        }
    }
    Ok(SampleOutput {
        samples: x,
        trajectory,
        forward_passes: passes,
    })
}
