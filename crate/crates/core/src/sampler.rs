//! Euler integration of the probability-flow ODE with windowed guidance.
//!
//! Time runs from `t = 1` (noise) to `t = 0` (data). The network predicts
//! `v ~ x - eps`, so each step is `x <- x + dt * v`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batcher::{standard_normal, ConditionSet, ContextTypes};
use crate::codec::{self, ActivityMask, StemLatent, StemWaveform, DEFAULT_MIX_DBFS, LATENT_DIM};
use crate::corpus::StemType;
use crate::error::{Error, Result};
use crate::model::{Model, ModelInput};

/// Anything that maps a batch of noised latents and conditions to velocities.
pub trait VelocityField {
    fn velocities(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<Vec<f64>>>;
}

impl VelocityField for Model {
    fn velocities(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<Vec<f64>>> {
        self.forward_batch(inputs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub num_steps: usize,
    pub cfg_scale: f64,
    /// Inclusive 1-based step interval. `None` scales the 32-step default.
    pub cfg_window: Option<(usize, usize)>,
    pub share_noise: bool,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            num_steps: 32,
            cfg_scale: 3.0,
            cfg_window: None,
            share_noise: true,
            seed: 0,
        }
    }
}

impl SampleConfig {
    /// Guidance window; `[3, 28]` at 32 steps.
    pub fn window(&self) -> (usize, usize) {
        self.cfg_window.unwrap_or_else(|| {
            let n = self.num_steps as f64;
            let lo = (3.0 * n / 32.0).round() as usize;
            let hi = (28.0 * n / 32.0).round() as usize;
            (lo.clamp(1, self.num_steps), hi.clamp(1, self.num_steps))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 1 {
            return Err(Error::InvalidArgument("num_steps must be at least 1".into()));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::InvalidArgument("cfg_scale must be finite".into()));
        }
        let (lo, hi) = self.window();
        if lo < 1 || hi > self.num_steps {
            return Err(Error::InvalidArgument(format!(
                "guidance window [{lo}, {hi}] outside [1, {}]",
                self.num_steps
            )));
        }
        Ok(())
    }
}

fn in_window(step: usize, window: (usize, usize)) -> bool {
    window.0 <= step && step <= window.1
}

/// Guided velocity at 1-based `step`.
pub fn cfg_velocity(
    v_cond: &[f64],
    v_uncond: &[f64],
    scale: f64,
    step: usize,
    window: (usize, usize),
) -> Result<Vec<f64>> {
    if v_cond.len() != v_uncond.len() {
        return Err(Error::Shape(format!(
            "conditional velocity has {} values, unconditional {}",
            v_cond.len(),
            v_uncond.len()
        )));
    }
    if !in_window(step, window) {
        return Ok(v_cond.to_vec());
    }
    Ok(v_cond
        .iter()
        .zip(v_uncond)
        .map(|(c, u)| u + scale * (c - u))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemRequest {
    pub stem_type: StemType,
    pub activity: Option<ActivityMask>,
}

impl StemRequest {
    pub fn new(stem_type: StemType) -> Self {
        Self {
            stem_type,
            activity: None,
        }
    }
}

/// Fields shared by every request of one generation call.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedConditions {
    pub style_token: usize,
    pub tempo_bpm: u32,
    pub frames: usize,
    pub submix: Option<Arc<StemLatent>>,
    pub context_types: ContextTypes,
}

impl SharedConditions {
    pub fn new(style_token: usize, tempo_bpm: u32, frames: usize) -> Self {
        Self {
            style_token,
            tempo_bpm,
            frames,
            submix: None,
            context_types: ContextTypes::default(),
        }
    }

    pub fn condition_set(&self, req: &StemRequest) -> ConditionSet {
        ConditionSet {
            stem_type: req.stem_type,
            style_token: self.style_token,
            tempo_bpm: self.tempo_bpm,
            context_types: self.context_types,
            submix: self.submix.clone(),
            activity: req.activity.clone(),
            drop: Default::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub latents: Vec<StemLatent>,
    /// Starting state of every request, kept for inspection.
    pub initial_noise: Vec<Vec<f64>>,
}

/// Integrate from noise to data for all requests in lockstep.
pub fn euler_sample(
    field: &dyn VelocityField,
    requests: &[StemRequest],
    shared: &SharedConditions,
    config: &SampleConfig,
) -> Result<SampleOutput> {
    config.validate()?;
    if requests.is_empty() {
        return Ok(SampleOutput {
            latents: Vec::new(),
            initial_noise: Vec::new(),
        });
    }
    let len = shared.frames * LATENT_DIM;
    if let Some(sm) = &shared.submix {
        if sm.frames() != shared.frames {
            return Err(Error::Shape(format!(
                "context has {} frames, requested {}",
                sm.frames(),
                shared.frames
            )));
        }
    }
    for r in requests {
        if let Some(m) = &r.activity {
            if m.len() != shared.frames {
                return Err(Error::Shape(format!(
                    "activity mask has {} frames, requested {}",
                    m.len(),
                    shared.frames
                )));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let initial_noise: Vec<Vec<f64>> = if config.share_noise {
        vec![standard_normal(len, &mut rng); requests.len()]
    } else {
        requests.iter().map(|_| standard_normal(len, &mut rng)).collect()
    };
    let cond: Vec<ConditionSet> = requests.iter().map(|r| shared.condition_set(r)).collect();
    let uncond: Vec<ConditionSet> = cond.iter().map(|c| c.unconditional()).collect();
    let window = config.window();
    let n = config.num_steps;
    let dt = 1.0 / n as f64;
    let mut xs = initial_noise.clone();
    for step in 1..=n {
        let t = 1.0 - (step - 1) as f64 * dt;
        let guided = in_window(step, window);
        let mut inputs: Vec<ModelInput<'_>> = xs
            .iter()
            .zip(&cond)
            .map(|(x, c)| ModelInput {
                x_t: x,
                t,
                conditions: c,
            })
            .collect();
        if guided {
            inputs.extend(xs.iter().zip(&uncond).map(|(x, c)| ModelInput {
                x_t: x,
                t,
                conditions: c,
            }));
        }
        let v = field.velocities(&inputs)?;
        drop(inputs);
        let r = requests.len();
        for i in 0..r {
            let vhat = if guided {
                cfg_velocity(&v[i], &v[r + i], config.cfg_scale, step, window)?
            } else {
                v[i].clone()
            };
            if vhat.len() != len {
                return Err(Error::Shape("velocity field returned the wrong length".into()));
            }
            for (x, dv) in xs[i].iter_mut().zip(&vhat) {
                *x += dt * dv;
            }
            if xs[i].iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteState { step });
            }
        }
    }
    let latents = xs
        .into_iter()
        .map(|x| StemLatent::from_vec(shared.frames, x))
        .collect::<Result<_>>()?;
    Ok(SampleOutput {
        latents,
        initial_noise,
    })
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub requests: Vec<StemRequest>,
    pub latents: Vec<StemLatent>,
    pub stems: Vec<StemWaveform>,
    pub initial_noise: Vec<Vec<f64>>,
}

fn decode_all(requests: &[StemRequest], sample: SampleOutput) -> GenerationOutput {
    let stems = sample
        .latents
        .iter()
        .zip(requests)
        .map(|(l, r)| codec::decode(l, Some(r.stem_type)))
        .collect();
    GenerationOutput {
        requests: requests.to_vec(),
        latents: sample.latents,
        stems,
        initial_noise: sample.initial_noise,
    }
}

/// Unity-gain sum of the stems normalised to the mix loudness target.
pub fn mix_stems<'a>(stems: impl IntoIterator<Item = &'a StemWaveform>) -> Result<StemWaveform> {
    let stems: Vec<&StemWaveform> = stems.into_iter().collect();
    let owned: Vec<StemWaveform> = stems.iter().map(|s| (*s).clone()).collect();
    let gains = vec![1.0; owned.len()];
    codec::normalize_mix(&codec::mix(&owned, &gains)?, DEFAULT_MIX_DBFS)
}

/// Generate synchronized stems without context. Returns the stems and their
/// normalised mix.
pub fn generate_from_scratch(
    field: &dyn VelocityField,
    requests: &[StemRequest],
    shared: &SharedConditions,
    config: &SampleConfig,
) -> Result<(GenerationOutput, StemWaveform)> {
    if requests.is_empty() {
        return Err(Error::InvalidArgument("no stems requested".into()));
    }
    let mut scratch = shared.clone();
    scratch.submix = None;
    scratch.context_types = ContextTypes::default();
    let out = decode_all(requests, euler_sample(field, requests, &scratch, config)?);
    let mix = mix_stems(&out.stems)?;
    Ok((out, mix))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextStem {
    pub stem_type: StemType,
    pub latent: StemLatent,
}

/// Generate stems that accompany the given context stems.
pub fn generate_conditional(
    field: &dyn VelocityField,
    context: &[ContextStem],
    requests: &[StemRequest],
    shared: &SharedConditions,
    config: &SampleConfig,
) -> Result<GenerationOutput> {
    if context.is_empty() {
        return Err(Error::InvalidArgument("conditional generation needs context stems".into()));
    }
    if let Some(bad) = context.iter().find(|c| c.latent.frames() != shared.frames) {
        return Err(Error::Shape(format!(
            "context stem has {} frames, requested {}",
            bad.latent.frames(),
            shared.frames
        )));
    }
    let mut cond = shared.clone();
    cond.submix = Some(Arc::new(StemLatent::sum(
        shared.frames,
        context.iter().map(|c| &c.latent),
    )?));
    cond.context_types = ContextTypes::from_types(context.iter().map(|c| c.stem_type));
    Ok(decode_all(requests, euler_sample(field, requests, &cond, config)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkflowMode {
    KPass,
    TwoPass,
    OnePass,
}

impl WorkflowMode {
    pub const ALL: [WorkflowMode; 3] = [WorkflowMode::KPass, WorkflowMode::TwoPass, WorkflowMode::OnePass];

    /// Request counts of each pass.
    pub fn pass_sizes(self, k: usize) -> Vec<usize> {
        match self {
            WorkflowMode::KPass => vec![1; k],
            WorkflowMode::TwoPass if k == 1 => vec![1],
            WorkflowMode::TwoPass => vec![k.div_ceil(2), k / 2],
            WorkflowMode::OnePass => vec![k],
        }
    }
}

impl fmt::Display for WorkflowMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkflowMode::KPass => "k_pass",
            WorkflowMode::TwoPass => "two_pass",
            WorkflowMode::OnePass => "one_pass",
        })
    }
}

impl FromStr for WorkflowMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "k_pass" | "kpass" => Ok(WorkflowMode::KPass),
            "two_pass" | "2_pass" => Ok(WorkflowMode::TwoPass),
            "one_pass" | "1_pass" => Ok(WorkflowMode::OnePass),
            other => Err(Error::InvalidArgument(format!("unknown workflow mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowReport {
    pub mode: WorkflowMode,
    #[serde(rename = "K")]
    pub k: usize,
    pub wall_time_ms: f64,
    pub per_pass_ms: Vec<f64>,
    pub pass_sizes: Vec<usize>,
    pub seed: u64,
    /// How later passes see earlier ones.
    pub conditioning: String,
    pub config: SampleConfig,
}

impl WorkflowReport {
    /// One-line structured record.
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct WorkflowOutput {
    /// In request order.
    pub latents: Vec<StemLatent>,
    pub stems: Vec<StemWaveform>,
    pub mix: StemWaveform,
    pub report: WorkflowReport,
}

/// Generate K stems with one of the three workflows. Pass `i` uses seed
/// `config.seed + i`; later passes condition on the sum of everything
/// generated so far.
pub fn run_workflow(
    field: &dyn VelocityField,
    requests: &[StemRequest],
    shared: &SharedConditions,
    mode: WorkflowMode,
    config: &SampleConfig,
) -> Result<WorkflowOutput> {
    if requests.is_empty() {
        return Err(Error::InvalidArgument("workflow needs at least one stem".into()));
    }
    let sizes = mode.pass_sizes(requests.len());
    let mut latents: Vec<StemLatent> = Vec::with_capacity(requests.len());
    let mut per_pass_ms = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for (pass, &size) in sizes.iter().enumerate() {
        let reqs = &requests[start..start + size];
        let mut pass_shared = shared.clone();
        pass_shared.submix = None;
        pass_shared.context_types = ContextTypes::default();
        if start > 0 {
            pass_shared.submix = Some(Arc::new(StemLatent::sum(shared.frames, latents.iter())?));
            pass_shared.context_types =
                ContextTypes::from_types(requests[..start].iter().map(|r| r.stem_type));
        }
        let pass_config = SampleConfig {
            seed: config.seed.wrapping_add(pass as u64),
            ..config.clone()
        };
        let timer = Instant::now();
        let out = euler_sample(field, reqs, &pass_shared, &pass_config)?;
        per_pass_ms.push(timer.elapsed().as_secs_f64() * 1e3);
        latents.extend(out.latents);
        start += size;
    }
    let stems: Vec<StemWaveform> = latents
        .iter()
        .zip(requests)
        .map(|(l, r)| codec::decode(l, Some(r.stem_type)))
        .collect();
    let mix = mix_stems(&stems)?;
    let report = WorkflowReport {
        mode,
        k: requests.len(),
        wall_time_ms: per_pass_ms.iter().sum(),
        per_pass_ms,
        pass_sizes: sizes,
        seed: config.seed,
        conditioning: "cumulative".into(),
        config: config.clone(),
    };
    Ok(WorkflowOutput {
        latents,
        stems,
        mix,
        report,
    })
}

/// Closed-form velocity fields with known sampling behaviour.
pub mod oracles {
    use super::*;

    /// `v(x, t) = (x0 - x) / t`: the exact field of a single data point `x0`.
    pub struct SinglePoint {
        pub x0: Vec<f64>,
    }

    impl VelocityField for SinglePoint {
        fn velocities(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<Vec<f64>>> {
            Ok(inputs
                .iter()
                .map(|inp| {
                    inp.x_t
                        .iter()
                        .zip(&self.x0)
                        .map(|(x, x0)| (x0 - x) / inp.t)
                        .collect()
                })
                .collect())
        }
    }

    /// Marginal field of independent `N(mean, std^2)` coordinates along the
    /// straight path: `E[x0 - eps | x_t = x]`.
    pub struct Gaussian1d {
        pub mean: f64,
        pub std: f64,
    }

    impl Gaussian1d {
        pub fn velocity(&self, x: f64, t: f64) -> f64 {
            let (m, s2) = (self.mean, self.std * self.std);
            let var = (1.0 - t).powi(2) * s2 + t * t;
            m + ((1.0 - t) * s2 - t) / var * (x - (1.0 - t) * m)
        }
    }

    impl VelocityField for Gaussian1d {
        fn velocities(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<Vec<f64>>> {
            Ok(inputs
                .iter()
                .map(|inp| inp.x_t.iter().map(|x| self.velocity(*x, inp.t)).collect())
                .collect())
        }
    }
}
