//! Rectified-flow training loop.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batcher::{prepare_batch, BatchConfig, GroupSampling, NoiseSharing, TrainingBatch};
use crate::checkpoint::{CheckpointBundle, DType, NamedTensor, TensorFile};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelInput};
use crate::optim::{AdamW, AdamWConfig};

pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const FINAL_CHECKPOINT: &str = "final.sfck";
pub const STATE_FILE: &str = "state.sfts";
const STATE_FORMAT: &str = "stemflow-train-state";

/// Batch-construction settings of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Setting {
    /// Independent stems, independent noise.
    A,
    /// Grouped stems, independent noise.
    B,
    /// Grouped stems, shared noise.
    C,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::A, Setting::B, Setting::C];

    pub fn flags(self) -> (GroupSampling, NoiseSharing) {
        match self {
            Setting::A => (GroupSampling::Independent, NoiseSharing::Independent),
            Setting::B => (GroupSampling::Grouped, NoiseSharing::Independent),
            Setting::C => (GroupSampling::Grouped, NoiseSharing::Shared),
        }
    }

    pub fn from_flags(g: GroupSampling, n: NoiseSharing) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.flags() == (g, n))
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::A => "A",
            Setting::B => "B",
            Setting::C => "C",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Setting::A),
            "B" => Ok(Setting::B),
            "C" => Ok(Setting::C),
            other => Err(Error::InvalidArgument(format!("unknown setting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: BatchConfig,
    pub optimizer: AdamWConfig,
    pub model: ModelConfig,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 8_000,
            batch: BatchConfig::default(),
            optimizer: AdamWConfig::default(),
            model: ModelConfig::default(),
            checkpoint_every: 1_000,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_setting(setting: Setting) -> Self {
        let mut c = Self::default();
        c.set_setting(setting);
        c
    }

    pub fn set_setting(&mut self, setting: Setting) {
        let (g, n) = setting.flags();
        self.batch.group_sampling = g;
        self.batch.noise_sharing = n;
    }

    pub fn setting(&self) -> Option<Setting> {
        Setting::from_flags(self.batch.group_sampling, self.batch.noise_sharing)
    }

    pub fn setting_label(&self) -> String {
        self.setting().map_or_else(|| "custom".into(), |s| s.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        self.model.validate()
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    pub step: u64,
    pub losses: Vec<f64>,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    format: String,
    version: u32,
    model_config: ModelConfig,
    optimizer: AdamWConfig,
    optimizer_t: u64,
    step: u64,
    losses: Vec<f64>,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model.clone())?;
        let optimizer = AdamW::new(config.optimizer, model.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            optimizer,
            step: 0,
            losses: Vec::new(),
            rng,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = StateMeta {
            format: STATE_FORMAT.into(),
            version: 1,
            model_config: self.model.config.clone(),
            optimizer: self.optimizer.config,
            optimizer_t: self.optimizer.t,
            step: self.step,
            losses: self.losses.clone(),
            rng: self.rng.clone(),
        };
        let tensor = |name: &str, data: &[f64]| NamedTensor {
            name: name.into(),
            dtype: DType::F64,
            shape: vec![data.len()],
            data: data.to_vec(),
        };
        TensorFile {
            metadata: serde_json::to_value(meta)?,
            tensors: vec![
                tensor("params", &self.model.params),
                tensor("adam.m", &self.optimizer.m),
                tensor("adam.v", &self.optimizer.v),
            ],
        }
        .to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file = TensorFile::from_bytes(bytes)?;
        let meta: StateMeta = serde_json::from_value(file.metadata.clone())?;
        if meta.format != STATE_FORMAT || meta.version != 1 {
            return Err(Error::Format(format!("not a training state: {}", meta.format)));
        }
        let get = |name: &str| {
            file.get(name)
                .map(|t| t.data.clone())
                .ok_or_else(|| Error::Format(format!("training state lacks {name}")))
        };
        let model = Model::from_params(meta.model_config, get("params")?)?;
        let (m, v) = (get("adam.m")?, get("adam.v")?);
        if m.len() != model.param_count() || v.len() != model.param_count() {
            return Err(Error::Shape("optimizer moments do not match parameters".into()));
        }
        Ok(Self {
            model,
            optimizer: AdamW {
                config: meta.optimizer,
                m,
                v,
                t: meta.optimizer_t,
            },
            step: meta.step,
            losses: meta.losses,
            rng: meta.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn bundle(&self, setting: Option<String>) -> CheckpointBundle {
        CheckpointBundle::from_model(&self.model, self.step, setting)
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub per_entry: Vec<f64>,
    pub grads: Vec<f64>,
}

/// Noised inputs `x_t = (1 - t) x + t eps` and targets `x - eps` of a batch.
pub fn noised_inputs(batch: &TrainingBatch) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut xs = Vec::with_capacity(batch.entries.len());
    let mut targets = Vec::with_capacity(batch.entries.len());
    for (i, e) in batch.entries.iter().enumerate() {
        let x = e.target.as_slice();
        let eps = batch
            .noises
            .get(e.noise)
            .ok_or_else(|| Error::InvalidArgument(format!("entry {i} has no noise assigned")))?;
        if eps.len() != x.len() {
            return Err(Error::Shape(format!("entry {i}: noise and latent lengths differ")));
        }
        let t = e.timestep;
        xs.push(x.iter().zip(eps).map(|(x, n)| (1.0 - t) * x + t * n).collect());
        targets.push(x.iter().zip(eps).map(|(x, n)| x - n).collect());
    }
    Ok((xs, targets))
}

/// Mean over entries of `|v - (x - eps)|^2 / (T D)`, with gradients.
pub fn rf_loss(model: &Model, batch: &TrainingBatch) -> Result<LossOutput> {
    let (xs, targets) = noised_inputs(batch)?;
    let inputs: Vec<ModelInput<'_>> = batch
        .entries
        .iter()
        .zip(&xs)
        .map(|(e, x)| ModelInput {
            x_t: x,
            t: e.timestep,
            conditions: &e.conditions,
        })
        .collect();
    let (cache, v) = model.forward_train(&inputs)?;
    let r = batch.entries.len();
    let td = v.len() / r;
    let mut per_entry = Vec::with_capacity(r);
    let mut dv = vec![0.0; v.len()];
    let scale = 2.0 / (r * td) as f64;
    for (i, target) in targets.iter().enumerate() {
        let vi = &v[i * td..(i + 1) * td];
        let mut sq = 0.0;
        for ((g, p), y) in dv[i * td..(i + 1) * td].iter_mut().zip(vi).zip(target) {
            let diff = p - y;
            sq += diff * diff;
            *g = scale * diff;
        }
        let l = sq / td as f64;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { entry: i });
        }
        per_entry.push(l);
    }
    let loss = per_entry.iter().sum::<f64>() / r as f64;
    let mut grads = vec![0.0; model.param_count()];
    model.backward(&cache, &dv, &mut grads);
    Ok(LossOutput {
        loss,
        per_entry,
        grads,
    })
}

/// One optimizer update on a prepared batch. Returns the batch loss.
pub fn train_step(state: &mut TrainState, batch: &TrainingBatch) -> Result<f64> {
    let out = rf_loss(&state.model, batch)?;
    state.optimizer.step(&mut state.model.params, &out.grads)?;
    state.step += 1;
    state.losses.push(out.loss);
    Ok(out.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub wall_ms: f64,
    pub setting: String,
}

impl StepRecord {
    pub fn row(&self) -> String {
        format!("{}\t{:.8}\t{:.3}\t{}", self.step, self.loss, self.wall_ms, self.setting)
    }
}

/// Advance `state` until it has completed `until` steps.
pub fn run_steps(
    state: &mut TrainState,
    config: &TrainConfig,
    dataset: &Dataset,
    until: u64,
    mut on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<()> {
    let label = config.setting_label();
    while state.step < until {
        let started = Instant::now();
        let batch = prepare_batch(dataset, &config.batch, &mut state.rng)?;
        let loss = train_step(state, &batch)?;
        let record = StepRecord {
            step: state.step,
            loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            setting: label.clone(),
        };
        if config.log_every > 0 && state.step % config.log_every == 0 {
            let window = &state.losses[state.losses.len().saturating_sub(config.log_every as usize)..];
            log::info!(
                "setting {label} step {}/{until} loss {:.5}",
                state.step,
                window.iter().sum::<f64>() / window.len() as f64
            );
        }
        on_step(state, &record)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: CheckpointBundle,
    pub state: TrainState,
    pub log: Vec<StepRecord>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:06}.sfck"))
}

/// Full training run. With `out_dir`, writes the training log, periodic
/// checkpoints, a resumable state file and `final.sfck`; an existing state
/// file in `out_dir` is resumed.
pub fn train(config: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut state = match out_dir.map(|d| d.join(STATE_FILE)) {
        Some(p) if p.exists() => {
            let s = TrainState::load(&p)?;
            if s.model.config != config.model {
                return Err(Error::InvalidArgument(format!(
                    "{} was trained with a different model config",
                    p.display()
                )));
            }
            log::info!("resuming from step {}", s.step);
            s
        }
        _ => TrainState::new(config)?,
    };
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(TRAIN_LOG_FILE);
            let fresh = state.step == 0;
            let mut f = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "step\tloss\twall_ms\tsetting").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let label = config.setting_label();
    let mut records = Vec::new();
    run_steps(&mut state, config, dataset, config.steps, |s, rec| {
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", rec.row()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && s.step % config.checkpoint_every == 0 {
                s.bundle(Some(label.clone())).save(&checkpoint_path(dir, s.step))?;
                s.save(&dir.join(STATE_FILE))?;
            }
        }
        records.push(rec.clone());
        Ok(())
    })?;
    let bundle = state.bundle(Some(label));
    if let Some(dir) = out_dir {
        bundle.save(&dir.join(FINAL_CHECKPOINT))?;
        state.save(&dir.join(STATE_FILE))?;
    }
    Ok(TrainOutcome {
        bundle,
        state,
        log: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusConfig;

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::for_setting(Setting::C);
        c.model = ModelConfig {
            hidden_width: 16,
            num_blocks: 2,
            embed_dim: 8,
            time_features: 8,
            activity_dim: 4,
            kernel_size: 3,
            parameter_seed: 1,
            ..ModelConfig::default()
        };
        c.batch.batch_size = 6;
        c.steps = 6;
        c.checkpoint_every = 3;
        c.log_every = 0;
        c.seed = 5;
        c
    }

    fn dataset() -> Dataset {
        Dataset::generate(&CorpusConfig {
            compositions: 8,
            clip_frames: 24,
            min_active_frames: 12,
            span_frames: (4, 8),
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn settings_differ_only_in_batcher_flags() {
        let a = TrainConfig::for_setting(Setting::A);
        let mut c = TrainConfig::for_setting(Setting::C);
        assert_ne!(a, c);
        c.batch.group_sampling = a.batch.group_sampling;
        c.batch.noise_sharing = a.batch.noise_sharing;
        assert_eq!(a, c);
        assert_eq!(a.setting_label(), "A");
        assert_eq!("b".parse::<Setting>().unwrap(), Setting::B);
    }

    #[test]
    fn zero_head_loss_matches_direct_sum() {
        let config = tiny_config();
        let data = dataset();
        let state = TrainState::new(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = prepare_batch(&data, &config.batch, &mut rng).unwrap();
        let out = rf_loss(&state.model, &batch).unwrap();
        let mut want = 0.0;
        for e in &batch.entries {
            let eps = &batch.noises[e.noise];
            let sq: f64 = e.target.as_slice().iter().zip(eps).map(|(x, n)| (x - n).powi(2)).sum();
            want += sq / eps.len() as f64;
        }
        want /= batch.entries.len() as f64;
        assert!((out.loss - want).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_keeps_params() {
        let mut config = tiny_config();
        let data = dataset();
        let mut state = TrainState::new(&config).unwrap();
        config.optimizer.learning_rate = 0.0;
        state.optimizer.config.learning_rate = 0.0;
        let before = state.model.params.clone();
        let batch = prepare_batch(&data, &config.batch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        train_step(&mut state, &batch).unwrap();
        assert_eq!(state.model.params, before);
        assert_eq!(state.step, 1);
        assert_eq!(state.losses.len(), 1);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let mut config = tiny_config();
        config.steps = 0;
        let out = train(&config, &dataset(), None).unwrap();
        let init = Model::init(config.model.clone()).unwrap();
        assert_eq!(out.bundle, CheckpointBundle::from_model(&init, 0, Some("C".into())));
    }

    #[test]
    fn state_round_trip_and_resume() {
        let config = tiny_config();
        let data = dataset();
        let full = train(&config, &data, None).unwrap();

        let mut half = TrainState::new(&config).unwrap();
        run_steps(&mut half, &config, &data, 3, |_, _| Ok(())).unwrap();
        let mut resumed = TrainState::from_bytes(&half.to_bytes().unwrap()).unwrap();
        assert_eq!(resumed, half);
        run_steps(&mut resumed, &config, &data, 6, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.model.params, full.state.model.params);
        assert_eq!(resumed.losses, full.state.losses);
    }

    #[test]
    fn writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let out = train(&config, &dataset(), Some(dir.path())).unwrap();
        let log = fs::read_to_string(dir.path().join(TRAIN_LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 7);
        assert!(log.lines().nth(1).unwrap().ends_with("\tC"));
        assert!(checkpoint_path(dir.path(), 3).exists());
        assert!(checkpoint_path(dir.path(), 6).exists());
        let saved = CheckpointBundle::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(saved, out.bundle);
    }
}
