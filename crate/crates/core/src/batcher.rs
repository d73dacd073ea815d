//! Training-batch construction.
//!
//! A batch is filled group by group: draw a composition, draw a subset of its
//! stems, append them as entries sharing one group id, repeat until `B`
//! entries exist. Half of the groups then become conditional-generation
//! groups whose condition is the latent sum of some left-out stems.
//! Each group gets one noise tensor shared by all of its entries.

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{ActivityMask, StemLatent, LATENT_DIM};
use crate::corpus::{Dataset, StemType, NUM_STEM_TYPES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DropFlags {
    pub stem_type: bool,
    pub style: bool,
    pub tempo: bool,
    /// Context stem types and the sub-mix latent, dropped as one unit.
    pub context: bool,
    pub activity: bool,
}

impl DropFlags {
    pub const ALL: DropFlags = DropFlags {
        stem_type: true,
        style: true,
        tempo: true,
        context: true,
        activity: true,
    };
}

/// Multi-hot set over the stem vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub struct ContextTypes(pub u8);

impl ContextTypes {
    pub fn from_types<I: IntoIterator<Item = StemType>>(types: I) -> Self {
        Self(types.into_iter().fold(0u8, |acc, t| acc | (1 << t.index())))
    }

    pub fn contains(self, t: StemType) -> bool {
        self.0 & (1 << t.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn types(self) -> impl Iterator<Item = StemType> {
        StemType::ALL.into_iter().filter(move |t| self.contains(*t))
    }
}

/// Per-stem conditioning bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub stem_type: StemType,
    pub style_token: usize,
    pub tempo_bpm: u32,
    pub context_types: ContextTypes,
    /// `None` stands for the all-zero sub-mix.
    pub submix: Option<Arc<StemLatent>>,
    pub activity: Option<ActivityMask>,
    pub drop: DropFlags,
}

impl ConditionSet {
    pub fn new(stem_type: StemType, style_token: usize, tempo_bpm: u32) -> Self {
        Self {
            stem_type,
            style_token,
            tempo_bpm,
            context_types: ContextTypes::default(),
            submix: None,
            activity: None,
            drop: DropFlags::default(),
        }
    }

    /// The classifier-free-guidance unconditional point: everything dropped.
    pub fn unconditional(&self) -> Self {
        Self {
            drop: DropFlags::ALL,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupTask {
    FromScratch,
    Conditional,
}

#[derive(Debug, Clone)]
pub struct BatchEntry {
    pub target: StemLatent,
    pub group_id: usize,
    pub composition_id: u32,
    pub stem_index: usize,
    pub conditions: ConditionSet,
    /// Index into [`TrainingBatch::noises`].
    pub noise: usize,
    pub timestep: f64,
}

#[derive(Debug, Clone)]
pub struct GroupInfo {
    pub composition: usize,
    pub stems: Vec<usize>,
    pub task: GroupTask,
    pub context_stems: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub entries: Vec<BatchEntry>,
    pub groups: Vec<GroupInfo>,
    pub noises: Vec<Vec<f64>>,
    pub frames: usize,
}

impl TrainingBatch {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.stems.len()).collect()
    }

    pub fn noise_of(&self, entry: usize) -> &[f64] {
        &self.noises[self.entries[entry].noise]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSampling {
    Grouped,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSharing {
    Shared,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub group_sampling: GroupSampling,
    pub noise_sharing: NoiseSharing,
    pub conditional_fraction: f64,
    pub dropout_p: f64,
    pub timestep_mu: f64,
    pub timestep_sigma: f64,
    /// Reuse one timestep for every entry of a group.
    pub share_timestep: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            group_sampling: GroupSampling::Grouped,
            noise_sharing: NoiseSharing::Shared,
            conditional_fraction: 0.5,
            dropout_p: 1.0 / 3.0,
            timestep_mu: 0.0,
            timestep_sigma: 1.0,
            share_timestep: false,
        }
    }
}

/// Draw the group structure. Targets carry their stem conditions; sub-mix,
/// noise and timesteps are filled by the later stages.
pub fn build_batch(
    dataset: &Dataset,
    batch_size: usize,
    grouping: GroupSampling,
    rng: &mut impl Rng,
) -> Result<TrainingBatch> {
    if batch_size < 1 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let mut entries = Vec::with_capacity(batch_size);
    let mut groups = Vec::new();
    while entries.len() < batch_size {
        let m = rng.random_range(0..dataset.len());
        let comp = &dataset.compositions[m];
        let k = comp.stem_count();
        let mut stems = match grouping {
            GroupSampling::Grouped => {
                let size = rng.random_range(1..=k);
                let mut picked = index::sample(rng, k, size).into_vec();
                picked.truncate(batch_size - entries.len());
                picked
            }
            GroupSampling::Independent => vec![rng.random_range(0..k)],
        };
        stems.sort_unstable();
        let group_id = groups.len();
        for &s in &stems {
            let mut conditions =
                ConditionSet::new(comp.stem_type(s), comp.spec.style_seed, comp.spec.tempo);
            conditions.activity = Some(comp.masks[s].clone());
            entries.push(BatchEntry {
                target: comp.latents[s].clone(),
                group_id,
                composition_id: comp.id,
                stem_index: s,
                conditions,
                noise: 0,
                timestep: 0.5,
            });
        }
        groups.push(GroupInfo {
            composition: m,
            stems,
            task: GroupTask::FromScratch,
            context_stems: Vec::new(),
        });
    }
    Ok(TrainingBatch {
        entries,
        groups,
        noises: Vec::new(),
        frames: dataset.clip_frames,
    })
}

/// Mark `ceil(fraction * L)` random groups as conditional and attach their
/// sub-mix conditions. Groups that used every stem of their mix stay
/// from-scratch.
pub fn select_conditional_groups(
    batch: &mut TrainingBatch,
    dataset: &Dataset,
    fraction: f64,
    rng: &mut impl Rng,
) {
    let l = batch.groups.len();
    let chosen = ((fraction * l as f64).ceil() as usize).min(l);
    let selected = index::sample(rng, l, chosen).into_vec();
    for g in selected {
        let info = &batch.groups[g];
        let comp = &dataset.compositions[info.composition];
        let left_out: Vec<usize> = (0..comp.stem_count())
            .filter(|s| !info.stems.contains(s))
            .collect();
        if left_out.is_empty() {
            continue;
        }
        let size = rng.random_range(1..=left_out.len());
        let mut context: Vec<usize> = index::sample(rng, left_out.len(), size)
            .into_iter()
            .map(|i| left_out[i])
            .collect();
        context.sort_unstable();
        let submix = StemLatent::sum(batch.frames, context.iter().map(|&s| &comp.latents[s]))
            .expect("stems of one composition share a length");
        let submix = Arc::new(submix);
        let types = ContextTypes::from_types(context.iter().map(|&s| comp.stem_type(s)));
        for e in batch.entries.iter_mut().filter(|e| e.group_id == g) {
            e.conditions.submix = Some(Arc::clone(&submix));
            e.conditions.context_types = types;
        }
        let info = &mut batch.groups[g];
        info.task = GroupTask::Conditional;
        info.context_stems = context;
    }
}

pub fn standard_normal(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn assign_noise(batch: &mut TrainingBatch, sharing: NoiseSharing, rng: &mut impl Rng) {
    let len = batch.frames * LATENT_DIM;
    batch.noises.clear();
    match sharing {
        NoiseSharing::Shared => {
            for _ in 0..batch.groups.len() {
                batch.noises.push(standard_normal(len, rng));
            }
            for e in &mut batch.entries {
                e.noise = e.group_id;
            }
        }
        NoiseSharing::Independent => {
            for (i, e) in batch.entries.iter_mut().enumerate() {
                batch.noises.push(standard_normal(len, rng));
                e.noise = i;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logit-normal timesteps, clamped away from the endpoints.
pub fn sample_timesteps(
    batch: &mut TrainingBatch,
    mu: f64,
    sigma: f64,
    share_in_group: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let mut draw = || {
        let z: f64 = StandardNormal.sample(rng);
        sigmoid(mu + sigma * z).clamp(1e-6, 1.0 - 1e-6)
    };
    if share_in_group {
        let per_group: Vec<f64> = (0..batch.groups.len()).map(|_| draw()).collect();
        for e in &mut batch.entries {
            e.timestep = per_group[e.group_id];
        }
    } else {
        for e in &mut batch.entries {
            e.timestep = draw();
        }
    }
    Ok(())
}

pub fn apply_condition_dropout(batch: &mut TrainingBatch, p: f64, rng: &mut impl Rng) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
    }
    for e in &mut batch.entries {
        e.conditions.drop = DropFlags {
            stem_type: rng.random_bool(p),
            style: rng.random_bool(p),
            tempo: rng.random_bool(p),
            context: rng.random_bool(p),
            activity: rng.random_bool(p),
        };
    }
    Ok(())
}

/// All batch stages in training order.
pub fn prepare_batch(dataset: &Dataset, config: &BatchConfig, rng: &mut impl Rng) -> Result<TrainingBatch> {
    let mut batch = build_batch(dataset, config.batch_size, config.group_sampling, rng)?;
    select_conditional_groups(&mut batch, dataset, config.conditional_fraction, rng);
    assign_noise(&mut batch, config.noise_sharing, rng);
    sample_timesteps(
        &mut batch,
        config.timestep_mu,
        config.timestep_sigma,
        config.share_timestep,
        rng,
    )?;
    apply_condition_dropout(&mut batch, config.dropout_p, rng)?;
    Ok(batch)
}

/// Per-type multi-hot helper used by the model.
pub fn context_hot(types: ContextTypes) -> [bool; NUM_STEM_TYPES] {
    let mut out = [false; NUM_STEM_TYPES];
    for t in types.types() {
        out[t.index()] = true;
    }
    out
}
