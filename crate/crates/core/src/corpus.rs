//! Procedural toy multi-stem corpus.
//!
//! Every stem of a composition is rendered directly in the codec's latent
//! space: a beat-periodic pattern whose onset frames carry a transient along
//! a channel shared by all instruments and whose sustain carries a
//! type/style-specific timbre. Waveforms are the decoded latents, so the
//! codec is exact on everything produced here.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, ActivityMask, StemLatent, StemWaveform, DEFAULT_SILENCE_CUTOFF_DB, HOP, LATENT_DIM};
use crate::error::{Error, Result};
use crate::io::{read_latent, write_latent};

pub const NUM_STEM_TYPES: usize = 6;
pub const NUM_STYLES: usize = 16;
pub const TEMPO_GRID: [u32; 7] = [60, 75, 90, 105, 120, 135, 150];
pub const DEFAULT_CLIP_FRAMES: usize = 96;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemType {
    Drums,
    Bass,
    Keys,
    Guitar,
    Pad,
    Lead,
}

impl StemType {
    pub const ALL: [StemType; NUM_STEM_TYPES] = [
        StemType::Drums,
        StemType::Bass,
        StemType::Keys,
        StemType::Guitar,
        StemType::Pad,
        StemType::Lead,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("stem type index {i}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            StemType::Drums => "drums",
            StemType::Bass => "bass",
            StemType::Keys => "keys",
            StemType::Guitar => "guitar",
            StemType::Pad => "pad",
            StemType::Lead => "lead",
        }
    }
}

impl fmt::Display for StemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StemType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Vocabulary(format!("unknown stem type {s:?}")))
    }
}

/// Latent frames per beat at the given tempo (12 frames per second).
pub fn frames_per_beat(tempo_bpm: u32) -> usize {
    (60.0 * codec::FRAME_RATE as f64 / tempo_bpm as f64).round() as usize
}

pub fn tempo_bucket(tempo_bpm: u32) -> Result<usize> {
    TEMPO_GRID
        .iter()
        .position(|&t| t == tempo_bpm)
        .ok_or_else(|| Error::Vocabulary(format!("tempo {tempo_bpm} bpm is not on the grid")))
}

/// Frame spans `[start, end)` forced to silence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityPlan {
    pub silent_spans: Vec<(usize, usize)>,
}

impl ActivityPlan {
    pub fn always_active() -> Self {
        Self::default()
    }

    pub fn mask(&self, frames: usize) -> ActivityMask {
        let mut bits = vec![true; frames];
        for &(a, b) in &self.silent_spans {
            for bit in bits.iter_mut().take(b.min(frames)).skip(a) {
                *bit = false;
            }
        }
        ActivityMask::new(bits)
    }

    /// Inverse of [`ActivityPlan::mask`].
    pub fn from_mask(mask: &ActivityMask) -> Self {
        let mut spans = Vec::new();
        let mut start = None;
        for (f, &b) in mask.bits.iter().enumerate() {
            match (b, start) {
                (false, None) => start = Some(f),
                (true, Some(s)) => {
                    spans.push((s, f));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push((s, mask.len()));
        }
        Self { silent_spans: spans }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub stem_type: StemType,
    pub pattern_seed: u64,
    pub loudness_db: f64,
    #[serde(default)]
    pub activity_plan: ActivityPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionSpec {
    pub tempo: u32,
    pub phase: usize,
    pub style_seed: usize,
    pub stems: Vec<StemSpec>,
    pub clip_frames: usize,
}

impl CompositionSpec {
    pub fn frames_per_beat(&self) -> usize {
        frames_per_beat(self.tempo)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidComposition(m));
        if self.stems.is_empty() {
            return bad("composition has no stems".into());
        }
        tempo_bucket(self.tempo)?;
        if self.phase >= self.frames_per_beat() {
            return bad(format!(
                "phase {} outside 0..{}",
                self.phase,
                self.frames_per_beat()
            ));
        }
        if self.style_seed >= NUM_STYLES {
            return Err(Error::Vocabulary(format!("style {}", self.style_seed)));
        }
        if self.clip_frames == 0 {
            return bad("clip has zero frames".into());
        }
        let distinct: BTreeSet<_> = self.stems.iter().map(|s| s.stem_type).collect();
        if distinct.len() != self.stems.len() {
            return bad("stem types within a composition must be distinct".into());
        }
        for s in &self.stems {
            if !s.loudness_db.is_finite() {
                return bad(format!("{} loudness is not finite", s.stem_type));
            }
            if s.activity_plan.mask(self.clip_frames).active_count() == 0 {
                return bad(format!("{} is silent for the whole clip", s.stem_type));
            }
        }
        Ok(())
    }
}

/// Unit transient direction shared by every instrument's onsets.
const TRANSIENT_CHANNEL: usize = 0;

fn base_timbre(t: StemType) -> [f64; LATENT_DIM] {
    match t {
        StemType::Drums => [0.0, 0.3, 0.9, 0.0, 0.0, 0.0, 0.0, 0.3],
        StemType::Bass => [0.0, 1.0, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0],
        StemType::Keys => [0.0, 0.0, 0.2, 1.0, 0.5, 0.0, 0.0, 0.0],
        StemType::Guitar => [0.0, 0.0, 0.0, 0.4, 1.0, 0.3, 0.0, 0.0],
        StemType::Pad => [0.0, 0.0, 0.0, 0.0, 0.3, 1.0, 0.6, 0.0],
        StemType::Lead => [0.0, 0.0, 0.0, 0.0, 0.0, 0.3, 0.7, 1.0],
    }
}

fn style_vectors() -> &'static [[f64; LATENT_DIM]; NUM_STYLES] {
    static STYLES: OnceLock<[[f64; LATENT_DIM]; NUM_STYLES]> = OnceLock::new();
    STYLES.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5717_e5ee_d000_0001);
        let mut out = [[0.0; LATENT_DIM]; NUM_STYLES];
        for v in out.iter_mut() {
            for x in v.iter_mut().skip(1) {
                *x = rng.random_range(-1.0..1.0);
            }
            normalize(v);
        }
        out
    })
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Sustain envelope (relative to the onset) at `j` frames after the beat.
fn sustain_envelope(t: StemType, j: usize, period: usize) -> f64 {
    let j = j as f64;
    match t {
        StemType::Drums => 0.55 * 0.35f64.powf(j) + 0.12,
        StemType::Bass => 0.75 * 0.8f64.powf(j) + 0.2,
        StemType::Keys => 0.7 * 0.65f64.powf(j) + 0.15,
        StemType::Guitar => 0.7 * 0.7f64.powf(j) + 0.15,
        StemType::Pad => 0.45 + 0.35 * (1.0 - j / period as f64),
        StemType::Lead => 0.65 * 0.75f64.powf(j) + 0.2,
    }
}

/// Unscaled latent pattern for one stem; only the activity plan and loudness
/// are applied afterwards.
fn render_pattern(spec: &CompositionSpec, stem: &StemSpec) -> StemLatent {
    let period = spec.frames_per_beat();
    let mut rng = ChaCha8Rng::seed_from_u64(stem.pattern_seed);
    let accents: [f64; 4] = [
        1.0,
        rng.random_range(0.8..1.0),
        rng.random_range(0.85..1.0),
        rng.random_range(0.8..1.0),
    ];
    let ghost = if period >= 6 { rng.random_range(0.0..0.25) } else { 0.0 };

    let mut timbre = base_timbre(stem.stem_type);
    normalize(&mut timbre);
    let style = &style_vectors()[spec.style_seed];
    for (d, x) in timbre.iter_mut().enumerate().skip(1) {
        *x += 0.45 * style[d] + 0.08 * rng.random_range(-1.0..1.0);
    }
    timbre[TRANSIENT_CHANNEL] = 0.0;
    normalize(&mut timbre);

    let mut latent = StemLatent::zeros(spec.clip_frames);
    let data = latent.as_mut_slice();
    for f in 0..spec.clip_frames {
        let rel = f as i64 - spec.phase as i64;
        let j = rel.rem_euclid(period as i64) as usize;
        let beat = rel.div_euclid(period as i64).rem_euclid(4) as usize;
        let accent = accents[beat];
        let mut sustain = sustain_envelope(stem.stem_type, j, period) * accent;
        if j == period / 2 {
            sustain += ghost;
        }
        let transient = match j {
            0 => 1.2 * accent,
            1 => 0.3 * accent,
            _ => 0.0,
        };
        let row = &mut data[f * LATENT_DIM..(f + 1) * LATENT_DIM];
        for (d, x) in row.iter_mut().enumerate() {
            *x = sustain * timbre[d];
        }
        row[TRANSIENT_CHANNEL] += transient;
    }
    latent
}

/// Latents of every stem, with activity plans and loudness applied.
pub fn render_latents(spec: &CompositionSpec) -> Result<Vec<StemLatent>> {
    spec.validate()?;
    spec.stems
        .iter()
        .map(|stem| {
            let mut latent = render_pattern(spec, stem);
            let mask = stem.activity_plan.mask(spec.clip_frames);
            let mut energy = 0.0;
            let data = latent.as_mut_slice();
            for (f, &active) in mask.bits.iter().enumerate() {
                let row = &mut data[f * LATENT_DIM..(f + 1) * LATENT_DIM];
                if active {
                    energy += row.iter().map(|x| x * x).sum::<f64>();
                } else {
                    row.iter_mut().for_each(|x| *x = 0.0);
                }
            }
            let rms = (energy / (mask.active_count() * HOP) as f64).sqrt();
            let gain = codec::db_to_amplitude(stem.loudness_db) / rms;
            data.iter_mut().for_each(|x| *x *= gain);
            Ok(latent)
        })
        .collect()
}

pub fn synthesize_composition(spec: &CompositionSpec) -> Result<Vec<StemWaveform>> {
    Ok(render_latents(spec)?
        .iter()
        .zip(&spec.stems)
        .map(|(l, s)| codec::decode(l, Some(s.stem_type)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub compositions: usize,
    pub clip_frames: usize,
    pub seed: u64,
    /// Relative weights for drawing stem types without replacement.
    pub type_weights: [f64; NUM_STEM_TYPES],
    pub min_stems: usize,
    pub max_stems: usize,
    pub loudness_range_db: (f64, f64),
    /// Probability that a stem gets silent spans.
    pub plan_probability: f64,
    pub max_silent_spans: usize,
    pub span_frames: (usize, usize),
    pub min_active_frames: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            compositions: 512,
            clip_frames: DEFAULT_CLIP_FRAMES,
            seed: 0,
            type_weights: [1.6, 1.4, 1.0, 0.9, 0.8, 0.8],
            min_stems: 3,
            max_stems: 6,
            loudness_range_db: (-26.0, -14.0),
            plan_probability: 0.5,
            max_silent_spans: 2,
            span_frames: (12, 48),
            min_active_frames: 24,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.min_stems < 1 || self.min_stems > self.max_stems || self.max_stems > NUM_STEM_TYPES {
            return bad("stem count range must satisfy 1 <= min <= max <= 6");
        }
        if self.type_weights.iter().any(|w| !(*w > 0.0)) {
            return bad("type weights must be positive");
        }
        if self.clip_frames < 2 * 12 {
            return bad("clips must be at least 24 frames");
        }
        if self.span_frames.0 == 0 || self.span_frames.0 > self.span_frames.1 {
            return bad("span length range is empty");
        }
        if self.min_active_frames == 0 || self.min_active_frames > self.clip_frames {
            return bad("min_active_frames must lie in 1..=clip_frames");
        }
        // otherwise the plan rejection loop can never succeed
        if self.plan_probability > 0.0 && self.clip_frames < self.span_frames.0 + self.min_active_frames {
            return bad("one shortest silent span must leave min_active_frames active");
        }
        Ok(())
    }

    /// Draw the `index`-th composition. Each index has its own RNG stream so
    /// compositions can be generated in any order.
    pub fn sample_composition(&self, index: u64) -> CompositionSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let tempo = *TEMPO_GRID.choose(&mut rng).expect("grid is non-empty");
        let period = frames_per_beat(tempo);
        let phase = rng.random_range(0..period);
        let style_seed = rng.random_range(0..NUM_STYLES);
        let count = rng.random_range(self.min_stems..=self.max_stems);
        let types = sample_types(&self.type_weights, count, &mut rng);
        let stems = types
            .into_iter()
            .map(|stem_type| {
                let pattern_seed = rng.random::<u64>();
                let loudness_db = rng.random_range(self.loudness_range_db.0..=self.loudness_range_db.1);
                let activity_plan = if rng.random_bool(self.plan_probability) {
                    self.sample_plan(&mut rng)
                } else {
                    ActivityPlan::always_active()
                };
                StemSpec {
                    stem_type,
                    pattern_seed,
                    loudness_db,
                    activity_plan,
                }
            })
            .collect();
        CompositionSpec {
            tempo,
            phase,
            style_seed,
            stems,
            clip_frames: self.clip_frames,
        }
    }

    fn sample_plan(&self, rng: &mut impl Rng) -> ActivityPlan {
        loop {
            let spans = rng.random_range(1..=self.max_silent_spans);
            let mut plan = ActivityPlan::default();
            for _ in 0..spans {
                let len = rng.random_range(self.span_frames.0..=self.span_frames.1).min(self.clip_frames);
                let start = rng.random_range(0..=self.clip_frames - len);
                plan.silent_spans.push((start, start + len));
            }
            // merge overlaps so the plan reads back identically from its mask
            plan = ActivityPlan::from_mask(&plan.mask(self.clip_frames));
            if plan.mask(self.clip_frames).active_count() >= self.min_active_frames {
                return plan;
            }
        }
    }
}

/// Weighted sampling of `count` distinct stem types.
pub fn sample_types(weights: &[f64; NUM_STEM_TYPES], count: usize, rng: &mut impl Rng) -> Vec<StemType> {
    let mut remaining: Vec<usize> = (0..NUM_STEM_TYPES).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count.min(NUM_STEM_TYPES) {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (k, &i) in remaining.iter().enumerate() {
            if u < weights[i] {
                pick = k;
                break;
            }
            u -= weights[i];
        }
        out.push(StemType::ALL[remaining.remove(pick)]);
    }
    out.sort();
    out
}

/// One composition held in memory. Latents are rounded to `f32` precision
/// so an in-memory corpus equals one read back from disk.
#[derive(Debug, Clone)]
pub struct Composition {
    pub id: u32,
    pub spec: CompositionSpec,
    pub latents: Vec<StemLatent>,
    pub masks: Vec<ActivityMask>,
}

impl Composition {
    pub fn from_spec(id: u32, spec: CompositionSpec) -> Result<Self> {
        let latents: Vec<StemLatent> = render_latents(&spec)?
            .into_iter()
            .map(|l| {
                let frames = l.frames();
                let data = l.into_vec().into_iter().map(|v| v as f32 as f64).collect();
                StemLatent::from_vec(frames, data)
            })
            .collect::<Result<_>>()?;
        let masks = latents
            .iter()
            .map(|l| codec::detect_activity(&codec::decode(l, None), DEFAULT_SILENCE_CUTOFF_DB))
            .collect::<Result<_>>()?;
        Ok(Self {
            id,
            spec,
            latents,
            masks,
        })
    }

    pub fn stem_count(&self) -> usize {
        self.latents.len()
    }

    pub fn stem_type(&self, k: usize) -> StemType {
        self.spec.stems[k].stem_type
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub compositions: Vec<Composition>,
    pub clip_frames: usize,
}

impl Dataset {
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let compositions = (0..config.compositions)
            .map(|i| Composition::from_spec(i as u32, config.sample_composition(i as u64)))
            .collect::<Result<_>>()?;
        Ok(Self {
            compositions,
            clip_frames: config.clip_frames,
        })
    }

    pub fn from_compositions(compositions: Vec<Composition>) -> Result<Self> {
        let clip_frames = compositions
            .first()
            .map(|c| c.spec.clip_frames)
            .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
        if compositions.iter().any(|c| c.spec.clip_frames != clip_frames) {
            return Err(Error::Shape("compositions disagree on clip length".into()));
        }
        Ok(Self {
            compositions,
            clip_frames,
        })
    }

    pub fn len(&self) -> usize {
        self.compositions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compositions.is_empty()
    }

    pub fn stem_count(&self) -> usize {
        self.compositions.iter().map(Composition::stem_count).sum()
    }

    /// Read a corpus written by [`build_corpus`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST_FILE);
        let file = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut compositions = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&manifest, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(&line)?;
            compositions.push(record.into_composition(dir)?);
        }
        Self::from_compositions(compositions)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStem {
    pub stem_type: StemType,
    pub latent_path: String,
    pub mask: String,
    pub loudness_db: f64,
    pub pattern_seed: u64,
    pub silent_spans: Vec<(usize, usize)>,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub composition_id: u32,
    pub tempo: u32,
    pub phase: usize,
    pub style_seed: usize,
    pub clip_frames: usize,
    pub stems: Vec<ManifestStem>,
    pub style_token: usize,
    pub stem_types: Vec<StemType>,
}

impl ManifestRecord {
    fn into_composition(self, dir: &Path) -> Result<Composition> {
        let spec = CompositionSpec {
            tempo: self.tempo,
            phase: self.phase,
            style_seed: self.style_seed,
            clip_frames: self.clip_frames,
            stems: self
                .stems
                .iter()
                .map(|s| StemSpec {
                    stem_type: s.stem_type,
                    pattern_seed: s.pattern_seed,
                    loudness_db: s.loudness_db,
                    activity_plan: ActivityPlan {
                        silent_spans: s.silent_spans.clone(),
                    },
                })
                .collect(),
        };
        spec.validate()?;
        let mut latents = Vec::new();
        let mut masks = Vec::new();
        for s in &self.stems {
            let latent = read_latent(&dir.join(&s.latent_path))?;
            let mask = ActivityMask::from_bitstring(&s.mask)?;
            if latent.frames() != self.clip_frames || mask.len() != self.clip_frames {
                return Err(Error::Format(format!(
                    "{}: expected {} frames",
                    s.latent_path, self.clip_frames
                )));
            }
            latents.push(latent);
            masks.push(mask);
        }
        Ok(Composition {
            id: self.composition_id,
            spec,
            latents,
            masks,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CorpusSummary {
    pub dir: PathBuf,
    pub compositions: usize,
    pub stems: usize,
    pub type_histogram: [usize; NUM_STEM_TYPES],
}

/// Generate the corpus and write the manifest plus one latent file per stem.
pub fn build_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<(Dataset, CorpusSummary)> {
    let dataset = Dataset::generate(config)?;
    let latent_dir = out_dir.join("latents");
    fs::create_dir_all(&latent_dir).map_err(|e| Error::io(&latent_dir, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut manifest = Vec::new();
    let mut histogram = [0usize; NUM_STEM_TYPES];
    for comp in &dataset.compositions {
        let mut stems = Vec::new();
        for (k, (latent, mask)) in comp.latents.iter().zip(&comp.masks).enumerate() {
            let stem = &comp.spec.stems[k];
            histogram[stem.stem_type.index()] += 1;
            let rel = format!("latents/{:05}_{}.sflt", comp.id, stem.stem_type);
            write_latent(&out_dir.join(&rel), latent)?;
            stems.push(ManifestStem {
                stem_type: stem.stem_type,
                latent_path: rel,
                mask: mask.to_bitstring(),
                loudness_db: stem.loudness_db,
                pattern_seed: stem.pattern_seed,
                silent_spans: stem.activity_plan.silent_spans.clone(),
            });
        }
        let record = ManifestRecord {
            composition_id: comp.id,
            tempo: comp.spec.tempo,
            phase: comp.spec.phase,
            style_seed: comp.spec.style_seed,
            clip_frames: comp.spec.clip_frames,
            style_token: comp.spec.style_seed,
            stem_types: comp.spec.stems.iter().map(|s| s.stem_type).collect(),
            stems,
        };
        serde_json::to_writer(&mut manifest, &record)?;
        manifest.push(b'\n');
    }
    let mut file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    file.write_all(&manifest).map_err(|e| Error::io(&manifest_path, e))?;
    let summary = CorpusSummary {
        dir: out_dir.to_path_buf(),
        compositions: dataset.len(),
        stems: dataset.stem_count(),
        type_histogram: histogram,
    };
    Ok((dataset, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_stem_spec(tempo: u32) -> CompositionSpec {
        CompositionSpec {
            tempo,
            phase: 2,
            style_seed: 3,
            clip_frames: 96,
            stems: vec![
                StemSpec {
                    stem_type: StemType::Drums,
                    pattern_seed: 1,
                    loudness_db: -20.0,
                    activity_plan: ActivityPlan::always_active(),
                },
                StemSpec {
                    stem_type: StemType::Bass,
                    pattern_seed: 2,
                    loudness_db: -18.0,
                    activity_plan: ActivityPlan {
                        silent_spans: vec![(0, 48)],
                    },
                },
            ],
        }
    }

    #[test]
    fn frames_per_beat_grid() {
        let fpb: Vec<usize> = TEMPO_GRID.iter().map(|&t| frames_per_beat(t)).collect();
        assert_eq!(fpb, vec![12, 10, 8, 7, 6, 5, 5]);
    }

    #[test]
    fn stem_type_parsing() {
        assert_eq!("Drums".parse::<StemType>().unwrap(), StemType::Drums);
        assert!("kazoo".parse::<StemType>().is_err());
        assert!(StemType::from_index(6).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = two_stem_spec(120);
        spec.stems.clear();
        assert!(synthesize_composition(&spec).is_err());
        let mut spec = two_stem_spec(120);
        spec.stems[1].stem_type = StemType::Drums;
        assert!(synthesize_composition(&spec).is_err());
        let mut spec = two_stem_spec(121);
        spec.phase = 0;
        assert!(synthesize_composition(&spec).is_err());
    }

    #[test]
    fn unsatisfiable_plans_rejected() {
        let short = CorpusConfig {
            clip_frames: 32,
            ..CorpusConfig::default()
        };
        assert!(Dataset::generate(&short).is_err());
        let ok = CorpusConfig {
            compositions: 4,
            min_active_frames: 8,
            ..short
        };
        assert_eq!(Dataset::generate(&ok).unwrap().compositions.len(), 4);
    }

    #[test]
    fn shared_period_and_onset() {
        let spec = two_stem_spec(120);
        let latents = render_latents(&spec).unwrap();
        let onsets = |l: &StemLatent, from: usize| -> Vec<usize> {
            let peak = (0..96).map(|f| l.frame(f)[TRANSIENT_CHANNEL]).fold(0.0, f64::max);
            (from..96)
                .filter(|&f| l.frame(f)[TRANSIENT_CHANNEL] > 0.5 * peak)
                .collect()
        };
        let drums = onsets(&latents[0], 48);
        let bass = onsets(&latents[1], 48);
        assert_eq!(drums, bass);
        assert_eq!(drums, (50..96).step_by(6).collect::<Vec<_>>());
    }

    #[test]
    fn plan_zeroes_leading_half() {
        let w = synthesize_composition(&two_stem_spec(120)).unwrap();
        assert!(w[1].samples[..48 * HOP].iter().all(|s| *s == 0.0));
        assert!(w[1].frame_rms()[48..].iter().all(|r| *r > 0.0));
    }

    #[test]
    fn loudness_over_active_frames() {
        let spec = two_stem_spec(90);
        let w = synthesize_composition(&spec).unwrap();
        for (wave, stem) in w.iter().zip(&spec.stems) {
            let mask = stem.activity_plan.mask(96);
            let e: f64 = wave
                .frame_rms()
                .iter()
                .zip(&mask.bits)
                .filter(|(_, a)| **a)
                .map(|(r, _)| r * r)
                .sum();
            let rms = (e / mask.active_count() as f64).sqrt();
            assert!((codec::amplitude_to_db(rms) - stem.loudness_db).abs() < 0.5);
        }
    }

    #[test]
    fn codec_exact_on_generated_audio() {
        let config = CorpusConfig {
            compositions: 8,
            ..CorpusConfig::default()
        };
        for i in 0..8 {
            let spec = config.sample_composition(i);
            for w in synthesize_composition(&spec).unwrap() {
                let back = codec::decode(&codec::encode(&w).unwrap(), None);
                let err = w
                    .samples
                    .iter()
                    .zip(&back.samples)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(err <= 1e-9, "round trip error {err}");
            }
        }
    }

    #[test]
    fn generated_masks_follow_plans() {
        let config = CorpusConfig {
            compositions: 32,
            ..CorpusConfig::default()
        };
        let data = Dataset::generate(&config).unwrap();
        for comp in &data.compositions {
            assert!((3..=6).contains(&comp.stem_count()));
            for (stem, mask) in comp.spec.stems.iter().zip(&comp.masks) {
                assert_eq!(*mask, stem.activity_plan.mask(comp.spec.clip_frames));
            }
        }
    }

    #[test]
    fn plan_mask_round_trip() {
        let plan = ActivityPlan {
            silent_spans: vec![(0, 3), (10, 12), (20, 24)],
        };
        assert_eq!(ActivityPlan::from_mask(&plan.mask(24)), plan);
    }
}
