//! Desk-scale metrics: feature-space Fréchet distances, beat synchrony,
//! activity F1, style accuracy and the ablation / workflow report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codec::{self, ActivityMask, StemWaveform, DEFAULT_SILENCE_CUTOFF_DB, LATENT_DIM};
use crate::corpus::{Composition, CorpusConfig, Dataset, StemType, NUM_STYLES};
use crate::error::{Error, Result};
use crate::sampler::{
    generate_from_scratch, mix_stems, run_workflow, VelocityField, SampleConfig, SharedConditions, StemRequest, WorkflowMode,
};
use crate::checkpoint::CheckpointBundle;
use crate::trainer::Setting;

pub const FEATURE_DIM: usize = 2 + 1 + LATENT_DIM + 2 + LATENT_DIM;
pub const MIN_PERIOD: usize = 4;
pub const MAX_PERIOD: usize = 16;

/// Layout: period, phase, activity ratio, per-channel energy (dB),
/// envelope mean, envelope variance, dominant-channel histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn period(&self) -> usize {
        self.0[0] as usize
    }

    pub fn phase(&self) -> usize {
        self.0[1] as usize
    }

    pub fn activity_ratio(&self) -> f64 {
        self.0[2]
    }
}

/// Beat period in frames from the autocorrelation of the frame envelope,
/// using only frame pairs that are both active. 0 if none is found.
pub fn estimate_period(envelope: &[f64], active: &[bool]) -> usize {
    let mut scores = Vec::new();
    for lag in MIN_PERIOD..=MAX_PERIOD {
        let pairs: Vec<(f64, f64)> = (0..envelope.len().saturating_sub(lag))
            .filter(|&f| active[f] && active[f + lag])
            .map(|f| (envelope[f], envelope[f + lag]))
            .collect();
        if pairs.len() < 3 {
            continue;
        }
        let n = pairs.len() as f64;
        let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (a, b) in &pairs {
            sab += (a - ma) * (b - mb);
            saa += (a - ma).powi(2);
            sbb += (b - mb).powi(2);
        }
        if saa > 0.0 && sbb > 0.0 {
            scores.push((lag, sab / (saa * sbb).sqrt()));
        }
    }
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    if !(best > 0.0) {
        return 0;
    }
    scores
        .iter()
        .find(|s| s.1 >= 0.9 * best)
        .map_or(0, |s| s.0)
}

/// Onset phase for a known period: the offset whose comb over active frames
/// collects the largest mean envelope.
pub fn estimate_phase(envelope: &[f64], active: &[bool], period: usize) -> usize {
    if period == 0 {
        return 0;
    }
    let mut best = (0, f64::NEG_INFINITY);
    for phi in 0..period {
        let (mut sum, mut n) = (0.0, 0);
        for f in (phi..envelope.len()).step_by(period) {
            if active[f] {
                sum += envelope[f];
                n += 1;
            }
        }
        if n > 0 && sum / n as f64 > best.1 {
            best = (phi, sum / n as f64);
        }
    }
    best.0
}

pub fn extract_features(w: &StemWaveform) -> Result<FeatureVector> {
    let latent = codec::encode(w)?;
    let mask = codec::detect_activity(w, DEFAULT_SILENCE_CUTOFF_DB)?;
    let env = w.frame_rms();
    let frames = env.len();
    let active = mask.active_count();
    let mut out = Vec::with_capacity(FEATURE_DIM);
    let period = estimate_period(&env, &mask.bits);
    out.push(period as f64);
    out.push(estimate_phase(&env, &mask.bits, period) as f64);
    out.push(if frames == 0 { 0.0 } else { active as f64 / frames as f64 });
    for d in 0..LATENT_DIM {
        let e = (0..frames).map(|f| latent.frame(f)[d].powi(2)).sum::<f64>() / frames.max(1) as f64;
        out.push(10.0 * (e + 1e-12).log10());
    }
    let mean = env.iter().sum::<f64>() / frames.max(1) as f64;
    let var = env.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / frames.max(1) as f64;
    out.push(mean);
    out.push(var);
    let mut hist = [0.0; LATENT_DIM];
    for f in (0..frames).filter(|&f| mask.bits[f]) {
        let row = latent.frame(f);
        let arg = (0..LATENT_DIM)
            .max_by(|&a, &b| row[a].abs().total_cmp(&row[b].abs()).then(b.cmp(&a)))
            .expect("non-empty row");
        hist[arg] += 1.0 / active as f64;
    }
    out.extend(hist);
    debug_assert_eq!(out.len(), FEATURE_DIM);
    Ok(FeatureVector(out))
}

/// Per-dimension standardisation fitted on a reference set. Constant
/// dimensions keep unit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(set: &[FeatureVector]) -> Result<Self> {
        let first = set.first().ok_or(Error::DegenerateSet { have: 0, need: 1 })?;
        let dim = first.0.len();
        let n = set.len() as f64;
        let mut mean = vec![0.0; dim];
        for v in set {
            mean.iter_mut().zip(&v.0).for_each(|(m, x)| *m += x / n);
        }
        let mut std = vec![0.0; dim];
        for v in set {
            std.iter_mut().zip(&v.0).zip(&mean).for_each(|((s, x), m)| *s += (x - m).powi(2) / n);
        }
        for s in &mut std {
            *s = if *s > 1e-18 { s.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, v: &FeatureVector) -> FeatureVector {
        FeatureVector(
            v.0.iter()
                .zip(&self.mean)
                .zip(&self.std)
                .map(|((x, m), s)| (x - m) / s)
                .collect(),
        )
    }

    pub fn apply_all(&self, set: &[FeatureVector]) -> Vec<FeatureVector> {
        set.iter().map(|v| self.apply(v)).collect()
    }
}

fn moments(set: &[FeatureVector]) -> (DVector<f64>, DMatrix<f64>) {
    let dim = set[0].0.len();
    let n = set.len();
    let data = DMatrix::from_fn(n, dim, |i, j| set[i].0[j]);
    let mean = DVector::from_fn(dim, |j, _| data.column(j).mean());
    let mut centered = data;
    for j in 0..dim {
        let m = mean[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for j in 0..dim {
        cov[(j, j)] += 1e-6;
    }
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_distance(a: &[FeatureVector], b: &[FeatureVector]) -> Result<f64> {
    let dim = a.first().or(b.first()).map_or(FEATURE_DIM, |v| v.0.len());
    let need = dim + 1;
    for set in [a, b] {
        if set.len() < need {
            return Err(Error::DegenerateSet { have: set.len(), need });
        }
        if set.iter().any(|v| v.0.len() != dim) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        if set.iter().any(|v| v.0.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteInput("feature vector".into()));
        }
    }
    let (ma, ca) = moments(a);
    let (mb, cb) = moments(b);
    let s = psd_sqrt(&ca);
    let inner = &s * &cb * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroFad {
    pub value: f64,
    pub per_type: BTreeMap<StemType, f64>,
    /// Types that could not be scored: absent from the reference, or too
    /// few examples on either side.
    pub excluded: Vec<StemType>,
}

/// Per-stem-type Fréchet distance, averaged over scorable reference types.
pub fn macro_fad_by_stem_type(
    generated: &[(StemType, FeatureVector)],
    reference: &[(StemType, FeatureVector)],
) -> Result<MacroFad> {
    let group = |set: &[(StemType, FeatureVector)]| {
        let mut m: BTreeMap<StemType, Vec<FeatureVector>> = BTreeMap::new();
        for (t, v) in set {
            m.entry(*t).or_default().push(v.clone());
        }
        m
    };
    let gen = group(generated);
    let reference = group(reference);
    let mut per_type = BTreeMap::new();
    let mut excluded = Vec::new();
    for (t, r) in &reference {
        match gen.get(t) {
            Some(g) => match frechet_distance(g, r) {
                Ok(d) => {
                    per_type.insert(*t, d);
                }
                Err(Error::DegenerateSet { .. }) => excluded.push(*t),
                Err(e) => return Err(e),
            },
            None => excluded.push(*t),
        }
    }
    excluded.extend(gen.keys().filter(|t| !reference.contains_key(t)));
    excluded.sort();
    if per_type.is_empty() {
        return Err(Error::DegenerateSet { have: 0, need: 1 });
    }
    let value = per_type.values().sum::<f64>() / per_type.len() as f64;
    Ok(MacroFad {
        value,
        per_type,
        excluded,
    })
}

fn circular_distance(a: usize, b: usize, period: usize) -> usize {
    let d = a.abs_diff(b) % period;
    d.min(period - d)
}

/// Fraction of non-silent stems sharing the modal beat period and lying
/// within one frame of a common phase.
pub fn sync_coherence(stems: &[StemWaveform]) -> Result<f64> {
    let mut estimates = Vec::new();
    for s in stems {
        let f = extract_features(s)?;
        if f.activity_ratio() > 0.0 {
            estimates.push((f.period(), f.phase()));
        }
    }
    if estimates.is_empty() {
        log::warn!("sync_coherence: every stem is silent");
        return Ok(0.0);
    }
    if estimates.len() == 1 {
        return Ok(1.0);
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (p, _) in estimates.iter().filter(|e| e.0 > 0) {
        *counts.entry(*p).or_default() += 1;
    }
    let Some((&period, _)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
        return Ok(0.0);
    };
    let phases: Vec<usize> = estimates.iter().filter(|e| e.0 == period).map(|e| e.1).collect();
    let best = (0..period)
        .map(|phi| phases.iter().filter(|&&p| circular_distance(p, phi, period) <= 1).count())
        .max()
        .unwrap_or(0);
    Ok(best as f64 / estimates.len() as f64)
}

/// Frame F1 of the re-detected activity against the requested mask,
/// active frames being positive. 1.0 when neither side has positives.
pub fn activity_f1(target: &ActivityMask, generated: &StemWaveform, cutoff_db: f64) -> Result<f64> {
    let detected = codec::detect_activity(generated, cutoff_db)?;
    if detected.len() != target.len() {
        return Err(Error::Shape(format!(
            "mask has {} frames, audio has {}",
            target.len(),
            detected.len()
        )));
    }
    Ok(mask_f1(target, &detected))
}

pub fn mask_f1(target: &ActivityMask, detected: &ActivityMask) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&t, &d) in target.bits.iter().zip(&detected.bits) {
        match (t, d) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Nearest-centroid style classifier over standardised mix features.
#[derive(Debug, Clone)]
pub struct StyleClassifier {
    scaler: FeatureScaler,
    centroids: Vec<Option<Vec<f64>>>,
}

impl StyleClassifier {
    pub fn fit(examples: &[(usize, FeatureVector)]) -> Result<Self> {
        let all: Vec<FeatureVector> = examples.iter().map(|e| e.1.clone()).collect();
        let scaler = FeatureScaler::fit(&all)?;
        let mut sums: Vec<(Vec<f64>, usize)> = vec![(vec![0.0; all[0].0.len()], 0); NUM_STYLES];
        for (style, v) in examples {
            if *style >= NUM_STYLES {
                return Err(Error::Vocabulary(format!("style token {style}")));
            }
            let z = scaler.apply(v);
            let (s, n) = &mut sums[*style];
            s.iter_mut().zip(&z.0).for_each(|(a, b)| *a += b);
            *n += 1;
        }
        let centroids = sums
            .into_iter()
            .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|x| x / n as f64).collect()))
            .collect();
        Ok(Self { scaler, centroids })
    }

    pub fn predict(&self, v: &FeatureVector) -> usize {
        let z = self.scaler.apply(v);
        let mut best = (0, f64::INFINITY);
        for (style, c) in self.centroids.iter().enumerate() {
            if let Some(c) = c {
                let d: f64 = c.iter().zip(&z.0).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.1 {
                    best = (style, d);
                }
            }
        }
        best.0
    }

    pub fn accuracy(&self, examples: &[(usize, FeatureVector)]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let hits = examples.iter().filter(|(s, v)| self.predict(v) == *s).count();
        hits as f64 / examples.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out generation requests (one composition each).
    pub requests: usize,
    pub stems_per_request: usize,
    /// Held-out compositions rendered as the Fréchet reference.
    pub reference_compositions: usize,
    pub held_out_seed: u64,
    pub settings: Vec<Setting>,
    pub infer_share: Vec<bool>,
    pub sample: SampleConfig,
    /// Setting whose checkpoint runs the one- and two-pass workflow rows;
    /// `None` skips all workflow rows.
    pub workflow_setting: Option<Setting>,
    /// The k-pass baseline runs on the ungrouped model.
    pub k_pass_setting: Setting,
    pub include_timing: bool,
    pub cutoff_db: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            requests: 64,
            stems_per_request: 4,
            reference_compositions: 256,
            held_out_seed: 7_919,
            settings: vec![Setting::A, Setting::B, Setting::C],
            infer_share: vec![false, true],
            sample: SampleConfig::default(),
            workflow_setting: Some(Setting::C),
            k_pass_setting: Setting::A,
            include_timing: true,
            cutoff_db: DEFAULT_SILENCE_CUTOFF_DB,
        }
    }
}

impl EvalConfig {
    /// Held-out compositions: fixed stem count, every stem partially silent.
    pub fn held_out_corpus(&self, clip_frames: usize) -> CorpusConfig {
        CorpusConfig {
            compositions: self.requests,
            clip_frames,
            seed: self.held_out_seed,
            min_stems: self.stems_per_request,
            max_stems: self.stems_per_request,
            plan_probability: 1.0,
            ..CorpusConfig::default()
        }
    }

    pub fn held_out(&self, clip_frames: usize) -> Result<(Vec<Composition>, Vec<Composition>)> {
        let cfg = self.held_out_corpus(clip_frames);
        let requests = (0..self.requests)
            .map(|i| Composition::from_spec(i as u32, cfg.sample_composition(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let reference_cfg = CorpusConfig {
            min_stems: 3,
            max_stems: 6,
            ..cfg
        };
        let reference = (0..self.reference_compositions)
            .map(|i| {
                let index = (self.requests + i) as u64;
                Composition::from_spec(index as u32, reference_cfg.sample_composition(index))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((requests, reference))
    }
}

/// Requests reproducing a composition's stem types and masks.
pub fn requests_for(comp: &Composition) -> (Vec<StemRequest>, SharedConditions) {
    let requests = comp
        .spec
        .stems
        .iter()
        .zip(&comp.masks)
        .map(|(s, m)| StemRequest {
            stem_type: s.stem_type,
            activity: Some(m.clone()),
        })
        .collect();
    let shared = SharedConditions::new(comp.spec.style_seed, comp.spec.tempo, comp.spec.clip_frames);
    (requests, shared)
}

/// Generated audio of one report row.
#[derive(Debug, Clone)]
pub struct GeneratedSet {
    /// Per request: (requested stem, waveform).
    pub groups: Vec<Vec<(StemRequest, StemWaveform)>>,
    pub mixes: Vec<StemWaveform>,
    pub styles: Vec<usize>,
    pub wall_time_ms: f64,
}

pub fn request_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(1_000 * index as u64)
}

/// One-call generation of every held-out request.
pub fn generate_set(model: &dyn VelocityField, requests: &[Composition], sample: &SampleConfig) -> Result<GeneratedSet> {
    let mut out = GeneratedSet {
        groups: Vec::new(),
        mixes: Vec::new(),
        styles: Vec::new(),
        wall_time_ms: 0.0,
    };
    for (i, comp) in requests.iter().enumerate() {
        let (reqs, shared) = requests_for(comp);
        let config = SampleConfig {
            seed: request_seed(sample.seed, i),
            ..sample.clone()
        };
        let timer = Instant::now();
        let (gen, mix) = generate_from_scratch(model, &reqs, &shared, &config)?;
        out.wall_time_ms += timer.elapsed().as_secs_f64() * 1e3;
        out.groups.push(reqs.into_iter().zip(gen.stems).collect());
        out.mixes.push(mix);
        out.styles.push(comp.spec.style_seed);
    }
    Ok(out)
}

/// Every held-out request run through one workflow.
pub fn workflow_set(
    model: &dyn VelocityField,
    requests: &[Composition],
    mode: WorkflowMode,
    sample: &SampleConfig,
) -> Result<GeneratedSet> {
    let mut out = GeneratedSet {
        groups: Vec::new(),
        mixes: Vec::new(),
        styles: Vec::new(),
        wall_time_ms: 0.0,
    };
    for (i, comp) in requests.iter().enumerate() {
        let (reqs, shared) = requests_for(comp);
        let config = SampleConfig {
            seed: request_seed(sample.seed, i),
            ..sample.clone()
        };
        let w = run_workflow(model, &reqs, &shared, mode, &config)?;
        out.wall_time_ms += w.report.wall_time_ms;
        out.groups.push(reqs.into_iter().zip(w.stems).collect());
        out.mixes.push(w.mix);
        out.styles.push(comp.spec.style_seed);
    }
    Ok(out)
}

/// Reference features shared by every row.
#[derive(Debug, Clone)]
pub struct Reference {
    pub stems: Vec<(StemType, FeatureVector)>,
    pub mixes: Vec<FeatureVector>,
    pub stem_scaler: FeatureScaler,
    pub mix_scaler: FeatureScaler,
    pub style: StyleClassifier,
}

fn composition_audio(comp: &Composition) -> Result<(Vec<StemWaveform>, StemWaveform)> {
    let stems: Vec<StemWaveform> = comp
        .latents
        .iter()
        .zip(&comp.spec.stems)
        .map(|(l, s)| codec::decode(l, Some(s.stem_type)))
        .collect();
    let mix = mix_stems(&stems)?;
    Ok((stems, mix))
}

impl Reference {
    pub fn build(reference: &[Composition], style_corpus: &Dataset) -> Result<Self> {
        let mut stems = Vec::new();
        let mut mixes = Vec::new();
        for comp in reference {
            let (audio, mix) = composition_audio(comp)?;
            for (w, s) in audio.iter().zip(&comp.spec.stems) {
                stems.push((s.stem_type, extract_features(w)?));
            }
            mixes.push(extract_features(&mix)?);
        }
        let stem_scaler = FeatureScaler::fit(&stems.iter().map(|s| s.1.clone()).collect::<Vec<_>>())?;
        let mix_scaler = FeatureScaler::fit(&mixes)?;
        let mut style_examples = Vec::new();
        for comp in &style_corpus.compositions {
            let (_, mix) = composition_audio(comp)?;
            style_examples.push((comp.spec.style_seed, extract_features(&mix)?));
        }
        let style = StyleClassifier::fit(&style_examples)?;
        let stems = stems.into_iter().map(|(t, v)| (t, stem_scaler.apply(&v))).collect();
        let mixes = mix_scaler.apply_all(&mixes);
        Ok(Self {
            stems,
            mixes,
            stem_scaler,
            mix_scaler,
            style,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub fad_stem: f64,
    pub fad_mix: f64,
    pub style_acc: f64,
    pub sync: f64,
    pub f1: f64,
    pub wall_time_ms: f64,
    pub excluded_types: Vec<StemType>,
}

pub fn score_set(set: &GeneratedSet, reference: &Reference, cutoff_db: f64) -> Result<CellMetrics> {
    let mut stems = Vec::new();
    let mut f1 = Vec::new();
    let mut sync = Vec::new();
    for group in &set.groups {
        for (req, w) in group {
            stems.push((req.stem_type, reference.stem_scaler.apply(&extract_features(w)?)));
            if let Some(mask) = &req.activity {
                f1.push(activity_f1(mask, w, cutoff_db)?);
            }
        }
        let audio: Vec<StemWaveform> = group.iter().map(|g| g.1.clone()).collect();
        sync.push(sync_coherence(&audio)?);
    }
    let mut mixes = Vec::new();
    let mut styled = Vec::new();
    for (mix, &style) in set.mixes.iter().zip(&set.styles) {
        let f = extract_features(mix)?;
        styled.push((style, f.clone()));
        mixes.push(reference.mix_scaler.apply(&f));
    }
    let fad = macro_fad_by_stem_type(&stems, &reference.stems)?;
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(CellMetrics {
        fad_stem: fad.value,
        fad_mix: frechet_distance(&mixes, &reference.mixes)?,
        style_acc: reference.style.accuracy(&styled),
        sync: mean(&sync),
        f1: if f1.is_empty() { 1.0 } else { mean(&f1) },
        wall_time_ms: set.wall_time_ms,
        excluded_types: fad.excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub setting: String,
    pub infer_share: bool,
    /// `None` when the checkpoint for the row is missing.
    pub metrics: Option<CellMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub const REPORT_HEADER: &str = "setting,infer_share,fad_stem,fad_mix,style_acc,sync,f1,wall_time_ms";

impl MetricReport {
    pub fn row(&self, setting: &str, infer_share: bool) -> Option<&CellMetrics> {
        self.rows
            .iter()
            .find(|r| r.setting == setting && r.infer_share == infer_share)
            .and_then(|r| r.metrics.as_ref())
    }

    /// Comma-delimited table. Without timing the wall-time column holds `-`
    /// and the output depends only on seeds and checkpoints.
    pub fn to_table(&self, include_timing: bool) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            match &r.metrics {
                Some(m) => {
                    let time = if include_timing {
                        format!("{:.1}", m.wall_time_ms)
                    } else {
                        "-".into()
                    };
                    let _ = writeln!(
                        out,
                        "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                        r.setting, r.infer_share, m.fad_stem, m.fad_mix, m.style_acc, m.sync, m.f1, time
                    );
                }
                None => {
                    let _ = writeln!(out, "{},{},absent,absent,absent,absent,absent,absent", r.setting, r.infer_share);
                }
            }
        }
        out
    }
}

/// Score every (setting x inference noise sharing) cell and, when
/// configured, the three workflows.
pub fn run_eval_suite(
    checkpoints: &BTreeMap<Setting, CheckpointBundle>,
    corpus: &Dataset,
    config: &EvalConfig,
) -> Result<MetricReport> {
    let (requests, reference_comps) = config.held_out(corpus.clip_frames)?;
    let reference = Reference::build(&reference_comps, corpus)?;
    let mut rows = Vec::new();
    for &setting in &config.settings {
        let model = checkpoints.get(&setting).map(|b| b.model()).transpose()?;
        for &share in &config.infer_share {
            let metrics = match &model {
                Some(m) => {
                    let sample = SampleConfig {
                        share_noise: share,
                        ..config.sample.clone()
                    };
                    log::info!("eval: setting {setting}, shared noise {share}");
                    let set = generate_set(m, &requests, &sample)?;
                    Some(score_set(&set, &reference, config.cutoff_db)?)
                }
                None => None,
            };
            rows.push(MetricRow {
                setting: setting.to_string(),
                infer_share: share,
                metrics,
            });
        }
    }
    if let Some(workflow_setting) = config.workflow_setting {
        for mode in WorkflowMode::ALL {
            let setting = if mode == WorkflowMode::KPass {
                config.k_pass_setting
            } else {
                workflow_setting
            };
            let metrics = match checkpoints.get(&setting) {
                Some(b) => {
                    let sample = SampleConfig {
                        share_noise: true,
                        ..config.sample.clone()
                    };
                    log::info!("eval: workflow {mode} with setting {setting}");
                    let set = workflow_set(&b.model()?, &requests, mode, &sample)?;
                    Some(score_set(&set, &reference, config.cutoff_db)?)
                }
                None => None,
            };
            rows.push(MetricRow {
                setting: format!("{setting}:{mode}"),
                infer_share: true,
                metrics,
            });
        }
    }
    Ok(MetricReport { rows })
}
