//! Toy waveform/latent codec.
//!
//! Mono audio at [`SAMPLE_RATE`] is cut into hops of [`HOP`] samples; each hop
//! is projected onto a fixed orthonormal basis of [`LATENT_DIM`] cosine
//! vectors, giving 12 latent frames per second. The transform is linear and
//! lossless on its own image, which is where the corpus generator renders.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corpus::StemType;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 1536;
pub const HOP: usize = 128;
pub const LATENT_DIM: usize = 8;
pub const FRAME_RATE: usize = SAMPLE_RATE as usize / HOP;
pub const DEFAULT_SILENCE_CUTOFF_DB: f64 = -60.0;
pub const DEFAULT_MIX_DBFS: f64 = -16.0;

/// DCT-II bin used for each latent channel.
const BASIS_BINS: [usize; LATENT_DIM] = [2, 5, 9, 14, 20, 27, 35, 44];

/// Row-major `LATENT_DIM x HOP` analysis basis.
pub fn basis() -> &'static [[f64; HOP]; LATENT_DIM] {
    static BASIS: OnceLock<[[f64; HOP]; LATENT_DIM]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; HOP]; LATENT_DIM];
        let scale = (2.0 / HOP as f64).sqrt();
        for (row, &k) in b.iter_mut().zip(BASIS_BINS.iter()) {
            for (n, v) in row.iter_mut().enumerate() {
                let arg = std::f64::consts::PI * k as f64 * (2 * n + 1) as f64 / (2 * HOP) as f64;
                *v = scale * arg.cos();
            }
        }
        b
    })
}

pub fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

pub fn amplitude_to_db(a: f64) -> f64 {
    20.0 * a.max(1e-300).log10()
}

/// Mono waveform of one stem (or a mix, when `stem_type` is `None`).
#[derive(Debug, Clone, PartialEq)]
pub struct StemWaveform {
    pub samples: Vec<f64>,
    pub stem_type: Option<StemType>,
}

impl StemWaveform {
    pub fn new(samples: Vec<f64>, stem_type: Option<StemType>) -> Self {
        Self { samples, stem_type }
    }

    pub fn silence(frames: usize, stem_type: Option<StemType>) -> Self {
        Self::new(vec![0.0; frames * HOP], stem_type)
    }

    pub fn frame_count(&self) -> usize {
        self.samples.len() / HOP
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Per-frame RMS over each hop.
    pub fn frame_rms(&self) -> Vec<f64> {
        self.samples
            .chunks_exact(HOP)
            .map(|c| (c.iter().map(|s| s * s).sum::<f64>() / HOP as f64).sqrt())
            .collect()
    }
}

/// `T x LATENT_DIM` latent sequence, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemLatent {
    frames: usize,
    data: Vec<f64>,
}

impl StemLatent {
    pub fn zeros(frames: usize) -> Self {
        Self {
            frames,
            data: vec![0.0; frames * LATENT_DIM],
        }
    }

    pub fn from_vec(frames: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * LATENT_DIM {
            return Err(Error::Shape(format!(
                "latent of {} values cannot be {frames} x {LATENT_DIM}",
                data.len()
            )));
        }
        Ok(Self { frames, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.data[f * LATENT_DIM..(f + 1) * LATENT_DIM]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += gain * other`.
    pub fn add_scaled(&mut self, other: &StemLatent, gain: f64) -> Result<()> {
        if other.frames != self.frames {
            return Err(Error::Shape(format!(
                "cannot add latent of {} frames to one of {} frames",
                other.frames, self.frames
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += gain * b;
        }
        Ok(())
    }

    /// Latent-domain sum of several latents; equals encoding the waveform sum.
    pub fn sum<'a, I>(frames: usize, latents: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a StemLatent>,
    {
        let mut out = Self::zeros(frames);
        for l in latents {
            out.add_scaled(l, 1.0)?;
        }
        Ok(out)
    }
}

/// Binary per-frame activity, `true` = active. Serialized as a `"0110..."`
/// string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ActivityMask {
    pub bits: Vec<bool>,
}

impl TryFrom<String> for ActivityMask {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::from_bitstring(&s)
    }
}

impl From<ActivityMask> for String {
    fn from(m: ActivityMask) -> String {
        m.to_bitstring()
    }
}

impl ActivityMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all(frames: usize, active: bool) -> Self {
        Self::new(vec![active; frames])
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Compact `'0'/'1'` rendering used by the manifest.
    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Format(format!("invalid mask character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }
}

pub fn encode(w: &StemWaveform) -> Result<StemLatent> {
    if w.samples.len() % HOP != 0 {
        return Err(Error::Shape(format!(
            "waveform length {} is not a multiple of the hop {HOP}",
            w.samples.len()
        )));
    }
    let b = basis();
    let frames = w.samples.len() / HOP;
    let mut data = Vec::with_capacity(frames * LATENT_DIM);
    for chunk in w.samples.chunks_exact(HOP) {
        for row in b.iter() {
            data.push(row.iter().zip(chunk).map(|(x, y)| x * y).sum());
        }
    }
    Ok(StemLatent { frames, data })
}

pub fn decode(x: &StemLatent, stem_type: Option<StemType>) -> StemWaveform {
    let b = basis();
    let mut samples = vec![0.0; x.frames * HOP];
    for (f, out) in samples.chunks_exact_mut(HOP).enumerate() {
        for (coef, row) in x.frame(f).iter().zip(b.iter()) {
            if *coef == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(row) {
                *o += coef * v;
            }
        }
    }
    StemWaveform::new(samples, stem_type)
}

/// Decode a raw row-major buffer whose width must be [`LATENT_DIM`].
pub fn decode_raw(frames: usize, width: usize, data: &[f64]) -> Result<StemWaveform> {
    if width != LATENT_DIM {
        return Err(Error::Shape(format!(
            "latent width {width}, codec expects {LATENT_DIM}"
        )));
    }
    let latent = StemLatent::from_vec(frames, data.to_vec())?;
    Ok(decode(&latent, None))
}

/// Loudness-based silence detection: a frame is active iff its RMS reaches
/// the cutoff relative to full scale.
pub fn detect_activity(w: &StemWaveform, cutoff_db: f64) -> Result<ActivityMask> {
    if w.samples.len() % HOP != 0 {
        return Err(Error::Shape(format!(
            "waveform length {} is not a multiple of the hop {HOP}",
            w.samples.len()
        )));
    }
    let threshold = db_to_amplitude(cutoff_db);
    Ok(ActivityMask::new(
        w.frame_rms().into_iter().map(|r| r >= threshold).collect(),
    ))
}

/// Same rule evaluated directly on a latent (frame RMS = frame norm / sqrt(HOP)).
pub fn detect_activity_latent(x: &StemLatent, cutoff_db: f64) -> ActivityMask {
    let threshold = db_to_amplitude(cutoff_db);
    ActivityMask::new(
        (0..x.frames())
            .map(|f| {
                let e: f64 = x.frame(f).iter().map(|v| v * v).sum();
                (e / HOP as f64).sqrt() >= threshold
            })
            .collect(),
    )
}

/// Sample-wise weighted sum. No clipping.
pub fn mix(stems: &[StemWaveform], gains: &[f64]) -> Result<StemWaveform> {
    if stems.len() != gains.len() {
        return Err(Error::Shape(format!(
            "{} stems but {} gains",
            stems.len(),
            gains.len()
        )));
    }
    let len = stems.first().map_or(0, |s| s.samples.len());
    if let Some(bad) = stems.iter().find(|s| s.samples.len() != len) {
        return Err(Error::Shape(format!(
            "stem length {} differs from {len}",
            bad.samples.len()
        )));
    }
    let mut out = vec![0.0; len];
    for (stem, &g) in stems.iter().zip(gains) {
        for (o, s) in out.iter_mut().zip(&stem.samples) {
            *o += g * s;
        }
    }
    Ok(StemWaveform::new(out, None))
}

/// Scale by one global gain so the overall RMS hits `target_dbfs`.
pub fn normalize_mix(w: &StemWaveform, target_dbfs: f64) -> Result<StemWaveform> {
    let rms = w.rms();
    if rms == 0.0 || !rms.is_finite() {
        return Err(Error::SilentMix);
    }
    let gain = db_to_amplitude(target_dbfs) / rms;
    Ok(StemWaveform::new(
        w.samples.iter().map(|s| s * gain).collect(),
        w.stem_type,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(frames: usize) -> StemWaveform {
        StemWaveform::new(
            (0..frames * HOP).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect(),
            None,
        )
    }

    #[test]
    fn basis_is_orthonormal() {
        let b = basis();
        for i in 0..LATENT_DIM {
            for j in 0..LATENT_DIM {
                let dot: f64 = b[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12, "<b{i}, b{j}> = {dot}");
            }
        }
    }

    #[test]
    fn zero_waveform_encodes_to_zero() {
        let x = encode(&StemWaveform::silence(4, None)).unwrap();
        assert!(x.as_slice().iter().all(|v| *v == 0.0));
        let w = decode(&StemLatent::zeros(4), None);
        assert!(w.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_rejects_partial_hop() {
        let w = StemWaveform::new(vec![0.0; HOP + 3], None);
        assert!(matches!(encode(&w), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_rejects_wrong_width() {
        assert!(decode_raw(2, 4, &[0.0; 8]).is_err());
    }

    #[test]
    fn unit_latent_decodes_to_basis_vector() {
        let mut x = StemLatent::zeros(3);
        x.as_mut_slice()[0] = 1.0;
        let w = decode(&x, None);
        for (n, v) in w.samples[..HOP].iter().enumerate() {
            assert_eq!(*v, basis()[0][n]);
        }
        assert!(w.samples[HOP..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn latent_round_trip() {
        let mut x = StemLatent::zeros(5);
        for (i, v) in x.as_mut_slice().iter_mut().enumerate() {
            *v = ((i * 7919) % 23) as f64 / 7.0 - 1.5;
        }
        let back = encode(&decode(&x, None)).unwrap();
        for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn encode_is_homogeneous() {
        let w = ramp(3);
        let scaled = StemWaveform::new(w.samples.iter().map(|s| -2.5 * s).collect(), None);
        let a = encode(&w).unwrap();
        let b = encode(&scaled).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((-2.5 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn activity_edges() {
        assert!(detect_activity(&StemWaveform::silence(6, None), -60.0)
            .unwrap()
            .bits
            .iter()
            .all(|b| !b));
        let full = StemWaveform::new(vec![1.0; 6 * HOP], None);
        assert!(detect_activity(&full, -60.0).unwrap().bits.iter().all(|b| *b));
        assert!(detect_activity(&StemWaveform::new(vec![], None), -60.0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn activity_split_at_cutoff() {
        // first half at -80 dBFS, second half a full-scale alternating pattern
        let quiet = db_to_amplitude(-80.0);
        let mut samples = vec![quiet; 4 * HOP];
        samples.extend((0..4 * HOP).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }));
        let w = StemWaveform::new(samples, None);
        // oracle: frame RMS straight from the samples
        let expected: Vec<bool> = w
            .samples
            .chunks(HOP)
            .map(|c| (c.iter().map(|s| s * s).sum::<f64>() / c.len() as f64).sqrt() >= 1e-3)
            .collect();
        assert_eq!(expected, vec![false, false, false, false, true, true, true, true]);
        assert_eq!(detect_activity(&w, -60.0).unwrap().bits, expected);
    }

    #[test]
    fn mix_arithmetic() {
        let a = ramp(2);
        let b = StemWaveform::new(a.samples.iter().rev().copied().collect(), None);
        let m = mix(&[a.clone(), b.clone()], &[1.0, 1.0]).unwrap();
        for i in 0..m.samples.len() {
            assert_eq!(m.samples[i], a.samples[i] + b.samples[i]);
        }
        let z = mix(&[a.clone(), b.clone()], &[0.0, 0.0]).unwrap();
        assert!(z.samples.iter().all(|v| *v == 0.0));
        let w = mix(&[a.clone(), b.clone()], &[0.5, 2.0]).unwrap();
        for i in 0..w.samples.len() {
            assert!((w.samples[i] - (0.5 * a.samples[i] + 2.0 * b.samples[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn mix_rejects_mismatch() {
        assert!(mix(&[ramp(2), ramp(3)], &[1.0, 1.0]).is_err());
        assert!(mix(&[ramp(2)], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn normalize_sine_like_pattern() {
        // alternating +-0.5 has RMS exactly 0.5
        let w = StemWaveform::new(
            (0..4 * HOP).map(|i| if i % 2 == 0 { 0.5 } else { -0.5 }).collect(),
            None,
        );
        assert!((w.rms() - 0.5).abs() < 1e-15);
        let target = 10f64.powf(-16.0 / 20.0);
        let gain = target / 0.5;
        assert!((gain - 0.3170).abs() < 5e-5);
        let n = normalize_mix(&w, DEFAULT_MIX_DBFS).unwrap();
        assert!((n.rms() - 0.15849).abs() < 1e-5);
        assert!((n.samples[0] - 0.5 * gain).abs() < 1e-15);
    }

    #[test]
    fn normalize_identity_and_idempotence() {
        let target = db_to_amplitude(-16.0);
        let w = StemWaveform::new(vec![target; 2 * HOP], None);
        let n = normalize_mix(&w, -16.0).unwrap();
        for (a, b) in w.samples.iter().zip(&n.samples) {
            assert!((a - b).abs() <= 1e-9);
        }
        let once = normalize_mix(&ramp(3), -16.0).unwrap();
        let twice = normalize_mix(&once, -16.0).unwrap();
        for (a, b) in once.samples.iter().zip(&twice.samples) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn normalize_rejects_silence() {
        assert!(matches!(
            normalize_mix(&StemWaveform::silence(2, None), -16.0),
            Err(Error::SilentMix)
        ));
    }

    #[test]
    fn bitstring_round_trip() {
        let m = ActivityMask::new(vec![true, false, false, true]);
        assert_eq!(m.to_bitstring(), "1001");
        assert_eq!(ActivityMask::from_bitstring("1001").unwrap(), m);
        assert!(ActivityMask::from_bitstring("10x1").is_err());
    }
}
