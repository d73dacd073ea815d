//! On-disk formats: latent files and 16-bit PCM WAV export.
//!
//! Latent file layout (little-endian):
//!
//! ```text
//! 0..4   magic  b"SFLT"
//! 4..8   u32    frame count T
//! 8..12  u32    width D
//! 12..16 u32    format version (1)
//! 16..   f32    T*D values, row-major
//! ```

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use crate::codec::{StemLatent, StemWaveform, LATENT_DIM, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const LATENT_MAGIC: &[u8; 4] = b"SFLT";
pub const LATENT_VERSION: u32 = 1;

pub fn latent_to_bytes(latent: &StemLatent) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * latent.as_slice().len());
    out.extend_from_slice(LATENT_MAGIC);
    out.extend_from_slice(&(latent.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(LATENT_DIM as u32).to_le_bytes());
    out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
    for v in latent.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn latent_from_bytes(bytes: &[u8]) -> Result<StemLatent> {
    if bytes.len() < 16 || &bytes[..4] != LATENT_MAGIC {
        return Err(Error::Format("missing latent header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (frames, width, version) = (word(4), word(8), word(12));
    if version != LATENT_VERSION as usize {
        return Err(Error::Format(format!("unsupported latent version {version}")));
    }
    if width != LATENT_DIM {
        return Err(Error::Shape(format!("latent width {width}, expected {LATENT_DIM}")));
    }
    let body = &bytes[16..];
    if body.len() != frames * width * 4 {
        return Err(Error::Format(format!(
            "latent body has {} bytes, header promises {}",
            body.len(),
            frames * width * 4
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    StemLatent::from_vec(frames, data)
}

pub fn write_latent(path: &Path, latent: &StemLatent) -> Result<()> {
    fs::write(path, latent_to_bytes(latent)).map_err(|e| Error::io(path, e))
}

pub fn read_latent(path: &Path) -> Result<StemLatent> {
    latent_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn wav_spec() -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

/// 16-bit PCM mono WAV bytes; samples outside [-1, 1] are clipped.
pub fn wav_bytes(w: &StemWaveform) -> Result<Vec<u8>> {
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, wav_spec())?;
        for s in &w.samples {
            let q = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
            writer.write_sample(q)?;
        }
        writer.finalize()?;
    }
    Ok(cursor.into_inner())
}

pub fn write_wav(path: &Path, w: &StemWaveform) -> Result<()> {
    let bytes = wav_bytes(w)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_wav(bytes: &[u8]) -> Result<StemWaveform> {
    let mut reader = hound::WavReader::new(Cursor::new(bytes))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!("unexpected WAV format {spec:?}")));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / i16::MAX as f64))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(StemWaveform::new(samples, None))
}

/// Write `bytes` to a temp file beside `path`, then rename over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
