//! Minimal 16-bit PCM mono WAV reader/writer.

use super::AudioClip;
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = clip.samples.len() as u32;
    let data_bytes = n * 2;
    let byte_rate = clip.sample_rate * 2;
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_bytes).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // PCM
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&clip.sample_rate.to_le_bytes())?;
    w.write_all(&byte_rate.to_le_bytes())?;
    w.write_all(&2u16.to_le_bytes())?; // block align
    w.write_all(&16u16.to_le_bytes())?; // bits per sample
    w.write_all(b"data")?;
    w.write_all(&data_bytes.to_le_bytes())?;
    for &s in &clip.samples {
        let q = (s.clamp(-1.0, 1.0) * 32_767.0).round() as i16;
        w.write_all(&q.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 44];
    r.read_exact(&mut header)
        .map_err(|_| Error::format("WAV file shorter than its header"))?;
    if &header[0..4] != b"RIFF" || &header[8..12] != b"WAVE" || &header[12..16] != b"fmt " {
        return Err(Error::format("not a RIFF/WAVE file"));
    }
    let format = u16::from_le_bytes([header[20], header[21]]);
    let channels = u16::from_le_bytes([header[22], header[23]]);
    let bits = u16::from_le_bytes([header[34], header[35]]);
    if format != 1 || channels != 1 || bits != 16 {
        return Err(Error::format(format!(
            "unsupported WAV layout (format {format}, {channels} ch, {bits} bit); expected 16-bit PCM mono"
        )));
    }
    if &header[36..40] != b"data" {
        return Err(Error::format("missing WAV data chunk"));
    }
    let sample_rate = u32::from_le_bytes([header[24], header[25], header[26], header[27]]);
    let data_bytes = u32::from_le_bytes([header[40], header[41], header[42], header[43]]) as usize;
    let mut raw = vec![0u8; data_bytes];
    r.read_exact(&mut raw)
        .map_err(|_| Error::format("WAV data chunk truncated"))?;
    let samples = raw
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32_767.0)
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate,
        norm_scale: 1.0,
    })
}
