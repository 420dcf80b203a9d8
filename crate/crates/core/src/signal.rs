//! Audio front end: Hann-windowed STFT, mel-scaled log-power spectrograms,
//! and the segmentation that aligns spectrogram windows with video frames.
//!
//! Two fixed geometries produce the same 64x25 spectrogram shape:
//! single mode analyzes one 3 s window (N = 8192, hop chosen for 25 frames),
//! multi mode analyzes 0.03 s windows (N = 256, hop 44) advanced by 0.0225 s
//! so consecutive windows overlap by 25%.

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use rustfft::{num_complex::Complex, FftPlanner};
use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MEL_BINS: usize = 64;
pub const SPEC_FRAMES: usize = 25;
pub const DB_FLOOR: f64 = -80.0;
pub const MEL_LOW_HZ: f64 = 20.0;

/// Single-mode analysis window in seconds.
pub const SINGLE_WINDOW_SECS: f64 = 3.0;
/// Multi-mode analysis window in seconds.
pub const MULTI_WINDOW_SECS: f64 = 0.03;
/// Fraction by which consecutive multi-mode windows overlap.
pub const MULTI_OVERLAP: f64 = 0.25;
/// Frame rate at which multi-mode windows tile seamlessly: one window per
/// video frame, advanced by 75% of the window length.
pub const MULTI_FPS: f64 = 1.0 / (MULTI_WINDOW_SECS * (1.0 - MULTI_OVERLAP));

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentMode {
    Single,
    Multi,
}

/// STFT geometry: window length, hop, and the Hann coefficients.
#[derive(Debug, Clone)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    pub window: Vec<f64>,
}

impl StftConfig {
    /// Hann window `w(n) = 0.5 (1 - cos(2 pi n / (N-1)))`.
    pub fn hann(window_length: usize, hop: usize) -> Result<Self> {
        if window_length < 2 || hop == 0 || hop > window_length {
            return Err(Error::config(format!(
                "need 0 < hop <= window_length, got hop {hop}, window {window_length}"
            )));
        }
        let n = window_length;
        let window = (0..n)
            .map(|i| 0.5 * (1.0 - (TAU * i as f64 / (n - 1) as f64).cos()))
            .collect();
        Ok(StftConfig {
            window_length,
            hop,
            window,
        })
    }

    pub fn multi_mode() -> Self {
        StftConfig::hann(256, 44).expect("static config")
    }

    /// Hop chosen so a 3 s window yields exactly [`SPEC_FRAMES`] frames.
    pub fn single_mode(sample_rate: u32) -> Result<Self> {
        let len = (SINGLE_WINDOW_SECS * sample_rate as f64).round() as usize;
        let n = 8192;
        if len <= n {
            return Err(Error::config(format!(
                "sample rate {sample_rate} too low for the single-mode window"
            )));
        }
        let hop = (len - n) / (SPEC_FRAMES - 1);
        StftConfig::hann(n, hop)
    }
}

/// Complex STFT matrix: `N/2 + 1` bins by `M` frames.
#[derive(Debug, Clone)]
pub struct Stft {
    pub n_bins: usize,
    pub n_frames: usize,
    pub sample_rate: u32,
    pub n_fft: usize,
    /// Frame-major storage: `data[frame * n_bins + bin]`.
    pub data: Vec<Complex<f64>>,
}

impl Stft {
    pub fn bin(&self, frame: usize, bin: usize) -> Complex<f64> {
        self.data[frame * self.n_bins + bin]
    }
}

/// Windowed DFT over hopped frames:
/// `X(m, k) = sum_n x(n + mH) w(n) exp(-2 pi i k n / N)`.
pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<Stft> {
    let n = cfg.window_length;
    let len = clip.samples.len();
    if len < n {
        return Err(Error::validation(format!(
            "clip has {len} samples, shorter than one {n}-sample window"
        )));
    }
    let n_frames = (len - n) / cfg.hop + 1;
    let n_bins = n / 2 + 1;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut data = Vec::with_capacity(n_frames * n_bins);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for m in 0..n_frames {
        let start = m * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(clip.samples[start + i] * cfg.window[i], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..n_bins]);
    }
    Ok(Stft {
        n_bins,
        n_frames,
        sample_rate: clip.sample_rate,
        n_fft: n,
        data,
    })
}

/// 64 mel bins by 25 frames of log-power values floored at -80 dB.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// Row-major `[mel][frame]`.
    pub values: Vec<f64>,
    pub mel_low: f64,
    pub mel_high: f64,
}

impl Spectrogram {
    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * SPEC_FRAMES + frame]
    }

    pub fn uniform_floor(mel_low: f64, mel_high: f64) -> Self {
        Spectrogram {
            values: vec![DB_FLOOR; MEL_BINS * SPEC_FRAMES],
            mel_low,
            mel_high,
        }
    }

    pub fn mean_db(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Binary float grid "SPG1": magic, u32 rows, u32 cols, f32 payload.
    pub fn write_spg(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"SPG1")?;
        w.write_all(&(MEL_BINS as u32).to_le_bytes())?;
        w.write_all(&(SPEC_FRAMES as u32).to_le_bytes())?;
        for &v in &self.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_spg(path: &Path) -> Result<Spectrogram> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("SPG1 file too short for magic"))?;
        if &magic != b"SPG1" {
            return Err(Error::format(format!("bad SPG1 magic {magic:?}")));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::format("SPG1 header truncated"))?;
        let rows = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::format("SPG1 header truncated"))?;
        let cols = u32::from_le_bytes(u32buf) as usize;
        if rows != MEL_BINS || cols != SPEC_FRAMES {
            return Err(Error::format(format!(
                "SPG1 grid is {rows}x{cols}, expected {MEL_BINS}x{SPEC_FRAMES}"
            )));
        }
        let mut values = Vec::with_capacity(rows * cols);
        let mut f32buf = [0u8; 4];
        for _ in 0..rows * cols {
            r.read_exact(&mut f32buf)
                .map_err(|_| Error::format("SPG1 payload truncated"))?;
            values.push(f32::from_le_bytes(f32buf) as f64);
        }
        Ok(Spectrogram {
            values,
            mel_low: MEL_LOW_HZ,
            mel_high: DEFAULT_MEL_HIGH,
        })
    }

    /// Portable CSV dump (one row per mel bin) for debugging.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for mel in 0..MEL_BINS {
            let row: Vec<String> = (0..SPEC_FRAMES)
                .map(|t| format!("{}", self.get(mel, t)))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

const DEFAULT_MEL_HIGH: f64 = 22_050.0;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10.0f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `[n_mels][n_bins]` row-major.
fn mel_filterbank(n_mels: usize, n_bins: usize, n_fft: usize, sample_rate: u32, f_low: f64, f_high: f64) -> Vec<f64> {
    let mel_lo = hz_to_mel(f_low);
    let mel_hi = hz_to_mel(f_high);
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut bank = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lower, center, upper) = (centers[m], centers[m + 1], centers[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let up = (f - lower) / (center - lower);
            let down = (upper - f) / (upper - center);
            bank[m * n_bins + k] = up.min(down).max(0.0);
        }
    }
    bank
}

/// Applies the mel filterbank to `|X|^2`, converts to dB with a -80 dB
/// floor, and fits the time axis to exactly 25 frames (truncating or
/// padding with the floor).
pub fn mel_spectrogram(stft_out: &Stft, n_mels: usize, f_low: f64, f_high: f64) -> Result<Spectrogram> {
    if n_mels != MEL_BINS {
        return Err(Error::config(format!(
            "spectrogram is fixed at {MEL_BINS} mel bins, got {n_mels}"
        )));
    }
    if stft_out.n_bins < n_mels {
        return Err(Error::validation(format!(
            "need at least {n_mels} STFT bins, got {}",
            stft_out.n_bins
        )));
    }
    let bank = mel_filterbank(
        n_mels,
        stft_out.n_bins,
        stft_out.n_fft,
        stft_out.sample_rate,
        f_low,
        f_high,
    );
    let mut values = vec![DB_FLOOR; n_mels * SPEC_FRAMES];
    let frames = stft_out.n_frames.min(SPEC_FRAMES);
    for t in 0..frames {
        let spectrum = &stft_out.data[t * stft_out.n_bins..(t + 1) * stft_out.n_bins];
        for m in 0..n_mels {
            let weights = &bank[m * stft_out.n_bins..(m + 1) * stft_out.n_bins];
            let mut power = 0.0;
            for (w, c) in weights.iter().zip(spectrum) {
                if *w != 0.0 {
                    power += w * c.norm_sqr();
                }
            }
            values[m * SPEC_FRAMES + t] = 10.0 * power.max(1e-8).log10();
        }
    }
    Ok(Spectrogram {
        values,
        mel_low: f_low,
        mel_high: f_high,
    })
}

/// Start times (seconds) of the multi-mode analysis windows for a track:
/// hops of `1/video_fps`, keeping windows that fit inside the track, with a
/// minimum of one (short tails are zero-padded).
pub fn multi_window_starts(duration: f64, video_fps: f64) -> Vec<f64> {
    let hop = 1.0 / video_fps;
    let mut starts = vec![0.0];
    let mut k = 1usize;
    loop {
        let t = k as f64 * hop;
        if t + MULTI_WINDOW_SECS <= duration + 1e-9 {
            starts.push(t);
            k += 1;
        } else {
            break;
        }
    }
    starts
}

/// Converts a track into frame-aligned spectrograms.
///
/// Single mode analyzes one 3 s window from t = 0 (padding or truncating
/// the track). Multi mode analyzes one 0.03 s window per video frame
/// timestamp; at the library's [`MULTI_FPS`] this advances windows by
/// 0.0225 s, i.e. 25% overlap.
pub fn segment_audio(track: &AudioClip, mode: SegmentMode, video_fps: f64) -> Result<Vec<Spectrogram>> {
    if track.samples.is_empty() {
        return Err(Error::validation("cannot segment an empty track"));
    }
    if video_fps <= 0.0 {
        return Err(Error::validation("video fps must be positive"));
    }
    let sr = track.sample_rate;
    let f_high = sr as f64 / 2.0;
    match mode {
        SegmentMode::Single => {
            let want = (SINGLE_WINDOW_SECS * sr as f64).round() as usize;
            let mut samples = track.samples.clone();
            samples.resize(want, 0.0);
            let window = AudioClip {
                samples,
                sample_rate: sr,
                norm_scale: track.norm_scale,
            };
            let cfg = StftConfig::single_mode(sr)?;
            let spec = mel_spectrogram(&stft(&window, &cfg)?, MEL_BINS, MEL_LOW_HZ, f_high)?;
            Ok(vec![spec])
        }
        SegmentMode::Multi => {
            let win_samples = (MULTI_WINDOW_SECS * sr as f64).round() as usize;
            let cfg = StftConfig::multi_mode();
            let starts = multi_window_starts(track.duration(), video_fps);
            let mut out = Vec::with_capacity(starts.len());
            for &t0 in &starts {
                let start = (t0 * sr as f64).round() as usize;
                let mut samples = vec![0.0; win_samples];
                let end = (start + win_samples).min(track.samples.len());
                if start < end {
                    samples[..end - start].copy_from_slice(&track.samples[start..end]);
                }
                let window = AudioClip {
                    samples,
                    sample_rate: sr,
                    norm_scale: track.norm_scale,
                };
                out.push(mel_spectrogram(&stft(&window, &cfg)?, MEL_BINS, MEL_LOW_HZ, f_high)?);
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::DEFAULT_SAMPLE_RATE;

    fn sine_clip(freq: f64, duration: f64) -> AudioClip {
        let sr = DEFAULT_SAMPLE_RATE;
        let n = (duration * sr as f64).round() as usize;
        AudioClip {
            samples: (0..n).map(|i| (TAU * freq * i as f64 / sr as f64).sin()).collect(),
            sample_rate: sr,
            norm_scale: 1.0,
        }
    }

    #[test]
    fn hann_endpoints_are_zero() {
        let cfg = StftConfig::hann(256, 44).unwrap();
        assert_eq!(cfg.window[0], 0.0);
        assert_eq!(cfg.window[255], 0.0);
        assert!((cfg.window[128] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn stft_of_silence_is_zero() {
        let clip = AudioClip::silent(0.1, DEFAULT_SAMPLE_RATE);
        let out = stft(&clip, &StftConfig::multi_mode()).unwrap();
        assert!(out.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn short_clip_is_rejected() {
        let clip = AudioClip::silent(0.001, DEFAULT_SAMPLE_RATE);
        assert!(matches!(
            stft(&clip, &StftConfig::multi_mode()),
            Err(Error::Validation(_))
        ));
    }

    /// Bin-aligned pure tones localize exactly, and one frame matches a
    /// direct DFT evaluation of the windowed signal.
    #[test]
    fn pure_tone_bin_localization() {
        let sr = DEFAULT_SAMPLE_RATE as f64;
        let cfg = StftConfig::multi_mode();
        let n = cfg.window_length;
        for k0 in [3usize, 17, 40, 99] {
            let freq = k0 as f64 * sr / n as f64;
            let clip = sine_clip(freq, 0.05);
            let out = stft(&clip, &cfg).unwrap();
            for m in 0..out.n_frames {
                let argmax = (0..out.n_bins)
                    .max_by(|&a, &b| out.bin(m, a).norm_sqr().total_cmp(&out.bin(m, b).norm_sqr()))
                    .unwrap();
                assert_eq!(argmax, k0, "frame {m}, bin {k0}");
            }
            // Direct DFT oracle on frame 1.
            let m = 1;
            for k in [0usize, k0, k0 + 5] {
                let mut want = Complex::new(0.0, 0.0);
                for i in 0..n {
                    let x = clip.samples[m * cfg.hop + i] * cfg.window[i];
                    let ang = -TAU * (k * i) as f64 / n as f64;
                    want += Complex::new(x * ang.cos(), x * ang.sin());
                }
                let got = out.bin(m, k);
                assert!(
                    (got - want).norm() < 1e-6 * (1.0 + want.norm()),
                    "bin {k}: got {got}, want {want}"
                );
            }
        }
    }

    #[test]
    fn dc_signal_concentrates_in_bin_zero() {
        let sr = DEFAULT_SAMPLE_RATE;
        let clip = AudioClip {
            samples: vec![1.0; 4410],
            sample_rate: sr,
            norm_scale: 1.0,
        };
        let out = stft(&clip, &StftConfig::multi_mode()).unwrap();
        for m in 0..out.n_frames {
            let argmax = (0..out.n_bins)
                .max_by(|&a, &b| out.bin(m, a).norm_sqr().total_cmp(&out.bin(m, b).norm_sqr()))
                .unwrap();
            assert_eq!(argmax, 0);
        }
    }

    #[test]
    fn frame_count_formula_holds() {
        for (len, n, h) in [(1323, 256, 44), (4000, 512, 128), (44100, 4096, 1024), (256, 256, 44)] {
            let clip = AudioClip {
                samples: vec![0.1; len],
                sample_rate: 44_100,
                norm_scale: 1.0,
            };
            let cfg = StftConfig::hann(n, h).unwrap();
            let out = stft(&clip, &cfg).unwrap();
            assert_eq!(out.n_frames, (len - n) / h + 1);
        }
    }

    #[test]
    fn stft_is_linear() {
        let a = sine_clip(430.66, 0.05);
        let b = sine_clip(1000.0, 0.05);
        let sum = AudioClip {
            samples: a.samples.iter().zip(&b.samples).map(|(&x, &y)| x + y).collect(),
            sample_rate: a.sample_rate,
            norm_scale: 1.0,
        };
        let cfg = StftConfig::multi_mode();
        let (sa, sb, ss) = (
            stft(&a, &cfg).unwrap(),
            stft(&b, &cfg).unwrap(),
            stft(&sum, &cfg).unwrap(),
        );
        for ((&ca, &cb), &cs) in sa.data.iter().zip(&sb.data).zip(&ss.data) {
            assert!((ca + cb - cs).norm() < 1e-5);
        }
    }

    #[test]
    fn zero_stft_gives_uniform_floor() {
        let clip = AudioClip::silent(0.1, DEFAULT_SAMPLE_RATE);
        let out = stft(&clip, &StftConfig::multi_mode()).unwrap();
        let spec = mel_spectrogram(&out, MEL_BINS, MEL_LOW_HZ, 22_050.0).unwrap();
        assert!(spec.values.iter().all(|&v| v == DB_FLOOR));
    }

    #[test]
    fn doubling_amplitude_adds_six_db() {
        let clip = sine_clip(861.33, 0.05);
        let doubled = AudioClip {
            samples: clip.samples.iter().map(|&s| 2.0 * s).collect(),
            sample_rate: clip.sample_rate,
            norm_scale: 1.0,
        };
        let cfg = StftConfig::multi_mode();
        let s1 = mel_spectrogram(&stft(&clip, &cfg).unwrap(), MEL_BINS, MEL_LOW_HZ, 22_050.0).unwrap();
        let s2 = mel_spectrogram(&stft(&doubled, &cfg).unwrap(), MEL_BINS, MEL_LOW_HZ, 22_050.0).unwrap();
        let want = 20.0 * 2.0f64.log10();
        let mut checked = 0;
        for (&v1, &v2) in s1.values.iter().zip(&s2.values) {
            if v1 > DB_FLOOR {
                assert!(((v2 - v1) - want).abs() < 1e-9, "delta {}", v2 - v1);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn spectrogram_shape_is_fixed() {
        for secs in [0.03, 0.05, 0.2] {
            let clip = sine_clip(430.66, secs);
            for spec in segment_audio(&clip, SegmentMode::Multi, MULTI_FPS).unwrap() {
                assert_eq!(spec.values.len(), MEL_BINS * SPEC_FRAMES);
            }
        }
        for secs in [1.0, 3.0, 4.0] {
            let clip = sine_clip(430.66, secs);
            let specs = segment_audio(&clip, SegmentMode::Single, MULTI_FPS).unwrap();
            assert_eq!(specs.len(), 1);
            assert_eq!(specs[0].values.len(), MEL_BINS * SPEC_FRAMES);
        }
    }

    #[test]
    fn mel_is_monotone_in_amplitude() {
        let clip = sine_clip(1722.66, 0.05);
        let scaled = AudioClip {
            samples: clip.samples.iter().map(|&s| 1.7 * s).collect(),
            sample_rate: clip.sample_rate,
            norm_scale: 1.0,
        };
        let cfg = StftConfig::multi_mode();
        let s1 = mel_spectrogram(&stft(&clip, &cfg).unwrap(), MEL_BINS, MEL_LOW_HZ, 22_050.0).unwrap();
        let s2 = mel_spectrogram(&stft(&scaled, &cfg).unwrap(), MEL_BINS, MEL_LOW_HZ, 22_050.0).unwrap();
        for (&v1, &v2) in s1.values.iter().zip(&s2.values) {
            if v1 > DB_FLOOR {
                assert!(v2 >= v1);
            }
        }
    }

    #[test]
    fn single_mode_gives_one_spectrogram() {
        let clip = sine_clip(441.0, 3.0);
        let specs = segment_audio(&clip, SegmentMode::Single, MULTI_FPS).unwrap();
        assert_eq!(specs.len(), 1);
    }

    #[test]
    fn multi_mode_window_arithmetic() {
        // 0.03 s track: exactly one window.
        assert_eq!(multi_window_starts(0.03, MULTI_FPS).len(), 1);
        // 0.1 s track: windows at 0, 0.0225, 0.045, 0.0675.
        let starts = multi_window_starts(0.1, MULTI_FPS);
        assert_eq!(starts.len(), 4);
        for (got, want) in starts.iter().zip([0.0, 0.0225, 0.045, 0.0675]) {
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
        let clip = sine_clip(441.0, 0.03);
        assert_eq!(segment_audio(&clip, SegmentMode::Multi, MULTI_FPS).unwrap().len(), 1);
    }

    #[test]
    fn spg_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let clip = sine_clip(861.33, 0.05);
        let spec = segment_audio(&clip, SegmentMode::Multi, MULTI_FPS)
            .unwrap()
            .swap_remove(0);
        let p1 = dir.path().join("a.spg");
        let p2 = dir.path().join("b.spg");
        spec.write_spg(&p1).unwrap();
        let back = Spectrogram::read_spg(&p1).unwrap();
        back.write_spg(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn spg_bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.spg");
        std::fs::write(&p, b"XXXXsome trailing bytes").unwrap();
        assert!(matches!(Spectrogram::read_spg(&p), Err(Error::Format(_))));
    }
}
