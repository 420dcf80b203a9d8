//! Impact-sound synthesis: damped sinusoid modes per material, plus track
//! mixing and WAV I/O.

mod wav;

pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use crate::material::Material;
use std::f64::consts::TAU;
use std::sync::LazyLock;

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

/// Audible band enforced for mode frequencies.
pub const MIN_MODE_HZ: f64 = 20.0;
pub const MAX_MODE_HZ: f64 = 20_000.0;

/// One vibration mode: a damped sinusoid
/// `a * exp(-d t) * sin(2 pi f t + theta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub frequency: f64,
    pub damping: f64,
    pub amplitude: f64,
    pub phase: f64,
}

/// A material's mode bank, sorted ascending by frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalModel {
    modes: Vec<Mode>,
    pub material: Material,
}

impl ModalModel {
    pub fn new(mut modes: Vec<Mode>, material: Material) -> Result<Self> {
        if modes.is_empty() || modes.len() > 64 {
            return Err(Error::validation(format!(
                "modal model needs 1..=64 modes, got {}",
                modes.len()
            )));
        }
        for m in &modes {
            if !(MIN_MODE_HZ..=MAX_MODE_HZ).contains(&m.frequency) {
                return Err(Error::validation(format!(
                    "mode frequency {} Hz outside the audible range",
                    m.frequency
                )));
            }
            if m.damping < 0.0 || m.amplitude < 0.0 {
                return Err(Error::validation(
                    "mode damping and amplitude must be nonnegative",
                ));
            }
        }
        modes.sort_by(|a, b| a.frequency.total_cmp(&b.frequency));
        Ok(ModalModel { modes, material })
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn max_frequency(&self) -> f64 {
        self.modes.last().map(|m| m.frequency).unwrap_or(0.0)
    }
}

/// Mono audio samples with normalization metadata.
///
/// `norm_scale` is the multiplier applied by the last peak normalization
/// (1.0 when untouched); dividing the samples by it recovers the
/// pre-normalization signal.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub norm_scale: f64,
}

impl AudioClip {
    pub fn silent(duration: f64, sample_rate: u32) -> Self {
        AudioClip {
            samples: vec![0.0; (duration * sample_rate as f64).round() as usize],
            sample_rate,
            norm_scale: 1.0,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |acc, &s| acc.max(s.abs()))
    }

    /// Scales so the peak is 1.0 whenever it currently exceeds 1.0, and
    /// records the factor in `norm_scale`.
    pub fn normalize_peak(&mut self) {
        let peak = self.peak();
        if peak > 1.0 {
            let scale = 1.0 / peak;
            for s in &mut self.samples {
                *s *= scale;
            }
            self.norm_scale *= scale;
        }
    }

    /// Sample-wise adds `clip` starting at `offset` seconds, growing the
    /// buffer as needed.
    pub fn add_at(&mut self, clip: &AudioClip, offset: f64) -> Result<()> {
        if clip.sample_rate != self.sample_rate {
            return Err(Error::validation(format!(
                "sample rate mismatch: {} vs {}",
                clip.sample_rate, self.sample_rate
            )));
        }
        if offset < 0.0 {
            return Err(Error::validation("negative mix offset"));
        }
        let start = (offset * self.sample_rate as f64).round() as usize;
        let end = start + clip.samples.len();
        if end > self.samples.len() {
            self.samples.resize(end, 0.0);
        }
        for (dst, &src) in self.samples[start..end].iter_mut().zip(&clip.samples) {
            *dst += src;
        }
        Ok(())
    }
}

/// Synthesizes an impact as the gain-scaled sum of the model's damped
/// sinusoids, peak-normalized only if the peak exceeds 1.
pub fn synthesize_impact(
    model: &ModalModel,
    impulse_gain: f64,
    duration: f64,
    sample_rate: u32,
) -> Result<AudioClip> {
    if duration <= 0.0 {
        return Err(Error::validation("duration must be positive"));
    }
    if impulse_gain < 0.0 {
        return Err(Error::validation("impulse gain must be nonnegative"));
    }
    if (sample_rate as f64) < 2.0 * model.max_frequency() {
        return Err(Error::validation(format!(
            "mode frequency {} Hz exceeds the Nyquist limit of {} Hz",
            model.max_frequency(),
            sample_rate as f64 / 2.0
        )));
    }
    let n = (duration * sample_rate as f64).round() as usize;
    let dt = 1.0 / sample_rate as f64;
    let mut samples = vec![0.0; n];
    for mode in &model.modes {
        let omega = TAU * mode.frequency;
        for (i, s) in samples.iter_mut().enumerate() {
            let t = i as f64 * dt;
            *s += mode.amplitude * (-mode.damping * t).exp() * (omega * t + mode.phase).sin();
        }
    }
    for s in &mut samples {
        *s *= impulse_gain;
    }
    let mut clip = AudioClip {
        samples,
        sample_rate,
        norm_scale: 1.0,
    };
    clip.normalize_peak();
    Ok(clip)
}

/// Deterministic per-material mode table, frequencies scaled by
/// `1 / size_scale` (smaller objects ring higher) and clamped to the
/// audible band.
pub fn material_modal_params(material: Material, size_scale: f64) -> ModalModel {
    let table = &MODAL_TABLES[material.index()];
    let scale = 1.0 / size_scale.max(1e-6);
    let modes = table
        .iter()
        .map(|m| Mode {
            frequency: (m.frequency * scale).clamp(MIN_MODE_HZ, MAX_MODE_HZ),
            ..*m
        })
        .collect();
    ModalModel::new(modes, material).expect("built-in table must satisfy the mode invariants")
}

/// Sums clips at the given offsets; output length covers the latest end.
pub fn mix_tracks(clips: &[AudioClip], offsets: &[f64]) -> Result<AudioClip> {
    if clips.is_empty() || clips.len() != offsets.len() {
        return Err(Error::validation(
            "mix_tracks needs one offset per clip and at least one clip",
        ));
    }
    let rate = clips[0].sample_rate;
    let mut out = AudioClip {
        samples: Vec::new(),
        sample_rate: rate,
        norm_scale: 1.0,
    };
    for (clip, &off) in clips.iter().zip(offsets) {
        out.add_at(clip, off)?;
    }
    out.normalize_peak();
    Ok(out)
}

static MODAL_TABLES: LazyLock<[Vec<Mode>; 4]> = LazyLock::new(|| {
    let text = include_str!("../../data/modal_tables.txt");
    let mut tables: [Vec<(usize, Mode)>; 4] = Default::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(
            fields.len(),
            5,
            "modal table line {} needs 5 fields",
            lineno + 1
        );
        let material = Material::parse(fields[0]).expect("modal table material");
        let index: usize = fields[1].parse().expect("modal table mode index");
        let mode = Mode {
            frequency: fields[2].parse().expect("modal table frequency"),
            damping: fields[3].parse().expect("modal table damping"),
            amplitude: fields[4].parse().expect("modal table amplitude"),
            phase: 0.0,
        };
        tables[material.index()].push((index, mode));
    }
    tables.map(|mut v| {
        v.sort_by_key(|(i, _)| *i);
        v.into_iter().map(|(_, m)| m).collect()
    })
});

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn single_mode(frequency: f64, damping: f64, phase: f64) -> ModalModel {
        ModalModel::new(
            vec![Mode {
                frequency,
                damping,
                amplitude: 1.0,
                phase,
            }],
            Material::Granite,
        )
        .unwrap()
    }

    #[test]
    fn cosine_start_hits_one_at_t0() {
        let model = single_mode(441.0, 0.0, FRAC_PI_2);
        let clip = synthesize_impact(&model, 1.0, 0.1, 44_100).unwrap();
        assert_eq!(clip.samples[0], 1.0);
        assert!(clip.peak() <= 1.0 + 1e-12);
    }

    #[test]
    fn zero_gain_is_silence() {
        let model = material_modal_params(Material::Slate, 1.0);
        let clip = synthesize_impact(&model, 0.0, 0.2, 44_100).unwrap();
        assert!(clip.samples.iter().all(|&s| s == 0.0));
        assert_eq!(clip.samples.len(), (0.2f64 * 44_100.0).round() as usize);
    }

    /// Log-envelope regression oracle: per-10ms peak envelope of a single
    /// damped mode must decay with slope -d.
    #[test]
    fn decay_slope_recovered_within_one_percent() {
        let d = 10.0;
        let model = single_mode(1000.0, d, 0.0);
        let clip = synthesize_impact(&model, 1.0, 1.0, 44_100).unwrap();
        let window = 441; // 10 ms
        let mut ts = Vec::new();
        let mut logs = Vec::new();
        for (w, chunk) in clip.samples.chunks(window).enumerate() {
            let peak = chunk.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
            if peak > 0.0 {
                ts.push((w * window) as f64 / 44_100.0);
                logs.push(peak.ln());
            }
        }
        let n = ts.len() as f64;
        let mean_t = ts.iter().sum::<f64>() / n;
        let mean_l = logs.iter().sum::<f64>() / n;
        let cov: f64 = ts
            .iter()
            .zip(&logs)
            .map(|(&t, &l)| (t - mean_t) * (l - mean_l))
            .sum();
        let var: f64 = ts.iter().map(|&t| (t - mean_t) * (t - mean_t)).sum();
        let slope = cov / var;
        assert!(
            (slope + d).abs() < 0.01 * d,
            "fitted slope {slope}, want {}",
            -d
        );
    }

    #[test]
    fn nyquist_violation_is_rejected() {
        let model = single_mode(15_000.0, 1.0, 0.0);
        assert!(matches!(
            synthesize_impact(&model, 1.0, 0.1, 22_050),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn table_lookup_is_deterministic() {
        let a = material_modal_params(Material::Oak, 0.7);
        let b = material_modal_params(Material::Oak, 0.7);
        assert_eq!(a, b);
    }

    #[test]
    fn oak_damps_faster_than_marble() {
        let oak = material_modal_params(Material::Oak, 1.0);
        let marble = material_modal_params(Material::Marble, 1.0);
        assert!(oak.modes()[0].damping > marble.modes()[0].damping);
        let mean = |m: &ModalModel| {
            m.modes().iter().map(|x| x.damping).sum::<f64>() / m.modes().len() as f64
        };
        assert!(mean(&oak) > mean(&marble));
    }

    #[test]
    fn half_size_doubles_every_frequency() {
        let full = material_modal_params(Material::Granite, 1.0);
        let half = material_modal_params(Material::Granite, 0.5);
        for (a, b) in full.modes().iter().zip(half.modes()) {
            assert_eq!(b.frequency, 2.0 * a.frequency);
        }
    }

    #[test]
    fn all_tables_have_eight_sorted_modes() {
        for mat in Material::ALL {
            let model = material_modal_params(mat, 1.0);
            assert_eq!(model.modes().len(), 8, "{mat}");
            for pair in model.modes().windows(2) {
                assert!(pair[0].frequency < pair[1].frequency);
            }
        }
    }

    #[test]
    fn synthesis_is_linear_in_gain() {
        let model = material_modal_params(Material::Slate, 0.8);
        // Small gains so peak normalization never triggers.
        let g1 = synthesize_impact(&model, 0.1, 0.2, 44_100).unwrap();
        let g2 = synthesize_impact(&model, 0.2, 0.2, 44_100).unwrap();
        assert_eq!(g1.norm_scale, 1.0);
        assert_eq!(g2.norm_scale, 1.0);
        for (a, b) in g1.samples.iter().zip(&g2.samples) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_decreases_across_windows() {
        for mat in Material::ALL {
            let model = material_modal_params(mat, 1.0);
            let clip = synthesize_impact(&model, 1.0, 1.0, 44_100).unwrap();
            let window = 4410; // 100 ms
            let energies: Vec<f64> = clip
                .samples
                .chunks(window)
                .map(|c| c.iter().map(|&s| s * s).sum())
                .collect();
            for (i, pair) in energies.windows(2).enumerate().skip(1) {
                assert!(
                    pair[1] < pair[0],
                    "{mat}: window {} energy {} !< {}",
                    i + 1,
                    pair[1],
                    pair[0]
                );
            }
        }
    }

    /// Dominant DFT bin of an undamped single mode lands on the nearest
    /// bin to its frequency.
    #[test]
    fn dominant_fft_bin_matches_mode() {
        use rustfft::{num_complex::Complex, FftPlanner};
        let n = 4096;
        let fs = 44_100.0;
        for freq in [430.66, 2153.32, 861.33] {
            let model = single_mode(freq, 0.0, 0.0);
            let clip = synthesize_impact(&model, 1.0, 0.2, 44_100).unwrap();
            let mut buf: Vec<Complex<f64>> = clip.samples[..n]
                .iter()
                .map(|&s| Complex::new(s, 0.0))
                .collect();
            FftPlanner::new().plan_fft_forward(n).process(&mut buf);
            let argmax = buf[..n / 2]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
                .unwrap()
                .0;
            let expected = (freq * n as f64 / fs).round() as usize;
            assert_eq!(argmax, expected, "frequency {freq}");
        }
    }

    #[test]
    fn mix_single_clip_is_identity() {
        let model = material_modal_params(Material::Marble, 1.0);
        let clip = synthesize_impact(&model, 0.5, 0.1, 44_100).unwrap();
        let mixed = mix_tracks(&[clip.clone()], &[0.0]).unwrap();
        assert_eq!(mixed.samples, clip.samples);
    }

    #[test]
    fn mix_with_inverted_copy_cancels() {
        let model = material_modal_params(Material::Granite, 1.0);
        let clip = synthesize_impact(&model, 0.5, 0.1, 44_100).unwrap();
        let inverted = AudioClip {
            samples: clip.samples.iter().map(|&s| -s).collect(),
            sample_rate: clip.sample_rate,
            norm_scale: 1.0,
        };
        let mixed = mix_tracks(&[clip, inverted], &[0.0, 0.0]).unwrap();
        assert!(mixed.samples.iter().all(|&s| s == 0.0));
    }

    /// Sample-index bookkeeping: clips placed at disjoint offsets appear
    /// verbatim at their positions.
    #[test]
    fn disjoint_offsets_preserve_segments() {
        let model = material_modal_params(Material::Oak, 1.0);
        let a = synthesize_impact(&model, 0.3, 0.05, 44_100).unwrap();
        let b = synthesize_impact(&model, 0.6, 0.05, 44_100).unwrap();
        let mixed = mix_tracks(&[a.clone(), b.clone()], &[0.0, 0.1]).unwrap();
        assert_eq!(mixed.norm_scale, 1.0);
        let off = (0.1f64 * 44_100.0).round() as usize;
        assert_eq!(&mixed.samples[..a.samples.len()], &a.samples[..]);
        assert!(mixed.samples[a.samples.len()..off].iter().all(|&s| s == 0.0));
        assert_eq!(&mixed.samples[off..off + b.samples.len()], &b.samples[..]);
    }

    #[test]
    fn mix_rejects_rate_mismatch() {
        let a = AudioClip::silent(0.1, 44_100);
        let b = AudioClip::silent(0.1, 48_000);
        assert!(matches!(
            mix_tracks(&[a, b], &[0.0, 0.0]),
            Err(Error::Validation(_))
        ));
    }
}
