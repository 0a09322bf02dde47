//! Seeded synthetic speech-like corpus: harmonic sources through formant
//! envelopes, with per-speaker pitch range and vocal-tract scaling.
//!
//! Utterance `i` carries the same phone sequence for every speaker, so test
//! clips form parallel pairs.

use std::f64::consts::PI;

use crate::audio::AudioClip;
use crate::rng::Rng;

/// Formant frequencies (Hz) and bandwidths of a small vowel inventory.
const VOWELS: [[(f64, f64); 3]; 5] = [
    [(730.0, 90.0), (1090.0, 110.0), (2440.0, 170.0)],
    [(270.0, 60.0), (2290.0, 100.0), (3010.0, 120.0)],
    [(300.0, 60.0), (870.0, 90.0), (2240.0, 120.0)],
    [(530.0, 70.0), (1840.0, 100.0), (2480.0, 140.0)],
    [(570.0, 80.0), (840.0, 90.0), (2410.0, 150.0)],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpeaker {
    pub name: String,
    /// Mean pitch in Hz.
    pub f0: f64,
    /// Multiplier on every formant frequency.
    pub formant_scale: f64,
    /// Spectral tilt exponent of the harmonic source.
    pub tilt: f64,
    /// Half-width of the per-utterance pitch register, in natural-log units.
    pub pitch_spread: f64,
}

impl SynthSpeaker {
    /// Low-pitched and high-pitched preset voices.
    pub fn presets(n: usize) -> Vec<SynthSpeaker> {
        let table = [
            ("low", 120.0, 1.0, 1.0),
            ("high", 220.0, 1.18, 1.4),
            ("mid", 160.0, 1.08, 1.2),
            ("deep", 95.0, 0.92, 0.9),
        ];
        table
            .iter()
            .cycle()
            .take(n)
            .enumerate()
            .map(|(i, &(name, f0, fs, tilt))| SynthSpeaker {
                name: if i < table.len() {
                    name.to_string()
                } else {
                    format!("{name}{i}")
                },
                f0,
                formant_scale: fs,
                tilt,
                pitch_spread: 0.3,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Phone {
    Vowel(usize),
    Fricative,
    Pause,
}

/// Phone sequence with durations in seconds, shared by all speakers.
fn script(seed: u64, duration: f64) -> Vec<(Phone, f64)> {
    let mut rng = Rng::seed_from_u64(seed ^ 0x5eed_5c41);
    let mut out = vec![(Phone::Pause, 0.12)];
    let mut total = 0.12;
    while total < duration - 0.15 {
        let r = rng.uniform();
        let phone = if r < 0.72 {
            Phone::Vowel(rng.below(VOWELS.len()))
        } else if r < 0.9 {
            Phone::Fricative
        } else {
            Phone::Pause
        };
        let d = match phone {
            Phone::Vowel(_) => rng.uniform_range(0.09, 0.2),
            Phone::Fricative => rng.uniform_range(0.05, 0.1),
            Phone::Pause => rng.uniform_range(0.04, 0.08),
        };
        out.push((phone, d));
        total += d;
    }
    out.push((Phone::Pause, (duration - total).max(0.1)));
    out
}

fn resonance(f: f64, center: f64, bw: f64) -> f64 {
    let d = (f - center) / bw;
    1.0 / (1.0 + d * d)
}

fn envelope(f: f64, formants: &[(f64, f64); 3], scale: f64) -> f64 {
    formants
        .iter()
        .enumerate()
        .map(|(i, &(c, b))| resonance(f, c * scale, b * scale) / (1.0 + i as f64))
        .sum::<f64>()
}

/// One utterance of `duration` seconds at `sr` Hz.
pub fn synth_utterance(speaker: &SynthSpeaker, utterance: u64, duration: f64, sr: u32) -> AudioClip {
    let phones = script(utterance, duration);
    let mut rng = Rng::seed_from_u64(utterance.wrapping_mul(7919) ^ speaker.f0.to_bits());
    let srf = sr as f64;
    let n = (duration * srf) as usize;
    let mut out = vec![0.0f64; n];
    let contour_rate = rng.uniform_range(1.5, 3.0);
    let contour_phase = rng.uniform_range(0.0, 2.0 * PI);
    let register = if speaker.pitch_spread > 0.0 {
        speaker.f0 * rng.uniform_range(-speaker.pitch_spread, speaker.pitch_spread).exp()
    } else {
        speaker.f0
    };
    let mut phase = 0.0f64;
    let mut start = 0usize;
    let mut prev_vowel = 0usize;
    for &(phone, d) in &phones {
        let len = ((d * srf) as usize).min(n - start);
        for i in 0..len {
            let pos = i as f64 / len.max(1) as f64;
            let fade = (pos * 8.0).min(1.0) * ((1.0 - pos) * 8.0).min(1.0);
            let t = (start + i) as f64 / srf;
            match phone {
                Phone::Vowel(v) => {
                    let f0 = register * (1.0 + 0.08 * (2.0 * PI * contour_rate * t + contour_phase).sin());
                    phase += 2.0 * PI * f0 / srf;
                    // Interpolate the first 30% of the vowel from the previous one.
                    let w = (pos / 0.3).min(1.0);
                    let mut formants = VOWELS[v];
                    for (k, f) in formants.iter_mut().enumerate() {
                        f.0 = VOWELS[prev_vowel][k].0 * (1.0 - w) + f.0 * w;
                    }
                    let mut s = 0.0;
                    let mut h = 1;
                    while (h as f64) * f0 < 0.45 * srf {
                        let hf = h as f64 * f0;
                        let amp = envelope(hf, &formants, speaker.formant_scale) / (h as f64).powf(speaker.tilt * 0.5);
                        s += amp * (h as f64 * phase).sin();
                        h += 1;
                    }
                    out[start + i] = 0.25 * fade * s;
                }
                Phone::Fricative => {
                    let noise = rng.uniform_range(-1.0, 1.0);
                    out[start + i] = 0.04 * fade * noise;
                }
                Phone::Pause => {}
            }
        }
        if let Phone::Fricative = phone {
            // One-pole high-pass gives fricatives a bright spectrum.
            let seg = &mut out[start..start + len];
            let mut prev = 0.0;
            for v in seg.iter_mut() {
                let x = *v;
                *v = x - 0.95 * prev;
                prev = x;
            }
        }
        if let Phone::Vowel(v) = phone {
            prev_vowel = v;
        }
        start += len;
        if start >= n {
            break;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { 0.7 / peak } else { 0.0 };
    AudioClip::new(out.iter().map(|v| (v * gain) as f32).collect(), sr)
}

/// Sawtooth at `f0` Hz.
pub fn sawtooth(f0: f64, duration: f64, sr: u32, amplitude: f64) -> AudioClip {
    let n = (duration * sr as f64) as usize;
    let samples = (0..n)
        .map(|i| {
            let p = (i as f64 * f0 / sr as f64).fract();
            (amplitude * (2.0 * p - 1.0)) as f32
        })
        .collect();
    AudioClip::new(samples, sr)
}

/// Sine at `freq` Hz.
pub fn sine(freq: f64, duration: f64, sr: u32, amplitude: f64) -> AudioClip {
    let n = (duration * sr as f64) as usize;
    let samples = (0..n)
        .map(|i| (amplitude * (2.0 * PI * freq * i as f64 / sr as f64).sin()) as f32)
        .collect();
    AudioClip::new(samples, sr)
}

/// Uniform white noise in `[-amplitude, amplitude)`.
pub fn white_noise(duration: f64, sr: u32, amplitude: f64, rng: &mut Rng) -> AudioClip {
    let n = (duration * sr as f64) as usize;
    let samples = (0..n)
        .map(|_| rng.uniform_range(-amplitude, amplitude) as f32)
        .collect();
    AudioClip::new(samples, sr)
}

/// One clip of a corpus, with its speaker (0-based) and split.
#[derive(Clone, Debug)]
pub struct SynthItem {
    pub speaker: usize,
    pub utterance: u64,
    pub test: bool,
    pub clip: AudioClip,
}

/// `train` + `test` parallel utterances per speaker. Durations vary per
/// utterance in `[1.0, 1.5)` seconds.
pub fn synth_corpus(speakers: &[SynthSpeaker], train: usize, test: usize, seed: u64, sr: u32) -> Vec<SynthItem> {
    let mut rng = Rng::seed_from_u64(seed);
    let utterances: Vec<(u64, f64)> = (0..train + test)
        .map(|_| (rng.next_u64(), rng.uniform_range(1.0, 1.5)))
        .collect();
    let mut out = Vec::new();
    for (s, spk) in speakers.iter().enumerate() {
        for (i, &(u, d)) in utterances.iter().enumerate() {
            out.push(SynthItem {
                speaker: s,
                utterance: u,
                test: i >= train,
                clip: synth_utterance(spk, u, d, sr),
            });
        }
    }
    out
}
