//! Classical acoustic features of a 16 kHz mono pangram clip.
//!
//! The 38-column vector holds MFCC means and frame-to-frame MFCC instability,
//! pitch statistics (mean F0, jitter, shimmer, pitch period entropy), the
//! alpha ratio, a harmonics-to-noise measure and relative band powers.
//! All analysis parameters are fixed constants below so extraction is
//! reproducible bit for bit.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dataset::{FeatureMatrix, Label};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::stats::midranks;

pub const SAMPLE_RATE: u32 = 16_000;
/// Minimum clip length accepted by [`assemble_acoustic_vector`], in seconds.
pub const MIN_CLIP_SECONDS: f64 = 0.5;

pub const PITCH_FRAME: usize = 640;
pub const PITCH_HOP: usize = 160;
pub const F0_MIN: f64 = 60.0;
pub const F0_MAX: f64 = 400.0;
pub const VOICING_THRESHOLD: f64 = 0.45;
/// Among autocorrelation peaks, the shortest lag within this fraction of the
/// best peak wins. Guards against picking a sub-harmonic of a clean tone.
const OCTAVE_TOLERANCE: f64 = 0.95;

pub const MFCC_WINDOW: usize = 400;
pub const MFCC_HOP: usize = 160;
pub const MFCC_FFT: usize = 512;
pub const N_MEL: usize = 26;
pub const N_MFCC: usize = 13;
pub const LOG_FLOOR: f64 = 1e-10;

pub const WELCH_SEGMENT: usize = 1024;
pub const BAND_EDGES: [f64; 5] = [0.0, 500.0, 1000.0, 2000.0, 8000.0];

pub const PPE_BINS: usize = 30;
pub const PPE_RANGE: f64 = 1.5;

pub const ACOUSTIC_DIM: usize = 38;

/// Column names in output order.
pub fn acoustic_column_names() -> Vec<String> {
    let mut names: Vec<String> = (0..N_MFCC).map(|k| format!("cepm{k}")).collect();
    names.extend((0..N_MFCC).map(|k| format!("cepj{k}")));
    names.extend(
        ["f0m", "f0j", "f0jr", "ash", "ashr", "ppe", "alpha", "Hnorm"]
            .iter()
            .map(|s| s.to_string()),
    );
    names.extend((0..4).map(|b| format!("relbandpower{b}")));
    names
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Audio(format!(
                "sample rate {sample_rate} Hz is not supported, expected {SAMPLE_RATE} Hz"
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Audio("non-finite sample".into()));
        }
        Ok(AudioClip { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Reads a mono RIFF WAV (16-bit PCM or 32-bit float) at 16 kHz.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Audio(format!("{}: expected mono, found {} channels", path.display(), spec.channels)));
        }
        let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f64 / 32768.0))
                .collect::<std::result::Result<_, _>>(),
            (hound::SampleFormat::Float, 32) => reader
                .samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect::<std::result::Result<_, _>>(),
            (fmt, bits) => {
                return Err(Error::Audio(format!("{}: unsupported sample format {fmt:?}/{bits}", path.display())))
            }
        }
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        Self::new(samples, spec.sample_rate).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))
    }

    /// Writes 16-bit PCM. Used by tests and the synthetic tooling.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::Audio(e.to_string()))?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v).map_err(|e| Error::Audio(e.to_string()))?;
        }
        w.finalize().map_err(|e| Error::Audio(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchFrame {
    /// Frame centre in seconds.
    pub time: f64,
    /// `None` when unvoiced.
    pub f0: Option<f64>,
}

fn frame_starts(len: usize, frame: usize, hop: usize) -> impl Iterator<Item = usize> {
    let n = if len < frame { 0 } else { 1 + (len - frame) / hop };
    (0..n).map(move |i| i * hop)
}

fn normalized_autocorrelation(frame: &[f64], lag: usize) -> f64 {
    let n = frame.len();
    if lag >= n {
        return 0.0;
    }
    let (mut num, mut e0, mut e1) = (0.0, 0.0, 0.0);
    for i in 0..n - lag {
        let a = frame[i];
        let b = frame[i + lag];
        num += a * b;
        e0 += a * a;
        e1 += b * b;
    }
    let den = (e0 * e1).sqrt();
    if den <= f64::MIN_POSITIVE {
        0.0
    } else {
        num / den
    }
}

fn parabolic_offset(left: f64, mid: f64, right: f64) -> f64 {
    let den = left - 2.0 * mid + right;
    if den.abs() < 1e-300 {
        0.0
    } else {
        (0.5 * (left - right) / den).clamp(-0.5, 0.5)
    }
}

fn frame_f0(frame: &[f64]) -> Option<f64> {
    let sr = SAMPLE_RATE as f64;
    let min_lag = (sr / F0_MAX).floor() as usize;
    let max_lag = (sr / F0_MIN).ceil() as usize;
    let r: Vec<f64> = (min_lag - 1..=max_lag + 1)
        .map(|lag| normalized_autocorrelation(frame, lag))
        .collect();
    // r[i] corresponds to lag min_lag - 1 + i.
    let peaks: Vec<usize> = (1..r.len() - 1)
        .filter(|&i| r[i] > 0.0 && r[i] >= r[i - 1] && r[i] >= r[i + 1])
        .collect();
    let best = peaks.iter().map(|&i| r[i]).fold(f64::NEG_INFINITY, f64::max);
    // Written negated so a NaN correlation counts as unvoiced.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(best >= VOICING_THRESHOLD) {
        return None;
    }
    let i = *peaks.iter().find(|&&i| r[i] >= OCTAVE_TOLERANCE * best)?;
    let lag = (min_lag - 1 + i) as f64 + parabolic_offset(r[i - 1], r[i], r[i + 1]);
    Some(sr / lag)
}

/// Frame-wise F0 by normalized autocorrelation: 40 ms frames, 10 ms hop,
/// search over 60–400 Hz, unvoiced below a peak correlation of 0.45.
pub fn pitch_track(clip: &AudioClip) -> Result<Vec<PitchFrame>> {
    let x = clip.samples();
    if x.len() < PITCH_FRAME {
        return Err(Error::Audio(format!(
            "clip of {} samples is shorter than one pitch frame ({PITCH_FRAME})",
            x.len()
        )));
    }
    let sr = SAMPLE_RATE as f64;
    Ok(frame_starts(x.len(), PITCH_FRAME, PITCH_HOP)
        .map(|start| PitchFrame {
            time: (start as f64 + PITCH_FRAME as f64 / 2.0) / sr,
            f0: frame_f0(&x[start..start + PITCH_FRAME]),
        })
        .collect())
}

/// Contiguous runs of voiced frames as `(first, last_inclusive)` frame indices.
fn voiced_runs(pitch: &[PitchFrame]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, p) in pitch.iter().enumerate() {
        match (p.f0.is_some(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, pitch.len() - 1));
    }
    runs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterShimmer {
    pub f0m: f64,
    pub f0j: f64,
    pub f0jr: f64,
    pub ash: f64,
    pub ashr: f64,
}

/// Positive waveform peak with parabolic refinement: (position, amplitude).
fn refined_peak(x: &[f64], i: usize) -> (f64, f64) {
    if i == 0 || i + 1 >= x.len() {
        return (i as f64, x[i]);
    }
    let (l, m, r) = (x[i - 1], x[i], x[i + 1]);
    let d = parabolic_offset(l, m, r);
    (i as f64 + d, m - 0.25 * (l - r) * d)
}

fn argmax(x: &[f64], lo: usize, hi: usize) -> usize {
    let mut best = lo;
    for i in lo..hi {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

const FIRST_PEAK_FRACTION: f64 = 0.5;

/// Glottal cycle peaks per voiced run.
fn cycle_peaks(x: &[f64], pitch: &[PitchFrame]) -> Vec<Vec<(f64, f64)>> {
    let sr = SAMPLE_RATE as f64;
    let mut out = Vec::new();
    for (first, last) in voiced_runs(pitch) {
        let run_start = first * PITCH_HOP;
        let run_end = (last * PITCH_HOP + PITCH_FRAME).min(x.len());
        let period_at = |t: usize| -> f64 {
            let k = ((t as f64 - PITCH_FRAME as f64 / 2.0) / PITCH_HOP as f64).round();
            let k = (k.max(first as f64) as usize).min(last);
            sr / pitch[k].f0.expect("run frames are voiced")
        };
        // Anchor on the first period-long window whose maximum reaches half
        // the run's peak, so leading silence or a soft onset is skipped.
        let run_peak = x[run_start..run_end].iter().fold(0.0f64, |m, &v| m.max(v));
        if run_peak <= 0.0 {
            continue;
        }
        let mut anchor = None;
        let mut s = run_start;
        while s < run_end {
            let hi = (s + period_at(s).ceil() as usize).min(run_end);
            let i = argmax(x, s, hi);
            if x[i] >= FIRST_PEAK_FRACTION * run_peak {
                anchor = Some(i);
                break;
            }
            s = hi;
        }
        let Some(mut idx) = anchor else { continue };
        let mut peaks = vec![refined_peak(x, idx)];
        loop {
            let t = period_at(idx);
            let lo = idx + (0.8 * t).ceil() as usize;
            let hi = idx + (1.2 * t).floor() as usize + 1;
            if hi > run_end || lo >= hi {
                break;
            }
            idx = argmax(x, lo, hi);
            if x[idx] <= 0.0 {
                break;
            }
            peaks.push(refined_peak(x, idx));
        }
        out.push(peaks);
    }
    out
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Cycle-to-cycle period (jitter) and peak amplitude (shimmer) variation.
pub fn jitter_shimmer(clip: &AudioClip, pitch: &[PitchFrame]) -> Result<JitterShimmer> {
    let f0m = mean(pitch.iter().filter_map(|p| p.f0)).ok_or(Error::NoVoicedSegment)?;
    let sr = SAMPLE_RATE as f64;
    let runs = cycle_peaks(clip.samples(), pitch);
    let periods: Vec<Vec<f64>> = runs
        .iter()
        .map(|peaks| peaks.windows(2).map(|w| (w[1].0 - w[0].0) / sr).collect())
        .collect();
    let period_diffs: Vec<f64> = periods
        .iter()
        .flat_map(|p| p.windows(2).map(|w| (w[1] - w[0]).abs()))
        .collect();
    if period_diffs.is_empty() {
        return Err(Error::invalid("fewer than 2 consecutive voiced cycles detected"));
    }
    let f0j = mean(period_diffs).expect("non-empty");
    let mean_period = mean(periods.iter().flatten().copied()).expect("non-empty");
    let ash = mean(runs.iter().flat_map(|p| p.windows(2).map(|w| (w[1].1 - w[0].1).abs()))).expect("non-empty");
    let mean_amp = mean(runs.iter().flatten().map(|p| p.1)).expect("non-empty");
    Ok(JitterShimmer {
        f0m,
        f0j,
        f0jr: f0j / mean_period,
        ash,
        ashr: ash / mean_amp,
    })
}

/// Residual resolution below which whitened pitch deviations count as zero.
const PPE_RESOLUTION: f64 = 1e-9;

/// Pitch period entropy: entropy (nats) of the order-2 linear-prediction
/// residual of semitone pitch relative to its median, histogrammed into 30
/// bins over ±1.5 semitones. Out-of-range residuals fall in the edge bins.
pub fn ppe(pitch: &[PitchFrame]) -> Result<f64> {
    let voiced: Vec<f64> = pitch.iter().filter_map(|p| p.f0).collect();
    if voiced.len() < 10 {
        return Err(Error::invalid(format!("PPE needs at least 10 voiced frames, got {}", voiced.len())));
    }
    let mut sorted = voiced.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let runs: Vec<Vec<f64>> = voiced_runs(pitch)
        .into_iter()
        .map(|(a, b)| {
            pitch[a..=b]
                .iter()
                .map(|p| 12.0 * (p.f0.expect("voiced") / median).log2())
                .collect()
        })
        .collect();
    let n: usize = runs.iter().map(Vec::len).sum();
    let m = runs.iter().flatten().sum::<f64>() / n as f64;
    let lagged = |lag: usize| -> f64 {
        let mut s = 0.0;
        let mut cnt = 0usize;
        for r in &runs {
            for t in lag..r.len() {
                s += (r[t] - m) * (r[t - lag] - m);
                cnt += 1;
            }
        }
        if cnt == 0 {
            0.0
        } else {
            s / cnt as f64
        }
    };
    let (r0, r1, r2) = (lagged(0), lagged(1), lagged(2));
    let det = r0 * r0 - r1 * r1;
    let (a1, a2) = if r0 <= 1e-18 || det.abs() <= 1e-18 * r0 * r0 {
        (0.0, 0.0)
    } else {
        (r1 * (r0 - r2) / det, (r0 * r2 - r1 * r1) / det)
    };
    let mut hist = [0usize; PPE_BINS];
    let mut total = 0usize;
    for r in &runs {
        for t in 2..r.len() {
            let e = (r[t] - m) - a1 * (r[t - 1] - m) - a2 * (r[t - 2] - m);
            let e = (e / PPE_RESOLUTION).round() * PPE_RESOLUTION + 0.0;
            let width = 2.0 * PPE_RANGE / PPE_BINS as f64;
            let bin = ((e + PPE_RANGE) / width).floor();
            let bin = (bin.max(0.0) as usize).min(PPE_BINS - 1);
            hist[bin] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("no voiced run long enough for pitch prediction"));
    }
    Ok(entropy(&hist, total))
}

fn entropy(hist: &[usize], total: usize) -> f64 {
    let h: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.max(0.0)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over 0..Nyquist on the bins of an `n_fft` spectrum.
fn mel_filterbank(n_fft: usize, n_mel: usize) -> Vec<Vec<f64>> {
    let sr = SAMPLE_RATE as f64;
    let top = hz_to_mel(sr / 2.0);
    let pts: Vec<f64> = (0..n_mel + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mel + 1) as f64))
        .collect();
    (0..n_mel)
        .map(|m| {
            let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
            (0..=n_fft / 2)
                .map(|k| {
                    let f = k as f64 * sr / n_fft as f64;
                    ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
                })
                .collect()
        })
        .collect()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn power_spectrum(fft: &Arc<dyn Fft<f64>>, frame: &[f64], window: &[f64], n_fft: usize, buf: &mut Vec<Complex<f64>>) -> Vec<f64> {
    buf.clear();
    buf.extend(frame.iter().zip(window).map(|(x, w)| Complex::new(x * w, 0.0)));
    buf.resize(n_fft, Complex::new(0.0, 0.0));
    fft.process(buf);
    buf[..=n_fft / 2].iter().map(|c| c.norm_sqr()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfccStats {
    pub cepm: [f64; N_MFCC],
    pub cepj: [f64; N_MFCC],
}

/// Per-frame MFCCs: 25 ms Hann windows, 10 ms hop, 26 mel filters over
/// 0–8 kHz, log energies floored at 1e-10, orthonormal DCT-II, 13 coefficients.
pub fn mfcc_frames(clip: &AudioClip) -> Result<Vec<[f64; N_MFCC]>> {
    let x = clip.samples();
    if x.len() < MFCC_WINDOW {
        return Err(Error::Audio(format!(
            "clip of {} samples is shorter than one MFCC window ({MFCC_WINDOW})",
            x.len()
        )));
    }
    let fft = FftPlanner::new().plan_fft_forward(MFCC_FFT);
    let window = hann(MFCC_WINDOW);
    let bank = mel_filterbank(MFCC_FFT, N_MEL);
    let dct: Vec<Vec<f64>> = (0..N_MFCC)
        .map(|k| {
            let scale = if k == 0 { (1.0 / N_MEL as f64).sqrt() } else { (2.0 / N_MEL as f64).sqrt() };
            (0..N_MEL)
                .map(|m| scale * (std::f64::consts::PI * k as f64 * (2 * m + 1) as f64 / (2 * N_MEL) as f64).cos())
                .collect()
        })
        .collect();
    let mut buf = Vec::with_capacity(MFCC_FFT);
    Ok(frame_starts(x.len(), MFCC_WINDOW, MFCC_HOP)
        .map(|start| {
            let power = power_spectrum(&fft, &x[start..start + MFCC_WINDOW], &window, MFCC_FFT, &mut buf);
            let log_mel: Vec<f64> = bank
                .iter()
                .map(|filt| filt.iter().zip(&power).map(|(w, p)| w * p).sum::<f64>().max(LOG_FLOOR).ln())
                .collect();
            let mut c = [0.0; N_MFCC];
            for (ck, basis) in c.iter_mut().zip(&dct) {
                *ck = basis.iter().zip(&log_mel).map(|(b, l)| b * l).sum();
            }
            c
        })
        .collect())
}

/// Mean MFCCs (`cepm`) and mean absolute frame-to-frame MFCC change (`cepj`).
pub fn mfcc_stats(clip: &AudioClip) -> Result<MfccStats> {
    let frames = mfcc_frames(clip)?;
    let n = frames.len() as f64;
    let mut cepm = [0.0; N_MFCC];
    let mut cepj = [0.0; N_MFCC];
    for f in &frames {
        for k in 0..N_MFCC {
            cepm[k] += f[k] / n;
        }
    }
    if frames.len() > 1 {
        let d = (frames.len() - 1) as f64;
        for w in frames.windows(2) {
            for k in 0..N_MFCC {
                cepj[k] += (w[1][k] - w[0][k]).abs() / d;
            }
        }
    }
    Ok(MfccStats { cepm, cepj })
}

/// Welch power spectral density (Hann, 1024-point segments, 50 % overlap).
/// Bin `k` sits at `k * 16000 / 1024` Hz. Scale is arbitrary.
pub fn welch_psd(x: &[f64]) -> Vec<f64> {
    let fft = FftPlanner::new().plan_fft_forward(WELCH_SEGMENT);
    let window = hann(WELCH_SEGMENT);
    let mut buf = Vec::with_capacity(WELCH_SEGMENT);
    let mut psd = vec![0.0; WELCH_SEGMENT / 2 + 1];
    let starts: Vec<usize> = if x.len() <= WELCH_SEGMENT {
        vec![0]
    } else {
        frame_starts(x.len(), WELCH_SEGMENT, WELCH_SEGMENT / 2).collect()
    };
    for &s in &starts {
        let end = (s + WELCH_SEGMENT).min(x.len());
        let p = power_spectrum(&fft, &x[s..end], &window, WELCH_SEGMENT, &mut buf);
        for (acc, v) in psd.iter_mut().zip(p) {
            *acc += v;
        }
    }
    let n = starts.len() as f64;
    psd.iter_mut().for_each(|v| *v /= n);
    psd
}

fn band_sum(psd: &[f64], lo: f64, hi: f64, include_hi: bool) -> f64 {
    let df = SAMPLE_RATE as f64 / WELCH_SEGMENT as f64;
    psd.iter()
        .enumerate()
        .filter(|(k, _)| {
            let f = *k as f64 * df;
            f >= lo && (f < hi || (include_hi && f <= hi))
        })
        .map(|(_, p)| p)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralBalance {
    pub relbandpower: [f64; 4],
    pub alpha: f64,
}

/// Relative band powers over 0–500, 500–1000, 1000–2000, 2000–8000 Hz and the
/// alpha ratio `10 log10(P[1–5 kHz] / P[50–1000 Hz])`.
pub fn band_powers(clip: &AudioClip) -> Result<SpectralBalance> {
    let psd = welch_psd(clip.samples());
    let total: f64 = psd.iter().sum();
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(total > 0.0) {
        return Err(Error::Audio("zero total power".into()));
    }
    let mut rel = [0.0; 4];
    for b in 0..4 {
        rel[b] = band_sum(&psd, BAND_EDGES[b], BAND_EDGES[b + 1], b == 3) / total;
    }
    let eps = 1e-12 * total;
    let high = band_sum(&psd, 1000.0, 5000.0, false);
    let low = band_sum(&psd, 50.0, 1000.0, false);
    Ok(SpectralBalance {
        relbandpower: rel,
        alpha: 10.0 * ((high + eps) / (low + eps)).log10(),
    })
}

fn lerp_at(x: &[f64], pos: f64) -> f64 {
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= x.len() {
        x[x.len() - 1]
    } else {
        x[i] * (1.0 - frac) + x[i + 1] * frac
    }
}

/// Harmonics-to-noise normalization in dB: a one-period comb at the mean F0
/// separates periodic `(x[n] + x[n+T]) / 2` from aperiodic `(x[n] - x[n+T]) / 2`
/// energy over the voiced frames.
pub fn harmonic_noise(clip: &AudioClip, pitch: &[PitchFrame]) -> Result<f64> {
    let f0m = mean(pitch.iter().filter_map(|p| p.f0)).ok_or(Error::NoVoicedSegment)?;
    let x = clip.samples();
    let period = SAMPLE_RATE as f64 / f0m;
    let (mut periodic, mut aperiodic) = (0.0, 0.0);
    for (k, p) in pitch.iter().enumerate() {
        if p.f0.is_none() {
            continue;
        }
        let start = k * PITCH_HOP;
        let end = (start + PITCH_FRAME).min(x.len());
        for n in start..end {
            let pos = n as f64 + period;
            if pos >= (x.len() - 1) as f64 {
                break;
            }
            let shifted = lerp_at(x, pos);
            periodic += 0.25 * (x[n] + shifted).powi(2);
            aperiodic += 0.25 * (x[n] - shifted).powi(2);
        }
    }
    let eps = 1e-12 * (periodic + aperiodic);
    if periodic + aperiodic <= 0.0 {
        return Err(Error::NoVoicedSegment);
    }
    Ok(10.0 * ((periodic + eps) / (aperiodic + eps)).log10())
}

/// Band powers, alpha ratio and harmonics-to-noise measure together.
pub fn band_powers_alpha_hnorm(clip: &AudioClip, pitch: &[PitchFrame]) -> Result<(SpectralBalance, f64)> {
    let bands = band_powers(clip)?;
    Ok((bands, harmonic_noise(clip, pitch)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcousticVector {
    pub cepm: [f64; N_MFCC],
    pub cepj: [f64; N_MFCC],
    pub f0m: f64,
    pub f0j: f64,
    pub f0jr: f64,
    pub ash: f64,
    pub ashr: f64,
    pub ppe: f64,
    pub alpha: f64,
    pub hnorm: f64,
    pub relbandpower: [f64; 4],
}

impl AcousticVector {
    /// Values in [`acoustic_column_names`] order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(ACOUSTIC_DIM);
        v.extend_from_slice(&self.cepm);
        v.extend_from_slice(&self.cepj);
        v.extend_from_slice(&[self.f0m, self.f0j, self.f0jr, self.ash, self.ashr, self.ppe, self.alpha, self.hnorm]);
        v.extend_from_slice(&self.relbandpower);
        v
    }
}

pub fn assemble_acoustic_vector(clip: &AudioClip) -> Result<AcousticVector> {
    if clip.duration() < MIN_CLIP_SECONDS {
        return Err(Error::Audio(format!(
            "clip of {:.3} s is shorter than {MIN_CLIP_SECONDS} s",
            clip.duration()
        )));
    }
    let pitch = pitch_track(clip)?;
    let js = jitter_shimmer(clip, &pitch)?;
    let ppe = ppe(&pitch)?;
    let mfcc = mfcc_stats(clip)?;
    let (bands, hnorm) = band_powers_alpha_hnorm(clip, &pitch)?;
    let v = AcousticVector {
        cepm: mfcc.cepm,
        cepj: mfcc.cepj,
        f0m: js.f0m,
        f0j: js.f0j,
        f0jr: js.f0jr,
        ash: js.ash,
        ashr: js.ashr,
        ppe,
        alpha: bands.alpha,
        hnorm,
        relbandpower: bands.relbandpower,
    };
    if v.to_vec().iter().any(|x| !x.is_finite()) {
        return Err(Error::Audio("non-finite acoustic feature".into()));
    }
    Ok(v)
}

/// Extracts every `*.wav` in `dir` (sample id = file stem), sorted by name.
/// Returns the feature matrix and the files that failed with their errors.
pub fn extract_directory(dir: &Path, exec: Exec) -> Result<(FeatureMatrix, Vec<(String, Error)>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    let results = exec.map(&files, |path| {
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let v = AudioClip::read_wav(path).and_then(|c| assemble_acoustic_vector(&c));
        (id, v)
    });
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (id, v) in results {
        match v {
            Ok(v) => rows.push((id, v.to_vec())),
            Err(e) => failed.push((id, e)),
        }
    }
    Ok((FeatureMatrix::from_rows("acoustic", acoustic_column_names(), rows)?, failed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRelevance {
    pub feature: String,
    /// U of the PD group.
    pub u: f64,
    pub p_value: f64,
}

/// Exact enumeration is used at or below this combined sample size.
pub const MANN_WHITNEY_EXACT_MAX: usize = 20;

/// Mann-Whitney U of `x` against `y` with a two-sided p-value.
pub fn mann_whitney(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("Mann-Whitney needs two non-empty groups"));
    }
    let (nx, ny) = (x.len(), y.len());
    let n = nx + ny;
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&all);
    let rx: f64 = ranks[..nx].iter().sum();
    let u = rx - (nx * (nx + 1)) as f64 / 2.0;
    let mu = (nx * ny) as f64 / 2.0;
    if n <= MANN_WHITNEY_EXACT_MAX {
        // Doubled midranks are integers; count subsets of size nx by rank sum.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max_sum: usize = doubled.iter().sum();
        let mut dp = vec![vec![0u64; max_sum + 1]; nx + 1];
        dp[0][0] = 1;
        for &d in &doubled {
            for j in (1..=nx).rev() {
                for s in (d..=max_sum).rev() {
                    dp[j][s] += dp[j - 1][s - d];
                }
            }
        }
        let centre = (nx * (n + 1)) as i64;
        let obs = ((2.0 * rx).round() as i64 - centre).abs();
        let (mut extreme, mut total) = (0u64, 0u64);
        for (s, &c) in dp[nx].iter().enumerate() {
            total += c;
            if (s as i64 - centre).abs() >= obs {
                extreme += c;
            }
        }
        return Ok((u, (extreme as f64 / total as f64).min(1.0)));
    }
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1)) as f64;
    let var = (nx * ny) as f64 / 12.0 * ((n + 1) as f64 - tie_term);
    if var <= 0.0 {
        return Ok((u, 1.0));
    }
    let z = (((u - mu).abs() - 0.5) / var.sqrt()).max(0.0);
    Ok((u, erfc(z / std::f64::consts::SQRT_2).min(1.0)))
}

/// Per-feature PD-vs-control Mann-Whitney test. `labels` align with the
/// matrix rows.
pub fn mannwhitney_relevance(features: &FeatureMatrix, labels: &[Label]) -> Result<Vec<FeatureRelevance>> {
    if labels.len() != features.len() {
        return Err(Error::DimensionMismatch {
            what: "labels vs feature rows",
            expected: features.len(),
            actual: labels.len(),
        });
    }
    let values = features.values();
    (0..features.dim())
        .map(|c| {
            let col = values.column(c);
            let pd: Vec<f64> = col.iter().zip(labels).filter(|(_, l)| l.is_pd()).map(|(v, _)| *v).collect();
            let ctl: Vec<f64> = col.iter().zip(labels).filter(|(_, l)| !l.is_pd()).map(|(v, _)| *v).collect();
            let (u, p) = mann_whitney(&pd, &ctl)?;
            Ok(FeatureRelevance {
                feature: features.column_names[c].clone(),
                u,
                p_value: p,
            })
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod signals {
    //! Deterministic test signals.
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn sr() -> f64 {
        SAMPLE_RATE as f64
    }

    pub fn tone(freq: f64, seconds: f64, amp: f64) -> Vec<f64> {
        let n = (seconds * sr()) as usize;
        (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr()).sin()).collect()
    }

    pub fn noise(seconds: f64, amp: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * sr()) as usize;
        (0..n).map(|_| amp * (rng.random::<f64>() * 2.0 - 1.0)).collect()
    }

    /// Unit impulses every `period` samples.
    pub fn impulse_train(period: usize, seconds: f64, amp: f64) -> Vec<f64> {
        let n = (seconds * sr()) as usize;
        (0..n).map(|i| if i % period == 0 { amp } else { 0.0 }).collect()
    }

    /// Damped 500 Hz resonance, peak-normalized, excited once per cycle.
    pub fn glottal_shape() -> Vec<f64> {
        let g: Vec<f64> = (0..150)
            .map(|n| (-(n as f64) / 20.0).exp() * (2.0 * std::f64::consts::PI * 500.0 * n as f64 / sr()).sin())
            .collect();
        let m = g.iter().cloned().fold(0.0, f64::max);
        g.into_iter().map(|v| v / m).collect()
    }

    /// Cycles of `glottal_shape` with cyclically repeating periods/amplitudes.
    pub fn cycle_train(periods: &[usize], amps: &[f64], seconds: f64) -> Vec<f64> {
        let n = (seconds * sr()) as usize;
        let shape = glottal_shape();
        let mut x = vec![0.0; n];
        let (mut t, mut i) = (0usize, 0usize);
        while t < n {
            let a = amps[i % amps.len()];
            for (k, s) in shape.iter().enumerate() {
                if t + k < n {
                    x[t + k] += a * s;
                }
            }
            t += periods[i % periods.len()];
            i += 1;
        }
        x
    }

    /// Vowel-like signal: harmonic series with slow vibrato and shimmer.
    pub fn vowel(seconds: f64, f0: f64, vibrato_hz: f64, vibrato_depth: f64, amp: f64) -> Vec<f64> {
        let n = (seconds * sr()) as usize;
        let mut phase = 0.0;
        // Harmonics fill the band up to 7.8 kHz so no mel band is left to leakage.
        let harmonics = (7800.0 / (f0 * (1.0 + vibrato_depth))).floor() as usize;
        (0..n)
            .map(|i| {
                let t = i as f64 / sr();
                let f = f0 * (1.0 + vibrato_depth * (2.0 * std::f64::consts::PI * vibrato_hz * t).sin());
                phase += 2.0 * std::f64::consts::PI * f / sr();
                let env = 1.0 + 0.1 * (2.0 * std::f64::consts::PI * 3.0 * t).sin();
                let s: f64 = (1..=harmonics).map(|h| (phase * h as f64).sin() / h as f64).sum();
                // 20 ms raised-cosine onset, as in natural phonation.
                let onset = if t < 0.02 { 0.5 - 0.5 * (std::f64::consts::PI * t / 0.02).cos() } else { 1.0 };
                amp * onset * env * s / 3.0
            })
            .collect()
    }
}
