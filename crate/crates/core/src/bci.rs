//! Synthetic SSVEP channel: sinusoid-plus-noise EEG synthesis, canonical
//! correlation decoding and the stimulus-to-command table.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::Command;

/// Stimulus frequencies in Hz, one per decodable command.
pub const STIMULUS_SET: [f64; 4] = [8.0, 10.0, 12.0, 15.0];
pub const SAMPLE_RATE: f64 = 128.0;
/// Regularization added to covariance diagonals (relative to the largest
/// eigenvalue) when a covariance is rank-deficient.
pub const CCA_EPSILON: f64 = 1e-8;
pub const DEFAULT_MARGIN_THRESHOLD: f64 = 0.05;

static RANK_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// Number of rank-deficient covariances regularized so far in this process.
pub fn rank_warnings() -> u64 {
    RANK_WARNINGS.load(Ordering::Relaxed)
}

#[derive(Debug, Error, PartialEq)]
pub enum BciError {
    #[error("frequency {0} Hz is not in the stimulus set")]
    UnknownFrequency(f64),
    #[error("signal and reference lengths differ ({signal} vs {reference})")]
    LengthMismatch { signal: usize, reference: usize },
    #[error("signal needs at least 2 samples and 1 channel")]
    TooShort,
    #[error("invalid synthesis config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub channels: usize,
    pub sample_rate: f64,
    pub window_s: f64,
    /// Amplitude of the fundamental; the second harmonic gets half of it.
    pub amplitude: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { channels: 8, sample_rate: SAMPLE_RATE, window_s: 2.0, amplitude: 1.0, noise_std: 1.0 }
    }
}

impl SynthConfig {
    pub fn samples(&self) -> usize {
        (self.sample_rate * self.window_s).round() as usize
    }

    pub fn validate(&self) -> Result<(), BciError> {
        if self.channels == 0 {
            return Err(BciError::Config("channels must be positive".into()));
        }
        if !(self.sample_rate > 0.0 && self.window_s > 0.0) || self.samples() < 2 {
            return Err(BciError::Config("window must hold at least 2 samples".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite() && self.amplitude.is_finite()) {
            return Err(BciError::Config("noise_std and amplitude must be finite, noise_std >= 0".into()));
        }
        Ok(())
    }
}

/// Multichannel signal; one row per sample, one column per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEeg {
    pub freq: f64,
    pub sample_rate: f64,
    pub data: DMatrix<f64>,
}

fn check_freq(freq: f64) -> Result<(), BciError> {
    if STIMULUS_SET.contains(&freq) {
        Ok(())
    } else {
        Err(BciError::UnknownFrequency(freq))
    }
}

/// Each channel is `a1 sin(2 pi f t + phi) + a2 sin(4 pi f t + phi)` plus
/// Gaussian noise, with a per-channel phase drawn from the seed.
pub fn synth(freq: f64, cfg: &SynthConfig, seed: u64) -> Result<SyntheticEeg, BciError> {
    check_freq(freq)?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = Uniform::new(0.0, 2.0 * PI).expect("valid range");
    let phases: Vec<f64> = (0..cfg.channels).map(|_| phase.sample(&mut rng)).collect();
    let noise = Normal::new(0.0, cfg.noise_std).expect("finite std");
    let n = cfg.samples();
    let harmonics = [(1.0, cfg.amplitude), (2.0, 0.5 * cfg.amplitude)];
    let data = DMatrix::from_fn(n, cfg.channels, |i, c| {
        let t = i as f64 / cfg.sample_rate;
        harmonics.iter().map(|(h, a)| a * (2.0 * PI * h * freq * t + phases[c]).sin()).sum::<f64>()
    });
    let data = if cfg.noise_std > 0.0 {
        // Noise drawn sample-major after all phases, independent of the clean part.
        let mut d = data;
        for i in 0..n {
            for c in 0..cfg.channels {
                d[(i, c)] += noise.sample(&mut rng);
            }
        }
        d
    } else {
        data
    };
    Ok(SyntheticEeg { freq, sample_rate: cfg.sample_rate, data })
}

/// Sine and cosine references at `freq` and its second harmonic.
pub fn reference_set(freq: f64, samples: usize, sample_rate: f64) -> DMatrix<f64> {
    DMatrix::from_fn(samples, 4, |i, j| {
        let t = i as f64 / sample_rate;
        let h = (j / 2 + 1) as f64;
        let arg = 2.0 * PI * h * freq * t;
        if j % 2 == 0 {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

fn centered_cov(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows() as f64;
    a.transpose() * b / (n - 1.0)
}

fn center(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// Inverse square root of a symmetric positive semi-definite matrix,
/// regularized when it is rank-deficient.
fn inv_sqrt(cov: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov);
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let floor = max * 1e-12;
    let shift = if min <= floor {
        RANK_WARNINGS.fetch_add(1, Ordering::Relaxed);
        CCA_EPSILON * max.max(f64::MIN_POSITIVE)
    } else {
        0.0
    };
    let d = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + shift).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Largest canonical correlation between the columns of `signal` and
/// `reference`: the spectral norm of `Cxx^-1/2 Cxy Cyy^-1/2`.
pub fn cca_correlation(signal: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<f64, BciError> {
    if signal.nrows() != reference.nrows() {
        return Err(BciError::LengthMismatch { signal: signal.nrows(), reference: reference.nrows() });
    }
    if signal.nrows() < 2 || signal.ncols() == 0 || reference.ncols() == 0 {
        return Err(BciError::TooShort);
    }
    let x = center(signal);
    let y = center(reference);
    let wx = inv_sqrt(centered_cov(&x, &x));
    let wy = inv_sqrt(centered_cov(&y, &y));
    let k = wx * centered_cov(&x, &y) * wy;
    let rho = k.singular_values().iter().cloned().fold(0.0_f64, f64::max);
    Ok(if rho.is_finite() { rho.clamp(0.0, 1.0) } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcaResult {
    /// `(frequency, rho)` per candidate, in stimulus-set order.
    pub correlations: Vec<(f64, f64)>,
    pub decoded: f64,
    /// Top correlation minus the runner-up.
    pub margin: f64,
}

pub fn decode(signal: &SyntheticEeg, candidates: &[f64]) -> Result<CcaResult, BciError> {
    let n = signal.data.nrows();
    let mut correlations = Vec::with_capacity(candidates.len());
    for &f in candidates {
        check_freq(f)?;
        let r = reference_set(f, n, signal.sample_rate);
        correlations.push((f, cca_correlation(&signal.data, &r)?));
    }
    let mut order: Vec<usize> = (0..correlations.len()).collect();
    // Stable sort keeps the earlier candidate on exact ties.
    order.sort_by(|&a, &b| correlations[b].1.total_cmp(&correlations[a].1));
    let best = correlations[order[0]];
    let margin = if order.len() > 1 { best.1 - correlations[order[1]].1 } else { best.1 };
    Ok(CcaResult { decoded: best.0, margin, correlations })
}

/// Stimulus frequency that selects `cmd`, if it is decodable.
pub fn frequency_for(cmd: Command) -> Option<f64> {
    match cmd {
        Command::Left => Some(8.0),
        Command::Right => Some(10.0),
        Command::Up => Some(12.0),
        Command::GripToggle => Some(15.0),
        _ => None,
    }
}

/// 8 Hz left, 10 Hz right, 12 Hz up, 15 Hz grip toggle; low-margin
/// decodes are rejected as no-op.
pub fn command_map(result: &CcaResult, margin_threshold: f64) -> Command {
    if result.margin < margin_threshold {
        return Command::Noop;
    }
    match result.decoded {
        8.0 => Command::Left,
        10.0 => Command::Right,
        12.0 => Command::Up,
        15.0 => Command::GripToggle,
        _ => Command::Noop,
    }
}

/// Fraction of correctly decoded trials over `trials` seeded trials per class.
pub fn decode_accuracy(cfg: &SynthConfig, trials: usize, seed: u64) -> Result<f64, BciError> {
    let mut correct = 0usize;
    for (k, &f) in STIMULUS_SET.iter().enumerate() {
        for t in 0..trials {
            let s = synth(f, cfg, seed.wrapping_add((k * trials + t) as u64))?;
            if decode(&s, &STIMULUS_SET)?.decoded == f {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / (trials * STIMULUS_SET.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SynthConfig {
        SynthConfig { noise_std: 0.0, ..SynthConfig::default() }
    }

    #[test]
    fn noiseless_signal_is_exact_sinusoid() {
        let s = synth(10.0, &quiet(), 3).unwrap();
        assert_eq!(s.data.nrows(), 256);
        assert_eq!(s.data.ncols(), 8);
        // Period of 10 Hz at 128 Hz is 12.8 samples; 64 samples is 5 periods.
        for c in 0..8 {
            assert!((s.data[(0, c)] - s.data[(64, c)]).abs() < 1e-9);
        }
    }

    #[test]
    fn synth_is_seeded() {
        let cfg = SynthConfig::default();
        assert_eq!(synth(12.0, &cfg, 5).unwrap(), synth(12.0, &cfg, 5).unwrap());
        assert_ne!(synth(12.0, &cfg, 5).unwrap(), synth(12.0, &cfg, 6).unwrap());
    }

    #[test]
    fn spectral_peak_at_stimulus() {
        for f in STIMULUS_SET {
            let s = synth(f, &quiet(), 1).unwrap();
            let n = s.data.nrows();
            let col = s.data.column(0);
            // Direct DFT magnitude per integer-bin frequency (0.5 Hz resolution).
            let power = |k: usize| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in col.iter().enumerate() {
                    let a = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            };
            let peak = (1..n / 2).max_by(|&a, &b| power(a).total_cmp(&power(b))).unwrap();
            assert_eq!(peak as f64 * SAMPLE_RATE / n as f64, f);
        }
    }

    #[test]
    fn self_reference_has_unit_correlation() {
        let r = reference_set(12.0, 256, SAMPLE_RATE);
        let col = r.columns(1, 1).into_owned();
        let rho = cca_correlation(&col, &r).unwrap();
        assert!((rho - 1.0).abs() < 1e-9, "{rho}");
    }

    #[test]
    fn mismatched_frequency_is_near_floor() {
        let s = synth(8.0, &quiet(), 2).unwrap();
        let r = reference_set(15.0, s.data.nrows(), SAMPLE_RATE);
        assert!(cca_correlation(&s.data, &r).unwrap() < 0.3);
    }

    #[test]
    fn rank_deficient_input_is_regularized() {
        let before = rank_warnings();
        let s = synth(10.0, &quiet(), 4).unwrap();
        let r = reference_set(10.0, s.data.nrows(), SAMPLE_RATE);
        let rho = cca_correlation(&s.data, &r).unwrap();
        assert!(rho > 0.999 && rho <= 1.0);
        assert!(rank_warnings() > before);
    }

    #[test]
    fn noiseless_decode_is_correct() {
        for f in STIMULUS_SET {
            let res = decode(&synth(f, &quiet(), 9).unwrap(), &STIMULUS_SET).unwrap();
            assert_eq!(res.decoded, f);
            assert!(res.margin > 0.5);
        }
    }

    #[test]
    fn command_table() {
        let res = |f: f64, margin: f64| CcaResult { correlations: vec![], decoded: f, margin };
        assert_eq!(command_map(&res(8.0, 0.2), 0.05), Command::Left);
        assert_eq!(command_map(&res(10.0, 0.2), 0.05), Command::Right);
        assert_eq!(command_map(&res(12.0, 0.2), 0.05), Command::Up);
        assert_eq!(command_map(&res(15.0, 0.2), 0.05), Command::GripToggle);
        assert_eq!(command_map(&res(8.0, 0.01), 0.05), Command::Noop);
        for f in STIMULUS_SET {
            let cmd = command_map(&res(f, 1.0), 0.05);
            assert_eq!(frequency_for(cmd), Some(f));
        }
    }

    #[test]
    fn unknown_frequency_rejected() {
        assert_eq!(synth(9.0, &quiet(), 0).unwrap_err(), BciError::UnknownFrequency(9.0));
    }
}
