//! Log-mel front end: framed power spectra, a triangular mel filterbank on
//! the HTK mel scale, and natural-log compression with a fixed floor.

mod wav;

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{checkpoint, Tensor};

pub use wav::{read_wav, write_wav};
pub(crate) use wav::quantize;

/// Power floor applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct PcmSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl PcmSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        Ok(PcmSignal {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

impl std::str::FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(Window::Hann),
            "rectangular" | "rect" => Ok(Window::Rectangular),
            other => Err(Error::config(format!("unknown window `{other}`"))),
        }
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Window::Hann => "hann",
            Window::Rectangular => "rectangular",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            n_fft: 1024,
            hop: 512,
            window: Window::Hann,
        }
    }
}

impl StftConfig {
    fn validate(&self) -> Result<()> {
        if !self.n_fft.is_power_of_two() || self.n_fft < 2 {
            return Err(Error::config(format!("n_fft {} is not a power of two", self.n_fft)));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::config(format!(
                "hop {} must lie in [1, n_fft={}]",
                self.hop, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `floor((len − n_fft) / hop) + 1`, or zero when the signal is shorter
    /// than one frame.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.n_fft {
            0
        } else {
            (len - self.n_fft) / self.hop + 1
        }
    }
}

struct Framer {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Framer {
    fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Framer {
            window: cfg.window.coefficients(cfg.n_fft),
            cfg,
            fft,
        })
    }

    fn power(&self, samples: &[f64]) -> Result<Tensor> {
        let n = self.cfg.n_fft;
        let frames = self.cfg.frame_count(samples.len());
        if frames == 0 {
            return Err(Error::SignalTooShort {
                len: samples.len(),
                need: n,
            });
        }
        let bins = self.cfg.n_bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let frame = &samples[t * self.cfg.hop..t * self.cfg.hop + n];
            for ((b, s), w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(s * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            out.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
        }
        Tensor::new(vec![frames, bins], out)
    }
}

/// Framed power spectrum `|DFT(window ⊙ frame)|²`, shape `(T, n_fft/2 + 1)`.
pub fn stft_power(signal: &PcmSignal, cfg: &StftConfig) -> Result<Tensor> {
    Framer::new(*cfg)?.power(&signal.samples)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Filter centres in Hz: `n_mels + 2` points evenly spaced in mel, edges
/// included.
pub fn mel_points_hz(n_mels: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filters with unit peaks, shape `(n_mels, n_fft/2 + 1)`.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Result<Tensor> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
        return Err(Error::config(format!(
            "band edges must satisfy 0 <= f_min < f_max <= {nyquist}, got [{f_min}, {f_max}]"
        )));
    }
    if n_mels < 2 {
        return Err(Error::config("need at least two mel bands"));
    }
    if !n_fft.is_power_of_two() {
        return Err(Error::config(format!("n_fft {n_fft} is not a power of two")));
    }
    let bins = n_fft / 2 + 1;
    let pts = mel_points_hz(n_mels, f_min, f_max);
    let mut w = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, c, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let rise = (f - lo) / (c - lo);
            let fall = (hi - f) / (hi - c);
            w[m * bins + k] = rise.min(fall).max(0.0);
        }
        if w[m * bins..(m + 1) * bins].iter().all(|&v| v <= 0.0) {
            return Err(Error::config(format!(
                "mel band {m} covers no FFT bin; use fewer bands or a larger n_fft"
            )));
        }
    }
    Tensor::new(vec![n_mels, bins], w)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogMelConfig {
    pub stft: StftConfig,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper band edge; `None` means Nyquist.
    pub f_max: Option<f64>,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig {
            stft: StftConfig::default(),
            n_mels: 80,
            f_min: 0.0,
            f_max: None,
        }
    }
}

/// Time-major `(T, n_mels)` natural-log mel power.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    pub frames: Tensor,
    pub frame_hop_s: f64,
}

impl LogMelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Reusable extractor holding the FFT plan and filterbank for one
/// sample rate.
pub struct LogMelExtractor {
    cfg: LogMelConfig,
    sample_rate: u32,
    framer: Framer,
    filterbank: Tensor,
}

impl LogMelExtractor {
    pub fn new(cfg: LogMelConfig, sample_rate: u32) -> Result<Self> {
        let framer = Framer::new(cfg.stft)?;
        let f_max = cfg.f_max.unwrap_or(sample_rate as f64 / 2.0);
        let filterbank = mel_filterbank(cfg.n_mels, cfg.stft.n_fft, sample_rate, cfg.f_min, f_max)?;
        Ok(LogMelExtractor {
            cfg,
            sample_rate,
            framer,
            filterbank,
        })
    }

    pub fn filterbank(&self) -> &Tensor {
        &self.filterbank
    }

    pub fn extract(&self, signal: &PcmSignal) -> Result<LogMelSpectrogram> {
        if signal.sample_rate != self.sample_rate {
            return Err(Error::Audio(format!(
                "expected {} Hz audio, got {} Hz",
                self.sample_rate, signal.sample_rate
            )));
        }
        let power = self.framer.power(&signal.samples)?;
        let frames = log_mel_from_power(&power, &self.filterbank)?;
        Ok(LogMelSpectrogram {
            frames,
            frame_hop_s: self.cfg.stft.hop as f64 / self.sample_rate as f64,
        })
    }

    /// Like [`extract`](Self::extract) but zero-pads signals shorter than one
    /// frame up to `n_fft` samples.
    pub fn extract_padded(&self, signal: &PcmSignal) -> Result<LogMelSpectrogram> {
        if signal.len() >= self.cfg.stft.n_fft {
            return self.extract(signal);
        }
        let mut samples = signal.samples.clone();
        samples.resize(self.cfg.stft.n_fft, 0.0);
        self.extract(&PcmSignal::new(samples, signal.sample_rate)?)
    }
}

fn log_mel_from_power(power: &Tensor, fb: &Tensor) -> Result<Tensor> {
    let (frames, bins) = power.dims2()?;
    let (n_mels, fb_bins) = fb.dims2()?;
    if bins != fb_bins {
        return Err(Error::shape("filterbank and spectrum bin counts differ"));
    }
    let mut out = Vec::with_capacity(frames * n_mels);
    for t in 0..frames {
        let p = power.row(t);
        for m in 0..n_mels {
            let e: f64 = fb.row(m).iter().zip(p).map(|(w, v)| w * v).sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Tensor::new(vec![frames, n_mels], out)
}

pub fn log_mel(signal: &PcmSignal, cfg: &LogMelConfig) -> Result<LogMelSpectrogram> {
    LogMelExtractor::new(*cfg, signal.sample_rate)?.extract(signal)
}

/// Per-band mean/std standardisation fitted on training spectrograms.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(specs: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for s in specs {
            let (t, m) = s.dims2()?;
            if sum.is_empty() {
                sum = vec![0.0; m];
                sq = vec![0.0; m];
            } else if sum.len() != m {
                return Err(Error::shape("spectrograms disagree on band count"));
            }
            for r in 0..t {
                for (j, v) in s.row(r).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            count += t;
        }
        if count == 0 {
            return Err(Error::Empty("standardisation set"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                // Constant bands are centred but not rescaled.
                let sd = (q / n - m * m).max(0.0).sqrt();
                if sd < 1e-6 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, spec: &Tensor) -> Result<Tensor> {
        let (t, m) = spec.dims2()?;
        if m != self.mean.len() {
            return Err(Error::shape("band count differs from fitted standardiser"));
        }
        let mut data = spec.data().to_vec();
        for r in 0..t {
            for j in 0..m {
                let v = &mut data[r * m + j];
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Tensor::new(vec![t, m], data)
    }
}

/// Spectrogram cache: one tensor record named `logmel`.
pub fn write_logmel_cache(path: &Path, spec: &LogMelSpectrogram) -> Result<()> {
    checkpoint::save(path, &[("logmel".to_string(), spec.frames.clone())])
}

pub fn read_logmel_cache(path: &Path) -> Result<Tensor> {
    let recs = checkpoint::load(path)?;
    Ok(checkpoint::take(&recs, "logmel")?.clone())
}
