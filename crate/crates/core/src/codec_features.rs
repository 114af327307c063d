//! Frame-level latent features: the space the flow-matching model generates in.
//!
//! The front-end is a log mel-style filterbank over a Hann-windowed STFT, with an
//! optional per-band affine normalization fitted on a corpus. It stands in for the
//! continuous (pre-quantization) output of a neural audio codec encoder.
//! [`invert_features`] resynthesizes a listenable waveform from features with
//! noise-excited overlap-add and is only meant for demos.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUPPORTED_SAMPLE_RATES: [u32; 4] = [8000, 16000, 22050, 44100];

/// Mono audio with samples clipped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if !SUPPORTED_SAMPLE_RATES.contains(&sample_rate) {
            return Err(Error::InvalidWaveform(format!(
                "unsupported sample rate {sample_rate}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::InvalidWaveform("no samples".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidWaveform("non-finite sample".into()));
        }
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        let ss: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (ss / self.samples.len() as f64).sqrt()
    }

    pub fn scaled(&self, gain: f32) -> Result<Self> {
        Self::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate,
        )
    }

    /// The waveform exactly as it reads back from a 16-bit PCM file.
    pub fn quantized(&self) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|&s| i16_to_f32(f32_to_i16(s)))
            .collect();
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

fn f32_to_i16(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16
}

fn i16_to_f32(s: i16) -> f32 {
    s as f32 / i16::MAX as f32
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        writer.write_sample(f32_to_i16(s))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: "expected 16-bit PCM mono".into(),
        });
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(i16_to_f32))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Filterbank front-end parameters. Part of the experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub n_bands: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Natural-log floor applied before normalization.
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            frame_len: 1024,
            hop: 512,
            n_bands: 64,
            f_min: 40.0,
            f_max: 8000.0,
            log_floor: -10.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_SAMPLE_RATES.contains(&self.sample_rate) {
            return Err(Error::InvalidConfig(format!(
                "unsupported sample rate {}",
                self.sample_rate
            )));
        }
        if self.frame_len < 16 || self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::InvalidConfig(format!(
                "frame_len {} / hop {} invalid",
                self.frame_len, self.hop
            )));
        }
        if self.n_bands == 0 {
            return Err(Error::InvalidConfig("n_bands must be positive".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::InvalidConfig(format!(
                "band edges {}..{} outside 0..{nyquist}",
                self.f_min, self.f_max
            )));
        }
        Ok(())
    }

    pub fn n_fft(&self) -> usize {
        self.frame_len.next_power_of_two()
    }

    pub fn frame_rate(&self) -> f32 {
        self.sample_rate as f32 / self.hop as f32
    }

    /// Number of frames produced for `n_samples` input samples.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.frame_len {
            0
        } else {
            (n_samples - self.frame_len) / self.hop + 1
        }
    }

    pub fn n_samples_for_frames(&self, n_frames: usize) -> usize {
        (n_frames.max(1) - 1) * self.hop + self.frame_len
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// A T×D matrix of frame features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFeature {
    frames: Vec<f32>,
    n_frames: usize,
    dim: usize,
    frame_rate: f32,
}

impl LatentFeature {
    pub fn new(frames: Vec<f32>, n_frames: usize, dim: usize, frame_rate: f32) -> Result<Self> {
        if dim == 0 || frames.len() != n_frames * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {n_frames}x{dim} feature",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite feature value".into()));
        }
        Ok(Self {
            frames,
            n_frames,
            dim,
            frame_rate,
        })
    }

    pub fn zeros(n_frames: usize, dim: usize, frame_rate: f32) -> Self {
        Self {
            frames: vec![0.0; n_frames * dim],
            n_frames,
            dim,
            frame_rate,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_rate(&self) -> f32 {
        self.frame_rate
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.frames
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.frames
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn get(&self, t: usize, d: usize) -> f32 {
        self.frames[t * self.dim + d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.frames.chunks_exact(self.dim)
    }
}

/// Triangular mel-spaced filters over the one-sided spectrum.
#[derive(Clone, Debug)]
pub struct Filterbank {
    /// `n_bands` rows of `n_fft / 2 + 1` weights.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl Filterbank {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let n_fft = cfg.n_fft();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let edges: Vec<f64> = (0..cfg.n_bands + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_bands + 1) as f64))
            .collect();
        let mut weights = Vec::with_capacity(cfg.n_bands);
        for b in 0..cfg.n_bands {
            let (left, center, right) = (edges[b], edges[b + 1], edges[b + 2]);
            let mut w: Vec<f64> = (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect();
            // Narrow low bands can fall between bins; give them the nearest bin.
            if w.iter().all(|&x| x == 0.0) {
                let k = ((center / bin_hz).round() as usize).min(n_bins - 1);
                w[k] = 1.0;
            }
            weights.push(w);
        }
        Self {
            weights,
            centers_hz: edges[1..=cfg.n_bands].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn n_bands(&self) -> usize {
        self.weights.len()
    }

    fn band_energies(&self, power: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o = w.iter().zip(power).map(|(a, b)| a * b).sum();
        }
    }
}

/// Per-band affine normalization `(x - mean) / std`, fitted on a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl BandNorm {
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a LatentFeature>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for f in features {
            if sum.is_empty() {
                sum = vec![0.0; f.dim()];
                sq = vec![0.0; f.dim()];
            } else if f.dim() != sum.len() {
                return Err(Error::DimensionMismatch(format!(
                    "feature dim {} vs {}",
                    f.dim(),
                    sum.len()
                )));
            }
            for row in f.rows() {
                for (d, &v) in row.iter().enumerate() {
                    sum[d] += v as f64;
                    sq[d] += (v as f64) * (v as f64);
                }
            }
            count += f.n_frames();
        }
        if count == 0 {
            return Err(Error::Invalid("cannot fit normalization on no frames".into()));
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n;
                ((q / n - m * m).max(0.0).sqrt().max(1e-3)) as f32
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn normalize(&self, f: &LatentFeature) -> Result<LatentFeature> {
        self.check(f)?;
        let frames = f
            .rows()
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(d, &v)| (v - self.mean[d]) / self.std[d])
            })
            .collect();
        LatentFeature::new(frames, f.n_frames(), f.dim(), f.frame_rate())
    }

    pub fn denormalize(&self, f: &LatentFeature) -> Result<LatentFeature> {
        self.check(f)?;
        let frames = f
            .rows()
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(d, &v)| v * self.std[d] + self.mean[d])
            })
            .collect();
        LatentFeature::new(frames, f.n_frames(), f.dim(), f.frame_rate())
    }

    fn check(&self, f: &LatentFeature) -> Result<()> {
        if f.dim() != self.mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "feature dim {} vs normalization dim {}",
                f.dim(),
                self.mean.len()
            )));
        }
        Ok(())
    }
}

/// Reusable analysis/synthesis front-end (cached filterbank, window and FFT plans).
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    norm: Option<BandNorm>,
    filterbank: Filterbank,
    window: Vec<f64>,
    window_energy: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig, norm: Option<BandNorm>) -> Result<Self> {
        cfg.validate()?;
        if let Some(n) = &norm {
            if n.mean.len() != cfg.n_bands || n.std.len() != cfg.n_bands {
                return Err(Error::DimensionMismatch(format!(
                    "normalization has {} bands, config {}",
                    n.mean.len(),
                    cfg.n_bands
                )));
            }
        }
        let filterbank = Filterbank::new(&cfg);
        // Periodic Hann.
        let window: Vec<f64> = (0..cfg.frame_len)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / cfg.frame_len as f64).cos())
            .collect();
        let window_energy = window.iter().map(|w| w * w).sum();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(cfg.n_fft());
        let inverse = planner.plan_fft_inverse(cfg.n_fft());
        Ok(Self {
            cfg,
            norm,
            filterbank,
            window,
            window_energy,
            forward,
            inverse,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn norm(&self) -> Option<&BandNorm> {
        self.norm.as_ref()
    }

    pub fn filterbank(&self) -> &Filterbank {
        &self.filterbank
    }

    /// Log filterbank energies, normalized when a [`BandNorm`] is attached.
    pub fn extract(&self, w: &Waveform) -> Result<LatentFeature> {
        let raw = self.extract_raw(w)?;
        match &self.norm {
            Some(n) => n.normalize(&raw),
            None => Ok(raw),
        }
    }

    pub fn extract_raw(&self, w: &Waveform) -> Result<LatentFeature> {
        if w.sample_rate() != self.cfg.sample_rate {
            return Err(Error::DimensionMismatch(format!(
                "waveform at {} Hz, config expects {} Hz",
                w.sample_rate(),
                self.cfg.sample_rate
            )));
        }
        let energies = self.band_energies(w.samples())?;
        let floor = self.cfg.log_floor;
        let frames = energies
            .into_iter()
            .map(|e| (e.max(1e-300).ln().max(floor)) as f32)
            .collect::<Vec<_>>();
        let n_frames = frames.len() / self.cfg.n_bands;
        LatentFeature::new(frames, n_frames, self.cfg.n_bands, self.cfg.frame_rate())
    }

    fn band_energies(&self, samples: &[f32]) -> Result<Vec<f64>> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidWaveform("non-finite sample".into()));
        }
        let n_frames = self.cfg.n_frames(samples.len());
        if n_frames == 0 {
            return Err(Error::InputTooShort {
                len: samples.len(),
                frame: self.cfg.frame_len,
            });
        }
        let n_fft = self.cfg.n_fft();
        let n_bins = n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut power = vec![0.0; n_bins];
        let mut out = vec![0.0; n_frames * self.cfg.n_bands];
        for (j, bands) in out.chunks_exact_mut(self.cfg.n_bands).enumerate() {
            let start = j * self.cfg.hop;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (n, w) in self.window.iter().enumerate() {
                buf[n].re = samples[start + n] as f64 * w;
            }
            self.forward.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr() / self.window_energy;
            }
            self.filterbank.band_energies(&power, bands);
        }
        Ok(out)
    }

    /// Noise-excited overlap-add resynthesis. Deterministic given `seed`.
    pub fn invert(&self, f: &LatentFeature, seed: u64) -> Result<Waveform> {
        if f.dim() != self.cfg.n_bands {
            return Err(Error::DimensionMismatch(format!(
                "feature dim {} vs config n_bands {}",
                f.dim(),
                self.cfg.n_bands
            )));
        }
        if f.n_frames() == 0 {
            return Err(Error::DimensionMismatch("feature has no frames".into()));
        }
        let raw = match &self.norm {
            Some(n) => n.denormalize(f)?,
            None => f.clone(),
        };
        let floor = self.cfg.log_floor as f32;
        // Values at the floor carry no energy.
        let targets: Vec<f64> = raw
            .as_slice()
            .iter()
            .map(|&v| {
                if v <= floor + 1e-4 {
                    0.0
                } else {
                    (v as f64).exp()
                }
            })
            .collect();

        let n_bins = self.cfg.n_fft() / 2 + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases: Vec<f64> = (0..f.n_frames() * n_bins)
            .map(|_| rng.random::<f64>() * 2.0 * PI)
            .collect();
        let band_mass: Vec<f64> = self
            .filterbank
            .weights
            .iter()
            .map(|w| w.iter().sum::<f64>().max(1e-12))
            .collect();

        let mut gains = vec![1.0f64; targets.len()];
        let mut samples = Vec::new();
        for iteration in 0..4 {
            samples = self.synthesize(&targets, &gains, &phases, &band_mass, f.n_frames());
            if iteration == 3 {
                break;
            }
            let measured: Vec<f32> = samples.iter().map(|&s| s as f32).collect();
            let got = self.band_energies(&measured)?;
            for ((g, &want), &have) in gains.iter_mut().zip(&targets).zip(&got) {
                if want > 0.0 && have > 1e-30 {
                    *g *= (want / have).clamp(1e-3, 1e3);
                }
            }
        }
        Waveform::new(samples.into_iter().map(|s| s as f32).collect(), self.cfg.sample_rate)
    }

    fn synthesize(
        &self,
        targets: &[f64],
        gains: &[f64],
        phases: &[f64],
        band_mass: &[f64],
        n_frames: usize,
    ) -> Vec<f64> {
        let n_fft = self.cfg.n_fft();
        let n_bins = n_fft / 2 + 1;
        let n_bands = self.cfg.n_bands;
        let mut out = vec![0.0; self.cfg.n_samples_for_frames(n_frames)];
        let mut density = vec![0.0; n_bins];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for j in 0..n_frames {
            density.iter_mut().for_each(|d| *d = 0.0);
            for b in 0..n_bands {
                let e = targets[j * n_bands + b] * gains[j * n_bands + b];
                if e == 0.0 {
                    continue;
                }
                let scale = e / band_mass[b];
                for (d, w) in density.iter_mut().zip(&self.filterbank.weights[b]) {
                    *d += w * scale;
                }
            }
            if density.iter().all(|&d| d == 0.0) {
                continue;
            }
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for k in 0..n_bins {
                let mag = density[k].max(0.0).sqrt();
                let c = Complex::from_polar(mag, phases[j * n_bins + k]);
                buf[k] = c;
                if k > 0 && k < n_fft - k {
                    buf[n_fft - k] = c.conj();
                }
            }
            self.inverse.process(&mut buf);
            let start = j * self.cfg.hop;
            for (n, w) in self.window.iter().enumerate() {
                out[start + n] += buf[n].re * w / n_fft as f64;
            }
        }
        out
    }
}

/// Raw (unnormalized) log filterbank features of `w`.
pub fn extract_features(w: &Waveform, cfg: &FeatureConfig) -> Result<LatentFeature> {
    FeatureExtractor::new(cfg.clone(), None)?.extract_raw(w)
}

/// Demo resynthesis of raw features produced under `cfg`.
pub fn invert_features(f: &LatentFeature, cfg: &FeatureConfig, rng_seed: u64) -> Result<Waveform> {
    FeatureExtractor::new(cfg.clone(), None)?.invert(f, rng_seed)
}

/// Mean over frames of the Pearson correlation across bands between two features.
pub fn mean_frame_correlation(a: &LatentFeature, b: &LatentFeature) -> Result<f64> {
    if a.dim() != b.dim() || a.n_frames() != b.n_frames() || a.n_frames() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.n_frames(),
            a.dim(),
            b.n_frames(),
            b.dim()
        )));
    }
    let mut total = 0.0;
    for (ra, rb) in a.rows().zip(b.rows()) {
        total += pearson(ra, rb);
    }
    Ok(total / a.n_frames() as f64)
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa < 1e-12 || sbb < 1e-12 {
        // Flat rows: perfectly correlated only if both are flat.
        return if saa < 1e-12 && sbb < 1e-12 { 1.0 } else { 0.0 };
    }
    sab / (saa * sbb).sqrt()
}
