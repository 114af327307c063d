//! Synthetic captioned corpus and the leaf-tag rule for zero-/few-shot splits.
//!
//! Every clip comes from one parametric event generator (a "variant") in a small
//! three-level ontology `category -> family -> variant`. The variant is the leaf tag.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec_features::Waveform;
use crate::error::{Error, Result};
use crate::seeding::derive_seed;

pub const FEW_SHOT_THRESHOLD: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Pool,
    ZeroShot,
    FewShot,
    Test,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::Pool,
        Split::ZeroShot,
        Split::FewShot,
        Split::Test,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Pool => "pool",
            Split::ZeroShot => "zero_shot",
            Split::FewShot => "few_shot",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hierarchical tags ordered from abstract to specific.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TagPath(Vec<String>);

impl TagPath {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() || labels.iter().any(|l| l.trim().is_empty()) {
            return Err(Error::Invalid(format!("invalid tag path {labels:?}")));
        }
        Ok(Self(labels))
    }

    pub fn leaf(&self) -> &str {
        self.0.last().expect("tag path is non-empty")
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }
}

impl TryFrom<Vec<String>> for TagPath {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        TagPath::new(v)
    }
}

impl From<TagPath> for Vec<String> {
    fn from(t: TagPath) -> Self {
        t.0
    }
}

/// One manifest line: `{id, wav_path, caption, tags, split}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipManifestEntry {
    pub id: String,
    pub wav_path: String,
    pub caption: String,
    pub tags: TagPath,
    pub split: Split,
}

impl ClipManifestEntry {
    pub fn leaf(&self) -> &str {
        self.tags.leaf()
    }
}

pub fn write_manifest(path: &Path, entries: &[ClipManifestEntry]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ClipManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ClipManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", n + 1),
        })?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::DuplicateId(entry.id));
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Signal model of one leaf event type.
#[derive(Clone, Copy, Debug)]
enum EventKind {
    /// Sine at `freq` Hz.
    Tone { freq: f64 },
    /// Exponential sweep `from -> to` Hz.
    Sweep { from: f64, to: f64 },
    /// Sinusoidal frequency modulation around `center` by `depth` (fraction) at `rate` Hz.
    Trill { center: f64, depth: f64, rate: f64 },
    /// Filtered noise between `lo` and `hi` Hz.
    Noise { lo: f64, hi: f64 },
    /// Carrier at `freq` with amplitude modulation at `rate` Hz; `square` gates it.
    Am { freq: f64, rate: f64, square: bool },
    /// Decaying resonances at `resonance` Hz repeated at `rate` Hz.
    Clicks { rate: f64, resonance: f64 },
    /// Partials at `f0 * ratio` with amplitude `decay^i`.
    Stack { f0: f64, ratios: &'static [f64], decay: f64 },
}

struct VariantDef {
    name: &'static str,
    kind: EventKind,
}

struct FamilyDef {
    name: &'static str,
    category: &'static str,
    caption_word: &'static str,
    variants: [VariantDef; 4],
}

const HARMONICS: &[f64] = &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
const ODD_HARMONICS: &[f64] = &[1.0, 3.0, 5.0, 7.0, 9.0, 11.0];
const BELL_PARTIALS: &[f64] = &[1.0, 2.76, 5.4, 8.93];

const FAMILIES: [FamilyDef; 6] = [
    FamilyDef {
        name: "tone",
        category: "tonal",
        caption_word: "tone",
        variants: [
            VariantDef { name: "hum", kind: EventKind::Tone { freq: 180.0 } },
            VariantDef { name: "beep", kind: EventKind::Tone { freq: 800.0 } },
            VariantDef { name: "whistle", kind: EventKind::Tone { freq: 2400.0 } },
            VariantDef { name: "pip", kind: EventKind::Tone { freq: 5200.0 } },
        ],
    },
    FamilyDef {
        name: "chirp",
        category: "sweep",
        caption_word: "chirp",
        variants: [
            VariantDef { name: "rising", kind: EventKind::Sweep { from: 400.0, to: 3000.0 } },
            VariantDef { name: "falling", kind: EventKind::Sweep { from: 3000.0, to: 400.0 } },
            VariantDef { name: "swoop", kind: EventKind::Sweep { from: 1500.0, to: 6500.0 } },
            VariantDef {
                name: "trill",
                kind: EventKind::Trill { center: 1100.0, depth: 0.3, rate: 7.0 },
            },
        ],
    },
    FamilyDef {
        name: "noise-burst",
        category: "noisy",
        caption_word: "noise",
        variants: [
            VariantDef { name: "rumble", kind: EventKind::Noise { lo: 40.0, hi: 300.0 } },
            VariantDef { name: "hiss", kind: EventKind::Noise { lo: 4000.0, hi: 7800.0 } },
            VariantDef { name: "splash", kind: EventKind::Noise { lo: 1200.0, hi: 2600.0 } },
            VariantDef { name: "static", kind: EventKind::Noise { lo: 40.0, hi: 7800.0 } },
        ],
    },
    FamilyDef {
        name: "am-tone",
        category: "modulated",
        caption_word: "modulated",
        variants: [
            VariantDef { name: "flutter", kind: EventKind::Am { freq: 600.0, rate: 12.0, square: false } },
            VariantDef { name: "warble", kind: EventKind::Am { freq: 1300.0, rate: 5.0, square: false } },
            VariantDef { name: "tremolo", kind: EventKind::Am { freq: 3200.0, rate: 8.0, square: false } },
            VariantDef { name: "pulse", kind: EventKind::Am { freq: 400.0, rate: 3.0, square: true } },
        ],
    },
    FamilyDef {
        name: "click-train",
        category: "impulsive",
        caption_word: "clicks",
        variants: [
            VariantDef { name: "tick", kind: EventKind::Clicks { rate: 4.0, resonance: 3000.0 } },
            VariantDef { name: "rattle", kind: EventKind::Clicks { rate: 25.0, resonance: 1200.0 } },
            VariantDef { name: "clatter", kind: EventKind::Clicks { rate: 12.0, resonance: 5000.0 } },
            VariantDef { name: "knock", kind: EventKind::Clicks { rate: 2.5, resonance: 300.0 } },
        ],
    },
    FamilyDef {
        name: "harmonic-stack",
        category: "harmonic",
        caption_word: "harmonics",
        variants: [
            VariantDef {
                name: "drone",
                kind: EventKind::Stack { f0: 110.0, ratios: HARMONICS, decay: 0.8 },
            },
            VariantDef {
                name: "horn",
                kind: EventKind::Stack { f0: 233.0, ratios: ODD_HARMONICS, decay: 0.75 },
            },
            VariantDef {
                name: "organ",
                kind: EventKind::Stack { f0: 392.0, ratios: HARMONICS, decay: 0.95 },
            },
            VariantDef {
                name: "chime",
                kind: EventKind::Stack { f0: 880.0, ratios: BELL_PARTIALS, decay: 0.7 },
            },
        ],
    },
];

pub const MODIFIERS: [&str; 3] = ["soft", "clear", "loud"];
pub const CAPTION_FILLERS: [&str; 2] = ["a", "sound"];

/// Family names understood by [`generate_toy_corpus`].
pub fn family_names() -> Vec<&'static str> {
    FAMILIES.iter().map(|f| f.name).collect()
}

/// Every word the caption templates can produce, in a fixed order.
pub fn template_words() -> Vec<String> {
    let mut words: Vec<String> = CAPTION_FILLERS.iter().map(|s| s.to_string()).collect();
    words.extend(MODIFIERS.iter().map(|s| s.to_string()));
    for fam in &FAMILIES {
        words.push(fam.caption_word.to_string());
        words.extend(fam.variants.iter().map(|v| v.name.to_string()));
    }
    words
}

/// Leaf tags of the built-in ontology with their full paths.
pub fn ontology() -> Vec<TagPath> {
    FAMILIES
        .iter()
        .flat_map(|fam| {
            fam.variants.iter().map(move |v| {
                TagPath(vec![
                    fam.category.to_string(),
                    fam.name.to_string(),
                    v.name.to_string(),
                ])
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub families: Vec<String>,
    pub variants_per_family: usize,
    pub clips_per_variant: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    /// Leaves that get no training clips.
    pub zero_shot_variants: Vec<String>,
    /// Leaves that get `few_shot_train_clips` training clips.
    pub few_shot_variants: Vec<String>,
    pub few_shot_train_clips: usize,
    /// Fraction of a common variant's clips that go to training.
    pub train_fraction: f64,
    /// Fraction of every variant's clips that go to the retrieval pool.
    pub pool_fraction: f64,
    /// Relative per-clip frequency jitter.
    pub jitter: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            families: family_names().iter().map(|s| s.to_string()).collect(),
            variants_per_family: 4,
            clips_per_variant: 84,
            clip_seconds: 2.0,
            sample_rate: 16000,
            zero_shot_variants: ["pip", "swoop", "splash", "tremolo"]
                .map(String::from)
                .to_vec(),
            few_shot_variants: ["whistle", "trill", "clatter", "chime"]
                .map(String::from)
                .to_vec(),
            few_shot_train_clips: 2,
            train_fraction: 0.5,
            pool_fraction: 0.25,
            jitter: 0.08,
        }
    }
}

/// Clips in memory, index-aligned with their manifest entries.
pub struct ToyCorpus {
    pub entries: Vec<ClipManifestEntry>,
    pub waveforms: Vec<Waveform>,
}

impl ToyCorpus {
    pub fn entries_in(&self, split: Split) -> Vec<ClipManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .cloned()
            .collect()
    }
}

/// Deterministic corpus: a pure function of `(cfg, seed)`.
///
/// Non-train, non-pool clips are emitted with split `test`; [`curate_splits`]
/// then moves them to the zero-/few-shot splits.
pub fn generate_toy_corpus(cfg: &CorpusConfig, seed: u64) -> Result<ToyCorpus> {
    if cfg.families.is_empty() || cfg.variants_per_family == 0 {
        return Err(Error::InvalidConfig("corpus has zero variants".into()));
    }
    if cfg.variants_per_family > 4 {
        return Err(Error::InvalidConfig(format!(
            "at most 4 variants per family, got {}",
            cfg.variants_per_family
        )));
    }
    if cfg.clips_per_variant == 0 || cfg.clip_seconds <= 0.0 {
        return Err(Error::InvalidConfig(
            "clips_per_variant and clip_seconds must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction)
        || !(0.0..=1.0).contains(&cfg.pool_fraction)
        || cfg.train_fraction + cfg.pool_fraction > 1.0
    {
        return Err(Error::InvalidConfig("split fractions must sum to <= 1".into()));
    }

    let mut entries = Vec::new();
    let mut waveforms = Vec::new();
    let n_samples = (cfg.clip_seconds * cfg.sample_rate as f64).round() as usize;
    for fam_name in &cfg.families {
        let fi = FAMILIES
            .iter()
            .position(|f| f.name == fam_name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown family {fam_name:?}")))?;
        let fam = &FAMILIES[fi];
        for (vi, variant) in fam.variants.iter().take(cfg.variants_per_family).enumerate() {
            let n = cfg.clips_per_variant;
            let n_pool = ((n as f64) * cfg.pool_fraction).round() as usize;
            let n_train = if cfg.zero_shot_variants.iter().any(|v| v == variant.name) {
                0
            } else if cfg.few_shot_variants.iter().any(|v| v == variant.name) {
                cfg.few_shot_train_clips
            } else {
                ((n as f64) * cfg.train_fraction).round() as usize
            }
            .min(n - n_pool.min(n));
            let tags = TagPath(vec![
                fam.category.to_string(),
                fam.name.to_string(),
                variant.name.to_string(),
            ]);
            for ci in 0..n {
                let clip_seed = derive_seed(seed, &[fi as u64, vi as u64, ci as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
                let (samples, gain) =
                    synthesize_event(variant.kind, n_samples, cfg.sample_rate, cfg.jitter, &mut rng);
                let modifier = if gain < 0.38 {
                    "soft"
                } else if gain > 0.62 {
                    "loud"
                } else {
                    "clear"
                };
                let split = if ci < n_train {
                    Split::Train
                } else if ci < n_train + n_pool {
                    Split::Pool
                } else {
                    Split::Test
                };
                let id = format!("{}-{:04}", variant.name, ci);
                entries.push(ClipManifestEntry {
                    wav_path: format!("wavs/{id}.wav"),
                    id,
                    caption: format!(
                        "a {modifier} {} {} sound",
                        variant.name, fam.caption_word
                    ),
                    tags: tags.clone(),
                    split,
                });
                waveforms.push(Waveform::new(samples, cfg.sample_rate)?.quantized());
            }
        }
    }
    Ok(ToyCorpus { entries, waveforms })
}

fn synthesize_event(
    kind: EventKind,
    n: usize,
    sr: u32,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, f64) {
    let sr = sr as f64;
    let nyq = sr / 2.0 * 0.95;
    let j = |rng: &mut ChaCha8Rng| 1.0 + jitter * (2.0 * rng.random::<f64>() - 1.0);
    let gain = rng.random_range(0.2..0.8);
    let dur = n as f64 / sr;
    let onset = rng.random_range(0.0..0.12) * dur;
    let length = rng.random_range(0.7..0.85) * dur;
    let mut out = vec![0.0f64; n];
    match kind {
        EventKind::Tone { freq } => {
            let f = (freq * j(rng)).min(nyq);
            let phase0 = rng.random::<f64>() * 2.0 * PI;
            for (i, o) in out.iter_mut().enumerate() {
                *o = (2.0 * PI * f * i as f64 / sr + phase0).sin();
            }
        }
        EventKind::Sweep { from, to } => {
            let s = j(rng);
            let (f0, f1) = ((from * s).min(nyq), (to * s).min(nyq));
            let start = (onset * sr) as usize;
            let len = (length * sr).max(1.0);
            let mut phase = 0.0;
            for (i, o) in out.iter_mut().enumerate() {
                let u = ((i.saturating_sub(start)) as f64 / len).min(1.0);
                let f = f0 * (f1 / f0).powf(u);
                phase += 2.0 * PI * f / sr;
                *o = phase.sin();
            }
        }
        EventKind::Trill { center, depth, rate } => {
            let c = center * j(rng);
            let r = rate * j(rng);
            let mut phase = 0.0;
            for (i, o) in out.iter_mut().enumerate() {
                let f = c * (1.0 + depth * (2.0 * PI * r * i as f64 / sr).sin());
                phase += 2.0 * PI * f.min(nyq) / sr;
                *o = phase.sin();
            }
        }
        EventKind::Noise { lo, hi } => {
            let s = j(rng);
            let (lo, hi) = ((lo * s).min(nyq * 0.9), (hi * s).min(nyq));
            let white: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let mut hp = Biquad::highpass(lo, sr);
            let mut lp = Biquad::lowpass(hi, sr);
            let mut hp2 = Biquad::highpass(lo, sr);
            let mut lp2 = Biquad::lowpass(hi, sr);
            let filtered: Vec<f64> = white
                .iter()
                .map(|&x| lp2.step(hp2.step(lp.step(hp.step(x)))))
                .collect();
            let rms = (filtered.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt().max(1e-9);
            for (o, x) in out.iter_mut().zip(filtered) {
                *o = 0.5 * x / rms;
            }
        }
        EventKind::Am { freq, rate, square } => {
            let f = (freq * j(rng)).min(nyq);
            let r = rate * j(rng);
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let m = (2.0 * PI * r * t).sin();
                let env = if square {
                    if m >= 0.0 {
                        1.0
                    } else {
                        0.05
                    }
                } else {
                    0.5 * (1.0 + m)
                };
                *o = env * (2.0 * PI * f * t).sin();
            }
        }
        EventKind::Clicks { rate, resonance } => {
            let r = rate * j(rng);
            let f = (resonance * j(rng)).min(nyq);
            let tau = 0.004 + 4.0 / f;
            let period = (sr / r) as usize;
            let offset = rng.random_range(0..period.max(1));
            let ring = (tau * 6.0 * sr) as usize;
            let mut k = offset;
            while k < n {
                for m in 0..ring.min(n - k) {
                    let t = m as f64 / sr;
                    out[k + m] += (-t / tau).exp() * (2.0 * PI * f * t).sin();
                }
                k += period.max(1);
            }
        }
        EventKind::Stack { f0, ratios, decay } => {
            let f0 = f0 * j(rng);
            for (h, ratio) in ratios.iter().enumerate() {
                let f = f0 * ratio;
                if f >= nyq {
                    break;
                }
                let a = decay.powi(h as i32);
                let p = rng.random::<f64>() * 2.0 * PI;
                for (i, o) in out.iter_mut().enumerate() {
                    *o += a * (2.0 * PI * f * i as f64 / sr + p).sin();
                }
            }
            let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-9);
            out.iter_mut().for_each(|o| *o /= peak);
        }
    }
    // Gate with 10 ms ramps, then add a faint background.
    let ramp = 0.01 * sr;
    let (a, b) = (onset * sr, (onset + length) * sr);
    for (i, o) in out.iter_mut().enumerate() {
        let x = i as f64;
        let env = if x < a || x > b {
            0.0
        } else {
            ((x - a) / ramp).min((b - x) / ramp).min(1.0)
        };
        *o = gain * env * *o + 3e-4 * rng.sample::<f64, _>(StandardNormal);
    }
    (out.into_iter().map(|x| x as f32).collect(), gain)
}

/// RBJ cookbook biquad (Q = 1/sqrt 2).
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
}

impl Biquad {
    fn new(freq: f64, sr: f64, high: bool) -> Self {
        let w0 = 2.0 * PI * freq / sr;
        let alpha = w0.sin() / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let cos = w0.cos();
        let a0 = 1.0 + alpha;
        let b = if high {
            [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0]
        } else {
            [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0]
        };
        Self {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
            x: [0.0; 2],
            y: [0.0; 2],
        }
    }

    fn lowpass(freq: f64, sr: f64) -> Self {
        Self::new(freq, sr, false)
    }

    fn highpass(freq: f64, sr: f64) -> Self {
        Self::new(freq, sr, true)
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.b[1] * self.x[0] + self.b[2] * self.x[1]
            - self.a[0] * self.y[0]
            - self.a[1] * self.y[1];
        self.x = [x, self.x[0]];
        self.y = [y, self.y[0]];
        y
    }
}

/// Occurrences of each leaf tag in a (training) manifest.
pub fn count_leaf_tags(manifest: &[ClipManifestEntry]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for e in manifest {
        *counts.entry(e.leaf().to_string()).or_insert(0) += 1;
    }
    counts
}

#[derive(Clone, Debug, Default)]
pub struct CuratedSplits {
    pub zero_shot: Vec<ClipManifestEntry>,
    pub few_shot: Vec<ClipManifestEntry>,
    /// Candidates whose leaf is common in training (in-domain test clips).
    pub in_domain: Vec<ClipManifestEntry>,
}

/// Leaf-tag rule: unseen leaves are zero-shot, leaves seen `1..threshold` times are
/// few-shot. Returned entries carry their new split.
pub fn curate_splits(
    candidates: &[ClipManifestEntry],
    train: &[ClipManifestEntry],
    few_shot_threshold: usize,
) -> Result<CuratedSplits> {
    let train_ids: HashSet<&str> = train.iter().map(|e| e.id.as_str()).collect();
    if let Some(leak) = candidates.iter().find(|c| train_ids.contains(c.id.as_str())) {
        return Err(Error::Leakage(leak.id.clone()));
    }
    let counts = count_leaf_tags(train);
    let mut out = CuratedSplits::default();
    for c in candidates {
        let n = counts.get(c.leaf()).copied().unwrap_or(0);
        let mut e = c.clone();
        if n == 0 {
            e.split = Split::ZeroShot;
            out.zero_shot.push(e);
        } else if n < few_shot_threshold {
            e.split = Split::FewShot;
            out.few_shot.push(e);
        } else {
            e.split = Split::Test;
            out.in_domain.push(e);
        }
    }
    Ok(out)
}
