//! Synthetic soundscapes: archetype events over a noise floor, labelled and
//! rated by a fixed rule.
//!
//! Annoyance of a clip is
//! `clamp(2 + Σ weight(archetype present) + 1.5 · norm(L_Aeq), 1, 10)` where
//! `norm` maps `[laeq.lo_db, laeq.hi_db]` linearly onto `[0, 1]` (clamped) and
//! L_Aeq is measured on the 16-bit quantized clip. Each archetype counts once
//! per clip however many of its events occur.
//!
//! Config files are `key = value` lines; `#` starts a comment. Keys:
//! `sample_rate`, `clip_seconds`, `clips.train`, `clips.val`, `clips.test`,
//! `events.min`, `events.max`, `event.min_s`, `event.max_s`, `level.lo_db`,
//! `level.hi_db`, `noise_floor_db`, `laeq.lo_db`, `laeq.hi_db`,
//! `noise_clips_per_source`, `noise.level_db`, `archetypes` (comma list of
//! names), and per archetype `family.<name>`, `label.<name>`, `weight.<name>`.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{
    label_index, save_manifest, wav, write_wav, AudioClip, AudioError, ClipRecord, DatasetManifest, Split,
    CANONICAL_RATE, CLIP_SECONDS, NOISE_SECONDS, N_CLASSES, SOURCE_LABELS,
};
use crate::features::a_weighted_leq;

/// Signal families an archetype can be rendered from.
pub const FAMILIES: [&str; 8] = [
    "engine",
    "bird",
    "water_drip",
    "siren",
    "horn",
    "speech",
    "rustling",
    "construction",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Archetype {
    pub name: String,
    pub family: String,
    /// Index into [`SOURCE_LABELS`].
    pub label: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub clip_seconds: f64,
    pub clips_train: usize,
    pub clips_val: usize,
    pub clips_test: usize,
    pub events_min: usize,
    pub events_max: usize,
    pub event_min_s: f64,
    pub event_max_s: f64,
    pub level_lo_db: f64,
    pub level_hi_db: f64,
    pub noise_floor_db: f64,
    pub laeq_lo_db: f64,
    pub laeq_hi_db: f64,
    pub noise_clips_per_source: usize,
    pub noise_level_db: f64,
    pub archetypes: Vec<Archetype>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let arch = |name: &str, label: &str, weight: f64| Archetype {
            name: name.into(),
            family: name.into(),
            label: label_index(label).expect("known label"),
            weight,
        };
        Self {
            sample_rate: CANONICAL_RATE,
            clip_seconds: CLIP_SECONDS,
            clips_train: 300,
            clips_val: 50,
            clips_test: 100,
            events_min: 1,
            events_max: 4,
            event_min_s: 4.0,
            event_max_s: 12.0,
            level_lo_db: -45.0,
            level_hi_db: -10.0,
            noise_floor_db: -60.0,
            laeq_lo_db: -50.0,
            laeq_hi_db: -10.0,
            noise_clips_per_source: 4,
            noise_level_db: -20.0,
            archetypes: vec![
                arch("engine", "General traffic", 3.0),
                arch("bird", "Bird tweets", -1.0),
                arch("water_drip", "Water", -1.0),
                arch("siren", "Siren", 2.0),
                arch("horn", "Horn", 2.5),
                arch("speech", "Speech", 0.5),
                arch("rustling", "Rustling leaves", -1.5),
                arch("construction", "Construction", 2.0),
            ],
        }
    }
}

fn parse_val<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, AudioError> {
    v.parse()
        .map_err(|_| AudioError::Config(format!("{key}: cannot parse {v:?}")))
}

impl SynthConfig {
    /// Parses `key = value` text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, AudioError> {
        let mut kv = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AudioError::Config(format!("line {}: expected key = value", no + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_pairs(kv)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, AudioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| AudioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    fn from_pairs(mut kv: BTreeMap<String, String>) -> Result<Self, AudioError> {
        let mut c = Self::default();
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.remove($key) {
                    $field = parse_val($key, &v)?;
                }
            };
        }
        take!("sample_rate", c.sample_rate);
        take!("clip_seconds", c.clip_seconds);
        take!("clips.train", c.clips_train);
        take!("clips.val", c.clips_val);
        take!("clips.test", c.clips_test);
        take!("events.min", c.events_min);
        take!("events.max", c.events_max);
        take!("event.min_s", c.event_min_s);
        take!("event.max_s", c.event_max_s);
        take!("level.lo_db", c.level_lo_db);
        take!("level.hi_db", c.level_hi_db);
        take!("noise_floor_db", c.noise_floor_db);
        take!("laeq.lo_db", c.laeq_lo_db);
        take!("laeq.hi_db", c.laeq_hi_db);
        take!("noise_clips_per_source", c.noise_clips_per_source);
        take!("noise.level_db", c.noise_level_db);
        if let Some(list) = kv.remove("archetypes") {
            let defaults = c.archetypes.clone();
            c.archetypes = list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|name| {
                    defaults.iter().find(|a| a.name == name).cloned().unwrap_or(Archetype {
                        name: name.to_string(),
                        family: name.to_string(),
                        label: label_index("Other").expect("Other"),
                        weight: 0.0,
                    })
                })
                .collect();
        }
        for a in &mut c.archetypes {
            if let Some(v) = kv.remove(&format!("family.{}", a.name)) {
                a.family = v;
            }
            if let Some(v) = kv.remove(&format!("label.{}", a.name)) {
                a.label = label_index(&v)
                    .ok_or_else(|| AudioError::Config(format!("label.{}: unknown source {v:?}", a.name)))?;
            }
            if let Some(v) = kv.remove(&format!("weight.{}", a.name)) {
                a.weight = parse_val("weight", &v)?;
            }
        }
        if let Some(k) = kv.keys().next() {
            return Err(AudioError::Config(format!("unknown key {k:?}")));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        let bad = |m: String| Err(AudioError::Config(m));
        if self.archetypes.is_empty() {
            return bad("no archetypes configured".into());
        }
        if self.archetypes.len() > N_CLASSES {
            return bad(format!("{} archetypes, at most {N_CLASSES}", self.archetypes.len()));
        }
        let mut names = HashSet::new();
        for a in &self.archetypes {
            if !FAMILIES.contains(&a.family.as_str()) {
                return bad(format!("archetype {}: unknown family {}", a.name, a.family));
            }
            if !names.insert(&a.name) {
                return bad(format!("duplicate archetype {}", a.name));
            }
            if !a.weight.is_finite() {
                return bad(format!("archetype {}: weight", a.name));
            }
        }
        if self.sample_rate == 0 || self.clip_seconds <= 0.0 {
            return bad("sample_rate and clip_seconds must be positive".into());
        }
        if self.events_min > self.events_max {
            return bad("events.min > events.max".into());
        }
        if !(0.0 < self.event_min_s && self.event_min_s <= self.event_max_s) {
            return bad("event durations".into());
        }
        if self.level_lo_db > self.level_hi_db || self.laeq_lo_db >= self.laeq_hi_db {
            return bad("level ranges".into());
        }
        Ok(())
    }

    /// The resolved configuration in the same key-value format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sample_rate = {}", self.sample_rate);
        let _ = writeln!(s, "clip_seconds = {}", self.clip_seconds);
        let _ = writeln!(s, "clips.train = {}", self.clips_train);
        let _ = writeln!(s, "clips.val = {}", self.clips_val);
        let _ = writeln!(s, "clips.test = {}", self.clips_test);
        let _ = writeln!(s, "events.min = {}", self.events_min);
        let _ = writeln!(s, "events.max = {}", self.events_max);
        let _ = writeln!(s, "event.min_s = {}", self.event_min_s);
        let _ = writeln!(s, "event.max_s = {}", self.event_max_s);
        let _ = writeln!(s, "level.lo_db = {}", self.level_lo_db);
        let _ = writeln!(s, "level.hi_db = {}", self.level_hi_db);
        let _ = writeln!(s, "noise_floor_db = {}", self.noise_floor_db);
        let _ = writeln!(s, "laeq.lo_db = {}", self.laeq_lo_db);
        let _ = writeln!(s, "laeq.hi_db = {}", self.laeq_hi_db);
        let _ = writeln!(s, "noise_clips_per_source = {}", self.noise_clips_per_source);
        let _ = writeln!(s, "noise.level_db = {}", self.noise_level_db);
        let names: Vec<&str> = self.archetypes.iter().map(|a| a.name.as_str()).collect();
        let _ = writeln!(s, "archetypes = {}", names.join(","));
        for a in &self.archetypes {
            let _ = writeln!(s, "family.{} = {}", a.name, a.family);
            let _ = writeln!(s, "label.{} = {}", a.name, SOURCE_LABELS[a.label]);
            let _ = writeln!(s, "weight.{} = {}", a.name, a.weight);
        }
        s
    }

    pub fn archetype(&self, name: &str) -> Option<&Archetype> {
        self.archetypes.iter().find(|a| a.name == name)
    }

    /// Annoyance rule applied to a set of present archetypes and a measured level.
    pub fn annoyance(&self, present: &[usize], laeq_db: f64) -> f64 {
        let w: f64 = present.iter().map(|&i| self.archetypes[i].weight).sum();
        let norm = ((laeq_db - self.laeq_lo_db) / (self.laeq_hi_db - self.laeq_lo_db)).clamp(0.0, 1.0);
        let a = (2.0 + w + 1.5 * norm).clamp(1.0, 10.0);
        (a * 1e6).round() / 1e6
    }
}

/// Seed for one clip: FNV-1a of the id folded into the dataset seed, then splitmix64.
pub fn clip_seed(seed: u64, clip_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in clip_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    z: [f64; 2],
}

impl Biquad {
    fn bandpass(f0: f64, q: f64, rate: f64) -> Self {
        let w0 = 2.0 * PI * f0 / rate;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    fn lowpass(f0: f64, q: f64, rate: f64) -> Self {
        let w0 = 2.0 * PI * f0 / rate;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 - c) / 2.0 / a0, (1.0 - c) / a0, (1.0 - c) / 2.0 / a0],
            a: [-2.0 * c / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    fn run(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn add_partials(out: &mut [f64], phase_inc: impl Fn(usize) -> f64, amps: &[f64]) {
    let mut phase = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        phase += phase_inc(i);
        *o += amps
            .iter()
            .enumerate()
            .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
            .sum::<f64>();
    }
}

/// Renders `n` samples of one archetype family at unit RMS.
pub fn render_family<R: Rng>(family: &str, rng: &mut R, n: usize, rate: u32) -> Vec<f64> {
    let fs = rate as f64;
    let mut x = vec![0.0; n];
    match family {
        "engine" => {
            let f0 = rng.gen_range(35.0..80.0);
            let fm = rng.gen_range(8.0..25.0);
            let drift = rng.gen_range(0.1..0.4);
            let amps: Vec<f64> = (1..=12).map(|h| 1.0 / h as f64).collect();
            add_partials(
                &mut x,
                |i| {
                    let t = i as f64 / fs;
                    2.0 * PI * f0 * (1.0 + 0.05 * (2.0 * PI * drift * t).sin()) / fs
                },
                &amps,
            );
            let mut lp = Biquad::lowpass(300.0, 0.7, fs);
            for (i, v) in x.iter_mut().enumerate() {
                let t = i as f64 / fs;
                *v = *v * (1.0 + 0.3 * (2.0 * PI * fm * t).sin()) + 2.0 * lp.run(gauss(rng));
            }
        }
        "bird" => {
            let mut t0 = rng.gen_range(0.0..0.3);
            while t0 < n as f64 / fs {
                let dur = rng.gen_range(0.05..0.15);
                let f1 = rng.gen_range(2500.0..5000.0);
                let f2 = f1 * rng.gen_range(1.2..1.6);
                let start = (t0 * fs) as usize;
                let len = ((dur * fs) as usize).min(n.saturating_sub(start));
                let mut phase = 0.0;
                for k in 0..len {
                    let u = k as f64 / len as f64;
                    phase += 2.0 * PI * (f1 + (f2 - f1) * u) / fs;
                    x[start + k] += (PI * u).sin().powi(2) * phase.sin();
                }
                t0 += dur + rng.gen_range(0.1..0.5);
            }
        }
        "water_drip" => {
            let mut t0 = rng.gen_range(0.0..0.2);
            let mut bp = Biquad::bandpass(rng.gen_range(1000.0..2000.0), 2.0, fs);
            for v in x.iter_mut() {
                *v = 0.05 * bp.run(gauss(rng));
            }
            while t0 < n as f64 / fs {
                let f = rng.gen_range(800.0..1500.0);
                let start = (t0 * fs) as usize;
                let len = ((0.08 * fs) as usize).min(n.saturating_sub(start));
                let mut phase = 0.0;
                for k in 0..len {
                    let t = k as f64 / fs;
                    phase += 2.0 * PI * f * (1.0 + (t / 0.03).min(1.0)) / fs;
                    x[start + k] += (-t / 0.015).exp() * phase.sin();
                }
                t0 += rng.gen_range(0.1..0.5);
            }
        }
        "siren" => {
            let fc = rng.gen_range(900.0..1100.0);
            let dev = rng.gen_range(200.0..400.0);
            let fm = rng.gen_range(0.3..1.0);
            add_partials(
                &mut x,
                |i| 2.0 * PI * (fc + dev * (2.0 * PI * fm * i as f64 / fs).sin()) / fs,
                &[1.0, 0.4, 0.2],
            );
        }
        "horn" => {
            let f0 = rng.gen_range(300.0..500.0);
            let amps: Vec<f64> = (1..=6).map(|h| 1.0 / h as f64).collect();
            let mut tone = vec![0.0; n];
            add_partials(&mut tone, |_| 2.0 * PI * f0 / fs, &amps);
            let mut t = rng.gen_range(0.0..0.3);
            while t < n as f64 / fs {
                let on = rng.gen_range(0.3..1.2);
                let (a, b) = ((t * fs) as usize, (((t + on) * fs) as usize).min(n));
                x[a..b].copy_from_slice(&tone[a..b]);
                t += on + rng.gen_range(0.2..1.0);
            }
        }
        "speech" => {
            let f0 = rng.gen_range(100.0..220.0);
            let rate_syl = rng.gen_range(3.0..5.0);
            let mut formants: Vec<Biquad> = Vec::new();
            let syl = (fs / rate_syl) as usize;
            let mut phase = 0.0;
            for (i, v) in x.iter_mut().enumerate() {
                if i % syl == 0 {
                    formants = vec![
                        Biquad::bandpass(rng.gen_range(300.0..800.0), 5.0, fs),
                        Biquad::bandpass(rng.gen_range(900.0..2200.0), 6.0, fs),
                        Biquad::bandpass(2500.0, 8.0, fs),
                    ];
                }
                phase += 2.0 * PI * f0 / fs;
                let src = if phase.sin() > 0.95 { 1.0 } else { 0.0 } + 0.2 * gauss(rng);
                let env = (PI * (i % syl) as f64 / syl as f64).sin();
                *v = env * formants.iter_mut().map(|f| f.run(src)).sum::<f64>();
            }
        }
        "rustling" => {
            let mut bp = Biquad::bandpass(rng.gen_range(4000.0..6000.0), 0.7, fs);
            let mut env_lp = Biquad::lowpass(3.0, 0.7, fs);
            for v in x.iter_mut() {
                let e = (1.0 + 40.0 * env_lp.run(gauss(rng))).max(0.0);
                *v = e * bp.run(gauss(rng));
            }
        }
        "construction" => {
            let ring = rng.gen_range(1500.0..3000.0);
            let mut t0 = rng.gen_range(0.0..0.2);
            while t0 < n as f64 / fs {
                let start = (t0 * fs) as usize;
                let len = ((0.3 * fs) as usize).min(n.saturating_sub(start));
                for k in 0..len {
                    let t = k as f64 / fs;
                    x[start + k] +=
                        (-t / 0.03).exp() * gauss(rng) + 0.5 * (-t / 0.08).exp() * (2.0 * PI * ring * t).sin();
                }
                t0 += 1.0 / rng.gen_range(2.0..5.0);
            }
        }
        other => unreachable!("unvalidated family {other}"),
    }
    let r = super::rms(&x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v /= r);
    }
    x
}

fn fade(x: &mut [f64], len: usize) {
    let len = len.min(x.len() / 2);
    let n = x.len();
    for k in 0..len {
        let g = k as f64 / len as f64;
        x[k] *= g;
        x[n - 1 - k] *= g;
    }
}

/// One generated clip before it is written.
#[derive(Clone, Debug)]
pub struct SynthClip {
    pub clip: AudioClip,
    pub labels: [bool; N_CLASSES],
    /// Indices into the config's archetypes, sorted, each once.
    pub present: Vec<usize>,
    pub laeq_db: f64,
    pub annoyance: f64,
}

/// Renders a clip; the audio is already 16-bit quantized so the level and
/// rating match what a reader of the WAV file sees.
pub fn synthesize_clip(config: &SynthConfig, seed: u64, clip_id: &str) -> SynthClip {
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(seed, clip_id));
    let rate = config.sample_rate;
    let n = (config.clip_seconds * rate as f64).round() as usize;
    let floor = 10f64.powf(config.noise_floor_db / 20.0);
    let mut lp = Biquad::lowpass(2000.0, 0.7, rate as f64);
    let mut x: Vec<f64> = (0..n).map(|_| lp.run(gauss(&mut rng))).collect();
    let r = super::rms(&x).max(f64::MIN_POSITIVE);
    x.iter_mut().for_each(|v| *v *= floor / r);

    let events = rng.gen_range(config.events_min..=config.events_max);
    let mut present = Vec::new();
    for _ in 0..events {
        let a = rng.gen_range(0..config.archetypes.len());
        let dur = rng
            .gen_range(config.event_min_s..=config.event_max_s)
            .min(config.clip_seconds);
        let len = ((dur * rate as f64) as usize).clamp(1, n);
        let start = rng.gen_range(0..=n - len);
        let level = 10f64.powf(rng.gen_range(config.level_lo_db..=config.level_hi_db) / 20.0);
        let mut ev = render_family(&config.archetypes[a].family, &mut rng, len, rate);
        fade(&mut ev, (0.02 * rate as f64) as usize);
        for (o, v) in x[start..start + len].iter_mut().zip(&ev) {
            *o += level * v;
        }
        present.push(a);
    }
    present.sort_unstable();
    present.dedup();
    for v in x.iter_mut() {
        *v = wav::quantize(*v) as f64 / 32768.0;
    }
    let clip = AudioClip::new(x, rate);
    let laeq_db = a_weighted_leq(&clip).laeq_db;
    let mut labels = [false; N_CLASSES];
    for &a in &present {
        labels[config.archetypes[a].label] = true;
    }
    SynthClip {
        annoyance: config.annoyance(&present, laeq_db),
        clip,
        labels,
        present,
        laeq_db,
    }
}

/// A five-second segment of a single archetype for the mixing harness.
pub fn noise_segment(config: &SynthConfig, seed: u64, archetype: &Archetype, k: usize) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(seed, &format!("noise/{}/{k}", archetype.name)));
    let n = (NOISE_SECONDS * config.sample_rate as f64).round() as usize;
    let level = 10f64.powf(config.noise_level_db / 20.0);
    let mut x = render_family(&archetype.family, &mut rng, n, config.sample_rate);
    fade(&mut x, (0.02 * config.sample_rate as f64) as usize);
    for v in x.iter_mut() {
        *v = wav::quantize(*v * level) as f64 / 32768.0;
    }
    AudioClip::new(x, config.sample_rate)
}

pub struct SynthOutput {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
    /// Noise segment paths per archetype name.
    pub noise: BTreeMap<String, Vec<PathBuf>>,
}

impl SynthOutput {
    pub fn split(&self, split: Split) -> &DatasetManifest {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Writes `audio/<clip_id>.wav`, `noise/<archetype>/<k>.wav`, `train.csv`,
/// `val.csv`, `test.csv` and `synth.conf` under `out_dir`.
pub fn generate_synthetic_dataset(
    config: &SynthConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<SynthOutput, AudioError> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let mkdir = |p: &Path| {
        std::fs::create_dir_all(p).map_err(|source| AudioError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    mkdir(&out_dir.join("audio"))?;
    let conf_path = out_dir.join("synth.conf");
    std::fs::write(&conf_path, format!("# seed = {seed}\n{}", config.to_text())).map_err(|source| AudioError::Io {
        path: conf_path.clone(),
        source,
    })?;

    let mut manifests = Vec::new();
    for (split, count) in [
        (Split::Train, config.clips_train),
        (Split::Val, config.clips_val),
        (Split::Test, config.clips_test),
    ] {
        let records = (0..count)
            .into_par_iter()
            .map(|i| {
                let id = format!("{}_{i:05}", split.name());
                let c = synthesize_clip(config, seed, &id);
                let rel = PathBuf::from("audio").join(format!("{id}.wav"));
                write_wav(&c.clip, out_dir.join(&rel))?;
                Ok(ClipRecord {
                    clip_id: id,
                    path: rel,
                    labels: c.labels,
                    annoyance: c.annoyance,
                })
            })
            .collect::<Result<Vec<_>, AudioError>>()?;
        let m = DatasetManifest::new(split, records, out_dir);
        save_manifest(&m, out_dir.join(format!("{}.csv", split.name())))?;
        manifests.push(m);
    }

    let mut noise = BTreeMap::new();
    for a in &config.archetypes {
        let dir = out_dir.join("noise").join(&a.name);
        mkdir(&dir)?;
        let mut paths = Vec::new();
        for k in 0..config.noise_clips_per_source {
            let p = dir.join(format!("{k}.wav"));
            write_wav(&noise_segment(config, seed, a, k), &p)?;
            paths.push(p);
        }
        noise.insert(a.name.clone(), paths);
    }
    let test = manifests.pop().expect("three splits");
    let val = manifests.pop().expect("three splits");
    let train = manifests.pop().expect("three splits");
    Ok(SynthOutput {
        train,
        val,
        test,
        noise,
    })
}
