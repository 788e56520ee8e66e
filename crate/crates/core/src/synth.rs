//! Synthetic sequence-set data with identity, walking condition and view
//! structure, plus the three label-corruption constructions.
//!
//! Feature space layout (for the default `d_in = 16`):
//!
//! * identity subspace (dims 0..8): unit identity prototype, a per-identity
//!   gait oscillation and, for `CL`, an identity-specific shift; rotated by a
//!   view-indexed rotation,
//! * appearance subspace (dims 8..12): a fixed bag offset for `BG` and a
//!   large identity-specific clothing offset for `CL`,
//! * nuisance subspace (dims 12..16): a large per-sequence offset that makes
//!   raw features poor for retrieval until an encoder learns to ignore it.
//!
//! Every frame also gets isotropic Gaussian jitter.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{RngStream, Vec64};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    NM,
    BG,
    CL,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::NM, Condition::BG, Condition::CL];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::NM => "NM",
            Condition::BG => "BG",
            Condition::CL => "CL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFlag {
    Clean,
    LabelNoise,
    AugmentationNoise,
    SplitNoise,
}

impl NoiseFlag {
    /// Whether the assigned label differs from the true identity.
    pub fn is_label_corrupting(&self) -> bool {
        matches!(self, NoiseFlag::LabelNoise | NoiseFlag::SplitNoise)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    /// Assigned (possibly corrupted) identity label.
    pub id: usize,
    /// Ground-truth identity; for diagnostics only.
    pub clean_id: usize,
    pub condition: Condition,
    /// Index of the recording group within its condition (NM#1 is 0).
    pub group: usize,
    pub view: usize,
    pub noise_flag: NoiseFlag,
    pub frames: Vec<Vec64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Size of the label space.
    pub n_ids: usize,
    pub samples: Vec<SequenceSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by assigned identity.
    pub fn by_identity(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.id).or_default().push(i);
        }
        map
    }

    pub fn noisy_count(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.noise_flag != NoiseFlag::Clean)
            .count()
    }
}

/// Recording groups per identity and view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionMix {
    pub nm: usize,
    pub bg: usize,
    pub cl: usize,
}

impl Default for ConditionMix {
    fn default() -> Self {
        Self { nm: 6, bg: 2, cl: 2 }
    }
}

impl ConditionMix {
    pub fn groups(&self) -> Vec<(Condition, usize)> {
        let mut out = Vec::new();
        for (cond, n) in [(Condition::NM, self.nm), (Condition::BG, self.bg), (Condition::CL, self.cl)] {
            out.extend((0..n).map(|g| (cond, g)));
        }
        out
    }

    pub fn total(&self) -> usize {
        self.nm + self.bg + self.cl
    }
}

/// Generator parameters; together with the seed they determine a dataset
/// byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_ids: usize,
    pub views: usize,
    pub groups: ConditionMix,
    pub min_frames: usize,
    pub max_frames: usize,
    pub d_in: usize,
    pub seed: u64,
    /// Per-frame Gaussian jitter (std).
    pub jitter: f64,
    /// Per-sequence nuisance offset (std).
    pub nuisance: f64,
    pub gait_amplitude: f64,
    pub bg_offset: f64,
    pub cl_offset: f64,
    pub cl_identity_shift: f64,
    /// Rotation per view step, radians.
    pub view_angle: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_ids: 60,
            views: 4,
            groups: ConditionMix::default(),
            min_frames: 30,
            max_frames: 30,
            d_in: 16,
            seed: 1,
            jitter: 0.25,
            nuisance: 2.5,
            gait_amplitude: 0.3,
            bg_offset: 0.4,
            cl_offset: 1.0,
            cl_identity_shift: 0.35,
            view_angle: 0.3,
        }
    }
}

/// Index ranges of the three feature subspaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub identity: (usize, usize),
    pub appearance: (usize, usize),
    pub nuisance: (usize, usize),
}

impl Layout {
    pub fn for_dim(d_in: usize) -> Self {
        let id = (d_in / 2).max(1);
        let app = (d_in / 4).max(1).min(d_in - id);
        Self {
            identity: (0, id),
            appearance: (id, id + app),
            nuisance: (id + app, d_in),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ids < 2 {
            return Err(Error::invalid("need at least two identities"));
        }
        if self.views == 0 {
            return Err(Error::invalid("need at least one view"));
        }
        if self.groups.total() == 0 {
            return Err(Error::invalid("need at least one recording group"));
        }
        if self.min_frames == 0 || self.max_frames < self.min_frames {
            return Err(Error::invalid("invalid frames-per-sequence range"));
        }
        if self.d_in < 4 {
            return Err(Error::invalid("d_in must be at least 4"));
        }
        let scales = [
            self.jitter,
            self.nuisance,
            self.gait_amplitude,
            self.bg_offset,
            self.cl_offset,
            self.cl_identity_shift,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || !self.view_angle.is_finite() {
            return Err(Error::invalid("generator scales must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::for_dim(self.d_in)
    }
}

const GLOBAL_STREAM: u64 = 0x5eed_0001;

fn unit_in(rng: &mut RngStream, d: usize, range: (usize, usize)) -> Vec64 {
    let mut v = vec![0.0; d];
    loop {
        for x in &mut v[range.0..range.1] {
            *x = rng.normal();
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

struct Geometry {
    layout: Layout,
    bg_dir: Vec64,
    pair_rates: Vec<f64>,
}

impl Geometry {
    fn new(cfg: &GeneratorConfig) -> Self {
        let layout = cfg.layout();
        let mut rng = RngStream::new(cfg.seed, GLOBAL_STREAM);
        let bg_dir = unit_in(&mut rng, cfg.d_in, layout.appearance);
        let pairs = (layout.identity.1 - layout.identity.0) / 2;
        let pair_rates = (0..pairs).map(|_| rng.uniform_range(0.5, 1.5)).collect();
        Self {
            layout,
            bg_dir,
            pair_rates,
        }
    }

    /// Rotates consecutive identity-dimension pairs by view-dependent angles.
    fn rotate(&self, x: &mut [f64], view: usize, step: f64) {
        let base = self.layout.identity.0;
        for (k, rate) in self.pair_rates.iter().enumerate() {
            let angle = view as f64 * step * rate;
            let (s, c) = angle.sin_cos();
            let (i, j) = (base + 2 * k, base + 2 * k + 1);
            let (a, b) = (x[i], x[j]);
            x[i] = c * a - s * b;
            x[j] = s * a + c * b;
        }
    }
}

struct IdentityTraits {
    prototype: Vec64,
    gait_dir: Vec64,
    cl_shift: Vec64,
    cl_appearance: Vec64,
}

fn identity_traits(cfg: &GeneratorConfig, layout: &Layout, id: usize) -> IdentityTraits {
    let mut rng = RngStream::new(cfg.seed, GLOBAL_STREAM).substream(1 + id as u64);
    IdentityTraits {
        prototype: unit_in(&mut rng, cfg.d_in, layout.identity),
        gait_dir: unit_in(&mut rng, cfg.d_in, layout.identity),
        cl_shift: unit_in(&mut rng, cfg.d_in, layout.identity),
        cl_appearance: unit_in(&mut rng, cfg.d_in, layout.appearance),
    }
}

fn make_sequence(
    cfg: &GeneratorConfig,
    geo: &Geometry,
    traits: &IdentityTraits,
    id: usize,
    condition: Condition,
    group: usize,
    view: usize,
    seq_index: usize,
) -> SequenceSample {
    let d = cfg.d_in;
    let mut rng = RngStream::new(cfg.seed, GLOBAL_STREAM)
        .substream(1 + id as u64)
        .substream(1 + seq_index as u64);
    let n_frames = cfg.min_frames + rng.below(cfg.max_frames - cfg.min_frames + 1);

    let mut base = traits.prototype.clone();
    match condition {
        Condition::NM => {}
        Condition::BG => {
            for k in 0..d {
                base[k] += cfg.bg_offset * geo.bg_dir[k];
            }
        }
        Condition::CL => {
            for k in 0..d {
                base[k] += cfg.cl_offset * traits.cl_appearance[k]
                    + cfg.cl_identity_shift * traits.cl_shift[k];
            }
        }
    }
    let (n0, n1) = geo.layout.nuisance;
    for x in &mut base[n0..n1] {
        *x += cfg.nuisance * rng.normal();
    }
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let period = 8.0 + 4.0 * rng.uniform();

    let frames = (0..n_frames)
        .map(|t| {
            let gait = cfg.gait_amplitude * (phase + std::f64::consts::TAU * t as f64 / period).sin();
            let mut x: Vec64 = (0..d)
                .map(|k| base[k] + gait * traits.gait_dir[k] + cfg.jitter * rng.normal())
                .collect();
            geo.rotate(&mut x, view, cfg.view_angle);
            x
        })
        .collect();
    SequenceSample {
        id,
        clean_id: id,
        condition,
        group,
        view,
        noise_flag: NoiseFlag::Clean,
        frames,
    }
}

/// Generates the clean dataset described by `cfg`. Sequences are ordered by
/// identity, then recording group, then view.
pub fn make_clean_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let geo = Geometry::new(cfg);
    let groups = cfg.groups.groups();
    let mut samples = Vec::with_capacity(cfg.n_ids * groups.len() * cfg.views);
    for id in 0..cfg.n_ids {
        let traits = identity_traits(cfg, &geo.layout, id);
        let mut seq_index = 0;
        for &(cond, group) in &groups {
            for view in 0..cfg.views {
                samples.push(make_sequence(cfg, &geo, &traits, id, cond, group, view, seq_index));
                seq_index += 1;
            }
        }
    }
    Ok(Dataset {
        n_ids: cfg.n_ids,
        samples,
    })
}

/// Splits by identity: ids `0..n_train` become the training set and the
/// rest the test set, renumbered from 0.
pub fn split_by_identity(data: Dataset, n_train: usize) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_train >= data.n_ids {
        return Err(Error::invalid(format!(
            "cannot split {} identities with {n_train} for training",
            data.n_ids
        )));
    }
    let (train, test): (Vec<_>, Vec<_>) = data.samples.into_iter().partition(|s| s.clean_id < n_train);
    let test = test
        .into_iter()
        .map(|mut s| {
            s.id -= n_train;
            s.clean_id -= n_train;
            s
        })
        .collect();
    Ok((
        Dataset {
            n_ids: n_train,
            samples: train,
        },
        Dataset {
            n_ids: data.n_ids - n_train,
            samples: test,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    Label,
    Augmentation,
    Split,
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" | "random" => Ok(CorruptionKind::Label),
            "aug" | "augmentation" => Ok(CorruptionKind::Augmentation),
            "split" => Ok(CorruptionKind::Split),
            other => Err(Error::invalid(format!("unknown corruption kind '{other}'"))),
        }
    }
}

/// Record of one applied corruption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionDescriptor {
    pub kind: CorruptionKind,
    /// Noise rate for label/augmentation noise, identity fraction for split.
    pub amount: f64,
    pub seed: u64,
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("noise rate {rate} outside [0, 1)")));
    }
    Ok(())
}

const LABEL_NOISE_STREAM: u64 = 0x1abe_1000;
const AUG_NOISE_STREAM: u64 = 0xa060_0000;

/// Relabels exactly `round(rate·n)` sequences, chosen without replacement,
/// to a uniformly drawn identity other than their true one.
pub fn inject_random_label_noise(mut data: Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    check_rate(rate)?;
    let n = data.samples.len();
    let k = (rate * n as f64).round() as usize;
    if k == 0 {
        return Ok(data);
    }
    if data.n_ids < 2 {
        return Err(Error::invalid("label noise needs at least two identities"));
    }
    let mut rng = RngStream::new(seed, LABEL_NOISE_STREAM);
    let mut chosen = rng.sample_indices(n, k);
    chosen.sort_unstable();
    for i in chosen {
        let s = &mut data.samples[i];
        let r = rng.below(data.n_ids - 1);
        s.id = if r < s.clean_id { r } else { r + 1 };
        s.noise_flag = NoiseFlag::LabelNoise;
    }
    Ok(data)
}

/// Applies a strong appearance perturbation to exactly `round(rate·n)`
/// sequences: an amplified condition-style offset in the appearance and
/// identity subspaces plus a per-dimension gain and frame-wise multiplicative
/// distortion. Labels
/// are untouched.
pub fn inject_augmentation_noise(mut data: Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    check_rate(rate)?;
    let n = data.samples.len();
    let k = (rate * n as f64).round() as usize;
    if k == 0 {
        return Ok(data);
    }
    let d = data.samples[0].frames[0].len();
    let layout = Layout::for_dim(d);
    let mut rng = RngStream::new(seed, AUG_NOISE_STREAM);
    let mut chosen = rng.sample_indices(n, k);
    chosen.sort_unstable();
    for i in chosen {
        let mut seq_rng = rng.substream(i as u64);
        let app = unit_in(&mut seq_rng, d, layout.appearance);
        let ident = unit_in(&mut seq_rng, d, layout.identity);
        let gain: Vec64 = (0..d).map(|_| 1.0 + AUG_GAIN * seq_rng.normal()).collect();
        let s = &mut data.samples[i];
        for frame in &mut s.frames {
            for k in 0..d {
                let offset = AUG_APPEARANCE * app[k] + AUG_IDENTITY * ident[k];
                let scale = gain[k] * (1.0 + AUG_MULTIPLICATIVE * seq_rng.normal());
                frame[k] = (frame[k] + offset) * scale;
            }
        }
        s.noise_flag = NoiseFlag::AugmentationNoise;
    }
    Ok(data)
}

const AUG_APPEARANCE: f64 = 2.0;
const AUG_IDENTITY: f64 = 0.8;
const AUG_GAIN: f64 = 0.3;
const AUG_MULTIPLICATIVE: f64 = 0.3;

/// For the first `⌊fraction·n_ids⌋` identities, moves every `CL` sequence
/// to a new identity appended after the existing range and relabels its
/// condition as `NM`.
pub fn inject_identity_split(mut data: Dataset, fraction: f64, _seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("split fraction {fraction} outside [0, 1]")));
    }
    let affected = (fraction * data.n_ids as f64).floor() as usize;
    let mut new_ids: BTreeMap<usize, usize> = BTreeMap::new();
    let base = data.n_ids;
    for s in &mut data.samples {
        if s.condition != Condition::CL || s.id >= affected {
            continue;
        }
        let next = base + new_ids.len();
        let new_id = *new_ids.entry(s.id).or_insert(next);
        s.id = new_id;
        s.condition = Condition::NM;
        s.noise_flag = NoiseFlag::SplitNoise;
    }
    data.n_ids = base + new_ids.len();
    Ok(data)
}

pub fn apply_corruption(data: Dataset, c: &CorruptionDescriptor) -> Result<Dataset> {
    match c.kind {
        CorruptionKind::Label => inject_random_label_noise(data, c.amount, c.seed),
        CorruptionKind::Augmentation => inject_augmentation_noise(data, c.amount, c.seed),
        CorruptionKind::Split => inject_identity_split(data, c.amount, c.seed),
    }
}

/// Everything needed to regenerate a train/test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: GeneratorConfig,
    pub train_ids: usize,
    pub test_ids: usize,
    /// Applied to the training split, in order.
    pub corruptions: Vec<CorruptionDescriptor>,
}

impl DatasetManifest {
    pub fn new(generator: GeneratorConfig, train_ids: usize) -> Self {
        let test_ids = generator.n_ids.saturating_sub(train_ids);
        Self {
            format_version: DATASET_FORMAT_VERSION,
            generator,
            train_ids,
            test_ids,
            corruptions: Vec::new(),
        }
    }

    /// Regenerates `(train, test)`.
    pub fn materialize(&self) -> Result<(Dataset, Dataset)> {
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                "manifest",
                format!("unsupported format version {}", self.format_version),
            ));
        }
        let full = make_clean_dataset(&self.generator)?;
        let (mut train, test) = split_by_identity(full, self.train_ids)?;
        for c in &self.corruptions {
            train = apply_corruption(train, c)?;
        }
        Ok((train, test))
    }
}

#[derive(Serialize, Deserialize)]
struct JsonLine {
    format_version: u32,
    id: usize,
    clean_id: usize,
    condition: Condition,
    group: usize,
    view: usize,
    noise_flag: NoiseFlag,
    frames: Vec<Vec64>,
}

/// One JSON object per sequence.
pub fn write_jsonl<W: Write>(mut out: W, data: &Dataset) -> std::io::Result<()> {
    for s in &data.samples {
        let line = JsonLine {
            format_version: DATASET_FORMAT_VERSION,
            id: s.id,
            clean_id: s.clean_id,
            condition: s.condition,
            group: s.group,
            view: s.view,
            noise_flag: s.noise_flag,
            frames: s.frames.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a dataset file. The label space is `n_ids` when given, otherwise
/// one past the largest label seen.
pub fn read_jsonl<R: BufRead>(input: R, n_ids: Option<usize>) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::format("dataset", e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonLine = serde_json::from_str(&line)
            .map_err(|e| Error::format("dataset", format!("line {}: {e}", lineno + 1)))?;
        if rec.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                "dataset",
                format!("line {}: unsupported format version {}", lineno + 1, rec.format_version),
            ));
        }
        if rec.frames.is_empty() {
            return Err(Error::format("dataset", format!("line {}: empty frame set", lineno + 1)));
        }
        samples.push(SequenceSample {
            id: rec.id,
            clean_id: rec.clean_id,
            condition: rec.condition,
            group: rec.group,
            view: rec.view,
            noise_flag: rec.noise_flag,
            frames: rec.frames,
        });
    }
    let seen = samples.iter().map(|s| s.id.max(s.clean_id) + 1).max().unwrap_or(0);
    let n_ids = n_ids.unwrap_or(seen);
    if seen > n_ids {
        return Err(Error::format("dataset", format!("label {} outside 0..{n_ids}", seen - 1)));
    }
    Ok(Dataset { n_ids, samples })
}

/// Named augmentation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugSpec {
    None,
    /// Frame dropout (p = 0.2, at least 4 frames kept) and jitter (σ = 0.05).
    Standard,
    /// `Standard` plus occasional frame duplication.
    StandardDup,
}

impl std::str::FromStr for AugSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugSpec::None),
            "standard" => Ok(AugSpec::Standard),
            "standard-dup" => Ok(AugSpec::StandardDup),
            other => Err(Error::invalid(format!("unknown augmentation spec '{other}'"))),
        }
    }
}

const DROP_P: f64 = 0.2;
const MIN_KEPT: usize = 4;
const AUG_JITTER: f64 = 0.05;
const DUP_P: f64 = 0.1;

/// A concrete transformation drawn from an [`AugSpec`]. Applying it is
/// deterministic: the randomness it needs was fixed when it was drawn.
#[derive(Debug, Clone)]
pub struct Augmentation {
    spec: AugSpec,
    stream: RngStream,
}

impl PartialEq for Augmentation {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && (self.spec == AugSpec::None
                || (self.stream.seed() == other.stream.seed()
                    && self.stream.stream_id() == other.stream.stream_id()))
    }
}

pub fn sample_augmentation(spec: AugSpec, rng: &mut RngStream) -> Augmentation {
    let tag = rand::RngCore::next_u64(rng);
    Augmentation {
        spec,
        stream: rng.substream(tag),
    }
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            spec: AugSpec::None,
            stream: RngStream::new(0, 0),
        }
    }

    pub fn spec(&self) -> AugSpec {
        self.spec
    }

    pub fn apply(&self, frames: &[Vec64]) -> Vec<Vec64> {
        if self.spec == AugSpec::None {
            return frames.to_vec();
        }
        let mut rng = self.stream.clone();
        let n = frames.len();
        let mut keep: Vec<bool> = (0..n).map(|_| rng.uniform() >= DROP_P).collect();
        let floor = MIN_KEPT.min(n);
        if keep.iter().filter(|&&k| k).count() < floor {
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            for &i in &order {
                if keep.iter().filter(|&&k| k).count() >= floor {
                    break;
                }
                keep[i] = true;
            }
        }
        let dup = self.spec == AugSpec::StandardDup;
        let mut out = Vec::with_capacity(n);
        for (frame, _) in frames.iter().zip(&keep).filter(|(_, &k)| k) {
            let jittered: Vec64 = frame.iter().map(|x| x + AUG_JITTER * rng.normal()).collect();
            if dup && rng.uniform() < DUP_P {
                out.push(jittered.clone());
            }
            out.push(jittered);
        }
        out
    }
}

/// Mean frame of a sequence.
pub fn sequence_mean(frames: &[Vec64]) -> Vec64 {
    let d = frames[0].len();
    let mut m = vec![0.0; d];
    for f in frames {
        for (a, b) in m.iter_mut().zip(f) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|x| *x /= frames.len() as f64);
    m
}
