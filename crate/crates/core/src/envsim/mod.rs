//! Procedural fan rig: six operating conditions observed from eight poses in
//! two modalities, with a clean `Virtual` rendering and a perturbed `Field`
//! variant standing in for real captures.

mod audio;
mod render;
pub mod store;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, Image};
use crate::tensor::Tensor;

pub use audio::synthesize;
pub use render::render;

pub const CANONICAL_SEED: u64 = 0;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown {kind} {value:?}")]
    Parse { kind: &'static str, value: String },
    #[error("a dataset needs at least one collection state")]
    NoStates,
    #[error("shots per condition must be at least 1")]
    NoShots,
    #[error("dataset store: {0}")]
    Store(String),
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EnvError> = std::result::Result<T, E>;

fn parse_err(kind: &'static str, value: &str) -> EnvError {
    EnvError::Parse {
        kind,
        value: value.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    OneBlade,
    TwoBlades,
    ThreeBlades,
    OneHole,
    TwoHoles,
    ThreeHoles,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::OneBlade,
        Condition::TwoBlades,
        Condition::ThreeBlades,
        Condition::OneHole,
        Condition::TwoHoles,
        Condition::ThreeHoles,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn slug(self) -> &'static str {
        match self {
            Condition::OneBlade => "one-blade",
            Condition::TwoBlades => "two-blades",
            Condition::ThreeBlades => "three-blades",
            Condition::OneHole => "one-hole",
            Condition::TwoHoles => "two-holes",
            Condition::ThreeHoles => "three-holes",
        }
    }

    pub fn blades(self) -> usize {
        match self {
            Condition::OneBlade => 1,
            Condition::TwoBlades => 2,
            _ => 3,
        }
    }

    pub fn holes(self) -> usize {
        match self {
            Condition::OneHole => 1,
            Condition::TwoHoles => 2,
            Condition::ThreeHoles => 3,
            _ => 0,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Condition {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.slug() == s)
            .ok_or_else(|| parse_err("condition", s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// One foot from the fan.
    Near,
    /// Five feet from the fan.
    Far,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Sound,
}

impl Modality {
    pub fn slug(self) -> &'static str {
        match self {
            Modality::Image => "img",
            Modality::Sound => "snd",
        }
    }
}

pub const ANGLES: [u16; 4] = [0, 90, 180, 270];

/// A physical pose around the fan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Location {
    pub distance: Distance,
    pub angle: u16,
}

impl Location {
    pub fn all() -> Vec<Location> {
        [Distance::Near, Distance::Far]
            .into_iter()
            .flat_map(|distance| ANGLES.into_iter().map(move |angle| Location { distance, angle }))
            .collect()
    }

    /// Position in [`Location::all`]: distance-major, then angle.
    pub fn index(self) -> usize {
        let d = match self.distance {
            Distance::Near => 0,
            Distance::Far => 1,
        };
        d * 4 + ANGLES.iter().position(|&a| a == self.angle).expect("valid angle")
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::all().get(i).copied()
    }

    /// `near-0`, `far-270`, ...
    pub fn id(self) -> String {
        let d = match self.distance {
            Distance::Near => "near",
            Distance::Far => "far",
        };
        format!("{d}-{}", self.angle)
    }

    pub fn with(self, modality: Modality) -> CollectionState {
        CollectionState {
            distance: self.distance,
            angle: self.angle,
            modality,
        }
    }
}

impl FromStr for Location {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self> {
        Self::all()
            .into_iter()
            .find(|l| l.id() == s)
            .ok_or_else(|| parse_err("location", s))
    }
}

/// One sensing configuration: where to stand and what to record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CollectionState {
    pub distance: Distance,
    pub angle: u16,
    pub modality: Modality,
}

impl CollectionState {
    pub fn location(self) -> Location {
        Location {
            distance: self.distance,
            angle: self.angle,
        }
    }

    /// Position in [`enumerate_states`].
    pub fn index(self) -> usize {
        self.location().index() * 2
            + match self.modality {
                Modality::Image => 0,
                Modality::Sound => 1,
            }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        enumerate_states().get(i).copied()
    }

    /// `{near|far}-{0|90|180|270}-{img|snd}`.
    pub fn id(self) -> String {
        format!("{}-{}", self.location().id(), self.modality.slug())
    }
}

impl fmt::Display for CollectionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for CollectionState {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self> {
        enumerate_states()
            .into_iter()
            .find(|c| c.id() == s)
            .ok_or_else(|| parse_err("collection state", s))
    }
}

/// All 16 states: distance, then angle, then modality (image first).
pub fn enumerate_states() -> Vec<CollectionState> {
    Location::all()
        .into_iter()
        .flat_map(|l| [l.with(Modality::Image), l.with(Modality::Sound)])
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Virtual,
    Field,
}

impl Provenance {
    pub fn slug(self) -> &'static str {
        match self {
            Provenance::Virtual => "virtual",
            Provenance::Field => "field",
        }
    }
}

impl FromStr for Provenance {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "virtual" => Ok(Provenance::Virtual),
            "field" => Ok(Provenance::Field),
            _ => Err(parse_err("provenance", s)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Image(Image),
    Audio { sample_rate: u32, samples: Vec<f32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub state: CollectionState,
    pub condition: Condition,
    pub provenance: Provenance,
    pub seed: u64,
    pub payload: Payload,
}

impl RawSample {
    /// Runs the preprocessing pipeline: Mel image for audio, then resize to
    /// `3 x 120 x 160` and scale into `[0, 1]`.
    pub fn preprocess(&self) -> Result<Tensor> {
        Ok(match &self.payload {
            Payload::Image(img) => dsp::preprocess_image(img)?,
            Payload::Audio { sample_rate, samples } => dsp::preprocess_audio(samples, *sample_rate)?,
        })
    }
}

/// Magnitudes of the field perturbation (per-sample gain and additive
/// Gaussian noise). Audio noise is in waveform units; image values are in
/// 8-bit units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldPerturbation {
    pub audio_gain: f64,
    pub audio_noise: f64,
    pub image_gain: f64,
    pub image_offset: f64,
    pub image_noise: f64,
}

impl Default for FieldPerturbation {
    fn default() -> Self {
        Self {
            audio_gain: 0.2,
            audio_noise: 0.017,
            image_gain: 0.1,
            image_offset: 15.0,
            image_noise: 3.0,
        }
    }
}

/// Derives an independent stream seed from a base seed and labels.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn generate_sample(state: CollectionState, condition: Condition, provenance: Provenance, seed: u64) -> RawSample {
    generate_with(state, condition, provenance, seed, &FieldPerturbation::default())
}

pub fn generate_with(
    state: CollectionState,
    condition: Condition,
    provenance: Provenance,
    seed: u64,
    field: &FieldPerturbation,
) -> RawSample {
    let clean = match state.modality {
        Modality::Image => Payload::Image(render(state.location(), condition)),
        Modality::Sound => Payload::Audio {
            sample_rate: dsp::SAMPLE_RATE,
            samples: synthesize(state.location(), condition, seed),
        },
    };
    let payload = match provenance {
        Provenance::Virtual => clean,
        Provenance::Field => {
            // One capture session per (seed, state): every condition recorded
            // in it shares the sensor noise realization.
            let stream = derive_seed(seed, &[0xF1E1D, state.index() as u64]);
            field_perturb(&clean, stream, field)
        }
    };
    RawSample {
        state,
        condition,
        provenance,
        seed,
        payload,
    }
}

/// Applies a random gain plus additive Gaussian noise.
pub fn field_perturb(payload: &Payload, seed: u64, field: &FieldPerturbation) -> Payload {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    match payload {
        Payload::Audio { sample_rate, samples } => {
            let gain = 1.0 + rng.random_range(-field.audio_gain..=field.audio_gain);
            let noise = Normal::new(0.0, field.audio_noise.max(1e-12)).expect("finite std");
            let samples = samples
                .iter()
                .map(|&v| (v as f64 * gain + noise.sample(&mut rng)) as f32)
                .collect();
            Payload::Audio {
                sample_rate: *sample_rate,
                samples,
            }
        }
        Payload::Image(img) => {
            let gain = 1.0 + rng.random_range(-field.image_gain..=field.image_gain);
            let offset = rng.random_range(-field.image_offset..=field.image_offset);
            let noise = Normal::new(0.0, field.image_noise.max(1e-12)).expect("finite std");
            let data = img
                .data
                .iter()
                .map(|&v| (v as f64 * gain + offset + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
                .collect();
            Payload::Image(Image {
                height: img.height,
                width: img.width,
                data,
            })
        }
    }
}

/// Raw samples indexed by `(state, condition, shot)`.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub states: Vec<CollectionState>,
    pub shots: usize,
    pub provenance: Provenance,
    samples: Vec<RawSample>,
}

impl LabeledDataset {
    /// Number of collection states represented.
    pub fn n(&self) -> usize {
        self.states.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[RawSample] {
        &self.samples
    }

    pub fn get(&self, state: usize, condition: Condition, shot: usize) -> &RawSample {
        &self.samples[(state * Condition::ALL.len() + condition.index()) * self.shots + shot]
    }

    /// Assembles a dataset from samples ordered by state, condition, shot.
    pub fn from_samples(
        states: Vec<CollectionState>,
        shots: usize,
        provenance: Provenance,
        samples: Vec<RawSample>,
    ) -> Result<Self> {
        if states.is_empty() {
            return Err(EnvError::NoStates);
        }
        if shots == 0 {
            return Err(EnvError::NoShots);
        }
        let ds = Self {
            states,
            shots,
            provenance,
            samples,
        };
        if ds.samples.len() != ds.states.len() * Condition::ALL.len() * shots {
            return Err(EnvError::Store(format!("expected {} samples, got {}", ds.states.len() * 6 * shots, ds.samples.len())));
        }
        for (si, &state) in ds.states.iter().enumerate() {
            for c in Condition::ALL {
                for shot in 0..shots {
                    let s = ds.get(si, c, shot);
                    if s.state != state || s.condition != c || s.provenance != provenance {
                        return Err(EnvError::Store(format!("sample order broken at {}/{}", state.id(), c.slug())));
                    }
                }
            }
        }
        Ok(ds)
    }

    pub fn preprocess(&self) -> Result<PreprocessedDataset> {
        Ok(PreprocessedDataset {
            states: self.states.clone(),
            shots: self.shots,
            tensors: self.samples.iter().map(RawSample::preprocess).collect::<Result<_>>()?,
        })
    }
}

/// Seed of shot `shot` in a dataset built from `seed`.
pub fn shot_seed(seed: u64, shot: usize) -> u64 {
    if shot == 0 {
        seed
    } else {
        derive_seed(seed, &[0x5407, shot as u64])
    }
}

pub fn build_dataset(states: &[CollectionState], provenance: Provenance, shots: usize, seed: u64) -> Result<LabeledDataset> {
    if states.is_empty() {
        return Err(EnvError::NoStates);
    }
    if shots == 0 {
        return Err(EnvError::NoShots);
    }
    let mut samples = Vec::with_capacity(states.len() * Condition::ALL.len() * shots);
    for &state in states {
        for condition in Condition::ALL {
            for shot in 0..shots {
                samples.push(generate_sample(state, condition, provenance, shot_seed(seed, shot)));
            }
        }
    }
    Ok(LabeledDataset {
        states: states.to_vec(),
        shots,
        provenance,
        samples,
    })
}

/// Network-ready tensors indexed like [`LabeledDataset`].
#[derive(Clone, Debug)]
pub struct PreprocessedDataset {
    pub states: Vec<CollectionState>,
    pub shots: usize,
    pub tensors: Vec<Tensor>,
}

impl PreprocessedDataset {
    pub fn get(&self, state: usize, condition: usize, shot: usize) -> &Tensor {
        &self.tensors[(state * Condition::ALL.len() + condition) * self.shots + shot]
    }

    pub fn conditions(&self) -> usize {
        Condition::ALL.len()
    }
}
