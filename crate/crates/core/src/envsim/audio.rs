use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{derive_seed, Condition, Distance, Location};
use crate::dsp::{CLIP_SECONDS, SAMPLE_RATE};

const ROTATION_HZ: f64 = 23.4;
const BLADE_HARMONICS: usize = 10;
const HOLE_TONES_HZ: [f64; 3] = [1250.0, 1900.0, 2800.0];
const MAINS_HZ: f64 = 60.0;
const WHINE_HZ: f64 = 3300.0;
const ROOM_NOISE: f64 = 0.02;
/// Rotor gain straight ahead at range, where the air jet carries blade noise.
const FAR_BEAM: f64 = 1.5;

/// A stationary partial, optionally amplitude-modulated.
struct Partial {
    freq: f64,
    amp: f64,
    am_freq: f64,
    am_depth: f64,
}

impl Partial {
    fn tone(freq: f64, amp: f64) -> Self {
        Self {
            freq,
            amp,
            am_freq: 0.0,
            am_depth: 0.0,
        }
    }
}

/// Tones radiated by the rotor: blade-pass harmonics, the once-per-turn
/// imbalance line of a single blade, and whistles from holes in the blades.
fn rotor(condition: Condition) -> Vec<Partial> {
    let blades = condition.blades() as f64;
    let bpf = blades * ROTATION_HZ;
    let mut parts: Vec<Partial> = (1..=BLADE_HARMONICS)
        .map(|k| Partial::tone(bpf * k as f64, 1.0 / (k as f64).sqrt()))
        .collect();
    if condition.blades() == 1 {
        parts.push(Partial::tone(ROTATION_HZ * 0.5, 0.8));
    }
    let holes = condition.holes();
    if holes > 0 {
        let f = HOLE_TONES_HZ[holes - 1];
        for (k, amp) in [(1.0, 0.6), (2.0, 0.25)] {
            parts.push(Partial {
                freq: f * k,
                amp: amp * (0.6 + 0.2 * holes as f64),
                am_freq: bpf,
                am_depth: 0.7,
            });
        }
    }
    parts
}

/// Tones every condition shares: mains hum harmonics and the motor whine.
fn motor(location: Location) -> Vec<Partial> {
    let mut parts: Vec<Partial> = (1..=5).map(|k| Partial::tone(MAINS_HZ * k as f64, 0.8 / k as f64)).collect();
    let whine = if location.angle == 270 { 0.12 } else { 0.05 };
    parts.push(Partial::tone(WHINE_HZ, whine));
    parts
}

/// `(rotor gain, motor gain)` at a pose. The rotor radiates forward, the
/// motor sits behind it, and near the rig the motor dominates.
fn gains(location: Location) -> (f64, f64) {
    let (rotor, motor) = match location.angle {
        0 => (1.0, 0.3),
        90 => (0.1, 0.5),
        270 => (0.1, 0.6),
        _ => (0.1, 1.0),
    };
    match location.distance {
        Distance::Near => (rotor, motor * 20.0),
        Distance::Far => (rotor * if location.angle == 0 { FAR_BEAM } else { 0.35 }, motor * 0.35),
    }
}

fn add_partials(out: &mut [f64], parts: &[Partial], gain: f64, phase_seed: u64) {
    let rate = SAMPLE_RATE as f64;
    for (i, p) in parts.iter().enumerate() {
        let phase = (derive_seed(phase_seed, &[i as u64]) % 10_000) as f64 / 10_000.0 * TAU;
        let (w, wm) = (TAU * p.freq / rate, TAU * p.am_freq / rate);
        for (n, v) in out.iter_mut().enumerate() {
            let env = 1.0 - p.am_depth * 0.5 * (1.0 - (wm * n as f64).cos());
            *v += gain * p.amp * env * (w * n as f64 + phase).sin();
        }
    }
}

/// Five seconds of mono audio at 16 kHz for one pose and condition. The
/// room noise depends on the seed; the tonal content does not.
pub fn synthesize(location: Location, condition: Condition, seed: u64) -> Vec<f32> {
    let len = (SAMPLE_RATE * CLIP_SECONDS) as usize;
    let mut out = vec![0.0f64; len];
    let (g_rotor, g_motor) = gains(location);
    add_partials(&mut out, &rotor(condition), g_rotor, 0xB1ADE ^ condition.index() as u64);
    add_partials(&mut out, &motor(location), g_motor, 0x0707);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xA0D10, location.index() as u64]));
    let noise = Normal::new(0.0, ROOM_NOISE).expect("finite std");
    for v in out.iter_mut() {
        *v += noise.sample(&mut rng);
    }
    out.into_iter().map(|v| v as f32).collect()
}
