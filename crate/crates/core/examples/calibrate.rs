//! Prints the per-state similarity sweep used to tune the generators.
//!
//! `cargo run --release -p hdl-core --example calibrate [seed]`

use std::time::Instant;

use hdl_core::envsim::{build_dataset, generate_sample, Payload, enumerate_states, Condition, Provenance, CANONICAL_SEED};
use hdl_core::similarity::{cross_condition_matrices, reward_from_matrices, ssim};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(CANONICAL_SEED);
    let states = enumerate_states();
    if let Ok(dir) = std::env::var("DUMP_DIR") {
        dump(std::path::Path::new(&dir), seed)?;
    }
    let t = Instant::now();
    let virt = build_dataset(&states, Provenance::Virtual, 1, seed)?.preprocess()?;
    let field = build_dataset(&states, Provenance::Field, 1, seed)?.preprocess()?;
    eprintln!("generated + preprocessed in {:.2?}", t.elapsed());
    let t = Instant::now();
    let mats = cross_condition_matrices(&virt)?;
    eprintln!("matrices in {:.2?}", t.elapsed());
    println!("{:<14} {:>8} {:>8} {:>8} {:>8}  nearest", "state", "mean", "reward", "v-f", "margin");
    for (z, state) in states.iter().enumerate() {
        let r = reward_from_matrices(&[&mats[z]])?;
        let mut vf = 0.0;
        let mut margin = f64::INFINITY;
        let mut worst = (0, 0);
        for c in 0..Condition::ALL.len() {
            let own = ssim(virt.get(z, c, 0), field.get(z, c, 0))?;
            vf += own;
            for o in 0..Condition::ALL.len() {
                if o != c {
                    for d in [
                        own - ssim(virt.get(z, c, 0), field.get(z, o, 0))?,
                        own - ssim(virt.get(z, o, 0), field.get(z, c, 0))?,
                    ] {
                        if d < margin {
                            margin = d;
                            worst = (c, o);
                        }
                    }
                }
            }
        }
        vf /= Condition::ALL.len() as f64;
        println!(
            "{:<14} {:>8.4} {:>8.4} {:>8.4} {:>8.4}  {} {:?}",
            state.id(),
            mats[z].mean_off_diagonal(),
            r.total,
            vf,
            margin,
            if margin > 0.0 { "ok" } else { "FAIL" },
            worst
        );
    }
    let far0 = states.iter().position(|s| s.id() == "far-0-snd").unwrap_or(0);
    println!("far-0-snd matrix:");
    for i in 0..6 {
        println!("  {:?}", (0..6).map(|j| format!("{:.3}", mats[far0].get(i, j))).collect::<Vec<_>>());
    }
    Ok(())
}

/// Writes every image state and the far-0 mel images as binary PPM files.
fn dump(dir: &std::path::Path, seed: u64) -> Result<(), Box<dyn std::error::Error>> {
    std::fs::create_dir_all(dir)?;
    for state in enumerate_states() {
        for c in Condition::ALL {
            for prov in [Provenance::Virtual, Provenance::Field] {
                let s = generate_sample(state, c, prov, seed);
                let img = match &s.payload {
                    Payload::Image(img) => img.clone(),
                    Payload::Audio { sample_rate, samples } => hdl_core::dsp::mel_spectrogram(
                        samples,
                        *sample_rate,
                        hdl_core::dsp::N_MELS,
                        hdl_core::dsp::F_MIN,
                        *sample_rate as f64 / 2.0,
                    )?,
                };
                let mut out = format!("P6 {} {} 255\n", img.width, img.height).into_bytes();
                for y in 0..img.height {
                    for x in 0..img.width {
                        out.extend((0..3).map(|ch| img.get(ch, y, x)));
                    }
                }
                std::fs::write(dir.join(format!("{}_{}_{}.ppm", state.id(), c.slug(), prov.slug())), out)?;
            }
        }
    }
    Ok(())
}
