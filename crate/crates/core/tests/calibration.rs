//! Orderings the canonical generator must satisfy for the plan search and
//! the diagnosis stage to be meaningful.

use std::sync::OnceLock;

use hdl_core::envsim::{build_dataset, enumerate_states, CollectionState, Modality, PreprocessedDataset, Provenance, CANONICAL_SEED};
use hdl_core::similarity::{cross_condition_matrices, reward_from_matrices, ssim, SimilarityMatrix};

struct Sweep {
    states: Vec<CollectionState>,
    virt: PreprocessedDataset,
    field: PreprocessedDataset,
    mats: Vec<SimilarityMatrix>,
}

fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let states = enumerate_states();
        let virt = build_dataset(&states, Provenance::Virtual, 1, CANONICAL_SEED).unwrap().preprocess().unwrap();
        let field = build_dataset(&states, Provenance::Field, 1, CANONICAL_SEED).unwrap().preprocess().unwrap();
        let mats = cross_condition_matrices(&virt).unwrap();
        Sweep { states, virt, field, mats }
    })
}

fn means() -> Vec<f64> {
    sweep().mats.iter().map(|s| s.mean_off_diagonal()).collect()
}

fn argmin(v: &[f64]) -> usize {
    (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

#[test]
fn matrices_are_well_formed() {
    for s in &sweep().mats {
        assert_eq!(s.m, 6);
        for i in 0..6 {
            assert_eq!(s.get(i, i), 1.0);
            for j in 0..6 {
                assert_eq!(s.get(i, j), s.get(j, i));
                assert!((-1.0..=1.0).contains(&s.get(i, j)));
            }
        }
    }
}

#[test]
fn sound_is_less_similar_than_image_everywhere() {
    let sw = sweep();
    let means = means();
    let of = |m: Modality| sw.states.iter().zip(&means).filter(move |(s, _)| s.modality == m).map(|(_, &v)| v);
    let worst_sound = of(Modality::Sound).fold(f64::NEG_INFINITY, f64::max);
    let best_image = of(Modality::Image).fold(f64::INFINITY, f64::min);
    assert!(worst_sound < best_image, "{worst_sound} vs {best_image}");
}

#[test]
fn front_sound_beats_back_sound() {
    let sw = sweep();
    let means = means();
    let find = |id: &str| means[sw.states.iter().position(|s| s.id() == id).unwrap()];
    for d in ["near", "far"] {
        assert!(find(&format!("{d}-0-snd")) < find(&format!("{d}-180-snd")));
    }
}

#[test]
fn unique_optimum_is_sound_and_agrees_with_reward() {
    let sw = sweep();
    let means = means();
    let best = argmin(&means);
    assert_eq!(sw.states[best].modality, Modality::Sound);
    let mut sorted = means.clone();
    sorted.sort_by(f64::total_cmp);
    assert!(sorted[1] - sorted[0] > 1e-3, "optimum not unique: {sorted:?}");
    let totals: Vec<f64> = sw.mats.iter().map(|s| reward_from_matrices(&[s]).unwrap().total).collect();
    let best_total = (0..16).max_by(|&a, &b| totals[a].total_cmp(&totals[b])).unwrap();
    assert_eq!(best_total, best);
}

#[test]
fn virtual_field_similarity_at_optimum_in_band() {
    let sw = sweep();
    let best = argmin(&means());
    let vf = (0..6).map(|c| ssim(sw.virt.get(best, c, 0), sw.field.get(best, c, 0)).unwrap()).sum::<f64>() / 6.0;
    assert!((0.94..=0.98).contains(&vf), "{vf}");
}

#[test]
fn virtual_and_field_are_mutual_nearest_neighbours() {
    let sw = sweep();
    for z in 0..16 {
        for c in 0..6 {
            let own = ssim(sw.virt.get(z, c, 0), sw.field.get(z, c, 0)).unwrap();
            for o in (0..6).filter(|&o| o != c) {
                let a = ssim(sw.virt.get(z, c, 0), sw.field.get(z, o, 0)).unwrap();
                let b = ssim(sw.virt.get(z, o, 0), sw.field.get(z, c, 0)).unwrap();
                assert!(own > a && own > b, "{} conditions {c}/{o}: {own} vs {a}, {b}", sw.states[z].id());
            }
        }
    }
}

#[test]
fn optimum_is_far_front_sound() {
    assert_eq!(sweep().states[argmin(&means())].id(), "far-0-snd");
}

#[test]
fn optimum_location_also_wins_averaged_over_modalities() {
    let sw = sweep();
    let means = means();
    let best = sw.states[argmin(&means)].location();
    let loc_mean = |z: usize| {
        let loc = sw.states[z].location();
        let vals: Vec<f64> = (0..16).filter(|&k| sw.states[k].location() == loc).map(|k| means[k]).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let best_mean = loc_mean(argmin(&means));
    for z in (0..16).filter(|&z| sw.states[z].location() != best) {
        assert!(loc_mean(z) > best_mean + 0.01, "{} {} vs {}", sw.states[z].id(), loc_mean(z), best_mean);
    }
}
