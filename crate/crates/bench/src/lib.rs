//! Input generators shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotbell_core::simulator::{self, ExperimentConfig, Schedule, SimulatedRun};
use slotbell_core::{Bit, DetectionEvent, SettingPair, Station};

pub fn fair_bits(len: usize, seed: u64) -> Vec<Bit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..2u8)).collect()
}

pub fn simulated_run(n_pulses: u64) -> (ExperimentConfig, SimulatedRun) {
    let cfg = ExperimentConfig {
        n_pulses,
        pair_yield_per_pulse: 0.08,
        schedule: Schedule::Scan {
            settings: vec![SettingPair::new(0.0, 22.5)],
        },
        ..Default::default()
    };
    let run = simulator::simulate_run(&cfg, 0).expect("valid config");
    (cfg, run)
}

/// One detection per station in a fraction `density` of the pulses, offsets
/// uniform in the pulse.
pub fn detection_pair(n_pulses: u64, density: f64, seed: u64) -> (Vec<DetectionEvent>, Vec<DetectionEvent>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for p in 0..n_pulses {
        if rng.random::<f64>() >= density {
            continue;
        }
        let t = rng.random_range(0.0..500.0);
        for (out, station) in [(&mut a, Station::Alice), (&mut b, Station::Bob)] {
            out.push(DetectionEvent {
                pulse_index: p,
                offset_ns: t + rng.random_range(-0.5..0.5),
                outcome: rng.random_range(0..2u8),
                station,
            });
        }
    }
    (a, b)
}
