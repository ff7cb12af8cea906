#![allow(dead_code)]

use heatshift::model::{thermal_capacity, BuildingSpec, HeatPumpSpec, WeekData, SLOT_SECONDS};
use heatshift::scheduler::SolverConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Short random scheduling instance whose per-slot temperature swings are
/// comparable to the comfort band, so that band and switch-off constraints bind.
pub struct SmallInstance {
    pub week: WeekData,
    pub building: BuildingSpec,
    pub hp: HeatPumpSpec,
    pub cfg: SolverConfig,
}

pub fn small_instance(seed: u64, max_slots: usize, grid: &[f64]) -> SmallInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = rng.gen_range(1..=max_slots);
    let building = BuildingSpec {
        ufh_volume: 1.0,
        temp_min: 20.5,
        temp_max: 23.5,
        ufh_loss: rng.gen_range(0.0..50.0),
        initial_temp: rng.gen_range(20.5..23.5),
        ..BuildingSpec::default()
    };
    let cap = thermal_capacity(&building).unwrap();
    let hp = HeatPumpSpec {
        p_max: rng.gen_range(200.0..900.0),
        mod_min: grid.iter().copied().filter(|&x| x > 0.0).fold(1.0, f64::min),
        max_switch_offs: rng.gen_range(0..=3),
        ..HeatPumpSpec::default()
    };
    // demand drains 0..1.2 K per slot
    let heat_demand = (0..z).map(|_| rng.gen_range(0.0..1.2) * cap / 3600.0).collect();
    let price = (0..z).map(|_| rng.gen_range(0.05..0.5)).collect();
    let inflexible = (0..z).map(|_| rng.gen_range(0.0..500.0)).collect();
    let outside = (0..z).map(|_| rng.gen_range(-10.0..15.0)).collect();
    let week = WeekData::from_series(SLOT_SECONDS, price, heat_demand, inflexible, outside).unwrap();
    let cfg = SolverConfig {
        modulation_grid: grid.to_vec(),
        ..SolverConfig::default()
    };
    SmallInstance { week, building, hp, cfg }
}
