//! Price-Storage-Control: the two factors, the modulation rule and the
//! safety guard rules that wrap every closed-loop controller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BuildingSpec, HeatPumpSpec, ThermalState, SLOTS_PER_DAY};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PscFactors {
    /// Share of the coming day's prices above the current price.
    pub price_factor: f64,
    /// Position of the building temperature in the comfort band.
    pub storage_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriceComparison {
    #[default]
    StrictlyGreater,
    GreaterOrEqual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StorageOrientation {
    /// 1 means the thermal storage is full.
    #[default]
    ChargeLevel,
    /// 1 means the storage is empty.
    Headroom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PscConfig {
    /// Look-ahead of the price factor, slots.
    pub window: usize,
    pub comparison: PriceComparison,
    pub orientation: StorageOrientation,
}

impl Default for PscConfig {
    fn default() -> Self {
        Self {
            window: SLOTS_PER_DAY,
            comparison: PriceComparison::StrictlyGreater,
            orientation: StorageOrientation::ChargeLevel,
        }
    }
}

impl PscConfig {
    pub fn factors(&self, prices: &[f64], t: usize, temp: f64, building: &BuildingSpec) -> Result<PscFactors> {
        let pf = price_factor_with(prices, t, self.window, self.comparison);
        let sf = storage_factor(temp, building.temp_min, building.temp_max)?;
        let sf = match self.orientation {
            StorageOrientation::ChargeLevel => sf,
            StorageOrientation::Headroom => 1.0 - sf,
        };
        Ok(PscFactors {
            price_factor: pf,
            storage_factor: sf,
        })
    }
}

/// Share of the prices in `(t, t + window]` strictly above `prices[t]`. The
/// window is truncated at the end of the series; an empty window yields 0.
pub fn price_factor(prices: &[f64], t: usize, window: usize) -> f64 {
    price_factor_with(prices, t, window, PriceComparison::StrictlyGreater)
}

pub fn price_factor_with(prices: &[f64], t: usize, window: usize, cmp: PriceComparison) -> f64 {
    let now = prices[t];
    let end = (t + window).min(prices.len() - 1);
    let ahead = &prices[t + 1..=end.max(t)];
    if ahead.is_empty() {
        return 0.0;
    }
    let higher = ahead
        .iter()
        .filter(|&&p| match cmp {
            PriceComparison::StrictlyGreater => p > now,
            PriceComparison::GreaterOrEqual => p >= now,
        })
        .count();
    higher as f64 / ahead.len() as f64
}

/// `(temp - t_min) / (t_max - t_min)` clamped to [0, 1].
pub fn storage_factor(temp: f64, t_min: f64, t_max: f64) -> Result<f64> {
    if !(t_min < t_max) {
        return Err(Error::InvalidSpec(format!("comfort band [{t_min}, {t_max}] is empty")));
    }
    Ok(((temp - t_min) / (t_max - t_min)).clamp(0.0, 1.0))
}

/// Maps the two factors to a modulation degree.
pub trait PscRule: Send + Sync {
    fn name(&self) -> &'static str;
    fn modulation(&self, f: PscFactors, hp: &HeatPumpSpec) -> f64;
}

/// `price_factor * (1 - storage_factor)` with a dead zone below `mod_min / 2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProductRule;

impl PscRule for ProductRule {
    fn name(&self) -> &'static str {
        "product"
    }

    fn modulation(&self, f: PscFactors, hp: &HeatPumpSpec) -> f64 {
        psc_modulation(f, hp)
    }
}

pub fn psc_modulation(f: PscFactors, hp: &HeatPumpSpec) -> f64 {
    let raw = f.price_factor * (1.0 - f.storage_factor);
    if raw < hp.mod_min / 2.0 {
        0.0
    } else {
        raw.clamp(hp.mod_min, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardConfig {
    /// Distance from the band edges at which the comfort overrides fire, K.
    pub margin: f64,
    /// Also act on the predicted end-of-slot temperature and pace the
    /// switch-off budget (see [`guard_rules_with_outlook`]).
    pub anticipate: bool,
    /// Switch-offs allowed ahead of an even spread over the week.
    pub pace_slack: u32,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            anticipate: true,
            pace_slack: 2,
        }
    }
}

/// One-slot temperature response known to the controller at the start of a
/// slot, K.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotOutlook {
    /// Change with the heat pump off if the last slot's heat demand persists.
    pub passive_delta: f64,
    /// Change with the heat pump off and zero heat demand (losses only). An
    /// upper bound on the passive change.
    pub lossonly_delta: f64,
    /// Added change per unit of modulation.
    pub rise_per_unit: f64,
    /// Slots in the week.
    pub horizon: usize,
}

/// Safety overrides, applied in order:
/// 1. at or below `temp_min + margin`: full power;
/// 2. at or above `temp_max - margin`: off, or `mod_min` when the switch-off
///    budget is used up and the heat pump is running;
/// 3. budget used up and running: never below `mod_min`;
/// 4. proposals inside `(0, mod_min)` snap to the nearer of 0 and `mod_min`
///    (ties to `mod_min`).
pub fn guard_rules(
    proposed_x: f64,
    state: &ThermalState,
    building: &BuildingSpec,
    hp: &HeatPumpSpec,
    guard: &GuardConfig,
) -> f64 {
    let x = proposed_x.clamp(0.0, 1.0);
    let locked_on = state.hp_on && state.switch_offs_used >= hp.max_switch_offs;
    let reacted = guard_reactive(x, state, building, hp, guard, locked_on);
    snap(reacted, hp, locked_on)
}

/// [`guard_rules`] plus two look-ahead overrides, applied between the floor
/// and the ceiling rule:
/// - if the passive prediction ends at or below `temp_min + margin`, raise
///   `x` to the smallest value that keeps it above, or 1;
/// - switch off if, even without heat demand, `x` would end the slot above
///   `temp_max`.
///
/// While the budget used is ahead of an even spread over the week plus
/// `pace_slack`, or only one switch-off is left, voluntary switch-offs are
/// refused (the heat pump stays at `mod_min`) and so are starts not forced by
/// the floor.
pub fn guard_rules_with_outlook(
    proposed_x: f64,
    state: &ThermalState,
    outlook: &SlotOutlook,
    building: &BuildingSpec,
    hp: &HeatPumpSpec,
    guard: &GuardConfig,
) -> f64 {
    let mut x = proposed_x.clamp(0.0, 1.0);
    let locked_on = state.hp_on && state.switch_offs_used >= hp.max_switch_offs;
    let t = state.building_temp;
    if t <= building.temp_min + guard.margin {
        return 1.0;
    }
    let floor = building.temp_min + guard.margin;
    let mut forced_off = false;
    let mut floor_forced = false;
    if outlook.rise_per_unit > 0.0 {
        let needed = (floor - t - outlook.passive_delta) / outlook.rise_per_unit;
        if needed > x {
            return needed.clamp(hp.mod_min, 1.0);
        }
        floor_forced = needed > 0.0;
        let cap = (building.temp_max - t - outlook.lossonly_delta) / outlook.rise_per_unit;
        if x > cap {
            x = 0.0;
            forced_off = true;
        }
    }
    let reacted = snap(guard_reactive(x, state, building, hp, guard, locked_on), hp, locked_on);
    if outlook.horizon == 0 || floor_forced {
        return reacted;
    }
    let spread = (hp.max_switch_offs as usize * (state.slot_index + 1)).div_ceil(outlook.horizon) as u32;
    let quota = (spread + guard.pace_slack).min(hp.max_switch_offs.saturating_sub(1));
    if state.switch_offs_used < quota {
        return reacted;
    }
    let ceiling = forced_off || t >= building.temp_max - guard.margin;
    match (state.hp_on, reacted > 0.0) {
        (true, false) if !ceiling => hp.mod_min,
        (false, true) => 0.0,
        _ => reacted,
    }
}

fn snap(x: f64, hp: &HeatPumpSpec, locked_on: bool) -> f64 {
    if locked_on {
        return x.max(hp.mod_min);
    }
    if x > 0.0 && x < hp.mod_min {
        return if x >= hp.mod_min / 2.0 { hp.mod_min } else { 0.0 };
    }
    x
}

fn guard_reactive(
    x: f64,
    state: &ThermalState,
    building: &BuildingSpec,
    hp: &HeatPumpSpec,
    guard: &GuardConfig,
    locked_on: bool,
) -> f64 {
    if state.building_temp <= building.temp_min + guard.margin {
        return 1.0;
    }
    if state.building_temp >= building.temp_max - guard.margin {
        return if locked_on { hp.mod_min } else { 0.0 };
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(temp: f64) -> ThermalState {
        ThermalState {
            slot_index: 10,
            building_temp: temp,
            hp_on: false,
            switch_offs_used: 0,
            starts_today: 0,
        }
    }

    #[test]
    fn price_factor_examples() {
        let flat = vec![0.3; 100];
        assert!((0..100).all(|t| price_factor(&flat, t, 48) == 0.0));

        let mut rising = vec![2.0; 49];
        rising[0] = 1.0;
        assert_eq!(price_factor(&rising, 0, 48), 1.0);

        let p = [3.0, 1.0, 2.0, 4.0, 5.0];
        assert_eq!(price_factor(&p, 0, 4), 0.5);
        // last slot: empty window
        assert_eq!(price_factor(&p, 4, 4), 0.0);
        // truncated window: {4, 5} both higher than 2
        assert_eq!(price_factor(&p, 2, 48), 1.0);
    }

    #[test]
    fn ties_count_only_when_configured() {
        let p = [1.0, 1.0, 2.0, 0.5];
        assert!((price_factor(&p, 0, 3) - 1.0 / 3.0).abs() < 1e-12);
        assert!((price_factor_with(&p, 0, 3, PriceComparison::GreaterOrEqual) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn storage_factor_examples() {
        assert_eq!(storage_factor(20.5, 20.5, 23.5).unwrap(), 0.0);
        assert_eq!(storage_factor(23.5, 20.5, 23.5).unwrap(), 1.0);
        assert_eq!(storage_factor(22.0, 20.5, 23.5).unwrap(), 0.5);
        assert_eq!(storage_factor(19.0, 20.5, 23.5).unwrap(), 0.0);
        assert!(storage_factor(22.0, 23.5, 20.5).is_err());
    }

    #[test]
    fn headroom_orientation_flips_storage() {
        let cfg = PscConfig {
            orientation: StorageOrientation::Headroom,
            ..PscConfig::default()
        };
        let f = cfg.factors(&[1.0, 2.0], 0, 23.5, &BuildingSpec::default()).unwrap();
        assert_eq!(f.storage_factor, 0.0);
    }

    #[test]
    fn modulation_rule_examples() {
        let hp = HeatPumpSpec::default();
        let m = |pf, sf| {
            psc_modulation(
                PscFactors {
                    price_factor: pf,
                    storage_factor: sf,
                },
                &hp,
            )
        };
        assert_eq!(m(1.0, 0.0), 1.0);
        assert_eq!(m(0.0, 0.3), 0.0);
        assert!((m(0.5, 0.5) - 0.25).abs() < 1e-12);
        // dead zone and lift to mod_min
        assert_eq!(m(0.09, 0.0), 0.0);
        assert_eq!(m(0.15, 0.0), 0.2);
        assert_eq!(ProductRule.name(), "product");
    }

    #[test]
    fn guard_examples() {
        let b = BuildingSpec::default();
        let hp = HeatPumpSpec::default();
        let g = GuardConfig::default();
        assert_eq!(guard_rules(0.0, &state(20.55), &b, &hp, &g), 1.0);
        assert_eq!(guard_rules(0.8, &state(23.45), &b, &hp, &g), 0.0);
        assert_eq!(guard_rules(0.15, &state(22.0), &b, &hp, &g), 0.2);
        assert_eq!(guard_rules(0.1, &state(22.0), &b, &hp, &g), 0.2);
        assert_eq!(guard_rules(0.05, &state(22.0), &b, &hp, &g), 0.0);
        assert_eq!(guard_rules(0.6, &state(22.0), &b, &hp, &g), 0.6);
    }

    #[test]
    fn exhausted_budget_keeps_running() {
        let b = BuildingSpec::default();
        let hp = HeatPumpSpec::default();
        let g = GuardConfig::default();
        let locked = ThermalState {
            hp_on: true,
            switch_offs_used: 28,
            ..state(22.0)
        };
        assert_eq!(guard_rules(0.0, &locked, &b, &hp, &g), 0.2);
        assert_eq!(guard_rules(0.7, &locked, &b, &hp, &g), 0.7);
        let hot = ThermalState {
            building_temp: 23.45,
            ..locked
        };
        assert_eq!(guard_rules(0.9, &hot, &b, &hp, &g), 0.2);
        // off with no budget left: nothing forces it on
        let idle = ThermalState { hp_on: false, ..locked };
        assert_eq!(guard_rules(0.0, &idle, &b, &hp, &g), 0.0);
    }

    fn outlook(passive: f64) -> SlotOutlook {
        SlotOutlook {
            passive_delta: passive,
            lossonly_delta: -0.001,
            rise_per_unit: 0.5,
            horizon: 336,
        }
    }

    #[test]
    fn outlook_guard_examples() {
        let b = BuildingSpec::default();
        let hp = HeatPumpSpec::default();
        let g = GuardConfig::default();
        let run = |x, st: &ThermalState, passive| guard_rules_with_outlook(x, st, &outlook(passive), &b, &hp, &g);
        // specified rules still hold
        assert_eq!(run(0.0, &state(20.55), 0.0), 1.0);
        assert_eq!(run(0.8, &state(23.45), 0.0), 0.0);
        assert_eq!(run(0.15, &state(22.0), 0.0), 0.2);
        // falling 0.3 K from 20.8 would end below 20.6: heat just enough
        assert!((run(0.0, &state(20.8), -0.3) - 0.2).abs() < 1e-12);
        assert!((run(0.0, &state(20.7), -0.3) - 0.4).abs() < 1e-12);
        // 23.0 + 0.5 x must stay at or below 23.5 without any demand, else off
        assert_eq!(run(1.0, &state(23.0), 0.0), 1.0);
        assert_eq!(run(1.0, &state(23.2), 0.0), 0.0);
        assert!((run(0.6, &state(23.2), 0.0) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn pacing_holds_the_budget() {
        let b = BuildingSpec::default();
        let hp = HeatPumpSpec::default();
        let g = GuardConfig::default();
        let ahead = ThermalState {
            slot_index: 10,
            building_temp: 22.0,
            hp_on: true,
            switch_offs_used: 3,
            starts_today: 0,
        };
        let o = outlook(-0.05);
        assert_eq!(guard_rules_with_outlook(0.0, &ahead, &o, &b, &hp, &g), 0.2);
        let idle = ThermalState { hp_on: false, ..ahead };
        assert_eq!(guard_rules_with_outlook(0.8, &idle, &o, &b, &hp, &g), 0.0);
        // the floor overrides pacing
        let cold = ThermalState {
            building_temp: 20.62,
            ..idle
        };
        assert!(guard_rules_with_outlook(0.8, &cold, &o, &b, &hp, &g) > 0.0);
        let on_pace = ThermalState {
            switch_offs_used: 1,
            ..ahead
        };
        assert_eq!(guard_rules_with_outlook(0.0, &on_pace, &o, &b, &hp, &g), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn price_factor_depends_only_on_order(
                prices in proptest::collection::vec(0.01f64..1.0, 2..100),
                t_frac in 0.0f64..1.0,
                a in 0.1f64..10.0,
                b in -1.0f64..1.0,
            ) {
                let t = ((prices.len() - 1) as f64 * t_frac) as usize;
                // strictly increasing transform
                let mapped: Vec<f64> = prices.iter().map(|&p| a * p * p * p + b + p).collect();
                prop_assert_eq!(price_factor(&prices, t, 48), price_factor(&mapped, t, 48));
            }

            #[test]
            fn storage_factor_affine_invariant(temp in 15.0f64..28.0, lo in 18.0f64..21.0, w in 0.5f64..5.0, s in 0.1f64..10.0, o in -50.0f64..50.0) {
                let hi = lo + w;
                let f1 = storage_factor(temp, lo, hi).unwrap();
                let f2 = storage_factor(s * temp + o, s * lo + o, s * hi + o).unwrap();
                prop_assert!((f1 - f2).abs() < 1e-9);
            }

            #[test]
            fn guard_output_is_admissible(x in -0.5f64..1.5, temp in 19.0f64..25.0, on: bool, used in 0u32..30, mod_min in 0.05f64..1.0) {
                let hp = HeatPumpSpec { mod_min, ..HeatPumpSpec::default() };
                let st = ThermalState { slot_index: 0, building_temp: temp, hp_on: on, switch_offs_used: used, starts_today: 0 };
                let y = guard_rules(x, &st, &BuildingSpec::default(), &hp, &GuardConfig::default());
                prop_assert!(hp.is_admissible(y), "{y}");
            }

            #[test]
            fn outlook_guard_output_is_admissible(
                x in -0.5f64..1.5, temp in 19.0f64..25.0, on: bool, used in 0u32..30, slot in 0usize..336,
                passive in -0.5f64..0.2, rise in 0.0f64..1.0, mod_min in 0.05f64..1.0,
            ) {
                let hp = HeatPumpSpec { mod_min, ..HeatPumpSpec::default() };
                let st = ThermalState { slot_index: slot, building_temp: temp, hp_on: on, switch_offs_used: used, starts_today: 0 };
                let o = SlotOutlook { passive_delta: passive, lossonly_delta: -0.001, rise_per_unit: rise, horizon: 336 };
                let y = guard_rules_with_outlook(x, &st, &o, &BuildingSpec::default(), &hp, &GuardConfig::default());
                prop_assert!(hp.is_admissible(y), "{y}");
                if on && used >= hp.max_switch_offs {
                    prop_assert!(y > 0.0);
                }
            }

            #[test]
            fn rule_is_monotone(pf1 in 0.0f64..1.0, pf2 in 0.0f64..1.0, sf1 in 0.0f64..1.0, sf2 in 0.0f64..1.0) {
                let hp = HeatPumpSpec::default();
                let m = |pf, sf| psc_modulation(PscFactors { price_factor: pf, storage_factor: sf }, &hp);
                let (plo, phi) = if pf1 <= pf2 { (pf1, pf2) } else { (pf2, pf1) };
                let (slo, shi) = if sf1 <= sf2 { (sf1, sf2) } else { (sf2, sf1) };
                prop_assert!(m(plo, sf1) <= m(phi, sf1));
                prop_assert!(m(pf1, shi) <= m(pf1, slo));
            }
        }
    }
}
