//! Physical parameters and the shared one-zone thermal kernel.
//!
//! Energies crossing the public API are in Wh (or kWh for prices), powers in
//! W, temperatures in °C and heat capacities in J/K. The factor 3600 J/Wh is
//! applied explicitly wherever Wh meet J/K.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SLOT_SECONDS: f64 = 1800.0;
pub const SLOTS_PER_WEEK: usize = 336;
pub const SLOTS_PER_DAY: usize = 48;
pub const J_PER_WH: f64 = 3600.0;

const WEEK_SECONDS: f64 = 7.0 * 24.0 * 3600.0;

/// One simulated week of exogenous inputs, one entry per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekData {
    pub slot_duration: f64,
    /// €/kWh
    pub price: Vec<f64>,
    /// Wh per slot
    pub heat_demand: Vec<f64>,
    /// average W per slot
    pub inflexible_demand: Vec<f64>,
    /// °C
    pub outside_temp: Vec<f64>,
}

impl WeekData {
    pub fn num_slots(&self) -> usize {
        self.price.len()
    }

    /// Builds a week with arbitrary length. Used for short oracle instances;
    /// [`validate_week_data`] still reports such weeks as malformed.
    pub fn from_series(
        slot_duration: f64,
        price: Vec<f64>,
        heat_demand: Vec<f64>,
        inflexible_demand: Vec<f64>,
        outside_temp: Vec<f64>,
    ) -> Result<Self> {
        let n = price.len();
        if heat_demand.len() != n || inflexible_demand.len() != n || outside_temp.len() != n {
            return Err(Error::Shape(format!(
                "series lengths differ: price {}, heat {}, inflexible {}, outside {}",
                n,
                heat_demand.len(),
                inflexible_demand.len(),
                outside_temp.len()
            )));
        }
        if slot_duration <= 0.0 {
            return Err(Error::InvalidSpec("slot_duration must be positive".into()));
        }
        Ok(Self {
            slot_duration,
            price,
            heat_demand,
            inflexible_demand,
            outside_temp,
        })
    }

    pub fn total_heat_demand_kwh(&self) -> f64 {
        self.heat_demand.iter().sum::<f64>() / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildingSpec {
    /// m²
    pub living_area: f64,
    /// m³
    pub ufh_volume: f64,
    /// kg/m³
    pub concrete_density: f64,
    /// J/(kg·K)
    pub concrete_specific_heat: f64,
    pub temp_min: f64,
    pub temp_max: f64,
    /// Constant loss of the heating system, W.
    pub ufh_loss: f64,
    pub initial_temp: f64,
    /// kWh/(m²·yr), cluster label.
    pub annual_specific_demand: f64,
}

pub const UFH_CONCRETE_THICKNESS: f64 = 0.07;

impl Default for BuildingSpec {
    /// Multi-family house: 12 apartments of 75 m² with a 7 cm screed.
    fn default() -> Self {
        let living_area = 12.0 * 75.0;
        Self {
            living_area,
            ufh_volume: living_area * UFH_CONCRETE_THICKNESS,
            concrete_density: 2400.0,
            concrete_specific_heat: 1000.0,
            temp_min: 20.5,
            temp_max: 23.5,
            ufh_loss: 45.0,
            initial_temp: 22.0,
            annual_specific_demand: 50.0,
        }
    }
}

impl BuildingSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("living_area", self.living_area),
            ("ufh_volume", self.ufh_volume),
            ("concrete_density", self.concrete_density),
            ("concrete_specific_heat", self.concrete_specific_heat),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidSpec(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.temp_min < self.temp_max) {
            return Err(Error::InvalidSpec(format!(
                "temp_min {} must be below temp_max {}",
                self.temp_min, self.temp_max
            )));
        }
        if self.initial_temp < self.temp_min || self.initial_temp > self.temp_max {
            return Err(Error::InvalidSpec(format!(
                "initial_temp {} outside [{}, {}]",
                self.initial_temp, self.temp_min, self.temp_max
            )));
        }
        if self.ufh_loss < 0.0 {
            return Err(Error::InvalidSpec("ufh_loss must be non-negative".into()));
        }
        Ok(())
    }

    /// Heat-system loss over one slot, Wh.
    pub fn loss_wh(&self, dt: f64) -> f64 {
        self.ufh_loss * dt / 3600.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatPumpSpec {
    /// W electrical
    pub p_max: f64,
    pub mod_min: f64,
    /// Per simulated week.
    pub max_switch_offs: u32,
    pub supply_temp: f64,
    /// (temperature lift K, COP), strictly increasing in lift.
    pub cop_table: Vec<(f64, f64)>,
}

impl Default for HeatPumpSpec {
    fn default() -> Self {
        Self {
            p_max: 3000.0,
            mod_min: 0.2,
            max_switch_offs: 28,
            supply_temp: 30.0,
            cop_table: vec![(20.0, 4.0), (30.0, 3.25), (40.0, 2.5)],
        }
    }
}

impl HeatPumpSpec {
    /// `units` identical heat pumps operated as one device.
    pub fn aggregated(units: u32) -> Self {
        let single = Self::default();
        Self {
            p_max: single.p_max * units as f64,
            ..single
        }
    }

    /// Aggregated heat pump used for a demand cluster (25, 50 or 80 kWh/m²·yr).
    pub fn for_cluster(base_demand: f64) -> Self {
        let units = if base_demand <= 25.0 {
            3
        } else if base_demand <= 50.0 {
            4
        } else {
            6
        };
        Self::aggregated(units)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_max > 0.0) {
            return Err(Error::InvalidSpec(format!("p_max must be positive, got {}", self.p_max)));
        }
        if !(self.mod_min > 0.0 && self.mod_min <= 1.0) {
            return Err(Error::InvalidSpec(format!("mod_min must lie in (0, 1], got {}", self.mod_min)));
        }
        if self.cop_table.is_empty() {
            return Err(Error::InvalidSpec("cop_table is empty".into()));
        }
        for w in self.cop_table.windows(2) {
            let ((l0, c0), (l1, c1)) = (w[0], w[1]);
            if !(l1 > l0) {
                return Err(Error::InvalidSpec("cop_table lifts must be strictly increasing".into()));
            }
            if !(c1 < c0) {
                return Err(Error::InvalidSpec("cop_table COPs must be strictly decreasing".into()));
            }
        }
        if let Some(&(_, c)) = self.cop_table.iter().find(|&&(_, c)| !(c > 1.0)) {
            return Err(Error::InvalidSpec(format!("COP must exceed 1, got {c}")));
        }
        Ok(())
    }

    /// True if `x` is an admissible modulation: 0 or within [mod_min, 1].
    pub fn is_admissible(&self, x: f64) -> bool {
        x == 0.0 || (x >= self.mod_min && x <= 1.0)
    }
}

/// Controller-visible thermal state at the start of a slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalState {
    pub slot_index: usize,
    pub building_temp: f64,
    pub hp_on: bool,
    pub switch_offs_used: u32,
    pub starts_today: u32,
}

/// Building plus heat pump, as read from a plant config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    pub building: BuildingSpec,
    pub heat_pump: HeatPumpSpec,
}

impl PlantConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.building.validate()?;
        cfg.heat_pump.validate()?;
        Ok(cfg)
    }
}

/// Heat capacity of the screed, J/K.
pub fn thermal_capacity(building: &BuildingSpec) -> Result<f64> {
    let (v, rho, c) = (building.ufh_volume, building.concrete_density, building.concrete_specific_heat);
    if !(v > 0.0 && rho > 0.0 && c > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "thermal capacity needs positive volume, density and specific heat (got {v}, {rho}, {c})"
        )));
    }
    Ok(v * rho * c)
}

/// COP for the lift `supply_temp - outside_temp`, linear between breakpoints
/// and clamped at both ends.
pub fn cop_at(hp: &HeatPumpSpec, outside_temp: f64) -> Result<f64> {
    let table = &hp.cop_table;
    let (first, last) = match (table.first(), table.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::InvalidSpec("cop_table is empty".into())),
    };
    let lift = hp.supply_temp - outside_temp;
    if lift <= first.0 {
        return Ok(first.1);
    }
    if lift >= last.0 {
        return Ok(last.1);
    }
    let i = table.partition_point(|&(l, _)| l <= lift);
    let (l0, c0) = table[i - 1];
    let (l1, c1) = table[i];
    Ok(c0 + (c1 - c0) * (lift - l0) / (l1 - l0))
}

/// Heat delivered in one slot, Wh.
pub fn heat_output(hp: &HeatPumpSpec, x: f64, cop: f64, dt: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("modulation {x} outside [0, 1]")));
    }
    Ok(x * hp.p_max * cop * dt / 3600.0)
}

/// Advances the building temperature by one slot.
pub fn step_temperature(state_temp: f64, heat_in: f64, demand: f64, loss: f64, capacity: f64) -> f64 {
    state_temp + temperature_delta(heat_in, demand, loss, capacity)
}

/// Temperature change, K, caused by a net energy flow (Wh) into the screed.
pub fn temperature_delta(heat_in: f64, demand: f64, loss: f64, capacity: f64) -> f64 {
    debug_assert!(capacity > 0.0);
    J_PER_WH * (heat_in - demand - loss) / capacity
}

/// Electricity cost of one slot, €.
pub fn slot_cost(x: f64, hp: &HeatPumpSpec, inflexible: f64, dt: f64, price: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("modulation {x} outside [0, 1]")));
    }
    if price < 0.0 || inflexible < 0.0 || hp.p_max < 0.0 {
        return Err(Error::Domain(format!(
            "negative price or power (price {price}, inflexible {inflexible}, p_max {})",
            hp.p_max
        )));
    }
    Ok((x * hp.p_max + inflexible) / 1000.0 * (dt / 3600.0) * price)
}

/// A broken rule, optionally located at a slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub slot: Option<usize>,
    pub rule: String,
    pub detail: String,
}

impl Violation {
    pub fn at(slot: usize, rule: &str, detail: impl Into<String>) -> Self {
        Self {
            slot: Some(slot),
            rule: rule.to_string(),
            detail: detail.into(),
        }
    }

    pub fn global(rule: &str, detail: impl Into<String>) -> Self {
        Self {
            slot: None,
            rule: rule.to_string(),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.slot {
            Some(s) => write!(f, "slot {s}: {} ({})", self.rule, self.detail),
            None => write!(f, "{} ({})", self.rule, self.detail),
        }
    }
}

pub fn validate_week_data(week: &WeekData) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = week.price.len();
    for (name, len) in [
        ("heat_demand", week.heat_demand.len()),
        ("inflexible_demand", week.inflexible_demand.len()),
        ("outside_temp", week.outside_temp.len()),
    ] {
        if len != n {
            out.push(Violation::global("length", format!("{name} has {len} entries, price has {n}")));
        }
    }
    let covered = n as f64 * week.slot_duration;
    if (covered - WEEK_SECONDS).abs() > 1e-6 {
        out.push(Violation::global(
            "length",
            format!("{n} slots of {} s do not cover one week", week.slot_duration),
        ));
    }
    for (t, &p) in week.price.iter().enumerate() {
        if !(p > 0.0) || !p.is_finite() {
            out.push(Violation::at(t, "price-positive", format!("price {p}")));
        }
    }
    for (t, &q) in week.heat_demand.iter().enumerate() {
        if !(q >= 0.0) || !q.is_finite() {
            out.push(Violation::at(t, "heat-demand-nonnegative", format!("heat demand {q}")));
        }
    }
    for (t, &p) in week.inflexible_demand.iter().enumerate() {
        if !(p >= 0.0) || !p.is_finite() {
            out.push(Violation::at(t, "inflexible-nonnegative", format!("inflexible demand {p}")));
        }
    }
    for (t, &v) in week.outside_temp.iter().enumerate() {
        if !v.is_finite() {
            out.push(Violation::at(t, "outside-temp-finite", format!("outside temp {v}")));
        }
    }
    let per_hour = (3600.0 / week.slot_duration).round() as usize;
    if per_hour > 1 {
        for (h, chunk) in week.price.chunks(per_hour).enumerate() {
            if chunk.iter().any(|&p| p != chunk[0]) {
                out.push(Violation::at(
                    h * per_hour,
                    "hourly-resolution",
                    format!("prices within hour {h} differ: {chunk:?}"),
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_hp() -> HeatPumpSpec {
        HeatPumpSpec {
            cop_table: vec![(20.0, 4.0), (40.0, 2.5)],
            ..HeatPumpSpec::default()
        }
    }

    fn flat_week() -> WeekData {
        let n = SLOTS_PER_WEEK;
        WeekData::from_series(SLOT_SECONDS, vec![0.3; n], vec![1000.0; n], vec![300.0; n], vec![0.0; n]).unwrap()
    }

    #[test]
    fn capacity_of_reference_building() {
        let b = BuildingSpec::default();
        assert!((b.ufh_volume - 63.0).abs() < 1e-12);
        let c = thermal_capacity(&b).unwrap();
        assert!((c - 1.512e8).abs() < 1e-3);
    }

    #[test]
    fn capacity_identity_and_degenerate() {
        let unit = BuildingSpec {
            ufh_volume: 1.0,
            concrete_density: 1.0,
            concrete_specific_heat: 1.0,
            ..BuildingSpec::default()
        };
        assert_eq!(thermal_capacity(&unit).unwrap(), 1.0);
        let zero = BuildingSpec {
            ufh_volume: 0.0,
            ..BuildingSpec::default()
        };
        assert!(matches!(thermal_capacity(&zero), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn cop_interpolation_and_clamping() {
        let hp = table_hp();
        assert_eq!(cop_at(&hp, 10.0).unwrap(), 4.0);
        assert!((cop_at(&hp, 0.0).unwrap() - 3.25).abs() < 1e-12);
        assert_eq!(cop_at(&hp, 20.0).unwrap(), 4.0);
        assert_eq!(cop_at(&hp, -30.0).unwrap(), 2.5);
        let empty = HeatPumpSpec {
            cop_table: vec![],
            ..HeatPumpSpec::default()
        };
        assert!(cop_at(&empty, 0.0).is_err());
    }

    #[test]
    fn shipped_cop_table_is_consistent() {
        let hp = HeatPumpSpec::default();
        hp.validate().unwrap();
        // middle breakpoint lies on the line between the outer two
        assert!((cop_at(&hp, 0.0).unwrap() - 3.25).abs() < 1e-12);
    }

    #[test]
    fn heat_output_examples() {
        let hp = HeatPumpSpec::default();
        assert!((heat_output(&hp, 1.0, 3.0, 1800.0).unwrap() - 4500.0).abs() < 1e-9);
        assert_eq!(heat_output(&hp, 0.0, 3.0, 1800.0).unwrap(), 0.0);
        assert!((heat_output(&hp, 0.2, 2.5, 1800.0).unwrap() - 750.0).abs() < 1e-9);
        assert!(matches!(heat_output(&hp, 1.2, 3.0, 1800.0), Err(Error::Domain(_))));
    }

    #[test]
    fn step_temperature_examples() {
        let cap = 1.512e8;
        assert_eq!(step_temperature(22.0, 100.0, 77.5, 22.5, cap), 22.0);
        assert!((step_temperature(22.0, 4500.0, 0.0, 22.5, cap) - 22.1066).abs() < 1e-4);
        assert!((step_temperature(22.0, 0.0, 4500.0, 0.0, cap) - 21.8929).abs() < 1e-4);
    }

    #[test]
    fn slot_cost_examples() {
        let hp = HeatPumpSpec::default();
        assert!((slot_cost(1.0, &hp, 500.0, 1800.0, 0.30).unwrap() - 0.525).abs() < 1e-12);
        assert_eq!(slot_cost(0.0, &hp, 0.0, 1800.0, 0.30).unwrap(), 0.0);
        assert!((slot_cost(0.5, &hp, 0.0, 1800.0, 0.40).unwrap() - 0.30).abs() < 1e-12);
        assert!(slot_cost(0.5, &hp, 0.0, 1800.0, -0.1).is_err());
        assert!(slot_cost(0.5, &hp, -5.0, 1800.0, 0.1).is_err());
    }

    #[test]
    fn week_validation() {
        assert!(validate_week_data(&flat_week()).is_empty());

        let mut short = flat_week();
        for s in [&mut short.price, &mut short.heat_demand, &mut short.inflexible_demand, &mut short.outside_temp] {
            s.pop();
        }
        let v = validate_week_data(&short);
        assert!(v.iter().any(|v| v.rule == "length"));

        let mut split = flat_week();
        split.price[11] = 0.31;
        let v = validate_week_data(&split);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "hourly-resolution");
        assert_eq!(v[0].slot, Some(10));

        let mut neg = flat_week();
        neg.heat_demand[3] = -1.0;
        assert!(validate_week_data(&neg).iter().any(|v| v.rule == "heat-demand-nonnegative"));
    }

    #[test]
    fn building_validation() {
        BuildingSpec::default().validate().unwrap();
        let bad = BuildingSpec {
            initial_temp: 25.0,
            ..BuildingSpec::default()
        };
        assert!(bad.validate().is_err());
        let inverted = BuildingSpec {
            temp_min: 24.0,
            ..BuildingSpec::default()
        };
        assert!(inverted.validate().is_err());
    }

    #[test]
    fn plant_config_from_toml() {
        let text = r#"
            [building]
            living_area = 900.0
            temp_min = 20.0

            [heat_pump]
            p_max = 12000.0
            cop_table = [[20.0, 4.0], [40.0, 2.5]]
        "#;
        let cfg: PlantConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.building.temp_min, 20.0);
        assert_eq!(cfg.building.temp_max, 23.5);
        assert_eq!(cfg.heat_pump.p_max, 12000.0);
        assert_eq!(cfg.heat_pump.cop_table.len(), 2);
        assert_eq!(cfg.heat_pump.max_switch_offs, 28);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn step_is_linear_in_net_energy(t0 in 15.0f64..25.0, net in -5000.0f64..5000.0, cap in 1e6f64..1e9) {
                let d1 = step_temperature(t0, net, 0.0, 0.0, cap) - t0;
                let d2 = step_temperature(t0, 2.0 * net, 0.0, 0.0, cap) - t0;
                prop_assert!((d2 - 2.0 * d1).abs() <= 1e-9 * (1.0 + d1.abs()));
            }

            #[test]
            fn energy_round_trip(t0 in 15.0f64..25.0, e in 0.0f64..10000.0, cap in 1e6f64..1e9) {
                let up = step_temperature(t0, e, 0.0, 0.0, cap);
                let back = step_temperature(up, 0.0, e, 0.0, cap);
                prop_assert!((back - t0).abs() < 1e-9);
            }

            #[test]
            fn cop_non_increasing_in_lift(
                mut lifts in proptest::collection::vec(0.0f64..60.0, 1..6),
                t_a in -30.0f64..30.0,
                t_b in -30.0f64..30.0,
            ) {
                lifts.sort_by(f64::total_cmp);
                lifts.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
                let table: Vec<(f64, f64)> = lifts.iter().enumerate().map(|(i, &l)| (l, 6.0 - 0.5 * i as f64)).collect();
                let hp = HeatPumpSpec { cop_table: table, ..HeatPumpSpec::default() };
                hp.validate().unwrap();
                let (warm, cold) = if t_a >= t_b { (t_a, t_b) } else { (t_b, t_a) };
                // colder outside = larger lift = lower or equal COP
                prop_assert!(cop_at(&hp, cold).unwrap() <= cop_at(&hp, warm).unwrap() + 1e-12);
            }
        }
    }
}
