//! Closed-loop week simulation of heat-pump controllers.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imitation::{statistics_before, NormParams, StartsFeature};
use crate::model::{
    cop_at, heat_output, slot_cost, step_temperature, thermal_capacity, J_PER_WH, BuildingSpec, HeatPumpSpec, ThermalState,
    WeekData,
};
use crate::nn::{forward, MlpModel, ModelMeta};
use crate::psc::{guard_rules, guard_rules_with_outlook, GuardConfig, ProductRule, PscConfig, PscRule, SlotOutlook};
use crate::scheduler::Schedule;

/// What a controller may look at when deciding slot `slot`. Heat demand is
/// not part of it; the tariff is known in advance.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub slot: usize,
    pub building_temp: f64,
    pub outside_temp: f64,
    pub prices: &'a [f64],
    pub starts_today: u32,
    pub switch_offs_used: u32,
    pub hp_running: bool,
}

impl Observation<'_> {
    pub fn thermal_state(&self) -> ThermalState {
        ThermalState {
            slot_index: self.slot,
            building_temp: self.building_temp,
            hp_on: self.hp_running,
            switch_offs_used: self.switch_offs_used,
            starts_today: self.starts_today,
        }
    }
}

pub trait Controller: Send + Sync {
    fn name(&self) -> &str;

    fn decide(&self, obs: &Observation, building: &BuildingSpec, hp: &HeatPumpSpec) -> Result<f64>;

    /// Whether the simulator wraps decisions in the guard rules.
    fn uses_guards(&self) -> bool {
        true
    }
}

/// Price-blind thermostat with hysteresis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Conventional {
    pub on_below: f64,
    pub off_above: f64,
}

impl Default for Conventional {
    fn default() -> Self {
        Self {
            on_below: 21.0,
            off_above: 22.0,
        }
    }
}

impl Conventional {
    pub fn decide_at(&self, temp: f64, running: bool) -> f64 {
        if temp <= self.on_below || (running && temp < self.off_above) {
            1.0
        } else {
            0.0
        }
    }
}

impl Controller for Conventional {
    fn name(&self) -> &str {
        "conventional"
    }

    fn decide(&self, obs: &Observation, _: &BuildingSpec, _: &HeatPumpSpec) -> Result<f64> {
        Ok(self.decide_at(obs.building_temp, obs.hp_running))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Psc<R = ProductRule> {
    pub config: PscConfig,
    pub rule: R,
}

impl<R: PscRule> Controller for Psc<R> {
    fn name(&self) -> &str {
        "psc"
    }

    fn decide(&self, obs: &Observation, building: &BuildingSpec, hp: &HeatPumpSpec) -> Result<f64> {
        let f = self.config.factors(obs.prices, obs.slot, obs.building_temp, building)?;
        Ok(self.rule.modulation(f, hp))
    }
}

/// PSC factors plus run statistics fed through a trained regressor.
#[derive(Debug, Clone)]
pub struct PscAnn {
    pub model: MlpModel,
    pub norm: NormParams,
    pub config: PscConfig,
    pub starts: StartsFeature,
}

impl PscAnn {
    /// Fails if `norm` is not the scaling the model was trained with.
    pub fn new(
        model: MlpModel,
        norm: NormParams,
        meta: &ModelMeta,
        config: PscConfig,
        starts: StartsFeature,
    ) -> Result<Self> {
        if meta.normalization_checksum != norm.checksum() {
            return Err(Error::Config(format!(
                "normalization checksum {:016x} does not match the model's {:016x}",
                norm.checksum(),
                meta.normalization_checksum
            )));
        }
        if model.spec.input_dim != 5 || model.spec.output_dim != 1 {
            return Err(Error::Config(format!(
                "model maps {} inputs to {} outputs, expected 5 to 1",
                model.spec.input_dim, model.spec.output_dim
            )));
        }
        Ok(Self {
            model,
            norm,
            config,
            starts,
        })
    }

    pub fn features(&self, obs: &Observation, building: &BuildingSpec) -> Result<[f64; 5]> {
        let f = self.config.factors(obs.prices, obs.slot, obs.building_temp, building)?;
        Ok([
            f.price_factor,
            f.storage_factor,
            self.norm.scale_temp(obs.outside_temp),
            self.norm.scale_starts(self.starts.pick(obs.starts_today, obs.switch_offs_used)),
            if obs.hp_running { 1.0 } else { 0.0 },
        ])
    }
}

impl Controller for PscAnn {
    fn name(&self) -> &str {
        "psc-ann"
    }

    fn decide(&self, obs: &Observation, building: &BuildingSpec, _: &HeatPumpSpec) -> Result<f64> {
        let y = forward(&self.model, &self.features(obs, building)?)?;
        Ok(y.clamp(0.0, 1.0))
    }
}

/// Open-loop replay of a precomputed action sequence, without guards.
#[derive(Debug, Clone)]
pub struct Replay {
    pub label: String,
    pub actions: Vec<f64>,
}

impl Replay {
    pub fn optimal(schedule: &Schedule) -> Self {
        Self {
            label: "optimal".into(),
            actions: schedule.modulation.clone(),
        }
    }
}

impl Controller for Replay {
    fn name(&self) -> &str {
        &self.label
    }

    fn decide(&self, obs: &Observation, _: &BuildingSpec, _: &HeatPumpSpec) -> Result<f64> {
        self.actions
            .get(obs.slot)
            .copied()
            .ok_or_else(|| Error::Shape(format!("replay has {} actions, slot {} requested", self.actions.len(), obs.slot)))
    }

    fn uses_guards(&self) -> bool {
        false
    }
}

/// Proposes the same modulation in every slot.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl Controller for Constant {
    fn name(&self) -> &str {
        "constant"
    }

    fn decide(&self, _: &Observation, _: &BuildingSpec, _: &HeatPumpSpec) -> Result<f64> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub guard: GuardConfig,
    /// Used for the factor columns of the trace.
    pub psc: PscConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub slot: usize,
    pub price: f64,
    /// End of slot.
    pub temp_c: f64,
    pub x: f64,
    pub pf: f64,
    pub sf: f64,
    pub starts_today: u32,
    pub h_on: bool,
    pub cost_eur: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub controller: String,
    pub schedule: Schedule,
    pub total_cost: f64,
    /// Slots ending outside the comfort band, no tolerance.
    pub comfort_violations: usize,
    pub switch_offs_total: u32,
    pub trace: Vec<TraceRow>,
}

impl SimulationResult {
    pub fn temp_range(&self) -> (f64, f64) {
        self.schedule
            .temp_trace
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| (lo.min(t), hi.max(t)))
    }

    pub fn summary(&self) -> SimulationSummary {
        let (temp_min, temp_max) = self.temp_range();
        SimulationSummary {
            controller: self.controller.clone(),
            total_cost: self.total_cost,
            comfort_violations: self.comfort_violations,
            switch_offs_total: self.switch_offs_total,
            temp_min,
            temp_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub controller: String,
    pub total_cost: f64,
    pub comfort_violations: usize,
    pub switch_offs_total: u32,
    pub temp_min: f64,
    pub temp_max: f64,
}

pub fn simulate_week(
    controller: &dyn Controller,
    week: &WeekData,
    building: &BuildingSpec,
    hp: &HeatPumpSpec,
    cfg: &SimConfig,
) -> Result<SimulationResult> {
    building.validate()?;
    hp.validate()?;
    let n = week.num_slots();
    let cap = thermal_capacity(building)?;
    let dt = week.slot_duration;
    let loss = building.loss_wh(dt);

    let mut temp = building.initial_temp;
    let mut on_trace: Vec<bool> = Vec::with_capacity(n);
    let mut switch_offs = 0u32;
    let mut actions = Vec::with_capacity(n);
    let mut trace = Vec::with_capacity(n);
    let lossonly_delta = -loss * J_PER_WH / cap;
    // observed temperature change and heat-pump rise of the previous slot
    let mut last: Option<(f64, f64)> = None;

    for t in 0..n {
        let (starts_today, hp_running) = statistics_before(&on_trace, t);
        let obs = Observation {
            slot: t,
            building_temp: temp,
            outside_temp: week.outside_temp[t],
            prices: &week.price,
            starts_today,
            switch_offs_used: switch_offs,
            hp_running,
        };
        let proposed = controller.decide(&obs, building, hp)?;
        if !proposed.is_finite() {
            return Err(Error::Simulation {
                slot: t,
                msg: format!("{} proposed a non-finite modulation {proposed}", controller.name()),
            });
        }
        let cop = cop_at(hp, week.outside_temp[t])?;
        let rise_per_unit = heat_output(hp, 1.0, cop, dt)? * J_PER_WH / cap;
        let x = if !controller.uses_guards() {
            proposed
        } else if cfg.guard.anticipate {
            let outlook = SlotOutlook {
                passive_delta: last.map_or(lossonly_delta, |(observed, rise)| observed - rise),
                lossonly_delta,
                rise_per_unit,
                horizon: n,
            };
            guard_rules_with_outlook(proposed, &obs.thermal_state(), &outlook, building, hp, &cfg.guard)
        } else {
            guard_rules(proposed, &obs.thermal_state(), building, hp, &cfg.guard)
        };
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Simulation {
                slot: t,
                msg: format!("modulation {x} outside [0, 1]"),
            });
        }
        let f = cfg.psc.factors(&week.price, t, temp, building)?;
        let heat = heat_output(hp, x, cop, dt)?;
        let before = temp;
        temp = step_temperature(temp, heat, week.heat_demand[t], loss, cap);
        last = Some((temp - before, heat * J_PER_WH / cap));
        let on = x > 0.0;
        switch_offs += (hp_running && !on) as u32;
        on_trace.push(on);
        actions.push(x);
        trace.push(TraceRow {
            slot: t,
            price: week.price[t],
            temp_c: temp,
            x,
            pf: f.price_factor,
            sf: f.storage_factor,
            starts_today,
            h_on: on,
            cost_eur: slot_cost(x, hp, week.inflexible_demand[t], dt, week.price[t])?,
        });
    }

    let schedule = Schedule::from_actions(&actions, week, building, hp)?;
    let comfort_violations = schedule
        .temp_trace
        .iter()
        .filter(|&&t| t < building.temp_min || t > building.temp_max)
        .count();
    Ok(SimulationResult {
        controller: controller.name().to_string(),
        total_cost: schedule.total_cost,
        switch_offs_total: schedule.switch_offs_total,
        comfort_violations,
        schedule,
        trace,
    })
}

/// `slot,price,temp_c,x,pf,sf,starts_today,h_on,cost_eur`
pub fn write_trace_csv<W: Write>(out: W, result: &SimulationResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["slot", "price", "temp_c", "x", "pf", "sf", "starts_today", "h_on", "cost_eur"])?;
    for r in &result.trace {
        w.write_record([
            r.slot.to_string(),
            r.price.to_string(),
            r.temp_c.to_string(),
            r.x.to_string(),
            r.pf.to_string(),
            r.sf.to_string(),
            r.starts_today.to_string(),
            (r.h_on as u8).to_string(),
            r.cost_eur.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Cost reduction relative to `baseline`, percent. `None` for a zero-cost
/// baseline.
pub fn improvement_pct(baseline: f64, method: f64) -> Option<f64> {
    (baseline != 0.0).then(|| (baseline - method) / baseline * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub controller: String,
    pub cost: f64,
    pub improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub baseline: String,
    pub baseline_cost: f64,
    pub entries: Vec<ComparisonEntry>,
}

pub fn compare(baseline: &SimulationResult, others: &[&SimulationResult]) -> ComparisonRow {
    ComparisonRow {
        baseline: baseline.controller.clone(),
        baseline_cost: baseline.total_cost,
        entries: others
            .iter()
            .map(|r| ComparisonEntry {
                controller: r.controller.clone(),
                cost: r.total_cost,
                improvement_pct: improvement_pct(baseline.total_cost, r.total_cost),
            })
            .collect(),
    }
}
