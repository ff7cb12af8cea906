//! Cost-optimal heat-pump schedules.
//!
//! The mixed-integer program (cost objective, comfort band, switch-off budget,
//! minimum modulation) is solved by forward dynamic programming over
//! `(temperature bin, switch-offs used, on/off)`. Each state carries the exact
//! continuous temperature of the cheapest path that reached it, so feasibility
//! and cost of the recovered schedule are exact; only the merging of paths
//! that land in the same bin is approximate.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    cop_at, heat_output, slot_cost, step_temperature, temperature_delta, thermal_capacity, validate_week_data, BuildingSpec,
    HeatPumpSpec, Violation, WeekData,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub modulation: Vec<f64>,
    pub on_trace: Vec<bool>,
    pub switch_off_trace: Vec<bool>,
    /// Building temperature at the end of each slot.
    pub temp_trace: Vec<f64>,
    pub total_cost: f64,
    pub switch_offs_total: u32,
}

impl Schedule {
    /// Re-simulates `actions` from the building's initial state. No
    /// constraint is enforced here; see [`validate_schedule`].
    pub fn from_actions(actions: &[f64], week: &WeekData, building: &BuildingSpec, hp: &HeatPumpSpec) -> Result<Self> {
        let n = week.num_slots();
        if actions.len() != n {
            return Err(Error::Shape(format!("{} actions for {n} slots", actions.len())));
        }
        let cap = thermal_capacity(building)?;
        let dt = week.slot_duration;
        let loss = building.loss_wh(dt);
        let mut temp = building.initial_temp;
        let mut prev_on = false;
        let mut s = Schedule {
            modulation: actions.to_vec(),
            on_trace: Vec::with_capacity(n),
            switch_off_trace: Vec::with_capacity(n),
            temp_trace: Vec::with_capacity(n),
            total_cost: 0.0,
            switch_offs_total: 0,
        };
        for (t, &x) in actions.iter().enumerate() {
            let cop = cop_at(hp, week.outside_temp[t])?;
            let heat = heat_output(hp, x, cop, dt)?;
            temp = step_temperature(temp, heat, week.heat_demand[t], loss, cap);
            let on = x > 0.0;
            let off = prev_on && !on;
            s.total_cost += slot_cost(x, hp, week.inflexible_demand[t], dt, week.price[t])?;
            s.switch_offs_total += off as u32;
            s.on_trace.push(on);
            s.switch_off_trace.push(off);
            s.temp_trace.push(temp);
            prev_on = on;
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.modulation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modulation.is_empty()
    }

    /// Temperature at the start of slot `t`.
    pub fn temp_before(&self, t: usize, initial_temp: f64) -> f64 {
        if t == 0 {
            initial_temp
        } else {
            self.temp_trace[t - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// K per temperature bin.
    pub temp_resolution: f64,
    /// Ascending admissible modulation levels.
    pub modulation_grid: Vec<f64>,
    /// € tolerance used when comparing against the exhaustive oracle.
    pub cost_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            temp_resolution: 0.01,
            modulation_grid: default_modulation_grid(0.2),
            cost_tolerance: 1e-9,
        }
    }
}

/// `{0, mod_min, mod_min + 0.1, ..., 1}`
pub fn default_modulation_grid(mod_min: f64) -> Vec<f64> {
    let mut grid = vec![0.0];
    let mut tenth = (mod_min * 10.0).ceil() as u32;
    if mod_min > 0.0 && (mod_min * 10.0 - (mod_min * 10.0).round()).abs() > 1e-9 {
        grid.push(mod_min);
    }
    while tenth <= 10 {
        let x = tenth as f64 / 10.0;
        if x >= mod_min {
            grid.push(x);
        }
        tenth += 1;
    }
    grid
}

impl SolverConfig {
    pub fn validate(&self, hp: &HeatPumpSpec) -> Result<()> {
        if !(self.temp_resolution > 0.0) {
            return Err(Error::Config("temp_resolution must be positive".into()));
        }
        let g = &self.modulation_grid;
        if g.first() != Some(&0.0) || g.last() != Some(&1.0) {
            return Err(Error::Config("modulation_grid must start at 0 and end at 1".into()));
        }
        if g.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("modulation_grid must be strictly increasing".into()));
        }
        if let Some(x) = g.iter().find(|&&x| x > 0.0 && x < hp.mod_min) {
            return Err(Error::Config(format!("modulation level {x} lies below mod_min {}", hp.mod_min)));
        }
        if g.len() > u8::MAX as usize {
            return Err(Error::Config("modulation_grid has too many levels".into()));
        }
        Ok(())
    }
}

/// Why no feasible schedule exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Infeasible {
    /// First slot at which every candidate path breaks a constraint.
    pub slot: usize,
    pub constraint: String,
    pub detail: String,
}

impl fmt::Display for Infeasible {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "infeasible at slot {}: {} ({})", self.slot, self.constraint, self.detail)
    }
}

/// Per-slot action tables shared by the solver and the oracle.
struct Instance {
    temp_min: f64,
    temp_max: f64,
    max_switch_offs: u32,
    grid: Vec<f64>,
    /// Temperature change of slot `t` under action `a`, at index
    /// `t * levels + a`. Adding it is exactly `step_temperature`.
    delta: Vec<f64>,
    /// cost[t * levels + a], €
    cost: Vec<f64>,
}

impl Instance {
    fn new(week: &WeekData, building: &BuildingSpec, hp: &HeatPumpSpec, grid: &[f64]) -> Result<Self> {
        building.validate()?;
        hp.validate()?;
        let capacity = thermal_capacity(building)?;
        let dt = week.slot_duration;
        let n = week.num_slots();
        let loss = building.loss_wh(dt);
        let mut delta = Vec::with_capacity(n * grid.len());
        let mut cost = Vec::with_capacity(n * grid.len());
        for t in 0..n {
            let cop = cop_at(hp, week.outside_temp[t])?;
            for &x in grid {
                let heat = heat_output(hp, x, cop, dt)?;
                delta.push(temperature_delta(heat, week.heat_demand[t], loss, capacity));
                cost.push(slot_cost(x, hp, week.inflexible_demand[t], dt, week.price[t])?);
            }
        }
        Ok(Self {
            temp_min: building.temp_min,
            temp_max: building.temp_max,
            max_switch_offs: hp.max_switch_offs,
            grid: grid.to_vec(),
            delta,
            cost,
        })
    }

    fn levels(&self) -> usize {
        self.grid.len()
    }

    #[inline]
    fn next_temp(&self, t: usize, a: usize, temp: f64) -> f64 {
        temp + self.delta[t * self.levels() + a]
    }

    #[inline]
    fn in_band(&self, temp: f64) -> bool {
        temp >= self.temp_min && temp <= self.temp_max
    }
}

const NO_PARENT: u32 = u32::MAX;

/// Solves the scheduling problem on the configured grids.
pub fn solve_optimal(
    week: &WeekData,
    building: &BuildingSpec,
    hp: &HeatPumpSpec,
    cfg: &SolverConfig,
) -> Result<Schedule> {
    let violations = validate_week_data(week);
    if !violations.is_empty() {
        return Err(Error::InvalidData(violations));
    }
    solve_unchecked(week, building, hp, cfg)
}

/// [`solve_optimal`] without the one-week shape check, for short instances.
pub fn solve_unchecked(
    week: &WeekData,
    building: &BuildingSpec,
    hp: &HeatPumpSpec,
    cfg: &SolverConfig,
) -> Result<Schedule> {
    cfg.validate(hp)?;
    let inst = Instance::new(week, building, hp, &cfg.modulation_grid)?;
    let n = week.num_slots();
    let levels = inst.levels();
    let bins = ((inst.temp_max - inst.temp_min) / cfg.temp_resolution).round() as usize + 1;
    let k_states = inst.max_switch_offs as usize + 1;
    let states = bins * k_states * 2;
    if states > u32::MAX as usize / 2 {
        return Err(Error::Config("temperature grid too fine for the state index".into()));
    }
    let index = |bin: usize, k: usize, on: bool| (bin * k_states + k) * 2 + on as usize;
    let inv_res = 1.0 / cfg.temp_resolution;
    let bin_of = |temp: f64| {
        let b = ((temp - inst.temp_min) * inv_res).round();
        (b.max(0.0) as usize).min(bins - 1)
    };

    let mut cur_cost = vec![f64::INFINITY; states];
    let mut cur_temp = vec![0.0f64; states];
    let mut next_cost = vec![f64::INFINITY; states];
    let mut next_temp = vec![0.0f64; states];
    let mut next_action = vec![0u8; states];
    // parent[t][s], action[t][s] for the label stored at state s after slot t
    let mut parent: Vec<Vec<u32>> = Vec::with_capacity(n);
    let mut action: Vec<Vec<u8>> = Vec::with_capacity(n);

    // the initial temperature need not sit on a bin; the label keeps it exactly
    let start = index(bin_of(building.initial_temp), 0, false);
    cur_cost[start] = 0.0;
    cur_temp[start] = building.initial_temp;
    let mut active: Vec<usize> = vec![start];

    for t in 0..n {
        next_cost.fill(f64::INFINITY);
        let mut par = vec![NO_PARENT; states];
        let mut band_fail = false;
        let mut switch_fail = false;
        for &s in &active {
            let on = s % 2 == 1;
            let k = (s / 2) % k_states;
            let (c0, temp) = (cur_cost[s], cur_temp[s]);
            for a in 0..levels {
                let x = inst.grid[a];
                let on_next = x > 0.0;
                let k_next = k + (on && !on_next) as usize;
                if k_next >= k_states {
                    switch_fail = true;
                    continue;
                }
                let temp_next = inst.next_temp(t, a, temp);
                if !inst.in_band(temp_next) {
                    band_fail = true;
                    continue;
                }
                let cost = c0 + inst.cost[t * levels + a];
                let ns = index(bin_of(temp_next), k_next, on_next);
                let better = if cost < next_cost[ns] {
                    true
                } else if cost == next_cost[ns] {
                    let (old_a, old_s) = (next_action[ns] as usize, par[ns] as usize);
                    let old_stayed = (old_s % 2 == 1) == on_next;
                    a < old_a || (a == old_a && on == on_next && !old_stayed)
                } else {
                    false
                };
                if better {
                    next_cost[ns] = cost;
                    next_temp[ns] = temp_next;
                    next_action[ns] = a as u8;
                    par[ns] = s as u32;
                }
            }
        }
        let mut next_active: Vec<usize> = (0..states).filter(|&s| par[s] != NO_PARENT).collect();
        if next_active.is_empty() {
            let (constraint, detail) = if band_fail {
                (
                    "temperature-band",
                    format!("no admissible action keeps the temperature in [{}, {}]", inst.temp_min, inst.temp_max),
                )
            } else if switch_fail {
                ("switch-off-limit", format!("switch-off budget {} exhausted", inst.max_switch_offs))
            } else {
                ("no-state", "no reachable state".to_string())
            };
            return Err(Error::Infeasible(Infeasible {
                slot: t,
                constraint: constraint.into(),
                detail,
            }));
        }
        let acts: Vec<u8> = next_action.clone();
        parent.push(par);
        action.push(acts);
        std::mem::swap(&mut cur_cost, &mut next_cost);
        std::mem::swap(&mut cur_temp, &mut next_temp);
        std::mem::swap(&mut active, &mut next_active);
    }

    let mut best = active[0];
    for &s in &active[1..] {
        if cur_cost[s] < cur_cost[best] {
            best = s;
        }
    }
    let mut actions = vec![0.0; n];
    let mut s = best;
    for t in (0..n).rev() {
        actions[t] = inst.grid[action[t][s] as usize];
        s = parent[t][s] as usize;
    }
    let schedule = Schedule::from_actions(&actions, week, building, hp)?;
    debug_assert_eq!(schedule.total_cost, cur_cost[best]);
    Ok(schedule)
}

pub const ORACLE_MAX_SLOTS: usize = 10;
pub const ORACLE_MAX_LEVELS: usize = 5;

/// Exhaustive search over every action tuple on the modulation grid. Among
/// equally cheap tuples the lexicographically smallest wins.
pub fn enumerate_oracle(
    week: &WeekData,
    building: &BuildingSpec,
    hp: &HeatPumpSpec,
    cfg: &SolverConfig,
) -> Result<Schedule> {
    let n = week.num_slots();
    if n > ORACLE_MAX_SLOTS || cfg.modulation_grid.len() > ORACLE_MAX_LEVELS {
        return Err(Error::TooLarge(format!(
            "{n} slots x {} levels (limit {ORACLE_MAX_SLOTS} x {ORACLE_MAX_LEVELS})",
            cfg.modulation_grid.len()
        )));
    }
    cfg.validate(hp)?;
    let inst = Instance::new(week, building, hp, &cfg.modulation_grid)?;

    struct Search<'a> {
        inst: &'a Instance,
        n: usize,
        path: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
        deepest: usize,
    }

    impl Search<'_> {
        fn visit(&mut self, t: usize, temp: f64, on: bool, k: u32, cost: f64) {
            self.deepest = self.deepest.max(t);
            if t == self.n {
                if self.best.as_ref().is_none_or(|(c, _)| cost < *c) {
                    self.best = Some((cost, self.path.clone()));
                }
                return;
            }
            let levels = self.inst.levels();
            for a in 0..levels {
                let on_next = self.inst.grid[a] > 0.0;
                let k_next = k + (on && !on_next) as u32;
                if k_next > self.inst.max_switch_offs {
                    continue;
                }
                let temp_next = self.inst.next_temp(t, a, temp);
                if !self.inst.in_band(temp_next) {
                    continue;
                }
                self.path.push(a);
                self.visit(t + 1, temp_next, on_next, k_next, cost + self.inst.cost[t * levels + a]);
                self.path.pop();
            }
        }
    }

    let mut search = Search {
        inst: &inst,
        n,
        path: Vec::with_capacity(n),
        best: None,
        deepest: 0,
    };
    search.visit(0, building.initial_temp, false, 0, 0.0);
    match search.best {
        Some((_, path)) => {
            let actions: Vec<f64> = path.iter().map(|&a| inst.grid[a]).collect();
            Schedule::from_actions(&actions, week, building, hp)
        }
        None => Err(Error::Infeasible(Infeasible {
            slot: search.deepest,
            constraint: "all-tuples".into(),
            detail: format!("every action tuple breaks a constraint by slot {}", search.deepest),
        })),
    }
}

const TEMP_REL_TOL: f64 = 1e-6;

/// Re-simulates the schedule's actions and checks every schedule invariant.
pub fn validate_schedule(
    s: &Schedule,
    week: &WeekData,
    building: &BuildingSpec,
    hp: &HeatPumpSpec,
) -> Result<Vec<Violation>> {
    let n = week.num_slots();
    let lens = [s.modulation.len(), s.on_trace.len(), s.switch_off_trace.len(), s.temp_trace.len()];
    if lens.iter().any(|&l| l != n) {
        return Err(Error::Shape(format!("schedule traces {lens:?} for {n} slots")));
    }
    let mut out = Vec::new();
    for (t, &x) in s.modulation.iter().enumerate() {
        if !(0.0..=1.0).contains(&x) {
            out.push(Violation::at(t, "modulation-range", format!("x = {x}")));
        } else if x > 0.0 && x < hp.mod_min {
            out.push(Violation::at(t, "min-modulation", format!("x = {x} < mod_min = {}", hp.mod_min)));
        }
    }
    if !out.is_empty() {
        // physics is undefined for out-of-range modulation
        return Ok(out);
    }
    let sim = Schedule::from_actions(&s.modulation, week, building, hp)?;
    let lo = building.temp_min - TEMP_REL_TOL * building.temp_min.abs();
    let hi = building.temp_max + TEMP_REL_TOL * building.temp_max.abs();
    for t in 0..n {
        if s.on_trace[t] != sim.on_trace[t] {
            out.push(Violation::at(t, "on-flag", format!("h_on = {} but x = {}", s.on_trace[t], s.modulation[t])));
        }
        if s.switch_off_trace[t] != sim.switch_off_trace[t] {
            out.push(Violation::at(t, "switch-off-flag", "inconsistent with on/off transitions"));
        }
        let temp = sim.temp_trace[t];
        if (s.temp_trace[t] - temp).abs() > 1e-6 {
            out.push(Violation::at(
                t,
                "temperature-trace",
                format!("reported {} vs simulated {temp}", s.temp_trace[t]),
            ));
        }
        if temp < lo || temp > hi {
            out.push(Violation::at(
                t,
                "temperature-band",
                format!("{temp} outside [{}, {}]", building.temp_min, building.temp_max),
            ));
        }
    }
    if s.switch_offs_total != sim.switch_offs_total {
        out.push(Violation::global(
            "switch-off-count",
            format!("reported {} vs counted {}", s.switch_offs_total, sim.switch_offs_total),
        ));
    }
    if sim.switch_offs_total > hp.max_switch_offs {
        out.push(Violation::global(
            "switch-off-limit",
            format!("{} switch-offs exceed the limit {}", sim.switch_offs_total, hp.max_switch_offs),
        ));
    }
    if (s.total_cost - sim.total_cost).abs() > 1e-9 * (1.0 + sim.total_cost.abs()) {
        out.push(Violation::global(
            "total-cost",
            format!("reported {} vs recomputed {}", s.total_cost, sim.total_cost),
        ));
    }
    Ok(out)
}

/// Objective value of a schedule, €.
pub fn schedule_cost(s: &Schedule, week: &WeekData, hp: &HeatPumpSpec) -> Result<f64> {
    if s.modulation.len() != week.num_slots() {
        return Err(Error::Shape(format!("{} actions for {} slots", s.modulation.len(), week.num_slots())));
    }
    let mut total = 0.0;
    for (t, &x) in s.modulation.iter().enumerate() {
        total += slot_cost(x, hp, week.inflexible_demand[t], week.slot_duration, week.price[t])?;
    }
    Ok(total)
}

/// `slot,x,h_on,h_switched_off,temp_c,slot_cost_eur`
pub fn write_schedule_csv<W: Write>(out: W, s: &Schedule, week: &WeekData, hp: &HeatPumpSpec) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["slot", "x", "h_on", "h_switched_off", "temp_c", "slot_cost_eur"])?;
    for t in 0..s.len() {
        let c = slot_cost(s.modulation[t], hp, week.inflexible_demand[t], week.slot_duration, week.price[t])?;
        w.write_record([
            t.to_string(),
            s.modulation[t].to_string(),
            (s.on_trace[t] as u8).to_string(),
            (s.switch_off_trace[t] as u8).to_string(),
            s.temp_trace[t].to_string(),
            c.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
