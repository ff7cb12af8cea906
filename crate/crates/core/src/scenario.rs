//! Synthetic weeks, building clusters and week CSV I/O.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_week_data, WeekData, SLOTS_PER_DAY, SLOTS_PER_WEEK, SLOT_SECONDS};

/// Heating-season weeks per year used to spread annual demand.
pub const HEATING_WEEKS: f64 = 26.0;

/// Parameters of the synthetic winter-week generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeekProfile {
    /// Outside temperature band, °C.
    pub temp_low: f64,
    pub temp_high: f64,
    /// Heat demand is proportional to `heating_limit_temp - outside_temp`.
    pub heating_limit_temp: f64,
    /// Scaled weekly space-heating demand, kWh.
    pub target_weekly_kwh: f64,
    /// Mean tariff, €/kWh.
    pub price_base: f64,
    pub price_night_dip: f64,
    pub price_morning_peak: f64,
    pub price_evening_peak: f64,
    /// Hourly noise standard deviation, €/kWh.
    pub price_noise: f64,
    pub price_floor: f64,
    /// Inflexible electric load of the whole building, W.
    pub inflexible_base_w: f64,
    pub inflexible_peak_w: f64,
}

impl Default for WeekProfile {
    fn default() -> Self {
        Self {
            temp_low: -5.0,
            temp_high: 10.0,
            heating_limit_temp: 20.0,
            target_weekly_kwh: annual_to_weekly_target(50.0, 900.0, 1.0 / HEATING_WEEKS),
            price_base: 0.30,
            price_night_dip: 0.08,
            price_morning_peak: 0.07,
            price_evening_peak: 0.10,
            price_noise: 0.02,
            price_floor: 0.05,
            inflexible_base_w: 1200.0,
            inflexible_peak_w: 1600.0,
        }
    }
}

impl WeekProfile {
    pub fn with_target(target_weekly_kwh: f64) -> Self {
        Self {
            target_weekly_kwh,
            ..Self::default()
        }
    }
}

fn gauss(hour: f64, centre: f64, width: f64) -> f64 {
    // circular distance on the 24 h clock
    let d = (hour - centre).rem_euclid(24.0);
    let d = d.min(24.0 - d);
    (-0.5 * (d / width).powi(2)).exp()
}

/// Deterministic synthetic week.
pub fn synth_week(seed: u64, profile: &WeekProfile) -> WeekData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = SLOTS_PER_WEEK;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    // outside temperature: weekly level + daily sinusoid + AR(1) weather noise
    let span = profile.temp_high - profile.temp_low;
    let mid = 0.5 * (profile.temp_low + profile.temp_high);
    let level = mid + rng.gen_range(-0.2..0.2) * span;
    let amplitude = 0.2 * span;
    let mut drift = 0.0;
    let mut outside_temp = Vec::with_capacity(n);
    for t in 0..n {
        let hour = (t % SLOTS_PER_DAY) as f64 / 2.0;
        drift = 0.98 * drift + 0.15 * unit.sample(&mut rng);
        // coldest around 05:00
        let daily = -amplitude * (2.0 * PI * (hour - 5.0) / 24.0).cos();
        let v = (level + daily + drift).clamp(profile.temp_low, profile.temp_high);
        outside_temp.push(v);
    }

    // space-heating demand: degree-slots with an occupancy bump, scaled to target
    let mut heat_demand: Vec<f64> = outside_temp
        .iter()
        .enumerate()
        .map(|(t, &temp)| {
            let hour = (t % SLOTS_PER_DAY) as f64 / 2.0;
            let occupancy = 1.0 + 0.1 * gauss(hour, 7.0, 1.5) + 0.1 * gauss(hour, 19.0, 2.5);
            let jitter = 1.0 + 0.05 * unit.sample(&mut rng);
            ((profile.heating_limit_temp - temp) * occupancy * jitter).max(0.0)
        })
        .collect();
    let raw_total: f64 = heat_demand.iter().sum();
    let target_wh = profile.target_weekly_kwh * 1000.0;
    if raw_total > 0.0 {
        let f = target_wh / raw_total;
        heat_demand.iter_mut().for_each(|q| *q *= f);
    }

    // hourly tariff: night dip, morning and evening peaks, per-day level, noise
    let mut price = Vec::with_capacity(n);
    for _day in 0..7 {
        let day_level = profile.price_base + 0.03 * unit.sample(&mut rng);
        for h in 0..24 {
            let hour = h as f64 + 0.5;
            let p = day_level - profile.price_night_dip * gauss(hour, 3.0, 2.5)
                + profile.price_morning_peak * gauss(hour, 8.0, 1.5)
                + profile.price_evening_peak * gauss(hour, 19.0, 2.0)
                - 0.03 * gauss(hour, 13.5, 2.0)
                + profile.price_noise * unit.sample(&mut rng);
            // rounded to 0.1 ct like published tariffs
            let p = (p.max(profile.price_floor) * 1000.0).round() / 1000.0;
            price.push(p);
            price.push(p);
        }
    }

    let inflexible_demand = (0..n)
        .map(|t| {
            let hour = (t % SLOTS_PER_DAY) as f64 / 2.0;
            let shape = 0.6 * gauss(hour, 7.5, 1.2) + gauss(hour, 19.5, 2.0);
            let noise = 1.0 + 0.1 * unit.sample(&mut rng);
            ((profile.inflexible_base_w + profile.inflexible_peak_w * shape) * noise).max(0.0)
        })
        .collect();

    WeekData {
        slot_duration: SLOT_SECONDS,
        price,
        heat_demand,
        inflexible_demand,
        outside_temp,
    }
}

/// Weekly heating energy, kWh, for an annual specific demand.
pub fn annual_to_weekly_target(base: f64, area: f64, week_weight: f64) -> f64 {
    debug_assert!(week_weight > 0.0 && week_weight <= 1.0);
    base * area * week_weight
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    /// kWh/(m²·yr)
    pub base_demand: f64,
    pub num_buildings: usize,
    /// Largest circular shift of the heat-demand series, slots.
    pub max_shift: usize,
    /// Largest deviation of a member's annual specific demand, kWh/(m²·yr).
    pub demand_tolerance: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            base_demand: 50.0,
            num_buildings: 6,
            max_shift: 24,
            demand_tolerance: 5.0,
            seed: 0,
        }
    }
}

/// How one cluster member is derived from the base demand series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub id: usize,
    /// Positive values delay the demand series.
    pub shift: i64,
    pub scale: f64,
    pub annual_specific_demand: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterManifest {
    pub spec: ClusterSpec,
    pub members: Vec<ClusterMember>,
}

impl ClusterSpec {
    /// Seeded shift and scale per building; identical for every week.
    pub fn members(&self) -> Vec<ClusterMember> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let rel = self.demand_tolerance / self.base_demand;
        let max_shift = self.max_shift as i64;
        (0..self.num_buildings)
            .map(|id| {
                let shift = if max_shift > 0 { rng.gen_range(-max_shift..=max_shift) } else { 0 };
                let scale = if rel > 0.0 { rng.gen_range(1.0 - rel..=1.0 + rel) } else { 1.0 };
                ClusterMember {
                    id,
                    shift,
                    scale,
                    annual_specific_demand: self.base_demand * scale,
                }
            })
            .collect()
    }

    pub fn manifest(&self) -> ClusterManifest {
        ClusterManifest {
            spec: self.clone(),
            members: self.members(),
        }
    }
}

/// Applies a member's shift and scale to the heat-demand series of `base`.
pub fn derive_member(base: &WeekData, member: &ClusterMember) -> WeekData {
    let n = base.num_slots() as i64;
    let heat_demand = (0..n)
        .map(|t| base.heat_demand[(t - member.shift).rem_euclid(n) as usize] * member.scale)
        .collect();
    WeekData {
        heat_demand,
        ..base.clone()
    }
}

/// One week per cluster member. Prices and weather are shared.
pub fn make_cluster(base_week: &WeekData, spec: &ClusterSpec) -> Result<Vec<WeekData>> {
    if spec.max_shift >= base_week.num_slots() {
        return Err(Error::Config(format!(
            "max_shift {} must be below the {} slots of a week",
            spec.max_shift,
            base_week.num_slots()
        )));
    }
    Ok(spec.members().iter().map(|m| derive_member(base_week, m)).collect())
}

const WEEK_HEADER: [&str; 5] = ["slot", "price_eur_per_kwh", "heat_demand_wh", "inflexible_w", "outside_temp_c"];

pub fn write_week_csv<W: Write>(out: W, week: &WeekData) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(WEEK_HEADER)?;
    for t in 0..week.num_slots() {
        w.write_record([
            t.to_string(),
            week.price[t].to_string(),
            week.heat_demand[t].to_string(),
            week.inflexible_demand[t].to_string(),
            week.outside_temp[t].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_week_csv(path: impl AsRef<Path>, week: &WeekData) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_week_csv(std::io::BufWriter::new(file), week)
}

/// Parses a week CSV without checking the week invariants.
pub fn read_week_csv<R: Read>(input: R, path: &Path) -> Result<WeekData> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r?,
        None => return Err(parse_err(1, "empty file".into())),
    };
    if header.iter().map(str::trim).ne(WEEK_HEADER.iter().copied()) {
        return Err(parse_err(1, format!("expected header {:?}, got {:?}", WEEK_HEADER.join(","), header.as_slice())));
    }
    let (mut price, mut heat, mut infl, mut outside) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != WEEK_HEADER.len() {
            return Err(parse_err(line, format!("expected {} columns, got {}", WEEK_HEADER.len(), rec.len())));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("column {}: {e} ({:?})", WEEK_HEADER[i], &rec[i])))
        };
        let slot: usize = rec[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(line, format!("slot: {e} ({:?})", &rec[0])))?;
        if slot != price.len() {
            return Err(parse_err(line, format!("expected slot {}, got {slot}", price.len())));
        }
        price.push(num(1)?);
        heat.push(num(2)?);
        infl.push(num(3)?);
        outside.push(num(4)?);
    }
    WeekData::from_series(SLOT_SECONDS, price, heat, infl, outside)
}

/// Reads and validates a week CSV.
pub fn load_week_csv(path: impl AsRef<Path>) -> Result<WeekData> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let week = read_week_csv(std::io::BufReader::new(file), path)?;
    let violations = validate_week_data(&week);
    if !violations.is_empty() {
        return Err(Error::InvalidData(violations));
    }
    Ok(week)
}
