//! Supervised data for imitating optimal schedules.
//!
//! Row `t` describes what a controller sees when it has to choose `x_t`: the
//! temperature at the start of the slot and the run statistics up to slot
//! `t - 1`. The label is the optimal `x_t`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnv1a;
use crate::model::{BuildingSpec, HeatPumpSpec, WeekData, SLOTS_PER_DAY};
use crate::nn::Samples;
use crate::psc::PscConfig;
use crate::scheduler::{validate_schedule, Schedule};

/// Features before scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawFeatureRow {
    pub price_factor: f64,
    pub storage_factor: f64,
    pub outside_temp: f64,
    /// Count selected by [`StartsFeature`].
    pub starts_today: u32,
    pub hp_running: bool,
    pub label: f64,
}

/// Scaled model inputs plus the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub price_factor: f64,
    pub storage_factor: f64,
    pub outside_temp_norm: f64,
    pub starts_today_norm: f64,
    pub hp_running: f64,
    pub label: f64,
}

impl FeatureRow {
    pub fn inputs(&self) -> [f64; 5] {
        [
            self.price_factor,
            self.storage_factor,
            self.outside_temp_norm,
            self.starts_today_norm,
            self.hp_running,
        ]
    }
}

/// Starts (off to on transitions) within the 24 h window ending at slot `t`,
/// and whether the heat pump runs in slot `t`. The week starts with the heat
/// pump off.
pub fn run_statistics(schedule: &Schedule, t: usize) -> (u32, bool) {
    run_statistics_of(&schedule.on_trace, t)
}

pub fn run_statistics_of(on_trace: &[bool], t: usize) -> (u32, bool) {
    let first = (t + 1).saturating_sub(SLOTS_PER_DAY);
    let starts = (first..=t)
        .filter(|&tau| on_trace[tau] && (tau == 0 || !on_trace[tau - 1]))
        .count() as u32;
    (starts, on_trace[t])
}

/// Run statistics observable when deciding slot `t` (through slot `t - 1`).
pub fn statistics_before(on_trace: &[bool], t: usize) -> (u32, bool) {
    if t == 0 {
        (0, false)
    } else {
        run_statistics_of(on_trace, t - 1)
    }
}

/// What the start-count input counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartsFeature {
    /// Starts within the trailing 24 h.
    #[default]
    #[serde(rename = "trailing-24h-starts")]
    TrailingDayStarts,
    /// Switch-offs since the start of the week.
    WeeklySwitchOffs,
}

impl StartsFeature {
    pub fn label(self) -> &'static str {
        match self {
            Self::TrailingDayStarts => "trailing-24h-starts",
            Self::WeeklySwitchOffs => "weekly-switch-offs",
        }
    }

    /// The count for a controller whose run statistics are `starts_today`
    /// and `switch_offs_used`.
    pub fn pick(self, starts_today: u32, switch_offs_used: u32) -> u32 {
        match self {
            Self::TrailingDayStarts => starts_today,
            Self::WeeklySwitchOffs => switch_offs_used,
        }
    }
}

/// One row per slot of a validated schedule.
pub fn extract_features(
    schedule: &Schedule,
    week: &WeekData,
    building: &BuildingSpec,
    hp: &HeatPumpSpec,
    psc: &PscConfig,
    starts: StartsFeature,
) -> Result<Vec<RawFeatureRow>> {
    let violations = validate_schedule(schedule, week, building, hp)?;
    if !violations.is_empty() {
        return Err(Error::InvalidSchedule(violations));
    }
    let mut switch_offs = 0;
    (0..week.num_slots())
        .map(|t| {
            if t > 0 {
                switch_offs += schedule.switch_off_trace[t - 1] as u32;
            }
            let temp = schedule.temp_before(t, building.initial_temp);
            let f = psc.factors(&week.price, t, temp, building)?;
            let (starts_today, hp_running) = statistics_before(&schedule.on_trace, t);
            Ok(RawFeatureRow {
                price_factor: f.price_factor,
                storage_factor: f.storage_factor,
                outside_temp: week.outside_temp[t],
                starts_today: starts.pick(starts_today, switch_offs),
                hp_running,
                label: schedule.modulation[t],
            })
        })
        .collect()
}

/// Min/max scaling of the outside temperature and max scaling of the start
/// count, fitted on training rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub outside_temp_min: f64,
    pub outside_temp_max: f64,
    /// At least 1.
    pub starts_max: f64,
}

impl NormParams {
    pub fn fit(rows: &[RawFeatureRow]) -> Self {
        let (lo, hi) = rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.outside_temp), hi.max(r.outside_temp)));
        let starts = rows.iter().map(|r| r.starts_today).max().unwrap_or(0);
        let (lo, hi) = if rows.is_empty() { (0.0, 0.0) } else { (lo, hi) };
        Self {
            outside_temp_min: lo,
            outside_temp_max: hi,
            starts_max: (starts as f64).max(1.0),
        }
    }

    /// A constant column maps to 0.5.
    pub fn scale_temp(&self, temp: f64) -> f64 {
        let range = self.outside_temp_max - self.outside_temp_min;
        if range <= 0.0 {
            0.5
        } else {
            ((temp - self.outside_temp_min) / range).clamp(0.0, 1.0)
        }
    }

    pub fn unscale_temp(&self, v: f64) -> f64 {
        self.outside_temp_min + v * (self.outside_temp_max - self.outside_temp_min)
    }

    pub fn scale_starts(&self, starts: u32) -> f64 {
        (starts as f64 / self.starts_max.max(1.0)).clamp(0.0, 1.0)
    }

    pub fn apply(&self, r: &RawFeatureRow) -> FeatureRow {
        FeatureRow {
            price_factor: r.price_factor,
            storage_factor: r.storage_factor,
            outside_temp_norm: self.scale_temp(r.outside_temp),
            starts_today_norm: self.scale_starts(r.starts_today),
            hp_running: if r.hp_running { 1.0 } else { 0.0 },
            label: r.label,
        }
    }

    pub fn checksum(&self) -> u64 {
        fnv1a(
            [self.outside_temp_min, self.outside_temp_max, self.starts_max]
                .into_iter()
                .flat_map(f64::to_le_bytes),
        )
    }
}

/// Scales `rows` with `params`, or with parameters fitted on `rows`.
pub fn normalize(rows: &[RawFeatureRow], params: Option<&NormParams>) -> (Vec<FeatureRow>, NormParams) {
    let params = params.copied().unwrap_or_else(|| NormParams::fit(rows));
    (rows.iter().map(|r| params.apply(r)).collect(), params)
}

/// Deterministic shuffle, then `ceil(ratio * n)` rows for training.
pub fn split_train_val<T: Clone>(rows: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if rows.is_empty() {
        return Err(Error::Config("cannot split an empty row set".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // guard against 0.7 * 10 = 7.000000000000001
    let n_train = ((ratio * rows.len() as f64) - 1e-9).ceil() as usize;
    let n_train = n_train.clamp(1, rows.len());
    let train = idx[..n_train].iter().map(|&i| rows[i].clone()).collect();
    let val = idx[n_train..].iter().map(|&i| rows[i].clone()).collect();
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub cluster: String,
    pub building_id: usize,
    pub week_ids: Vec<u64>,
    pub seed: u64,
    /// How the start-count feature is defined.
    pub starts_feature: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<FeatureRow>,
    pub val: Vec<FeatureRow>,
    pub normalization: NormParams,
    pub provenance: Provenance,
}

impl Dataset {
    /// Splits raw rows, fits the scaling on the training part and applies it
    /// to both parts.
    pub fn build(rows: &[RawFeatureRow], ratio: f64, seed: u64, provenance: Provenance) -> Result<Self> {
        let (train_raw, val_raw) = split_train_val(rows, ratio, seed)?;
        let (train, normalization) = normalize(&train_raw, None);
        let (val, _) = normalize(&val_raw, Some(&normalization));
        Ok(Self {
            train,
            val,
            normalization,
            provenance,
        })
    }

    pub fn train_samples(&self) -> Samples {
        to_samples(&self.train)
    }

    pub fn val_samples(&self) -> Samples {
        to_samples(&self.val)
    }

    /// Writes `<stem>_train.csv`, `<stem>_val.csv` and `<stem>_meta.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        for (part, rows) in [("train", &self.train), ("val", &self.val)] {
            let file = std::fs::File::create(dir.join(format!("{stem}_{part}.csv")))?;
            write_rows_csv(std::io::BufWriter::new(file), rows)?;
        }
        let meta = DatasetMeta {
            normalization: self.normalization,
            normalization_checksum: self.normalization.checksum(),
            provenance: self.provenance.clone(),
            train_rows: self.train.len(),
            val_rows: self.val.len(),
        };
        let file = std::fs::File::create(dir.join(format!("{stem}_meta.json")))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &meta)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub normalization: NormParams,
    pub normalization_checksum: u64,
    pub provenance: Provenance,
    pub train_rows: usize,
    pub val_rows: usize,
}

pub fn to_samples(rows: &[FeatureRow]) -> Samples {
    Samples {
        inputs: rows.iter().map(|r| r.inputs().to_vec()).collect(),
        targets: rows.iter().map(|r| r.label).collect(),
    }
}

/// `pf,sf,t_out_norm,starts_norm,running,label`
pub fn write_rows_csv<W: Write>(out: W, rows: &[FeatureRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pf", "sf", "t_out_norm", "starts_norm", "running", "label"])?;
    for r in rows {
        w.write_record([
            r.price_factor.to_string(),
            r.storage_factor.to_string(),
            r.outside_temp_norm.to_string(),
            r.starts_today_norm.to_string(),
            r.hp_running.to_string(),
            r.label.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
