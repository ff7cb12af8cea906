//! End-to-end benchmark: clusters of synthetic buildings, optimal schedules
//! for one training building, an imitation model per cluster and run, and
//! closed-loop comparison of all controllers on held-out weeks.
//!
//! Everything in [`ExperimentReport`] is a deterministic function of the
//! configuration. Wall-clock measurements live in [`TimingReport`].

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnv1a;
use crate::imitation::{extract_features, Dataset, NormParams, Provenance, StartsFeature};
use crate::model::{BuildingSpec, HeatPumpSpec, WeekData};
use crate::nn::{init_model, save_model, train, MlpModel, MlpSpec, ModelMeta, TrainConfig, TrainReport};
use crate::psc::{ProductRule, PscConfig};
use crate::scenario::{annual_to_weekly_target, derive_member, synth_week, ClusterMember, ClusterSpec, WeekProfile, HEATING_WEEKS};
use crate::scheduler::{solve_optimal, SolverConfig};
use crate::sim::{simulate_week, Controller, Conventional, Psc, PscAnn, Replay, SimConfig, SimulationSummary};

/// Controllers in report column order.
pub const CONTROLLERS: [&str; 4] = ["optimal", "conventional", "psc", "psc-ann"];
const OPTIMAL: usize = 0;
const CONVENTIONAL: usize = 1;
const PSC: usize = 2;
const PSC_ANN: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub name: String,
    /// kWh/(m²·yr)
    pub base_demand: f64,
    pub num_buildings: usize,
    pub max_shift: usize,
    pub demand_tolerance: f64,
    /// Defaults to the aggregated unit for `base_demand`.
    pub heat_pump: Option<HeatPumpSpec>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self::standard(50.0)
    }
}

impl ClusterConfig {
    pub fn standard(base_demand: f64) -> Self {
        Self {
            name: format!("c{base_demand}"),
            base_demand,
            num_buildings: 6,
            max_shift: 24,
            demand_tolerance: 5.0,
            heat_pump: None,
        }
    }

    pub fn heat_pump(&self) -> HeatPumpSpec {
        self.heat_pump.clone().unwrap_or_else(|| HeatPumpSpec::for_cluster(self.base_demand))
    }
}

/// Pass criteria evaluated on every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Optimal may exceed another controller by this share of its own cost.
    pub dominance_allowance: f64,
    /// Largest accepted mean cost of PSC-ANN relative to PSC.
    pub imitation_ratio: f64,
    /// Smallest accepted mean improvement of PSC-ANN over conventional, percent.
    pub min_improvement_pct: f64,
    /// Smallest accepted solve-time / controller-time ratio.
    pub min_timing_ratio: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            dominance_allowance: 0.01,
            imitation_ratio: 1.01,
            min_improvement_pct: 2.0,
            min_timing_ratio: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub clusters: Vec<ClusterConfig>,
    /// Weeks `0..training_pool` may be drawn for training.
    pub training_pool: usize,
    pub training_sample: usize,
    /// Weeks `training_pool..training_pool + test_weeks` are evaluated.
    pub test_weeks: usize,
    pub runs: usize,
    pub split_ratio: f64,
    /// Train a fresh model for every test week instead of once per run.
    pub train_per_week: bool,
    /// Building whose optimal schedules are imitated; all buildings of the
    /// cluster are evaluated with its model.
    pub training_building: usize,
    pub building: BuildingSpec,
    pub profile: WeekProfile,
    pub solver: SolverConfig,
    pub mlp: MlpSpec,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub psc: PscConfig,
    pub starts_feature: StartsFeature,
    pub conventional: Conventional,
    pub thresholds: Thresholds,
    /// Worker threads; 0 uses every core. Not part of the report.
    #[serde(skip_serializing)]
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            clusters: [25.0, 50.0, 80.0].into_iter().map(ClusterConfig::standard).collect(),
            training_pool: 26,
            training_sample: 20,
            test_weeks: 10,
            runs: 1,
            split_ratio: 0.7,
            train_per_week: false,
            training_building: 0,
            building: BuildingSpec::default(),
            profile: WeekProfile::default(),
            solver: SolverConfig::default(),
            mlp: MlpSpec::default(),
            train: TrainConfig::default(),
            sim: SimConfig::default(),
            psc: PscConfig::default(),
            starts_feature: StartsFeature::default(),
            conventional: Conventional::default(),
            thresholds: Thresholds::default(),
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.clusters.is_empty() {
            return bad("at least one cluster is required".into());
        }
        let names: BTreeSet<&str> = self.clusters.iter().map(|c| c.name.as_str()).collect();
        if names.len() != self.clusters.len() {
            return bad("cluster names must be unique".into());
        }
        for c in &self.clusters {
            if c.num_buildings == 0 || self.training_building >= c.num_buildings {
                return bad(format!(
                    "cluster {} has {} buildings, training building is {}",
                    c.name, c.num_buildings, self.training_building
                ));
            }
            if !(c.base_demand > 0.0) {
                return bad(format!("cluster {} needs a positive base demand", c.name));
            }
            c.heat_pump().validate()?;
        }
        if self.training_sample == 0 || self.training_sample > self.training_pool {
            return bad(format!(
                "training_sample {} must lie in 1..={}",
                self.training_sample, self.training_pool
            ));
        }
        if self.test_weeks == 0 || self.runs == 0 {
            return bad("test_weeks and runs must be at least 1".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio {} outside (0, 1)", self.split_ratio));
        }
        if self.mlp.input_dim != 5 || self.mlp.output_dim != 1 {
            return bad("the controller model maps 5 features to 1 output".into());
        }
        self.mlp.validate()?;
        self.train.validate()?;
        self.building.validate()?;
        Ok(())
    }

    pub fn test_week_ids(&self) -> Vec<u64> {
        (self.training_pool..self.training_pool + self.test_weeks).map(|w| w as u64).collect()
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    /// Runs `f` on a pool of `jobs` worker threads.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        Ok(self.pool()?.install(f))
    }

    pub fn cluster_index(&self, name: &str) -> Result<usize> {
        self.clusters.iter().position(|c| c.name == name).ok_or_else(|| {
            let known: Vec<_> = self.clusters.iter().map(|c| c.name.as_str()).collect();
            Error::Config(format!("unknown cluster {name:?}, expected one of {known:?}"))
        })
    }
}

/// Derives an independent seed from the master seed and a path of ids.
pub fn sub_seed(master: u64, path: &[u64]) -> u64 {
    fnv1a(std::iter::once(master).chain(path.iter().copied()).flat_map(u64::to_le_bytes))
}

const TAG_CLUSTER: u64 = 0xc1;
const TAG_SAMPLE: u64 = 0x5a;
const TAG_SPLIT: u64 = 0x5b;
const TAG_INIT: u64 = 0x5c;
const TAG_SHUFFLE: u64 = 0x5d;
/// Stands in for the test week when one model serves all weeks.
const ALL_WEEKS: u64 = u64::MAX;

/// Scenario of one cluster: buildings, heat pump and week generator.
#[derive(Debug, Clone)]
pub struct ClusterScenario {
    pub index: usize,
    pub config: ClusterConfig,
    pub spec: ClusterSpec,
    pub members: Vec<ClusterMember>,
    pub heat_pump: HeatPumpSpec,
    building: BuildingSpec,
    profile: WeekProfile,
    seed: u64,
}

impl ClusterScenario {
    pub fn new(cfg: &ExperimentConfig, index: usize) -> Self {
        let c = &cfg.clusters[index];
        let spec = ClusterSpec {
            base_demand: c.base_demand,
            num_buildings: c.num_buildings,
            max_shift: c.max_shift,
            demand_tolerance: c.demand_tolerance,
            seed: sub_seed(cfg.seed, &[TAG_CLUSTER, index as u64]),
        };
        let target = annual_to_weekly_target(c.base_demand, cfg.building.living_area, 1.0 / HEATING_WEEKS);
        Self {
            index,
            members: spec.members(),
            spec,
            heat_pump: c.heat_pump(),
            config: c.clone(),
            building: cfg.building.clone(),
            profile: WeekProfile {
                target_weekly_kwh: target,
                ..cfg.profile.clone()
            },
            seed: cfg.seed,
        }
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn building(&self, b: usize) -> BuildingSpec {
        BuildingSpec {
            annual_specific_demand: self.members[b].annual_specific_demand,
            ..self.building.clone()
        }
    }

    /// Week `week` of building `b`. Prices and weather are shared by the
    /// cluster.
    pub fn week(&self, b: usize, week: u64) -> WeekData {
        let base = synth_week(sub_seed(self.seed, &[self.index as u64, week]), &self.profile);
        derive_member(&base, &self.members[b])
    }
}

/// A trained controller model with its provenance.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub label: String,
    pub cluster: String,
    pub run: usize,
    pub test_week: Option<u64>,
    pub model: MlpModel,
    pub norm: NormParams,
    pub meta: ModelMeta,
    pub summary: TrainSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub label: String,
    pub provenance: Provenance,
    pub train_rows: usize,
    pub val_rows: usize,
    pub normalization: NormParams,
    pub normalization_checksum: u64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub report: TrainReport,
}

/// Seeded draw of `training_sample` distinct weeks from the training pool.
pub fn sample_training_weeks(cfg: &ExperimentConfig, cluster: usize, run: usize, test_week: Option<u64>) -> Vec<u64> {
    let mut ids: Vec<u64> = (0..cfg.training_pool as u64).collect();
    let key = [TAG_SAMPLE, cluster as u64, run as u64, test_week.unwrap_or(ALL_WEEKS)];
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &key)));
    ids.truncate(cfg.training_sample);
    ids.sort_unstable();
    ids
}

/// Optimal schedules of the training building on the sampled weeks, turned
/// into a split and normalised dataset.
pub fn build_cluster_dataset(cfg: &ExperimentConfig, scenario: &ClusterScenario, run: usize, test_week: Option<u64>) -> Result<Dataset> {
    let week_ids = sample_training_weeks(cfg, scenario.index, run, test_week);
    let b = cfg.training_building;
    let building = scenario.building(b);
    let hp = &scenario.heat_pump;
    let per_week: Vec<_> = week_ids
        .par_iter()
        .map(|&w| {
            let week = scenario.week(b, w);
            let s = solve_optimal(&week, &building, hp, &cfg.solver)?;
            extract_features(&s, &week, &building, hp, &cfg.psc, cfg.starts_feature)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<_> = per_week.into_iter().flatten().collect();

    let key = |tag| sub_seed(cfg.seed, &[tag, scenario.index as u64, run as u64, test_week.unwrap_or(ALL_WEEKS)]);
    let provenance = Provenance {
        cluster: scenario.name().to_string(),
        building_id: b,
        week_ids,
        seed: key(TAG_SPLIT),
        starts_feature: cfg.starts_feature.label().into(),
    };
    Dataset::build(&rows, cfg.split_ratio, key(TAG_SPLIT), provenance)
}

/// Builds the dataset of `run` and trains a model on it.
pub fn train_cluster_model(
    cfg: &ExperimentConfig,
    scenario: &ClusterScenario,
    run: usize,
    test_week: Option<u64>,
    mlp: MlpSpec,
    train_cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let ds = build_cluster_dataset(cfg, scenario, run, test_week)?;
    let key = |tag| sub_seed(cfg.seed, &[tag, scenario.index as u64, run as u64, test_week.unwrap_or(ALL_WEEKS)]);
    let init_seed = key(TAG_INIT);
    let shuffle_seed = key(TAG_SHUFFLE);
    let init = init_model(mlp, init_seed)?;
    let tc = TrainConfig {
        seed: shuffle_seed,
        ..train_cfg.clone()
    };
    let (model, report) = train(&init, &ds.train_samples(), &ds.val_samples(), &tc)?;

    let mut label = format!("{}_run{run}", scenario.name());
    if let Some(w) = test_week {
        label.push_str(&format!("_week{w}"));
    }
    let meta = ModelMeta {
        training_seed: init_seed,
        normalization_checksum: ds.normalization.checksum(),
    };
    Ok(TrainedModel {
        summary: TrainSummary {
            label: label.clone(),
            provenance: ds.provenance.clone(),
            train_rows: ds.train.len(),
            val_rows: ds.val.len(),
            normalization: ds.normalization,
            normalization_checksum: meta.normalization_checksum,
            init_seed,
            shuffle_seed,
            report,
        },
        label,
        cluster: scenario.name().to_string(),
        run,
        test_week,
        model,
        norm: ds.normalization,
        meta,
    })
}

/// Costs and traces of all controllers on one (building, week).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub cluster: String,
    pub run: usize,
    pub building: usize,
    pub week: u64,
    pub model: String,
    pub model_building: usize,
    /// In [`CONTROLLERS`] order.
    pub results: Vec<SimulationSummary>,
}

impl EvalRecord {
    pub fn cost(&self, controller: usize) -> f64 {
        self.results[controller].total_cost
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    pub cluster: String,
    pub run: Option<usize>,
    pub building: Option<usize>,
    pub week: Option<u64>,
    pub message: String,
}

struct EvalTiming {
    solve_s: f64,
    controller_s: f64,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    cfg: &ExperimentConfig,
    scenario: &ClusterScenario,
    model: &TrainedModel,
    run: usize,
    b: usize,
    w: u64,
) -> Result<(EvalRecord, EvalTiming)> {
    let week = scenario.week(b, w);
    let building = scenario.building(b);
    let hp = &scenario.heat_pump;

    let started = Instant::now();
    let optimal = solve_optimal(&week, &building, hp, &cfg.solver)?;
    let solve_s = started.elapsed().as_secs_f64();

    let ann = PscAnn::new(model.model.clone(), model.norm, &model.meta, cfg.psc.clone(), cfg.starts_feature)?;
    let psc = Psc {
        config: cfg.psc.clone(),
        rule: ProductRule,
    };
    let replay = Replay::optimal(&optimal);
    let controllers: [&dyn Controller; 4] = [&replay, &cfg.conventional, &psc, &ann];
    let mut results = Vec::with_capacity(4);
    let mut controller_s = 0.0;
    for (i, c) in controllers.into_iter().enumerate() {
        let started = Instant::now();
        let r = simulate_week(c, &week, &building, hp, &cfg.sim)?;
        if i == PSC_ANN {
            controller_s = started.elapsed().as_secs_f64();
        }
        results.push(r.summary());
    }
    Ok((
        EvalRecord {
            cluster: scenario.name().to_string(),
            run,
            building: b,
            week: w,
            model: model.label.clone(),
            model_building: model.summary.provenance.building_id,
            results,
        },
        EvalTiming { solve_s, controller_s },
    ))
}

/// Mean weekly cost per controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    /// Week id, or "average".
    pub week: String,
    pub costs: [f64; 4],
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingRow {
    pub building: usize,
    pub costs: [f64; 4],
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: String,
    pub base_demand: f64,
    pub heat_pump_p_max: f64,
    pub members: Vec<ClusterMember>,
    pub rows: Vec<CostRow>,
    pub average: CostRow,
    /// Improvement of the mean cost over conventional, percent, in
    /// [`CONTROLLERS`] order (conventional itself is 0).
    pub improvement_pct: [Option<f64>; 4],
    pub per_building: Vec<BuildingRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub controllers: Vec<String>,
    pub test_weeks: Vec<u64>,
    pub clusters: Vec<ClusterSummary>,
    pub training: Vec<TrainSummary>,
    pub records: Vec<EvalRecord>,
    pub properties: Vec<PropertyCheck>,
    pub failures: Vec<FailureRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Mean wall time per week, seconds.
    pub solve_s_per_week: f64,
    pub controller_s_per_week: f64,
    /// solve / controller.
    pub ratio: f64,
    pub threshold: f64,
    pub passed: bool,
    pub weeks_timed: usize,
    pub training_s: Vec<(String, f64)>,
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub timing: TimingReport,
    pub models: Vec<TrainedModel>,
}

impl ExperimentOutcome {
    /// 0 when every property holds, 2 when some fail, 1 when a stage failed.
    pub fn exit_code(&self) -> i32 {
        if !self.report.failures.is_empty() {
            1
        } else if self.report.properties.iter().any(|p| !p.passed) || !self.timing.passed {
            2
        } else {
            0
        }
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> (f64, usize) {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (if n == 0 { f64::NAN } else { sum / n as f64 }, n)
}

fn mean_costs<'a>(records: impl Iterator<Item = &'a EvalRecord> + Clone) -> ([f64; 4], usize) {
    let mut costs = [0.0; 4];
    let mut count = 0;
    for (i, c) in costs.iter_mut().enumerate() {
        (*c, count) = mean(records.clone().map(|r| r.cost(i)));
    }
    (costs, count)
}

pub fn summarize_cluster(scenario: &ClusterScenario, records: &[EvalRecord], test_weeks: &[u64]) -> ClusterSummary {
    let mine: Vec<&EvalRecord> = records.iter().filter(|r| r.cluster == scenario.name()).collect();
    let rows = test_weeks
        .iter()
        .filter_map(|&w| {
            let (costs, count) = mean_costs(mine.iter().copied().filter(move |r| r.week == w));
            (count > 0).then(|| CostRow {
                week: w.to_string(),
                costs,
                count,
            })
        })
        .collect();
    let (costs, count) = mean_costs(mine.iter().copied());
    let improvement_pct = std::array::from_fn(|i| crate::sim::improvement_pct(costs[CONVENTIONAL], costs[i]));
    let per_building = (0..scenario.members.len())
        .filter_map(|b| {
            let (costs, count) = mean_costs(mine.iter().copied().filter(move |r| r.building == b));
            (count > 0).then_some(BuildingRow { building: b, costs, count })
        })
        .collect();
    ClusterSummary {
        cluster: scenario.name().to_string(),
        base_demand: scenario.config.base_demand,
        heat_pump_p_max: scenario.heat_pump.p_max,
        members: scenario.members.clone(),
        rows,
        average: CostRow {
            week: "average".into(),
            costs,
            count,
        },
        improvement_pct,
        per_building,
    }
}

fn check(name: &str, failures: Vec<String>, ok_detail: String) -> PropertyCheck {
    PropertyCheck {
        name: name.into(),
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            ok_detail
        } else {
            let shown: Vec<_> = failures.iter().take(5).cloned().collect();
            format!("{} failing: {}", failures.len(), shown.join("; "))
        },
    }
}

fn property_checks(
    cfg: &ExperimentConfig,
    scenarios: &[ClusterScenario],
    summaries: &[ClusterSummary],
    records: &[EvalRecord],
    training: &[TrainSummary],
) -> Vec<PropertyCheck> {
    let th = &cfg.thresholds;
    let mut out = Vec::new();

    let mut bad = Vec::new();
    for r in records {
        let opt = r.cost(OPTIMAL);
        for i in 1..4 {
            if opt > r.cost(i) + th.dominance_allowance * opt {
                bad.push(format!("{} b{} w{} {}: {:.4} > {:.4}", r.cluster, r.building, r.week, CONTROLLERS[i], opt, r.cost(i)));
            }
        }
    }
    out.push(check("dominance", bad, format!("{} evaluations", records.len())));

    let bad = summaries
        .iter()
        .filter(|s| !(s.average.costs[PSC] < s.average.costs[CONVENTIONAL]))
        .map(|s| format!("{}: psc {:.3} vs conventional {:.3}", s.cluster, s.average.costs[PSC], s.average.costs[CONVENTIONAL]))
        .collect();
    out.push(check("psc-beats-conventional", bad, "mean psc below mean conventional in every cluster".into()));

    let mut bad = Vec::new();
    let mut detail = Vec::new();
    for s in summaries {
        let c = s.average.costs;
        let gain = s.improvement_pct[PSC_ANN].unwrap_or(f64::NAN);
        detail.push(format!("{}: ann/psc {:.4}, gain {:.2}% over {} evals", s.cluster, c[PSC_ANN] / c[PSC], gain, s.average.count));
        if !(c[PSC_ANN] <= th.imitation_ratio * c[PSC]) || !(gain >= th.min_improvement_pct) {
            bad.push(detail.last().unwrap().clone());
        }
    }
    out.push(check("imitation-gain", bad, detail.join("; ")));

    let bad = summaries
        .iter()
        .flat_map(|s| {
            s.per_building
                .iter()
                .filter(|b| b.building != cfg.training_building && !(b.costs[PSC_ANN] < b.costs[CONVENTIONAL]))
                .map(move |b| format!("{} b{}: ann {:.3} vs conventional {:.3}", s.cluster, b.building, b.costs[PSC_ANN], b.costs[CONVENTIONAL]))
        })
        .collect();
    out.push(check("transfer", bad, "psc-ann below conventional on every sibling building".into()));

    let mut bad = Vec::new();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut most_offs = 0;
    for r in records {
        let sc = scenarios.iter().find(|s| s.name() == r.cluster).expect("record of a known cluster");
        let b = sc.building(r.building);
        let margin = cfg.sim.guard.margin;
        for (i, s) in r.results.iter().enumerate() {
            lo = lo.min(s.temp_min);
            hi = hi.max(s.temp_max);
            most_offs = most_offs.max(s.switch_offs_total);
            if s.temp_min < b.temp_min - margin || s.temp_max > b.temp_max + margin {
                bad.push(format!("{} b{} w{} {}: [{:.3}, {:.3}]", r.cluster, r.building, r.week, CONTROLLERS[i], s.temp_min, s.temp_max));
            }
            if s.switch_offs_total > sc.heat_pump.max_switch_offs {
                bad.push(format!("{} b{} w{} {}: {} switch-offs", r.cluster, r.building, r.week, CONTROLLERS[i], s.switch_offs_total));
            }
        }
    }
    out.push(check(
        "safety",
        bad,
        format!("temperatures in [{lo:.3}, {hi:.3}], at most {most_offs} switch-offs"),
    ));

    let bad = training
        .iter()
        .filter(|t| {
            let v = &t.report.val_mse;
            !(v.last() <= v.first())
        })
        .map(|t| format!("{}: {:?} -> {:?}", t.label, t.report.val_mse.first(), t.report.val_mse.last()))
        .collect();
    out.push(check("learning-sanity", bad, format!("{} models", training.len())));

    let test: BTreeSet<u64> = cfg.test_week_ids().into_iter().collect();
    let bad = training
        .iter()
        .filter(|t| t.provenance.week_ids.iter().any(|w| test.contains(w)))
        .map(|t| t.label.clone())
        .collect();
    out.push(check("disjointness", bad, "no test week in any training set".into()));

    let bad = records
        .iter()
        .filter(|r| {
            let m = training.iter().find(|t| t.label == r.model);
            !matches!(m, Some(t) if t.provenance.building_id == cfg.training_building && t.provenance.cluster == r.cluster && r.model_building == cfg.training_building)
        })
        .map(|r| format!("{} b{} w{}", r.cluster, r.building, r.week))
        .collect();
    out.push(check("provenance", bad, format!("every model trained on building {}", cfg.training_building)));

    let mut bad = Vec::new();
    for s in summaries {
        let mine: Vec<&EvalRecord> = records.iter().filter(|r| r.cluster == s.cluster).collect();
        for i in 0..4 {
            let direct = mine.iter().map(|r| r.cost(i)).sum::<f64>() / mine.len() as f64;
            if (direct - s.average.costs[i]).abs() > 1e-9 {
                bad.push(format!("{} {}", s.cluster, CONTROLLERS[i]));
            }
        }
    }
    out.push(check("aggregation", bad, "means match per-record costs".into()));
    out
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    cfg.pool()?.install(|| run_inner(cfg))
}

fn run_inner(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let scenarios: Vec<ClusterScenario> = (0..cfg.clusters.len()).map(|i| ClusterScenario::new(cfg, i)).collect();
    let test_weeks = cfg.test_week_ids();
    let mut failures = Vec::new();
    let mut models = Vec::new();
    let mut training_s = Vec::new();

    for sc in &scenarios {
        for run in 0..cfg.runs {
            let slots: Vec<Option<u64>> = if cfg.train_per_week {
                test_weeks.iter().map(|&w| Some(w)).collect()
            } else {
                vec![None]
            };
            for tw in slots {
                let started = Instant::now();
                match train_cluster_model(cfg, sc, run, tw, cfg.mlp, &cfg.train) {
                    Ok(m) => {
                        training_s.push((m.label.clone(), started.elapsed().as_secs_f64()));
                        models.push(m);
                    }
                    Err(e) => failures.push(FailureRecord {
                        stage: "train".into(),
                        cluster: sc.name().to_string(),
                        run: Some(run),
                        building: None,
                        week: tw,
                        message: e.to_string(),
                    }),
                }
            }
        }
    }

    let mut tasks = Vec::new();
    for sc in &scenarios {
        for run in 0..cfg.runs {
            for b in 0..sc.members.len() {
                for &w in &test_weeks {
                    let model = models.iter().find(|m| {
                        m.cluster == sc.name() && m.run == run && (m.test_week.is_none() || m.test_week == Some(w))
                    });
                    if let Some(m) = model {
                        tasks.push((sc, m, run, b, w));
                    }
                }
            }
        }
    }
    let outcomes: Vec<_> = tasks
        .par_iter()
        .map(|&(sc, m, run, b, w)| evaluate(cfg, sc, m, run, b, w).map_err(|e| (sc.name().to_string(), run, b, w, e)))
        .collect();

    let mut records = Vec::new();
    let (mut solve_s, mut ctrl_s) = (Vec::new(), Vec::new());
    for o in outcomes {
        match o {
            Ok((r, t)) => {
                records.push(r);
                solve_s.push(t.solve_s);
                ctrl_s.push(t.controller_s);
            }
            Err((cluster, run, b, w, e)) => failures.push(FailureRecord {
                stage: "evaluate".into(),
                cluster,
                run: Some(run),
                building: Some(b),
                week: Some(w),
                message: e.to_string(),
            }),
        }
    }

    let summaries: Vec<ClusterSummary> = scenarios.iter().map(|sc| summarize_cluster(sc, &records, &test_weeks)).collect();
    let training: Vec<TrainSummary> = models.iter().map(|m| m.summary.clone()).collect();
    let properties = property_checks(cfg, &scenarios, &summaries, &records, &training);

    let (solve, n) = mean(solve_s);
    let (ctrl, _) = mean(ctrl_s);
    let ratio = solve / ctrl;
    let timing = TimingReport {
        solve_s_per_week: solve,
        controller_s_per_week: ctrl,
        ratio,
        threshold: cfg.thresholds.min_timing_ratio,
        passed: ratio >= cfg.thresholds.min_timing_ratio,
        weeks_timed: n,
        training_s,
    };
    Ok(ExperimentOutcome {
        report: ExperimentReport {
            config: cfg.clone(),
            controllers: CONTROLLERS.iter().map(|s| s.to_string()).collect(),
            test_weeks,
            clusters: summaries,
            training,
            records,
            properties,
            failures,
        },
        timing,
        models,
    })
}

/// `week,epoch,train_rmse,val_rmse`, epochs counted from 1.
pub fn export_loss_curves<W: Write>(out: W, reports: &[(u64, &TrainReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["week", "epoch", "train_rmse", "val_rmse"])?;
    for (week, r) in reports {
        for (e, (tr, va)) in r.train_rmse().into_iter().zip(r.val_rmse()).enumerate() {
            w.write_record([week.to_string(), (e + 1).to_string(), tr.to_string(), va.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_cost_rows<W: Write>(out: W, rows: impl IntoIterator<Item = (String, [f64; 4])>, key: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(std::iter::once(key).chain(CONTROLLERS))?;
    for (k, costs) in rows {
        w.write_record(std::iter::once(k).chain(costs.iter().map(|c| c.to_string())))?;
    }
    w.flush()?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
}

/// Writes the deterministic report files and, separately, `timing.json`.
///
/// - `report.json`: full report
/// - `table_<cluster>.csv`: `week,optimal,conventional,psc,psc-ann` plus an average row
/// - `buildings_<cluster>.csv`: the same per building
/// - `records.csv`: one row per (cluster, run, building, week)
/// - `loss_curves_<cluster>.csv`: `week` is the test week for per-week
///   models, else the run index
/// - `models/<label>.bin` and `models/<label>_norm.json`
pub fn write_outputs(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("models"))?;
    let report = &outcome.report;
    serde_json::to_writer_pretty(create(dir, "report.json")?, report)?;
    for s in &report.clusters {
        let rows = s.rows.iter().chain([&s.average]).map(|r| (r.week.clone(), r.costs));
        write_cost_rows(create(dir, &format!("table_{}.csv", s.cluster))?, rows, "week")?;
        let rows = s.per_building.iter().map(|r| (r.building.to_string(), r.costs));
        write_cost_rows(create(dir, &format!("buildings_{}.csv", s.cluster))?, rows, "building")?;
        let curves: Vec<(u64, &TrainReport)> = outcome
            .models
            .iter()
            .filter(|m| m.cluster == s.cluster)
            .map(|m| (m.test_week.unwrap_or(m.run as u64), &m.summary.report))
            .collect();
        export_loss_curves(create(dir, &format!("loss_curves_{}.csv", s.cluster))?, &curves)?;
    }
    let mut w = csv::Writer::from_writer(create(dir, "records.csv")?);
    w.write_record(
        ["cluster", "run", "building", "week"]
            .into_iter()
            .chain(CONTROLLERS)
            .chain(["temp_min", "temp_max", "max_switch_offs"]),
    )?;
    for r in &report.records {
        let lo = r.results.iter().map(|s| s.temp_min).fold(f64::INFINITY, f64::min);
        let hi = r.results.iter().map(|s| s.temp_max).fold(f64::NEG_INFINITY, f64::max);
        let offs = r.results.iter().map(|s| s.switch_offs_total).max().unwrap_or(0);
        let mut row = vec![r.cluster.clone(), r.run.to_string(), r.building.to_string(), r.week.to_string()];
        row.extend((0..4).map(|i| r.cost(i).to_string()));
        row.extend([lo.to_string(), hi.to_string(), offs.to_string()]);
        w.write_record(row)?;
    }
    w.flush()?;
    for m in &outcome.models {
        save_model(dir.join("models").join(format!("{}.bin", m.label)), &m.model, &m.meta)?;
        serde_json::to_writer_pretty(create(&dir.join("models"), &format!("{}_norm.json", m.label))?, &m.norm)?;
    }
    serde_json::to_writer_pretty(create(dir, "timing.json")?, &outcome.timing)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub hidden_width: Vec<usize>,
    pub hidden_layers: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            batch_size: vec![30],
            learning_rate: vec![0.0018],
            hidden_width: vec![50],
            hidden_layers: vec![5],
        }
    }
}

impl SweepGrid {
    pub fn points(&self) -> Vec<(usize, f64, usize, usize)> {
        let mut out = Vec::new();
        for &b in &self.batch_size {
            for &lr in &self.learning_rate {
                for &w in &self.hidden_width {
                    for &l in &self.hidden_layers {
                        out.push((b, lr, w, l));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub mean_cost_conventional: f64,
    pub mean_cost_psc_ann: f64,
    pub improvement_pct: Option<f64>,
    pub final_val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cluster: String,
    pub building: usize,
    pub weeks: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

/// Trains one model per grid point on the first cluster's training
/// building (run 0) and evaluates it on that building's test weeks.
pub fn sweep_hyperparameters(cfg: &ExperimentConfig, grid: &SweepGrid) -> Result<SweepReport> {
    cfg.validate()?;
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    cfg.pool()?.install(|| {
        let sc = ClusterScenario::new(cfg, 0);
        let b = cfg.training_building;
        let building = sc.building(b);
        let weeks: Vec<WeekData> = cfg.test_week_ids().iter().map(|&w| sc.week(b, w)).collect();
        let costs = |c: &dyn Controller| -> Result<f64> {
            let all = weeks
                .iter()
                .map(|w| simulate_week(c, w, &building, &sc.heat_pump, &cfg.sim).map(|r| r.total_cost))
                .collect::<Result<Vec<_>>>()?;
            Ok(mean(all).0)
        };
        let conventional = costs(&cfg.conventional)?;
        let rows = points
            .par_iter()
            .map(|&(batch_size, learning_rate, hidden_width, hidden_layers)| {
                let mlp = MlpSpec {
                    hidden_width,
                    hidden_layers,
                    ..cfg.mlp
                };
                let tc = TrainConfig {
                    batch_size,
                    learning_rate,
                    ..cfg.train.clone()
                };
                let m = train_cluster_model(cfg, &sc, 0, None, mlp, &tc)?;
                let ann = PscAnn::new(m.model, m.norm, &m.meta, cfg.psc.clone(), cfg.starts_feature)?;
                let cost = costs(&ann)?;
                Ok(SweepRow {
                    batch_size,
                    learning_rate,
                    hidden_width,
                    hidden_layers,
                    mean_cost_conventional: conventional,
                    mean_cost_psc_ann: cost,
                    improvement_pct: crate::sim::improvement_pct(conventional, cost),
                    final_val_mse: *m.summary.report.val_mse.last().expect("at least one epoch"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepReport {
            cluster: sc.name().to_string(),
            building: b,
            weeks: cfg.test_week_ids(),
            rows,
        })
    })
}

/// Small configuration for smoke tests: one cluster, two buildings, a few
/// weeks and a narrow network.
pub fn smoke_config() -> ExperimentConfig {
    ExperimentConfig {
        clusters: vec![ClusterConfig {
            num_buildings: 2,
            ..ClusterConfig::standard(50.0)
        }],
        training_pool: 4,
        training_sample: 2,
        test_weeks: 2,
        mlp: MlpSpec {
            hidden_layers: 2,
            hidden_width: 16,
            ..MlpSpec::default()
        },
        train: TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg: ExperimentConfig = toml::from_str("seed = 7\ntest_weeks = 3\n[train]\nepochs = 4\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.batch_size, 30);
        assert_eq!(cfg.clusters.len(), 3);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.training_sample = 30;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.training_building = 6;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.clusters.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn training_weeks_are_sampled_without_replacement_from_the_pool() {
        let cfg = ExperimentConfig::default();
        let ids = sample_training_weeks(&cfg, 0, 0, None);
        assert_eq!(ids.len(), 20);
        assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), 20);
        assert!(ids.iter().all(|&w| w < 26));
        assert_eq!(ids, sample_training_weeks(&cfg, 0, 0, None));
        assert_ne!(ids, sample_training_weeks(&cfg, 0, 1, None));
        let test = cfg.test_week_ids();
        assert!(test.iter().all(|w| !ids.contains(w)));
    }

    #[test]
    fn cluster_weeks_share_prices_and_weather() {
        let cfg = ExperimentConfig::default();
        let sc = ClusterScenario::new(&cfg, 1);
        let (a, b) = (sc.week(0, 3), sc.week(1, 3));
        assert_eq!(a.price, b.price);
        assert_eq!(a.outside_temp, b.outside_temp);
        assert!((a.total_heat_demand_kwh() / sc.members[0].scale - b.total_heat_demand_kwh() / sc.members[1].scale).abs() < 1e-6);
        assert_ne!(sc.week(0, 3).price, sc.week(0, 4).price);
    }

    #[test]
    fn loss_curve_shape() {
        let r = TrainReport {
            train_mse: vec![4.0; 20],
            val_mse: vec![9.0; 20],
            checksum: 0,
            optimizer: "sgd".into(),
            momentum: 0.0,
            wall_time_s: 0.0,
        };
        let mut buf = Vec::new();
        export_loss_curves(&mut buf, &[(0, &r), (1, &r), (2, &r)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 61);
        assert_eq!(lines[0], "week,epoch,train_rmse,val_rmse");
        assert_eq!(lines[1], "0,1,2,3");
    }

    #[test]
    fn empty_grid_is_a_config_error() {
        let grid = SweepGrid {
            learning_rate: vec![],
            ..SweepGrid::default()
        };
        assert!(matches!(sweep_hyperparameters(&smoke_config(), &grid), Err(Error::Config(_))));
        assert_eq!(SweepGrid::default().points(), vec![(30, 0.0018, 50, 5)]);
    }

    #[test]
    fn improvement_of_means_uses_conventional_baseline() {
        let cfg = smoke_config();
        let sc = ClusterScenario::new(&cfg, 0);
        let summary = |opt, conv| SimulationSummary {
            controller: String::new(),
            total_cost: if conv { 200.0 } else { opt },
            comfort_violations: 0,
            switch_offs_total: 0,
            temp_min: 21.0,
            temp_max: 22.0,
        };
        let rec = |w, c: f64| EvalRecord {
            cluster: sc.name().to_string(),
            run: 0,
            building: 0,
            week: w,
            model: "m".into(),
            model_building: 0,
            results: vec![summary(c, false), summary(0.0, true), summary(c, false), summary(c, false)],
        };
        let s = summarize_cluster(&sc, &[rec(4, 180.0), rec(5, 160.0)], &[4, 5]);
        assert_eq!(s.rows.len(), 2);
        assert_eq!(s.average.costs[OPTIMAL], 170.0);
        assert!((s.improvement_pct[OPTIMAL].unwrap() - 15.0).abs() < 1e-12);
        assert_eq!(s.improvement_pct[CONVENTIONAL], Some(0.0));
    }
}
