//! Pipeline orchestration: data generation or ingestion, identification of
//! both model families, open-loop comparison on a holdout week, and
//! receding-horizon control runs, all emitting CSV/JSON reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datadriven::{
    self, DataDrivenModel, IdentificationMeta, Orientation, Priors, ZoneTopology,
};
use crate::error::{Error, Result};
use crate::mpc::{self, ModelVariant, MpcConfig, RolloutMode, RunSummary};
use crate::rcnet::{
    assemble, estimate_gains_v, estimate_gamma, kalman_init, simulate, BuildingDescription,
    ElementKind, GainsMode, KalmanConfig, RcModel,
};
use crate::smoother::SmootherConfig;
use crate::synth::{self, ScenarioConfig};
use crate::timeseries::{
    read_csv, split_train_test, write_csv, Dataset, SeasonCalendar, SeasonLabel, SplitDataset,
};

/// MPC settings as they appear in the pipeline config; per-channel bounds are
/// expanded when the model is known.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcSettings {
    pub n: usize,
    pub t_min: f64,
    pub t_max: f64,
    /// Bounds per VAV box, kg/s.
    pub u_min: f64,
    pub u_max: f64,
    pub rho: f64,
}

impl Default for MpcSettings {
    fn default() -> Self {
        MpcSettings { n: 3, t_min: 20.0, t_max: 22.0, u_min: 0.0, u_max: 0.5, rho: 100.0 }
    }
}

impl MpcSettings {
    /// Expand to a solver config with `counts[i]` boxes aggregated on channel i
    /// (all ones for per-box channels).
    pub fn to_config(&self, counts: &[usize]) -> MpcConfig {
        let mut cfg = MpcConfig::uniform(counts.len(), self.u_min, self.u_max);
        cfg.n = self.n;
        cfg.t_min = self.t_min;
        cfg.t_max = self.t_max;
        cfg.rho = self.rho;
        for (i, &c) in counts.iter().enumerate() {
            cfg.u_min[i] = self.u_min * c as f64;
            cfg.u_max[i] = self.u_max * c as f64;
        }
        cfg
    }
}

fn default_train_fraction() -> f64 {
    0.9
}

fn default_nls_budget() -> usize {
    4000
}

/// Everything a pipeline run needs, loaded from one JSON file. Input data
/// comes either from a scenario (generated) or from a dataset CSV plus a
/// building description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Scenario JSON path; when set, data is generated.
    #[serde(default)]
    pub scenario: Option<PathBuf>,
    /// Dataset CSV path, for pre-recorded data.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Building description JSON; required with `dataset`, ignored with
    /// `scenario` (which embeds its building).
    #[serde(default)]
    pub building: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub smoother: SmootherConfig,
    #[serde(default)]
    pub kalman: KalmanConfig,
    #[serde(default)]
    pub mpc: MpcSettings,
    #[serde(default = "default_nls_budget")]
    pub nls_budget: usize,
    #[serde(default)]
    pub calendar: SeasonCalendar,
    /// Computed from the config file contents at load time.
    #[serde(skip)]
    pub digest: String,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(std::str::from_utf8(&bytes).map_err(
            |e| Error::Config(format!("config {} is not UTF-8: {e}", path.display())),
        )?)?;
        cfg.digest = fnv1a(&bytes);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario.is_none() && self.dataset.is_none() {
            return Err(Error::Config("config needs a `scenario` or a `dataset` input".into()));
        }
        if self.dataset.is_some() && self.scenario.is_none() && self.building.is_none() {
            return Err(Error::Config(
                "CSV input needs a `building` description path".into(),
            ));
        }
        for p in [&self.scenario, &self.dataset, &self.building].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("referenced path {} does not exist", p.display())));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn fnv1a(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Parallelism cap: THERMOBENCH_THREADS, defaulting to the machine width.
pub fn thread_budget() -> usize {
    std::env::var("THERMOBENCH_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Derive the zone topology Model A needs from the physical description:
/// adjacency from interior walls, orientations from exterior elements.
pub fn topology_from_building(desc: &BuildingDescription) -> Result<ZoneTopology> {
    desc.validate()?;
    let n = desc.n_zones();
    let mut adjacency = vec![vec![false; n]; n];
    let mut orient: Vec<Vec<Orientation>> = vec![Vec::new(); n];
    for e in &desc.elements {
        let i = desc.zone_index(&e.from).unwrap();
        match e.kind {
            ElementKind::InteriorWall => {
                if let Some(j) = desc.zone_index(&e.to) {
                    if i != j {
                        adjacency[i][j] = true;
                        adjacency[j][i] = true;
                    }
                }
            }
            ElementKind::ExteriorWall | ElementKind::Window => {
                if let Some(tag) = &e.orientation {
                    let o = match tag.as_str() {
                        "E" => Orientation::East,
                        "N" => Orientation::North,
                        "S" => Orientation::South,
                        "W" => Orientation::West,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown orientation tag `{other}`"
                            )))
                        }
                    };
                    if !orient[i].contains(&o) {
                        orient[i].push(o);
                    }
                }
            }
            _ => {}
        }
    }
    let topo = ZoneTopology {
        zone_names: desc.zones.iter().map(|z| z.name.clone()).collect(),
        adjacency,
        exterior_orientation: orient,
        vav_to_zone: desc
            .vavs
            .iter()
            .map(|v| desc.zone_index(&v.zone).unwrap())
            .collect(),
        floor_areas: desc.zones.iter().map(|z| z.floor_area).collect(),
    };
    topo.validate()?;
    Ok(topo)
}

/// Loaded input data: the aligned dataset, its building description, and the
/// scenario when data was generated.
pub struct PipelineInputs {
    pub dataset: Dataset,
    pub building: BuildingDescription,
    pub scenario: Option<ScenarioConfig>,
}

pub fn load_inputs(cfg: &PipelineConfig) -> Result<PipelineInputs> {
    if let Some(path) = &cfg.scenario {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        let mut scenario = ScenarioConfig::from_json(&text)?;
        scenario.seed = cfg.seed;
        let (dataset, _) = synth::generate(&scenario)?;
        Ok(PipelineInputs { building: scenario.building.clone(), dataset, scenario: Some(scenario) })
    } else {
        let csv_path = cfg.dataset.as_ref().unwrap();
        let file = fs::File::open(csv_path)
            .map_err(|e| Error::Config(format!("cannot open dataset {}: {e}", csv_path.display())))?;
        let dataset = read_csv(std::io::BufReader::new(file))?;
        let bpath = cfg.building.as_ref().unwrap();
        let text = fs::read_to_string(bpath)
            .map_err(|e| Error::Config(format!("cannot read building {}: {e}", bpath.display())))?;
        let building = BuildingDescription::from_json(&text)?;
        Ok(PipelineInputs { dataset, building, scenario: None })
    }
}

/// `generate`: write the dataset CSV, the clean ground truth and the resolved
/// scenario into the output directory.
pub fn cmd_generate(cfg: &PipelineConfig) -> Result<()> {
    let path = cfg.scenario.as_ref().ok_or_else(|| {
        Error::Config("generate needs a `scenario` entry in the config".into())
    })?;
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
    let mut scenario = ScenarioConfig::from_json(&text)?;
    scenario.seed = cfg.seed;
    let (dataset, truth) = synth::generate(&scenario)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = Vec::new();
    write_csv(&dataset, &mut csv)?;
    fs::write(cfg.out("dataset.csv"), csv)?;
    fs::write(cfg.out("ground_truth.json"), serde_json::to_string(&truth)?)?;
    fs::write(cfg.out("scenario.json"), scenario.to_json()?)?;
    println!(
        "generate: {} samples, {} zones -> {}",
        dataset.len(),
        dataset.n_zones(),
        cfg.out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    A,
    B,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Open,
    Plant,
}

/// Fit Model A on the training weeks: differenced regression per season,
/// excitation prior, constrained least squares, then gains extraction.
pub fn identify_model_a(
    full: &Dataset,
    split: &SplitDataset,
    topo: &ZoneTopology,
    smoother: &SmootherConfig,
    seed: u64,
) -> Result<DataDrivenModel> {
    let mut res = BTreeMap::new();
    for (&season, weeks) in &split.train {
        if !weeks.is_empty() {
            res.insert(season, datadriven::residualize(weeks, topo, smoother)?);
        }
    }
    if res.is_empty() {
        return Err(Error::InsufficientData("no training weeks for Model A".into()));
    }
    let mu_b = datadriven::prior_b_from_excitation(full, topo)?;
    let priors = Priors::default_for(topo, mu_b.clone());
    let (a, b, c) = datadriven::identify_bcls(&res, &priors, topo)?;
    let gains = datadriven::estimate_gains(&split.train, &a, &b, &c, topo, smoother)?;
    let rho = datadriven::spectral_radius(&a);
    Ok(DataDrivenModel {
        a,
        b,
        c,
        gains,
        topology: topo.clone(),
        metadata: IdentificationMeta {
            bandwidth: smoother.bandwidth,
            seed,
            prior_mu_b: mu_b.iter().copied().collect(),
            spectral_radius: rho,
        },
    })
}

/// Weekend-only tails (Saturday 00:00 to the end) of every training week.
pub fn weekend_slices(split: &SplitDataset) -> BTreeMap<SeasonLabel, Vec<Dataset>> {
    let mut out: BTreeMap<SeasonLabel, Vec<Dataset>> = BTreeMap::new();
    for (&season, weeks) in &split.train {
        for w in weeks {
            let spw = w.steps_per_week();
            let sat = spw * 5 / 7;
            out.entry(season).or_default().push(w.slice(sat, spw));
        }
    }
    out
}

fn default_gamma_guesses(n_zones: usize) -> Vec<Vec<f64>> {
    let mut guesses = Vec::new();
    for (g, f) in [(2.0, 0.5), (4.5, 2.0), (3.0, 0.05)] {
        let mut v = vec![g; 5];
        v.extend(std::iter::repeat(f).take(n_zones));
        guesses.push(v);
    }
    guesses
}

/// Fit Model B: physical parameters on weekend windows, then seasonal gains
/// on the full training weeks.
pub fn identify_model_b(
    building: &BuildingDescription,
    step_minutes: u32,
    split: &SplitDataset,
    kalman: &KalmanConfig,
    budget: usize,
) -> Result<RcModel> {
    // two weekends per season keep the simulation-error objective affordable
    // on description-driven state dimensions while still spanning the seasons
    let mut slices = weekend_slices(split);
    for windows in slices.values_mut() {
        windows.truncate(2);
    }
    let guesses = default_gamma_guesses(building.n_zones());
    let (gamma, _) = estimate_gamma(building, step_minutes, &slices, &guesses, kalman, budget)?;
    let mut model = assemble(building, &gamma, step_minutes)?;
    model.gains_v = estimate_gains_v(&model, &split.train, kalman)?;
    Ok(model)
}

/// Open-loop week prediction with either model, started from the sample at
/// `burn` (Model A from the measured temperatures, Model B from a
/// Kalman-filtered state over the first `burn + 1` samples). Returns the
/// predicted zone temperatures for samples `burn..len`.
pub fn predict_week(
    model_a: Option<&DataDrivenModel>,
    model_b: Option<&RcModel>,
    week: &Dataset,
    season: SeasonLabel,
    kalman: &KalmanConfig,
) -> Result<(Option<DMatrix<f64>>, Option<DMatrix<f64>>)> {
    let burn = kalman.burn_in.min(week.len().saturating_sub(2));
    let steps = week.len() - 1 - burn;
    let tow0 = week.timestamps[burn].time_of_week_index(week.step_minutes);
    let v = DMatrix::from_fn(week.len(), 2, |k, j| {
        let f = week.disturbances[k].v2();
        f[j]
    });

    let pred_a = match model_a {
        Some(m) => {
            let uz = week.zone_flows(&m.topology.vav_to_zone, m.n_zones());
            let x0 = week.zone_temps.row(burn).transpose();
            let traj = datadriven::simulate_model_a(
                m,
                &x0,
                &uz.rows(burn, steps).into_owned(),
                &v.rows(burn, steps).into_owned(),
                season,
                tow0,
            )?;
            Some(traj)
        }
        None => None,
    };
    let pred_b = match model_b {
        Some(m) => {
            let y = week.zone_temps.rows(0, burn + 1).into_owned();
            let u = week.vav_flows.clone();
            let x0 = kalman_init(
                m,
                &y,
                &u.rows(0, burn + 1).into_owned(),
                &v.rows(0, burn + 1).into_owned(),
                kalman,
            )?;
            let sim = simulate(
                m,
                &x0,
                &u.rows(burn, steps).into_owned(),
                &v.rows(burn, steps).into_owned(),
                GainsMode::Full { season, start_tow: tow0 },
            )?;
            Some(sim.outputs)
        }
        None => None,
    };
    Ok((pred_a, pred_b))
}

/// Per-zone RMS of a model's week predictions over a season's test weeks
/// (residuals pooled across weeks), plus the mean across zones.
fn season_rms(
    model_a: Option<&DataDrivenModel>,
    model_b: Option<&RcModel>,
    weeks: &[Dataset],
    season: SeasonLabel,
    kalman: &KalmanConfig,
    pick_a: bool,
) -> Result<(Vec<f64>, f64)> {
    let n = weeks[0].n_zones();
    let mut sse = vec![0.0; n];
    let mut count = 0usize;
    for w in weeks {
        let burn = kalman.burn_in.min(w.len().saturating_sub(2));
        let (pa, pb) = predict_week(model_a, model_b, w, season, kalman)?;
        let pred = if pick_a { pa.unwrap() } else { pb.unwrap() };
        for r in 1..pred.nrows() {
            let k = burn + r;
            for z in 0..n {
                let e = w.zone_temps[(k, z)] - pred[(r, z)];
                sse[z] += e * e;
            }
            count += 1;
        }
    }
    let per_zone: Vec<f64> = sse.iter().map(|s| (s / count as f64).sqrt()).collect();
    let mean = per_zone.iter().sum::<f64>() / n as f64;
    Ok((per_zone, mean))
}

#[derive(Debug, Clone, Serialize)]
pub struct RmsRow {
    pub model: String,
    pub season: String,
    pub zone: String,
    pub rms: f64,
}

#[derive(Debug, Serialize)]
pub struct IdentifyReport {
    pub config_digest: String,
    pub model_a: Option<ModelAReport>,
    pub model_b: Option<ModelBReport>,
    /// Per-zone and mean RMS on the holdout test weeks.
    pub rms: Vec<RmsRow>,
}

#[derive(Debug, Serialize)]
pub struct ModelAReport {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    pub spectral_radius: f64,
}

#[derive(Debug, Serialize)]
pub struct ModelBReport {
    pub gamma: Vec<f64>,
    pub n_states: usize,
}

fn rms_rows(
    label: &str,
    model_a: Option<&DataDrivenModel>,
    model_b: Option<&RcModel>,
    split: &SplitDataset,
    kalman: &KalmanConfig,
    zone_names: &[String],
) -> Result<Vec<RmsRow>> {
    let mut rows = Vec::new();
    for (&season, weeks) in &split.test {
        if weeks.is_empty() {
            continue;
        }
        let (per_zone, mean) =
            season_rms(model_a, model_b, weeks, season, kalman, model_a.is_some())?;
        for (z, r) in per_zone.iter().enumerate() {
            rows.push(RmsRow {
                model: label.into(),
                season: season.short().into(),
                zone: zone_names[z].clone(),
                rms: *r,
            });
        }
        rows.push(RmsRow {
            model: label.into(),
            season: season.short().into(),
            zone: "mean".into(),
            rms: mean,
        });
    }
    Ok(rows)
}

/// `identify`: fit the requested model(s) on the training split, write model
/// JSONs and an RMS report over the holdout weeks.
pub fn cmd_identify(cfg: &PipelineConfig, which: Which) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let split = split_train_test(&inputs.dataset, cfg.train_fraction, cfg.seed, &cfg.calendar)?;
    let topo = topology_from_building(&inputs.building)?;
    let step = inputs.dataset.step_minutes;

    let want_a = matches!(which, Which::A | Which::Both);
    let want_b = matches!(which, Which::B | Which::Both);
    let (model_a, model_b) = if want_a && want_b && thread_budget() >= 2 {
        std::thread::scope(|s| {
            let ha = s.spawn(|| {
                identify_model_a(&inputs.dataset, &split, &topo, &cfg.smoother, cfg.seed)
            });
            let hb = s.spawn(|| {
                identify_model_b(&inputs.building, step, &split, &cfg.kalman, cfg.nls_budget)
            });
            let a = ha.join().expect("model A identification thread panicked");
            let b = hb.join().expect("model B identification thread panicked");
            Ok::<_, Error>((Some(a?), Some(b?)))
        })?
    } else {
        let a = if want_a {
            Some(identify_model_a(&inputs.dataset, &split, &topo, &cfg.smoother, cfg.seed)?)
        } else {
            None
        };
        let b = if want_b {
            Some(identify_model_b(&inputs.building, step, &split, &cfg.kalman, cfg.nls_budget)?)
        } else {
            None
        };
        (a, b)
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let mut rms = Vec::new();
    if let Some(m) = &model_a {
        fs::write(cfg.out("model_a.json"), m.to_json()?)?;
        rms.extend(rms_rows("A", Some(m), None, &split, &cfg.kalman, &topo.zone_names)?);
        if m.n_zones() == 1 {
            println!(
                "lumped model: x(k+1) = {:.3} x(k) + ({:.3}) u(k) + [{:.4} {:.4}] v(k) + q(k)",
                m.a[(0, 0)],
                m.b[0],
                m.c[(0, 0)],
                m.c[(0, 1)]
            );
        }
    }
    if let Some(m) = &model_b {
        fs::write(cfg.out("model_b.json"), m.to_json()?)?;
        rms.extend(rms_rows("B", None, Some(m), &split, &cfg.kalman, &topo.zone_names)?);
    }

    let report = IdentifyReport {
        config_digest: cfg.digest.clone(),
        model_a: model_a.as_ref().map(|m| ModelAReport {
            a: (0..m.n_zones())
                .map(|i| m.a.row(i).iter().copied().collect())
                .collect(),
            b: m.b.iter().copied().collect(),
            c: (0..m.n_zones())
                .map(|i| m.c.row(i).iter().copied().collect())
                .collect(),
            spectral_radius: m.metadata.spectral_radius,
        }),
        model_b: model_b.as_ref().map(|m| ModelBReport {
            gamma: m.gamma.to_vec(),
            n_states: m.n_states(),
        }),
        rms,
    };
    fs::write(cfg.out("identify_report.json"), serde_json::to_string_pretty(&report)?)?;

    // RMS table, one row per (model, season): zone columns then the mean
    let mut table = String::from("model,season");
    for z in &topo.zone_names {
        table.push_str(&format!(",{z}"));
    }
    table.push_str(",mean\n");
    let mut keys: Vec<(String, String)> = report
        .rms
        .iter()
        .map(|r| (r.model.clone(), r.season.clone()))
        .collect();
    keys.dedup();
    for (model, season) in keys {
        table.push_str(&format!("{model},{season}"));
        for z in topo.zone_names.iter().chain(std::iter::once(&"mean".to_string())) {
            let v = report
                .rms
                .iter()
                .find(|r| r.model == model && r.season == season && &r.zone == z)
                .map_or(f64::NAN, |r| r.rms);
            table.push_str(&format!(",{v:.4}"));
        }
        table.push('\n');
    }
    fs::write(cfg.out("identify_report.csv"), table)?;
    println!("identify: wrote reports to {}", cfg.out_dir.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CompareReport {
    pub config_digest: String,
    pub season: String,
    pub week_start: String,
    pub rms_a: Vec<f64>,
    pub rms_b: Vec<f64>,
    pub rms_a_mean: f64,
    pub rms_b_mean: f64,
    /// Soft expectation, reported rather than enforced.
    pub b_beats_a: bool,
}

/// `compare`: open-loop predictions of both identified models on one holdout
/// test week from a matched initial sample; per-zone trajectory CSV plus RMS.
pub fn cmd_compare(cfg: &PipelineConfig) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let split = split_train_test(&inputs.dataset, cfg.train_fraction, cfg.seed, &cfg.calendar)?;
    let model_a = read_model_a(cfg)?;
    let model_b = read_model_b(cfg)?;

    let (season, week) = split
        .test
        .iter()
        .find_map(|(&s, w)| w.first().map(|wk| (s, wk)))
        .ok_or_else(|| Error::InsufficientData("no test week available".into()))?;
    for s in SeasonLabel::ALL {
        if !model_b.gains_v.contains_key(&s) && split.test.contains_key(&s) {
            return Err(Error::Config(format!(
                "model B has no internal-gains profile for {s}; re-run identify on data covering it"
            )));
        }
    }

    let burn = cfg.kalman.burn_in.min(week.len().saturating_sub(2));
    let (pa, pb) = predict_week(Some(&model_a), Some(&model_b), week, season, &cfg.kalman)?;
    let (pa, pb) = (pa.unwrap(), pb.unwrap());

    let n = week.n_zones();
    let mut sse_a = vec![0.0; n];
    let mut sse_b = vec![0.0; n];
    let mut csv = String::from("timestamp");
    for z in &week.zone_names {
        csv.push_str(&format!(",meas_{z}"));
    }
    for z in &week.zone_names {
        csv.push_str(&format!(",a_{z}"));
    }
    for z in &week.zone_names {
        csv.push_str(&format!(",b_{z}"));
    }
    csv.push('\n');
    let steps = pa.nrows() - 1;
    for r in 1..=steps {
        let k = burn + r;
        csv.push_str(&week.timestamps[k].datetime().format("%Y-%m-%dT%H:%M:%S").to_string());
        for z in 0..n {
            csv.push_str(&format!(",{:.4}", week.zone_temps[(k, z)]));
        }
        for z in 0..n {
            csv.push_str(&format!(",{:.4}", pa[(r, z)]));
            let e = week.zone_temps[(k, z)] - pa[(r, z)];
            sse_a[z] += e * e;
        }
        for z in 0..n {
            csv.push_str(&format!(",{:.4}", pb[(r, z)]));
            let e = week.zone_temps[(k, z)] - pb[(r, z)];
            sse_b[z] += e * e;
        }
        csv.push('\n');
    }
    let rms_a: Vec<f64> = sse_a.iter().map(|s| (s / steps as f64).sqrt()).collect();
    let rms_b: Vec<f64> = sse_b.iter().map(|s| (s / steps as f64).sqrt()).collect();
    let mean_a = rms_a.iter().sum::<f64>() / n as f64;
    let mean_b = rms_b.iter().sum::<f64>() / n as f64;

    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out("compare_week.csv"), csv)?;
    let report = CompareReport {
        config_digest: cfg.digest.clone(),
        season: season.short().into(),
        week_start: week.timestamps[0].datetime().format("%Y-%m-%d").to_string(),
        rms_a,
        rms_b,
        rms_a_mean: mean_a,
        rms_b_mean: mean_b,
        b_beats_a: mean_b <= mean_a,
    };
    fs::write(cfg.out("compare_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "compare: {season} week {}: RMS A {mean_a:.4} degC, B {mean_b:.4} degC",
        report.week_start
    );
    Ok(())
}

fn read_model_a(cfg: &PipelineConfig) -> Result<DataDrivenModel> {
    let p = cfg.out("model_a.json");
    let text = fs::read_to_string(&p).map_err(|e| {
        Error::Config(format!("cannot read {} (run identify first): {e}", p.display()))
    })?;
    DataDrivenModel::from_json(&text)
}

fn read_model_b(cfg: &PipelineConfig) -> Result<RcModel> {
    let p = cfg.out("model_b.json");
    let text = fs::read_to_string(&p).map_err(|e| {
        Error::Config(format!("cannot read {} (run identify first): {e}", p.display()))
    })?;
    RcModel::from_json(&text)
}

#[derive(Debug, Serialize)]
pub struct MpcReport {
    pub config_digest: String,
    pub model: String,
    pub mode: String,
    pub season: String,
    pub week_start: String,
    #[serde(flatten)]
    pub summary: RunSummary,
}

/// `mpc`: a week of receding-horizon control with the selected model against
/// the last complete week's disturbances; open-loop or plant-feedback.
pub fn cmd_mpc(cfg: &PipelineConfig, which: Which, mode: Mode) -> Result<()> {
    if which == Which::Both {
        cmd_mpc(cfg, Which::A, mode)?;
        return cmd_mpc(cfg, Which::B, mode);
    }
    let inputs = load_inputs(cfg)?;
    let d = &inputs.dataset;
    let spw = d.steps_per_week();
    let starts = d.week_starts();
    let &start = starts.last().ok_or_else(|| {
        Error::InsufficientData("dataset has no complete week for the MPC run".into())
    })?;
    let season = crate::timeseries::assign_season(d.timestamps[start], &cfg.calendar)?;
    let tow0 = d.timestamps[start].time_of_week_index(d.step_minutes);
    // last week: wrap the horizon tail onto the week start
    let steps = spw - cfg.mpc.n;
    let v = DMatrix::from_fn(spw, 2, |k, j| d.disturbances[start + k].v2()[j]);

    let plant_model;
    let plant_x0;
    let rollout = match mode {
        Mode::Open => RolloutMode::OpenLoop,
        Mode::Plant => {
            let scenario = inputs.scenario.as_ref().ok_or_else(|| {
                Error::Config("plant mode needs a scenario input for the truth model".into())
            })?;
            let mut m = assemble(&scenario.building, &scenario.gamma, scenario.step_minutes)?;
            m.gains_v = scenario.true_gains_profiles()?;
            let (_, truth) = synth::generate(scenario)?;
            plant_x0 = truth.states.row(start).transpose();
            plant_model = m;
            RolloutMode::Plant { plant: &plant_model, x0: plant_x0.clone() }
        }
    };

    let topo = topology_from_building(&inputs.building)?;
    let (label, run) = match which {
        Which::A => {
            let m = read_model_a(cfg)?;
            let mut counts = vec![0usize; m.n_zones()];
            for &z in &topo.vav_to_zone {
                counts[z] += 1;
            }
            let mcfg = cfg.mpc.to_config(&counts);
            let x0 = d.zone_temps.row(start).transpose();
            let run = mpc::run_receding_horizon(
                &ModelVariant::A(&m),
                &x0,
                &v,
                season,
                tow0,
                &mcfg,
                steps,
                &rollout,
            )?;
            ("a", run)
        }
        Which::B => {
            let m = read_model_b(cfg)?;
            let mcfg = cfg.mpc.to_config(&vec![1usize; m.n_vavs()]);
            let burn = cfg.kalman.burn_in.min(start.max(1));
            let lo = start - burn;
            let y = d.zone_temps.rows(lo, burn + 1).into_owned();
            let u = d.vav_flows.rows(lo, burn + 1).into_owned();
            let vv = DMatrix::from_fn(burn + 1, 2, |k, j| d.disturbances[lo + k].v2()[j]);
            let x0 = kalman_init(&m, &y, &u, &vv, &cfg.kalman)?;
            let run = mpc::run_receding_horizon(
                &ModelVariant::B(&m),
                &x0,
                &v,
                season,
                tow0,
                &mcfg,
                steps,
                &rollout,
            )?;
            ("b", run)
        }
        Which::Both => unreachable!(),
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let mode_tag = match mode {
        Mode::Open => "open",
        Mode::Plant => "plant",
    };
    fs::write(cfg.out(&format!("mpc_{label}_{mode_tag}.csv")), run.to_csv())?;
    let report = MpcReport {
        config_digest: cfg.digest.clone(),
        model: label.into(),
        mode: mode_tag.into(),
        season: season.short().into(),
        week_start: d.timestamps[start].datetime().format("%Y-%m-%d").to_string(),
        summary: run.summary(),
    };
    fs::write(
        cfg.out(&format!("mpc_{label}_{mode_tag}.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "mpc[{label}/{mode_tag}]: cost {:.2}, violations {}, mean solve {:.2} ms",
        report.summary.total_cost, report.summary.violations, report.summary.solve_ms_mean
    );
    Ok(())
}

#[derive(Parser)]
#[command(name = "thermobench", version, about = "Thermal model identification and MPC comparison")]
pub struct Cli {
    /// Pipeline config JSON.
    #[arg(long, global = true, default_value = "pipeline.json")]
    pub config: PathBuf,
    /// Override the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from the configured scenario.
    Generate,
    /// Identify model A, model B or both from the configured data.
    Identify {
        #[arg(long, value_enum, default_value = "both")]
        which: Which,
    },
    /// Open-loop comparison of both identified models on a holdout week.
    Compare,
    /// Week-long receding-horizon control run.
    Mpc {
        #[arg(long, value_enum, default_value = "a")]
        which: Which,
        #[arg(long, value_enum, default_value = "open")]
        mode: Mode,
    },
}

/// Entry point used by the binary: parse, dispatch, map errors to exit codes.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    match &cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Identify { which } => cmd_identify(&cfg, *which),
        Command::Compare => cmd_compare(&cfg),
        Command::Mpc { which, mode } => cmd_mpc(&cfg, *which, *mode),
    }
}
