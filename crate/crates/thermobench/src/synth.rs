//! Synthetic ground-truth data generation: a reference building simulated
//! under a hysteresis-thermostat flow schedule, occupancy-driven internal
//! gains, weather-like disturbances, Saturday forced-response excitation and
//! seeded sensor noise.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate, Timelike, Weekday};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rcnet::{self, assemble, BuildingDescription, ElementKind, ElementSpec, PhysicalParams, VavSpec, ZoneSpec};
use crate::timeseries::{
    assign_season, Dataset, DisturbanceFrame, SeasonCalendar, SeasonLabel, Timestamp,
    MINUTES_PER_WEEK,
};

/// Ambient temperature model: annual sinusoid (the seasonal mean) plus a
/// daily sinusoid plus AR(1) noise. Supply air is held near a constant
/// setpoint with white noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeatherParams {
    /// Annual mean ambient temperature, °C.
    pub annual_mean: f64,
    /// Amplitude of the annual sinusoid, °C.
    pub annual_amplitude: f64,
    /// Day of year at the warm peak of the annual sinusoid.
    pub warmest_day_of_year: f64,
    /// Amplitude of the daily sinusoid (peak mid-afternoon), °C.
    pub daily_amplitude: f64,
    /// AR(1) coefficient of the stochastic component.
    pub ar1_phi: f64,
    /// Innovation standard deviation of the AR(1) component, °C.
    pub ar1_std: f64,
    /// Supply-air temperature setpoint, °C.
    pub supply_mean: f64,
    /// White-noise std around the supply setpoint, °C.
    pub supply_std: f64,
}

impl Default for WeatherParams {
    fn default() -> Self {
        WeatherParams {
            annual_mean: 12.0,
            annual_amplitude: 8.0,
            warmest_day_of_year: 200.0,
            daily_amplitude: 4.0,
            ar1_phi: 0.9,
            ar1_std: 0.4,
            supply_mean: 12.8,
            supply_std: 0.05,
        }
    }
}

impl WeatherParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ar1_phi >= 0.0 && self.ar1_phi < 1.0) {
            return Err(Error::Config(format!(
                "AR(1) coefficient must lie in [0, 1), got {}",
                self.ar1_phi
            )));
        }
        if self.ar1_std < 0.0 || self.supply_std < 0.0 {
            return Err(Error::Config("weather noise stds must be nonnegative".into()));
        }
        Ok(())
    }

    /// Deterministic part of the ambient temperature at a timestamp.
    pub fn ambient_mean(&self, t: Timestamp) -> f64 {
        let dt = t.datetime();
        let doy = dt.date().ordinal() as f64 + dt.hour() as f64 / 24.0;
        let annual = self.annual_mean
            + self.annual_amplitude
                * (2.0 * std::f64::consts::PI * (doy - self.warmest_day_of_year) / 365.25).cos();
        let hour = dt.hour() as f64 + dt.minute() as f64 / 60.0;
        // daily peak near 15:00
        let daily = self.daily_amplitude * (2.0 * std::f64::consts::PI * (hour - 9.0) / 24.0).sin();
        annual + daily
    }
}

/// Occupancy-driven internal gains: a weekday afternoon bump per zone, scaled
/// per season and damped on weekends.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OccupancyParams {
    /// Peak weekday gain per zone, °C per step.
    pub zone_peaks: Vec<f64>,
    /// Season scaling of the whole profile.
    pub season_scales: BTreeMap<SeasonLabel, f64>,
    /// Multiplier applied on Saturdays and Sundays.
    pub weekend_factor: f64,
    /// Hour of day at the weekday peak.
    pub peak_hour: f64,
    /// Width (hours, Gaussian sigma) of the daily bump.
    pub width_hours: f64,
}

impl OccupancyParams {
    pub fn uniform(n_zones: usize, peak: f64) -> Self {
        let mut season_scales = BTreeMap::new();
        season_scales.insert(SeasonLabel::Fall, 1.0);
        season_scales.insert(SeasonLabel::Winter, 0.5);
        season_scales.insert(SeasonLabel::Spring, 0.9);
        OccupancyParams {
            zone_peaks: vec![peak; n_zones],
            season_scales,
            weekend_factor: 0.2,
            peak_hour: 16.0,
            width_hours: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.zone_peaks.iter().any(|&p| p < 0.0) || self.weekend_factor < 0.0 {
            return Err(Error::Config("occupancy amplitudes must be nonnegative".into()));
        }
        if self.width_hours <= 0.0 {
            return Err(Error::Config("occupancy bump width must be positive".into()));
        }
        for s in SeasonLabel::ALL {
            if !self.season_scales.contains_key(&s) {
                return Err(Error::Config(format!("occupancy scale missing for {s}")));
            }
        }
        Ok(())
    }
}

/// Weekly occupancy gains profile for one season: steps-per-week x n_zones,
/// in °C per step, time-of-week indexed from Monday 00:00.
pub fn occupancy_gains(
    p: &OccupancyParams,
    season: SeasonLabel,
    step_minutes: u32,
) -> Result<DMatrix<f64>> {
    p.validate()?;
    let scale = p.season_scales[&season];
    let spw = (MINUTES_PER_WEEK / step_minutes as i64) as usize;
    let n = p.zone_peaks.len();
    let mut out = DMatrix::zeros(spw, n);
    for tow in 0..spw {
        let minutes = tow as i64 * step_minutes as i64;
        let day = minutes / (24 * 60);
        let hour = (minutes % (24 * 60)) as f64 / 60.0;
        let day_factor = if day >= 5 { p.weekend_factor } else { 1.0 };
        let bump = (-((hour - p.peak_hour) / p.width_hours).powi(2) / 2.0).exp();
        for z in 0..n {
            out[(tow, z)] = scale * p.zone_peaks[z] * day_factor * bump;
        }
    }
    Ok(out)
}

/// Forced-response flow steps on Saturdays: starting at `start_hour`, each
/// level is held for `block_steps` steps, with the level sequence rotated per
/// VAV so different boxes step at different magnitudes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcitationParams {
    /// Flow levels, kg/s per VAV.
    pub levels: Vec<f64>,
    pub start_hour: u32,
    pub block_steps: usize,
}

impl Default for ExcitationParams {
    fn default() -> Self {
        // Levels sit well above the thermostat baseline (0.12 kg/s per box)
        // so the forced-response flow dominates normal operation and the
        // Δx ≈ b·u approximation behind the excitation prior holds. Blocks
        // are kept short so the induced temperature dips stay shallow.
        ExcitationParams {
            levels: vec![0.50, 0.38, 0.46, 0.30, 0.42],
            start_hour: 8,
            block_steps: 1,
        }
    }
}

impl ExcitationParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.block_steps == 0 {
            return Err(Error::Config("excitation schedule is empty".into()));
        }
        if self.levels.iter().any(|&l| l < 0.0) {
            return Err(Error::Config("excitation flows must be nonnegative".into()));
        }
        if self.start_hour >= 24 {
            return Err(Error::Config("excitation start hour out of range".into()));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        self.levels.len() * self.block_steps
    }
}

/// Baseline flow schedule: a per-zone hysteresis thermostat that turns its
/// VAVs on above `on_above` and off below `off_below`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThermostatParams {
    pub on_above: f64,
    pub off_below: f64,
    /// Flow per VAV while the zone thermostat is on, kg/s.
    pub flow_on: f64,
}

impl Default for ThermostatParams {
    fn default() -> Self {
        ThermostatParams { on_above: 21.5, off_below: 20.5, flow_on: 0.12 }
    }
}

impl ThermostatParams {
    pub fn validate(&self) -> Result<()> {
        if self.on_above <= self.off_below {
            return Err(Error::Config("thermostat band is inverted".into()));
        }
        if self.flow_on < 0.0 {
            return Err(Error::Config("thermostat flow must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Full scenario: building, true physical parameters, schedules, weather,
/// noise and duration. Deterministic given the embedded seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub building: BuildingDescription,
    pub gamma: PhysicalParams,
    pub step_minutes: u32,
    /// First recorded day; must be a Monday so weeks align.
    pub start_date: NaiveDate,
    /// Recorded duration in whole weeks.
    pub weeks: usize,
    /// Unrecorded pre-run so the record starts from a settled state.
    pub settle_weeks: usize,
    pub initial_temp: f64,
    pub weather: WeatherParams,
    pub occupancy: OccupancyParams,
    pub thermostat: ThermostatParams,
    pub excitation: Option<ExcitationParams>,
    /// Zone-temperature sensor noise std, °C.
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub calendar: SeasonCalendar,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.building.validate()?;
        self.gamma.validate()?;
        self.weather.validate()?;
        self.occupancy.validate()?;
        self.thermostat.validate()?;
        if let Some(exc) = &self.excitation {
            exc.validate()?;
        }
        if self.gamma.f_ig_const.len() != self.building.n_zones()
            || self.occupancy.zone_peaks.len() != self.building.n_zones()
        {
            return Err(Error::Shape("per-zone parameter lengths disagree with the building".into()));
        }
        if self.step_minutes == 0 || (24 * 60) % self.step_minutes != 0 {
            return Err(Error::Config("step must divide the day".into()));
        }
        if self.start_date.weekday() != Weekday::Mon {
            return Err(Error::Config(format!(
                "scenario must start on a Monday, got {}",
                self.start_date
            )));
        }
        if self.weeks < 2 {
            return Err(Error::Config("scenario must span at least 2 weeks".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("sensor noise std must be nonnegative".into()));
        }
        Ok(())
    }

    /// True weekly internal-gains profiles per season (occupancy part only,
    /// excluding the constant gain), °C per step.
    pub fn true_gains_profiles(&self) -> Result<BTreeMap<SeasonLabel, DMatrix<f64>>> {
        let mut out = BTreeMap::new();
        for s in SeasonLabel::ALL {
            out.insert(s, occupancy_gains(&self.occupancy, s, self.step_minutes)?);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Clean companion record to a generated dataset. Independent of the sensor
/// noise parameter and reproducible from the scenario config alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub state_names: Vec<String>,
    /// T x n_x full state trajectory (state at each recorded sample).
    pub states: DMatrix<f64>,
    /// T x n_zones clean zone temperatures.
    pub outputs: DMatrix<f64>,
    /// T x n_vav applied flows over [k, k+1).
    pub inputs: DMatrix<f64>,
    /// T x 2 disturbances [v_Ta, v_Ts].
    pub disturbances: DMatrix<f64>,
    /// T x n_zones total internal gains applied during step k, °C per step.
    pub gains: DMatrix<f64>,
}

/// Generate a dataset plus its clean ground truth by simulating the reference
/// model under the scenario's schedules. Deterministic per seed; the ground
/// truth does not depend on the sensor-noise parameter.
pub fn generate(cfg: &ScenarioConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let model = assemble(&cfg.building, &cfg.gamma, cfg.step_minutes)?;
    let n_z = cfg.building.n_zones();
    let n_v = cfg.building.vavs.len();
    let spw = model.steps_per_week();
    let t_rec = cfg.weeks * spw;
    let t_settle = cfg.settle_weeks * spw;
    let t_total = t_settle + t_rec;

    let start = Timestamp::from_datetime(cfg.start_date.and_hms_opt(0, 0, 0).unwrap());
    let step_min = cfg.step_minutes as i64;
    let ts_at =
        |k: usize| Timestamp::new(start.epoch_minutes + (k as i64 - t_settle as i64) * step_min);

    // seasons of every recorded sample, resolved up front so configuration
    // problems surface before the simulation runs
    let first_season = assign_season(start, &cfg.calendar)?;
    let mut seasons = Vec::with_capacity(t_total);
    for k in 0..t_total {
        if k < t_settle {
            seasons.push(first_season);
        } else {
            seasons.push(assign_season(ts_at(k), &cfg.calendar)?);
        }
    }
    let profiles = cfg.true_gains_profiles()?;

    // weather from its own stream so the noise setting cannot perturb it
    let mut weather_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57454154_48455231);
    let unit = Normal::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut ar = if cfg.weather.ar1_std > 0.0 {
        cfg.weather.ar1_std / (1.0 - cfg.weather.ar1_phi * cfg.weather.ar1_phi).sqrt()
            * unit.sample(&mut weather_rng)
    } else {
        0.0
    };
    let mut v = DMatrix::zeros(t_total, 2);
    for k in 0..t_total {
        v[(k, 0)] = cfg.weather.ambient_mean(ts_at(k)) + ar;
        v[(k, 1)] = cfg.weather.supply_mean + cfg.weather.supply_std * unit.sample(&mut weather_rng);
        ar = cfg.weather.ar1_phi * ar + cfg.weather.ar1_std * unit.sample(&mut weather_rng);
    }

    // vav index -> zone index for the thermostat
    let vav_zone: Vec<usize> = cfg
        .building
        .vavs
        .iter()
        .map(|s| cfg.building.zone_index(&s.zone).unwrap())
        .collect();
    let steps_per_day = (24 * 60 / cfg.step_minutes) as usize;
    let exc_start = cfg.excitation.as_ref().map(|e| (e.start_hour * 60 / cfg.step_minutes) as usize);

    let mut x = DVector::from_element(model.n_states(), cfg.initial_temp);
    let mut zone_on = vec![false; n_z];
    let mut states = DMatrix::zeros(t_rec, model.n_states());
    let mut outputs = DMatrix::zeros(t_rec, n_z);
    let mut inputs = DMatrix::zeros(t_rec, n_v);
    let mut gains = DMatrix::zeros(t_rec, n_z);
    let mut mask = vec![false; t_rec];
    let mut timestamps = Vec::with_capacity(t_rec);

    for k in 0..t_total {
        let t = ts_at(k);
        let y = &model.c * &x;
        for z in 0..n_z {
            if y[z] > cfg.thermostat.on_above {
                zone_on[z] = true;
            } else if y[z] < cfg.thermostat.off_below {
                zone_on[z] = false;
            }
        }
        // Saturday forced-response override
        let step_of_day = (t.minutes_into_week() / step_min) as usize % steps_per_day;
        let excited = match (&cfg.excitation, exc_start) {
            (Some(exc), Some(s0)) => {
                t.datetime().weekday() == Weekday::Sat
                    && step_of_day >= s0
                    && step_of_day < s0 + exc.steps()
            }
            _ => false,
        };
        let mut u = vec![0.0; n_v];
        for (i, &z) in vav_zone.iter().enumerate() {
            u[i] = if excited {
                let exc = cfg.excitation.as_ref().unwrap();
                let block = (step_of_day - exc_start.unwrap()) / exc.block_steps;
                exc.levels[(block + i) % exc.levels.len()]
            } else if zone_on[z] {
                cfg.thermostat.flow_on
            } else {
                0.0
            };
        }

        let tow = t.time_of_week_index(cfg.step_minutes);
        let prof = &profiles[&seasons[k]];
        let f = &cfg.gamma.f_ig_const + prof.row(tow).transpose();

        if k >= t_settle {
            let r = k - t_settle;
            timestamps.push(t);
            states.row_mut(r).copy_from(&x.transpose());
            outputs.row_mut(r).copy_from(&y.transpose());
            inputs.row_mut(r).copy_from_slice(&u);
            gains.row_mut(r).copy_from(&f.transpose());
            mask[r] = excited;
        }
        x = rcnet::step(&model, &x, &u, &[v[(k, 0)], v[(k, 1)]], &f);
        if x.iter().any(|e| !e.is_finite()) {
            return Err(Error::Divergence { step: k });
        }
    }

    let mut zone_temps = outputs.clone();
    if cfg.noise_std > 0.0 {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4E4F_4953_4531);
        let noise =
            Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for e in zone_temps.iter_mut() {
            *e += noise.sample(&mut noise_rng);
        }
    }

    let disturbances: Vec<DisturbanceFrame> = (0..t_rec)
        .map(|r| DisturbanceFrame::new(v[(t_settle + r, 0)], v[(t_settle + r, 1)]))
        .collect();
    let dataset = Dataset {
        step_minutes: cfg.step_minutes,
        timestamps,
        zone_names: cfg.building.zones.iter().map(|z| z.name.clone()).collect(),
        vav_names: cfg.building.vavs.iter().map(|s| s.id.clone()).collect(),
        zone_temps,
        vav_flows: inputs.clone(),
        disturbances,
        excitation_mask: mask,
    };
    dataset.validate()?;
    let truth = GroundTruth {
        state_names: model.state_names.clone(),
        states,
        outputs,
        inputs,
        disturbances: v.rows(t_settle, t_rec).into_owned(),
        gains,
    };
    Ok((dataset, truth))
}

/// Six-zone reference building: five perimeter zones and a core, 21 VAV boxes
/// aggregated onto the six zones. The box-to-zone assignment is illustrative;
/// real floors rarely document it.
pub fn demo_building() -> BuildingDescription {
    let zone = |name: &str, floor_area: f64, volume: f64| ZoneSpec {
        name: name.into(),
        floor_area,
        volume,
        capacitance_multiplier: 5.0,
    };
    let ext = |from: &str, area: f64, orient: &str| ElementSpec {
        kind: ElementKind::ExteriorWall,
        area,
        from: from.into(),
        to: "ambient".into(),
        layer_capacitances: vec![6e4, 6e4],
        layer_conductances: vec![14.0],
        orientation: Some(orient.into()),
    };
    let win = |from: &str, area: f64, orient: &str| ElementSpec {
        kind: ElementKind::Window,
        area,
        from: from.into(),
        to: "ambient".into(),
        layer_capacitances: vec![],
        layer_conductances: vec![],
        orientation: Some(orient.into()),
    };
    let iw = |from: &str, to: &str, area: f64| ElementSpec {
        kind: ElementKind::InteriorWall,
        area,
        from: from.into(),
        to: to.into(),
        layer_capacitances: vec![2.2e4],
        layer_conductances: vec![],
        orientation: None,
    };
    let slab = |from: &str, kind: ElementKind, area: f64| ElementSpec {
        kind,
        area,
        from: from.into(),
        to: from.into(),
        layer_capacitances: vec![if kind == ElementKind::Floor { 4e4 } else { 1.5e4 }],
        layer_conductances: vec![],
        orientation: None,
    };

    let zones = vec![
        zone("nw", 140.0, 420.0),
        zone("ne", 140.0, 420.0),
        zone("sw", 130.0, 390.0),
        zone("se", 130.0, 390.0),
        zone("south", 120.0, 360.0),
        zone("core", 240.0, 720.0),
    ];
    let mut elements = vec![
        ext("nw", 36.0, "N"),
        ext("ne", 36.0, "N"),
        ext("sw", 32.0, "W"),
        ext("se", 32.0, "E"),
        ext("south", 40.0, "S"),
        win("nw", 12.0, "N"),
        win("ne", 12.0, "N"),
        win("sw", 10.0, "W"),
        win("se", 10.0, "E"),
        win("south", 14.0, "S"),
        iw("nw", "ne", 24.0),
        iw("nw", "sw", 20.0),
        iw("ne", "se", 20.0),
        iw("sw", "south", 18.0),
        iw("se", "south", 18.0),
        iw("core", "nw", 26.0),
        iw("core", "ne", 26.0),
        iw("core", "sw", 24.0),
        iw("core", "se", 24.0),
        iw("core", "south", 22.0),
    ];
    for z in ["nw", "ne", "sw", "se", "south", "core"] {
        let area = zones.iter().find(|s| s.name == z).unwrap().floor_area;
        elements.push(slab(z, ElementKind::Floor, area));
        elements.push(slab(z, ElementKind::Ceiling, area));
    }

    // 21 boxes over 6 zones: perimeter zones get 3-4, the core gets 4
    let mut vavs = Vec::new();
    for (zone, count) in
        [("nw", 4usize), ("ne", 3), ("sw", 3), ("se", 3), ("south", 4), ("core", 4)]
    {
        for i in 0..count {
            vavs.push(VavSpec {
                id: format!("{zone}_{i}"),
                zone: zone.into(),
                u_min: 0.0,
                u_max: 0.5,
            });
        }
    }
    BuildingDescription { schema: 1, zones, elements, vavs, exterior_film: 25.0 }
}

/// True physical parameters paired with the demo building.
pub fn demo_gamma() -> PhysicalParams {
    PhysicalParams {
        u_win: 2.8,
        gamma_iw: 3.0,
        gamma_ew: 3.5,
        gamma_floor: 2.0,
        gamma_ceil: 1.5,
        f_ig_const: DVector::from_column_slice(&[1.30, 1.30, 1.25, 1.25, 1.35, 1.10]),
    }
}

/// Ready-made scenario on the demo building: starts on the first fall Monday
/// and spans the requested number of weeks at 15-minute resolution.
pub fn demo_scenario(weeks: usize, seed: u64) -> ScenarioConfig {
    let building = demo_building();
    let n = building.n_zones();
    ScenarioConfig {
        building,
        gamma: demo_gamma(),
        step_minutes: 15,
        start_date: NaiveDate::from_ymd_opt(2015, 9, 7).unwrap(),
        weeks,
        settle_weeks: 1,
        initial_temp: 21.0,
        weather: WeatherParams::default(),
        occupancy: OccupancyParams::uniform(n, 0.4),
        thermostat: ThermostatParams::default(),
        excitation: Some(ExcitationParams::default()),
        noise_std: 0.1,
        seed,
        calendar: SeasonCalendar::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_scenario(seed: u64) -> ScenarioConfig {
        let mut cfg = demo_scenario(2, seed);
        cfg.settle_weeks = 1;
        cfg
    }

    #[test]
    fn zero_noise_dataset_equals_ground_truth() {
        let mut cfg = small_scenario(3);
        cfg.noise_std = 0.0;
        let (d, gt) = generate(&cfg).unwrap();
        assert_eq!(d.zone_temps, gt.outputs);
        assert_eq!(d.vav_flows, gt.inputs);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = small_scenario(11);
        let (d1, g1) = generate(&cfg).unwrap();
        let (d2, g2) = generate(&cfg).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn different_seed_differs() {
        let (d1, _) = generate(&small_scenario(1)).unwrap();
        let (d2, _) = generate(&small_scenario(2)).unwrap();
        assert_ne!(d1.zone_temps, d2.zone_temps);
    }

    #[test]
    fn ground_truth_ignores_noise_setting() {
        let mut a = small_scenario(5);
        let mut b = small_scenario(5);
        a.noise_std = 0.0;
        b.noise_std = 0.3;
        let (_, ga) = generate(&a).unwrap();
        let (_, gb) = generate(&b).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn excitation_flows_dwarf_weekday_flows() {
        let cfg = small_scenario(7);
        let (d, _) = generate(&cfg).unwrap();
        assert!(d.excitation_mask.iter().any(|&m| m));
        let total = |k: usize| d.vav_flows.row(k).sum();
        let mut weekday: Vec<f64> = (0..d.len())
            .filter(|&k| !d.timestamps[k].is_weekend())
            .map(total)
            .collect();
        weekday.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = weekday[weekday.len() / 2];
        let exc_min = (0..d.len())
            .filter(|&k| d.excitation_mask[k])
            .map(total)
            .fold(f64::INFINITY, f64::min);
        assert!(
            exc_min >= 3.0 * median,
            "excitation flow {exc_min} below 3x weekday median {median}"
        );
        // excitation only ever happens on Saturdays
        for k in 0..d.len() {
            if d.excitation_mask[k] {
                assert_eq!(d.timestamps[k].datetime().weekday(), Weekday::Sat);
            }
        }
    }

    #[test]
    fn trajectory_stays_physical() {
        let cfg = small_scenario(9);
        let (d, gt) = generate(&cfg).unwrap();
        d.validate().unwrap();
        assert!(gt.outputs.iter().all(|&t| (0.0..45.0).contains(&t)), "temperatures drifted");
        // settled start: the first day should not show a transient from the
        // uniform initial condition
        let first_day = gt.outputs.rows(0, 96);
        assert!(first_day.iter().all(|&t| (10.0..35.0).contains(&t)));
    }

    #[test]
    fn occupancy_profile_shape() {
        let p = OccupancyParams::uniform(2, 0.1);
        let fall = occupancy_gains(&p, SeasonLabel::Fall, 15).unwrap();
        let winter = occupancy_gains(&p, SeasonLabel::Winter, 15).unwrap();
        assert!(winter.max() < fall.max());
        // Monday 3 a.m. vs Monday 4 p.m.
        let tow_3am = 3 * 4;
        let tow_4pm = 16 * 4;
        assert!(fall[(tow_3am, 0)] < fall[(tow_4pm, 0)]);
        // weekends damped: Saturday 4 p.m. vs Monday 4 p.m.
        assert!(fall[(5 * 96 + tow_4pm, 0)] < fall[(tow_4pm, 0)]);
        let zero = OccupancyParams::uniform(2, 0.0);
        assert_eq!(occupancy_gains(&zero, SeasonLabel::Fall, 15).unwrap().max(), 0.0);
    }

    #[test]
    fn config_validation_rejects_bad_scenarios() {
        let mut cfg = small_scenario(1);
        cfg.noise_std = -0.1;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));

        let mut cfg = small_scenario(1);
        cfg.start_date = NaiveDate::from_ymd_opt(2015, 9, 8).unwrap(); // a Tuesday
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));

        let mut cfg = small_scenario(1);
        cfg.weeks = 1;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));

        let mut cfg = small_scenario(1);
        cfg.start_date = NaiveDate::from_ymd_opt(2016, 6, 6).unwrap(); // summer Monday
        assert!(matches!(generate(&cfg), Err(Error::OutOfSeason(_))));
    }

    #[test]
    fn scenario_json_round_trip() {
        let cfg = small_scenario(42);
        let json = cfg.to_json().unwrap();
        let back = ScenarioConfig::from_json(&json).unwrap();
        let (d1, _) = generate(&cfg).unwrap();
        let (d2, _) = generate(&back).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn demo_building_is_desk_scale() {
        let desc = demo_building();
        desc.validate().unwrap();
        assert_eq!(desc.n_zones(), 6);
        assert_eq!(desc.vavs.len(), 21);
        let m = assemble(&desc, &demo_gamma(), 15).unwrap();
        assert!(m.n_states() >= 30 && m.n_states() <= 50, "got {} states", m.n_states());
    }
}
