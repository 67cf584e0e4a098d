//! Dataset container, 15-minute resampling, season assignment, train/test
//! splitting and the RMS error metric.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike, Weekday};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MINUTES_PER_WEEK: i64 = 7 * 24 * 60;

/// Minutes since the Unix epoch. Strictly increasing within a `Dataset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Timestamp {
    pub epoch_minutes: i64,
}

impl Timestamp {
    pub fn new(epoch_minutes: i64) -> Self {
        Timestamp { epoch_minutes }
    }

    pub fn from_datetime(dt: NaiveDateTime) -> Self {
        Timestamp {
            epoch_minutes: dt.and_utc().timestamp() / 60,
        }
    }

    pub fn datetime(&self) -> NaiveDateTime {
        chrono::DateTime::from_timestamp(self.epoch_minutes * 60, 0)
            .expect("timestamp in range")
            .naive_utc()
    }

    pub fn date(&self) -> NaiveDate {
        self.datetime().date()
    }

    /// Minutes elapsed since the enclosing week's Monday 00:00.
    pub fn minutes_into_week(&self) -> i64 {
        let dt = self.datetime();
        let dow = dt.weekday().num_days_from_monday() as i64;
        dow * 24 * 60 + dt.hour() as i64 * 60 + dt.minute() as i64
    }

    /// Time-of-week index at the given step (0..672 for 15-minute steps).
    pub fn time_of_week_index(&self, step_minutes: u32) -> usize {
        (self.minutes_into_week() / step_minutes as i64) as usize
    }

    pub fn is_weekend(&self) -> bool {
        matches!(self.datetime().weekday(), Weekday::Sat | Weekday::Sun)
    }
}

/// Known disturbances at one sample: ambient and supply-air temperature,
/// plus optional per-orientation solar irradiance (E, N, S, W).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceFrame {
    pub ambient_temp: f64,
    pub supply_air_temp: f64,
    pub solar: Option<[f64; 4]>,
}

impl DisturbanceFrame {
    pub fn new(ambient_temp: f64, supply_air_temp: f64) -> Self {
        DisturbanceFrame {
            ambient_temp,
            supply_air_temp,
            solar: None,
        }
    }

    /// The two-component disturbance vector [v_Ta, v_Ts] used by both models.
    pub fn v2(&self) -> [f64; 2] {
        [self.ambient_temp, self.supply_air_temp]
    }
}

/// Aligned sensor time series at a fixed step.
///
/// `zone_temps` is T x n_zones, `vav_flows` is T x n_vav. The excitation mask
/// marks forced-response samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub step_minutes: u32,
    pub timestamps: Vec<Timestamp>,
    pub zone_names: Vec<String>,
    pub vav_names: Vec<String>,
    pub zone_temps: DMatrix<f64>,
    pub vav_flows: DMatrix<f64>,
    pub disturbances: Vec<DisturbanceFrame>,
    pub excitation_mask: Vec<bool>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_zones(&self) -> usize {
        self.zone_temps.ncols()
    }

    pub fn n_vav(&self) -> usize {
        self.vav_flows.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if self.zone_temps.nrows() != t
            || self.vav_flows.nrows() != t
            || self.disturbances.len() != t
            || self.excitation_mask.len() != t
        {
            return Err(Error::Shape(format!(
                "dataset sequences disagree on length: {} timestamps, {} temps, {} flows, {} disturbances, {} mask",
                t,
                self.zone_temps.nrows(),
                self.vav_flows.nrows(),
                self.disturbances.len(),
                self.excitation_mask.len()
            )));
        }
        if self.zone_names.len() != self.n_zones() || self.vav_names.len() != self.n_vav() {
            return Err(Error::Shape("zone/VAV name counts disagree with matrices".into()));
        }
        for w in self.timestamps.windows(2) {
            let gap = w[1].epoch_minutes - w[0].epoch_minutes;
            if gap != self.step_minutes as i64 {
                return Err(Error::Shape(format!(
                    "non-uniform sample spacing: {gap} minutes, expected {}",
                    self.step_minutes
                )));
            }
        }
        if self.zone_temps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite zone temperature".into()));
        }
        if self.vav_flows.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Shape("VAV flow negative or non-finite".into()));
        }
        for d in &self.disturbances {
            if !d.supply_air_temp.is_finite() || !d.ambient_temp.is_finite() {
                return Err(Error::Shape("non-finite disturbance".into()));
            }
            if let Some(s) = d.solar {
                if s.iter().any(|v| *v < 0.0) {
                    return Err(Error::Shape("negative solar entry".into()));
                }
            }
        }
        Ok(())
    }

    /// Contiguous sub-range [start, end).
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            step_minutes: self.step_minutes,
            timestamps: self.timestamps[start..end].to_vec(),
            zone_names: self.zone_names.clone(),
            vav_names: self.vav_names.clone(),
            zone_temps: self.zone_temps.rows(start, end - start).into_owned(),
            vav_flows: self.vav_flows.rows(start, end - start).into_owned(),
            disturbances: self.disturbances[start..end].to_vec(),
            excitation_mask: self.excitation_mask[start..end].to_vec(),
        }
    }

    pub fn steps_per_week(&self) -> usize {
        (MINUTES_PER_WEEK / self.step_minutes as i64) as usize
    }

    /// Start indices of complete Monday-00:00-aligned weeks.
    pub fn week_starts(&self) -> Vec<usize> {
        let spw = self.steps_per_week();
        let mut starts = Vec::new();
        let mut i = 0;
        while i < self.len() {
            if self.timestamps[i].minutes_into_week() == 0 {
                break;
            }
            i += 1;
        }
        while i + spw <= self.len() {
            starts.push(i);
            i += spw;
        }
        starts
    }

    /// Per-zone total airflow, aggregating VAV boxes via the given mapping
    /// (vav index -> zone index).
    pub fn zone_flows(&self, vav_to_zone: &[usize], n_zones: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.len(), n_zones);
        for (v, &z) in vav_to_zone.iter().enumerate() {
            for k in 0..self.len() {
                out[(k, z)] += self.vav_flows[(k, v)];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SeasonLabel {
    Fall,
    Winter,
    Spring,
}

impl SeasonLabel {
    pub const ALL: [SeasonLabel; 3] = [SeasonLabel::Fall, SeasonLabel::Winter, SeasonLabel::Spring];

    pub fn short(&self) -> &'static str {
        match self {
            SeasonLabel::Fall => "fall",
            SeasonLabel::Winter => "winter",
            SeasonLabel::Spring => "spring",
        }
    }
}

impl std::fmt::Display for SeasonLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short())
    }
}

/// Month/day boundaries of the three seasons, inclusive on both ends.
/// Winter wraps over the year boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeasonCalendar {
    pub fall_start: (u32, u32),
    pub fall_end: (u32, u32),
    pub winter_start: (u32, u32),
    pub winter_end: (u32, u32),
    pub spring_start: (u32, u32),
    pub spring_end: (u32, u32),
}

impl Default for SeasonCalendar {
    fn default() -> Self {
        SeasonCalendar {
            fall_start: (9, 1),
            fall_end: (12, 15),
            winter_start: (12, 16),
            winter_end: (1, 25),
            spring_start: (1, 26),
            spring_end: (5, 15),
        }
    }
}

fn in_range(md: (u32, u32), start: (u32, u32), end: (u32, u32)) -> bool {
    if start <= end {
        md >= start && md <= end
    } else {
        // wraps the year boundary
        md >= start || md <= end
    }
}

/// Season containing the date of `t`, or an out-of-season error for dates in
/// the summer gap.
pub fn assign_season(t: Timestamp, calendar: &SeasonCalendar) -> Result<SeasonLabel> {
    let d = t.date();
    let md = (d.month(), d.day());
    if in_range(md, calendar.fall_start, calendar.fall_end) {
        Ok(SeasonLabel::Fall)
    } else if in_range(md, calendar.winter_start, calendar.winter_end) {
        Ok(SeasonLabel::Winter)
    } else if in_range(md, calendar.spring_start, calendar.spring_end) {
        Ok(SeasonLabel::Spring)
    } else {
        Err(Error::OutOfSeason(d.to_string()))
    }
}

/// Per-season week-long train and test slices.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: BTreeMap<SeasonLabel, Vec<Dataset>>,
    pub test: BTreeMap<SeasonLabel, Vec<Dataset>>,
    /// Number of incomplete or out-of-season weeks dropped from the input.
    pub dropped_weeks: usize,
}

impl SplitDataset {
    pub fn train_weeks(&self, season: SeasonLabel) -> &[Dataset] {
        self.train.get(&season).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn test_weeks(&self, season: SeasonLabel) -> &[Dataset] {
        self.test.get(&season).map(|v| v.as_slice()).unwrap_or(&[])
    }
}

/// Resample to a uniform grid. Downsampling (target a multiple of the source
/// step) averages each bin; upsampling (source a multiple of the target)
/// linearly interpolates. The excitation mask of a downsampled bin is true iff
/// any source sample in the bin is true.
pub fn resample(raw: &Dataset, target_minutes: u32) -> Result<Dataset> {
    raw.validate()?;
    let m = raw.step_minutes;
    if target_minutes == 0 {
        return Err(Error::Config("target step must be positive".into()));
    }
    if target_minutes == m {
        return Ok(raw.clone());
    }
    if target_minutes % m == 0 {
        downsample(raw, (target_minutes / m) as usize, target_minutes)
    } else if m % target_minutes == 0 {
        upsample(raw, (m / target_minutes) as usize, target_minutes)
    } else {
        Err(Error::Config(format!(
            "incompatible step ratio: {m} -> {target_minutes} minutes"
        )))
    }
}

fn downsample(raw: &Dataset, ratio: usize, target: u32) -> Result<Dataset> {
    let t_new = raw.len() / ratio;
    if t_new == 0 {
        return Err(Error::InsufficientData("fewer samples than one bin".into()));
    }
    let nz = raw.n_zones();
    let nv = raw.n_vav();
    let mut zone_temps = DMatrix::zeros(t_new, nz);
    let mut vav_flows = DMatrix::zeros(t_new, nv);
    let mut timestamps = Vec::with_capacity(t_new);
    let mut disturbances = Vec::with_capacity(t_new);
    let mut mask = Vec::with_capacity(t_new);
    let has_solar = raw.disturbances.iter().all(|d| d.solar.is_some());
    for b in 0..t_new {
        let lo = b * ratio;
        timestamps.push(raw.timestamps[lo]);
        for j in 0..nz {
            zone_temps[(b, j)] =
                (lo..lo + ratio).map(|k| raw.zone_temps[(k, j)]).sum::<f64>() / ratio as f64;
        }
        for j in 0..nv {
            vav_flows[(b, j)] =
                (lo..lo + ratio).map(|k| raw.vav_flows[(k, j)]).sum::<f64>() / ratio as f64;
        }
        let ta = (lo..lo + ratio).map(|k| raw.disturbances[k].ambient_temp).sum::<f64>()
            / ratio as f64;
        let ts = (lo..lo + ratio)
            .map(|k| raw.disturbances[k].supply_air_temp)
            .sum::<f64>()
            / ratio as f64;
        let solar = if has_solar {
            let mut s = [0.0; 4];
            for k in lo..lo + ratio {
                let src = raw.disturbances[k].solar.unwrap();
                for (acc, v) in s.iter_mut().zip(src) {
                    *acc += v;
                }
            }
            Some(s.map(|v| v / ratio as f64))
        } else {
            None
        };
        disturbances.push(DisturbanceFrame { ambient_temp: ta, supply_air_temp: ts, solar });
        mask.push((lo..lo + ratio).any(|k| raw.excitation_mask[k]));
    }
    Ok(Dataset {
        step_minutes: target,
        timestamps,
        zone_names: raw.zone_names.clone(),
        vav_names: raw.vav_names.clone(),
        zone_temps,
        vav_flows,
        disturbances,
        excitation_mask: mask,
    })
}

fn upsample(raw: &Dataset, ratio: usize, target: u32) -> Result<Dataset> {
    let t = raw.len();
    if t < 2 {
        return Err(Error::InsufficientData("need at least 2 samples to interpolate".into()));
    }
    let t_new = (t - 1) * ratio + 1;
    let nz = raw.n_zones();
    let nv = raw.n_vav();
    let mut zone_temps = DMatrix::zeros(t_new, nz);
    let mut vav_flows = DMatrix::zeros(t_new, nv);
    let mut timestamps = Vec::with_capacity(t_new);
    let mut disturbances = Vec::with_capacity(t_new);
    let mut mask = Vec::with_capacity(t_new);
    for i in 0..t_new {
        let k = i / ratio;
        let frac = (i % ratio) as f64 / ratio as f64;
        let (k0, k1) = if k + 1 < t { (k, k + 1) } else { (t - 2, t - 1) };
        let w = if k + 1 < t { frac } else { 1.0 };
        timestamps.push(Timestamp::new(
            raw.timestamps[0].epoch_minutes + i as i64 * target as i64,
        ));
        for j in 0..nz {
            zone_temps[(i, j)] =
                raw.zone_temps[(k0, j)] * (1.0 - w) + raw.zone_temps[(k1, j)] * w;
        }
        for j in 0..nv {
            vav_flows[(i, j)] = raw.vav_flows[(k0, j)] * (1.0 - w) + raw.vav_flows[(k1, j)] * w;
        }
        let d0 = raw.disturbances[k0];
        let d1 = raw.disturbances[k1];
        let solar = match (d0.solar, d1.solar) {
            (Some(a), Some(b)) => {
                let mut s = [0.0; 4];
                for (out, (x, y)) in s.iter_mut().zip(a.iter().zip(b.iter())) {
                    *out = x * (1.0 - w) + y * w;
                }
                Some(s)
            }
            _ => None,
        };
        disturbances.push(DisturbanceFrame {
            ambient_temp: d0.ambient_temp * (1.0 - w) + d1.ambient_temp * w,
            supply_air_temp: d0.supply_air_temp * (1.0 - w) + d1.supply_air_temp * w,
            solar,
        });
        // interpolated samples inherit the mask of the preceding source sample
        mask.push(raw.excitation_mask[k.min(t - 1)]);
    }
    Ok(Dataset {
        step_minutes: target,
        timestamps,
        zone_names: raw.zone_names.clone(),
        vav_names: raw.vav_names.clone(),
        zone_temps,
        vav_flows,
        disturbances,
        excitation_mask: mask,
    })
}

/// Write a dataset as CSV with header
/// `timestamp,zone_<name>...,vav_<id>...,t_ambient,t_supply[,sol_*],excitation`
/// and ISO-8601 timestamps. Solar columns are emitted only when every frame
/// carries them.
pub fn write_csv<W: std::io::Write>(d: &Dataset, w: W) -> Result<()> {
    d.validate()?;
    let has_solar = !d.is_empty() && d.disturbances.iter().all(|f| f.solar.is_some());
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["timestamp".to_string()];
    header.extend(d.zone_names.iter().map(|n| format!("zone_{n}")));
    header.extend(d.vav_names.iter().map(|n| format!("vav_{n}")));
    header.push("t_ambient".into());
    header.push("t_supply".into());
    if has_solar {
        header.extend(["sol_e", "sol_n", "sol_s", "sol_w"].map(String::from));
    }
    header.push("excitation".into());
    out.write_record(&header)?;
    for k in 0..d.len() {
        let mut row = vec![d.timestamps[k].datetime().format("%Y-%m-%dT%H:%M:%S").to_string()];
        row.extend(d.zone_temps.row(k).iter().map(|v| format!("{v}")));
        row.extend(d.vav_flows.row(k).iter().map(|v| format!("{v}")));
        let f = &d.disturbances[k];
        row.push(format!("{}", f.ambient_temp));
        row.push(format!("{}", f.supply_air_temp));
        if has_solar {
            row.extend(f.solar.unwrap().iter().map(|v| format!("{v}")));
        }
        row.push(if d.excitation_mask[k] { "1".into() } else { "0".into() });
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a dataset from the CSV layout produced by [`write_csv`]. Zone and VAV
/// columns are recognized by their `zone_`/`vav_` prefixes; the sample step
/// is inferred from the timestamp spacing.
pub fn read_csv<R: std::io::Read>(r: R) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("timestamp") {
        return Err(Error::Config("CSV must start with a `timestamp` column".into()));
    }
    let zone_names: Vec<String> = header
        .iter()
        .filter_map(|h| h.strip_prefix("zone_").map(str::to_string))
        .collect();
    let vav_names: Vec<String> = header
        .iter()
        .filter_map(|h| h.strip_prefix("vav_").map(str::to_string))
        .collect();
    let has_solar = header.iter().any(|h| h == "sol_e");
    let expected: Vec<String> = std::iter::once("timestamp".to_string())
        .chain(zone_names.iter().map(|n| format!("zone_{n}")))
        .chain(vav_names.iter().map(|n| format!("vav_{n}")))
        .chain(["t_ambient".into(), "t_supply".into()])
        .chain(if has_solar {
            vec!["sol_e".into(), "sol_n".into(), "sol_s".into(), "sol_w".into()]
        } else {
            vec![]
        })
        .chain(std::iter::once("excitation".into()))
        .collect();
    if header != expected {
        return Err(Error::Config(format!(
            "unexpected CSV column layout: got `{}`",
            header.join(",")
        )));
    }
    if zone_names.is_empty() {
        return Err(Error::Config("CSV has no zone columns".into()));
    }

    let nz = zone_names.len();
    let nv = vav_names.len();
    let mut timestamps = Vec::new();
    let mut temps: Vec<f64> = Vec::new();
    let mut flows: Vec<f64> = Vec::new();
    let mut disturbances = Vec::new();
    let mut mask = Vec::new();
    let field = |rec: &csv::StringRecord, i: usize, line: usize| -> Result<f64> {
        rec[i].trim().parse::<f64>().map_err(|_| {
            Error::Config(format!("line {line}: cannot parse `{}` as a number", &rec[i]))
        })
    };
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        if rec.len() != expected.len() {
            return Err(Error::Shape(format!(
                "line {line}: {} fields, expected {}",
                rec.len(),
                expected.len()
            )));
        }
        let dt = NaiveDateTime::parse_from_str(rec[0].trim(), "%Y-%m-%dT%H:%M:%S")
            .map_err(|_| Error::Config(format!("line {line}: bad timestamp `{}`", &rec[0])))?;
        timestamps.push(Timestamp::from_datetime(dt));
        for i in 0..nz {
            temps.push(field(&rec, 1 + i, line)?);
        }
        for i in 0..nv {
            flows.push(field(&rec, 1 + nz + i, line)?);
        }
        let base = 1 + nz + nv;
        let solar = if has_solar {
            Some([
                field(&rec, base + 2, line)?,
                field(&rec, base + 3, line)?,
                field(&rec, base + 4, line)?,
                field(&rec, base + 5, line)?,
            ])
        } else {
            None
        };
        disturbances.push(DisturbanceFrame {
            ambient_temp: field(&rec, base, line)?,
            supply_air_temp: field(&rec, base + 1, line)?,
            solar,
        });
        mask.push(match rec[expected.len() - 1].trim() {
            "0" | "false" => false,
            "1" | "true" => true,
            other => {
                return Err(Error::Config(format!(
                    "line {line}: excitation flag `{other}` is not 0/1"
                )))
            }
        });
    }
    if timestamps.len() < 2 {
        return Err(Error::InsufficientData(
            "CSV needs at least 2 rows to infer the sample step".into(),
        ));
    }
    let step = timestamps[1].epoch_minutes - timestamps[0].epoch_minutes;
    if step <= 0 {
        return Err(Error::Shape("timestamps must be strictly increasing".into()));
    }
    let t = timestamps.len();
    let d = Dataset {
        step_minutes: step as u32,
        timestamps,
        zone_names,
        vav_names,
        zone_temps: DMatrix::from_row_slice(t, nz, &temps),
        vav_flows: DMatrix::from_row_slice(t, nv, &flows),
        disturbances,
        excitation_mask: mask,
    };
    d.validate()?;
    Ok(d)
}

/// Split complete weeks into per-season train and test sets by seeded shuffle.
/// Per season, ceil(fraction * n_weeks) weeks go to train.
pub fn split_train_test(
    d: &Dataset,
    train_fraction: f64,
    seed: u64,
    calendar: &SeasonCalendar,
) -> Result<SplitDataset> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let spw = d.steps_per_week();
    let starts = d.week_starts();
    let total_possible = d.len() / spw;
    let mut by_season: BTreeMap<SeasonLabel, Vec<Dataset>> = BTreeMap::new();
    let mut dropped = total_possible.saturating_sub(starts.len());
    for &s in &starts {
        match assign_season(d.timestamps[s], calendar) {
            Ok(season) => {
                by_season.entry(season).or_default().push(d.slice(s, s + spw));
            }
            Err(_) => dropped += 1,
        }
    }
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for (season, mut weeks) in by_season {
        let n = weeks.len();
        if n < 2 {
            return Err(Error::InsufficientData(format!(
                "season {season} has {n} complete week(s); at least 2 required to split"
            )));
        }
        let n_train = ((train_fraction * n as f64).ceil() as usize).min(n - 1).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        // independent stream per season so adding a season does not reshuffle others
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
            seed ^ (season as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);
        let train_idx: std::collections::BTreeSet<usize> =
            order[..n_train].iter().copied().collect();
        let mut tr = Vec::new();
        let mut te = Vec::new();
        for (i, w) in weeks.drain(..).enumerate() {
            if train_idx.contains(&i) {
                tr.push(w);
            } else {
                te.push(w);
            }
        }
        train.insert(season, tr);
        test.insert(season, te);
    }
    Ok(SplitDataset { train, test, dropped_weeks: dropped })
}

/// Root mean squared error between two equal-length series.
pub fn rms_error(measured: &[f64], predicted: &[f64]) -> Result<f64> {
    if measured.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "rms_error length mismatch: {} vs {}",
            measured.len(),
            predicted.len()
        )));
    }
    if measured.is_empty() {
        return Err(Error::Shape("rms_error on empty series".into()));
    }
    if measured.iter().chain(predicted.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Shape("rms_error on non-finite input".into()));
    }
    let n = measured.len() as f64;
    let sse: f64 = measured
        .iter()
        .zip(predicted)
        .map(|(m, p)| (m - p) * (m - p))
        .sum();
    Ok((sse / n).sqrt())
}

/// Per-column RMS for matrices plus the mean across columns.
pub fn rms_error_matrix(
    measured: &DMatrix<f64>,
    predicted: &DMatrix<f64>,
) -> Result<(DVector<f64>, f64)> {
    if measured.shape() != predicted.shape() {
        return Err(Error::Shape(format!(
            "rms_error_matrix shape mismatch: {:?} vs {:?}",
            measured.shape(),
            predicted.shape()
        )));
    }
    let n = measured.ncols();
    let mut per_zone = DVector::zeros(n);
    for j in 0..n {
        per_zone[j] = rms_error(
            measured.column(j).as_slice(),
            predicted.column(j).as_slice(),
        )?;
    }
    Ok((per_zone.clone(), per_zone.mean()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mono_dataset(step: u32, values: &[f64], start: Timestamp) -> Dataset {
        let t = values.len();
        Dataset {
            step_minutes: step,
            timestamps: (0..t)
                .map(|i| Timestamp::new(start.epoch_minutes + i as i64 * step as i64))
                .collect(),
            zone_names: vec!["z0".into()],
            vav_names: vec!["v0".into()],
            zone_temps: DMatrix::from_column_slice(t, 1, values),
            vav_flows: DMatrix::zeros(t, 1),
            disturbances: vec![DisturbanceFrame::new(10.0, 12.8); t],
            excitation_mask: vec![false; t],
        }
    }

    fn monday() -> Timestamp {
        // 2015-09-07 is a Monday
        Timestamp::from_datetime(
            NaiveDate::from_ymd_opt(2015, 9, 7).unwrap().and_hms_opt(0, 0, 0).unwrap(),
        )
    }

    #[test]
    fn resample_constant_is_invariant() {
        let d = mono_dataset(1, &[21.0; 30], monday());
        let r = resample(&d, 15).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.zone_temps.iter().all(|&v| v == 21.0));
    }

    #[test]
    fn resample_downsample_averages_bin() {
        let vals: Vec<f64> = (0..15).map(|i| i as f64).collect();
        let d = mono_dataset(1, &vals, monday());
        let r = resample(&d, 15).unwrap();
        assert_eq!(r.len(), 1);
        assert_relative_eq!(r.zone_temps[(0, 0)], 7.0);
    }

    #[test]
    fn resample_upsample_interpolates() {
        let d = mono_dataset(60, &[0.0, 15.0], monday());
        let r = resample(&d, 15).unwrap();
        let got: Vec<f64> = r.zone_temps.column(0).iter().copied().collect();
        let want = [0.0, 3.75, 7.5, 11.25, 15.0];
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert_relative_eq!(*g, w, epsilon = 1e-12);
        }
    }

    #[test]
    fn resample_rejects_incompatible_ratio() {
        let d = mono_dataset(10, &[0.0; 6], monday());
        assert!(matches!(resample(&d, 15), Err(Error::Config(_))));
    }

    #[test]
    fn downsample_is_idempotent() {
        let vals: Vec<f64> = (0..60).map(|i| (i as f64).sin()).collect();
        let d = mono_dataset(1, &vals, monday());
        let r1 = resample(&d, 15).unwrap();
        let r2 = resample(&r1, 15).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn mask_bin_true_if_any_source_true() {
        let mut d = mono_dataset(1, &[0.0; 30], monday());
        d.excitation_mask[3] = true;
        let r = resample(&d, 15).unwrap();
        assert_eq!(r.excitation_mask, vec![true, false]);
    }

    fn ts(y: i32, m: u32, day: u32) -> Timestamp {
        Timestamp::from_datetime(
            NaiveDate::from_ymd_opt(y, m, day).unwrap().and_hms_opt(0, 0, 0).unwrap(),
        )
    }

    #[test]
    fn season_assignment_matches_boundaries() {
        let cal = SeasonCalendar::default();
        assert_eq!(assign_season(ts(2015, 10, 1), &cal).unwrap(), SeasonLabel::Fall);
        assert_eq!(assign_season(ts(2016, 1, 10), &cal).unwrap(), SeasonLabel::Winter);
        assert_eq!(assign_season(ts(2016, 3, 1), &cal).unwrap(), SeasonLabel::Spring);
        assert_eq!(assign_season(ts(2015, 12, 15), &cal).unwrap(), SeasonLabel::Fall);
        assert_eq!(assign_season(ts(2015, 12, 16), &cal).unwrap(), SeasonLabel::Winter);
        assert!(matches!(
            assign_season(ts(2016, 7, 4), &cal),
            Err(Error::OutOfSeason(_))
        ));
    }

    fn weeks_dataset(n_weeks: usize) -> Dataset {
        let spw = (MINUTES_PER_WEEK / 15) as usize;
        let vals = vec![21.0; n_weeks * spw];
        mono_dataset(15, &vals, monday())
    }

    #[test]
    fn split_fractions_and_determinism() {
        let d = weeks_dataset(10);
        let cal = SeasonCalendar::default();
        let s1 = split_train_test(&d, 0.9, 7, &cal).unwrap();
        assert_eq!(s1.train_weeks(SeasonLabel::Fall).len(), 9);
        assert_eq!(s1.test_weeks(SeasonLabel::Fall).len(), 1);
        let s2 = split_train_test(&d, 0.9, 7, &cal).unwrap();
        for (a, b) in s1
            .test_weeks(SeasonLabel::Fall)
            .iter()
            .zip(s2.test_weeks(SeasonLabel::Fall))
        {
            assert_eq!(a.timestamps[0], b.timestamps[0]);
        }
    }

    #[test]
    fn split_half_on_two_weeks() {
        let d = weeks_dataset(2);
        let s = split_train_test(&d, 0.5, 1, &SeasonCalendar::default()).unwrap();
        assert_eq!(s.train_weeks(SeasonLabel::Fall).len(), 1);
        assert_eq!(s.test_weeks(SeasonLabel::Fall).len(), 1);
    }

    #[test]
    fn split_partitions_weeks() {
        let d = weeks_dataset(7);
        let s = split_train_test(&d, 0.7, 3, &SeasonCalendar::default()).unwrap();
        let tr = s.train_weeks(SeasonLabel::Fall);
        let te = s.test_weeks(SeasonLabel::Fall);
        assert_eq!(tr.len() + te.len(), 7);
        let tr_starts: std::collections::BTreeSet<i64> =
            tr.iter().map(|w| w.timestamps[0].epoch_minutes).collect();
        assert!(te.iter().all(|w| !tr_starts.contains(&w.timestamps[0].epoch_minutes)));
    }

    #[test]
    fn split_rejects_single_week_season() {
        let d = weeks_dataset(1);
        assert!(matches!(
            split_train_test(&d, 0.9, 1, &SeasonCalendar::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn rms_examples() {
        assert_eq!(rms_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_relative_eq!(rms_error(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_relative_eq!(
            rms_error(&[2.0, 0.0], &[0.0, 0.0]).unwrap(),
            std::f64::consts::SQRT_2,
            epsilon = 1e-12
        );
        assert!(rms_error(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_dataset() {
        let mut d = mono_dataset(15, &[20.5, 21.25, 20.875, 21.0], monday());
        d.excitation_mask[2] = true;
        d.vav_flows[(1, 0)] = 0.375;
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("timestamp,zone_z0,vav_v0,t_ambient,t_supply,excitation"));
        assert!(text.contains("2015-09-07T00:15:00"));
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn csv_round_trip_with_solar() {
        let mut d = mono_dataset(15, &[21.0, 21.5], monday());
        for (i, f) in d.disturbances.iter_mut().enumerate() {
            f.solar = Some([1.0 + i as f64, 2.0, 3.0, 4.0]);
        }
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("sol_e,sol_n,sol_s,sol_w"));
        assert_eq!(read_csv(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn csv_rejects_malformed_input() {
        assert!(matches!(
            read_csv("nope,zone_a\n1,2\n".as_bytes()),
            Err(Error::Config(_))
        ));
        let bad = "timestamp,zone_a,t_ambient,t_supply,excitation\n\
                   2015-09-07T00:00:00,21.0,10.0,12.8,0\n\
                   2015-09-07T00:15:00,oops,10.0,12.8,0\n";
        assert!(matches!(read_csv(bad.as_bytes()), Err(Error::Config(_))));
        let one_row = "timestamp,zone_a,t_ambient,t_supply,excitation\n\
                       2015-09-07T00:00:00,21.0,10.0,12.8,0\n";
        assert!(matches!(read_csv(one_row.as_bytes()), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn rms_symmetric_and_scales() {
        let a = [1.0, 3.5, -2.0];
        let b = [0.4, 2.0, 1.0];
        let e1 = rms_error(&a, &b).unwrap();
        let e2 = rms_error(&b, &a).unwrap();
        assert_relative_eq!(e1, e2);
        let a2: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y + 3.0 * (x - y)).collect();
        assert_relative_eq!(rms_error(&a2, &b.to_vec()).unwrap(), 3.0 * e1, epsilon = 1e-12);
    }
}
