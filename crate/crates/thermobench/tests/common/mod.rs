//! Shared fixtures for the integration test targets: the two-zone desk
//! building, a one-zone reduction of it, and generators that roll either the
//! RC network or the lumped difference equation into datasets.

#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thermobench::rcnet::{
    assemble, simulate, BuildingDescription, ElementKind, ElementSpec, GainsMode, PhysicalParams,
    RcModel, VavSpec, ZoneSpec,
};
use thermobench::timeseries::{Dataset, DisturbanceFrame, SeasonLabel, Timestamp};

pub fn monday() -> Timestamp {
    Timestamp::from_datetime(
        NaiveDate::from_ymd_opt(2015, 9, 7).unwrap().and_hms_opt(0, 0, 0).unwrap(),
    )
}

pub fn saturday() -> Timestamp {
    Timestamp::from_datetime(
        NaiveDate::from_ymd_opt(2015, 9, 12).unwrap().and_hms_opt(0, 0, 0).unwrap(),
    )
}

pub fn winter_saturday() -> Timestamp {
    Timestamp::from_datetime(
        NaiveDate::from_ymd_opt(2016, 1, 2).unwrap().and_hms_opt(0, 0, 0).unwrap(),
    )
}

pub fn spring_saturday() -> Timestamp {
    Timestamp::from_datetime(
        NaiveDate::from_ymd_opt(2016, 4, 2).unwrap().and_hms_opt(0, 0, 0).unwrap(),
    )
}

/// Two-zone desk building: exterior wall plus window per zone, floor and
/// ceiling slabs, one shared interior wall, two VAVs. Asymmetric volumes so
/// every physical parameter is excited on short fit windows.
pub fn desk_building() -> BuildingDescription {
    let zone = |name: &str, volume: f64| ZoneSpec {
        name: name.into(),
        floor_area: 60.0,
        volume,
        capacitance_multiplier: 5.0,
    };
    let ext = |from: &str, orient: &str| ElementSpec {
        kind: ElementKind::ExteriorWall,
        area: 30.0,
        from: from.into(),
        to: "ambient".into(),
        layer_capacitances: vec![6e4, 6e4],
        layer_conductances: vec![14.0],
        orientation: Some(orient.into()),
    };
    let win = |from: &str, orient: &str| ElementSpec {
        kind: ElementKind::Window,
        area: 8.0,
        from: from.into(),
        to: "ambient".into(),
        layer_capacitances: vec![],
        layer_conductances: vec![],
        orientation: Some(orient.into()),
    };
    let slab = |from: &str, kind: ElementKind, cap: f64| ElementSpec {
        kind,
        area: 60.0,
        from: from.into(),
        to: from.into(),
        layer_capacitances: vec![cap],
        layer_conductances: vec![],
        orientation: None,
    };
    BuildingDescription {
        schema: 1,
        zones: vec![zone("north", 180.0), zone("south", 120.0)],
        elements: vec![
            ext("north", "N"),
            ext("south", "S"),
            win("north", "N"),
            win("south", "S"),
            ElementSpec {
                kind: ElementKind::InteriorWall,
                area: 25.0,
                from: "north".into(),
                to: "south".into(),
                layer_capacitances: vec![2.2e4],
                layer_conductances: vec![],
                orientation: None,
            },
            slab("north", ElementKind::Floor, 4e4),
            slab("south", ElementKind::Floor, 4e4),
            slab("north", ElementKind::Ceiling, 1.5e4),
            slab("south", ElementKind::Ceiling, 1.5e4),
        ],
        vavs: vec![
            VavSpec { id: "v_n".into(), zone: "north".into(), u_min: 0.0, u_max: 0.5 },
            VavSpec { id: "v_s".into(), zone: "south".into(), u_min: 0.0, u_max: 0.5 },
        ],
        exterior_film: 25.0,
    }
}

pub fn desk_gamma() -> PhysicalParams {
    PhysicalParams {
        u_win: 2.8,
        gamma_iw: 3.0,
        gamma_ew: 3.5,
        gamma_floor: 2.0,
        gamma_ceil: 1.5,
        f_ig_const: DVector::from_column_slice(&[0.02, 0.03]),
    }
}

/// One-zone building for the scalar MPC oracles.
pub fn one_zone_building() -> (BuildingDescription, PhysicalParams) {
    let desc = BuildingDescription {
        schema: 1,
        zones: vec![ZoneSpec {
            name: "z".into(),
            floor_area: 60.0,
            volume: 180.0,
            capacitance_multiplier: 5.0,
        }],
        elements: vec![
            ElementSpec {
                kind: ElementKind::ExteriorWall,
                area: 30.0,
                from: "z".into(),
                to: "ambient".into(),
                layer_capacitances: vec![6e4, 6e4],
                layer_conductances: vec![14.0],
                orientation: Some("S".into()),
            },
            ElementSpec {
                kind: ElementKind::Window,
                area: 8.0,
                from: "z".into(),
                to: "ambient".into(),
                layer_capacitances: vec![],
                layer_conductances: vec![],
                orientation: Some("S".into()),
            },
            ElementSpec {
                kind: ElementKind::Floor,
                area: 60.0,
                from: "z".into(),
                to: "z".into(),
                layer_capacitances: vec![4e4],
                layer_conductances: vec![],
                orientation: None,
            },
        ],
        vavs: vec![VavSpec { id: "v0".into(), zone: "z".into(), u_min: 0.0, u_max: 1.0 }],
        exterior_film: 25.0,
    };
    let gamma = PhysicalParams {
        u_win: 2.8,
        gamma_iw: 3.0,
        gamma_ew: 3.5,
        gamma_floor: 2.0,
        gamma_ceil: 1.5,
        f_ig_const: DVector::from_element(1, 0.05),
    };
    (desc, gamma)
}

/// Roll the desk model with weekday-modulated flow schedules and return the
/// noiseless dataset plus the assembled model. One unrecorded settling week
/// lets the wall masses reach their orbit first.
pub fn desk_rollout(
    start: Timestamp,
    t: usize,
    gains_profile: Option<&DMatrix<f64>>,
    seed: u64,
) -> (Dataset, RcModel) {
    let m = assemble(&desk_building(), &desk_gamma(), 15).unwrap();
    let spw = m.steps_per_week();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DVector::from_fn(m.n_states(), |_, _| rng.gen_range(18.0..23.0));
    let mut temps = DMatrix::zeros(t, 2);
    let mut flows = DMatrix::zeros(t, 2);
    let mut frames = Vec::with_capacity(t);
    let mut stamps = Vec::with_capacity(t);
    let settle = spw;
    for kk in 0..settle + t {
        let ts = Timestamp::new(start.epoch_minutes + (kk as i64 - settle as i64) * 15);
        let tow = ts.time_of_week_index(15);
        let daily = (tow as f64 / 96.0 * std::f64::consts::TAU).sin();
        let half_daily = (tow as f64 / 48.0 * std::f64::consts::TAU).cos();
        let u = [
            (0.30 + 0.15 * daily + rng.gen_range(-0.05..0.05)).clamp(0.0, 0.5),
            (0.10 + 0.06 * half_daily + rng.gen_range(-0.03..0.03)).clamp(0.0, 0.5),
        ];
        let ta = 12.0 + 6.0 * daily + rng.gen_range(-0.5..0.5);
        if kk >= settle {
            let k = kk - settle;
            temps[(k, 0)] = (m.c.row(0) * &x)[0];
            temps[(k, 1)] = (m.c.row(1) * &x)[0];
            flows[(k, 0)] = u[0];
            flows[(k, 1)] = u[1];
            frames.push(DisturbanceFrame::new(ta, 12.8));
            stamps.push(ts);
        }
        let mut f = m.gamma.f_ig_const.clone();
        if let Some(p) = gains_profile {
            f += p.row(tow % spw).transpose();
        }
        // one bilinear step via the public simulator
        let u1 = DMatrix::from_row_slice(1, 2, &u);
        let v1 = DMatrix::from_row_slice(1, 2, &[ta, 12.8]);
        let mut m1 = m.clone();
        m1.gamma.f_ig_const = f;
        let sim = simulate(&m1, &x, &u1, &v1, GainsMode::ConstOnly).unwrap();
        x = sim.states.row(1).transpose();
    }
    let d = Dataset {
        step_minutes: 15,
        timestamps: stamps,
        zone_names: vec!["north".into(), "south".into()],
        vav_names: vec!["v_n".into(), "v_s".into()],
        zone_temps: temps,
        vav_flows: flows,
        disturbances: frames,
        excitation_mask: vec![false; t],
    };
    (d, m)
}

/// Noiseless weekend windows (Sat+Sun, 192 steps) in every season.
pub fn weekend_slices_by_season() -> BTreeMap<SeasonLabel, Vec<Dataset>> {
    let mut out = BTreeMap::new();
    for (season, start, seed) in [
        (SeasonLabel::Fall, saturday(), 31),
        (SeasonLabel::Winter, winter_saturday(), 32),
        (SeasonLabel::Spring, spring_saturday(), 33),
    ] {
        let (d, _) = desk_rollout(start, 192, None, seed);
        out.insert(season, vec![d]);
    }
    out
}

/// Paper-anchored lumped coefficients used by the scalar generators.
pub const A0: f64 = 0.80;
pub const B0: f64 = -0.18;
pub const C0: [f64; 2] = [0.0019, 0.028];

/// Monday-aligned weeks from the scalar recursion
/// x(k+1) = a x + b u + c'v + q(tow), measured with additive sensor noise.
/// Inputs carry strong week-to-week variation so the differenced regressors
/// dominate the noise, and Saturday blocks of forced flow steps are flagged
/// in the excitation mask.
pub fn lumped_dataset(weeks: usize, q: impl Fn(usize) -> f64, noise: f64, seed: u64) -> Dataset {
    let spw = 672usize;
    let t = weeks * spw;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut temps = DMatrix::zeros(t, 1);
    let mut flows = DMatrix::zeros(t, 1);
    let mut frames = Vec::with_capacity(t);
    let mut mask = vec![false; t];
    let mut x = 21.0;
    for k in 0..t {
        let tow = k % spw;
        let day = tow / 96;
        let daily = (tow as f64 / 96.0 * std::f64::consts::TAU).sin();
        let saturday_block = day == 5 && (32..96).contains(&(tow % 96));
        let u = if saturday_block {
            // forced-response steps, 8-step blocks cycling through levels
            let level = ((tow % 96 - 32) / 8) % 4;
            mask[k] = true;
            1.0 + level as f64
        } else {
            (2.5 + 1.0 * daily + rng.gen_range(-2.0..2.0)).max(0.0)
        };
        let ta = 14.0 + 5.0 * daily + rng.gen_range(-4.0..4.0);
        let ts = 12.8 + rng.gen_range(-0.5..0.5);
        temps[(k, 0)] = x + noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
        flows[(k, 0)] = u;
        frames.push(DisturbanceFrame::new(ta, ts));
        x = A0 * x + B0 * u + C0[0] * ta + C0[1] * ts + q(tow);
    }
    Dataset {
        step_minutes: 15,
        timestamps: (0..t)
            .map(|i| Timestamp::new(monday().epoch_minutes + i as i64 * 15))
            .collect(),
        zone_names: vec!["floor".into()],
        vav_names: vec!["v0".into()],
        zone_temps: temps,
        vav_flows: flows,
        disturbances: frames,
        excitation_mask: mask,
    }
}

/// Noiseless periodic variant: inputs are pure functions of time-of-week and
/// the recorded state sits on the periodic orbit after a burn-in, so every
/// recorded week is identical.
pub fn lumped_periodic(weeks: usize, q: impl Fn(usize) -> f64) -> Dataset {
    let spw = 672usize;
    let t = weeks * spw;
    let input = |tow: usize| {
        let daily = (tow as f64 / 96.0 * std::f64::consts::TAU).sin();
        let wob = (tow as f64 / 672.0 * std::f64::consts::TAU * 3.0).cos();
        let u = (1.0 + 0.5 * daily + 0.3 * wob).max(0.0);
        let ta = 14.0 + 5.0 * daily;
        (u, ta, 12.8)
    };
    let mut x = 21.0;
    for k in 0..3 * spw {
        let tow = k % spw;
        let (u, ta, ts) = input(tow);
        x = A0 * x + B0 * u + C0[0] * ta + C0[1] * ts + q(tow);
    }
    let mut temps = DMatrix::zeros(t, 1);
    let mut flows = DMatrix::zeros(t, 1);
    let mut frames = Vec::with_capacity(t);
    for k in 0..t {
        let tow = k % spw;
        let (u, ta, ts) = input(tow);
        temps[(k, 0)] = x;
        flows[(k, 0)] = u;
        frames.push(DisturbanceFrame::new(ta, ts));
        x = A0 * x + B0 * u + C0[0] * ta + C0[1] * ts + q(tow);
    }
    Dataset {
        step_minutes: 15,
        timestamps: (0..t)
            .map(|i| Timestamp::new(monday().epoch_minutes + i as i64 * 15))
            .collect(),
        zone_names: vec!["floor".into()],
        vav_names: vec!["v0".into()],
        zone_temps: temps,
        vav_flows: flows,
        disturbances: frames,
        excitation_mask: vec![false; t],
    }
}

pub fn week_slices(d: &Dataset) -> Vec<Dataset> {
    d.week_starts()
        .into_iter()
        .map(|s| d.slice(s, s + d.steps_per_week()))
        .collect()
}
