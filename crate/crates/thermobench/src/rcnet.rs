//! Model B: a bilinear RC thermal network assembled from a building
//! description. Physical parameters are estimated by simulation-error
//! minimization with Kalman-filtered initial states; seasonal internal gains
//! are extracted afterwards by per-step least squares.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{solve_nls, NlsProblem, NlsSolution};
use crate::timeseries::{Dataset, SeasonLabel};

/// Specific heat of air, J/(kg K).
pub const CP_AIR: f64 = 1005.0;
/// Air density, kg/m^3.
pub const AIR_DENSITY: f64 = 1.2;

pub const BUILDING_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneSpec {
    pub name: String,
    /// m^2
    pub floor_area: f64,
    /// m^3
    pub volume: f64,
    /// Multiplier on the air heat capacity accounting for furniture and other
    /// fast thermal mass lumped into the air node.
    pub capacitance_multiplier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementKind {
    InteriorWall,
    ExteriorWall,
    Floor,
    Ceiling,
    Window,
}

/// One construction element coupling two nodes through a chain of mass
/// layers. `from` is always a zone; `to` is a zone name or `"ambient"`.
/// Windows are massless (no layers) and conduct directly with U_win.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElementSpec {
    pub kind: ElementKind,
    /// m^2
    pub area: f64,
    pub from: String,
    pub to: String,
    /// J/(m^2 K) per mass layer, zone side first.
    pub layer_capacitances: Vec<f64>,
    /// W/(m^2 K) between consecutive layers; length = layers - 1.
    pub layer_conductances: Vec<f64>,
    /// Compass tag for exterior elements ("E"/"N"/"S"/"W"), informational.
    #[serde(default)]
    pub orientation: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VavSpec {
    pub id: String,
    pub zone: String,
    /// kg/s
    pub u_min: f64,
    pub u_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildingDescription {
    pub schema: u32,
    pub zones: Vec<ZoneSpec>,
    pub elements: Vec<ElementSpec>,
    pub vavs: Vec<VavSpec>,
    /// Exterior surface film coefficient, W/(m^2 K).
    pub exterior_film: f64,
}

impl BuildingDescription {
    pub fn n_zones(&self) -> usize {
        self.zones.len()
    }

    pub fn zone_index(&self, name: &str) -> Option<usize> {
        self.zones.iter().position(|z| z.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != BUILDING_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported building schema {} (expected {BUILDING_SCHEMA_VERSION})",
                self.schema
            )));
        }
        if self.zones.is_empty() {
            return Err(Error::Config("building has no zones".into()));
        }
        if self.exterior_film <= 0.0 {
            return Err(Error::Config("exterior_film must be positive".into()));
        }
        for z in &self.zones {
            if z.floor_area <= 0.0 || z.volume <= 0.0 || z.capacitance_multiplier <= 0.0 {
                return Err(Error::Config(format!("zone {} has nonpositive geometry", z.name)));
            }
        }
        for e in &self.elements {
            if e.area <= 0.0 {
                return Err(Error::Config("element area must be positive".into()));
            }
            if self.zone_index(&e.from).is_none() {
                return Err(Error::Config(format!("element `from` zone {} unknown", e.from)));
            }
            if e.to != "ambient" && self.zone_index(&e.to).is_none() {
                return Err(Error::Config(format!("element `to` node {} unknown", e.to)));
            }
            match e.kind {
                ElementKind::Window => {
                    if !e.layer_capacitances.is_empty() {
                        return Err(Error::Config("windows are massless; no layers allowed".into()));
                    }
                    if e.to != "ambient" {
                        return Err(Error::Config("windows must face ambient".into()));
                    }
                }
                _ => {
                    if e.layer_capacitances.is_empty() {
                        return Err(Error::Config("mass elements need at least one layer".into()));
                    }
                    if e.layer_conductances.len() + 1 != e.layer_capacitances.len() {
                        return Err(Error::Config(
                            "layer_conductances must have one entry fewer than layer_capacitances"
                                .into(),
                        ));
                    }
                }
            }
            if e.layer_capacitances.iter().any(|&c| c <= 0.0)
                || e.layer_conductances.iter().any(|&g| g <= 0.0)
            {
                return Err(Error::Config("layer capacitances/conductances must be positive".into()));
            }
        }
        for v in &self.vavs {
            if self.zone_index(&v.zone).is_none() {
                return Err(Error::Config(format!("VAV {} maps to unknown zone {}", v.id, v.zone)));
            }
            if !(v.u_min <= v.u_max) || v.u_min < 0.0 {
                return Err(Error::Config(format!("VAV {} has bad flow bounds", v.id)));
            }
        }
        // every zone touches at least one element
        for z in &self.zones {
            let touched = self.elements.iter().any(|e| e.from == z.name || e.to == z.name);
            if !touched {
                return Err(Error::Assembly(format!("zone {} has no elements", z.name)));
            }
        }
        // connectivity over {zones, ambient} with elements as edges
        let n = self.n_zones();
        let ambient = n;
        let mut parent: Vec<usize> = (0..=n).collect();
        fn find(p: &mut Vec<usize>, i: usize) -> usize {
            if p[i] != i {
                let r = find(p, p[i]);
                p[i] = r;
            }
            p[i]
        }
        for e in &self.elements {
            let a = self.zone_index(&e.from).unwrap();
            let b = if e.to == "ambient" { ambient } else { self.zone_index(&e.to).unwrap() };
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra] = rb;
        }
        // all zones mutually reachable (possibly through ambient)
        let root = find(&mut parent, 0);
        for i in 1..n {
            if find(&mut parent, i) != root {
                return Err(Error::Assembly("element graph is disconnected".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(Error::from)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: BuildingDescription = serde_json::from_str(s)?;
        d.validate()?;
        Ok(d)
    }
}

/// The tuned physical parameters γ: window U-value, four convection
/// coefficients, and a constant internal gain per zone (°C per step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// W/(m^2 K)
    pub u_win: f64,
    pub gamma_iw: f64,
    pub gamma_ew: f64,
    pub gamma_floor: f64,
    pub gamma_ceil: f64,
    /// °C-per-step equivalent constant gain, one entry per zone.
    pub f_ig_const: DVector<f64>,
}

impl PhysicalParams {
    pub fn dim(n_zones: usize) -> usize {
        5 + n_zones
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.u_win, self.gamma_iw, self.gamma_ew, self.gamma_floor, self.gamma_ceil];
        v.extend(self.f_ig_const.iter());
        v
    }

    pub fn from_vec(v: &[f64], n_zones: usize) -> Result<Self> {
        if v.len() != Self::dim(n_zones) {
            return Err(Error::Shape(format!(
                "gamma vector has {} entries, expected {}",
                v.len(),
                Self::dim(n_zones)
            )));
        }
        Ok(PhysicalParams {
            u_win: v[0],
            gamma_iw: v[1],
            gamma_ew: v[2],
            gamma_floor: v[3],
            gamma_ceil: v[4],
            f_ig_const: DVector::from_column_slice(&v[5..]),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_vec().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Config("all physical parameters must be strictly positive".into()));
        }
        Ok(())
    }
}

/// Discrete-time bilinear model
/// x(k+1) = A x + B_v v + B_ig f + Σ_i u_i (B_xu_i x + B_vu_i v), y = C x.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RcModel {
    pub a: DMatrix<f64>,
    pub b_v: DMatrix<f64>,
    pub b_ig: DMatrix<f64>,
    pub b_xu: Vec<DMatrix<f64>>,
    pub b_vu: Vec<DMatrix<f64>>,
    pub c: DMatrix<f64>,
    pub step_minutes: u32,
    pub gamma: PhysicalParams,
    pub gains_v: BTreeMap<SeasonLabel, DMatrix<f64>>,
    pub zone_names: Vec<String>,
    pub vav_ids: Vec<String>,
    pub state_names: Vec<String>,
}

impl RcModel {
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_zones(&self) -> usize {
        self.c.nrows()
    }

    pub fn n_vavs(&self) -> usize {
        self.b_xu.len()
    }

    pub fn steps_per_week(&self) -> usize {
        (crate::timeseries::MINUTES_PER_WEEK / self.step_minutes as i64) as usize
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(Error::from)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(Error::from)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KalmanConfig {
    /// Process noise covariance scale (added as q·I).
    pub process_noise: f64,
    /// Measurement noise covariance scale (°C²).
    pub measurement_noise: f64,
    pub burn_in: usize,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig { process_noise: 1e-4, measurement_noise: 1e-2, burn_in: 96 }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.process_noise <= 0.0 || self.measurement_noise <= 0.0 {
            return Err(Error::Config("Kalman noise scales must be positive".into()));
        }
        Ok(())
    }
}

enum Node {
    State(usize),
    Ambient,
}

struct Assembly {
    a_c: DMatrix<f64>,
    b_vc: DMatrix<f64>,
    caps: Vec<f64>,
    state_names: Vec<String>,
    air_of_zone: Vec<usize>,
}

/// Continuous-time matrices of the linear RC part. Exposed separately so the
/// conservation structure (zero row sums over state + ambient couplings) can
/// be checked before discretization.
pub fn continuous_matrices(
    desc: &BuildingDescription,
    gamma: &PhysicalParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let asm = assemble_continuous(desc, gamma)?;
    Ok((asm.a_c, asm.b_vc))
}

fn assemble_continuous(desc: &BuildingDescription, gamma: &PhysicalParams) -> Result<Assembly> {
    desc.validate()?;
    gamma.validate()?;
    if gamma.f_ig_const.len() != desc.n_zones() {
        return Err(Error::Shape("f_ig_const length != number of zones".into()));
    }

    let n = desc.n_zones();
    let mut caps: Vec<f64> = desc
        .zones
        .iter()
        .map(|z| z.volume * AIR_DENSITY * CP_AIR * z.capacitance_multiplier)
        .collect();
    let mut state_names: Vec<String> = desc.zones.iter().map(|z| format!("air_{}", z.name)).collect();
    let air_of_zone: Vec<usize> = (0..n).collect();

    // allocate mass-layer states and collect conductance edges
    let mut edges: Vec<(Node, Node, f64)> = Vec::new();
    for (ei, e) in desc.elements.iter().enumerate() {
        let from = Node::State(desc.zone_index(&e.from).unwrap());
        let to = if e.to == "ambient" {
            Node::Ambient
        } else {
            Node::State(desc.zone_index(&e.to).unwrap())
        };
        let film = |node: &Node| -> f64 {
            match node {
                Node::Ambient => desc.exterior_film,
                Node::State(_) => match e.kind {
                    ElementKind::InteriorWall => gamma.gamma_iw,
                    ElementKind::ExteriorWall => gamma.gamma_ew,
                    ElementKind::Floor => gamma.gamma_floor,
                    ElementKind::Ceiling => gamma.gamma_ceil,
                    ElementKind::Window => gamma.u_win,
                },
            }
        };
        if e.layer_capacitances.is_empty() {
            // massless: direct conduction (window path)
            edges.push((from, to, gamma.u_win * e.area));
            continue;
        }
        let mut prev = from;
        for (li, &cap) in e.layer_capacitances.iter().enumerate() {
            let idx = caps.len();
            caps.push(cap * e.area);
            state_names.push(format!("el{}_{:?}_l{}", ei, e.kind, li));
            let g = if li == 0 {
                film(&prev) * e.area
            } else {
                e.layer_conductances[li - 1] * e.area
            };
            edges.push((prev, Node::State(idx), g));
            prev = Node::State(idx);
        }
        let g_last = film(&to) * e.area;
        edges.push((prev, to, g_last));
    }

    let n_x = caps.len();
    let mut a_c = DMatrix::zeros(n_x, n_x);
    let mut b_vc = DMatrix::zeros(n_x, 2);
    for (a, b, g) in edges {
        match (&a, &b) {
            (Node::State(i), Node::State(j)) => {
                a_c[(*i, *j)] += g / caps[*i];
                a_c[(*i, *i)] -= g / caps[*i];
                a_c[(*j, *i)] += g / caps[*j];
                a_c[(*j, *j)] -= g / caps[*j];
            }
            (Node::State(i), Node::Ambient) | (Node::Ambient, Node::State(i)) => {
                a_c[(*i, *i)] -= g / caps[*i];
                b_vc[(*i, 0)] += g / caps[*i];
            }
            (Node::Ambient, Node::Ambient) => {
                return Err(Error::Assembly("element couples ambient to itself".into()))
            }
        }
    }
    Ok(Assembly { a_c, b_vc, caps, state_names, air_of_zone })
}

/// Build the discrete-time model: exact matrix exponential on the linear RC
/// part (zero-order-hold disturbances), Euler scaling on the bilinear flow
/// terms, unit internal-gain columns on the zone air nodes.
pub fn assemble(
    desc: &BuildingDescription,
    gamma: &PhysicalParams,
    step_minutes: u32,
) -> Result<RcModel> {
    if step_minutes == 0 {
        return Err(Error::Config("step_minutes must be positive".into()));
    }
    let asm = assemble_continuous(desc, gamma)?;
    let n = desc.n_zones();
    let n_x = asm.caps.len();
    let h = step_minutes as f64 * 60.0;

    // augmented exponential: exp([[Ac, Bvc],[0,0]]·h) = [[Ad, Bdv],[0,I]]
    let mut aug = DMatrix::zeros(n_x + 2, n_x + 2);
    aug.view_mut((0, 0), (n_x, n_x)).copy_from(&(&asm.a_c * h));
    aug.view_mut((0, n_x), (n_x, 2)).copy_from(&(&asm.b_vc * h));
    let e = aug.exp();
    let a = e.view((0, 0), (n_x, n_x)).into_owned();
    let b_v = e.view((0, n_x), (n_x, 2)).into_owned();

    let mut b_ig = DMatrix::zeros(n_x, n);
    let mut c = DMatrix::zeros(n, n_x);
    for z in 0..n {
        b_ig[(asm.air_of_zone[z], z)] = 1.0;
        c[(z, asm.air_of_zone[z])] = 1.0;
    }

    let mut b_xu = Vec::with_capacity(desc.vavs.len());
    let mut b_vu = Vec::with_capacity(desc.vavs.len());
    for v in &desc.vavs {
        let z = desc.zone_index(&v.zone).unwrap();
        let s = asm.air_of_zone[z];
        let coeff = h * CP_AIR / asm.caps[s];
        let mut mx = DMatrix::zeros(n_x, n_x);
        mx[(s, s)] = -coeff;
        let mut mv = DMatrix::zeros(n_x, 2);
        mv[(s, 1)] = coeff;
        b_xu.push(mx);
        b_vu.push(mv);
    }

    Ok(RcModel {
        a,
        b_v,
        b_ig,
        b_xu,
        b_vu,
        c,
        step_minutes,
        gamma: gamma.clone(),
        gains_v: BTreeMap::new(),
        zone_names: desc.zones.iter().map(|z| z.name.clone()).collect(),
        vav_ids: desc.vavs.iter().map(|v| v.id.clone()).collect(),
        state_names: asm.state_names,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainsMode {
    None,
    ConstOnly,
    /// Constant plus the stored seasonal weekly profile, indexed from
    /// `start_tow` at the first step.
    Full { season: SeasonLabel, start_tow: usize },
}

/// Internal gains vector applied during step k.
fn gains_at(m: &RcModel, mode: GainsMode, k: usize) -> Result<DVector<f64>> {
    match mode {
        GainsMode::None => Ok(DVector::zeros(m.n_zones())),
        GainsMode::ConstOnly => Ok(m.gamma.f_ig_const.clone()),
        GainsMode::Full { season, start_tow } => {
            let prof = m
                .gains_v
                .get(&season)
                .ok_or_else(|| Error::Config(format!("no gains profile for {season:?}")))?;
            let spw = m.steps_per_week();
            let tow = (start_tow + k) % spw;
            Ok(&m.gamma.f_ig_const + prof.row(tow).transpose())
        }
    }
}

/// One bilinear step.
pub(crate) fn step(m: &RcModel, x: &DVector<f64>, u: &[f64], v: &[f64; 2], f: &DVector<f64>) -> DVector<f64> {
    let vv = DVector::from_column_slice(v);
    let mut x1 = &m.a * x + &m.b_v * &vv + &m.b_ig * f;
    for (i, &ui) in u.iter().enumerate() {
        if ui != 0.0 {
            x1 += ui * (&m.b_xu[i] * x + &m.b_vu[i] * &vv);
        }
    }
    x1
}

pub struct SimResult {
    /// (steps + 1) x n_x including the initial state.
    pub states: DMatrix<f64>,
    /// (steps + 1) x n_zones, y = C x.
    pub outputs: DMatrix<f64>,
}

pub fn simulate(
    m: &RcModel,
    x0: &DVector<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    mode: GainsMode,
) -> Result<SimResult> {
    let n_x = m.n_states();
    if x0.len() != n_x || u.ncols() != m.n_vavs() || v.ncols() != 2 || u.nrows() != v.nrows() {
        return Err(Error::Shape("simulate dimension mismatch".into()));
    }
    let t = u.nrows();
    let mut states = DMatrix::zeros(t + 1, n_x);
    states.row_mut(0).copy_from(&x0.transpose());
    let mut x = x0.clone();
    for k in 0..t {
        let f = gains_at(m, mode, k)?;
        let urow: Vec<f64> = u.row(k).iter().copied().collect();
        let vrow = [v[(k, 0)], v[(k, 1)]];
        x = step(m, &x, &urow, &vrow, &f);
        if x.iter().any(|e| !e.is_finite()) {
            return Err(Error::Divergence { step: k });
        }
        states.row_mut((k) + 1).copy_from(&x.transpose());
    }
    let outputs = &states * m.c.transpose();
    Ok(SimResult { states, outputs })
}

pub struct KalmanRun {
    /// T x n_x filtered states (after each measurement update).
    pub states: DMatrix<f64>,
    /// Final covariance (symmetric PSD).
    pub p: DMatrix<f64>,
}

/// Linear time-varying Kalman filter over a measured window; with u measured
/// the bilinear model is exactly linear in x. Gains are taken as the constant
/// part only, so fit windows should satisfy the weekend assumption.
pub fn kalman_filter(
    m: &RcModel,
    y: &DMatrix<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    cfg: &KalmanConfig,
) -> Result<KalmanRun> {
    cfg.validate()?;
    let (n_x, n_y) = (m.n_states(), m.n_zones());
    let t = y.nrows();
    if t == 0 || u.nrows() != t || v.nrows() != t || y.ncols() != n_y {
        return Err(Error::Shape("kalman_filter dimension mismatch".into()));
    }

    // initial guess: air nodes from the first measurement, mass nodes at its mean
    let y0_mean = y.row(0).mean();
    let mut x = DVector::from_element(n_x, y0_mean);
    for z in 0..n_y {
        for s in 0..n_x {
            if m.c[(z, s)] != 0.0 {
                x[s] = y[(0, z)];
            }
        }
    }
    let mut p = DMatrix::identity(n_x, n_x) * 10.0;
    let q = DMatrix::identity(n_x, n_x) * cfg.process_noise;
    let r = DMatrix::identity(n_y, n_y) * cfg.measurement_noise;
    let eye = DMatrix::identity(n_x, n_x);

    let mut states = DMatrix::zeros(t, n_x);
    for k in 0..t {
        if k > 0 {
            // predict with the LTV transition A_k = A + Σ u_i B_xu_i
            let mut ak = m.a.clone();
            let urow: Vec<f64> = u.row(k - 1).iter().copied().collect();
            for (i, &ui) in urow.iter().enumerate() {
                if ui != 0.0 {
                    ak += ui * &m.b_xu[i];
                }
            }
            let vrow = [v[(k - 1, 0)], v[(k - 1, 1)]];
            x = step(m, &x, &urow, &vrow, &m.gamma.f_ig_const);
            p = &ak * &p * ak.transpose() + &q;
        }
        // update
        let innov = y.row(k).transpose() - &m.c * &x;
        let s = &m.c * &p * m.c.transpose() + &r;
        let s_inv = s
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular innovation covariance".into()))?;
        let kk = &p * m.c.transpose() * s_inv;
        x += &kk * innov;
        // Joseph form keeps P PSD
        let ikc = &eye - &kk * &m.c;
        p = &ikc * &p * ikc.transpose() + &kk * &r * kk.transpose();
        p = (&p + p.transpose()) * 0.5;
        let tr = p.trace();
        if !tr.is_finite() || tr > 1e12 {
            return Err(Error::Numerical("Kalman covariance diverged".into()));
        }
        if p.diagonal().iter().any(|&d| d < -1e-9) {
            return Err(Error::Numerical("Kalman covariance lost PSD".into()));
        }
        if x.iter().any(|e| !e.is_finite()) {
            return Err(Error::Divergence { step: k });
        }
        states.row_mut(k).copy_from(&x.transpose());
    }
    Ok(KalmanRun { states, p })
}

/// Filtered state at the end of the supplied window, i.e. the state at the
/// start of the evaluation period that follows it.
pub fn kalman_init(
    m: &RcModel,
    y: &DMatrix<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    cfg: &KalmanConfig,
) -> Result<DVector<f64>> {
    if y.nrows() < cfg.burn_in {
        return Err(Error::InsufficientData(format!(
            "Kalman window of {} steps is shorter than the {}-step burn-in",
            y.nrows(),
            cfg.burn_in
        )));
    }
    let run = kalman_filter(m, y, u, v, cfg)?;
    Ok(run.states.row(y.nrows() - 1).transpose())
}

/// Map a dataset's VAV and zone columns onto the model/description ordering.
fn map_columns(names: &[String], wanted: &[String], what: &str) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| {
            names
                .iter()
                .position(|n| n == w)
                .ok_or_else(|| Error::Config(format!("dataset is missing {what} `{w}`")))
        })
        .collect()
}

/// Extract (y, u, v) in model ordering from a dataset.
fn model_inputs(
    d: &Dataset,
    zone_names: &[String],
    vav_ids: &[String],
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let zcols = map_columns(&d.zone_names, zone_names, "zone")?;
    let vcols = map_columns(&d.vav_names, vav_ids, "VAV")?;
    let t = d.len();
    let y = DMatrix::from_fn(t, zcols.len(), |k, j| d.zone_temps[(k, zcols[j])]);
    let u = DMatrix::from_fn(t, vcols.len(), |k, j| d.vav_flows[(k, vcols[j])]);
    let v = DMatrix::from_fn(t, 2, |k, j| d.disturbances[k].v2()[j]);
    Ok((y, u, v))
}

/// Estimate γ by simulation-error minimization over weekend-only slices
/// covering all three seasons. Each objective evaluation re-assembles the
/// model and simulates from a Kalman-initialized state.
pub fn estimate_gamma(
    desc: &BuildingDescription,
    step_minutes: u32,
    slices: &BTreeMap<SeasonLabel, Vec<Dataset>>,
    initial_guesses: &[Vec<f64>],
    kcfg: &KalmanConfig,
    budget: usize,
) -> Result<(PhysicalParams, NlsSolution)> {
    desc.validate()?;
    for season in SeasonLabel::ALL {
        if slices.get(&season).map_or(true, |v| v.is_empty()) {
            return Err(Error::InsufficientData(format!(
                "estimate_gamma needs weekend slices from every season; {season:?} missing"
            )));
        }
    }
    let mut windows = Vec::new();
    for weeks in slices.values() {
        for d in weeks {
            if d.timestamps.iter().any(|t| !t.is_weekend()) {
                return Err(Error::Config(
                    "estimate_gamma fit windows must contain weekend samples only".into(),
                ));
            }
            if d.len() < kcfg.burn_in + 2 {
                return Err(Error::InsufficientData(format!(
                    "fit window of {} steps too short for burn-in {}",
                    d.len(),
                    kcfg.burn_in
                )));
            }
            windows.push(model_inputs(
                d,
                &desc.zones.iter().map(|z| z.name.clone()).collect::<Vec<_>>(),
                &desc.vavs.iter().map(|v| v.id.clone()).collect::<Vec<_>>(),
            )?);
        }
    }

    let n = desc.n_zones();
    let dim = PhysicalParams::dim(n);
    let burn = kcfg.burn_in;
    let residual = move |theta: &[f64]| -> Vec<f64> {
        let run = || -> Result<Vec<f64>> {
            let gamma = PhysicalParams::from_vec(theta, n)?;
            let m = assemble(desc, &gamma, step_minutes)?;
            let mut out = Vec::new();
            for (y, u, v) in &windows {
                let t = y.nrows();
                let yw = y.rows(0, burn + 1).into_owned();
                let uw = u.rows(0, burn + 1).into_owned();
                let vw = v.rows(0, burn + 1).into_owned();
                let x0 = kalman_init(&m, &yw, &uw, &vw, kcfg)?;
                let ue = u.rows(burn, t - burn - 1).into_owned();
                let ve = v.rows(burn, t - burn - 1).into_owned();
                let sim = simulate(&m, &x0, &ue, &ve, GainsMode::ConstOnly)?;
                for k in 1..sim.outputs.nrows() {
                    for z in 0..n {
                        out.push(sim.outputs[(k, z)] - y[(burn + k, z)]);
                    }
                }
            }
            Ok(out)
        };
        run().unwrap_or_else(|_| vec![f64::INFINITY])
    };

    let sol = solve_nls(
        &NlsProblem {
            residual: &residual,
            dim,
            positive: vec![true; dim],
            initial_guesses: initial_guesses.to_vec(),
        },
        budget,
    )?;
    let gamma = PhysicalParams::from_vec(&sol.theta, n)?;
    Ok((gamma, sol))
}

/// Deterministic state reconstruction: propagate the model one step at a time
/// while overwriting every exactly-measured state (unit-selector C rows) with
/// its measurement. Mass states follow the model driven by measured air
/// temperatures, so their error decays at the wall time constants regardless
/// of unmodeled internal gains.
fn reconstruct_states(
    m: &RcModel,
    y: &DMatrix<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    x_init: &DVector<f64>,
) -> DMatrix<f64> {
    let (t, n_x) = (y.nrows(), m.n_states());
    let mut states = DMatrix::zeros(t, n_x);
    let mut x = x_init.clone();
    let substitute = |x: &mut DVector<f64>, k: usize| {
        for z in 0..m.n_zones() {
            let row = m.c.row(z);
            let nz: Vec<usize> = (0..n_x).filter(|&s| row[s] != 0.0).collect();
            if nz.len() == 1 && (row[nz[0]] - 1.0).abs() < 1e-12 {
                x[nz[0]] = y[(k, z)];
            }
        }
    };
    for k in 0..t {
        if k > 0 {
            let urow: Vec<f64> = u.row(k - 1).iter().copied().collect();
            let vrow = [v[(k - 1, 0)], v[(k - 1, 1)]];
            x = step(m, &x, &urow, &vrow, &m.gamma.f_ig_const);
        }
        substitute(&mut x, k);
        states.row_mut(k).copy_from(&x.transpose());
    }
    states
}

/// Estimate the seasonal weekly gains profiles: for each step, the gains-free
/// one-step prediction residual is mapped back through C·B_ig by least
/// squares, then averaged per time-of-week index over the season's weeks.
/// Contiguous weeks share one reconstruction pass so the burn-in (counted
/// from the start of each contiguous run) is paid once.
pub fn estimate_gains_v(
    m: &RcModel,
    train: &BTreeMap<SeasonLabel, Vec<Dataset>>,
    kcfg: &KalmanConfig,
) -> Result<BTreeMap<SeasonLabel, DMatrix<f64>>> {
    let n = m.n_zones();
    let cb = &m.c * &m.b_ig;
    let svd = cb.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax.max(1.0)).count() < n {
        return Err(Error::Identifiability(
            "C·B_ig is column rank deficient; internal gains are not identifiable".into(),
        ));
    }
    let cb_pinv = svd
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Numerical(format!("pseudo-inverse of C·B_ig failed: {e}")))?;

    let spw = m.steps_per_week();
    let mut out = BTreeMap::new();
    for (&season, weeks) in train {
        if weeks.is_empty() {
            continue;
        }
        let mut acc = DMatrix::zeros(spw, n);
        let mut counts = vec![0usize; spw];
        // group weeks into contiguous runs
        let mut runs: Vec<Vec<&Dataset>> = Vec::new();
        for w in weeks {
            let extends = runs.last().map_or(false, |r: &Vec<&Dataset>| {
                let last = r.last().unwrap();
                let end = last.timestamps[last.len() - 1].epoch_minutes
                    + last.step_minutes as i64;
                end == w.timestamps[0].epoch_minutes
            });
            if extends {
                runs.last_mut().unwrap().push(w);
            } else {
                runs.push(vec![w]);
            }
        }
        for run in runs {
            // concatenate the run's channels in model ordering
            let mut ys = Vec::new();
            let mut us = Vec::new();
            let mut vs = Vec::new();
            let mut tows = Vec::new();
            for w in &run {
                let (y, u, v) = model_inputs(w, &m.zone_names, &m.vav_ids)?;
                for k in 0..w.len() {
                    tows.push(w.timestamps[k].time_of_week_index(w.step_minutes));
                }
                ys.push(y);
                us.push(u);
                vs.push(v);
            }
            let t: usize = ys.iter().map(|y| y.nrows()).sum();
            let cat = |parts: &[DMatrix<f64>], cols: usize| {
                let mut m0 = DMatrix::zeros(t, cols);
                let mut r = 0;
                for p in parts {
                    m0.rows_mut(r, p.nrows()).copy_from(p);
                    r += p.nrows();
                }
                m0
            };
            let y = cat(&ys, n);
            let u = cat(&us, m.n_vavs());
            let v = cat(&vs, 2);

            let y0_mean = y.row(0).mean();
            let x_init = DVector::from_element(m.n_states(), y0_mean);
            let xs = reconstruct_states(m, &y, &u, &v, &x_init);
            for k in 0..t - 1 {
                if k < kcfg.burn_in {
                    continue;
                }
                let urow: Vec<f64> = u.row(k).iter().copied().collect();
                let vrow = [v[(k, 0)], v[(k, 1)]];
                let pred = step(m, &xs.row(k).transpose(), &urow, &vrow, &m.gamma.f_ig_const);
                let resid = y.row(k + 1).transpose() - &m.c * pred;
                let f = &cb_pinv * resid;
                let tow = tows[k];
                for z in 0..n {
                    acc[(tow, z)] += f[z];
                }
                counts[tow] += 1;
            }
        }
        for tow in 0..spw {
            if counts[tow] > 0 {
                for z in 0..n {
                    acc[(tow, z)] /= counts[tow] as f64;
                }
            }
        }
        out.insert(season, acc);
    }
    Ok(out)
}
