//! Drive-cycle records with three velocity signals.
//!
//! `v` is what the driver actually does, `v_hat` is the look-ahead prediction
//! used by the MPC and `v_bar` is the crude full-mission estimate (speed
//! limits) used by the reference generator. Elevation is a property of the
//! route, so it is stored along the actual trajectory and re-sampled at
//! predicted positions when a prediction window is cut.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAX_GRADE: f64 = 0.15;
const DISTANCE_TOL: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CycleError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error at row {row}: {msg}")]
    Validation { row: usize, msg: String },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("t0 = {t0} s is beyond the mission end ({end} s)")]
    OutOfRange { t0: usize, end: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    V,
    VHat,
    VBar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriveCycle {
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub v_bar: Vec<f64>,
    pub elev: Vec<f64>,
    pub grade: Vec<f64>,
}

/// One 1 s transition `k → k+1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub v: f64,
    pub a: f64,
    pub grade: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CsvRow {
    t_s: f64,
    v_mps: f64,
    vhat_mps: f64,
    vbar_mps: f64,
    elev_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s_m: Option<f64>,
}

/// Trapezoidal cumulative distance of a 1 s velocity series.
pub fn integrate_distance(v: &[f64]) -> Vec<f64> {
    let mut s = Vec::with_capacity(v.len());
    let mut acc = 0.0;
    for (i, &vi) in v.iter().enumerate() {
        if i > 0 {
            acc += 0.5 * (v[i - 1] + vi);
        }
        s.push(acc);
    }
    s
}

/// Road grade in rad from central differences of elevation over distance,
/// with the slope clamped to ±15 %.
pub fn grade_from_elevation(s: &[f64], elev: &[f64]) -> Vec<f64> {
    let n = s.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            let ds = s[hi] - s[lo];
            if ds > 1e-9 {
                ((elev[hi] - elev[lo]) / ds).clamp(-MAX_GRADE, MAX_GRADE).atan()
            } else {
                0.0
            }
        })
        .collect()
}

/// Linear interpolation of `ys(xs)` at `x`, clamped at both ends. `xs` must
/// be non-decreasing; on plateaus the first matching sample wins.
pub fn interp_clamped(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let hi = xs.partition_point(|&xi| xi < x);
    let lo = hi - 1;
    let dx = xs[hi] - xs[lo];
    if dx <= 0.0 {
        return ys[hi];
    }
    ys[lo] + (ys[hi] - ys[lo]) * (x - xs[lo]) / dx
}

impl DriveCycle {
    /// Builds and validates a cycle on a 1 s grid starting at t = 0.
    pub fn new(
        v: Vec<f64>,
        v_hat: Vec<f64>,
        v_bar: Vec<f64>,
        elev: Vec<f64>,
    ) -> Result<Self, CycleError> {
        let t = (0..v.len()).map(|i| i as f64).collect();
        Self::from_parts(t, v, v_hat, v_bar, elev, None)
    }

    fn from_parts(
        t: Vec<f64>,
        v: Vec<f64>,
        v_hat: Vec<f64>,
        v_bar: Vec<f64>,
        elev: Vec<f64>,
        s: Option<Vec<f64>>,
    ) -> Result<Self, CycleError> {
        let n = t.len();
        let bad = |row: usize, msg: &str| CycleError::Validation {
            row,
            msg: msg.to_string(),
        };
        if n < 2 {
            return Err(bad(0, "a cycle needs at least 2 samples"));
        }
        if [v.len(), v_hat.len(), v_bar.len(), elev.len()]
            .iter()
            .any(|&len| len != n)
        {
            return Err(bad(0, "signal lengths differ"));
        }
        for i in 0..n {
            if i > 0 && ((t[i] - t[i - 1]) - 1.0).abs() > 1e-9 {
                return Err(bad(i, "time step must be exactly 1 s"));
            }
            for (name, x) in [("v", v[i]), ("v_hat", v_hat[i]), ("v_bar", v_bar[i])] {
                if !x.is_finite() || x < 0.0 {
                    return Err(bad(i, &format!("{name} must be finite and non-negative")));
                }
            }
            if !elev[i].is_finite() {
                return Err(bad(i, "elevation must be finite"));
            }
        }
        let s = match s {
            Some(s) => {
                if s.len() != n {
                    return Err(bad(0, "distance length differs"));
                }
                for i in 1..n {
                    let ds = s[i] - s[i - 1];
                    if ds < 0.0 {
                        return Err(bad(i, "distance must be non-decreasing"));
                    }
                    if (ds - 0.5 * (v[i] + v[i - 1])).abs() > DISTANCE_TOL {
                        return Err(bad(i, "distance inconsistent with velocity"));
                    }
                }
                s
            }
            None => integrate_distance(&v),
        };
        let grade = grade_from_elevation(&s, &elev);
        Ok(Self {
            t,
            s,
            v,
            v_hat,
            v_bar,
            elev,
            grade,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Number of 1 s transitions.
    pub fn steps(&self) -> usize {
        self.len() - 1
    }

    pub fn signal(&self, which: Signal) -> &[f64] {
        match which {
            Signal::V => &self.v,
            Signal::VHat => &self.v_hat,
            Signal::VBar => &self.v_bar,
        }
    }

    /// Cumulative distance travelled under the given velocity signal.
    pub fn distance(&self, which: Signal) -> Vec<f64> {
        match which {
            Signal::V => self.s.clone(),
            _ => integrate_distance(self.signal(which)),
        }
    }

    /// Route elevation at distance `x`.
    pub fn elevation_at(&self, x: f64) -> f64 {
        interp_clamped(&self.s, &self.elev, x)
    }

    /// Mean velocity, acceleration and grade over transition `k → k+1`.
    pub fn step(&self, k: usize) -> Step {
        Step {
            v: 0.5 * (self.v[k] + self.v[k + 1]),
            a: self.v[k + 1] - self.v[k],
            grade: 0.5 * (self.grade[k] + self.grade[k + 1]),
        }
    }

    /// Index into the `which`-signal whose predicted distance first reaches
    /// `x`; `None` when the prediction never gets that far.
    pub fn match_index(&self, which: Signal, x: f64) -> Option<usize> {
        let d = self.distance(which);
        let i = d.partition_point(|&di| di < x);
        (i < d.len()).then_some(i)
    }

    /// Prediction window of `horizon` seconds for the vehicle at `t0`.
    ///
    /// The start index is found by matching the measured position `s(t0)`
    /// against the predicted distance of `which`. The measured signal itself
    /// needs no matching and is sliced at `t0` directly.
    pub fn window(&self, t0: usize, horizon: usize, which: Signal) -> Result<Window, CycleError> {
        let end = self.len() - 1;
        if t0 > end {
            return Err(CycleError::OutOfRange { t0, end });
        }
        let horizon = horizon.max(1);
        let d = self.distance(which);
        let (start, clipped) = match which {
            Signal::V => (t0, false),
            _ => match self.match_index(which, self.s[t0]) {
                Some(i) => (i, false),
                None => (end, true),
            },
        };
        let mut stop = (start + horizon).min(end);
        if which != Signal::V {
            // A prediction never drives past the destination; a standstill
            // right at the destination still belongs to the mission.
            let route_end = self.s[end];
            let mut arrival = d.partition_point(|&x| x < route_end).min(end);
            while arrival < end && d[arrival + 1] <= d[arrival] {
                arrival += 1;
            }
            stop = stop.min(arrival.max(start));
        }
        let reaches_end = stop == end || d[stop] >= self.s[end];
        let v: Vec<f64> = self.signal(which)[start..=stop].to_vec();
        let s: Vec<f64> = d[start..=stop].to_vec();
        let elev: Vec<f64> = match which {
            Signal::V => self.elev[start..=stop].to_vec(),
            _ => s.iter().map(|&x| self.elevation_at(x)).collect(),
        };
        let grade = grade_from_elevation(&s, &elev);
        let t = self.t[start..=stop].to_vec();
        let cycle = DriveCycle {
            t,
            s,
            v_hat: v.clone(),
            v_bar: v.clone(),
            v,
            elev,
            grade,
        };
        Ok(Window {
            cycle,
            start,
            clipped,
            reaches_end,
        })
    }

    /// Reads the CSV format `t_s,v_mps,vhat_mps,vbar_mps,elev_m[,s_m]`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, CycleError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = rec.map_err(|e| CycleError::Parse {
                line: i + 2,
                msg: e.to_string(),
            })?;
            rows.push(row);
        }
        let has_s = rows.first().is_some_and(|r| r.s_m.is_some());
        if has_s && rows.iter().any(|r| r.s_m.is_none()) {
            return Err(CycleError::Parse {
                line: 0,
                msg: "s_m given for some rows only".into(),
            });
        }
        if let Some(i) = rows.iter().position(|r| r.v_mps < 0.0) {
            return Err(CycleError::Validation {
                row: i,
                msg: "v must be finite and non-negative".into(),
            });
        }
        let col = |f: fn(&CsvRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let t = col(|r| r.t_s);
        if let Some(&t0) = t.first() {
            if t0.abs() > 1e-9 {
                return Err(CycleError::Validation {
                    row: 0,
                    msg: "time must start at 0".into(),
                });
            }
        }
        Self::from_parts(
            t,
            col(|r| r.v_mps),
            col(|r| r.vhat_mps),
            col(|r| r.vbar_mps),
            col(|r| r.elev_m),
            has_s.then(|| col(|r| r.s_m.unwrap_or(0.0))),
        )
    }

    pub fn load(path: &Path) -> Result<Self, CycleError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), CycleError> {
        let mut w = csv::Writer::from_writer(writer);
        for i in 0..self.len() {
            w.serialize(CsvRow {
                t_s: self.t[i],
                v_mps: self.v[i],
                vhat_mps: self.v_hat[i],
                vbar_mps: self.v_bar[i],
                elev_m: self.elev[i],
                s_m: Some(self.s[i]),
            })
            .map_err(|e| CycleError::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CycleError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// A position-matched slice of a cycle, with all three velocity fields set
/// to the chosen signal.
#[derive(Debug, Clone)]
pub struct Window {
    pub cycle: DriveCycle,
    /// Index of the first sample in the source cycle.
    pub start: usize,
    /// Set when the prediction ended before reaching the measured position.
    pub clipped: bool,
    /// The window's last sample is the end of the mission.
    pub reaches_end: bool,
}

/// A stretch of road with a constant speed limit, expressed in seconds of
/// driving at that limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration_s: f64,
    pub limit_mps: f64,
}

/// Raised-cosine hill (or dip, for negative height) centred at a distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hill {
    pub center_m: f64,
    pub length_m: f64,
    pub height_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub segments: Vec<Segment>,
    pub hills: Vec<Hill>,
    /// Relative amplitude of the smooth speed perturbation.
    pub perturbation: f64,
    /// Expected traffic stops per 1000 s (ignored when `perturbation` is 0).
    pub stops_per_ks: f64,
    /// Use the driven velocity as the look-ahead prediction.
    pub exact_prediction: bool,
    pub accel_max: f64,
    pub decel_max: f64,
    /// Specific power cap on acceleration (W/kg): `a·v ≤ accel_power`.
    #[serde(default = "default_accel_power")]
    pub accel_power: f64,
    pub seed: u64,
}

fn default_accel_power() -> f64 {
    15.0
}

impl SynthSpec {
    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_s).sum()
    }

    /// Roughly 30 min of city driving with stop-and-go traffic and two
    /// pronounced hills.
    pub fn urban(seed: u64) -> Self {
        let kmh = |x: f64| x / 3.6;
        let limits = [50.0, 30.0, 50.0, 60.0, 50.0, 30.0, 50.0, 60.0, 50.0];
        let durations = [240.0, 150.0, 260.0, 240.0, 200.0, 140.0, 220.0, 200.0, 150.0];
        Self {
            segments: limits
                .iter()
                .zip(durations)
                .map(|(&l, d)| Segment {
                    duration_s: d,
                    limit_mps: kmh(l),
                })
                .collect(),
            hills: vec![
                Hill {
                    center_m: 3500.0,
                    length_m: 3600.0,
                    height_m: 55.0,
                },
                Hill {
                    center_m: 11500.0,
                    length_m: 3000.0,
                    height_m: 40.0,
                },
                Hill {
                    center_m: 17500.0,
                    length_m: 2000.0,
                    height_m: -20.0,
                },
            ],
            perturbation: 0.12,
            stops_per_ks: 7.0,
            exact_prediction: false,
            accel_max: 1.3,
            decel_max: 2.5,
            accel_power: default_accel_power(),
            seed,
        }
    }

    /// Roughly 40 min mixing urban, rural and highway driving.
    pub fn mixed(seed: u64) -> Self {
        let kmh = |x: f64| x / 3.6;
        let plan = [
            (50.0, 300.0),
            (70.0, 200.0),
            (100.0, 500.0),
            (130.0, 500.0),
            (100.0, 300.0),
            (70.0, 200.0),
            (50.0, 400.0),
        ];
        Self {
            segments: plan
                .iter()
                .map(|&(l, d)| Segment {
                    duration_s: d,
                    limit_mps: kmh(l),
                })
                .collect(),
            hills: vec![
                Hill {
                    center_m: 9000.0,
                    length_m: 5000.0,
                    height_m: 70.0,
                },
                Hill {
                    center_m: 30000.0,
                    length_m: 6000.0,
                    height_m: 60.0,
                },
                Hill {
                    center_m: 52000.0,
                    length_m: 3000.0,
                    height_m: -25.0,
                },
            ],
            perturbation: 0.08,
            stops_per_ks: 2.5,
            exact_prediction: false,
            accel_max: 1.3,
            decel_max: 2.5,
            accel_power: default_accel_power(),
            seed,
        }
    }

    pub fn with_exact_prediction(mut self) -> Self {
        self.exact_prediction = true;
        self
    }

    pub fn validate(&self) -> Result<(), CycleError> {
        let bad = |m: &str| Err(CycleError::InvalidSpec(m.to_string()));
        if self.duration() < 60.0 {
            return bad("duration must be at least 60 s");
        }
        if self
            .segments
            .iter()
            .any(|s| !(s.limit_mps >= 0.0) || !(s.duration_s >= 0.0))
        {
            return bad("segment limits and durations must be non-negative");
        }
        if !(self.perturbation >= 0.0) || !(self.stops_per_ks >= 0.0) {
            return bad("perturbation and stop rate must be non-negative");
        }
        if !(self.accel_max > 0.0) || !(self.decel_max > 0.0) || !(self.accel_power > 0.0) {
            return bad("acceleration limits must be positive");
        }
        if self.hills.iter().any(|h| !(h.length_m > 0.0)) {
            return bad("hill lengths must be positive");
        }
        Ok(())
    }

    fn elevation(&self, x: f64) -> f64 {
        self.hills
            .iter()
            .map(|h| {
                let u = (x - h.center_m) / (0.5 * h.length_m);
                if u.abs() < 1.0 {
                    0.5 * h.height_m * (1.0 + (std::f64::consts::PI * u).cos())
                } else {
                    0.0
                }
            })
            .sum()
    }
}

/// Clips a target speed trace to acceleration limits, forward then
/// backward, and pins both ends to standstill. Acceleration also falls off
/// with speed under the specific power cap `power`.
fn rate_limit(target: &[f64], accel: f64, decel: f64, power: f64) -> Vec<f64> {
    let n = target.len();
    let mut v = target.to_vec();
    v[0] = 0.0;
    v[n - 1] = 0.0;
    for i in 1..n {
        let a = accel.min(power / v[i - 1].max(1.0));
        v[i] = v[i].min(v[i - 1] + a);
    }
    for i in (0..n - 1).rev() {
        v[i] = v[i].min(v[i + 1] + decel);
    }
    v
}

fn perturbed(limit: &[f64], spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = limit.len();
    if spec.perturbation == 0.0 {
        return limit.to_vec();
    }
    // AR(1) noise with a ~40 s correlation time and unit stationary variance.
    let rho: f64 = 0.975;
    let drive = (1.0 - rho * rho).sqrt() * 3f64.sqrt();
    let mut x = 0.0;
    let mut stop_left = 0usize;
    let stop_p = spec.stops_per_ks / 1000.0;
    (0..n)
        .map(|i| {
            x = rho * x + drive * rng.gen_range(-1.0..1.0);
            if stop_left == 0 && i > 30 && i + 60 < n && rng.gen::<f64>() < stop_p {
                stop_left = rng.gen_range(8..35);
            }
            if stop_left > 0 {
                stop_left -= 1;
                return 0.0;
            }
            (limit[i] * (1.0 + spec.perturbation * x)).clamp(0.0, 1.15 * limit[i])
        })
        .collect()
}

/// Deterministic synthetic cycle for the given spec.
pub fn synth_cycle(spec: &SynthSpec) -> Result<DriveCycle, CycleError> {
    spec.validate()?;
    let n = spec.duration().round() as usize + 1;
    let mut limit = Vec::with_capacity(n);
    for seg in &spec.segments {
        let k = seg.duration_s.round() as usize;
        limit.extend(std::iter::repeat(seg.limit_mps).take(k));
    }
    limit.push(0.0);
    limit.truncate(n);
    let limit_rate = |x: &[f64]| rate_limit(x, spec.accel_max, spec.decel_max, spec.accel_power);
    let v_bar = limit_rate(&limit);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rng_hat = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let v = limit_rate(&perturbed(&limit, spec, &mut rng));
    let v_hat = if spec.exact_prediction {
        v.clone()
    } else {
        limit_rate(&perturbed(&limit, spec, &mut rng_hat))
    };
    let s = integrate_distance(&v);
    let elev = s.iter().map(|&x| spec.elevation(x)).collect();
    DriveCycle::from_parts(
        (0..n).map(|i| i as f64).collect(),
        v,
        v_hat,
        v_bar,
        elev,
        Some(s),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: Vec<f64>) -> DriveCycle {
        let n = v.len();
        DriveCycle::new(v.clone(), v.clone(), v, vec![0.0; n]).unwrap()
    }

    #[test]
    fn trapezoidal_distance() {
        let c = flat(vec![0.0, 1.0, 2.0]);
        assert_eq!(c.s, vec![0.0, 0.5, 2.0]);
    }

    #[test]
    fn standstill_has_zero_grade() {
        let c = flat(vec![0.0; 10]);
        assert!(c.grade.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn grade_is_clamped() {
        let v = vec![10.0; 5];
        let elev = vec![0.0, 5.0, 10.0, 15.0, 20.0];
        let c = DriveCycle::new(v.clone(), v.clone(), v, elev).unwrap();
        for g in &c.grade {
            assert!((g - 0.15f64.atan()).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_velocity_is_rejected_with_row() {
        let csv = "t_s,v_mps,vhat_mps,vbar_mps,elev_m\n0,0,0,0,0\n1,-1,0,0,0\n";
        match DriveCycle::read_csv(csv.as_bytes()) {
            Err(CycleError::Validation { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_row_is_a_parse_error() {
        let csv = "t_s,v_mps,vhat_mps,vbar_mps,elev_m\n0,0,0,0,0\n1,abc,0,0,0\n";
        assert!(matches!(
            DriveCycle::read_csv(csv.as_bytes()),
            Err(CycleError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn uneven_time_step_is_rejected() {
        let csv = "t_s,v_mps,vhat_mps,vbar_mps,elev_m\n0,0,0,0,0\n2,1,0,0,0\n";
        assert!(matches!(
            DriveCycle::read_csv(csv.as_bytes()),
            Err(CycleError::Validation { row: 1, .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let c = synth_cycle(&SynthSpec::urban(3)).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = DriveCycle::read_csv(buf.as_slice()).unwrap();
        for (a, b) in [
            (&c.t, &back.t),
            (&c.s, &back.s),
            (&c.v, &back.v),
            (&c.v_hat, &back.v_hat),
            (&c.v_bar, &back.v_bar),
            (&c.elev, &back.elev),
            (&c.grade, &back.grade),
        ] {
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9));
        }
    }

    #[test]
    fn synth_respects_overshoot_cap() {
        let spec = SynthSpec {
            segments: vec![Segment {
                duration_s: 1800.0,
                limit_mps: 50.0 / 3.6,
            }],
            hills: vec![],
            perturbation: 0.3,
            stops_per_ks: 5.0,
            exact_prediction: false,
            accel_max: 1.3,
            decel_max: 2.5,
            accel_power: default_accel_power(),
            seed: 7,
        };
        let c = synth_cycle(&spec).unwrap();
        let cap = 1.15 * 50.0 / 3.6;
        assert!(c.v.iter().chain(&c.v_hat).all(|&x| x <= cap + 1e-12));
        assert!(c.v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn zero_perturbation_collapses_signals() {
        let mut spec = SynthSpec::urban(1);
        spec.perturbation = 0.0;
        let c = synth_cycle(&spec).unwrap();
        assert_eq!(c.v, c.v_hat);
        assert_eq!(c.v, c.v_bar);
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_cycle(&SynthSpec::mixed(11)).unwrap();
        let b = synth_cycle(&SynthSpec::mixed(11)).unwrap();
        assert_eq!(a, b);
        let c = synth_cycle(&SynthSpec::mixed(12)).unwrap();
        assert_ne!(a.v, c.v);
    }

    #[test]
    fn short_spec_is_invalid() {
        let mut spec = SynthSpec::urban(1);
        spec.segments = vec![Segment {
            duration_s: 30.0,
            limit_mps: 10.0,
        }];
        assert!(matches!(synth_cycle(&spec), Err(CycleError::InvalidSpec(_))));
        spec.segments[0].duration_s = 100.0;
        spec.segments[0].limit_mps = -1.0;
        assert!(matches!(synth_cycle(&spec), Err(CycleError::InvalidSpec(_))));
    }

    #[test]
    fn synth_grade_stays_moderate() {
        for spec in [SynthSpec::urban(5), SynthSpec::mixed(5)] {
            let c = synth_cycle(&spec).unwrap();
            assert!(c.grade.iter().all(|g| g.abs() <= 0.065));
        }
    }

    #[test]
    fn window_at_origin() {
        let c = synth_cycle(&SynthSpec::urban(2)).unwrap();
        let w = c.window(0, 450, Signal::VHat).unwrap();
        assert_eq!(w.start, 0);
        assert_eq!(w.cycle.len(), 451);
    }

    #[test]
    fn window_matches_position() {
        // Prediction is slower: covers 5000 m only at a later index.
        let n = 1000;
        let v = vec![12.0; n];
        let v_hat = vec![10.0; n];
        let c = DriveCycle::new(v.clone(), v_hat, v, vec![0.0; n]).unwrap();
        let t0 = c.s.iter().position(|&s| s >= 5000.0).unwrap();
        let target = c.s[t0];
        let d = c.distance(Signal::VHat);
        let expect = d.iter().position(|&x| x >= target).unwrap();
        let w = c.window(t0, 450, Signal::VHat).unwrap();
        assert_eq!(w.start, expect);
        assert!(d[w.start] >= target && d[w.start - 1] < target);
    }

    #[test]
    fn window_tail_is_clipped() {
        let c = synth_cycle(&SynthSpec::urban(2)).unwrap();
        let end = c.len() - 1;
        let w = c.window(end - 10, 450, Signal::V).unwrap();
        assert_eq!(w.cycle.len(), 11);
        assert!(matches!(
            c.window(end + 1, 10, Signal::V),
            Err(CycleError::OutOfRange { .. })
        ));
    }

    #[test]
    fn measured_window_is_a_plain_slice() {
        let c = synth_cycle(&SynthSpec::urban(9)).unwrap();
        for t0 in [0, 17, 400, 1200] {
            let w = c.window(t0, 300, Signal::V).unwrap();
            assert_eq!(w.cycle.v, c.v[t0..=t0 + 300].to_vec());
            assert_eq!(w.cycle.elev, c.elev[t0..=t0 + 300].to_vec());
        }
    }

    #[test]
    fn prediction_that_falls_short_is_flagged() {
        let n = 200;
        let v = vec![10.0; n];
        let v_hat = vec![1.0; n];
        let c = DriveCycle::new(v.clone(), v_hat, v, vec![0.0; n]).unwrap();
        let w = c.window(150, 40, Signal::VHat).unwrap();
        assert!(w.clipped);
    }

    #[test]
    fn prediction_stops_at_the_destination() {
        // The prediction is faster and would pass the 1990 m destination at
        // index 166.
        let n = 200;
        let v = vec![10.0; n];
        let v_hat = vec![12.0; n];
        let c = DriveCycle::new(v.clone(), v_hat, v, vec![0.0; n]).unwrap();
        let w = c.window(150, 450, Signal::VHat).unwrap();
        assert!(!w.clipped && w.reaches_end);
        let last = *w.cycle.s.last().unwrap();
        assert!(last >= c.s[n - 1] && last - 12.0 < c.s[n - 1]);
        assert!(!c.window(0, 100, Signal::VHat).unwrap().reaches_end);
    }
}
