//! Control-oriented convex surrogate of the powertrain.
//!
//! * fuel power: speed-dependent quadratic Willans line,
//!   `P_f = κ0·e0 + κ1·P_me + κ2·P_me²`;
//! * motor losses: speed-dependent max of affine pieces in the mechanical
//!   power (10 pieces for motor 1, 4 for motor 2);
//! * battery: source power as the max of two quadratics in `P_b` at a fixed
//!   open-circuit voltage.
//!
//! Coefficients are fitted at 17 uniformly spaced speed nodes and
//! interpolated linearly in between, which keeps every evaluation convex in
//! the powers.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::powertrain::{battery_response, ComponentMaps, MotorMap, Speeds, VehicleParams};

pub const SPEED_NODES: usize = 17;
pub const PIECES_M1: usize = 10;
pub const PIECES_M2: usize = 4;
pub const V_OC_CONST: f64 = 46.0;
const PWL_ITERATIONS: usize = 50;
const PWL_SAMPLES: usize = 121;
const FIT_SEED: u64 = 0x5eed;
/// Battery terminal power range covered by the quadratic fit.
const BATTERY_FIT_RANGE: f64 = 25e3;

#[derive(Debug, Error, PartialEq)]
pub enum ConvexError {
    #[error("fit failed at {what} node {node}: {msg}")]
    Fit {
        what: &'static str,
        node: usize,
        msg: String,
    },
    #[error("{what} speed {speed:.3} rad/s outside fitted range [{lo:.1}, {hi:.1}]")]
    BinRange {
        what: &'static str,
        speed: f64,
        lo: f64,
        hi: f64,
    },
}

/// Affine piece `a·P + b`.
pub type Piece = (f64, f64);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryFit {
    pub r1_plus: f64,
    pub r2_plus: f64,
    pub r1_minus: f64,
    pub r2_minus: f64,
}

impl BatteryFit {
    pub fn source_power(&self, p_b: f64) -> f64 {
        let plus = self.r1_plus * p_b + self.r2_plus * p_b * p_b;
        let minus = self.r1_minus * p_b + self.r2_minus * p_b * p_b;
        plus.max(minus)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexModel {
    pub we_nodes: Vec<f64>,
    pub w1_nodes: Vec<f64>,
    pub w2_nodes: Vec<f64>,
    pub kappa: Vec<[f64; 3]>,
    pub pwl1: Vec<Vec<Piece>>,
    pub pwl2: Vec<Vec<Piece>>,
    pub battery: BatteryFit,
    pub voc: f64,
}

/// Coefficients of the surrogate at one operating speed triple.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    pub kappa: [f64; 3],
    pub pwl1: Vec<Piece>,
    pub pwl2: Vec<Piece>,
    pub battery: BatteryFit,
}

impl LocalModel {
    pub fn fuel_power(&self, p_me: f64, e0: bool) -> f64 {
        let [k0, k1, k2] = self.kappa;
        let idle = if e0 { k0 } else { 0.0 };
        idle + k1 * p_me + k2 * p_me * p_me
    }

    pub fn loss1(&self, p_m1: f64) -> f64 {
        max_affine(&self.pwl1, p_m1)
    }

    pub fn loss2(&self, p_m2: f64) -> f64 {
        max_affine(&self.pwl2, p_m2)
    }

    pub fn source_power(&self, p_m1: f64, p_m2: f64, p_aux: f64) -> f64 {
        let p_b = p_m1 + self.loss1(p_m1) + p_m2 + self.loss2(p_m2) + p_aux;
        self.battery.source_power(p_b)
    }
}

pub fn max_affine(pieces: &[Piece], x: f64) -> f64 {
    pieces
        .iter()
        .map(|&(a, b)| a * x + b)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// The pieces that attain the maximum somewhere on `[lo, hi]`. On that
/// interval their max equals the max over all pieces.
pub fn active_pieces(pieces: &[Piece], lo: f64, hi: f64) -> Vec<Piece> {
    let mut xs = vec![lo, hi];
    for (i, &(a1, b1)) in pieces.iter().enumerate() {
        for &(a2, b2) in &pieces[i + 1..] {
            if a1 != a2 {
                let x = (b2 - b1) / (a1 - a2);
                if x > lo && x < hi {
                    xs.push(x);
                }
            }
        }
    }
    let mut keep = vec![false; pieces.len()];
    for x in xs {
        let top = max_affine(pieces, x);
        let tol = 1e-9 * top.abs().max(1.0);
        for (k, &(a, b)) in pieces.iter().enumerate() {
            keep[k] |= a * x + b >= top - tol;
        }
    }
    pieces
        .iter()
        .zip(keep)
        .filter_map(|(&p, k)| k.then_some(p))
        .collect()
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

fn locate(nodes: &[f64], x: f64, what: &'static str) -> Result<(usize, f64), ConvexError> {
    let n = nodes.len();
    let (lo, hi) = (nodes[0], nodes[n - 1]);
    let tol = 1e-9 * hi.abs().max(1.0);
    if x < lo - tol || x > hi + tol {
        return Err(ConvexError::BinRange {
            what,
            speed: x,
            lo,
            hi,
        });
    }
    let i = nodes.partition_point(|&a| a <= x).clamp(1, n - 1) - 1;
    let t = ((x - nodes[i]) / (nodes[i + 1] - nodes[i])).clamp(0.0, 1.0);
    Ok((i, t))
}

fn blend_pieces(a: &[Piece], b: &[Piece], t: f64) -> Vec<Piece> {
    a.iter()
        .zip(b)
        .map(|(&(a0, b0), &(a1, b1))| (a0 + t * (a1 - a0), b0 + t * (b1 - b0)))
        .collect()
}

/// Ordinary least squares of `y` on the given regressors (normal equations,
/// Gaussian elimination with partial pivoting).
fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let k = rows[0].len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (r, &yi) in rows.iter().zip(y) {
        for i in 0..k {
            for j in 0..k {
                a[i][j] += r[i] * r[j];
            }
            a[i][k] += r[i] * yi;
        }
    }
    let scale = (0..k).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    for c in 0..k {
        let p = (c..k).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() <= 1e-13 * scale {
            return None;
        }
        a.swap(c, p);
        for r in 0..k {
            if r != c {
                let f = a[r][c] / a[c][c];
                for j in c..=k {
                    a[r][j] -= f * a[c][j];
                }
            }
        }
    }
    Some((0..k).map(|i| a[i][k] / a[i][i]).collect())
}

/// Willans fit `y ≈ κ0 + κ1·P + κ2·P²` with κ2 ≥ 0, minimizing the
/// relative error: an absolute fit lets the high-load points pull the
/// intercept well off the idle fuel flow.
pub fn fit_willans(p: &[f64], y: &[f64]) -> Option<[f64; 3]> {
    let scale = p.iter().fold(1.0f64, |m, &x| m.max(x.abs()));
    let weight = |yi: f64| if yi > 0.0 { 1.0 / yi } else { 1.0 };
    let rows: Vec<Vec<f64>> = p
        .iter()
        .zip(y)
        .map(|(&x, &yi)| {
            let u = x / scale;
            let w = weight(yi);
            vec![w, w * u, w * u * u]
        })
        .collect();
    let ones: Vec<f64> = y.iter().map(|&yi| yi * weight(yi)).collect();
    let c = least_squares(&rows, &ones)?;
    if c[2] >= 0.0 {
        return Some([c[0], c[1] / scale, c[2] / (scale * scale)]);
    }
    let rows: Vec<Vec<f64>> = rows.iter().map(|r| r[..2].to_vec()).collect();
    let c = least_squares(&rows, &ones)?;
    Some([c[0], c[1] / scale, 0.0])
}

fn fit_line(x: &[f64], y: &[f64], idx: &[usize]) -> Option<Piece> {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| vec![1.0, x[i]]).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let c = least_squares(&rows, &ys)?;
    Some((c[1], c[0]))
}

/// Convex regression by alternating partition / refit: points are assigned
/// to the piece that is largest there, each piece is refitted by least
/// squares on its points, and the best iterate (max abs error) is kept.
pub fn fit_max_affine(x: &[f64], y: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<Piece> {
    let n = x.len();
    let (lo, hi) = (x[0], x[n - 1]);
    if hi - lo <= 1e-9 {
        let c = y.iter().sum::<f64>() / n as f64;
        return vec![(0.0, c); k];
    }
    // Start from contiguous equal-width partitions.
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..n {
        let g = (((x[i] - lo) / (hi - lo)) * k as f64).floor() as usize;
        groups[g.min(k - 1)].push(i);
    }
    let mut pieces = vec![(0.0, 0.0); k];
    let mut best: Option<(f64, Vec<Piece>)> = None;
    for _ in 0..PWL_ITERATIONS {
        for g in 0..k {
            if groups[g].len() < 2 {
                // Reseed an empty piece around a random sample.
                let c = rng.gen_range(0..n);
                let lo_i = c.saturating_sub(1);
                let hi_i = (c + 1).min(n - 1);
                groups[g] = (lo_i..=hi_i).collect();
            }
            if let Some(p) = fit_line(x, y, &groups[g]) {
                pieces[g] = p;
            }
        }
        let err = (0..n)
            .map(|i| (max_affine(&pieces, x[i]) - y[i]).abs())
            .fold(0.0, f64::max);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pieces.clone()));
        }
        let mut next: Vec<Vec<usize>> = vec![Vec::new(); k];
        for i in 0..n {
            let g = (0..k)
                .max_by(|&a, &b| {
                    let va = pieces[a].0 * x[i] + pieces[a].1;
                    let vb = pieces[b].0 * x[i] + pieces[b].1;
                    va.total_cmp(&vb).then(b.cmp(&a))
                })
                .unwrap_or(0);
            next[g].push(i);
        }
        if next == groups {
            break;
        }
        groups = next;
    }
    let mut out = best.map(|(_, p)| p).unwrap_or(pieces);
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    out
}

fn fit_motor(
    map: &MotorMap,
    nodes: &[f64],
    k: usize,
    limits: impl Fn(f64) -> (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Piece>> {
    nodes
        .iter()
        .map(|&w| {
            let (lo, hi) = limits(w);
            let x = linspace(lo, hi, PWL_SAMPLES);
            let y: Vec<f64> = x.iter().map(|&p| map.loss(p, w, V_OC_CONST)).collect();
            let mut pieces = fit_max_affine(&x, &y, k, rng);
            // Keep the zero-power loss non-negative.
            let at0 = max_affine(&pieces, 0.0);
            if at0 < 0.0 {
                pieces.iter_mut().for_each(|p| p.1 -= at0);
            }
            pieces
        })
        .collect()
}

fn fit_battery(p: &VehicleParams) -> BatteryFit {
    let side = |sign: f64| {
        let xs = linspace(0.0, sign * BATTERY_FIT_RANGE, 141);
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x / 1e4, (x / 1e4).powi(2)]).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| battery_response(x, V_OC_CONST, p.r_i).map(|r| r.0).unwrap_or(f64::NAN))
            .collect();
        (rows, ys)
    };
    let fit = |rows: &[Vec<f64>], ys: &[f64]| {
        let c = least_squares(rows, ys).expect("battery fit is well posed");
        (c[0] / 1e4, (c[1] / 1e8).max(0.0))
    };
    let (rp, yp) = side(1.0);
    let (rm, ym) = side(-1.0);
    let (r1p, r2p) = fit(&rp, &yp);
    let (r1m, r2m) = fit(&rm, &ym);
    // The max of both branches must select the + branch for P_b ≥ 0 and the
    // − branch for P_b < 0 over the fitted range; otherwise fall back to a
    // single quadratic through both sides.
    if r1p - r1m >= (r2p - r2m).abs() * BATTERY_FIT_RANGE {
        return BatteryFit {
            r1_plus: r1p,
            r2_plus: r2p,
            r1_minus: r1m,
            r2_minus: r2m,
        };
    }
    let rows: Vec<Vec<f64>> = rp.iter().chain(&rm).cloned().collect();
    let ys: Vec<f64> = yp.iter().chain(&ym).cloned().collect();
    let (r1, r2) = fit(&rows, &ys);
    BatteryFit {
        r1_plus: r1,
        r2_plus: r2,
        r1_minus: r1,
        r2_minus: r2,
    }
}

impl ConvexModel {
    /// Fits the surrogate to the component maps.
    pub fn fit(maps: &ComponentMaps, p: &VehicleParams) -> Result<Self, ConvexError> {
        let mut rng = ChaCha8Rng::seed_from_u64(FIT_SEED);
        let we_nodes = linspace(p.we_idle, p.we_max, SPEED_NODES);
        let w1_nodes = linspace(0.0, p.w1_max, SPEED_NODES);
        let w2_nodes = linspace(0.0, p.w2_max, SPEED_NODES);
        let kappa = we_nodes
            .iter()
            .enumerate()
            .map(|(node, &w)| {
                let te = &maps.fuel.y;
                let pe: Vec<f64> = te.iter().map(|&t| t * w).collect();
                let y: Vec<f64> = te
                    .iter()
                    .map(|&t| maps.fuel.interp(w, t) * p.h_l)
                    .collect();
                fit_willans(&pe, &y).ok_or_else(|| ConvexError::Fit {
                    what: "engine",
                    node,
                    msg: "rank-deficient Willans regression".into(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pwl1 = fit_motor(&maps.motor1, &w1_nodes, PIECES_M1, |w| p.p1_limits(w), &mut rng);
        let pwl2 = fit_motor(&maps.motor2, &w2_nodes, PIECES_M2, |w| p.p2_limits(w), &mut rng);
        let model = Self {
            we_nodes,
            w1_nodes,
            w2_nodes,
            kappa,
            pwl1,
            pwl2,
            battery: fit_battery(p),
            voc: V_OC_CONST,
        };
        model.check_convexity()?;
        Ok(model)
    }

    /// The same surrogate with lossless motors and a single battery
    /// quadratic (the `+` branch). Used for the analytic critical-power
    /// cross-check.
    pub fn lossless(&self) -> Self {
        let zero = |fam: &[Vec<Piece>]| vec![vec![(0.0, 0.0)]; fam.len()];
        let b = self.battery;
        Self {
            pwl1: zero(&self.pwl1),
            pwl2: zero(&self.pwl2),
            battery: BatteryFit {
                r1_minus: b.r1_plus,
                r2_minus: b.r2_plus,
                ..b
            },
            ..self.clone()
        }
    }

    /// Asserts the convexity certificates of every speed node.
    pub fn check_convexity(&self) -> Result<(), ConvexError> {
        let fail = |what, node, msg: &str| {
            Err(ConvexError::Fit {
                what,
                node,
                msg: msg.to_string(),
            })
        };
        for (i, k) in self.kappa.iter().enumerate() {
            if k[2] < 0.0 {
                return fail("engine", i, "negative quadratic coefficient");
            }
        }
        for (what, fam) in [("motor 1", &self.pwl1), ("motor 2", &self.pwl2)] {
            for (i, pieces) in fam.iter().enumerate() {
                if pieces.windows(2).any(|w| w[1].0 < w[0].0) {
                    return fail(what, i, "slopes not sorted");
                }
                if max_affine(pieces, 0.0) < -1e-9 {
                    return fail(what, i, "negative loss at zero power");
                }
            }
        }
        let b = &self.battery;
        if b.r2_plus < 0.0 || b.r2_minus < 0.0 {
            return fail("battery", 0, "negative quadratic coefficient");
        }
        Ok(())
    }

    pub fn kappa_at(&self, we: f64) -> Result<[f64; 3], ConvexError> {
        let (i, t) = locate(&self.we_nodes, we, "engine")?;
        let (a, b) = (self.kappa[i], self.kappa[i + 1]);
        Ok([
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
        ])
    }

    pub fn pwl1_at(&self, w1: f64) -> Result<Vec<Piece>, ConvexError> {
        let (i, t) = locate(&self.w1_nodes, w1, "motor 1")?;
        Ok(blend_pieces(&self.pwl1[i], &self.pwl1[i + 1], t))
    }

    pub fn pwl2_at(&self, w2: f64) -> Result<Vec<Piece>, ConvexError> {
        let (i, t) = locate(&self.w2_nodes, w2, "motor 2")?;
        Ok(blend_pieces(&self.pwl2[i], &self.pwl2[i + 1], t))
    }

    /// Coefficients at one speed triple. Engine coefficients are only looked
    /// up when the engine turns at or above the fitted range's lower end;
    /// otherwise they are zero.
    pub fn at(&self, s: &Speeds) -> Result<LocalModel, ConvexError> {
        let kappa = if s.we >= self.we_nodes[0] {
            self.kappa_at(s.we)?
        } else {
            [0.0; 3]
        };
        Ok(LocalModel {
            kappa,
            pwl1: self.pwl1_at(s.w1)?,
            pwl2: self.pwl2_at(s.w2)?,
            battery: self.battery,
        })
    }

    /// Fuel power and battery source power of the surrogate.
    pub fn eval(
        &self,
        s: &Speeds,
        p_m1: f64,
        p_m2: f64,
        p_me: f64,
        e0: bool,
        p_aux: f64,
    ) -> Result<(f64, f64), ConvexError> {
        let kappa = if e0 || p_me != 0.0 {
            self.kappa_at(s.we)?
        } else {
            [0.0; 3]
        };
        let local = LocalModel {
            kappa,
            pwl1: self.pwl1_at(s.w1)?,
            pwl2: self.pwl2_at(s.w2)?,
            battery: self.battery,
        };
        Ok((local.fuel_power(p_me, e0), local.source_power(p_m1, p_m2, p_aux)))
    }

    /// Writes `kappa.csv`, `pwl_m1.csv`, `pwl_m2.csv` and `battery.csv`.
    pub fn write_bundle(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("kappa.csv"))?;
        writeln!(f, "we_radps,kappa0_w,kappa1,kappa2_per_w")?;
        for (w, k) in self.we_nodes.iter().zip(&self.kappa) {
            writeln!(f, "{w},{},{},{}", k[0], k[1], k[2])?;
        }
        for (name, nodes, fam) in [
            ("pwl_m1.csv", &self.w1_nodes, &self.pwl1),
            ("pwl_m2.csv", &self.w2_nodes, &self.pwl2),
        ] {
            let mut f = std::fs::File::create(dir.join(name))?;
            writeln!(f, "w_radps,piece,a,b_w")?;
            for (w, pieces) in nodes.iter().zip(fam) {
                for (j, (a, b)) in pieces.iter().enumerate() {
                    writeln!(f, "{w},{j},{a},{b}")?;
                }
            }
        }
        let mut f = std::fs::File::create(dir.join("battery.csv"))?;
        let b = &self.battery;
        writeln!(f, "voc_v,r1_plus,r2_plus_per_w,r1_minus,r2_minus_per_w")?;
        writeln!(
            f,
            "{},{},{},{},{}",
            self.voc, b.r1_plus, b.r2_plus, b.r1_minus, b.r2_minus
        )?;
        Ok(())
    }
}
