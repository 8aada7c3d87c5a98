//! Overdamped Langevin dynamics in the double-well potential
//! `U(x) = a x⁴/4 - b x²/2`.

use rand::Rng;
use rayon::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoubleWell {
    a: f64,
    b: f64,
    noise_d: f64,
    dt: f64,
    barrier_height: f64,
}

impl DoubleWell {
    /// `noise_d = 0` gives the deterministic gradient flow.
    pub fn new(a: f64, b: f64, noise_d: f64, dt: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && dt > 0.0 && noise_d >= 0.0) || !(a + b + noise_d + dt).is_finite() {
            return Err(Error::Domain(format!(
                "double well needs a, b, dt > 0 and D >= 0 (a={a}, b={b}, D={noise_d}, dt={dt})"
            )));
        }
        Ok(Self {
            a,
            b,
            noise_d,
            dt,
            barrier_height: b * b / (4.0 * a),
        })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn noise_d(&self) -> f64 {
        self.noise_d
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn barrier_height(&self) -> f64 {
        self.barrier_height
    }

    /// Position `√(b/a)` of the right-hand well.
    pub fn well(&self) -> f64 {
        (self.b / self.a).sqrt()
    }

    pub fn potential(&self, x: f64) -> f64 {
        0.25 * self.a * x.powi(4) - 0.5 * self.b * x * x
    }

    pub fn with_noise(&self, noise_d: f64) -> Result<Self> {
        Self::new(self.a, self.b, noise_d, self.dt)
    }

    fn check_step(&self) -> Result<()> {
        if self.dt * 2.0 * self.b >= 0.5 {
            return Err(Error::Domain(format!(
                "step dt={} too large: dt * U''(well) = {} must stay below 0.5",
                self.dt,
                self.dt * 2.0 * self.b
            )));
        }
        Ok(())
    }
}

/// Euler–Maruyama chain; calls `visit` on `x0` and each of the `steps`
/// following states without storing them.
pub fn run_langevin(model: &DoubleWell, x0: f64, steps: usize, seed: u64, mut visit: impl FnMut(f64)) -> Result<()> {
    model.check_step()?;
    let mut rng = seeded(seed);
    let (a, b, dt) = (model.a, model.b, model.dt);
    let amp = (2.0 * model.noise_d * dt).sqrt();
    let mut x = x0;
    visit(x);
    for _ in 0..steps {
        let g: f64 = rng.sample(StandardNormal);
        x += -(a * x * x * x - b * x) * dt + amp * g;
        visit(x);
    }
    Ok(())
}

/// The series `x_0, ..., x_steps`.
pub fn simulate_langevin(model: &DoubleWell, x0: f64, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(steps + 1);
    run_langevin(model, x0, steps, seed, |x| out.push(x))?;
    Ok(out)
}

/// `exp(-U/D)` on `grid`, normalized by the trapezoid rule.
pub fn stationary_density(model: &DoubleWell, grid: &[f64]) -> Result<Vec<f64>> {
    if model.noise_d <= 0.0 {
        return Err(Error::Domain("stationary density needs D > 0".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain("grid must be strictly increasing".into()));
    }
    let reach = 3.0 * model.well();
    match (grid.first(), grid.last()) {
        (Some(&lo), Some(&hi)) if lo <= -reach && hi >= reach => {}
        _ => {
            return Err(Error::Domain(format!(
                "grid must cover [-{reach}, {reach}]"
            )))
        }
    }
    let u_min = model.potential(model.well());
    let mut p: Vec<f64> = grid
        .iter()
        .map(|&x| (-(model.potential(x) - u_min) / model.noise_d).exp())
        .collect();
    let z = trapezoid(grid, &p);
    p.iter_mut().for_each(|v| *v /= z);
    Ok(p)
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Counts well-to-well transitions: the series must leave one band
/// `barrier ± hysteresis` and enter the opposite one.
#[derive(Debug, Clone, Default)]
pub struct CrossingCounter {
    barrier: f64,
    hysteresis: f64,
    side: Option<bool>,
    crossings: usize,
    samples: usize,
}

impl CrossingCounter {
    pub fn new(barrier: f64, hysteresis: f64) -> Result<Self> {
        if !(hysteresis > 0.0) {
            return Err(Error::Domain("hysteresis must be positive".into()));
        }
        Ok(Self {
            barrier,
            hysteresis,
            ..Self::default()
        })
    }

    pub fn push(&mut self, x: f64) {
        self.samples += 1;
        let side = if x >= self.barrier + self.hysteresis {
            Some(true)
        } else if x <= self.barrier - self.hysteresis {
            Some(false)
        } else {
            None
        };
        if let Some(s) = side {
            if self.side.is_some_and(|prev| prev != s) {
                self.crossings += 1;
            }
            self.side = Some(s);
        }
    }

    pub fn crossings(&self) -> usize {
        self.crossings
    }

    /// Crossings per unit time for samples spaced `dt` apart.
    pub fn rate(&self, dt: f64) -> Result<f64> {
        if self.side.is_none() {
            return Err(Error::Undefined("series never entered a well band".into()));
        }
        if self.samples < 2 {
            return Err(Error::Undefined("need at least two samples".into()));
        }
        Ok(self.crossings as f64 / ((self.samples - 1) as f64 * dt))
    }
}

pub fn transition_rate(series: &[f64], dt: f64, barrier: f64, hysteresis: f64) -> Result<f64> {
    let mut c = CrossingCounter::new(barrier, hysteresis)?;
    series.iter().for_each(|&x| c.push(x));
    c.rate(dt)
}

/// Fixed-width histogram with overflow counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub below: u64,
    pub above: u64,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            lo,
            hi,
            counts: vec![0; bins],
            below: 0,
            above: 0,
        }
    }

    pub fn push(&mut self, x: f64) {
        if x < self.lo {
            self.below += 1;
        } else if x >= self.hi {
            self.above += 1;
        } else {
            let n = self.counts.len();
            let i = ((x - self.lo) / (self.hi - self.lo) * n as f64) as usize;
            self.counts[i.min(n - 1)] += 1;
        }
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
        self.below += other.below;
        self.above += other.above;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.below + self.above
    }

    pub fn edges(&self) -> Vec<f64> {
        uniform_grid(self.lo, self.hi, self.counts.len() + 1)
    }
}

/// Largest gap between the empirical CDF of the histogrammed samples and
/// the analytic stationary CDF, over all bin edges.
pub fn ks_to_stationary(model: &DoubleWell, hist: &Histogram) -> Result<f64> {
    let total = hist.total();
    if total == 0 {
        return Err(Error::Empty("histogram is empty".into()));
    }
    let reach = (3.0 * model.well()).max(hist.hi.abs()).max(hist.lo.abs()) + 1.0;
    let edges = hist.edges();
    let sub = 8;
    // fine grid that contains every bin edge
    let mut grid = uniform_grid(-reach, hist.lo, 4001);
    let width = (hist.hi - hist.lo) / hist.counts.len() as f64;
    for i in 0..hist.counts.len() {
        for s in 1..=sub {
            grid.push(edges[i] + width * s as f64 / sub as f64);
        }
    }
    grid.extend(uniform_grid(hist.hi, reach, 4001).into_iter().skip(1));
    let p = stationary_density(model, &grid)?;
    let mut cdf = vec![0.0; grid.len()];
    for i in 1..grid.len() {
        cdf[i] = cdf[i - 1] + 0.5 * (grid[i] - grid[i - 1]) * (p[i] + p[i - 1]);
    }
    let first = 4000;
    let mut seen = hist.below;
    let mut d = (seen as f64 / total as f64 - cdf[first]).abs();
    for (i, &c) in hist.counts.iter().enumerate() {
        seen += c;
        let analytic = cdf[first + (i + 1) * sub];
        d = d.max((seen as f64 / total as f64 - analytic).abs());
    }
    Ok(d)
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Undefined("need at least two paired points".into()));
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Undefined("x has no spread".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// `p(x) / p(y)` under the stationary law, `exp(-(U(x) - U(y)) / D)`.
pub fn density_ratio(model: &DoubleWell, x: f64, y: f64) -> Result<f64> {
    if model.noise_d <= 0.0 {
        return Err(Error::Domain("stationary density needs D > 0".into()));
    }
    Ok((-(model.potential(x) - model.potential(y)) / model.noise_d).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub a: f64,
    pub b: f64,
    pub noise_d: f64,
    pub dt: f64,
    /// Steps per chain.
    pub steps: usize,
    pub chains: usize,
    pub x0: f64,
    pub bins: usize,
    pub hist_range: (f64, f64),
    pub density_points: usize,
    /// Samples of chain 0 kept for the series table, every `series_stride`
    /// steps.
    pub series_len: usize,
    pub series_stride: usize,
    pub arrhenius_d: Vec<f64>,
    /// Band half-width as a fraction of the well position.
    pub hysteresis: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            noise_d: 0.1,
            dt: 1e-3,
            steps: 10_000_000,
            chains: 16,
            x0: 1.0,
            bins: 500,
            hist_range: (-2.5, 2.5),
            density_points: 1401,
            series_len: 10_000,
            series_stride: 100,
            arrhenius_d: vec![0.12, 0.15, 0.2, 0.3],
            hysteresis: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrheniusRow {
    pub noise_d: f64,
    pub inv_d: f64,
    pub crossings: usize,
    pub rate: f64,
    pub ln_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub barrier_height: f64,
    pub ks_distance: f64,
    pub well_barrier_ratio: f64,
    pub well_barrier_ratio_expected: f64,
    pub arrhenius_slope: Option<f64>,
    pub arrhenius_intercept: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Study {
    pub report: StudyReport,
    pub grid: Vec<f64>,
    pub analytic: Vec<f64>,
    /// Histogram density of the bin holding each grid point (zero outside
    /// the histogram range).
    pub empirical: Vec<f64>,
    pub series: Vec<(f64, f64)>,
    pub arrhenius: Vec<ArrheniusRow>,
}

/// Histogram of `chains` independent chains; chain `c` uses seed
/// `derive_seed(seed, c)` and the merge runs in chain order.
pub fn ensemble_histogram(model: &DoubleWell, config: &StudyConfig, seed: u64) -> Result<Histogram> {
    let (lo, hi) = config.hist_range;
    let parts: Vec<Histogram> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut h = Histogram::new(lo, hi, config.bins);
            run_langevin(model, config.x0, config.steps, derive_seed(seed, c as u64), |x| h.push(x))?;
            Ok(h)
        })
        .collect::<Result<_>>()?;
    let mut total = Histogram::new(lo, hi, config.bins);
    parts.iter().for_each(|h| total.merge(h));
    Ok(total)
}

/// Pooled well-to-well rate over `chains` chains at the model's noise level.
pub fn ensemble_rate(model: &DoubleWell, config: &StudyConfig, seed: u64) -> Result<(usize, f64)> {
    let band = config.hysteresis * model.well();
    let counters: Vec<CrossingCounter> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut counter = CrossingCounter::new(0.0, band)?;
            run_langevin(model, config.x0, config.steps, derive_seed(seed, c as u64), |x| counter.push(x))?;
            Ok(counter)
        })
        .collect::<Result<_>>()?;
    let crossings: usize = counters.iter().map(|c| c.crossings).sum();
    let time = counters.iter().map(|c| (c.samples - 1) as f64).sum::<f64>() * model.dt;
    Ok((crossings, crossings as f64 / time))
}

pub fn run_study(config: &StudyConfig, seed: u64) -> Result<Study> {
    if config.chains == 0 || config.steps == 0 || config.bins == 0 || config.density_points < 2 || config.series_stride == 0 {
        return Err(Error::Config("chains, steps, bins, series_stride must be positive and density_points >= 2".into()));
    }
    if !(config.hist_range.0 < config.hist_range.1) {
        return Err(Error::Config("hist_range must be increasing".into()));
    }
    let model = DoubleWell::new(config.a, config.b, config.noise_d, config.dt)?;
    let hist = ensemble_histogram(&model, config, derive_seed(seed, 1))?;
    let ks_distance = ks_to_stationary(&model, &hist)?;

    let reach = 3.5 * model.well();
    let grid = uniform_grid(-reach, reach, config.density_points);
    let analytic = stationary_density(&model, &grid)?;
    let width = (hist.hi - hist.lo) / hist.counts.len() as f64;
    let mass = hist.total() as f64 * width;
    let empirical = grid
        .iter()
        .map(|&x| {
            if x < hist.lo || x >= hist.hi {
                0.0
            } else {
                let i = (((x - hist.lo) / width) as usize).min(hist.counts.len() - 1);
                hist.counts[i] as f64 / mass
            }
        })
        .collect();

    let mut series = Vec::with_capacity(config.series_len);
    let kept = config.series_len.saturating_sub(1) * config.series_stride;
    let mut n = 0usize;
    run_langevin(&model, config.x0, kept, derive_seed(seed, 2), |x| {
        if n % config.series_stride == 0 {
            series.push((n as f64 * config.dt, x));
        }
        n += 1;
    })?;

    let mut arrhenius = Vec::with_capacity(config.arrhenius_d.len());
    for (i, &d) in config.arrhenius_d.iter().enumerate() {
        let m = model.with_noise(d)?;
        let (crossings, rate) = ensemble_rate(&m, config, derive_seed(seed, 100 + i as u64))?;
        arrhenius.push(ArrheniusRow {
            noise_d: d,
            inv_d: 1.0 / d,
            crossings,
            rate,
            ln_rate: rate.ln(),
        });
    }
    let fit = if arrhenius.len() >= 2 && arrhenius.iter().all(|r| r.crossings > 0) {
        let x: Vec<f64> = arrhenius.iter().map(|r| r.inv_d).collect();
        let y: Vec<f64> = arrhenius.iter().map(|r| r.ln_rate).collect();
        Some(linear_fit(&x, &y)?)
    } else {
        None
    };
    Ok(Study {
        report: StudyReport {
            barrier_height: model.barrier_height(),
            ks_distance,
            well_barrier_ratio: density_ratio(&model, model.well(), 0.0)?,
            well_barrier_ratio_expected: (model.barrier_height() / model.noise_d).exp(),
            arrhenius_slope: fit.map(|f| f.0),
            arrhenius_intercept: fit.map(|f| f.1),
        },
        grid,
        analytic,
        empirical,
        series,
        arrhenius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_ratio_examples() {
        let m = DoubleWell::new(1.0, 1.0, 0.25, 1e-3).unwrap();
        assert!((density_ratio(&m, 1.0, 0.0).unwrap() - std::f64::consts::E).abs() < 1e-12);
        assert!(density_ratio(&m.with_noise(0.0).unwrap(), 1.0, 0.0).is_err());
    }

    #[test]
    fn small_study_is_deterministic() {
        let cfg = StudyConfig {
            steps: 20_000,
            chains: 3,
            series_len: 50,
            arrhenius_d: vec![0.3, 0.5],
            ..StudyConfig::default()
        };
        let a = run_study(&cfg, 4).unwrap();
        let b = run_study(&cfg, 4).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.series, b.series);
        assert_eq!(a.series.len(), 50);
        assert_eq!(a.arrhenius.len(), 2);
        assert!((trapezoid(&a.grid, &a.analytic) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn barrier_and_wells() {
        let m = DoubleWell::new(2.0, 3.0, 0.1, 1e-3).unwrap();
        assert_eq!(m.barrier_height(), 9.0 / 8.0);
        assert!((m.potential(0.0) - m.potential(m.well()) - m.barrier_height()).abs() < 1e-12);
        assert!(DoubleWell::new(0.0, 1.0, 0.1, 1e-3).is_err());
    }

    #[test]
    fn quiet_chain_stays_in_well() {
        let m = DoubleWell::new(1.0, 1.0, 1e-12, 1e-3).unwrap();
        let s = simulate_langevin(&m, 1.0, 10_000, 1).unwrap();
        assert_eq!(s.len(), 10_001);
        assert!(s.iter().all(|x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn deterministic_flow_rests_on_the_barrier() {
        let m = DoubleWell::new(1.0, 1.0, 0.0, 1e-3).unwrap();
        assert!(simulate_langevin(&m, 0.0, 1000, 1).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unstable_step_rejected() {
        let m = DoubleWell::new(1.0, 1.0, 0.1, 0.25).unwrap();
        assert!(simulate_langevin(&m, 0.0, 10, 1).is_err());
    }

    #[test]
    fn seeded_chains_repeat() {
        let m = DoubleWell::new(1.0, 1.0, 0.2, 1e-3).unwrap();
        assert_eq!(simulate_langevin(&m, 1.0, 500, 4).unwrap(), simulate_langevin(&m, 1.0, 500, 4).unwrap());
    }

    #[test]
    fn density_shape() {
        let m = DoubleWell::new(1.0, 1.0, 0.25, 1e-3).unwrap();
        let grid = uniform_grid(-4.0, 4.0, 8001);
        let p = stationary_density(&m, &grid).unwrap();
        assert!((trapezoid(&grid, &p) - 1.0).abs() < 1e-6);
        for i in 0..grid.len() {
            assert!((p[i] - p[grid.len() - 1 - i]).abs() < 1e-12);
        }
        let at = |x: f64| p[grid.iter().position(|&g| (g - x).abs() < 1e-9).unwrap()];
        assert!((at(1.0) / at(0.0) - 1f64.exp()).abs() < 1e-6);
        let peak = p.iter().cloned().fold(0.0, f64::max);
        assert_eq!(at(1.0), peak);
        assert!(stationary_density(&m, &uniform_grid(-2.0, 2.0, 11)).is_err());
    }

    #[test]
    fn rate_examples() {
        assert_eq!(transition_rate(&[1.0; 50], 0.1, 0.0, 0.5).unwrap(), 0.0);
        let square: Vec<f64> = (0..101).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!((transition_rate(&square, 1.0, 0.0, 0.5).unwrap() - 1.0).abs() < 1e-12);
        // dithering inside the band is not a transition
        assert_eq!(transition_rate(&[1.0, 0.2, -0.2, 0.3, 1.0], 1.0, 0.0, 0.5).unwrap(), 0.0);
        assert!(transition_rate(&[0.1, -0.1], 1.0, 0.0, 0.5).is_err());
        assert!(transition_rate(&[1.0], 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn exact_samples_have_small_ks() {
        // inverse-CDF samples from the analytic law itself
        let m = DoubleWell::new(1.0, 1.0, 0.3, 1e-3).unwrap();
        let grid = uniform_grid(-4.0, 4.0, 20001);
        let p = stationary_density(&m, &grid).unwrap();
        let mut cdf = vec![0.0; grid.len()];
        for i in 1..grid.len() {
            cdf[i] = cdf[i - 1] + 0.5 * (grid[i] - grid[i - 1]) * (p[i] + p[i - 1]);
        }
        let mut h = Histogram::new(-3.0, 3.0, 600);
        for k in 0..20000 {
            let u = (k as f64 + 0.5) / 20000.0;
            let i = cdf.partition_point(|&c| c < u).min(grid.len() - 1);
            h.push(grid[i]);
        }
        assert!(ks_to_stationary(&m, &h).unwrap() < 2e-3);
    }

    #[test]
    fn line_fit() {
        let (s, c) = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((s - 2.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-12);
    }
}
