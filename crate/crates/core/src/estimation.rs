//! Power-sweep reduction.
//!
//! Singles and coincidence rates measured against peak pump power are fitted
//! with `a·P² + b·P + c`: the quadratic term is pair generation, the linear
//! term is noise photons and the constant is dark counts. The fits drive the
//! noise-fraction table and the CAR-versus-coincidence-rate curve; the
//! g²-versus-CAR overlay maps measured CAR values through the closed forms.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stats::{self, DistKind};

pub const SWEEP_HEADER: &str = "peak_power_w,sc_signal_hz,sc_idler_hz,cc_hz";

/// Smallest scaled pivot accepted by the QR solve; the design is treated as
/// rank deficient below this.
const PIVOT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerSweepPoint {
    /// Peak pump power in W.
    pub peak_power: f64,
    pub singles_signal: f64,
    pub singles_idler: f64,
    /// True (accidental-subtracted) coincidence rate in Hz.
    pub coincidences: f64,
    /// Optional variances of the three rates, in Hz².
    pub variances: Option<[f64; 3]>,
}

impl PowerSweepPoint {
    pub fn new(
        peak_power: f64,
        singles_signal: f64,
        singles_idler: f64,
        coincidences: f64,
    ) -> Self {
        PowerSweepPoint {
            peak_power,
            singles_signal,
            singles_idler,
            coincidences,
            variances: None,
        }
    }

    pub fn rate(&self, channel: SweepChannel) -> f64 {
        match channel {
            SweepChannel::SinglesSignal => self.singles_signal,
            SweepChannel::SinglesIdler => self.singles_idler,
            SweepChannel::Coincidences => self.coincidences,
        }
    }

    fn variance(&self, channel: SweepChannel) -> Option<f64> {
        self.variances.map(|v| v[channel as usize])
    }

    fn validate(&self) -> Result<()> {
        if !(self.peak_power > 0.0 && self.peak_power.is_finite()) {
            return Err(Error::domain(
                "peak_power",
                self.peak_power,
                "must be finite and > 0",
            ));
        }
        for (name, v) in [
            ("sc_signal", self.singles_signal),
            ("sc_idler", self.singles_idler),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::domain(name, v, "must be finite and >= 0"));
            }
        }
        // Accidental subtraction can leave a slightly negative coincidence rate.
        if !self.coincidences.is_finite() {
            return Err(Error::domain("cc", self.coincidences, "must be finite"));
        }
        if let Some(vars) = self.variances {
            for v in vars {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::domain("variance", v, "must be finite and > 0"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepChannel {
    SinglesSignal = 0,
    SinglesIdler = 1,
    Coincidences = 2,
}

impl SweepChannel {
    pub const ALL: [SweepChannel; 3] = [
        SweepChannel::SinglesSignal,
        SweepChannel::SinglesIdler,
        SweepChannel::Coincidences,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepChannel::SinglesSignal => "sc_signal",
            SweepChannel::SinglesIdler => "sc_idler",
            SweepChannel::Coincidences => "cc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Weights `1/max(rate, 1)`, or `1/variance` when variances are given.
    #[default]
    Poisson,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitForm {
    /// `a·P² + b·P + c`
    Full,
    /// `a·P² + c`, with `b` fixed at zero.
    QuadraticPlusConstant,
}

impl FitForm {
    fn n_params(self) -> usize {
        match self {
            FitForm::Full => 3,
            FitForm::QuadraticPlusConstant => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub weighting: Weighting,
    pub form: FitForm,
}

impl FitOptions {
    /// Full quadratic for singles, quadratic plus constant for coincidences.
    pub fn for_channel(channel: SweepChannel) -> Self {
        FitOptions {
            weighting: Weighting::Poisson,
            form: match channel {
                SweepChannel::Coincidences => FitForm::QuadraticPlusConstant,
                _ => FitForm::Full,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Hz/W²
    pub a: f64,
    /// Hz/W
    pub b: f64,
    /// Hz
    pub c: f64,
    /// Covariance of `(a, b, c)`; the `b` row and column are zero for
    /// [`FitForm::QuadraticPlusConstant`].
    pub covariance: [[f64; 3]; 3],
    /// Weighted residual norm `sqrt(Σ w r²)`.
    pub residual_norm: f64,
    /// Smallest and largest fitted power, W.
    pub domain: (f64, f64),
    pub n_points: usize,
    pub form: FitForm,
}

impl FitResult {
    /// A fit with the given coefficients and no uncertainty.
    pub fn from_coefficients(a: f64, b: f64, c: f64, domain: (f64, f64)) -> Self {
        FitResult {
            a,
            b,
            c,
            covariance: [[0.0; 3]; 3],
            residual_norm: 0.0,
            domain,
            n_points: 0,
            form: FitForm::Full,
        }
    }

    pub fn evaluate(&self, p: f64) -> f64 {
        (self.a * p + self.b) * p + self.c
    }

    pub fn contains(&self, p: f64) -> bool {
        p >= self.domain.0 && p <= self.domain.1
    }

    pub fn std_errors(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.covariance[i][i].max(0.0).sqrt())
    }

    /// `key=value` report lines.
    pub fn report(&self, prefix: &str) -> String {
        let [sa, sb, sc] = self.std_errors();
        let mut s = String::new();
        let form = match self.form {
            FitForm::Full => "full",
            FitForm::QuadraticPlusConstant => "quadratic_plus_constant",
        };
        let _ = writeln!(s, "{prefix}form={form}");
        let _ = writeln!(s, "{prefix}a_hz_per_w2={:?}", self.a);
        let _ = writeln!(s, "{prefix}a_std_error={sa:?}");
        let _ = writeln!(s, "{prefix}b_hz_per_w={:?}", self.b);
        let _ = writeln!(s, "{prefix}b_std_error={sb:?}");
        let _ = writeln!(s, "{prefix}c_hz={:?}", self.c);
        let _ = writeln!(s, "{prefix}c_std_error={sc:?}");
        let _ = writeln!(s, "{prefix}residual_norm={:?}", self.residual_norm);
        let _ = writeln!(s, "{prefix}domain_min_w={:?}", self.domain.0);
        let _ = writeln!(s, "{prefix}domain_max_w={:?}", self.domain.1);
        let _ = writeln!(s, "{prefix}n_points={}", self.n_points);
        for (i, row) in self.covariance.iter().enumerate() {
            let _ = writeln!(
                s,
                "{prefix}covariance_row{i}={:?},{:?},{:?}",
                row[0], row[1], row[2]
            );
        }
        s
    }
}

/// Weighted least-squares fit of one sweep column over powers `≤ max_power`.
///
/// With explicit variances the covariance is absolute; otherwise it is
/// scaled by the reduced chi-square of the residuals.
pub fn fit_quadratic(
    points: &[PowerSweepPoint],
    channel: SweepChannel,
    max_power: f64,
    options: FitOptions,
) -> Result<FitResult> {
    for p in points {
        p.validate()?;
    }
    let used: Vec<&PowerSweepPoint> = points
        .iter()
        .filter(|p| p.peak_power <= max_power)
        .collect();
    let n_params = options.form.n_params();
    let mut powers: Vec<f64> = used.iter().map(|p| p.peak_power).collect();
    powers.sort_by(f64::total_cmp);
    powers.dedup();
    if powers.len() < n_params {
        return Err(Error::FitDegenerate(format!(
            "{} distinct powers within {max_power} W; at least {n_params} required",
            powers.len()
        )));
    }
    let n = used.len();
    let absolute =
        options.weighting == Weighting::Poisson && used.iter().all(|p| p.variances.is_some());

    let mut design = DMatrix::<f64>::zeros(n, n_params);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut weights = Vec::with_capacity(n);
    for (row, p) in used.iter().enumerate() {
        let y = p.rate(channel);
        let w = match options.weighting {
            Weighting::Uniform => 1.0,
            Weighting::Poisson => match p.variance(channel) {
                Some(var) if absolute => 1.0 / var,
                _ => 1.0 / y.max(1.0),
            },
        };
        let sw = w.sqrt();
        let x = p.peak_power;
        let basis: &[f64] = match options.form {
            FitForm::Full => &[x * x, x, 1.0],
            FitForm::QuadraticPlusConstant => &[x * x, 1.0],
        };
        for (col, v) in basis.iter().enumerate() {
            design[(row, col)] = sw * v;
        }
        rhs[row] = sw * y;
        weights.push(w);
    }

    // Unit-norm columns keep the triangular solve well conditioned when the
    // powers span decades.
    let scale: Vec<f64> = (0..n_params).map(|j| design.column(j).norm()).collect();
    for (j, s) in scale.iter().enumerate() {
        design.column_mut(j).unscale_mut(*s);
    }
    let qr = design.qr();
    let r = qr.r();
    let r_max = (0..n_params).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..n_params).any(|i| r[(i, i)].abs() <= PIVOT_TOLERANCE * r_max) {
        return Err(Error::FitDegenerate(
            "design matrix is rank deficient".into(),
        ));
    }
    let qtb = qr.q().transpose() * &rhs;
    let y = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::FitDegenerate("triangular solve failed".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(n_params, n_params))
        .ok_or_else(|| Error::FitDegenerate("triangular inverse failed".into()))?;
    let scaled_cov = &r_inv * r_inv.transpose();

    let coef: Vec<f64> = (0..n_params).map(|j| y[j] / scale[j]).collect();
    let (a, b, c) = match options.form {
        FitForm::Full => (coef[0], coef[1], coef[2]),
        FitForm::QuadraticPlusConstant => (coef[0], 0.0, coef[1]),
    };

    let chi2: f64 = used
        .iter()
        .zip(&weights)
        .map(|(p, w)| {
            let x = p.peak_power;
            let r = p.rate(channel) - ((a * x + b) * x + c);
            w * r * r
        })
        .sum();
    let dof = n - n_params;
    let factor = if absolute || dof == 0 {
        1.0
    } else {
        chi2 / dof as f64
    };

    let slots: &[usize] = match options.form {
        FitForm::Full => &[0, 1, 2],
        FitForm::QuadraticPlusConstant => &[0, 2],
    };
    let mut covariance = [[0.0; 3]; 3];
    for (i, &si) in slots.iter().enumerate() {
        for (j, &sj) in slots.iter().enumerate() {
            covariance[si][sj] = factor * scaled_cov[(i, j)] / (scale[i] * scale[j]);
        }
    }
    for i in 0..3 {
        for j in 0..i {
            let m = 0.5 * (covariance[i][j] + covariance[j][i]);
            covariance[i][j] = m;
            covariance[j][i] = m;
        }
    }

    Ok(FitResult {
        a,
        b,
        c,
        covariance,
        residual_norm: chi2.sqrt(),
        domain: (powers[0], powers[powers.len() - 1]),
        n_points: n,
        form: options.form,
    })
}

/// Share of the fitted rate that is not pair generation,
/// `(bP + c) / (aP² + bP + c)`, clamped to `[0, 1]`.
pub fn noise_fraction(fit: &FitResult, peak_power: f64) -> Result<f64> {
    if !fit.contains(peak_power) {
        return Err(Error::OutsideDomain(format!(
            "{peak_power} W is outside [{}, {}] W",
            fit.domain.0, fit.domain.1
        )));
    }
    let total = fit.evaluate(peak_power);
    if !(total > 0.0) {
        return Err(Error::EstimatorUndefined(format!(
            "fitted rate {total} Hz at {peak_power} W is not positive"
        )));
    }
    let noise = fit.b * peak_power + fit.c;
    Ok((noise / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub peak_power: f64,
    pub coincidence_rate: f64,
    pub car: f64,
}

/// CAR against coincidence rate from fitted singles and coincidence laws,
/// evaluated at `powers` inside the common fit domain.
pub fn car_curve(
    fit_signal: &FitResult,
    fit_idler: &FitResult,
    fit_cc: &FitResult,
    rep_rate: f64,
    powers: &[f64],
) -> Result<Vec<CurvePoint>> {
    let lo = fit_signal
        .domain
        .0
        .max(fit_idler.domain.0)
        .max(fit_cc.domain.0);
    let hi = fit_signal
        .domain
        .1
        .min(fit_idler.domain.1)
        .min(fit_cc.domain.1);
    if lo > hi {
        return Err(Error::OutsideDomain("fit domains do not overlap".into()));
    }
    powers
        .iter()
        .map(|&p| {
            if !(p >= lo && p <= hi) {
                return Err(Error::OutsideDomain(format!(
                    "{p} W is outside the common fit domain [{lo}, {hi}] W"
                )));
            }
            let cc = fit_cc.evaluate(p);
            if !(cc > 0.0) {
                return Err(Error::EstimatorUndefined(format!(
                    "fitted coincidence rate {cc} Hz at {p} W is not positive"
                )));
            }
            let car =
                stats::car_practical(cc, fit_signal.evaluate(p), fit_idler.evaluate(p), rep_rate)?;
            Ok(CurvePoint {
                peak_power: p,
                coincidence_rate: cc,
                car,
            })
        })
        .collect()
}

/// Maps CAR values to g²ₕ(0) under the given pair statistics.
pub fn g2_car_overlay(car_values: &[f64], kind: DistKind) -> Result<Vec<(f64, f64)>> {
    car_values
        .iter()
        .map(|&car| Ok((car, stats::g2_from_car(car, kind)?)))
        .collect()
}

/// Reads sweep CSV. Lines starting with `#` and blank lines are skipped; the
/// first remaining line must be the column header.
pub fn read_sweep_csv<R: BufRead>(source: R) -> Result<Vec<PowerSweepPoint>> {
    let mut points = Vec::new();
    let mut seen_header = false;
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_header {
            if line != SWEEP_HEADER {
                return Err(Error::format(
                    line_no,
                    format!("expected header `{SWEEP_HEADER}`"),
                ));
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::format(
                line_no,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let mut v = [0.0; 4];
        for (slot, field) in v.iter_mut().zip(&fields) {
            *slot = field
                .parse()
                .map_err(|_| Error::format(line_no, format!("not a number: `{field}`")))?;
        }
        let point = PowerSweepPoint::new(v[0], v[1], v[2], v[3]);
        point
            .validate()
            .map_err(|e| Error::format(line_no, e.to_string()))?;
        points.push(point);
    }
    if !seen_header {
        return Err(Error::format(0, "missing header"));
    }
    Ok(points)
}

/// Writes sweep CSV with optional leading `#` comment lines.
pub fn write_sweep_csv<W: Write>(
    points: &[PowerSweepPoint],
    mut out: W,
    comments: &[String],
) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "{SWEEP_HEADER}")?;
    for p in points {
        writeln!(
            out,
            "{:?},{:?},{:?},{:?}",
            p.peak_power, p.singles_signal, p.singles_idler, p.coincidences
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn exact_sweep(a: f64, b: f64, c: f64, powers: &[f64]) -> Vec<PowerSweepPoint> {
        powers
            .iter()
            .map(|&p| {
                let r = (a * p + b) * p + c;
                PowerSweepPoint::new(p, r, r, r)
            })
            .collect()
    }

    fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                lo * (1.0 - t) + hi * t
            })
            .collect()
    }

    fn rel(x: f64, y: f64) -> f64 {
        ((x - y) / y).abs()
    }

    #[test]
    fn exact_polynomial_recovered() {
        let pts = exact_sweep(1e9, 1e6, 300.0, &linspace(1e-3, 1e-2, 8));
        for weighting in [Weighting::Poisson, Weighting::Uniform] {
            let opts = FitOptions {
                weighting,
                form: FitForm::Full,
            };
            let f = fit_quadratic(&pts, SweepChannel::SinglesSignal, 1.0, opts).unwrap();
            assert!(rel(f.a, 1e9) < 1e-9, "{}", f.a);
            assert!(rel(f.b, 1e6) < 1e-9, "{}", f.b);
            assert!(rel(f.c, 300.0) < 1e-9, "{}", f.c);
            assert_eq!(f.domain, (1e-3, 1e-2));
        }
    }

    #[test]
    fn powers_spanning_decades() {
        let powers: Vec<f64> = (0..10).map(|i| 1e-5 * 10f64.powf(i as f64 / 3.0)).collect();
        let pts = exact_sweep(1e9, 1e6, 300.0, &powers);
        let f = fit_quadratic(
            &pts,
            SweepChannel::SinglesIdler,
            1.0,
            FitOptions::for_channel(SweepChannel::SinglesIdler),
        )
        .unwrap();
        assert!(rel(f.a, 1e9) < 1e-9 && rel(f.b, 1e6) < 1e-9 && rel(f.c, 300.0) < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let one = exact_sweep(1e9, 1e6, 300.0, &[1e-3]);
        let opts = FitOptions::for_channel(SweepChannel::SinglesSignal);
        assert!(matches!(
            fit_quadratic(&one, SweepChannel::SinglesSignal, 1.0, opts),
            Err(Error::FitDegenerate(_))
        ));
        let dup = exact_sweep(1e9, 1e6, 300.0, &[1e-3, 1e-3, 1e-3, 2e-3, 2e-3]);
        assert!(matches!(
            fit_quadratic(&dup, SweepChannel::SinglesSignal, 1.0, opts),
            Err(Error::FitDegenerate(_))
        ));
        // Domain restriction leaves too few powers.
        let pts = exact_sweep(1e9, 1e6, 300.0, &linspace(1e-3, 2e-2, 8));
        assert!(fit_quadratic(&pts, SweepChannel::SinglesSignal, 2e-3, opts).is_err());
        let bad = vec![PowerSweepPoint::new(0.0, 1.0, 1.0, 1.0)];
        assert!(matches!(
            fit_quadratic(&bad, SweepChannel::SinglesSignal, 1.0, opts),
            Err(Error::ParameterDomain { .. })
        ));
    }

    #[test]
    fn domain_restriction() {
        let mut pts = exact_sweep(1e9, 1e6, 300.0, &linspace(1e-3, 1e-2, 8));
        // Saturated points beyond the fit limit must not influence the fit.
        pts.extend(exact_sweep(0.0, 0.0, 1e3, &[2e-2, 3e-2]));
        let f = fit_quadratic(
            &pts,
            SweepChannel::SinglesSignal,
            1e-2,
            FitOptions::for_channel(SweepChannel::SinglesSignal),
        )
        .unwrap();
        assert!(rel(f.a, 1e9) < 1e-9);
        assert_eq!(f.n_points, 8);
        assert_eq!(f.domain.1, 1e-2);
    }

    #[test]
    fn quadratic_plus_constant_form() {
        let pts = exact_sweep(2e10, 0.0, 50.0, &linspace(1e-3, 1e-2, 6));
        let f = fit_quadratic(
            &pts,
            SweepChannel::Coincidences,
            1.0,
            FitOptions::for_channel(SweepChannel::Coincidences),
        )
        .unwrap();
        assert_eq!(f.form, FitForm::QuadraticPlusConstant);
        assert!(rel(f.a, 2e10) < 1e-9 && rel(f.c, 50.0) < 1e-9);
        assert_eq!(f.b, 0.0);
        assert_eq!(f.covariance[1], [0.0; 3]);
    }

    #[test]
    fn covariance_matches_known_variances() {
        // With absolute variances, the covariance equals (XᵀWX)⁻¹ computed directly.
        let powers = [1e-3, 2e-3, 4e-3, 6e-3, 8e-3];
        let pts: Vec<PowerSweepPoint> = exact_sweep(1e9, 1e6, 300.0, &powers)
            .into_iter()
            .map(|mut p| {
                p.variances = Some([p.singles_signal, 1.0, 1.0]);
                p
            })
            .collect();
        let f = fit_quadratic(
            &pts,
            SweepChannel::SinglesSignal,
            1.0,
            FitOptions::for_channel(SweepChannel::SinglesSignal),
        )
        .unwrap();
        let mut m = nalgebra::Matrix3::<f64>::zeros();
        for p in &pts {
            let x = nalgebra::Vector3::new(p.peak_power.powi(2), p.peak_power, 1.0);
            m += x * x.transpose() / p.singles_signal;
        }
        let inv = m.try_inverse().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!(rel(f.covariance[i][j], inv[(i, j)]) < 1e-6, "{i}{j}");
            }
        }
    }

    #[test]
    fn noise_fraction_examples() {
        let dom = (1e-4, 1e-1);
        let all_noise = FitResult::from_coefficients(0.0, 1e6, 300.0, dom);
        assert_eq!(noise_fraction(&all_noise, 1e-3).unwrap(), 1.0);
        let crossover = FitResult::from_coefficients(1e9, 1e6, 0.0, dom);
        assert!((noise_fraction(&crossover, 1e-3).unwrap() - 0.5).abs() < 1e-12);
        let mut prev = 1.0;
        for p in linspace(1e-4, 1e-1, 50) {
            let f = noise_fraction(&crossover, p).unwrap();
            assert!(f < prev);
            prev = f;
        }
        assert!(matches!(
            noise_fraction(&crossover, 1.0),
            Err(Error::OutsideDomain(_))
        ));
        let zero = FitResult::from_coefficients(0.0, 0.0, 0.0, dom);
        assert!(matches!(
            noise_fraction(&zero, 1e-3),
            Err(Error::EstimatorUndefined(_))
        ));
    }

    #[test]
    fn noise_free_car_curve_reduces_to_ideal() {
        // Sc = η μ R and Cc = η² μ R with μ = k P²: CAR = 1/μ + 1.
        let (r, eta, k) = (2.5e9, 0.1, 100.0);
        let dom = (1e-3, 1e-2);
        let s = FitResult::from_coefficients(eta * k * r, 0.0, 0.0, dom);
        let cc = FitResult::from_coefficients(eta * eta * k * r, 0.0, 0.0, dom);
        let powers = linspace(1e-3, 1e-2, 20);
        let curve = car_curve(&s, &s, &cc, r, &powers).unwrap();
        for w in curve.windows(2) {
            assert!(w[1].car < w[0].car);
            assert!(w[1].coincidence_rate > w[0].coincidence_rate);
        }
        for pt in &curve {
            let mu = k * pt.peak_power * pt.peak_power;
            assert!(rel(pt.car, 1.0 / mu + 1.0) < 1e-12);
            assert!(pt.car > 1.0);
        }
        assert!(car_curve(&s, &s, &cc, r, &[2e-2]).is_err());
        let other = FitResult::from_coefficients(1.0, 0.0, 0.0, (2e-2, 3e-2));
        assert!(car_curve(&s, &other, &cc, r, &[1e-3]).is_err());
    }

    #[test]
    fn overlay_examples() {
        let v = g2_car_overlay(&[16.07], DistKind::Poissonian).unwrap();
        assert!((v[0].1 - 0.120583).abs() < 5e-7);
        let v = g2_car_overlay(&[4456.0], DistKind::ThermalLike).unwrap();
        assert!(rel(v[0].1, 8.9736e-4) < 1e-4);
        let big = 1e6;
        let p = g2_car_overlay(&[big], DistKind::Poissonian).unwrap()[0].1;
        let t = g2_car_overlay(&[big], DistKind::ThermalLike).unwrap()[0].1;
        assert!(rel(p, 2.0 / big) < 1e-3);
        assert!(rel(t, 4.0 / big) < 1e-3);
        assert!(matches!(
            g2_car_overlay(&[2.0, 1.0], DistKind::Poissonian),
            Err(Error::ParameterDomain { .. })
        ));
    }

    #[test]
    fn sweep_csv_round_trip() {
        let pts = exact_sweep(1e9, 1e6, 300.0, &linspace(1e-3, 1e-2, 4));
        let mut buf = Vec::new();
        write_sweep_csv(&pts, &mut buf, &["config_digest=abc".into()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# config_digest=abc\npeak_power_w,"));
        let back = read_sweep_csv(text.as_bytes()).unwrap();
        assert_eq!(back, pts);
    }

    #[test]
    fn sweep_csv_errors_carry_line_numbers() {
        let text = "# c\npeak_power_w,sc_signal_hz,sc_idler_hz,cc_hz\n0.001,1,2,3\n0.002,x,2,3\n";
        match read_sweep_csv(text.as_bytes()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let text = "peak_power_w,sc_signal_hz,sc_idler_hz,cc_hz\n0,1,2,3\n";
        assert!(matches!(
            read_sweep_csv(text.as_bytes()),
            Err(Error::Format { line: 2, .. })
        ));
        assert!(read_sweep_csv("a,b\n".as_bytes()).is_err());
        assert!(read_sweep_csv("".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn exact_data_reproduced(
            a in 1e6f64..1e11,
            b in 0.0f64..1e8,
            c in 0.0f64..1e4,
            n in 3usize..12,
            lo in 1e-4f64..1e-3,
            span in 2.0f64..100.0,
        ) {
            let pts = exact_sweep(a, b, c, &linspace(lo, lo * span, n));
            let f = fit_quadratic(&pts, SweepChannel::SinglesSignal, 1.0, FitOptions::for_channel(SweepChannel::SinglesSignal)).unwrap();
            // Compare against the fitted scale of each term at the top power.
            let top = lo * span;
            let scale = a * top * top + b * top + c;
            prop_assert!(((f.a - a) * top * top).abs() <= 1e-9 * scale);
            prop_assert!(((f.b - b) * top).abs() <= 1e-9 * scale);
            prop_assert!((f.c - c).abs() <= 1e-9 * scale);
        }

        #[test]
        fn fit_invariant_under_reordering(seed in any::<u64>(), noise in 0.0f64..0.1) {
            let powers = linspace(1e-3, 1e-2, 8);
            let mut pts = exact_sweep(1e9, 1e6, 300.0, &powers);
            for (i, p) in pts.iter_mut().enumerate() {
                let jitter = ((seed.rotate_left(i as u32 * 7) % 1000) as f64 / 1000.0 - 0.5) * noise;
                p.singles_signal *= 1.0 + jitter;
            }
            let opts = FitOptions::for_channel(SweepChannel::SinglesSignal);
            let f = fit_quadratic(&pts, SweepChannel::SinglesSignal, 1.0, opts).unwrap();
            let mut shuffled = pts.clone();
            shuffled.reverse();
            shuffled.rotate_left((seed % 8) as usize);
            let g = fit_quadratic(&shuffled, SweepChannel::SinglesSignal, 1.0, opts).unwrap();
            prop_assert!((f.residual_norm - g.residual_norm).abs() <= 1e-9 * f.residual_norm.max(1e-300));
            prop_assert!((f.a - g.a).abs() <= 1e-9 * f.a.abs());
        }

        #[test]
        fn noise_fraction_decreasing(a in 1e6f64..1e11, b in 0.0f64..1e8, c in 0.0f64..1e4, p in 1e-4f64..1e-2) {
            prop_assume!(b + c > 0.0);
            let fit = FitResult::from_coefficients(a, b, c, (1e-4, 2e-2));
            let f1 = noise_fraction(&fit, p).unwrap();
            let f2 = noise_fraction(&fit, p * 1.5).unwrap();
            prop_assert!((0.0..=1.0).contains(&f1));
            prop_assert!(f2 < f1);
        }

        #[test]
        fn covariance_is_symmetric_psd(seed in any::<u64>()) {
            let powers = linspace(1e-3, 1e-2, 8);
            let mut pts = exact_sweep(1e9, 1e6, 300.0, &powers);
            for (i, p) in pts.iter_mut().enumerate() {
                p.singles_signal *= 1.0 + ((seed >> (i * 5)) % 31) as f64 / 1000.0;
            }
            let f = fit_quadratic(&pts, SweepChannel::SinglesSignal, 1.0, FitOptions::for_channel(SweepChannel::SinglesSignal)).unwrap();
            let m = nalgebra::Matrix3::from_fn(|i, j| f.covariance[i][j]);
            prop_assert_eq!(m, m.transpose());
            let eig = m.symmetric_eigenvalues();
            let max = eig.amax();
            prop_assert!(eig.iter().all(|&e| e >= -1e-9 * max));
            prop_assert!(f.residual_norm >= 0.0);
        }
    }
}
