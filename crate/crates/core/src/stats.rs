//! Closed-form statistics of a pulsed photon-pair source.
//!
//! Counting rates, coincidence-to-accidental ratio (CAR), heralding efficiency
//! and the heralded second-order correlation g²ₕ(0), together with the general
//! truncated-moment evaluator that serves as a numerical oracle for the closed
//! forms. Everything here is a pure function of its arguments.

use crate::error::{Error, Result};

/// Tail mass below which a truncated moment sum is considered converged.
const TAIL_TOLERANCE: f64 = 1e-15;

/// Upper bound on the truncation used by [`g2_heralded_general`].
const MAX_TRUNCATION: usize = 1 << 24;

/// Photon-pair number law for a single pump pulse.
#[derive(Debug, Clone, PartialEq)]
pub enum PairDistribution {
    /// `P(n) = e^-μ μⁿ / n!`
    Poissonian { mu: f64 },
    /// `P(n) = μⁿ / (μ+1)ⁿ⁺¹`, single-mode (geometric) statistics.
    ThermalLike { mu: f64 },
    /// Arbitrary table `P(0..N)`; probabilities beyond the table are zero.
    ExplicitTable { probs: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistKind {
    Poissonian,
    ThermalLike,
    ExplicitTable,
}

impl PairDistribution {
    pub fn poissonian(mu: f64) -> Result<Self> {
        let d = PairDistribution::Poissonian { mu };
        d.validate()?;
        Ok(d)
    }

    pub fn thermal(mu: f64) -> Result<Self> {
        let d = PairDistribution::ThermalLike { mu };
        d.validate()?;
        Ok(d)
    }

    pub fn table(probs: Vec<f64>) -> Result<Self> {
        let d = PairDistribution::ExplicitTable { probs };
        d.validate()?;
        Ok(d)
    }

    /// Builds a distribution of the given analytic kind with mean `mu`.
    pub fn with_kind(kind: DistKind, mu: f64) -> Result<Self> {
        match kind {
            DistKind::Poissonian => Self::poissonian(mu),
            DistKind::ThermalLike => Self::thermal(mu),
            DistKind::ExplicitTable => Err(Error::domain(
                "kind",
                mu,
                "an explicit table cannot be built from a mean alone",
            )),
        }
    }

    pub fn kind(&self) -> DistKind {
        match self {
            PairDistribution::Poissonian { .. } => DistKind::Poissonian,
            PairDistribution::ThermalLike { .. } => DistKind::ThermalLike,
            PairDistribution::ExplicitTable { .. } => DistKind::ExplicitTable,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PairDistribution::Poissonian { mu } | PairDistribution::ThermalLike { mu } => {
                check_non_negative("mu", *mu)
            }
            PairDistribution::ExplicitTable { probs } => {
                if probs.is_empty() {
                    return Err(Error::domain("table", 0.0, "table must not be empty"));
                }
                for &p in probs {
                    if !(p >= 0.0) || !p.is_finite() {
                        return Err(Error::domain("table", p, "entries must be finite and >= 0"));
                    }
                }
                let sum: f64 = probs.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::domain("table", sum, "probabilities must sum to 1"));
                }
                Ok(())
            }
        }
    }

    /// Mean number of pairs per pulse.
    pub fn mean(&self) -> f64 {
        match self {
            PairDistribution::Poissonian { mu } | PairDistribution::ThermalLike { mu } => *mu,
            PairDistribution::ExplicitTable { probs } => {
                probs.iter().enumerate().map(|(n, p)| n as f64 * p).sum()
            }
        }
    }

    pub fn probability_of(&self, n: usize) -> f64 {
        match self {
            PairDistribution::ExplicitTable { probs } => probs.get(n).copied().unwrap_or(0.0),
            _ => self.pmf().nth(n).unwrap_or(0.0),
        }
    }

    /// `P(0)`.
    pub fn prob_zero(&self) -> f64 {
        match self {
            PairDistribution::Poissonian { mu } => (-mu).exp(),
            PairDistribution::ThermalLike { mu } => 1.0 / (1.0 + mu),
            PairDistribution::ExplicitTable { probs } => probs[0],
        }
    }

    /// `ln P(0)`, accurate for tiny means.
    pub fn ln_prob_zero(&self) -> f64 {
        match self {
            PairDistribution::Poissonian { mu } => -mu,
            PairDistribution::ThermalLike { mu } => -mu.ln_1p(),
            PairDistribution::ExplicitTable { probs } => probs[0].ln(),
        }
    }

    /// `1 - P(0)`, accurate for tiny means.
    pub fn prob_nonzero(&self) -> f64 {
        match self {
            PairDistribution::Poissonian { mu } => -(-mu).exp_m1(),
            PairDistribution::ThermalLike { mu } => mu / (1.0 + mu),
            PairDistribution::ExplicitTable { probs } => probs[1..].iter().sum(),
        }
    }

    /// Iterator over `P(0), P(1), ...`. Infinite for the analytic laws.
    pub fn pmf(&self) -> Pmf<'_> {
        Pmf::new(self)
    }
}

/// Sequential evaluation of a pair-number probability mass function.
#[derive(Debug, Clone)]
pub struct Pmf<'a> {
    dist: &'a PairDistribution,
    n: usize,
    current: f64,
    log_space: bool,
}

impl<'a> Pmf<'a> {
    fn new(dist: &'a PairDistribution) -> Self {
        // e^-μ underflows near μ ≈ 745; walk in log space well before that.
        let log_space = matches!(dist, PairDistribution::Poissonian { mu } if *mu > 500.0);
        let current = if log_space {
            dist.ln_prob_zero()
        } else {
            dist.prob_zero()
        };
        Pmf {
            dist,
            n: 0,
            current,
            log_space,
        }
    }
}

impl Iterator for Pmf<'_> {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        let n = self.n;
        let p = match self.dist {
            PairDistribution::ExplicitTable { probs } => {
                return {
                    self.n += 1;
                    probs.get(n).copied()
                }
            }
            PairDistribution::Poissonian { mu } => {
                if n > 0 {
                    if self.log_space {
                        self.current += mu.ln() - (n as f64).ln();
                    } else {
                        self.current *= mu / n as f64;
                    }
                }
                if self.log_space {
                    self.current.exp()
                } else {
                    self.current
                }
            }
            PairDistribution::ThermalLike { mu } => {
                if n > 0 {
                    self.current *= mu / (mu + 1.0);
                }
                self.current
            }
        };
        self.n += 1;
        Some(p)
    }
}

/// Optional pump-power law fixing the mean pair number, `μ = k (γ P_p L_eff)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PumpLaw {
    /// Nonlinearity coefficient γ in 1/(W·m).
    pub gamma: f64,
    /// Pump peak power in W.
    pub peak_power: f64,
    /// Effective interaction length in m.
    pub eff_length: f64,
    /// Dimensionless calibration constant k.
    pub calib: f64,
}

impl PumpLaw {
    pub fn mu(&self) -> f64 {
        self.mu_at(self.peak_power)
    }

    pub fn mu_at(&self, peak_power: f64) -> f64 {
        let phase = self.gamma * peak_power * self.eff_length;
        self.calib * phase * phase
    }

    fn validate(&self) -> Result<()> {
        check_non_negative("gamma", self.gamma)?;
        check_non_negative("peak_power", self.peak_power)?;
        check_non_negative("eff_length", self.eff_length)?;
        check_non_negative("calib", self.calib)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    Signal,
    Idler,
}

/// Physical description of the source and its detection chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    /// Pump repetition rate R in Hz.
    pub rep_rate: f64,
    pub pair_dist: PairDistribution,
    /// Total collection efficiency of the signal arm (including detector).
    pub eta_signal: f64,
    pub eta_idler: f64,
    /// Mean noise photons generated per pulse, before collection.
    pub noise_signal: f64,
    pub noise_idler: f64,
    /// Detector dark-count rates in Hz.
    pub dark_signal: f64,
    pub dark_idler: f64,
    /// Probability that the twin of a pair photon survives spectral filtering.
    /// Reduces coincidences only.
    pub twin_survival: f64,
    pub pump: Option<PumpLaw>,
    /// Pump pulse width in s.
    pub pulse_width: f64,
}

impl SourceModel {
    /// A lossless, noiseless source with the given pair law.
    pub fn new(rep_rate: f64, pair_dist: PairDistribution) -> Self {
        SourceModel {
            rep_rate,
            pair_dist,
            eta_signal: 1.0,
            eta_idler: 1.0,
            noise_signal: 0.0,
            noise_idler: 0.0,
            dark_signal: 0.0,
            dark_idler: 0.0,
            twin_survival: 1.0,
            pump: None,
            pulse_width: 0.0,
        }
    }

    pub fn mu(&self) -> f64 {
        self.pair_dist.mean()
    }

    pub fn eta(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Signal => self.eta_signal,
            Arm::Idler => self.eta_idler,
        }
    }

    pub fn noise(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Signal => self.noise_signal,
            Arm::Idler => self.noise_idler,
        }
    }

    pub fn dark(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Signal => self.dark_signal,
            Arm::Idler => self.dark_idler,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rep_rate > 0.0) || !self.rep_rate.is_finite() {
            return Err(Error::domain(
                "rep_rate",
                self.rep_rate,
                "must be finite and > 0",
            ));
        }
        self.pair_dist.validate()?;
        check_probability("eta_signal", self.eta_signal)?;
        check_probability("eta_idler", self.eta_idler)?;
        check_probability("twin_survival", self.twin_survival)?;
        check_non_negative("noise_signal", self.noise_signal)?;
        check_non_negative("noise_idler", self.noise_idler)?;
        check_non_negative("dark_signal", self.dark_signal)?;
        check_non_negative("dark_idler", self.dark_idler)?;
        check_non_negative("pulse_width", self.pulse_width)?;
        if let Some(pump) = &self.pump {
            pump.validate()?;
            let expected = pump.mu();
            let mu = self.mu();
            if (mu - expected).abs() > 1e-12 * expected.abs().max(f64::MIN_POSITIVE) {
                return Err(Error::domain(
                    "mu",
                    mu,
                    "inconsistent with the pump law k·(γ·P_p·L_eff)²",
                ));
            }
        }
        Ok(())
    }

    /// The same source pumped at another peak power: μ follows the pump law
    /// and the noise means scale linearly with power. Dark rates are unchanged.
    pub fn at_peak_power(&self, peak_power: f64) -> Result<SourceModel> {
        let pump = self.pump.ok_or(Error::domain(
            "pump",
            f64::NAN,
            "a pump law is required to rescale the source",
        ))?;
        if !(peak_power > 0.0) || !peak_power.is_finite() {
            return Err(Error::domain(
                "peak_power",
                peak_power,
                "must be finite and > 0",
            ));
        }
        if !(pump.peak_power > 0.0) {
            return Err(Error::domain(
                "pump.peak_power",
                pump.peak_power,
                "reference power must be > 0 to scale noise",
            ));
        }
        let scale = peak_power / pump.peak_power;
        let pump = PumpLaw { peak_power, ..pump };
        let pair_dist = PairDistribution::with_kind(self.pair_dist.kind(), pump.mu())?;
        let model = SourceModel {
            pair_dist,
            noise_signal: self.noise_signal * scale,
            noise_idler: self.noise_idler * scale,
            pump: Some(pump),
            ..self.clone()
        };
        model.validate()?;
        Ok(model)
    }
}

fn check_non_negative(name: &'static str, value: f64) -> Result<()> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(name, value, "must be finite and >= 0"))
    }
}

fn check_probability(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::domain(name, value, "must lie in [0, 1]"))
    }
}

/// Singles rate of one arm: pair photons, noise photons and dark counts,
/// `μηR + νηR + d`.
pub fn singles_rate(model: &SourceModel, arm: Arm) -> Result<f64> {
    model.validate()?;
    let eta = model.eta(arm);
    let r = model.rep_rate;
    Ok(model.mu() * eta * r + model.noise(arm) * eta * r + model.dark(arm))
}

/// True coincidence rate `μ η_s η_i R`, times the twin-survival factor.
pub fn coincidence_rate(model: &SourceModel) -> Result<f64> {
    model.validate()?;
    let base = model.mu() * model.eta_signal * model.eta_idler * model.rep_rate;
    if model.twin_survival < 1.0 {
        Ok(base * model.twin_survival)
    } else {
        Ok(base)
    }
}

/// Accidental coincidence rate of two uncorrelated channels, `Sc_s Sc_i / R`.
pub fn accidental_rate(sc_signal: f64, sc_idler: f64, rep_rate: f64) -> Result<f64> {
    check_non_negative("sc_signal", sc_signal)?;
    check_non_negative("sc_idler", sc_idler)?;
    check_positive("rep_rate", rep_rate)?;
    Ok(sc_signal * sc_idler / rep_rate)
}

/// CAR of a noiseless, lossless source, `1/μ + 1`.
pub fn car_ideal(mu: f64) -> Result<f64> {
    check_positive("mu", mu)?;
    Ok(1.0 / mu + 1.0)
}

/// CAR from measured rates, `Cc R / (Sc_s Sc_i) + 1`, with `Cc` the true
/// (excess) coincidence rate.
pub fn car_practical(cc: f64, sc_signal: f64, sc_idler: f64, rep_rate: f64) -> Result<f64> {
    check_non_negative("cc", cc)?;
    check_positive("sc_signal", sc_signal)?;
    check_positive("sc_idler", sc_idler)?;
    check_positive("rep_rate", rep_rate)?;
    Ok(cc * rep_rate / (sc_signal * sc_idler) + 1.0)
}

/// `Cc / Sc` of the heralding channel.
pub fn heralding_efficiency(cc: f64, sc_heralding: f64) -> Result<f64> {
    check_non_negative("cc", cc)?;
    check_positive("sc_heralding", sc_heralding)?;
    Ok(cc / sc_heralding)
}

/// Triple-coincidence estimator `C1 C123 / (C12 C13)`. Counts may be rates.
pub fn g2_from_triples(c1: f64, c12: f64, c13: f64, c123: f64) -> Result<f64> {
    for (name, v) in [("c1", c1), ("c12", c12), ("c13", c13), ("c123", c123)] {
        check_non_negative(name, v)?;
    }
    if c12 == 0.0 || c13 == 0.0 {
        return Err(Error::EstimatorUndefined(
            "two-fold coincidence counts must be non-zero".into(),
        ));
    }
    Ok(c1 * c123 / (c12 * c13))
}

/// Heralded g²ₕ(0) for Poissonian pair statistics, `1 - 1/(μ+1)²`.
pub fn g2_heralded_poissonian(mu: f64) -> Result<f64> {
    check_non_negative("mu", mu)?;
    // Factored form avoids cancellation for small μ.
    let s = mu + 1.0;
    Ok(mu * (mu + 2.0) / (s * s))
}

/// Heralded g²ₕ(0) for thermal-like pair statistics, `(6μ² + 4μ)/(2μ+1)²`.
pub fn g2_heralded_thermal(mu: f64) -> Result<f64> {
    check_non_negative("mu", mu)?;
    let s = 2.0 * mu + 1.0;
    Ok((6.0 * mu * mu + 4.0 * mu) / (s * s))
}

/// Heralded g²ₕ(0) for an arbitrary pair law from truncated moment sums,
///
/// ```text
/// g² = Σ n²(n-1) P(n) · Σ n P(n) / (Σ n² P(n))²
/// ```
///
/// Analytic laws are summed from `max(truncation, 50, ⌈20(μ+1)⌉)` terms,
/// doubling until the appended tail contributes less than 1e-15 to the mass
/// and to each moment. Explicit tables are summed in full.
pub fn g2_heralded_general(dist: &PairDistribution, truncation: usize) -> Result<f64> {
    dist.validate()?;
    let moments = match dist {
        PairDistribution::ExplicitTable { probs } => {
            let mut m = Moments::default();
            for (n, &p) in probs.iter().enumerate() {
                m.add(n, p);
            }
            m
        }
        _ => converged_moments(dist, truncation)?,
    };
    if moments.second == 0.0 {
        return Err(Error::EstimatorUndefined(
            "distribution has no mass at n > 0".into(),
        ));
    }
    Ok(moments.third_factorial * moments.first / (moments.second * moments.second))
}

#[derive(Debug, Default, Clone, Copy)]
struct Moments {
    mass: f64,
    first: f64,
    second: f64,
    /// Σ n²(n-1) P(n)
    third_factorial: f64,
}

impl Moments {
    fn add(&mut self, n: usize, p: f64) {
        let x = n as f64;
        self.mass += p;
        self.first += x * p;
        self.second += x * x * p;
        self.third_factorial += x * x * (x - 1.0) * p;
    }
}

fn converged_moments(dist: &PairDistribution, truncation: usize) -> Result<Moments> {
    let mu = dist.mean();
    let start = (20.0 * (mu + 1.0)).ceil() as usize;
    let mut limit = truncation.max(50).max(start);
    let mut pmf = dist.pmf().enumerate();
    let mut total = Moments::default();
    let mut upto = 0usize;
    loop {
        let mut appended = Moments::default();
        for (n, p) in pmf.by_ref().take(limit + 1 - upto) {
            appended.add(n, p);
        }
        let first_pass = upto == 0;
        upto = limit + 1;
        let converged = !first_pass
            && appended.mass < TAIL_TOLERANCE
            && appended.second <= TAIL_TOLERANCE * total.second
            && appended.third_factorial <= TAIL_TOLERANCE * total.third_factorial;
        total.mass += appended.mass;
        total.first += appended.first;
        total.second += appended.second;
        total.third_factorial += appended.third_factorial;
        if converged {
            return Ok(total);
        }
        if limit >= MAX_TRUNCATION {
            return Err(Error::EstimatorUndefined(format!(
                "moment sums did not converge within {MAX_TRUNCATION} terms"
            )));
        }
        limit *= 2;
    }
}

/// g²ₕ(0) expressed through CAR under the estimate `μ = 1/(CAR - 1)`.
pub fn g2_from_car(car: f64, kind: DistKind) -> Result<f64> {
    check_car(car)?;
    match kind {
        DistKind::Poissonian => Ok((2.0 * car - 1.0) / (car * car)),
        DistKind::ThermalLike => {
            let s = car + 1.0;
            Ok((4.0 * car + 2.0) / (s * s))
        }
        DistKind::ExplicitTable => Err(Error::domain(
            "dist_kind",
            car,
            "CAR mapping is defined only for Poissonian and thermal-like laws",
        )),
    }
}

/// Mean pair number inferred from CAR, `1/(CAR - 1)`.
pub fn mu_from_car(car: f64) -> Result<f64> {
    check_car(car)?;
    Ok(1.0 / (car - 1.0))
}

/// Average pump power of a pulse train, `P_p t R`.
pub fn average_power(peak_power: f64, pulse_width: f64, rep_rate: f64) -> Result<f64> {
    check_non_negative("peak_power", peak_power)?;
    check_non_negative("pulse_width", pulse_width)?;
    check_non_negative("rep_rate", rep_rate)?;
    Ok(peak_power * pulse_width * rep_rate)
}

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(name, value, "must be finite and > 0"))
    }
}

fn check_car(car: f64) -> Result<()> {
    if car > 1.0 && car.is_finite() {
        Ok(())
    } else {
        Err(Error::domain("car", car, "must be finite and > 1"))
    }
}
