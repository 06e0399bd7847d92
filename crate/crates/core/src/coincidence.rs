//! Coincidence counting over event streams.
//!
//! [`Tallier`] makes one ordered pass over detector records and keeps only the
//! last `W` slots of D1 and D2 history, so memory does not grow with the
//! stream. The resulting [`CoincidenceTally`] feeds the CAR, heralding
//! efficiency and triple-coincidence g²ₕ(0) estimators.
//!
//! Uncertainties assume independent Poisson statistics on every raw count.

use std::collections::VecDeque;
use std::io::Write;

use crate::error::{Error, Result};
use crate::montecarlo::{Channel, EventStream, Record};
use crate::stats::{self, Arm};

pub const DEFAULT_MAX_DELAY: u64 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct CoincidenceTally {
    pub c1: u64,
    pub c2: u64,
    pub c3: u64,
    pub c12: u64,
    pub c13: u64,
    pub c23: u64,
    pub c123: u64,
    /// Largest |Δ| in the delay histogram.
    pub max_delay: u64,
    /// D1–D2 pair counts at Δ = pulse(D2) - pulse(D1), stored at index `Δ + W`.
    pub delay_histogram: Vec<u64>,
    pub n_pulses: u64,
    pub rep_rate: f64,
}

impl CoincidenceTally {
    pub fn empty(n_pulses: u64, rep_rate: f64, max_delay: u64) -> Self {
        CoincidenceTally {
            c1: 0,
            c2: 0,
            c3: 0,
            c12: 0,
            c13: 0,
            c23: 0,
            c123: 0,
            max_delay,
            delay_histogram: vec![0; 2 * max_delay as usize + 1],
            n_pulses,
            rep_rate,
        }
    }

    /// Histogram count at offset `delta`, zero outside `[-W, W]`.
    pub fn histogram(&self, delta: i64) -> u64 {
        let w = self.max_delay as i64;
        if delta.abs() > w {
            0
        } else {
            self.delay_histogram[(delta + w) as usize]
        }
    }

    pub fn zero_delay(&self) -> u64 {
        self.histogram(0)
    }

    /// `(number of off-zero bins, their total count)`.
    pub fn accidental_bins(&self) -> (usize, u64) {
        let w = self.max_delay as usize;
        let total = self
            .delay_histogram
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != w)
            .map(|(_, c)| c)
            .sum();
        (2 * w, total)
    }

    /// Mean accidental counts per bin.
    pub fn accidental_mean(&self) -> f64 {
        let (bins, total) = self.accidental_bins();
        total as f64 / bins as f64
    }

    /// Acquisition time `n_pulses / R` in seconds.
    pub fn duration(&self) -> f64 {
        self.n_pulses as f64 / self.rep_rate
    }

    pub fn count(&self, channel: Channel) -> u64 {
        match channel {
            Channel::D1 => self.c1,
            Channel::D2 => self.c2,
            Channel::D3 => self.c3,
        }
    }

    pub fn triples(&self) -> TripleCounts {
        TripleCounts {
            c1: self.c1 as f64,
            c12: self.c12 as f64,
            c13: self.c13 as f64,
            c123: self.c123 as f64,
        }
    }

    /// Adds another shard's counts. Pairs straddling the shard boundary are
    /// not recovered; shards should be long compared with `W`.
    pub fn merge(&mut self, other: &CoincidenceTally) -> Result<()> {
        if other.max_delay != self.max_delay {
            return Err(Error::domain(
                "max_delay",
                other.max_delay as f64,
                "tallies with different windows cannot be merged",
            ));
        }
        if other.rep_rate != self.rep_rate {
            return Err(Error::domain(
                "rep_rate",
                other.rep_rate,
                "tallies with different repetition rates cannot be merged",
            ));
        }
        self.c1 += other.c1;
        self.c2 += other.c2;
        self.c3 += other.c3;
        self.c12 += other.c12;
        self.c13 += other.c13;
        self.c23 += other.c23;
        self.c123 += other.c123;
        self.n_pulses += other.n_pulses;
        for (a, b) in self.delay_histogram.iter_mut().zip(&other.delay_histogram) {
            *a += b;
        }
        Ok(())
    }

    /// Writes the delay histogram as `delta,counts` CSV.
    pub fn write_histogram_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "delta,counts")?;
        let w = self.max_delay as i64;
        for delta in -w..=w {
            writeln!(out, "{delta},{}", self.histogram(delta))?;
        }
        Ok(())
    }
}

/// Streaming builder for a [`CoincidenceTally`].
#[derive(Debug, Clone)]
pub struct Tallier {
    tally: CoincidenceTally,
    slot: Option<(u64, u8)>,
    recent_d1: VecDeque<u64>,
    recent_d2: VecDeque<u64>,
    seen: u64,
}

impl Tallier {
    pub fn new(n_pulses: u64, rep_rate: f64, max_delay: u64) -> Result<Self> {
        if max_delay == 0 {
            return Err(Error::domain(
                "max_delay",
                0.0,
                "window W must be at least 1",
            ));
        }
        if !(rep_rate > 0.0) {
            return Err(Error::domain("rep_rate", rep_rate, "must be > 0"));
        }
        Ok(Tallier {
            tally: CoincidenceTally::empty(n_pulses, rep_rate, max_delay),
            slot: None,
            recent_d1: VecDeque::new(),
            recent_d2: VecDeque::new(),
            seen: 0,
        })
    }

    pub fn push(&mut self, r: Record) -> Result<()> {
        let index = self.seen;
        self.seen += 1;
        if r.pulse >= self.tally.n_pulses {
            return Err(Error::format(
                0,
                format!(
                    "record {index}: pulse {} >= n_pulses {}",
                    r.pulse, self.tally.n_pulses
                ),
            ));
        }
        let bit = 1u8 << r.channel.index();
        match self.slot {
            Some((p, mask)) if p == r.pulse => {
                if mask & bit != 0 {
                    return Err(Error::format(0, format!("record {index}: duplicate click")));
                }
                self.slot = Some((p, mask | bit));
            }
            Some((p, _)) if r.pulse < p => {
                return Err(Error::format(
                    0,
                    format!("record {index}: stream is not sorted"),
                ));
            }
            _ => {
                self.flush();
                self.slot = Some((r.pulse, bit));
            }
        }
        Ok(())
    }

    pub fn push_all(&mut self, records: &[Record]) -> Result<()> {
        records.iter().try_for_each(|r| self.push(*r))
    }

    fn flush(&mut self) {
        let Some((p, mask)) = self.slot.take() else {
            return;
        };
        let w = self.tally.max_delay;
        let (d1, d2, d3) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
        let t = &mut self.tally;
        t.c1 += d1 as u64;
        t.c2 += d2 as u64;
        t.c3 += d3 as u64;
        t.c12 += (d1 && d2) as u64;
        t.c13 += (d1 && d3) as u64;
        t.c23 += (d2 && d3) as u64;
        t.c123 += (d1 && d2 && d3) as u64;

        while self.recent_d1.front().is_some_and(|&q| p - q > w) {
            self.recent_d1.pop_front();
        }
        while self.recent_d2.front().is_some_and(|&q| p - q > w) {
            self.recent_d2.pop_front();
        }
        let centre = w as usize;
        if d1 {
            for &q in &self.recent_d2 {
                t.delay_histogram[centre - (p - q) as usize] += 1;
            }
            self.recent_d1.push_back(p);
        }
        if d2 {
            for &q in &self.recent_d1 {
                if q < p {
                    t.delay_histogram[centre + (p - q) as usize] += 1;
                }
            }
            self.recent_d2.push_back(p);
        }
        if d1 && d2 {
            t.delay_histogram[centre] += 1;
        }
    }

    pub fn finish(mut self) -> CoincidenceTally {
        self.flush();
        self.tally
    }
}

/// Tallies an in-memory stream with delay window `max_delay`.
pub fn tally(stream: &EventStream, max_delay: u64) -> Result<CoincidenceTally> {
    let mut t = Tallier::new(
        stream.metadata.n_pulses,
        stream.metadata.rep_rate,
        max_delay,
    )?;
    t.push_all(&stream.records)?;
    Ok(t.finish())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    /// True value is at least this.
    Lower(f64),
    /// True value is at most this (one-count level).
    Upper(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateWithError {
    pub value: f64,
    pub std_error: f64,
    /// Set when the data only support a one-sided statement.
    pub bound: Option<Bound>,
}

impl EstimateWithError {
    fn measured(value: f64, std_error: f64) -> Self {
        EstimateWithError {
            value,
            std_error,
            bound: None,
        }
    }

    /// |value - target| in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.value - target) / self.std_error
    }

    pub fn within_sigma(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.std_error
    }
}

/// Counts (or rates) entering the triple-coincidence estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripleCounts {
    pub c1: f64,
    pub c12: f64,
    pub c13: f64,
    pub c123: f64,
}

/// CAR as zero-delay peak over the mean of the `2W` accidental bins.
pub fn estimate_car(tally: &CoincidenceTally) -> Result<EstimateWithError> {
    let peak = tally.zero_delay() as f64;
    let (bins, acc_total) = tally.accidental_bins();
    if bins == 0 {
        return Err(Error::EstimatorUndefined(
            "no accidental bins (W = 0)".into(),
        ));
    }
    if acc_total == 0 {
        return Ok(EstimateWithError {
            value: peak,
            std_error: peak.sqrt(),
            bound: Some(Bound::Lower(peak)),
        });
    }
    let acc_mean = acc_total as f64 / bins as f64;
    let acc_sigma = (acc_total as f64).sqrt() / bins as f64;
    let car = peak / acc_mean;
    // An empty peak still carries a one-count uncertainty.
    let peak_sigma = peak.max(1.0).sqrt();
    let std_error = ((peak_sigma / acc_mean).powi(2) + (car * acc_sigma / acc_mean).powi(2)).sqrt();
    Ok(EstimateWithError::measured(car, std_error))
}

/// Triple-coincidence g²ₕ(0) with Poisson error propagation. With no
/// three-fold events the value is 0 and the one-count upper bound
/// `C1 / (C12 C13)` is attached.
pub fn estimate_g2h(counts: &TripleCounts) -> Result<EstimateWithError> {
    let TripleCounts { c1, c12, c13, c123 } = *counts;
    let value = stats::g2_from_triples(c1, c12, c13, c123)?;
    if c123 == 0.0 {
        let upper = c1 / (c12 * c13);
        return Ok(EstimateWithError {
            value: 0.0,
            std_error: upper,
            bound: Some(Bound::Upper(upper)),
        });
    }
    let std_error = value * (1.0 / c123 + 1.0 / c12 + 1.0 / c13 + 1.0 / c1).sqrt();
    Ok(EstimateWithError::measured(value, std_error))
}

/// Heralding efficiency of the `heralded` arm: accidental-subtracted
/// zero-delay coincidences over the singles of the other (heralding) arm.
/// Signal is D1, idler is D2.
pub fn estimate_heralding(tally: &CoincidenceTally, heralded: Arm) -> Result<EstimateWithError> {
    let herald = match heralded {
        Arm::Idler => tally.c1,
        Arm::Signal => tally.c2,
    } as f64;
    if herald == 0.0 {
        return Err(Error::EstimatorUndefined(
            "heralding channel has no counts".into(),
        ));
    }
    let peak = tally.zero_delay() as f64;
    let (bins, acc_total) = tally.accidental_bins();
    let acc_mean = acc_total as f64 / bins as f64;
    let acc_var = acc_total as f64 / (bins * bins) as f64;
    let true_cc = peak - acc_mean;
    let value = true_cc / herald;
    let std_error = ((peak + acc_var) / (herald * herald) + value * value / herald).sqrt();
    Ok(EstimateWithError::measured(value, std_error))
}

/// Rates derived from a tally, in Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TallyRates {
    pub singles: [f64; 3],
    /// Accidental-subtracted zero-delay D1–D2 coincidences.
    pub true_coincidences: f64,
    /// Mean accidental D1–D2 coincidences per slot offset.
    pub accidentals: f64,
}

pub fn rates(tally: &CoincidenceTally) -> TallyRates {
    let t = tally.duration();
    let acc = tally.accidental_mean();
    TallyRates {
        singles: [
            tally.c1 as f64 / t,
            tally.c2 as f64 / t,
            tally.c3 as f64 / t,
        ],
        true_coincidences: (tally.zero_delay() as f64 - acc) / t,
        accidentals: acc / t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montecarlo::{simulate, RunConfig, StreamMetadata, Topology};
    use crate::stats::{PairDistribution, SourceModel};

    fn stream(n: u64, recs: &[(u64, Channel)]) -> EventStream {
        let mut counts = [0; 3];
        let records: Vec<Record> = recs
            .iter()
            .map(|&(pulse, channel)| {
                counts[channel.index()] += 1;
                Record { pulse, channel }
            })
            .collect();
        EventStream {
            metadata: StreamMetadata {
                seed: None,
                n_pulses: n,
                rep_rate: 1e9,
                topology: None,
                config_digest: None,
                counts,
            },
            records,
        }
    }

    fn tally_with(h0: u64, acc_each: u64, w: u64) -> CoincidenceTally {
        let mut t = CoincidenceTally::empty(1_000_000, 1e9, w);
        for (i, b) in t.delay_histogram.iter_mut().enumerate() {
            *b = if i == w as usize { h0 } else { acc_each };
        }
        t.c12 = h0;
        t
    }

    #[test]
    fn empty_stream_gives_zero_tally() {
        let t = tally(&stream(100, &[]), 10).unwrap();
        assert_eq!(t, CoincidenceTally::empty(100, 1e9, 10));
    }

    #[test]
    fn single_coincidence() {
        let t = tally(&stream(100, &[(5, Channel::D1), (5, Channel::D2)]), 10).unwrap();
        assert_eq!((t.c1, t.c2, t.c12), (1, 1, 1));
        assert_eq!(t.histogram(0), 1);
        assert_eq!(t.delay_histogram.iter().sum::<u64>(), 1);
    }

    #[test]
    fn adjacent_slot_accidental() {
        let t = tally(&stream(100, &[(5, Channel::D1), (6, Channel::D2)]), 10).unwrap();
        assert_eq!(t.c12, 0);
        assert_eq!(t.histogram(1), 1);
        let t = tally(&stream(100, &[(5, Channel::D2), (8, Channel::D1)]), 10).unwrap();
        assert_eq!(t.histogram(-3), 1);
        let t = tally(&stream(100, &[(5, Channel::D2), (16, Channel::D1)]), 10).unwrap();
        assert_eq!(t.delay_histogram.iter().sum::<u64>(), 0);
    }

    #[test]
    fn multi_fold_counts() {
        let t = tally(
            &stream(
                100,
                &[
                    (1, Channel::D1),
                    (1, Channel::D2),
                    (1, Channel::D3),
                    (2, Channel::D1),
                    (2, Channel::D3),
                    (3, Channel::D2),
                    (3, Channel::D3),
                ],
            ),
            2,
        )
        .unwrap();
        assert_eq!((t.c1, t.c2, t.c3), (2, 2, 3));
        assert_eq!((t.c12, t.c13, t.c23, t.c123), (1, 2, 2, 1));
        assert_eq!(t.histogram(0), t.c12);
        // D2@1 vs D1@2 → Δ=-1; D2@3 vs D1@1 → +2; D2@3 vs D1@2 → +1
        assert_eq!((t.histogram(-1), t.histogram(1), t.histogram(2)), (1, 1, 1));
    }

    #[test]
    fn unsorted_stream_rejected() {
        let s = stream(100, &[(6, Channel::D1), (5, Channel::D2)]);
        assert!(matches!(tally(&s, 3), Err(Error::Format { .. })));
        let s = stream(100, &[(6, Channel::D1), (6, Channel::D1)]);
        assert!(tally(&s, 3).is_err());
        assert!(tally(&stream(10, &[]), 0).is_err());
    }

    #[test]
    fn car_examples() {
        let e = estimate_car(&tally_with(0, 10, 10)).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.std_error.is_finite() && e.std_error > 0.0);

        let w = 10;
        let e = estimate_car(&tally_with(1000, 10, w)).unwrap();
        assert!((e.value - 100.0).abs() < 1e-12);
        let expected = 100.0 * (1.0 / 1000.0 + 1.0 / (10.0 * 2.0 * w as f64)).sqrt();
        assert!((e.std_error - expected).abs() < 1e-9);
        assert!(e.bound.is_none());

        let e = estimate_car(&tally_with(50, 0, 5)).unwrap();
        assert_eq!(e.value, 50.0);
        assert_eq!(e.bound, Some(Bound::Lower(50.0)));
    }

    #[test]
    fn g2_examples() {
        let e = estimate_g2h(&TripleCounts {
            c1: 1e5,
            c12: 100.0,
            c13: 100.0,
            c123: 0.0,
        })
        .unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.bound, Some(Bound::Upper(1e5 / 1e4)));

        let counts = TripleCounts {
            c1: 1e6,
            c12: 1200.0,
            c13: 1100.0,
            c123: 1.2,
        };
        let e = estimate_g2h(&counts).unwrap();
        assert!((e.value - 0.90909).abs() < 1e-5);
        assert_eq!(
            e.value,
            stats::g2_from_triples(1e6, 1200.0, 1100.0, 1.2).unwrap()
        );

        let undefined = TripleCounts { c12: 0.0, ..counts };
        assert!(matches!(
            estimate_g2h(&undefined),
            Err(Error::EstimatorUndefined(_))
        ));
    }

    #[test]
    fn heralding_zero_coincidences() {
        let mut t = tally_with(0, 0, 4);
        t.c1 = 500;
        let e = estimate_heralding(&t, Arm::Idler).unwrap();
        assert_eq!(e.value, 0.0);
        t.c1 = 0;
        assert!(estimate_heralding(&t, Arm::Idler).is_err());
    }

    #[test]
    fn merge_is_associative_sum() {
        let a = tally(&stream(100, &[(5, Channel::D1), (5, Channel::D2)]), 3).unwrap();
        let b = tally(&stream(50, &[(1, Channel::D1), (2, Channel::D2)]), 3).unwrap();
        let c = tally(&stream(70, &[(9, Channel::D3)]), 3).unwrap();
        let mut ab_c = a.clone();
        ab_c.merge(&b).unwrap();
        ab_c.merge(&c).unwrap();
        let mut bc = b.clone();
        bc.merge(&c).unwrap();
        let mut a_bc = a.clone();
        a_bc.merge(&bc).unwrap();
        assert_eq!(ab_c, a_bc);
        assert_eq!(ab_c.n_pulses, 220);
        assert_eq!((ab_c.c1, ab_c.c3, ab_c.histogram(1)), (2, 1, 1));
        let other_w = tally(&stream(10, &[]), 4).unwrap();
        assert!(ab_c.merge(&other_w).is_err());
    }

    #[test]
    fn histogram_csv() {
        let t = tally(&stream(100, &[(5, Channel::D1), (6, Channel::D2)]), 1).unwrap();
        let mut out = Vec::new();
        t.write_histogram_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "delta,counts\n-1,0\n0,0\n1,1\n"
        );
    }

    #[test]
    fn mirror_symmetry_between_channel_orders() {
        // Swapping D1 and D2 mirrors the histogram; the CAR estimate is unchanged.
        let model = SourceModel {
            eta_signal: 0.2,
            eta_idler: 0.2,
            ..SourceModel::new(1e9, PairDistribution::poissonian(0.1).unwrap())
        };
        let cfg = RunConfig::new(model, 2_000_000, 4, Topology::TwoDetector);
        let s = simulate(&cfg).unwrap();
        let mut swapped = s.clone();
        for r in &mut swapped.records {
            r.channel = match r.channel {
                Channel::D1 => Channel::D2,
                Channel::D2 => Channel::D1,
                c => c,
            };
        }
        swapped.records.sort();
        let a = tally(&s, 10).unwrap();
        let b = tally(&swapped, 10).unwrap();
        for d in -10..=10 {
            assert_eq!(a.histogram(d), b.histogram(-d));
        }
        assert_eq!(estimate_car(&a).unwrap(), estimate_car(&b).unwrap());
    }

    #[test]
    fn memory_is_bounded_by_window() {
        let model = SourceModel {
            dark_signal: 5e8,
            dark_idler: 5e8,
            ..SourceModel::new(1e9, PairDistribution::poissonian(0.0).unwrap())
        };
        let cfg = RunConfig::new(model, 200_000, 3, Topology::TwoDetector);
        let s = simulate(&cfg).unwrap();
        let mut t = Tallier::new(200_000, 1e9, 5).unwrap();
        for r in &s.records {
            t.push(*r).unwrap();
            assert!(t.recent_d1.len() <= 6 && t.recent_d2.len() <= 6);
        }
    }
}
