//! Pulse-by-pulse Monte Carlo of a heralded pair source.
//!
//! Every pump pulse occupies one time slot. Within a slot the simulator draws
//! the pair number, thins pair photons by the collection efficiencies (and
//! idler pair photons by the twin-survival factor), adds detected noise
//! photons and dark clicks, and records a click on every threshold detector
//! that received at least one photon or dark event. In the three-detector
//! topology the idler arm is split 50:50 onto D2 and D3.
//!
//! Most pulses produce nothing. The engine draws the geometric gap to the next
//! pulse where at least one source component is non-zero and then samples
//! that pulse conditionally, which has the same distribution as drawing every
//! pulse independently. Work is split into fixed blocks of pulses; each block
//! owns a [`KeyedStream`] keyed by `(seed, block)`, so the output depends only
//! on the configuration and never on thread scheduling.

use std::fmt::Write as _;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::KeyedStream;
use crate::stats::{PairDistribution, SourceModel};

/// Largest supported run, leaving headroom in 64-bit pulse arithmetic.
pub const MAX_PULSES: u64 = 1 << 62;

pub const DEFAULT_BLOCK_SIZE: u64 = 1 << 22;

const PURPOSE_EVENTS: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    D1,
    D2,
    D3,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::D1, Channel::D2, Channel::D3];

    pub fn index(self) -> usize {
        match self {
            Channel::D1 => 0,
            Channel::D2 => 1,
            Channel::D3 => 2,
        }
    }

    pub fn code(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<Channel> {
        match code {
            1 => Some(Channel::D1),
            2 => Some(Channel::D2),
            3 => Some(Channel::D3),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::D1 => "D1",
            Channel::D2 => "D2",
            Channel::D3 => "D3",
        }
    }

    pub fn from_name(name: &str) -> Option<Channel> {
        match name {
            "D1" => Some(Channel::D1),
            "D2" => Some(Channel::D2),
            "D3" => Some(Channel::D3),
            _ => None,
        }
    }
}

/// One detector click: which detector, in which pulse slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Record {
    pub pulse: u64,
    pub channel: Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topology {
    /// signal → D1, idler → D2
    TwoDetector,
    /// signal → D1 (herald), idler → 50:50 → D2, D3
    ThreeDetector,
}

impl Topology {
    pub fn name(self) -> &'static str {
        match self {
            Topology::TwoDetector => "two-detector",
            Topology::ThreeDetector => "three-detector",
        }
    }

    pub fn from_name(name: &str) -> Option<Topology> {
        match name {
            "two-detector" => Some(Topology::TwoDetector),
            "three-detector" => Some(Topology::ThreeDetector),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: SourceModel,
    pub n_pulses: u64,
    pub seed: u64,
    pub topology: Topology,
    /// Pulses per independently keyed block.
    pub block_size: u64,
    /// Slots blanked after each registered click (non-paralyzable). The
    /// detector dead time is not known for the modelled hardware; 0 disables it.
    pub dead_time: u64,
}

impl RunConfig {
    pub fn new(model: SourceModel, n_pulses: u64, seed: u64, topology: Topology) -> Self {
        RunConfig {
            model,
            n_pulses,
            seed,
            topology,
            block_size: DEFAULT_BLOCK_SIZE,
            dead_time: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n_pulses == 0 {
            return Err(Error::RunSize("n_pulses must be at least 1".into()));
        }
        if self.n_pulses > MAX_PULSES {
            return Err(Error::RunSize(format!(
                "n_pulses {} exceeds the pulse counter limit {MAX_PULSES}",
                self.n_pulses
            )));
        }
        if self.block_size == 0 {
            return Err(Error::RunSize("block_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical text form of everything that determines the output.
    pub fn canonical_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let _ = writeln!(s, "rep_rate={:?}", m.rep_rate);
        match &m.pair_dist {
            PairDistribution::Poissonian { mu } => {
                let _ = writeln!(s, "distribution=poissonian\nmu={mu:?}");
            }
            PairDistribution::ThermalLike { mu } => {
                let _ = writeln!(s, "distribution=thermal\nmu={mu:?}");
            }
            PairDistribution::ExplicitTable { probs } => {
                let _ = writeln!(s, "distribution=table\ntable={probs:?}");
            }
        }
        let _ = writeln!(
            s,
            "eta_signal={:?}\neta_idler={:?}",
            m.eta_signal, m.eta_idler
        );
        let _ = writeln!(
            s,
            "noise_signal={:?}\nnoise_idler={:?}",
            m.noise_signal, m.noise_idler
        );
        let _ = writeln!(
            s,
            "dark_signal={:?}\ndark_idler={:?}",
            m.dark_signal, m.dark_idler
        );
        let _ = writeln!(s, "twin_survival={:?}", m.twin_survival);
        if let Some(p) = &m.pump {
            let _ = writeln!(
                s,
                "pump={:?},{:?},{:?},{:?}",
                p.gamma, p.peak_power, p.eff_length, p.calib
            );
        }
        let _ = writeln!(s, "pulse_width={:?}", m.pulse_width);
        let _ = writeln!(s, "n_pulses={}\nseed={}", self.n_pulses, self.seed);
        let _ = writeln!(s, "topology={}", self.topology.name());
        let _ = writeln!(
            s,
            "block_size={}\ndead_time={}",
            self.block_size, self.dead_time
        );
        s
    }

    /// SHA-256 of [`RunConfig::canonical_text`], lowercase hex.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.canonical_text().as_bytes());
        hash.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Provenance and totals carried alongside an event stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamMetadata {
    pub seed: Option<u64>,
    pub n_pulses: u64,
    pub rep_rate: f64,
    pub topology: Option<Topology>,
    pub config_digest: Option<String>,
    /// Records per channel, indexed by [`Channel::index`].
    pub counts: [u64; 3],
}

impl StreamMetadata {
    pub fn for_run(config: &RunConfig) -> Self {
        StreamMetadata {
            seed: Some(config.seed),
            n_pulses: config.n_pulses,
            rep_rate: config.model.rep_rate,
            topology: Some(config.topology),
            config_digest: Some(config.digest()),
            counts: [0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub metadata: StreamMetadata,
    pub records: Vec<Record>,
}

impl EventStream {
    /// Checks ordering, uniqueness per slot, pulse range and header totals.
    pub fn validate(&self) -> Result<()> {
        let mut counts = [0u64; 3];
        let mut prev: Option<Record> = None;
        for (i, r) in self.records.iter().enumerate() {
            if r.pulse >= self.metadata.n_pulses {
                return Err(Error::format(
                    0,
                    format!(
                        "record {i}: pulse {} >= n_pulses {}",
                        r.pulse, self.metadata.n_pulses
                    ),
                ));
            }
            if let Some(p) = prev {
                if r.pulse < p.pulse {
                    return Err(Error::format(
                        0,
                        format!("record {i}: pulse index decreases"),
                    ));
                }
                if *r <= p {
                    return Err(Error::format(
                        0,
                        format!("record {i}: duplicate or unordered channel within a slot"),
                    ));
                }
            }
            counts[r.channel.index()] += 1;
            prev = Some(*r);
        }
        if counts != self.metadata.counts {
            return Err(Error::format(
                0,
                format!(
                    "channel totals {counts:?} disagree with metadata {:?}",
                    self.metadata.counts
                ),
            ));
        }
        Ok(())
    }
}

/// Draws a pair number from `dist`.
pub fn sample_pair_count(dist: &PairDistribution, rng: &mut KeyedStream) -> u64 {
    walk_pmf(dist.pmf(), rng.uniform())
}

/// Inverse-CDF walk: smallest `n` with `P(0..=n) > target`.
fn walk_pmf(pmf: impl Iterator<Item = f64>, mut target: f64) -> u64 {
    let mut last_positive = 0;
    for (n, p) in pmf.enumerate() {
        if p > 0.0 {
            last_positive = n as u64;
        }
        target -= p;
        if target < 0.0 {
            return n as u64;
        }
        // Past the bulk the remaining mass is below rounding; stop.
        if p == 0.0 && n as u64 > last_positive + 64 {
            break;
        }
    }
    last_positive
}

/// Draws `n ≥ 1` with probability `P(n) / (1 - P(0))`.
fn walk_pmf_positive(dist: &PairDistribution, u: f64) -> u64 {
    walk_pmf(dist.pmf().skip(1), u * dist.prob_nonzero()) + 1
}

/// An independent per-pulse source term. Zero means "nothing happened".
#[derive(Debug, Clone)]
enum Term {
    Pairs(PairDistribution),
    /// Detected noise photons, Poisson with mean ν·η.
    Noise {
        arm_idler: bool,
        law: PairDistribution,
    },
    Dark(Channel, f64),
}

#[derive(Debug, Clone)]
struct TermProbs {
    term: Term,
    /// P(term = 0)
    zero: f64,
    /// P(term > 0), computed without cancellation
    nonzero: f64,
    ln_zero: f64,
}

#[derive(Debug, Default, Clone, Copy)]
struct PulseDraw {
    pairs: u64,
    noise_signal: u64,
    noise_idler: u64,
    dark: [bool; 3],
}

/// Precomputed sampling plan for one source model.
#[derive(Debug, Clone)]
struct PulsePlan {
    terms: Vec<TermProbs>,
    p_event: f64,
    ln_no_event: f64,
    eta_signal: f64,
    eta_idler: f64,
    twin_survival: f64,
    three_detector: bool,
}

impl PulsePlan {
    fn new(model: &SourceModel, topology: Topology) -> Self {
        let mut terms = Vec::new();
        let mut push = |term: Term| {
            let (zero, nonzero, ln_zero) = match &term {
                Term::Pairs(d) | Term::Noise { law: d, .. } => {
                    (d.prob_zero(), d.prob_nonzero(), d.ln_prob_zero())
                }
                Term::Dark(_, p) => (1.0 - p, *p, (-p).ln_1p()),
            };
            if nonzero > 0.0 {
                terms.push(TermProbs {
                    term,
                    zero,
                    nonzero,
                    ln_zero,
                });
            }
        };
        push(Term::Pairs(model.pair_dist.clone()));
        push(Term::Noise {
            arm_idler: false,
            law: PairDistribution::Poissonian {
                mu: model.noise_signal * model.eta_signal,
            },
        });
        push(Term::Noise {
            arm_idler: true,
            law: PairDistribution::Poissonian {
                mu: model.noise_idler * model.eta_idler,
            },
        });
        let r = model.rep_rate;
        push(Term::Dark(Channel::D1, model.dark_signal / r));
        push(Term::Dark(Channel::D2, model.dark_idler / r));
        let three_detector = topology == Topology::ThreeDetector;
        if three_detector {
            push(Term::Dark(Channel::D3, model.dark_idler / r));
        }
        let ln_no_event: f64 = terms.iter().map(|t| t.ln_zero).sum();
        PulsePlan {
            terms,
            p_event: -ln_no_event.exp_m1(),
            ln_no_event,
            eta_signal: model.eta_signal,
            eta_idler: model.eta_idler,
            twin_survival: model.twin_survival,
            three_detector,
        }
    }

    /// Number of empty pulses before the next non-empty one.
    #[inline]
    fn gap(&self, rng: &mut KeyedStream) -> u64 {
        if self.ln_no_event == f64::NEG_INFINITY {
            return 0;
        }
        let g = rng.uniform_open0().ln() / self.ln_no_event;
        // `as` saturates, which is what an astronomically long gap needs.
        g as u64
    }

    /// Samples the source terms of a pulse known to be non-empty.
    fn draw(&self, rng: &mut KeyedStream) -> PulseDraw {
        let mut target = rng.uniform() * self.p_event;
        let mut prefix = 1.0;
        let mut first = self.terms.len() - 1;
        for (j, t) in self.terms.iter().enumerate() {
            let w = prefix * t.nonzero;
            if target < w {
                first = j;
                break;
            }
            target -= w;
            prefix *= t.zero;
        }
        let mut out = PulseDraw::default();
        for (j, t) in self.terms.iter().enumerate().skip(first) {
            let value = if j == first {
                match &t.term {
                    Term::Dark(..) => 1,
                    Term::Pairs(d) | Term::Noise { law: d, .. } => {
                        walk_pmf_positive(d, rng.uniform())
                    }
                }
            } else {
                match &t.term {
                    Term::Dark(_, p) => rng.bernoulli(*p) as u64,
                    Term::Pairs(d) | Term::Noise { law: d, .. } => walk_pmf(d.pmf(), rng.uniform()),
                }
            };
            match t.term {
                Term::Pairs(_) => out.pairs = value,
                Term::Noise {
                    arm_idler: false, ..
                } => out.noise_signal = value,
                Term::Noise {
                    arm_idler: true, ..
                } => out.noise_idler = value,
                Term::Dark(ch, _) => out.dark[ch.index()] = value > 0,
            }
        }
        out
    }

    /// Detector outcome `[D1, D2, D3]` for a pulse.
    fn detect(&self, draw: &PulseDraw, rng: &mut KeyedStream) -> [bool; 3] {
        let mut clicks = draw.dark;
        if draw.noise_signal > 0 {
            clicks[0] = true;
        }
        let mut idler_photons = draw.noise_idler;
        for _ in 0..draw.pairs {
            if !clicks[0] && rng.bernoulli(self.eta_signal) {
                clicks[0] = true;
            }
            if rng.bernoulli(self.eta_idler)
                && (self.twin_survival >= 1.0 || rng.bernoulli(self.twin_survival))
            {
                idler_photons += 1;
            }
        }
        if self.three_detector {
            for _ in 0..idler_photons {
                if rng.bernoulli(0.5) {
                    clicks[1] = true;
                } else {
                    clicks[2] = true;
                }
                if clicks[1] && clicks[2] {
                    break;
                }
            }
        } else if idler_photons > 0 {
            clicks[1] = true;
        }
        clicks
    }
}

fn simulate_block(plan: &PulsePlan, seed: u64, block: u64, start: u64, end: u64) -> Vec<Record> {
    let mut out = Vec::new();
    if plan.terms.is_empty() {
        return out;
    }
    let mut rng = KeyedStream::new(seed, block, PURPOSE_EVENTS);
    let mut pulse = start;
    loop {
        let gap = plan.gap(&mut rng);
        pulse = match pulse.checked_add(gap) {
            Some(p) if p < end => p,
            _ => break,
        };
        let draw = plan.draw(&mut rng);
        let clicks = plan.detect(&draw, &mut rng);
        for ch in Channel::ALL {
            if clicks[ch.index()] {
                out.push(Record { pulse, channel: ch });
            }
        }
        pulse += 1;
    }
    out
}

/// Non-paralyzable dead time applied in stream order.
#[derive(Debug, Clone)]
struct DeadTime {
    slots: u64,
    last: [Option<u64>; 3],
}

impl DeadTime {
    fn admit(&mut self, r: &Record) -> bool {
        let last = &mut self.last[r.channel.index()];
        if let Some(prev) = *last {
            if r.pulse - prev <= self.slots {
                return false;
            }
        }
        *last = Some(r.pulse);
        true
    }
}

/// Runs the simulation and hands records to `sink` in stream order, one block
/// at a time. `threads = None` uses the global rayon pool.
pub fn simulate_streaming<F>(config: &RunConfig, threads: Option<usize>, mut sink: F) -> Result<()>
where
    F: FnMut(&[Record]) -> Result<()>,
{
    config.validate()?;
    let plan = PulsePlan::new(&config.model, config.topology);
    let n_blocks = config.n_pulses.div_ceil(config.block_size);
    let pool = match threads {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::RunSize(format!("cannot build thread pool: {e}")))?,
        ),
        None => None,
    };
    let n_threads = pool
        .as_ref()
        .map_or_else(rayon::current_num_threads, |p| p.current_num_threads());
    let batch = (n_threads as u64 * 4).max(1);
    let compute = |first: u64, last: u64| -> Vec<Vec<Record>> {
        let work = || {
            (first..last)
                .into_par_iter()
                .map(|b| {
                    let start = b * config.block_size;
                    let end = (start + config.block_size).min(config.n_pulses);
                    simulate_block(&plan, config.seed, b, start, end)
                })
                .collect()
        };
        match &pool {
            Some(p) => p.install(work),
            None => work(),
        }
    };
    let mut dead = (config.dead_time > 0).then(|| DeadTime {
        slots: config.dead_time,
        last: [None; 3],
    });
    let mut first = 0;
    while first < n_blocks {
        let last = (first + batch).min(n_blocks);
        for mut records in compute(first, last) {
            if let Some(dt) = dead.as_mut() {
                records.retain(|r| dt.admit(r));
            }
            sink(&records)?;
        }
        first = last;
    }
    Ok(())
}

/// Simulates a full run and collects the event stream.
pub fn simulate(config: &RunConfig) -> Result<EventStream> {
    simulate_with_threads(config, None)
}

pub fn simulate_with_threads(config: &RunConfig, threads: Option<usize>) -> Result<EventStream> {
    let mut records = Vec::new();
    simulate_streaming(config, threads, |chunk| {
        records.extend_from_slice(chunk);
        Ok(())
    })?;
    let mut metadata = StreamMetadata::for_run(config);
    for r in &records {
        metadata.counts[r.channel.index()] += 1;
    }
    Ok(EventStream { metadata, records })
}
