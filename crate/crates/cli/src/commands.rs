use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};

use hsps_core::coincidence::{self, Bound, CoincidenceTally, EstimateWithError, Tallier};
use hsps_core::estimation::{self, FitOptions, SweepChannel};
use hsps_core::eventfile::{self, EventFormat};
use hsps_core::montecarlo::{self, RunConfig, Topology};
use hsps_core::rng::KeyedStream;
use hsps_core::stats::{self, Arm, DistKind};

use crate::config::ExperimentConfig;
use crate::Format;

/// Purpose tag for deriving per-point seeds in a sweep.
const PURPOSE_SWEEP_SEED: u64 = 0x5357;

pub struct Context {
    pub config: ExperimentConfig,
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,
    pub format: Option<Format>,
}

impl Context {
    pub fn new(
        config_path: Option<&Path>,
        seed: Option<u64>,
        threads: Option<usize>,
        output: Option<PathBuf>,
        format: Option<Format>,
    ) -> Result<Self> {
        let mut config = match config_path {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = seed {
            config.run.seed = seed;
        }
        if threads == Some(0) {
            bail!("--threads must be at least 1");
        }
        Ok(Context {
            config,
            threads,
            output,
            format,
        })
    }

    fn open_output(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.output {
            Some(path) => Box::new(BufWriter::new(
                File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
            )),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }

    /// Writes a human-facing summary next to the main output: stdout when the
    /// main output goes to a file, stderr otherwise.
    fn summary(&self, text: &str) -> Result<()> {
        if self.output.is_some() {
            io::stdout().write_all(text.as_bytes())?;
        } else {
            io::stderr().write_all(text.as_bytes())?;
        }
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot create {}", path.display())
    })?))
}

pub fn simulate(ctx: &Context) -> Result<()> {
    let rc = ctx.config.run_config()?;
    let format = match ctx.format.unwrap_or(Format::Text) {
        Format::Text | Format::Csv => EventFormat::Text,
        Format::Binary => EventFormat::Binary,
    };
    let stream = montecarlo::simulate_with_threads(&rc, ctx.threads)?;
    let mut out = ctx.open_output()?;
    eventfile::emit_events(&stream, &mut out, format)?;
    out.flush()?;
    let tally = coincidence::tally(&stream, ctx.config.analysis.max_delay)?;
    let report = tally_report(
        &tally,
        &[rc.digest()],
        rc.topology == Topology::ThreeDetector,
        ctx.config.dist_kind(),
    );
    ctx.summary(&report)
}

pub fn analyze(
    ctx: &Context,
    events: &[PathBuf],
    max_delay: Option<u64>,
    histogram: Option<&Path>,
) -> Result<()> {
    let w = max_delay.unwrap_or(ctx.config.analysis.max_delay);
    let mut merged: Option<CoincidenceTally> = None;
    let mut digests = Vec::new();
    let mut three = false;
    for path in events {
        let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
        let stream = eventfile::ingest_auto(BufReader::new(file))
            .with_context(|| format!("in {}", path.display()))?;
        three |= stream.metadata.topology == Some(Topology::ThreeDetector)
            || stream.metadata.counts[2] > 0;
        if let Some(d) = &stream.metadata.config_digest {
            digests.push(d.clone());
        }
        let t = coincidence::tally(&stream, w).with_context(|| format!("in {}", path.display()))?;
        match merged.as_mut() {
            Some(m) => m
                .merge(&t)
                .with_context(|| format!("cannot merge {}", path.display()))?,
            None => merged = Some(t),
        }
    }
    let tally = merged.context("no event files given")?;
    if let Some(path) = histogram {
        let mut out = create(path)?;
        tally.write_histogram_csv(&mut out)?;
        out.flush()?;
    }
    let mut out = ctx.open_output()?;
    if ctx.format == Some(Format::Csv) {
        tally.write_histogram_csv(&mut out)?;
    } else {
        out.write_all(tally_report(&tally, &digests, three, ctx.config.dist_kind()).as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn push_estimate(s: &mut String, key: &str, estimate: hsps_core::Result<EstimateWithError>) {
    match estimate {
        Ok(e) => {
            let _ = writeln!(s, "{key}={:?}", e.value);
            let _ = writeln!(s, "{key}_std_error={:?}", e.std_error);
            match e.bound {
                Some(Bound::Lower(v)) => {
                    let _ = writeln!(s, "{key}_lower_bound={v:?}");
                }
                Some(Bound::Upper(v)) => {
                    let _ = writeln!(s, "{key}_upper_bound={v:?}");
                }
                None => {}
            }
        }
        Err(err) => {
            let _ = writeln!(s, "{key}=undefined");
            let _ = writeln!(s, "{key}_note={err}");
        }
    }
}

/// `key=value` summary of a tally.
pub fn tally_report(
    tally: &CoincidenceTally,
    digests: &[String],
    three_detector: bool,
    kind: DistKind,
) -> String {
    let rates = coincidence::rates(tally);
    let mut s = String::new();
    for d in digests {
        let _ = writeln!(s, "config_digest={d}");
    }
    let _ = writeln!(s, "n_pulses={}", tally.n_pulses);
    let _ = writeln!(s, "rep_rate_hz={:?}", tally.rep_rate);
    let _ = writeln!(s, "duration_s={:?}", tally.duration());
    let _ = writeln!(s, "max_delay_slots={}", tally.max_delay);
    let _ = writeln!(s, "counts_d1={}", tally.c1);
    let _ = writeln!(s, "counts_d2={}", tally.c2);
    if three_detector {
        let _ = writeln!(s, "counts_d3={}", tally.c3);
    }
    let _ = writeln!(s, "singles_d1_hz={:?}", rates.singles[0]);
    let _ = writeln!(s, "singles_d2_hz={:?}", rates.singles[1]);
    if three_detector {
        let _ = writeln!(s, "singles_d3_hz={:?}", rates.singles[2]);
    }
    let _ = writeln!(s, "zero_delay_counts={}", tally.zero_delay());
    let _ = writeln!(s, "accidental_mean_counts={:?}", tally.accidental_mean());
    let _ = writeln!(s, "coincidences_hz={:?}", rates.true_coincidences);
    let _ = writeln!(s, "accidentals_hz={:?}", rates.accidentals);
    let car = coincidence::estimate_car(tally);
    let car_value = car.as_ref().ok().map(|c| c.value);
    push_estimate(&mut s, "car", car);
    // g²ₕ(0) implied by the measured CAR under the configured pair statistics.
    let kind_name = match kind {
        DistKind::ThermalLike => "thermal",
        _ => "poissonian",
    };
    match car_value.map(|c| stats::g2_from_car(c, kind)) {
        Some(Ok(g)) => {
            let _ = writeln!(s, "g2h_from_car_{kind_name}={g:?}");
        }
        _ => {
            let _ = writeln!(s, "g2h_from_car_{kind_name}=undefined");
        }
    }
    push_estimate(
        &mut s,
        "heralding_idler",
        coincidence::estimate_heralding(tally, Arm::Idler),
    );
    push_estimate(
        &mut s,
        "heralding_signal",
        coincidence::estimate_heralding(tally, Arm::Signal),
    );
    if three_detector {
        let _ = writeln!(s, "counts_d1d2={}", tally.c12);
        let _ = writeln!(s, "counts_d1d3={}", tally.c13);
        let _ = writeln!(s, "counts_d1d2d3={}", tally.c123);
        push_estimate(&mut s, "g2h", coincidence::estimate_g2h(&tally.triples()));
    } else {
        let _ = writeln!(s, "g2h=unavailable");
        let _ = writeln!(
            s,
            "g2h_note=two-detector data has no D3 channel for triple coincidences"
        );
    }
    s
}

pub fn sweep(ctx: &Context, powers: &[f64]) -> Result<()> {
    let base = ctx.config.run_config()?;
    if base.model.pump.is_none() {
        bail!("sweep requires a [source.pump] section");
    }
    if base.topology != Topology::TwoDetector {
        bail!("sweep runs use the two-detector topology; set run.topology = \"two-detector\"");
    }
    let powers = if powers.is_empty() {
        &ctx.config.analysis.powers_w[..]
    } else {
        powers
    };
    if powers.is_empty() {
        bail!("no sweep powers given (use --powers or analysis.powers_w)");
    }
    let w = ctx.config.analysis.max_delay;
    let mut points = Vec::with_capacity(powers.len());
    for (i, &p) in powers.iter().enumerate() {
        let model = base
            .model
            .at_peak_power(p)
            .with_context(|| format!("sweep power #{} ({p} W)", i + 1))?;
        let rc = RunConfig {
            model,
            seed: KeyedStream::new(base.seed, i as u64, PURPOSE_SWEEP_SEED).next_u64(),
            ..base.clone()
        };
        let mut tallier = Tallier::new(rc.n_pulses, rc.model.rep_rate, w)?;
        montecarlo::simulate_streaming(&rc, ctx.threads, |chunk| tallier.push_all(chunk))?;
        let rates = coincidence::rates(&tallier.finish());
        points.push(estimation::PowerSweepPoint::new(
            p,
            rates.singles[0],
            rates.singles[1],
            rates.true_coincidences,
        ));
    }
    let comments = vec![
        format!("config_digest={}", base.digest()),
        format!("seed={}", base.seed),
        format!("n_pulses_per_point={}", base.n_pulses),
        format!("max_delay_slots={w}"),
    ];
    let mut out = ctx.open_output()?;
    estimation::write_sweep_csv(&points, &mut out, &comments)?;
    out.flush()?;
    Ok(())
}

pub fn fit(
    ctx: &Context,
    sweep: &Path,
    max_power: Option<f64>,
    curve: Option<&Path>,
    curve_points: usize,
) -> Result<()> {
    let text = std::fs::read_to_string(sweep)
        .with_context(|| format!("cannot read {}", sweep.display()))?;
    let points = estimation::read_sweep_csv(text.as_bytes())
        .with_context(|| format!("in {}", sweep.display()))?;
    let provenance: Vec<&str> = text
        .lines()
        .filter_map(|l| l.strip_prefix('#'))
        .map(str::trim)
        .filter(|l| l.contains('='))
        .collect();
    let max_power = max_power.unwrap_or(ctx.config.analysis.fit_max_power_w);
    let weighting = ctx.config.weighting();
    let fit_channel = |channel: SweepChannel| {
        let mut options = FitOptions::for_channel(channel);
        options.weighting = weighting;
        if channel == SweepChannel::Coincidences {
            options.form = ctx.config.fit_form();
        }
        estimation::fit_quadratic(&points, channel, max_power, options)
            .with_context(|| format!("fitting {}", channel.name()))
    };
    let signal = fit_channel(SweepChannel::SinglesSignal)?;
    let idler = fit_channel(SweepChannel::SinglesIdler)?;
    let cc = fit_channel(SweepChannel::Coincidences)?;

    let mut report = String::new();
    for line in &provenance {
        let _ = writeln!(report, "sweep.{line}");
    }
    report.push_str(&signal.report("signal."));
    report.push_str(&idler.report("idler."));
    report.push_str(&cc.report("cc."));
    let _ = writeln!(report);
    let _ = writeln!(
        report,
        "peak_power_w,noise_fraction_signal,noise_fraction_idler"
    );
    for p in &points {
        let x = p.peak_power;
        if !(signal.contains(x) && idler.contains(x)) {
            continue;
        }
        let fs = estimation::noise_fraction(&signal, x);
        let fi = estimation::noise_fraction(&idler, x);
        let show = |f: hsps_core::Result<f64>| {
            f.map_or_else(|_| "undefined".to_string(), |v| format!("{v:?}"))
        };
        let _ = writeln!(report, "{x:?},{},{}", show(fs), show(fi));
    }

    if let Some(path) = curve {
        if curve_points < 2 {
            bail!("--curve-points must be at least 2");
        }
        let lo = signal.domain.0.max(idler.domain.0).max(cc.domain.0);
        let hi = signal.domain.1.min(idler.domain.1).min(cc.domain.1);
        let powers: Vec<f64> = (0..curve_points)
            .map(|i| {
                let t = i as f64 / (curve_points - 1) as f64;
                lo * (1.0 - t) + hi * t
            })
            .collect();
        let rep_rate = ctx.config.source.rep_rate_hz;
        let points = estimation::car_curve(&signal, &idler, &cc, rep_rate, &powers)?;
        let mut out = create(path)?;
        for line in &provenance {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "peak_power_w,cc_hz,car")?;
        for p in points {
            writeln!(
                out,
                "{:?},{:?},{:?}",
                p.peak_power, p.coincidence_rate, p.car
            )?;
        }
        out.flush()?;
    }

    let mut out = ctx.open_output()?;
    out.write_all(report.as_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn curves(
    ctx: &Context,
    mu_min: f64,
    mu_max: f64,
    points: usize,
    log: bool,
    car: &[f64],
) -> Result<()> {
    let mut s = String::new();
    if !car.is_empty() {
        let _ = writeln!(s, "car,mu,g2_poissonian,g2_thermal");
        let poisson = estimation::g2_car_overlay(car, DistKind::Poissonian)?;
        let thermal = estimation::g2_car_overlay(car, DistKind::ThermalLike)?;
        for ((c, gp), (_, gt)) in poisson.into_iter().zip(thermal) {
            let _ = writeln!(s, "{c:?},{:?},{gp:?},{gt:?}", stats::mu_from_car(c)?);
        }
    } else {
        if !(mu_min > 0.0 && mu_min.is_finite() && mu_max.is_finite()) {
            bail!("mu range must be finite with mu_min > 0");
        }
        if mu_min > mu_max {
            bail!("empty mu range: mu_min {mu_min} > mu_max {mu_max}");
        }
        if points == 0 || (points == 1 && mu_min != mu_max) {
            bail!("at least 2 points are needed for a non-degenerate mu range");
        }
        let _ = writeln!(s, "mu,car,g2_poissonian,g2_thermal");
        for i in 0..points {
            let t = if points == 1 {
                0.0
            } else {
                i as f64 / (points - 1) as f64
            };
            let mu = if log {
                (mu_min.ln() * (1.0 - t) + mu_max.ln() * t).exp()
            } else {
                mu_min * (1.0 - t) + mu_max * t
            };
            let _ = writeln!(
                s,
                "{mu:?},{:?},{:?},{:?}",
                stats::car_ideal(mu)?,
                stats::g2_heralded_poissonian(mu)?,
                stats::g2_heralded_thermal(mu)?
            );
        }
    }
    let mut out = ctx.open_output()?;
    out.write_all(s.as_bytes())?;
    out.flush()?;
    Ok(())
}
