//! Event-file serialization.
//!
//! Text form:
//!
//! ```text
//! # format=hsps-events
//! # version=1
//! # seed=42
//! # n_pulses=1000000
//! # rep_rate_hz=2500000000.0
//! # topology=three-detector
//! # config_digest=<sha256 hex>
//! # count_d1=123
//! # count_d2=61
//! # count_d3=58
//! 5,D1
//! 5,D2
//! ```
//!
//! Header lines start with `#` and hold `key=value` pairs; `#` lines without
//! `=` are comments. Data lines are `pulse_index,channel` in non-decreasing
//! pulse order, channels sorted within a slot.
//!
//! Binary form: the 8 magic bytes `HSPSEVT1`, a little-endian `u32` length
//! followed by that many bytes of the same `key=value` header text (one pair
//! per line, no `#`), a little-endian `u64` record count, then per record a
//! little-endian `u64` pulse index and a `u8` channel code (1, 2, 3).

use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use crate::error::{Error, Result};
use crate::montecarlo::{Channel, EventStream, Record, StreamMetadata, Topology};

pub const MAGIC: &[u8; 8] = b"HSPSEVT1";
const FORMAT_NAME: &str = "hsps-events";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Text,
    Binary,
}

fn header_pairs(meta: &StreamMetadata) -> Vec<(&'static str, String)> {
    let mut pairs = vec![
        ("format", FORMAT_NAME.to_string()),
        ("version", VERSION.to_string()),
    ];
    if let Some(seed) = meta.seed {
        pairs.push(("seed", seed.to_string()));
    }
    pairs.push(("n_pulses", meta.n_pulses.to_string()));
    pairs.push(("rep_rate_hz", format!("{:?}", meta.rep_rate)));
    if let Some(t) = meta.topology {
        pairs.push(("topology", t.name().to_string()));
    }
    if let Some(d) = &meta.config_digest {
        pairs.push(("config_digest", d.clone()));
    }
    for ch in Channel::ALL {
        let key = match ch {
            Channel::D1 => "count_d1",
            Channel::D2 => "count_d2",
            Channel::D3 => "count_d3",
        };
        pairs.push((key, meta.counts[ch.index()].to_string()));
    }
    pairs
}

/// Serializes `stream` in the requested format.
pub fn emit_events<W: Write>(stream: &EventStream, sink: W, format: EventFormat) -> Result<()> {
    stream.validate()?;
    let mut w = BufWriter::new(sink);
    match format {
        EventFormat::Text => {
            for (k, v) in header_pairs(&stream.metadata) {
                writeln!(w, "# {k}={v}")?;
            }
            for r in &stream.records {
                writeln!(w, "{},{}", r.pulse, r.channel.name())?;
            }
        }
        EventFormat::Binary => {
            let mut header = String::new();
            for (k, v) in header_pairs(&stream.metadata) {
                header.push_str(k);
                header.push('=');
                header.push_str(&v);
                header.push('\n');
            }
            w.write_all(MAGIC)?;
            w.write_all(&(header.len() as u32).to_le_bytes())?;
            w.write_all(header.as_bytes())?;
            w.write_all(&(stream.records.len() as u64).to_le_bytes())?;
            for r in &stream.records {
                w.write_all(&r.pulse.to_le_bytes())?;
                w.write_all(&[r.channel.code()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Default)]
struct HeaderBuilder {
    format: Option<String>,
    version: Option<u32>,
    seed: Option<u64>,
    n_pulses: Option<u64>,
    rep_rate: Option<f64>,
    topology: Option<Topology>,
    digest: Option<String>,
    counts: [Option<u64>; 3],
}

impl HeaderBuilder {
    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::format(line, format!("invalid {what} `{value}`"));
        match key {
            "format" => self.format = Some(value.to_string()),
            "version" => self.version = Some(value.parse().map_err(|_| bad("version"))?),
            "seed" => self.seed = Some(value.parse().map_err(|_| bad("seed"))?),
            "n_pulses" => self.n_pulses = Some(value.parse().map_err(|_| bad("n_pulses"))?),
            "rep_rate_hz" => {
                let r: f64 = value.parse().map_err(|_| bad("rep_rate_hz"))?;
                if !(r > 0.0) || !r.is_finite() {
                    return Err(bad("rep_rate_hz"));
                }
                self.rep_rate = Some(r);
            }
            "topology" => {
                self.topology = Some(Topology::from_name(value).ok_or_else(|| bad("topology"))?)
            }
            "config_digest" => self.digest = Some(value.to_string()),
            "count_d1" => self.counts[0] = Some(value.parse().map_err(|_| bad("count"))?),
            "count_d2" => self.counts[1] = Some(value.parse().map_err(|_| bad("count"))?),
            "count_d3" => self.counts[2] = Some(value.parse().map_err(|_| bad("count"))?),
            // Unknown keys are tolerated so external tools can annotate files.
            _ => {}
        }
        Ok(())
    }

    fn finish(self, line: usize) -> Result<(StreamMetadata, [Option<u64>; 3])> {
        if let Some(f) = &self.format {
            if f != FORMAT_NAME {
                return Err(Error::format(line, format!("unknown format `{f}`")));
            }
        }
        if let Some(v) = self.version {
            if v != VERSION {
                return Err(Error::format(line, format!("unsupported version {v}")));
            }
        }
        let n_pulses = self
            .n_pulses
            .ok_or_else(|| Error::format(line, "header is missing n_pulses"))?;
        let rep_rate = self
            .rep_rate
            .ok_or_else(|| Error::format(line, "header is missing rep_rate_hz"))?;
        let meta = StreamMetadata {
            seed: self.seed,
            n_pulses,
            rep_rate,
            topology: self.topology,
            config_digest: self.digest,
            counts: [0; 3],
        };
        Ok((meta, self.counts))
    }
}

/// Incremental ordering and range checks shared by both formats.
struct Checker {
    n_pulses: u64,
    prev: Option<Record>,
    counts: [u64; 3],
}

impl Checker {
    fn push(&mut self, line: usize, r: Record) -> Result<()> {
        if r.pulse >= self.n_pulses {
            return Err(Error::format(
                line,
                format!(
                    "pulse index {} is not below n_pulses {}",
                    r.pulse, self.n_pulses
                ),
            ));
        }
        if let Some(p) = self.prev {
            if r.pulse < p.pulse {
                return Err(Error::format(line, "pulse index decreases"));
            }
            if r.pulse == p.pulse && r.channel <= p.channel {
                return Err(Error::format(
                    line,
                    "channels within a slot must be distinct and in D1, D2, D3 order",
                ));
            }
        }
        self.prev = Some(r);
        self.counts[r.channel.index()] += 1;
        Ok(())
    }

    fn finish(
        self,
        line: usize,
        declared: [Option<u64>; 3],
        mut meta: StreamMetadata,
    ) -> Result<StreamMetadata> {
        for ch in Channel::ALL {
            if let Some(d) = declared[ch.index()] {
                if d != self.counts[ch.index()] {
                    return Err(Error::format(
                        line,
                        format!(
                            "header declares {d} {} records, found {}",
                            ch.name(),
                            self.counts[ch.index()]
                        ),
                    ));
                }
            }
        }
        meta.counts = self.counts;
        Ok(meta)
    }
}

/// Parses an event file, detecting the binary container by its magic bytes.
pub fn ingest_auto<R: Read>(source: R) -> Result<EventStream> {
    let mut reader = BufReader::new(source);
    let format = if reader.fill_buf()?.starts_with(MAGIC) {
        EventFormat::Binary
    } else {
        EventFormat::Text
    };
    ingest(reader, format)
}

/// Parses and validates an event file.
pub fn ingest<R: Read>(source: R, format: EventFormat) -> Result<EventStream> {
    let reader = BufReader::new(source);
    match format {
        EventFormat::Text => ingest_text(reader),
        EventFormat::Binary => ingest_binary(reader),
    }
}

fn ingest_text<R: BufRead>(reader: R) -> Result<EventStream> {
    let mut header = HeaderBuilder::default();
    let mut state: Option<(StreamMetadata, [Option<u64>; 3], Checker)> = None;
    let mut records = Vec::new();
    let mut line_no = 0;
    for line in reader.lines() {
        line_no += 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if let Some(rest) = line.strip_prefix('#') {
            if state.is_some() {
                return Err(Error::format(line_no, "header line after data"));
            }
            if let Some((k, v)) = rest.trim().split_once('=') {
                header.set(line_no, k.trim(), v.trim())?;
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if state.is_none() {
            let (meta, declared) = std::mem::take(&mut header).finish(line_no)?;
            let checker = Checker {
                n_pulses: meta.n_pulses,
                prev: None,
                counts: [0; 3],
            };
            state = Some((meta, declared, checker));
        }
        let (_, _, checker) = state.as_mut().expect("initialised above");
        let record = parse_data_line(line_no, line)?;
        checker.push(line_no, record)?;
        records.push(record);
    }
    let (meta, declared, checker) = match state {
        Some(s) => s,
        None => {
            let (meta, declared) = header.finish(line_no)?;
            let checker = Checker {
                n_pulses: meta.n_pulses,
                prev: None,
                counts: [0; 3],
            };
            (meta, declared, checker)
        }
    };
    let metadata = checker.finish(line_no, declared, meta)?;
    Ok(EventStream { metadata, records })
}

fn parse_data_line(line_no: usize, line: &str) -> Result<Record> {
    let (pulse, channel) = line.split_once(',').ok_or_else(|| {
        Error::format(
            line_no,
            format!("expected `pulse_index,channel`, got `{line}`"),
        )
    })?;
    let pulse = pulse
        .trim()
        .parse::<u64>()
        .map_err(|_| Error::format(line_no, format!("invalid pulse index `{}`", pulse.trim())))?;
    let channel = Channel::from_name(channel.trim())
        .ok_or_else(|| Error::format(line_no, format!("invalid channel `{}`", channel.trim())))?;
    Ok(Record { pulse, channel })
}

fn ingest_binary<R: Read>(mut reader: R) -> Result<EventStream> {
    let truncated = |what: &str| Error::format(0, format!("truncated binary container ({what})"));
    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|_| truncated("magic"))?;
    if &magic != MAGIC {
        return Err(Error::format(0, "bad magic bytes"));
    }
    let mut len = [0u8; 4];
    reader
        .read_exact(&mut len)
        .map_err(|_| truncated("header length"))?;
    let mut text = vec![0u8; u32::from_le_bytes(len) as usize];
    reader
        .read_exact(&mut text)
        .map_err(|_| truncated("header"))?;
    let text = String::from_utf8(text).map_err(|_| Error::format(0, "header is not UTF-8"))?;
    let mut header = HeaderBuilder::default();
    for (i, line) in text.lines().enumerate() {
        if let Some((k, v)) = line.split_once('=') {
            header.set(i + 1, k.trim(), v.trim())?;
        }
    }
    let (meta, declared) = header.finish(0)?;
    let mut count = [0u8; 8];
    reader
        .read_exact(&mut count)
        .map_err(|_| truncated("record count"))?;
    let count = u64::from_le_bytes(count);
    let mut checker = Checker {
        n_pulses: meta.n_pulses,
        prev: None,
        counts: [0; 3],
    };
    let mut records = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut buf = [0u8; 9];
    for i in 0..count {
        reader
            .read_exact(&mut buf)
            .map_err(|_| Error::format(0, format!("truncated binary container at record {i}")))?;
        let pulse = u64::from_le_bytes(buf[..8].try_into().expect("8 bytes"));
        let channel = Channel::from_code(buf[8]).ok_or_else(|| {
            Error::format(0, format!("record {i}: invalid channel code {}", buf[8]))
        })?;
        let r = Record { pulse, channel };
        checker
            .push(0, r)
            .map_err(|e| Error::format(0, format!("record {i}: {e}")))?;
        records.push(r);
    }
    let mut rest = [0u8; 1];
    if reader.read(&mut rest)? != 0 {
        return Err(Error::format(0, "trailing bytes after the last record"));
    }
    let metadata = checker.finish(0, declared, meta)?;
    Ok(EventStream { metadata, records })
}
