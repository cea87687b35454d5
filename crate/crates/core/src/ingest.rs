//! `.btt` time-tag files and JSON run manifests.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! offset 0   "BTT1" magic, 12 reserved bytes
//! offset 16  records, 16 bytes each:
//!              u64 timestamp (ps) | u8 channel (1 = Out1, 2 = Out0, 3 = Trigger) | 7 reserved
//! ```
//!
//! A zero-length file is accepted as an empty stream.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Channel, SettingPair, TimeTagRecord, TimeTagStream};

pub const MAGIC: &[u8; 4] = b"BTT1";
pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 16;

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    /// How many decreasing timestamps are tolerated before the stream is
    /// rejected.
    pub max_order_violations: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            max_order_violations: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParsedStream {
    pub stream: TimeTagStream,
    pub order_violations: usize,
}

fn decode_record(buf: &[u8; RECORD_LEN], offset: usize) -> Result<TimeTagRecord> {
    let time_ps = u64::from_le_bytes(buf[..8].try_into().expect("8 bytes"));
    let channel = Channel::from_id(buf[8]).ok_or_else(|| Error::Parse {
        offset: offset + 8,
        message: format!("unknown channel id {}", buf[8]),
    })?;
    Ok(TimeTagRecord { time_ps, channel })
}

fn encode_record(rec: &TimeTagRecord) -> [u8; RECORD_LEN] {
    let mut out = [0u8; RECORD_LEN];
    out[..8].copy_from_slice(&rec.time_ps.to_le_bytes());
    out[8] = rec.channel.id();
    out
}

fn header() -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(MAGIC);
    h
}

/// Incremental record reader over any byte source.
pub struct TimeTagReader<R> {
    inner: R,
    offset: usize,
    started: bool,
    done: bool,
}

impl<R: Read> TimeTagReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            offset: 0,
            started: false,
            done: false,
        }
    }

    /// Byte offset of the next unread record.
    pub fn offset(&self) -> usize {
        self.offset
    }

    /// Fills `buf` as far as possible; returns the number of bytes read.
    fn fill(&mut self, buf: &mut [u8]) -> Result<usize> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => break,
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(Error::io(format!("reading record at byte {}", self.offset + got), e)),
            }
        }
        Ok(got)
    }

    fn read_header(&mut self) -> Result<bool> {
        self.started = true;
        let mut h = [0u8; HEADER_LEN];
        let got = self.fill(&mut h)?;
        if got == 0 {
            return Ok(false);
        }
        if got < HEADER_LEN {
            return Err(Error::Parse {
                offset: 0,
                message: format!("truncated header: {got} of {HEADER_LEN} bytes"),
            });
        }
        if &h[..4] != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "missing BTT1 magic".into(),
            });
        }
        self.offset = HEADER_LEN;
        Ok(true)
    }

    pub fn next_record(&mut self) -> Result<Option<TimeTagRecord>> {
        if self.done {
            return Ok(None);
        }
        if !self.started && !self.read_header()? {
            self.done = true;
            return Ok(None);
        }
        let mut buf = [0u8; RECORD_LEN];
        let got = self.fill(&mut buf)?;
        if got == 0 {
            self.done = true;
            return Ok(None);
        }
        if got < RECORD_LEN {
            self.done = true;
            return Err(Error::Parse {
                offset: self.offset,
                message: format!("truncated record: {got} of {RECORD_LEN} bytes"),
            });
        }
        let rec = decode_record(&buf, self.offset)?;
        self.offset += RECORD_LEN;
        Ok(Some(rec))
    }
}

impl<R: Read> Iterator for TimeTagReader<R> {
    type Item = Result<TimeTagRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

/// Reads a whole stream, counting (and bounding) timestamp reorderings.
pub fn read_stream<R: Read>(reader: R, opts: ParseOptions) -> Result<ParsedStream> {
    let mut records = Vec::new();
    let mut violations = 0usize;
    let mut last = 0u64;
    for rec in TimeTagReader::new(reader) {
        let rec = rec?;
        if rec.time_ps < last {
            violations += 1;
            if violations > opts.max_order_violations {
                return Err(Error::Unordered {
                    violations,
                    tolerance: opts.max_order_violations,
                });
            }
        }
        last = rec.time_ps;
        records.push(rec);
    }
    if violations > 0 {
        log::warn!("time-tag stream has {violations} decreasing timestamps");
    }
    Ok(ParsedStream {
        stream: TimeTagStream::new(records),
        order_violations: violations,
    })
}

/// Parses an in-memory `.btt` image.
pub fn parse_timetag_file(bytes: &[u8]) -> Result<ParsedStream> {
    let mut parsed = read_stream(bytes, ParseOptions::default())?;
    parsed.stream.records.shrink_to_fit();
    Ok(parsed)
}

pub fn read_timetag_path(path: &Path, opts: ParseOptions) -> Result<ParsedStream> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut parsed = read_stream(BufReader::with_capacity(1 << 20, file), opts)?;
    parsed.stream.records.shrink_to_fit();
    Ok(parsed)
}

pub fn write_stream<W: Write>(mut w: W, records: &[TimeTagRecord]) -> io::Result<()> {
    w.write_all(&header())?;
    for rec in records {
        w.write_all(&encode_record(rec))?;
    }
    w.flush()
}

/// Serializes a stream to its `.btt` byte image.
pub fn encode_stream(stream: &TimeTagStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    write_stream(&mut out, &stream.records).expect("writing to a Vec cannot fail");
    out
}

pub fn write_timetag_path(path: &Path, stream: &TimeTagStream) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_stream(BufWriter::with_capacity(1 << 20, file), &stream.records)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub duration_s: f64,
    pub alpha_deg: f64,
    pub beta_deg: f64,
    pub alice_file: PathBuf,
    pub bob_file: PathBuf,
}

impl RunManifest {
    pub fn settings(&self) -> SettingPair {
        SettingPair::new(self.alpha_deg, self.beta_deg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub runs: Vec<RunManifest>,
}

impl ExperimentManifest {
    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::EmptyExperiment);
        }
        let mut seen = HashSet::new();
        for run in &self.runs {
            if !seen.insert(run.run_id.as_str()) {
                return Err(Error::Config(format!("duplicate run_id `{}`", run.run_id)));
            }
            if !(run.duration_s > 0.0) {
                return Err(Error::Config(format!(
                    "run `{}` has non-positive duration {}",
                    run.run_id, run.duration_s
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::json("experiment manifest", e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Both stations' streams for one run.
#[derive(Debug, Clone)]
pub struct RunStreams {
    pub run: RunManifest,
    pub alice: TimeTagStream,
    pub bob: TimeTagStream,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads one run's files; relative paths are resolved against `base_dir`.
pub fn load_run(run: &RunManifest, base_dir: &Path, opts: ParseOptions) -> Result<RunStreams> {
    let read = |p: &Path| {
        let path = resolve(base_dir, p);
        read_timetag_path(&path, opts).map_err(|e| Error::RunFile {
            run_id: run.run_id.clone(),
            path,
            source: Box::new(e),
        })
    };
    let alice = read(&run.alice_file)?.stream;
    let bob = read(&run.bob_file)?.stream;
    Ok(RunStreams {
        run: run.clone(),
        alice,
        bob,
    })
}

/// Loads every run of an experiment, in manifest order.
pub fn load_experiment(manifest: &ExperimentManifest, base_dir: &Path, opts: ParseOptions) -> Result<Vec<RunStreams>> {
    manifest.validate()?;
    manifest
        .runs
        .par_iter()
        .map(|run| load_run(run, base_dir, opts))
        .collect()
}
