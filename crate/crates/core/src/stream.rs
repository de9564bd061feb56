//! Line-protocol service for quasi-real-time classification.
//!
//! A client streams per-pulse detector counts as text lines; the service
//! keeps a sliding window of the most recent pulses and emits a verdict
//! every `emit_every` ingested bins (and on request). The window is
//! re-correlated from scratch at each emission, so a verdict is exactly the
//! batch pipeline applied to the same bins.
//!
//! Wire protocol (newline-delimited UTF-8):
//!
//! ```text
//! in:  EVT <bin:u64> <d1:u32> <d2:u32> <d3:u32> | FLUSH | QUIT
//! out: CLS <first_bin> <last_bin> <class> <p_coh> <p_f1> <p_f2> <p_f3> <g3_zero> <g2_zero_est>
//!      ERR <token>
//! ```
//!
//! Event bin indices are advisory: ingestion order is authoritative, and a
//! forward gap up to `max_gap` is filled with empty bins. Counts above
//! `u16::MAX` are rejected per line. Malformed lines produce an `ERR`
//! response and never terminate the stream.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, ToSocketAddrs};

use crate::cnn::ModelParams;
use crate::correlator::{critical_points, g3_map};
use crate::error::{Error, Result};
use crate::source::DetectionRecord;
use crate::theory::baseline_classify;

/// Which classifier backs the verdict line.
pub enum ClassifierKind {
    /// Analytic threshold baseline on the window's critical values.
    Baseline,
    /// Trained network; the baseline critical values are still reported.
    Cnn(Box<ModelParams>),
}

pub struct StreamConfig {
    pub window_size: usize,
    pub emit_every: u64,
    pub tau_max: u8,
    /// Largest forward jump in advisory bin indices that will be zero-filled.
    pub max_gap: u64,
    pub classifier: ClassifierKind,
}

impl StreamConfig {
    pub fn new(classifier: ClassifierKind) -> StreamConfig {
        StreamConfig {
            window_size: 10_000,
            emit_every: 1_000,
            tau_max: 16,
            max_gap: 100_000,
            classifier,
        }
    }

    /// Smallest window the correlator accepts.
    pub fn min_bins(&self) -> u64 {
        2 * self.tau_max as u64 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size as u64 <= 2 * self.tau_max as u64 {
            return Err(Error::InvalidArgument(format!(
                "window of {} bins cannot cover delays up to {}",
                self.window_size, self.tau_max
            )));
        }
        if self.emit_every == 0 || self.emit_every > self.window_size as u64 {
            return Err(Error::InvalidArgument(format!(
                "emission period {} must lie in 1..={}",
                self.emit_every, self.window_size
            )));
        }
        Ok(())
    }
}

/// Sliding window over the most recent pulses.
pub struct WindowState {
    d1: VecDeque<u16>,
    d2: VecDeque<u16>,
    d3: VecDeque<u16>,
    capacity: usize,
    /// Total bins ingested over the connection (monotone).
    bins_seen: u64,
}

impl WindowState {
    pub fn new(capacity: usize) -> WindowState {
        WindowState {
            d1: VecDeque::with_capacity(capacity),
            d2: VecDeque::with_capacity(capacity),
            d3: VecDeque::with_capacity(capacity),
            capacity,
            bins_seen: 0,
        }
    }

    pub fn bins_seen(&self) -> u64 {
        self.bins_seen
    }

    pub fn len(&self) -> usize {
        self.d1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d1.is_empty()
    }

    pub fn push(&mut self, d1: u16, d2: u16, d3: u16) {
        if self.d1.len() == self.capacity {
            self.d1.pop_front();
            self.d2.pop_front();
            self.d3.pop_front();
        }
        self.d1.push_back(d1);
        self.d2.push_back(d2);
        self.d3.push_back(d3);
        self.bins_seen += 1;
    }

    /// Window contents as a detector record, oldest bin first.
    pub fn to_record(&self) -> DetectionRecord {
        DetectionRecord::from_streams(
            self.d1.iter().copied().collect(),
            self.d2.iter().copied().collect(),
            self.d3.iter().copied().collect(),
        )
    }

    /// Ingested-bin index range `[first, last]` covered by the window.
    pub fn bin_range(&self) -> (u64, u64) {
        (self.bins_seen - self.len() as u64, self.bins_seen - 1)
    }
}

/// One parsed input line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputLine {
    Event { bin: u64, d1: u32, d2: u32, d3: u32 },
    Flush,
    Quit,
}

/// Parses one protocol line; the error token feeds the `ERR` response.
pub fn parse_event(line: &str) -> std::result::Result<InputLine, &'static str> {
    let mut parts = line.split_ascii_whitespace();
    match parts.next() {
        Some("EVT") => {
            let mut field = || parts.next().ok_or("bad-event");
            let bin: u64 = field()?.parse().map_err(|_| "bad-event")?;
            let d1: u32 = field()?.parse().map_err(|_| "bad-event")?;
            let d2: u32 = field()?.parse().map_err(|_| "bad-event")?;
            let d3: u32 = field()?.parse().map_err(|_| "bad-event")?;
            if parts.next().is_some() {
                return Err("bad-event");
            }
            Ok(InputLine::Event { bin, d1, d2, d3 })
        }
        Some("FLUSH") if parts.next().is_none() => Ok(InputLine::Flush),
        Some("QUIT") if parts.next().is_none() => Ok(InputLine::Quit),
        Some(_) => Err("bad-line"),
        None => Err("empty-line"),
    }
}

/// Classifies the current window and formats the verdict line. Degenerate
/// windows (a detector saw nothing) yield the `UNDETERMINED` form.
pub fn classify_window(state: &WindowState, config: &StreamConfig) -> String {
    let (first, last) = state.bin_range();
    let undetermined = || format!("CLS {first} {last} UNDETERMINED 0 0 0 0 nan nan");

    let record = state.to_record();
    let map = match g3_map(&record, config.tau_max) {
        Ok(map) => map,
        Err(_) => return undetermined(),
    };
    let Ok(cp) = critical_points(&map) else {
        return undetermined();
    };

    let (class, scores) = match &config.classifier {
        ClassifierKind::Baseline => {
            let verdict = baseline_classify(cp.g2_zero_est, cp.g3_zero);
            let mut scores = [0.0f64; 4];
            scores[verdict.photon_class.index()] = 1.0;
            (verdict.photon_class, scores)
        }
        ClassifierKind::Cnn(params) => match params.predict(&map) {
            Ok((class, scores)) => (class, scores.0),
            Err(_) => return undetermined(),
        },
    };

    format!(
        "CLS {first} {last} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
        class.code(),
        scores[0],
        scores[1],
        scores[2],
        scores[3],
        cp.g3_zero,
        cp.g2_zero_est
    )
}

enum Flow {
    Continue,
    Quit,
}

struct Session<'a> {
    config: &'a StreamConfig,
    state: WindowState,
    last_bin: Option<u64>,
}

impl<'a> Session<'a> {
    fn new(config: &'a StreamConfig) -> Session<'a> {
        Session {
            config,
            state: WindowState::new(config.window_size),
            last_bin: None,
        }
    }

    fn ingest_bin(
        &mut self,
        d1: u16,
        d2: u16,
        d3: u16,
        out: &mut impl Write,
    ) -> std::io::Result<()> {
        self.state.push(d1, d2, d3);
        let seen = self.state.bins_seen();
        if seen >= self.config.min_bins() && seen % self.config.emit_every == 0 {
            writeln!(out, "{}", classify_window(&self.state, self.config))?;
        }
        Ok(())
    }

    fn handle(&mut self, raw: &str, out: &mut impl Write) -> std::io::Result<Flow> {
        let line = raw.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            return Ok(Flow::Continue);
        }
        match parse_event(line) {
            Ok(InputLine::Event { bin, d1, d2, d3 }) => {
                if d1 > u16::MAX as u32 || d2 > u16::MAX as u32 || d3 > u16::MAX as u32 {
                    writeln!(out, "ERR bad-count")?;
                    return Ok(Flow::Continue);
                }
                if let Some(last) = self.last_bin {
                    if bin > last + 1 {
                        let gap = bin - last - 1;
                        if gap > self.config.max_gap {
                            writeln!(out, "ERR gap-too-large")?;
                            return Ok(Flow::Continue);
                        }
                        for _ in 0..gap {
                            self.ingest_bin(0, 0, 0, out)?;
                        }
                    }
                    // Indices at or before the last one are advisory noise;
                    // ingestion order wins.
                }
                self.last_bin = Some(bin.max(self.last_bin.unwrap_or(0)));
                self.ingest_bin(d1 as u16, d2 as u16, d3 as u16, out)?;
                Ok(Flow::Continue)
            }
            Ok(InputLine::Flush) => {
                if self.state.is_empty() {
                    writeln!(out, "ERR empty-window")?;
                } else {
                    writeln!(out, "{}", classify_window(&self.state, self.config))?;
                }
                Ok(Flow::Continue)
            }
            Ok(InputLine::Quit) => Ok(Flow::Quit),
            Err(token) => {
                writeln!(out, "ERR {token}")?;
                Ok(Flow::Continue)
            }
        }
    }
}

/// Runs one session over arbitrary byte streams until QUIT or end of input.
/// Invalid UTF-8 is replaced lossily and rejected per line; the loop itself
/// never fails on malformed input.
pub fn run_session<R: Read, W: Write>(
    config: &StreamConfig,
    reader: R,
    mut writer: W,
) -> Result<()> {
    config.validate()?;
    let mut session = Session::new(config);
    let mut reader = BufReader::new(reader);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| Error::io("<stream>", e))?;
        if n == 0 {
            break;
        }
        let line = String::from_utf8_lossy(&buf);
        match session
            .handle(&line, &mut writer)
            .map_err(|e| Error::io("<stream>", e))?
        {
            Flow::Continue => {
                writer.flush().map_err(|e| Error::io("<stream>", e))?;
            }
            Flow::Quit => break,
        }
    }
    writer.flush().map_err(|e| Error::io("<stream>", e))?;
    Ok(())
}

/// Serves the protocol on standard input/output.
pub fn serve_stdio(config: &StreamConfig) -> Result<()> {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    run_session(config, stdin.lock(), stdout.lock())
}

/// Binds a TCP listener and serves one client at a time; a client
/// disconnect returns to the accept loop.
pub fn serve_tcp(config: &StreamConfig, addr: impl ToSocketAddrs) -> Result<()> {
    config.validate()?;
    let listener = TcpListener::bind(addr).map_err(|e| Error::io("<listen>", e))?;
    eprintln!(
        "listening on {}",
        listener
            .local_addr()
            .map(|a| a.to_string())
            .unwrap_or_else(|_| "<unknown>".into())
    );
    loop {
        let (stream, peer) = listener.accept().map_err(|e| Error::io("<accept>", e))?;
        eprintln!("client {peer} connected");
        let reader = stream.try_clone().map_err(|e| Error::io("<client>", e))?;
        if let Err(err) = run_session(config, reader, stream) {
            eprintln!("client {peer} session ended: {err}");
        } else {
            eprintln!("client {peer} disconnected");
        }
    }
}
