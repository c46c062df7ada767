//! Line-oriented text log: a version header followed by one comma-separated
//! record per line.
//!
//! ```text
//! #imujoint-log v1 t_us,kind,index,sub,values...
//! 1000,imu,2,1,gx,gy,gz,ax,ay,az
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "v1";
const MAGIC: &str = "#imujoint-log";
const COLUMNS: &str = "t_us,kind,index,sub,values...";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RecordKind {
    /// index = link, sub = slot; gyro xyz (rad/s) then accel xyz (m/s^2).
    Imu,
    /// index = joint coordinate; measured position (rad).
    JointPos,
    /// Measured base orientation as a rotation vector (rad).
    BaseOrientation,
    /// index = generalized coordinate; position, velocity, acceleration.
    Truth,
    /// index = coordinate (or stacked bias component), sub = [`Quantity`].
    Estimate,
}

impl RecordKind {
    pub fn tag(self) -> &'static str {
        match self {
            RecordKind::Imu => "imu",
            RecordKind::JointPos => "joint_pos",
            RecordKind::BaseOrientation => "base_orientation",
            RecordKind::Truth => "truth",
            RecordKind::Estimate => "estimate",
        }
    }

    pub fn value_count(self) -> usize {
        match self {
            RecordKind::Imu => 6,
            RecordKind::JointPos | RecordKind::Estimate => 1,
            RecordKind::BaseOrientation | RecordKind::Truth => 3,
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        [RecordKind::Imu, RecordKind::JointPos, RecordKind::BaseOrientation, RecordKind::Truth, RecordKind::Estimate]
            .into_iter()
            .find(|k| k.tag() == tag)
    }
}

/// `sub` codes of estimate records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantity {
    Position = 0,
    Velocity = 1,
    Acceleration = 2,
    Bias = 3,
}

impl Quantity {
    pub fn code(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub time_us: i64,
    pub kind: RecordKind,
    pub index: usize,
    pub sub: usize,
    pub values: Vec<f64>,
}

impl LogRecord {
    pub fn time(&self) -> f64 {
        self.time_us as f64 * 1e-6
    }
}

/// Seconds to integer microseconds.
pub fn to_micros(t: f64) -> i64 {
    (t * 1e6).round() as i64
}

pub struct LogWriter<W: Write> {
    out: W,
    last_time: Option<i64>,
}

impl LogWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        LogWriter::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> LogWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{MAGIC} {FORMAT_VERSION} {COLUMNS}")?;
        Ok(Self { out, last_time: None })
    }

    pub fn write(&mut self, record: &LogRecord) -> Result<()> {
        if record.values.len() != record.kind.value_count() {
            return Err(Error::InvalidInput(format!(
                "{} record needs {} values, got {}",
                record.kind.tag(),
                record.kind.value_count(),
                record.values.len()
            )));
        }
        if self.last_time.is_some_and(|t| record.time_us < t) {
            return Err(Error::InvalidInput(format!("timestamp {} goes backwards", record.time_us)));
        }
        self.last_time = Some(record.time_us);
        write!(self.out, "{},{},{},{}", record.time_us, record.kind.tag(), record.index, record.sub)?;
        for v in &record.values {
            write!(self.out, ",{v:.16e}")?;
        }
        writeln!(self.out)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Streaming reader yielding one record per data line.
pub struct LogReader<R: BufRead> {
    input: R,
    line_no: usize,
    last_time: Option<i64>,
    buf: String,
}

pub fn parse_log(path: &Path) -> Result<LogReader<BufReader<File>>> {
    LogReader::new(BufReader::new(File::open(path)?))
}

impl<R: BufRead> LogReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut header = String::new();
        input.read_line(&mut header)?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(Error::MalformedLine { line: 1, reason: "missing log header".into() });
        }
        match parts.next() {
            Some(FORMAT_VERSION) => {}
            other => return Err(Error::FormatVersionMismatch { found: other.unwrap_or("").to_string() }),
        }
        Ok(Self { input, line_no: 1, last_time: None, buf: String::new() })
    }

    fn parse_line(&self, line: &str) -> Result<LogRecord> {
        let bad = |reason: String| Error::MalformedLine { line: self.line_no, reason };
        let mut fields = line.split(',');
        let mut next = |what: &str| fields.next().ok_or_else(|| bad(format!("missing {what}")));
        let time_us = next("timestamp")?.parse::<i64>().map_err(|e| bad(format!("timestamp: {e}")))?;
        let tag = next("kind")?;
        let kind = RecordKind::from_tag(tag).ok_or_else(|| bad(format!("unknown record kind {tag:?}")))?;
        let index = next("index")?.parse::<usize>().map_err(|e| bad(format!("index: {e}")))?;
        let sub = next("sub")?.parse::<usize>().map_err(|e| bad(format!("sub: {e}")))?;
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|e| bad(format!("value {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != kind.value_count() {
            return Err(bad(format!("{} record needs {} values, got {}", kind.tag(), kind.value_count(), values.len())));
        }
        Ok(LogRecord { time_us, kind, index, sub, values })
    }
}

impl<R: BufRead> Iterator for LogReader<R> {
    type Item = Result<LogRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line_no += 1;
            let line = self.buf.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                continue;
            }
            let record = match self.parse_line(line) {
                Ok(r) => r,
                Err(e) => return Some(Err(e)),
            };
            if self.last_time.is_some_and(|t| record.time_us < t) {
                return Some(Err(Error::NonMonotoneTimestamp { line: self.line_no }));
            }
            self.last_time = Some(record.time_us);
            return Some(Ok(record));
        }
    }
}

/// Groups consecutive records sharing a timestamp.
pub fn group_by_time<I>(records: I) -> impl Iterator<Item = Result<(i64, Vec<LogRecord>)>>
where
    I: Iterator<Item = Result<LogRecord>>,
{
    let mut records = records.peekable();
    std::iter::from_fn(move || {
        let first = match records.next()? {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        let t = first.time_us;
        let mut group = vec![first];
        while let Some(Ok(r)) = records.peek() {
            if r.time_us != t {
                break;
            }
            group.push(records.next().expect("peeked").expect("peeked ok"));
        }
        Some(Ok((t, group)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn read_all(text: &str) -> Result<Vec<LogRecord>> {
        LogReader::new(text.as_bytes())?.collect()
    }

    #[test]
    fn empty_log_yields_nothing() {
        let text = format!("{MAGIC} {FORMAT_VERSION} {COLUMNS}\n");
        assert!(read_all(&text).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let kinds = [RecordKind::Imu, RecordKind::JointPos, RecordKind::BaseOrientation, RecordKind::Truth, RecordKind::Estimate];
        let mut t = 0i64;
        let records: Vec<LogRecord> = (0..10_000)
            .map(|_| {
                t += rng.random_range(0..3);
                let kind = kinds[rng.random_range(0..kinds.len())];
                let values = (0..kind.value_count())
                    .map(|_| {
                        let mantissa: f64 = rng.random_range(-1.0..1.0);
                        mantissa * 10f64.powi(rng.random_range(-300..300))
                    })
                    .collect();
                LogRecord { time_us: t, kind, index: rng.random_range(0..20), sub: rng.random_range(0..4), values }
            })
            .collect();
        let mut w = LogWriter::new(Vec::new()).unwrap();
        for r in &records {
            w.write(r).unwrap();
        }
        let bytes = w.finish().unwrap();
        let back = read_all(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            assert_eq!(a.time_us, b.time_us);
            assert_eq!(a.kind, b.kind);
            assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn shuffled_timestamps_are_rejected() {
        let text = format!("{MAGIC} {FORMAT_VERSION} {COLUMNS}\n5,joint_pos,0,0,1.0\n3,joint_pos,0,0,1.0\n");
        let res = read_all(&text);
        assert!(matches!(res, Err(Error::NonMonotoneTimestamp { line: 3 })));
    }

    #[test]
    fn version_and_syntax_errors() {
        assert!(matches!(read_all(&format!("{MAGIC} v9 {COLUMNS}\n")), Err(Error::FormatVersionMismatch { .. })));
        let text = format!("{MAGIC} {FORMAT_VERSION} {COLUMNS}\n1,joint_pos,0,0,1.0\n2,imu,0,0,1.0\n");
        assert!(matches!(read_all(&text), Err(Error::MalformedLine { line: 3, .. })));
        let text = format!("{MAGIC} {FORMAT_VERSION} {COLUMNS}\n1,warp,0,0,1.0\n");
        assert!(matches!(read_all(&text), Err(Error::MalformedLine { line: 2, .. })));
    }

    #[test]
    fn grouping_by_timestamp() {
        let text = format!("{MAGIC} {FORMAT_VERSION} {COLUMNS}\n1,joint_pos,0,0,1\n1,joint_pos,1,0,2\n2,joint_pos,0,0,3\n");
        let groups: Vec<_> = group_by_time(LogReader::new(text.as_bytes()).unwrap()).collect::<Result<_>>().unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].1.len(), 2);
    }
}
