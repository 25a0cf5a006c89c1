//! JSON-lines metric ingestion and tumbling-window alignment.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default alignment window in seconds.
pub const DEFAULT_WINDOW: f64 = 10.0;

/// Fraction of malformed lines above which a metrics file is rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    TupleRateIn,
    TupleRateOut,
    Cputil,
    Caputil,
    Memutil,
    Gctime,
    Backpressure,
}

impl MetricKind {
    pub const ALL: [MetricKind; 7] = [
        MetricKind::TupleRateIn,
        MetricKind::TupleRateOut,
        MetricKind::Cputil,
        MetricKind::Caputil,
        MetricKind::Memutil,
        MetricKind::Gctime,
        MetricKind::Backpressure,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    /// Seconds since the epoch.
    pub ts: f64,
    pub node: String,
    pub instance: String,
    pub container: u32,
    pub metric: MetricKind,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedMetrics {
    pub samples: Vec<MetricSample>,
    /// Non-empty lines that could not be parsed or carried invalid values.
    pub malformed: usize,
    /// Non-empty lines seen.
    pub lines: usize,
}

/// Parses JSON-lines metric samples, keeping file order.
///
/// Blank lines are ignored. Malformed lines are counted; the input is rejected when
/// more than 10% of the non-empty lines are malformed.
pub fn parse_metrics<R: BufRead>(reader: R) -> Result<ParsedMetrics> {
    let mut out = ParsedMetrics::default();
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.lines += 1;
        match serde_json::from_str::<MetricSample>(line) {
            Ok(s) if s.value >= 0.0 && s.value.is_finite() && s.ts.is_finite() => {
                out.samples.push(s)
            }
            _ => out.malformed += 1,
        }
    }
    if out.lines > 0 && out.malformed as f64 > MAX_MALFORMED_FRACTION * out.lines as f64 {
        return Err(Error::TooManyMalformed {
            malformed: out.malformed,
            total: out.lines,
        });
    }
    if out.malformed > 0 {
        warn!(
            "skipped {} malformed metric lines out of {}",
            out.malformed, out.lines
        );
    }
    Ok(out)
}

/// Opens a metrics file, transparently decompressing gzip input.
pub fn read_metrics_file(path: impl AsRef<Path>) -> Result<ParsedMetrics> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic)?;
    let head = std::io::Cursor::new(magic[..n].to_vec());
    let chained = head.chain(file);
    if n == 2 && magic == [0x1f, 0x8b] {
        parse_metrics(BufReader::new(GzDecoder::new(chained)))
    } else {
        parse_metrics(BufReader::new(chained))
    }
}

pub fn write_metrics<W: std::io::Write>(mut w: W, samples: &[MetricSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// One instance over one tumbling window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedSample {
    pub node: String,
    pub instance: String,
    pub container: u32,
    pub window_start: f64,
    pub tuple_rate_in: f64,
    pub tuple_rate_out: f64,
    pub cputil: f64,
    pub caputil: Option<f64>,
    pub memutil: Option<f64>,
    /// Fraction of the window spent in garbage collection.
    pub gctime: f64,
    /// Fraction of the window the instance was signalling backpressure.
    pub backpressure: f64,
}

#[derive(Default)]
struct Bucket {
    container: u32,
    sums: BTreeMap<MetricKind, (f64, usize)>,
}

/// Buckets samples into tumbling windows aligned to multiples of `window` in epoch time.
///
/// Rates and utilizations are averaged; gctime and backpressure are summed and divided by
/// the window length. Buckets without both `tuple_rate_in` and `cputil` are dropped.
/// Output is ordered by (instance, window_start).
pub fn align(samples: &[MetricSample], window: f64) -> Result<Vec<AlignedSample>> {
    if !(window > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "window must be > 0, got {window}"
        )));
    }
    let mut buckets: BTreeMap<(String, i64, String), Bucket> = BTreeMap::new();
    for s in samples {
        let slot = (s.ts / window).floor() as i64;
        let b = buckets
            .entry((s.instance.clone(), slot, s.node.clone()))
            .or_default();
        b.container = s.container;
        let e = b.sums.entry(s.metric).or_insert((0.0, 0));
        e.0 += s.value;
        e.1 += 1;
    }
    let mut out = Vec::with_capacity(buckets.len());
    let mut clamped = 0usize;
    for ((instance, slot, node), b) in buckets {
        let mean = |k: MetricKind| b.sums.get(&k).map(|(s, n)| s / *n as f64);
        let per_window = |k: MetricKind| b.sums.get(&k).map_or(0.0, |(s, _)| s / window);
        let (Some(rate_in), Some(cputil)) = (mean(MetricKind::TupleRateIn), mean(MetricKind::Cputil))
        else {
            continue;
        };
        let caputil = mean(MetricKind::Caputil).map(|c| {
            if c > 1.05 {
                clamped += 1;
            }
            c.min(1.0)
        });
        out.push(AlignedSample {
            node,
            instance,
            container: b.container,
            window_start: slot as f64 * window,
            tuple_rate_in: rate_in,
            tuple_rate_out: mean(MetricKind::TupleRateOut).unwrap_or(0.0),
            cputil,
            caputil,
            memutil: mean(MetricKind::Memutil),
            gctime: per_window(MetricKind::Gctime),
            backpressure: per_window(MetricKind::Backpressure),
        });
    }
    if clamped > 0 {
        warn!("{clamped} windows reported caputil above 1.05; clamped to 1.0");
    }
    Ok(out)
}

/// Re-expands aligned samples into one raw sample per metric at the window start.
pub fn to_samples(aligned: &[AlignedSample], window: f64) -> Vec<MetricSample> {
    let mut out = Vec::with_capacity(aligned.len() * 7);
    for a in aligned {
        let mut push = |metric, value| {
            out.push(MetricSample {
                ts: a.window_start,
                node: a.node.clone(),
                instance: a.instance.clone(),
                container: a.container,
                metric,
                value,
            })
        };
        push(MetricKind::TupleRateIn, a.tuple_rate_in);
        push(MetricKind::TupleRateOut, a.tuple_rate_out);
        push(MetricKind::Cputil, a.cputil);
        if let Some(c) = a.caputil {
            push(MetricKind::Caputil, c);
        }
        if let Some(m) = a.memutil {
            push(MetricKind::Memutil, m);
        }
        push(MetricKind::Gctime, a.gctime * window);
        push(MetricKind::Backpressure, a.backpressure * window);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(ts: f64, metric: &str, value: f64) -> String {
        format!(
            r#"{{"ts":{ts},"node":"W","instance":"W-0","container":0,"metric":"{metric}","value":{value}}}"#
        )
    }

    #[test]
    fn one_line_one_sample() {
        let text = line(1.0, "cputil", 0.5);
        let parsed = parse_metrics(text.as_bytes()).unwrap();
        assert_eq!(parsed.samples.len(), 1);
        assert_eq!(parsed.samples[0].metric, MetricKind::Cputil);
        assert_eq!(parsed.malformed, 0);
    }

    #[test]
    fn few_malformed_lines_are_tolerated() {
        let mut lines: Vec<String> = (0..19).map(|i| line(i as f64, "cputil", 0.1)).collect();
        lines.push("{not json".into());
        let parsed = parse_metrics(lines.join("\n").as_bytes()).unwrap();
        assert_eq!(parsed.samples.len(), 19);
        assert_eq!(parsed.malformed, 1);
    }

    #[test]
    fn too_many_malformed_lines_rejected() {
        let mut lines: Vec<String> = (0..8).map(|i| line(i as f64, "cputil", 0.1)).collect();
        lines.push("garbage".into());
        lines.push(line(9.0, "not_a_metric", 1.0));
        lines.push(line(10.0, "cputil", -1.0));
        let err = parse_metrics(lines.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            Error::TooManyMalformed {
                malformed: 3,
                total: 11
            }
        ));
    }

    #[test]
    fn gzip_input_is_detected() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = std::env::temp_dir().join(format!("sc-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.jsonl.gz");
        let mut enc = GzEncoder::new(File::create(&path).unwrap(), flate2::Compression::fast());
        writeln!(enc, "{}", line(0.0, "cputil", 0.2)).unwrap();
        enc.finish().unwrap();
        let parsed = read_metrics_file(&path).unwrap();
        assert_eq!(parsed.samples.len(), 1);
        let plain = dir.join("m.jsonl");
        std::fs::write(&plain, line(0.0, "cputil", 0.2)).unwrap();
        assert_eq!(read_metrics_file(&plain).unwrap().samples.len(), 1);
    }

    fn sample(ts: f64, metric: MetricKind, value: f64) -> MetricSample {
        MetricSample {
            ts,
            node: "W".into(),
            instance: "W-0".into(),
            container: 0,
            metric,
            value,
        }
    }

    #[test]
    fn cputil_is_averaged() {
        let s = vec![
            sample(100.0, MetricKind::Cputil, 0.4),
            sample(105.0, MetricKind::Cputil, 0.6),
            sample(101.0, MetricKind::TupleRateIn, 50.0),
        ];
        let a = align(&s, 10.0).unwrap();
        assert_eq!(a.len(), 1);
        assert!((a[0].cputil - 0.5).abs() < 1e-12);
        assert_eq!(a[0].window_start, 100.0);
    }

    #[test]
    fn gap_window_is_absent() {
        let mut s = Vec::new();
        for w in [0.0, 10.0, 30.0] {
            s.push(sample(w + 1.0, MetricKind::Cputil, 0.5));
            s.push(sample(w + 1.0, MetricKind::TupleRateIn, 10.0));
        }
        s.push(sample(21.0, MetricKind::Cputil, 0.5));
        let a = align(&s, 10.0).unwrap();
        let starts: Vec<f64> = a.iter().map(|x| x.window_start).collect();
        assert_eq!(starts, vec![0.0, 10.0, 30.0]);
    }

    #[test]
    fn gctime_and_backpressure_are_fractions() {
        let s = vec![
            sample(0.0, MetricKind::Cputil, 0.5),
            sample(0.0, MetricKind::TupleRateIn, 5.0),
            sample(1.0, MetricKind::Gctime, 0.5),
            sample(6.0, MetricKind::Gctime, 0.5),
            sample(2.0, MetricKind::Backpressure, 2.5),
            sample(3.0, MetricKind::Caputil, 1.2),
        ];
        let a = align(&s, 10.0).unwrap();
        assert!((a[0].gctime - 0.1).abs() < 1e-12);
        assert!((a[0].backpressure - 0.25).abs() < 1e-12);
        assert_eq!(a[0].caputil, Some(1.0));
    }

    #[test]
    fn output_sorted_by_instance_then_window() {
        let mut s = Vec::new();
        for (inst, ts) in [("b-0", 20.0), ("a-0", 20.0), ("b-0", 0.0), ("a-0", 0.0)] {
            for m in [MetricKind::Cputil, MetricKind::TupleRateIn] {
                s.push(MetricSample {
                    instance: inst.into(),
                    ..sample(ts, m, 1.0)
                });
            }
        }
        let a = align(&s, 10.0).unwrap();
        let keys: Vec<_> = a
            .iter()
            .map(|x| (x.instance.as_str(), x.window_start))
            .collect();
        assert_eq!(keys, vec![("a-0", 0.0), ("a-0", 20.0), ("b-0", 0.0), ("b-0", 20.0)]);
    }

    #[test]
    fn zero_window_rejected() {
        assert!(align(&[], 0.0).is_err());
    }
}
