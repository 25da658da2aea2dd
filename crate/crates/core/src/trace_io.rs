//! CSV input and output.
//!
//! Floats are written with nine significant digits in exponent form so that
//! identical runs produce identical bytes.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::ensemble::TimeTrace;
use crate::error::{Error, Result};
use crate::liouvillian::{CollectivePopulations, Port};
use crate::sweep::SweepMap;

/// Nine significant digits; negative zero prints as zero.
pub fn fmt_float(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.8e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            reason: format!("{kind:?}"),
        },
    }
}

/// Reads a `time_ns,counts[,port]` trace. With a port column, `port` selects
/// the rows to keep; it is required when more than one port is present.
pub fn load_trace(path: &Path, port: Option<Port>) -> Result<TimeTrace> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let (Some(ti), Some(ci)) = (col("time_ns"), col("counts")) else {
        return Err(parse_err(1, "header must contain `time_ns` and `counts`".into()));
    };
    let pi = col("port");

    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut seen_port: Option<Port> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |i: usize, name: &str| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("bad {name} value `{s}`")))
        };
        if let Some(pi) = pi {
            let s = rec.get(pi).unwrap_or("");
            let p = s
                .parse::<u8>()
                .ok()
                .and_then(Port::from_number)
                .ok_or_else(|| parse_err(line, format!("bad port `{s}` (expected 1 or 2)")))?;
            match port {
                Some(want) if want != p => continue,
                Some(_) => {}
                None => match seen_port {
                    Some(q) if q != p => {
                        return Err(parse_err(line, "several ports present; select one".into()));
                    }
                    _ => seen_port = Some(p),
                },
            }
        }
        let t = num(ti, "time_ns")?;
        let c = num(ci, "counts")?;
        if let Some(&prev) = times.last() {
            if !(t > prev) {
                return Err(parse_err(line, format!("time {t} does not increase (previous {prev})")));
            }
        }
        times.push(t);
        values.push(c);
    }
    if times.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    TimeTrace::new(times, values)
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>> {
    File::create(path).map(std::io::BufWriter::new).map_err(io_err(path))
}

fn finish(path: &Path, mut w: std::io::BufWriter<File>) -> Result<()> {
    w.flush().map_err(io_err(path))
}

fn write_line(path: &Path, w: &mut impl Write, fields: &[String]) -> Result<()> {
    writeln!(w, "{}", fields.join(",")).map_err(io_err(path))
}

/// Single trace: `time_ns,intensity_port1,intensity_port2,pop_sup,pop_sub,pop_ee,pop_gg`.
/// Population columns are left empty when not available.
pub fn write_simulation(
    path: &Path,
    times: &[f64],
    port1: Option<&[f64]>,
    port2: Option<&[f64]>,
    populations: Option<&[CollectivePopulations]>,
) -> Result<()> {
    let mut w = create(path)?;
    write_line(
        path,
        &mut w,
        &["time_ns", "intensity_port1", "intensity_port2", "pop_sup", "pop_sub", "pop_ee", "pop_gg"].map(String::from),
    )?;
    let opt = |v: Option<&[f64]>, k: usize| v.map_or_else(String::new, |v| fmt_float(v[k]));
    for (k, &t) in times.iter().enumerate() {
        let mut row = vec![fmt_float(t), opt(port1, k), opt(port2, k)];
        match populations {
            Some(p) => row.extend([p[k].p_sup, p[k].p_sub, p[k].p_ee, p[k].p_gg].map(fmt_float)),
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        write_line(path, &mut w, &row)?;
    }
    finish(path, w)
}

/// Long format, row-major over detuning then port then time.
pub fn write_sweep(path: &Path, map: &SweepMap) -> Result<()> {
    let mut w = create(path)?;
    let mut header = vec!["detuning_ghz", "time_ns", "port", "intensity"];
    if map.populations.is_some() {
        header.extend(["pop_sup", "pop_sub", "pop_ee"]);
    }
    let header: Vec<String> = header.into_iter().map(String::from).collect();
    write_line(path, &mut w, &header)?;
    for (row, &d) in map.detunings.iter().enumerate() {
        for (pi, port) in map.ports.iter().enumerate() {
            for (k, &t) in map.times.iter().enumerate() {
                let mut fields = vec![
                    fmt_float(d),
                    fmt_float(t),
                    port.number().to_string(),
                    fmt_float(map.intensity[pi][row][k]),
                ];
                if let Some(p) = &map.populations {
                    fields.extend([p.p_sup[row][k], p.p_sub[row][k], p.p_ee[row][k]].map(fmt_float));
                }
                write_line(path, &mut w, &fields)?;
            }
        }
    }
    finish(path, w)
}

/// `detuning_ghz,peak_time_ns`; rows without a predicted peak are omitted.
pub fn write_peaks(path: &Path, map: &SweepMap) -> Result<()> {
    let mut w = create(path)?;
    write_line(path, &mut w, &["detuning_ghz", "peak_time_ns"].map(String::from))?;
    for (&d, t) in map.detunings.iter().zip(&map.peak_times) {
        if let Some(t) = t {
            write_line(path, &mut w, &[fmt_float(d), fmt_float(*t)])?;
        }
    }
    finish(path, w)
}
