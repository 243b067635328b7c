use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use super::series::{LabeledDataset, MultivariateSeries};
use crate::error::{Error, Result};

/// Parses a `.ts` archive file: `@`-prefixed header directives (case
/// insensitive) followed by `@data` and one sample per line, channels
/// separated by `:`, values by `,`, class label last.
///
/// Labels are mapped to `0..C` in the order the `@classLabel` directive
/// lists them. Unequal-length samples are zero-padded to the longest one.
pub fn parse_ts(reader: impl Read) -> Result<LabeledDataset> {
    let reader = BufReader::new(reader);
    let mut name = String::new();
    let mut declared_dims: Option<usize> = None;
    let mut class_names: Option<Vec<String>> = None;
    let mut in_data = false;
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut channels: Option<usize> = None;

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            let parse_err = |message: String| Error::Parse {
                line: lineno,
                message,
            };
            if !line.starts_with('@') {
                return Err(parse_err(format!(
                    "expected a header directive, found {line:?}"
                )));
            }
            let mut parts = line[1..].split_whitespace();
            let key = parts.next().unwrap_or_default().to_ascii_lowercase();
            let rest: Vec<&str> = parts.collect();
            match key.as_str() {
                "problemname" => name = rest.join(" "),
                "dimensions" => {
                    let d = rest
                        .first()
                        .and_then(|v| v.parse::<usize>().ok())
                        .filter(|&d| d > 0)
                        .ok_or_else(|| parse_err("@dimensions needs a positive integer".into()))?;
                    declared_dims = Some(d);
                }
                "classlabel" => {
                    match rest.first().map(|v| v.to_ascii_lowercase()) {
                        Some(ref v) if v == "true" => {}
                        _ => {
                            return Err(parse_err(
                                "only labelled classification files are supported".into(),
                            ))
                        }
                    }
                    let names: Vec<String> = rest[1..].iter().map(|s| s.to_string()).collect();
                    if names.len() < 2 {
                        return Err(parse_err(
                            "@classLabel must declare at least two labels".into(),
                        ));
                    }
                    class_names = Some(names);
                }
                "missing" => {
                    if rest.first().map(|v| v.eq_ignore_ascii_case("true")) == Some(true) {
                        return Err(parse_err("missing values are not supported".into()));
                    }
                }
                "data" => {
                    if class_names.is_none() {
                        return Err(parse_err("@data reached before @classLabel".into()));
                    }
                    in_data = true;
                }
                // @timeStamps, @univariate, @equalLength, @seriesLength and
                // anything else are informational.
                _ => {}
            }
            continue;
        }

        let parse_err = |message: String| Error::Parse {
            line: lineno,
            message,
        };
        let class_names = class_names.as_ref().expect("checked at @data");
        let fields: Vec<&str> = line.split(':').collect();
        if fields.len() < 2 {
            return Err(parse_err(
                "data line needs at least one channel and a label".into(),
            ));
        }
        let (label, dims) = fields.split_last().expect("non-empty");
        let label = label.trim();
        let class = class_names
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        let expected = channels.or(declared_dims).unwrap_or(dims.len());
        if dims.len() != expected {
            return Err(parse_err(format!(
                "expected {expected} channels, found {}",
                dims.len()
            )));
        }
        channels = Some(expected);
        let mut values = Vec::with_capacity(dims.len());
        for (c, dim) in dims.iter().enumerate() {
            let mut row = Vec::new();
            for tok in dim.split(',') {
                let tok = tok.trim();
                if tok == "?" || tok.eq_ignore_ascii_case("nan") {
                    return Err(parse_err(format!("missing value in channel {c}")));
                }
                let v: f64 = tok
                    .parse()
                    .map_err(|_| parse_err(format!("invalid number {tok:?} in channel {c}")))?;
                if !v.is_finite() {
                    return Err(parse_err(format!("non-finite value in channel {c}")));
                }
                row.push(v);
            }
            values.push(row);
        }
        let series = MultivariateSeries::new(values).map_err(|e| parse_err(e.to_string()))?;
        samples.push(series);
        labels.push(class);
    }

    let class_names = class_names.ok_or_else(|| Error::Parse {
        line: 0,
        message: "no @classLabel directive".into(),
    })?;
    if !in_data {
        return Err(Error::Parse {
            line: 0,
            message: "no @data section".into(),
        });
    }
    let max_len = samples.iter().map(|s| s.len()).max().unwrap_or(0);
    let samples = samples
        .iter()
        .map(|s| s.padded(max_len))
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(name, class_names, samples, labels)
}

pub fn read_ts_file(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    parse_ts(file).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Canonical `.ts` text. Only valid (unpadded) positions are written, so a
/// parse of the output reproduces the dataset exactly.
pub fn serialize_ts(dataset: &LabeledDataset) -> String {
    let mut out = String::new();
    let equal = dataset
        .samples()
        .iter()
        .all(|s| s.len() == dataset.max_len());
    let _ = writeln!(out, "@problemName {}", dataset.name());
    let _ = writeln!(out, "@timeStamps false");
    let _ = writeln!(out, "@missing false");
    let _ = writeln!(out, "@univariate {}", dataset.channels() == 1);
    let _ = writeln!(out, "@dimensions {}", dataset.channels());
    let _ = writeln!(out, "@equalLength {equal}");
    if equal {
        let _ = writeln!(out, "@seriesLength {}", dataset.max_len());
    }
    let _ = writeln!(out, "@classLabel true {}", dataset.class_names().join(" "));
    let _ = writeln!(out, "@data");
    for (s, &label) in dataset.samples().iter().zip(dataset.labels()) {
        for c in 0..s.channels() {
            let row: Vec<String> = s.valid(c).iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&row.join(","));
            out.push(':');
        }
        out.push_str(&dataset.class_names()[label]);
        out.push('\n');
    }
    out
}

pub fn write_ts_file(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serialize_ts(dataset)).map_err(|e| Error::file(path, e))
}
