//! Flat text serialization: a header line of dimensions followed by
//! whitespace-separated row-major coefficients.

use ndarray::Array2;

use crate::error::{Error, Result};

pub(crate) fn write_blocks(header: &str, blocks: &[Array2<f64>]) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for b in blocks {
        for row in b.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}

pub(crate) fn read_header<'a>(text: &'a str, tag: &str, n_dims: usize) -> Result<(Vec<usize>, std::str::SplitWhitespace<'a>)> {
    let mut lines = text.splitn(2, '\n');
    let header = lines.next().unwrap_or("");
    let mut fields = header.split_whitespace();
    if fields.next() != Some(tag) {
        return Err(Error::Parse(format!("expected '{tag}' header")));
    }
    let dims =
        fields.map(|f| f.parse::<usize>().map_err(|e| Error::Parse(format!("bad dimension '{f}': {e}")))).collect::<Result<Vec<_>>>()?;
    if dims.len() != n_dims {
        return Err(Error::Parse(format!("'{tag}' header needs {n_dims} dimensions, found {}", dims.len())));
    }
    Ok((dims, lines.next().unwrap_or("").split_whitespace()))
}

pub(crate) fn next_value(values: &mut std::str::SplitWhitespace<'_>) -> Result<f64> {
    let v = values.next().ok_or_else(|| Error::Parse("unexpected end of coefficients".into()))?;
    v.parse::<f64>().map_err(|e| Error::Parse(format!("bad coefficient '{v}': {e}")))
}

pub(crate) fn read_blocks(values: &mut std::str::SplitWhitespace<'_>, count: usize, rows: usize, cols: usize) -> Result<Vec<Array2<f64>>> {
    (0..count)
        .map(|_| {
            let data = (0..rows * cols).map(|_| next_value(values)).collect::<Result<Vec<_>>>()?;
            Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Parse(e.to_string()))
        })
        .collect()
}

pub(crate) fn expect_end(values: &mut std::str::SplitWhitespace<'_>) -> Result<()> {
    match values.next() {
        None => Ok(()),
        Some(extra) => Err(Error::Parse(format!("trailing data '{extra}'"))),
    }
}
