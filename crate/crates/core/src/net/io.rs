//! Plain-text parameter files.
//!
//! ```text
//! rwinit-params 1
//! seed 42
//! nonlinearity tanh
//! output softmax
//! g 1.2
//! widths 5 4 3
//! gains 1.2 1.2
//! weights 1 4 5
//! <4 lines of 5 numbers>
//! bias 1 4
//! <1 line of 4 numbers>
//! ...
//! ```
//!
//! Numbers are written in Rust's shortest round-trip form, so a save/load
//! cycle is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

use super::{NetworkParams, Nonlinearity, OutputActivation};

const MAGIC: &str = "rwinit-params";
const VERSION: u32 = 1;

pub fn write_params<W: Write>(params: &NetworkParams, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{MAGIC} {VERSION}")?;
    writeln!(w, "seed {}", params.seed())?;
    writeln!(w, "nonlinearity {}", params.nonlinearity())?;
    writeln!(w, "output {}", params.output_activation().name())?;
    writeln!(w, "g {:e}", params.g())?;
    writeln!(w, "widths {}", join(params.widths().iter().map(|x| x.to_string())))?;
    writeln!(w, "gains {}", join(params.gains().iter().map(|x| format!("{x:e}"))))?;
    for d in 1..=params.depth() {
        let m = params.weight(d);
        writeln!(w, "weights {d} {} {}", m.rows(), m.cols())?;
        for i in 0..m.rows() {
            writeln!(w, "{}", join(m.row(i).iter().map(|x| format!("{x:e}"))))?;
        }
        writeln!(w, "bias {d} {}", params.bias(d).len())?;
        writeln!(w, "{}", join(params.bias(d).iter().map(|x| format!("{x:e}"))))?;
    }
    Ok(())
}

pub fn save_params(params: &NetworkParams, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_params(params, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<NetworkParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(BufReader::new(file))
}

pub fn read_params<R: BufRead>(r: R) -> Result<NetworkParams> {
    let mut lines = Lines { inner: r.lines(), line: 0 };

    let header = lines.fields(MAGIC)?;
    if header.first().map(String::as_str) != Some(&VERSION.to_string()) {
        return Err(lines.error("unsupported parameter file version"));
    }
    let seed = lines.single("seed")?;
    let nonlinearity: Nonlinearity = lines.single::<String>("nonlinearity")?.parse()?;
    let output: OutputActivation = lines.single::<String>("output")?.parse()?;
    let g = lines.single("g")?;
    let widths: Vec<usize> = lines.parsed_fields("widths")?;
    let gains: Vec<f64> = lines.parsed_fields("gains")?;
    let depth = widths.len().saturating_sub(1);

    let mut weights = Vec::with_capacity(depth);
    let mut biases = Vec::with_capacity(depth);
    for d in 1..=depth {
        let dims: Vec<usize> = lines.parsed_fields("weights")?;
        if dims != [d, widths[d], widths[d - 1]] {
            return Err(lines.error(&format!("weights header for layer {d} does not match widths")));
        }
        let mut data = Vec::with_capacity(widths[d] * widths[d - 1]);
        for _ in 0..widths[d] {
            let row: Vec<f64> = lines.parsed_raw()?;
            if row.len() != widths[d - 1] {
                return Err(lines.error("weight row has the wrong length"));
            }
            data.extend(row);
        }
        weights.push(Matrix::from_vec(widths[d], widths[d - 1], data)?);
        let dims: Vec<usize> = lines.parsed_fields("bias")?;
        if dims != [d, widths[d]] {
            return Err(lines.error(&format!("bias header for layer {d} does not match widths")));
        }
        let b: Vec<f64> = lines.parsed_raw()?;
        if b.len() != widths[d] {
            return Err(lines.error("bias row has the wrong length"));
        }
        biases.push(b);
    }
    NetworkParams::from_parts(widths, weights, biases, gains, g, nonlinearity, output, seed)
}

fn join(items: impl Iterator<Item = String>) -> String {
    items.collect::<Vec<_>>().join(" ")
}

struct Lines<I> {
    inner: I,
    line: usize,
}

impl<I: Iterator<Item = std::io::Result<String>>> Lines<I> {
    fn error(&self, msg: &str) -> Error {
        Error::invalid(format!("parameter file line {}: {msg}", self.line))
    }

    fn raw(&mut self) -> Result<Vec<String>> {
        self.line += 1;
        match self.inner.next() {
            Some(Ok(l)) => Ok(l.split_whitespace().map(str::to_owned).collect()),
            Some(Err(e)) => Err(self.error(&e.to_string())),
            None => Err(self.error("unexpected end of file")),
        }
    }

    fn fields(&mut self, key: &str) -> Result<Vec<String>> {
        let mut f = self.raw()?;
        if f.first().map(String::as_str) != Some(key) {
            return Err(self.error(&format!("expected '{key}'")));
        }
        f.remove(0);
        Ok(f)
    }

    fn single<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let f = self.fields(key)?;
        match f.as_slice() {
            [v] => v.parse().map_err(|_| self.error(&format!("bad value for '{key}'"))),
            _ => Err(self.error(&format!("'{key}' takes one value"))),
        }
    }

    fn parsed_fields<T: std::str::FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let f = self.fields(key)?;
        self.parse_all(&f)
    }

    fn parsed_raw<T: std::str::FromStr>(&mut self) -> Result<Vec<T>> {
        let f = self.raw()?;
        self.parse_all(&f)
    }

    fn parse_all<T: std::str::FromStr>(&self, fields: &[String]) -> Result<Vec<T>> {
        fields
            .iter()
            .map(|s| s.parse().map_err(|_| self.error(&format!("cannot parse '{s}'"))))
            .collect()
    }
}
