//! Text serialization of [`MlpParams`].
//!
//! ```text
//! robust-lr-mlp v1
//! activation relu
//! classes 4
//! layers 3
//! dense <out> <in>
//! <out rows of `in` space-separated weights>
//! <one row of `out` biases>
//! ...
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Activation, Dense, MlpParams};

pub const MAGIC: &str = "robust-lr-mlp v1";

pub fn to_text(params: &MlpParams) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "activation {}", params.activation());
    let _ = writeln!(out, "classes {}", params.class_count());
    let _ = writeln!(out, "layers {}", params.layers().len());
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    for l in params.layers() {
        let _ = writeln!(out, "dense {} {}", l.out_dim(), l.in_dim());
        for row in l.weight.iter_rows() {
            let _ = writeln!(out, "{}", join(row));
        }
        let _ = writeln!(out, "{}", join(&l.bias));
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    path: &'a Path,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l.trim_end_matches('\r'))
            }
            None => Err(Error::parse(self.path, self.last + 1, format!("unexpected end of file, expected {what}"))),
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, self.last, msg)
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next(key)?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.err(format!("expected `{key} ...`")))
    }

    fn count(&mut self, key: &str) -> Result<usize> {
        let v = self.keyed(key)?;
        v.trim().parse().map_err(|_| self.err(format!("bad {key} `{v}`")))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let line = self.next(what)?;
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| self.err(format!("bad number `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != n {
            return Err(self.err(format!("{what}: expected {n} values, found {}", vals.len())));
        }
        Ok(vals)
    }
}

pub fn from_text(text: &str, path: impl AsRef<Path>) -> Result<MlpParams> {
    let path = path.as_ref();
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        path,
        last: 0,
    };
    if lines.next("header")? != MAGIC {
        return Err(lines.err(format!("not a model file (expected `{MAGIC}`)")));
    }
    let act: Activation = lines.keyed("activation")?.trim().parse().map_err(|e: Error| lines.err(e.to_string()))?;
    let classes = lines.count("classes")?;
    let n_layers = lines.count("layers")?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let dims = lines.keyed("dense")?;
        let parts: Vec<usize> = dims
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| lines.err(format!("bad dimension `{t}`"))))
            .collect::<Result<_>>()?;
        let [out, inp] = parts[..] else {
            return Err(lines.err("expected `dense <out> <in>`"));
        };
        let mut w = Vec::with_capacity(out * inp);
        for _ in 0..out {
            w.extend(lines.floats(inp, "weight row")?);
        }
        let bias = lines.floats(out, "bias row")?;
        layers.push(Dense {
            weight: Matrix::from_vec(out, inp, w).map_err(|e| lines.err(e.to_string()))?,
            bias,
        });
    }
    MlpParams::from_layers(layers, act, classes).map_err(|e| lines.err(e.to_string()))
}

pub fn save_model(params: &MlpParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_text(params)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MlpParams::random(3, &[7, 5], 4, Activation::Tanh, &mut rng);
        assert_eq!(from_text(&to_text(&p), "m").unwrap(), p);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(from_text("hello\n", "m"), Err(Error::Parse { line: 1, .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let text = to_text(&MlpParams::random(2, &[3], 2, Activation::Relu, &mut rng));
        let cut: String = text.lines().take(7).map(|l| format!("{l}\n")).collect();
        assert!(from_text(&cut, "m").is_err());
    }
}
