//! Transformer block parameters and their on-disk format.
//!
//! A weights file is one line of JSON header terminated by `\n`, followed by
//! every tensor as little-endian `f64`, row-major, in declaration order
//! (`wq, wk, wv, wo, w1, w2, ln1_gain, ln1_bias, ln2_gain, ln2_bias`).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FORMAT_TAG: &str = "polyattn-block-weights";
pub const FORMAT_VERSION: u32 = 1;

const TENSOR_NAMES: [&str; 10] = [
    "wq", "wk", "wv", "wo", "w1", "w2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
];

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub heads: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    d_model: usize,
    heads: usize,
    d_ff: usize,
    shapes: Vec<TensorShape>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorShape {
    name: String,
    shape: Vec<usize>,
}

impl BlockWeights {
    /// Gaussian initialization with `1/sqrt(fan_in)` scaling; LayerNorm
    /// gains near 1 and biases near 0 so they are not trivially the identity.
    pub fn random<R: Rng + ?Sized>(d_model: usize, heads: usize, d_ff: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model = {d_model} is not divisible by heads = {heads}"
            )));
        }
        let s_model = 1.0 / (d_model as f64).sqrt();
        let s_ff = 1.0 / (d_ff as f64).sqrt();
        let mut affine = |n: usize, center: f64| -> Vec<f64> {
            Matrix::random_normal(1, n, 0.1, rng)
                .into_data()
                .into_iter()
                .map(|v| v + center)
                .collect()
        };
        let ln1_gain = affine(d_model, 1.0);
        let ln1_bias = affine(d_model, 0.0);
        let ln2_gain = affine(d_model, 1.0);
        let ln2_bias = affine(d_model, 0.0);
        let w = BlockWeights {
            wq: Matrix::random_normal(d_model, d_model, s_model, rng),
            wk: Matrix::random_normal(d_model, d_model, s_model, rng),
            wv: Matrix::random_normal(d_model, d_model, s_model, rng),
            wo: Matrix::random_normal(d_model, d_model, s_model, rng),
            w1: Matrix::random_normal(d_model, d_ff, s_model, rng),
            w2: Matrix::random_normal(d_ff, d_model, s_ff, rng),
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
            heads,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w1.cols()
    }

    /// Per-head key dimension.
    pub fn d_k(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let f = self.d_ff();
        if self.heads == 0 || d == 0 || d % self.heads != 0 {
            return Err(Error::Shape(format!(
                "d_model = {d} must be a positive multiple of heads = {}",
                self.heads
            )));
        }
        for (name, m, want) in [
            ("wq", &self.wq, (d, d)),
            ("wk", &self.wk, (d, d)),
            ("wv", &self.wv, (d, d)),
            ("wo", &self.wo, (d, d)),
            ("w1", &self.w1, (d, f)),
            ("w2", &self.w2, (f, d)),
        ] {
            if m.shape() != want {
                return Err(Error::Shape(format!("{name} is {:?}, expected {want:?}", m.shape())));
            }
        }
        for (name, v) in [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ] {
            if v.len() != d {
                return Err(Error::Shape(format!("{name} has length {}, expected {d}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        Ok(())
    }

    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let mut out: Vec<(&'static str, Vec<usize>, &[f64])> = Vec::with_capacity(10);
        for (name, m) in TENSOR_NAMES
            .iter()
            .zip([&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2])
        {
            out.push((name, vec![m.rows(), m.cols()], m.data()));
        }
        for (name, v) in TENSOR_NAMES[6..]
            .iter()
            .zip([&self.ln1_gain, &self.ln1_bias, &self.ln2_gain, &self.ln2_bias])
        {
            out.push((name, vec![v.len()], v.as_slice()));
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        self.validate()?;
        let tensors = self.tensors();
        let header = Header {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            d_model: self.d_model(),
            heads: self.heads,
            d_ff: self.d_ff(),
            shapes: tensors
                .iter()
                .map(|(name, shape, _)| TensorShape {
                    name: (*name).into(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for (_, _, data) in &tensors {
            for v in *data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Parse("weights header is not newline-terminated".into()));
        }
        let header: Header = serde_json::from_slice(&line[..line.len() - 1])?;
        if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported weights format {} v{}",
                header.format, header.version
            )));
        }
        let names: Vec<&str> = header.shapes.iter().map(|s| s.name.as_str()).collect();
        if names != TENSOR_NAMES {
            return Err(Error::Parse(format!("unexpected tensor order {names:?}")));
        }
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        let expected: usize = header.shapes.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        if payload.len() != expected * 8 {
            return Err(Error::Parse(format!(
                "payload has {} bytes, header describes {}",
                payload.len(),
                expected * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };

        let mut mats = Vec::with_capacity(6);
        for s in &header.shapes[..6] {
            if s.shape.len() != 2 {
                return Err(Error::Parse(format!("{} must be 2-D", s.name)));
            }
            let (r, c) = (s.shape[0], s.shape[1]);
            mats.push(Matrix::new(r, c, take(r * c))?);
        }
        let mut vecs = Vec::with_capacity(4);
        for s in &header.shapes[6..] {
            if s.shape.len() != 1 {
                return Err(Error::Parse(format!("{} must be 1-D", s.name)));
            }
            vecs.push(take(s.shape[0]));
        }
        let mut mats = mats.into_iter();
        let mut vecs = vecs.into_iter();
        let mut next_m = || mats.next().expect("six matrices");
        let mut next_v = || vecs.next().expect("four vectors");
        let w = BlockWeights {
            wq: next_m(),
            wk: next_m(),
            wv: next_m(),
            wo: next_m(),
            w1: next_m(),
            w2: next_m(),
            ln1_gain: next_v(),
            ln1_bias: next_v(),
            ln2_gain: next_v(),
            ln2_bias: next_v(),
            heads: header.heads,
        };
        w.validate()?;
        if w.d_model() != header.d_model || w.d_ff() != header.d_ff {
            return Err(Error::Parse("header dimensions disagree with tensor shapes".into()));
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
