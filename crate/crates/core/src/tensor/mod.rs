//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the plain value type used everywhere (images, flow maps,
//! model weights). Differentiable computation goes through a [`tape::Tape`],
//! which records ops during the forward pass and replays them in reverse.

pub mod kernels;
pub mod optim;
pub mod tape;

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense n-dimensional array of 32-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching flat buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Gaussian-filled tensor, mean 0 and the given standard deviation.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        // Box-Muller on the rng's uniform stream keeps us independent of
        // rand_distr and bit-reproducible across releases of this crate.
        for _ in 0..numel {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            data.push(z as f32 * std);
        }
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// (channels, height, width) of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::Shape(format!("expected [C,H,W] tensor, got {other:?}"))),
        }
    }

    /// Channel `c` of a rank-3 tensor as a flat H*W slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.shape[1] * self.shape[2];
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// Writes the TSR representation: magic "TSR1", u32 LE ndim, the u32 LE
    /// dims, then the row-major f32 LE payload.
    pub fn write_tsr_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(b"TSR1")?;
        out.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_tsr_from(inp: &mut impl Read) -> std::io::Result<std::result::Result<Self, String>> {
        let mut magic = [0u8; 4];
        inp.read_exact(&mut magic)?;
        if &magic != b"TSR1" {
            return Ok(Err(format!(
                "bad magic {:?}, expected \"TSR1\"",
                String::from_utf8_lossy(&magic)
            )));
        }
        let mut u32buf = [0u8; 4];
        inp.read_exact(&mut u32buf)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        if ndim == 0 || ndim > 8 {
            return Ok(Err(format!("unreasonable ndim {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            inp.read_exact(&mut u32buf)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        inp.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(match Tensor::from_vec(shape, data) {
            Ok(t) => Ok(t),
            Err(e) => Err(e.to_string()),
        })
    }

    pub fn save_tsr(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_tsr_to(&mut f).map_err(|e| Error::io(path, e))
    }

    pub fn load_tsr(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        match Tensor::read_tsr_from(&mut f) {
            Ok(Ok(t)) => Ok(t),
            Ok(Err(msg)) => Err(Error::parse(path, msg)),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}
