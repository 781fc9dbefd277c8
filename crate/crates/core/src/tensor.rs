//! Dense `f32` tensors of rank at most four.
//!
//! Feature maps are stored row-major and channels-last (`[H, W, C]`);
//! kernels are stored output-channel-major (`[Cout, Cin, Kh, Kw]`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;
const TSR_MAGIC: &[u8; 4] = b"TSR1";

/// Spatial extent of a channels-last feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "grid extents must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(GridShape {
            height,
            width,
            channels,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "rank {} exceeds {MAX_RANK}",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} exceeds {MAX_RANK}", shape.len());
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds an `[H, W, C]` map from a function of `(y, x, c)`.
    pub fn from_fn3(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Tensor {
            shape: vec![h, w, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Interprets the tensor as a channels-last map.
    pub fn grid(&self) -> Result<GridShape> {
        match self.shape[..] {
            [h, w, c] => GridShape::new(h, w, c),
            _ => Err(Error::Shape(format!(
                "expected an [H, W, C] map, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> f32 {
        let (w, ch) = (self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    pub fn set3(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let (w, ch) = (self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Sum accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len().max(1) as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Extracts channel `c` of an `[H, W, C]` map as `[H, W, 1]`.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        let g = self.grid()?;
        if c >= g.channels {
            return Err(Error::Shape(format!(
                "channel {c} of {} requested",
                g.channels
            )));
        }
        let data = self
            .data
            .chunks_exact(g.channels)
            .map(|px| px[c])
            .collect();
        Ok(Tensor {
            shape: vec![g.height, g.width, 1],
            data,
        })
    }

    /// Concatenates `[H, W, C_i]` maps along the channel axis.
    pub fn concat_channels(maps: &[&Tensor]) -> Result<Tensor> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Shape("no maps to concatenate".into()))?
            .grid()?;
        let mut widths = Vec::with_capacity(maps.len());
        for m in maps {
            let g = m.grid()?;
            if (g.height, g.width) != (first.height, first.width) {
                return Err(Error::Shape(format!("cannot concatenate {:?} with {:?}", m.shape, maps[0].shape)));
            }
            widths.push(g.channels);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(first.pixels() * total);
        for px in 0..first.pixels() {
            for (m, &c) in maps.iter().zip(&widths) {
                data.extend_from_slice(&m.data[px * c..][..c]);
            }
        }
        Ok(Tensor {
            shape: vec![first.height, first.width, total],
            data,
        })
    }

    /// Stacks `[H, W, 1]` maps into one `[H, W, K]` map.
    pub fn stack_channels(maps: &[Tensor]) -> Result<Tensor> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Shape("no channels to stack".into()))?
            .grid()?;
        let k = maps.len();
        let mut data = vec![0.0; first.pixels() * k];
        for (c, m) in maps.iter().enumerate() {
            let g = m.grid()?;
            if g != (GridShape { channels: 1, ..first }) || first.channels != 1 {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    m.shape,
                    [first.height, first.width, 1]
                )));
            }
            for (p, &v) in m.data.iter().enumerate() {
                data[p * k + c] = v;
            }
        }
        Ok(Tensor {
            shape: vec![first.height, first.width, k],
            data,
        })
    }

    /// Copies the `[y0..y0+h, x0..x0+w]` window of a channels-last map.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let g = self.grid()?;
        if y0 + h > g.height || x0 + w > g.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{}",
                g.height, g.width
            )));
        }
        let c = g.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = (y * g.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Tensor {
            shape: vec![h, w, c],
            data,
        })
    }

    pub fn write_tsr(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(TSR_MAGIC)?;
        out.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_tsr(mut input: impl Read) -> Result<Tensor> {
        let bad = |reason: String| Error::Format { kind: "TSR", reason };
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| bad(e.to_string()))?;
        if bytes.len() < 8 || &bytes[..4] != TSR_MAGIC {
            return Err(bad("missing TSR1 magic".into()));
        }
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| bad("truncated header".into()))
        };
        let rank = word(4)? as usize;
        if rank > MAX_RANK {
            return Err(bad(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            shape.push(word(8 + 4 * i)? as usize);
        }
        let payload = &bytes[8 + 4 * rank..];
        let count: usize = shape.iter().product();
        if payload.len() != count * 4 {
            return Err(bad(format!(
                "payload has {} bytes, shape {shape:?} needs {}",
                payload.len(),
                count * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(&shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_tsr(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Tensor::read_tsr(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inconsistent_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn tsr_header_layout() {
        let t = Tensor::new(&[1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        t.write_tsr(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TSR1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 24);
    }

    #[test]
    fn tsr_rejects_truncated_payload() {
        let t = Tensor::zeros(&[3, 3]);
        let mut buf = Vec::new();
        t.write_tsr(&mut buf).unwrap();
        buf.pop();
        assert!(Tensor::read_tsr(&buf[..]).is_err());
        assert!(Tensor::read_tsr(&b"TSR2\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn stack_and_channel_are_inverse() {
        let t = Tensor::from_fn3(3, 4, 2, |y, x, c| (y * 10 + x) as f32 + c as f32 * 0.5);
        let parts = [t.channel(0).unwrap(), t.channel(1).unwrap()];
        assert_eq!(Tensor::stack_channels(&parts).unwrap(), t);
    }

    proptest! {
        #[test]
        fn tsr_round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 0..=4),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(&shape, data).unwrap();
            let mut buf = Vec::new();
            t.write_tsr(&mut buf).unwrap();
            let back = Tensor::read_tsr(&buf[..]).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
