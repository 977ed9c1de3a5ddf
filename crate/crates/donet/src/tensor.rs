use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::shape::Shape;
use std::io::{Read, Write};

/// Fill rule for [`Tensor::create`].
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Seeded normal draw: bit-reproducible for a fixed seed.
    Normal { mean: f64, std: f64, seed: u64 },
}

/// Dense rank-4 value in row-major (n, c, h, w) order.
///
/// Plain data holder: gradients live in the [`crate::graph::GradGraph`]
/// slot a tensor occupies while participating in a differentiable
/// computation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn create(shape: Shape, init: Init) -> Result<Self> {
        let len = shape.checked_len()?;
        if let Init::Normal { std, .. } = init {
            if std < 0.0 {
                return Err(Error::Config(format!("normal init requires std >= 0, got {std}")));
            }
        }
        let data = match init {
            Init::Zeros => vec![S::ZERO; len],
            Init::Constant(c) => vec![S::from_f64(c); len],
            Init::Normal { mean, std, seed } => {
                let mut rng = Rng::new(seed);
                (0..len).map(|_| S::from_f64(rng.normal(mean, std))).collect()
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::create(shape, Init::Zeros).expect("size error")
    }

    pub fn constant(shape: Shape, c: f64) -> Self {
        Tensor::create(shape, Init::Constant(c)).expect("size error")
    }

    pub fn from_vec(shape: Shape, data: Vec<S>) -> Self {
        assert_eq!(
            data.len(),
            shape.len(),
            "data length {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    /// Fill from an existing rng stream (used by layer initializers).
    pub fn normal_from(shape: Shape, rng: &mut Rng, mean: f64, std: f64) -> Self {
        let len = shape.len();
        let data = (0..len).map(|_| S::from_f64(rng.normal(mean, std))).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.shape.idx(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: S) {
        let i = self.shape.idx(n, c, h, w);
        self.data[i] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<F: Fn(S) -> S>(&self, f: F) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Convert element precision (f32 <-> f64) through f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Inverse of channel concatenation: carve into tensors of the given
    /// channel widths. Round-trips [`crate::graph::GradGraph::concat_channels`]
    /// bit-exactly.
    pub fn split_channels(&self, widths: &[usize]) -> Vec<Tensor<S>> {
        let total: usize = widths.iter().sum();
        assert_eq!(total, self.shape.c, "split widths sum {} != channels {}", total, self.shape.c);
        let mut out = Vec::with_capacity(widths.len());
        let mut c0 = 0;
        for &cw in widths {
            let s = Shape::new(self.shape.n, cw, self.shape.h, self.shape.w);
            let mut data = Vec::with_capacity(s.len());
            for n in 0..self.shape.n {
                let start = self.shape.idx(n, c0, 0, 0);
                data.extend_from_slice(&self.data[start..start + cw * self.shape.hw()]);
            }
            out.push(Tensor { shape: s, data });
            c0 += cw;
        }
        out
    }

    /// Stack single-sample tensors (n=1, equal c/h/w) into one batch.
    pub fn stack(parts: &[&Tensor<S>]) -> Tensor<S> {
        assert!(!parts.is_empty());
        let s0 = parts[0].shape;
        let mut data = Vec::with_capacity(parts.len() * s0.len());
        for p in parts {
            assert_eq!(p.shape, s0, "stack requires congruent shapes");
            assert_eq!(p.shape.n, 1, "stack expects single-sample tensors");
            data.extend_from_slice(&p.data);
        }
        Tensor {
            shape: Shape::new(parts.len(), s0.c, s0.h, s0.w),
            data,
        }
    }

    /// Extract sample `n` as a batch-1 tensor.
    pub fn sample(&self, n: usize) -> Tensor<S> {
        let chw = self.shape.chw();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * chw..(n + 1) * chw].to_vec(),
        }
    }
}

const DUMP_MAGIC: &[u8; 4] = b"DOT1";

impl<S: Scalar> Tensor<S> {
    /// Serialize: magic "DOT1", four little-endian u32 extents, then
    /// row-major little-endian f32 payload.
    pub fn dump<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        for e in [self.shape.n, self.shape.c, self.shape.h, self.shape.w] {
            let e32 = u32::try_from(e)
                .map_err(|_| Error::Data(format!("extent {e} exceeds u32 in tensor dump")))?;
            w.write_all(&e32.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Data(format!(
                "bad tensor magic {:?}, expected {:?}",
                magic, DUMP_MAGIC
            )));
        }
        let mut ext = [0usize; 4];
        for e in ext.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *e = u32::from_le_bytes(b) as usize;
        }
        let shape = Shape::new(ext[0], ext[1], ext[2], ext[3]);
        let len = shape.checked_len()?;
        let mut data = Vec::with_capacity(len);
        let mut b = [0u8; 4];
        for i in 0..len {
            r.read_exact(&mut b).map_err(|_| {
                Error::Data(format!("truncated tensor payload at element {i} of {len}"))
            })?;
            data.push(S::from_f64(f32::from_le_bytes(b) as f64));
        }
        Ok(Tensor { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_fill() {
        let t: Tensor<f32> = Tensor::create(Shape::new(1, 1, 2, 2), Init::Zeros).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_fill() {
        let t: Tensor<f32> = Tensor::create(Shape::new(1, 1, 1, 1), Init::Constant(3.5)).unwrap();
        assert_eq!(t.data(), &[3.5]);
    }

    #[test]
    fn seeded_normal_is_bit_identical() {
        let init = Init::Normal { mean: 0.0, std: 1.0, seed: 7 };
        let a: Tensor<f32> = Tensor::create(Shape::new(1, 1, 4, 4), init).unwrap();
        let b: Tensor<f32> = Tensor::create(Shape::new(1, 1, 4, 4), init).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn oversized_create_is_rejected() {
        let r: Result<Tensor<f32>> =
            Tensor::create(Shape::new(usize::MAX, 2, 1, 1), Init::Zeros);
        assert!(r.is_err());
    }

    #[test]
    fn negative_std_rejected() {
        let r: Result<Tensor<f32>> = Tensor::create(
            Shape::new(1, 1, 1, 1),
            Init::Normal { mean: 0.0, std: -1.0, seed: 0 },
        );
        assert!(r.is_err());
    }

    #[test]
    fn dump_load_round_trip() {
        let t: Tensor<f32> =
            Tensor::create(Shape::new(2, 3, 4, 5), Init::Normal { mean: 0.0, std: 1.0, seed: 11 })
                .unwrap();
        let mut buf = Vec::new();
        t.dump(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DOT1");
        assert_eq!(buf.len(), 4 + 16 + 4 * t.len());
        let u: Tensor<f32> = Tensor::load(&mut buf.as_slice()).unwrap();
        assert_eq!(t, u);
    }

    #[test]
    fn load_rejects_truncation_and_bad_magic() {
        let t: Tensor<f32> = Tensor::constant(Shape::new(1, 1, 2, 2), 1.0);
        let mut buf = Vec::new();
        t.dump(&mut buf).unwrap();
        let r = Tensor::<f32>::load(&mut &buf[..buf.len() - 2]);
        assert!(r.is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Tensor::<f32>::load(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn split_channels_round_trip() {
        let a: Tensor<f64> =
            Tensor::create(Shape::new(2, 5, 3, 3), Init::Normal { mean: 0.0, std: 1.0, seed: 3 })
                .unwrap();
        let parts = a.split_channels(&[2, 3]);
        assert_eq!(parts[0].shape(), Shape::new(2, 2, 3, 3));
        assert_eq!(parts[1].shape(), Shape::new(2, 3, 3, 3));
        // reassemble by hand
        let mut data = Vec::new();
        for n in 0..2 {
            data.extend_from_slice(
                &parts[0].data()[n * parts[0].shape().chw()..(n + 1) * parts[0].shape().chw()],
            );
            data.extend_from_slice(
                &parts[1].data()[n * parts[1].shape().chw()..(n + 1) * parts[1].shape().chw()],
            );
        }
        assert_eq!(data, a.data());
    }
}
