//! Dense row-major f32 tensors and their raw blob format.
//!
//! Storage is `Arc`-shared so clones are cheap; all mutation goes through
//! constructors or `make_mut`-style internal helpers, keeping public
//! operations pure.

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::io::{Read, Write};
use std::sync::Arc;

pub const BLOB_MAGIC: &[u8; 8] = b"MSTNSR01";

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(rng.normal_vec(n)),
        }
    }

    pub fn randn_scaled(shape: &[usize], std: f32, rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(|_| rng.normal() * std).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.to_vec()
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::numerical(format!("non-finite values in {what}")))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.sum() / self.len() as f64
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &x| m.max(x.abs()))
    }

    /// Broadcast shapes by the trailing-dimension rule. Returns the output
    /// shape or a ShapeError when the shapes are incompatible.
    pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
        let r = a.len().max(b.len());
        let mut out = vec![0usize; r];
        for i in 0..r {
            let da = if i < r - a.len() { 1 } else { a[i - (r - a.len())] };
            let db = if i < r - b.len() { 1 } else { b[i - (r - b.len())] };
            out[i] = if da == db {
                da
            } else if da == 1 {
                db
            } else if db == 1 {
                da
            } else {
                return Err(Error::shape(format!(
                    "cannot broadcast {:?} with {:?}",
                    a, b
                )));
            };
        }
        Ok(out)
    }

    /// Elementwise binary op with trailing-dimension broadcasting.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape == other.shape {
            let data: Vec<f32> = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Tensor::new(self.shape.clone(), data);
        }
        let out_shape = Tensor::broadcast_shape(&self.shape, &other.shape)?;
        let n: usize = out_shape.iter().product();
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = vec![0.0f32; n];
        let mut idx = vec![0usize; out_shape.len()];
        for slot in data.iter_mut() {
            let mut ia = 0;
            let mut ib = 0;
            for (k, &i) in idx.iter().enumerate() {
                ia += i * sa[k];
                ib += i * sb[k];
            }
            *slot = f(self.data[ia], other.data[ib]);
            for k in (0..idx.len()).rev() {
                idx[k] += 1;
                if idx[k] < out_shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Tensor::new(out_shape, data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    /// Reduce `self` (shaped `from`) back to `to` by summing the axes that
    /// were broadcast. Inverse of `zip`'s expansion; used by gradients.
    pub fn reduce_to(&self, to: &[usize]) -> Result<Tensor> {
        if self.shape == to {
            return Ok(self.clone());
        }
        let r = self.shape.len();
        let pad = r - to.len();
        let mut out_shape = vec![1usize; pad];
        out_shape.extend_from_slice(to);
        let strides_out = contiguous_strides(&out_shape)
            .iter()
            .zip(out_shape.iter())
            .map(|(&s, &d)| if d == 1 { 0 } else { s })
            .collect::<Vec<_>>();
        let n_out: usize = out_shape.iter().product();
        let mut data = vec![0.0f32; n_out];
        let mut idx = vec![0usize; r];
        for &v in self.data.iter() {
            let mut io = 0;
            for (k, &i) in idx.iter().enumerate() {
                if out_shape[k] != 1 {
                    io += i * strides_out[k];
                }
            }
            data[io] += v;
            for k in (0..r).rev() {
                idx[k] += 1;
                if idx[k] < self.shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Tensor::new(to.to_vec(), data)
    }

    /// Matrix product of 2-D tensors, f32 storage with f64 accumulation
    /// per output element done blockwise in f32 (kept simple and fast:
    /// i-k-j loop over contiguous rows).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = match self.shape[..] {
            [m, k] => (m, k),
            _ => return Err(Error::shape("matmul lhs must be 2-D".to_string())),
        };
        let (k2, n) = match other.shape[..] {
            [k2, n] => (k2, n),
            _ => return Err(Error::shape("matmul rhs must be 2-D".to_string())),
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims {k} vs {k2} (shapes {:?} x {:?})",
                self.shape, other.shape
            )));
        }
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (m, n) = match self.shape[..] {
            [m, n] => (m, n),
            _ => return Err(Error::shape("transpose needs 2-D tensor".to_string())),
        };
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    // ---- blob format -------------------------------------------------

    pub fn write_blob<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BLOB_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in self.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_blob<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Corruption("blob truncated before magic".into()))?;
        if &magic != BLOB_MAGIC {
            return Err(Error::Corruption("bad blob magic".into()));
        }
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::Corruption(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Corruption("blob payload truncated".into()))?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data)?;
        t.check_finite("tensor blob")?;
        Ok(t)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_blob(&mut f)
    }

    pub fn load(path: &std::path::Path) -> Result<Tensor> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_blob(&mut f)
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Corruption("blob header truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` viewed as `out_shape` (0 on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let base = contiguous_strides(shape);
    let pad = out_shape.len() - shape.len();
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        s[pad + i] = if shape[i] == 1 { 0 } else { base[i] };
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_componentwise() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn broadcast_trailing_rule() {
        let a = Tensor::new(vec![2, 3], (0..6).map(|x| x as f32).collect()).unwrap();
        let b = Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.to_vec(), vec![10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
    }

    #[test]
    fn broadcast_mismatch_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn reduce_to_inverts_broadcast() {
        let g = Tensor::full(&[2, 3], 1.0);
        let r = g.reduce_to(&[3]).unwrap();
        assert_eq!(r.to_vec(), vec![2.0, 2.0, 2.0]);
        let r2 = g.reduce_to(&[2, 3]).unwrap();
        assert_eq!(r2.to_vec(), vec![1.0; 6]);
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(i2.matmul(&a).unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_dot() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = crate::rng::Rng::new(11).stream("mm");
        let a = Tensor::randn(&[3, 4], &mut rng);
        let b = Tensor::randn(&[4, 2], &mut rng);
        let c = a.matmul(&b).unwrap();
        // naive triple-loop oracle
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0f64;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] as f64 * b.data()[k * 2 + j] as f64;
                }
                assert!((c.data()[i * 2 + j] as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn blob_roundtrip_bitwise() {
        let mut rng = crate::rng::Rng::new(5).stream("blob");
        let t = Tensor::randn(&[3, 5, 2], &mut rng);
        let mut buf = Vec::new();
        t.write_blob(&mut buf).unwrap();
        assert_eq!(&buf[..8], BLOB_MAGIC);
        let u = Tensor::read_blob(&mut &buf[..]).unwrap();
        assert!(t.bitwise_eq(&u));
    }

    #[test]
    fn blob_truncation_detected() {
        let t = Tensor::zeros(&[4, 4]);
        let mut buf = Vec::new();
        t.write_blob(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Tensor::read_blob(&mut &buf[..]),
            Err(Error::Corruption(_))
        ));
    }
}
