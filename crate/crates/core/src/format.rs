//! `.inft` tensor files.
//!
//! Layout, all little-endian: magic `INFT`, `u32` version (1), `u32` ndim
//! (1 or 2), `ndim × u64` dims, then the row-major `f64` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Vector};

pub const MAGIC: &[u8; 4] = b"INFT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Vector(Vector),
    Matrix(Matrix),
}

impl Tensor {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            Tensor::Vector(v) => vec![v.len()],
            Tensor::Matrix(m) => vec![m.rows(), m.cols()],
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Tensor::Vector(v) => v.as_slice(),
            Tensor::Matrix(m) => m.data(),
        }
    }

    /// Views the tensor as a matrix; a vector becomes a single row.
    pub fn into_matrix(self) -> Matrix {
        match self {
            Tensor::Matrix(m) => m,
            Tensor::Vector(v) => {
                let n = v.len();
                Matrix::from_vec(1, n, v.into_vec())
            }
        }
    }
}

impl From<Matrix> for Tensor {
    fn from(m: Matrix) -> Self {
        Tensor::Matrix(m)
    }
}

impl From<Vector> for Tensor {
    fn from(v: Vector) -> Self {
        Tensor::Vector(v)
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let dims = t.dims();
    let values = t.values();
    let mut out = Vec::with_capacity(12 + 8 * dims.len() + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail(format!("truncated {what}: need {N} bytes, {} left", self.bytes.len() - self.pos)))?;
        let mut buf = [0u8; N];
        buf.copy_from_slice(slice);
        self.pos = end;
        Ok(buf)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take("magic")?;
    if &magic != MAGIC {
        r.pos = 0;
        return Err(r.fail(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let version = u32::from_le_bytes(r.take("version")?);
    if version != VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let ndim = u32::from_le_bytes(r.take("ndim")?);
    if !(1..=2).contains(&ndim) {
        r.pos -= 4;
        return Err(r.fail(format!("ndim must be 1 or 2, got {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(r.take("dimension")?);
        dims.push(usize::try_from(d).map_err(|_| r.fail(format!("dimension {d} does not fit in memory")))?);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|c| c.checked_mul(8).is_some())
        .ok_or_else(|| r.fail("element count overflows"))?;
    let remaining = bytes.len() - r.pos;
    if remaining < count * 8 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            reason: format!("truncated payload: {count} values declared, {} bytes present", remaining),
        });
    }
    if remaining > count * 8 {
        return Err(Error::Format {
            offset: (r.pos + count * 8) as u64,
            reason: format!("{} trailing bytes after payload", remaining - count * 8),
        });
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let v = f64::from_le_bytes(r.take("value")?);
        if !v.is_finite() {
            r.pos -= 8;
            return Err(r.fail(format!("non-finite value {v}")));
        }
        values.push(v);
    }
    Ok(match dims.as_slice() {
        [_] => Tensor::Vector(Vector::from_vec(values)),
        [rows, cols] => Tensor::Matrix(Matrix::from_vec(*rows, *cols, values)),
        _ => unreachable!("ndim checked above"),
    })
}

pub fn store_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_matrix;
    use proptest::prelude::*;

    #[test]
    fn matrix_round_trip_is_bitwise() {
        let m = random_matrix(3, 4, 1, -1e3, 1e3);
        let back = decode(&encode(&Tensor::Matrix(m.clone()))).unwrap();
        let Tensor::Matrix(b) = back else { panic!("expected a matrix") };
        assert_eq!(b.shape(), (3, 4));
        for (x, y) in m.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&Tensor::Vector(Vector::new(vec![1.0]).unwrap()));
        assert_eq!(&bytes[..4], b"INFT");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[20..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&Tensor::Vector(Vector::zeros(2)));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn bad_version_and_ndim() {
        let mut bytes = encode(&Tensor::Vector(Vector::zeros(2)));
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
        let mut bytes = encode(&Tensor::Vector(Vector::zeros(2)));
        bytes[8] = 3;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode(&Tensor::Matrix(Matrix::zeros(2, 2)));
        bytes.truncate(bytes.len() - 8);
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("truncated"));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn trailing_bytes_and_non_finite() {
        let mut bytes = encode(&Tensor::Vector(Vector::zeros(1)));
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 28, .. })));
        let mut bytes = encode(&Tensor::Vector(Vector::zeros(2)));
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 28, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("inft-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("v.inft");
        let t = Tensor::Vector(Vector::new(vec![-0.0, 0.0, 1.5]).unwrap());
        store_tensor(&path, &t).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(back.values()[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, t);
        fs::remove_dir_all(&dir).unwrap();
        assert!(matches!(load_tensor(dir.join("missing")), Err(Error::Io(_))));
    }

    proptest! {
        #[test]
        fn any_finite_values_round_trip(
            bits in prop::collection::vec(any::<u64>(), 0..40),
            cols in 1usize..5,
        ) {
            let values: Vec<f64> = bits.into_iter().map(f64::from_bits).filter(|v| v.is_finite()).collect();
            let rows = values.len() / cols;
            let m = Matrix::from_vec(rows, cols, values[..rows * cols].to_vec());
            let back = decode(&encode(&Tensor::Matrix(m.clone()))).unwrap().into_matrix();
            prop_assert_eq!(back.shape(), m.shape());
            for (x, y) in m.data().iter().zip(back.data()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
