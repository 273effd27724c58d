//! SBMX v1 matrix files.
//!
//! Layout: magic `SBMX`, u16 LE version (=1), u8 dtype (=0 for f64),
//! one reserved zero byte, u64 LE rows, u64 LE cols, then rows*cols
//! f64 LE values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: [u8; 4] = *b"SBMX";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F64, 0u8])?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for &v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(fail(format!("bad magic {magic:?}, expected \"SBMX\"")));
    }
    let mut version = [0u8; 2];
    r.read_exact(&mut version)?;
    let version = u16::from_le_bytes(version);
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let mut dtype_reserved = [0u8; 2];
    r.read_exact(&mut dtype_reserved)?;
    if dtype_reserved[0] != DTYPE_F64 {
        return Err(fail(format!("unsupported dtype {}", dtype_reserved[0])));
    }
    let mut dim = [0u8; 8];
    r.read_exact(&mut dim)?;
    let rows = u64::from_le_bytes(dim) as usize;
    r.read_exact(&mut dim)?;
    let cols = u64::from_le_bytes(dim) as usize;
    if rows == 0 || cols == 0 {
        return Err(fail(format!("non-positive dimensions {rows}x{cols}")));
    }

    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    if r.read(&mut buf)? != 0 {
        return Err(fail("trailing bytes after matrix payload".into()));
    }
    if !data.iter().all(|x| x.is_finite()) {
        return Err(fail("non-finite entries in payload".into()));
    }
    Matrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{standard_normal, SeededRng};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sbmx");
        let m = standard_normal(&mut SeededRng::new(1), 5, 3);
        write_matrix(&path, &m).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(m, back);

        // Byte-identical on rewrite.
        let path2 = dir.path().join("m2.sbmx");
        write_matrix(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn rejects_bad_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sbmx");
        let m = Matrix::identity(2);
        write_matrix(&path, &m).unwrap();

        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(read_matrix(&path).is_err(), "magic");

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(read_matrix(&path).is_err(), "version");

        let mut bad_dtype = good.clone();
        bad_dtype[6] = 1;
        std::fs::write(&path, &bad_dtype).unwrap();
        assert!(read_matrix(&path).is_err(), "dtype");

        let mut truncated = good.clone();
        truncated.truncate(good.len() - 4);
        std::fs::write(&path, &truncated).unwrap();
        assert!(read_matrix(&path).is_err(), "truncated");

        let mut trailing = good;
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        assert!(read_matrix(&path).is_err(), "trailing");
    }
}
