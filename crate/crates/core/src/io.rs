//! Binary containers for matrices, factors and network checkpoints.
//!
//! All integers and floats are little-endian. Every record starts with a
//! four-byte tag and a `u32` format version (currently 1).
//!
//! - `KMAT`: `rows: u64`, `cols: u64`, then `rows·cols` f64 in row-major order.
//! - `KFAC`: `m₁, n₁, m₂, n₂, r` as u64, then `S`, `A₁..A_r`, `B₁..B_r`,
//!   each as raw row-major f64 (shapes follow from the header).
//! - `KNET`: `len: u64` and a UTF-8 JSON array of layer specs, then one
//!   embedded `KFAC` or `KMAT` record per layer, in order.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::kron::{KronFactor, KronShape};
use crate::matrix::Matrix;
use crate::network::{Layer, LayerKind, LayerParams, LayerSpec, Network};

pub const FORMAT_VERSION: u32 = 1;
pub const MATRIX_TAG: [u8; 4] = *b"KMAT";
pub const FACTOR_TAG: [u8; 4] = *b"KFAC";
pub const NETWORK_TAG: [u8; 4] = *b"KNET";

fn eof(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what.to_string())
        } else {
            Error::Io(e)
        }
    }
}

fn read_header<R: Read>(r: &mut R, tag: [u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(eof("record header"))?;
    if found != tag {
        return Err(Error::BadMagic {
            expected: u32::from_be_bytes(tag),
            found: u32::from_be_bytes(found),
        });
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof("record version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{} version {version} is not supported (expected {FORMAT_VERSION})",
            String::from_utf8_lossy(&tag)
        )));
    }
    Ok(())
}

fn write_header<W: Write>(w: &mut W, tag: [u8; 4]) -> Result<()> {
    w.write_all(&tag)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    Ok(())
}

fn read_dim<R: Read>(r: &mut R) -> Result<usize> {
    let d = r.read_u64::<LittleEndian>().map_err(eof("dimension"))?;
    usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))
}

fn read_payload<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format(format!("{rows}x{cols} overflows")))?;
    let mut data = vec![0.0; len];
    r.read_f64_into::<LittleEndian>(&mut data)
        .map_err(eof("matrix payload"))?;
    Matrix::new(rows, cols, data)
}

fn write_payload<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    for &x in m.data() {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    write_header(w, MATRIX_TAG)?;
    w.write_u64::<LittleEndian>(m.rows() as u64)?;
    w.write_u64::<LittleEndian>(m.cols() as u64)?;
    write_payload(w, m)
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix> {
    read_header(r, MATRIX_TAG)?;
    let rows = read_dim(r)?;
    let cols = read_dim(r)?;
    read_payload(r, rows, cols)
}

pub fn write_factor<W: Write>(w: &mut W, f: &KronFactor) -> Result<()> {
    write_header(w, FACTOR_TAG)?;
    let s = f.shape();
    for d in [s.m1, s.n1, s.m2, s.n2, s.r] {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for p in f.params() {
        write_payload(w, p)?;
    }
    Ok(())
}

pub fn read_factor<R: Read>(r: &mut R) -> Result<KronFactor> {
    read_header(r, FACTOR_TAG)?;
    let mut d = [0usize; 5];
    for x in &mut d {
        *x = read_dim(r)?;
    }
    let [m1, n1, m2, n2, rank] = d;
    // Stored factors may come from exact reconstruction, whose rank can
    // exceed the usual ceiling.
    let shape = KronShape::with_any_rank(m1, n1, m2, n2, rank)?;
    let s = read_payload(r, m1, n1)?;
    let a = (0..rank)
        .map(|_| read_payload(r, m1, n1))
        .collect::<Result<Vec<_>>>()?;
    let b = (0..rank)
        .map(|_| read_payload(r, m2, n2))
        .collect::<Result<Vec<_>>>()?;
    KronFactor::new(shape, s, a, b)
}

pub fn write_network<W: Write>(w: &mut W, net: &Network) -> Result<()> {
    write_header(w, NETWORK_TAG)?;
    let specs = serde_json::to_vec(&net.specs())?;
    w.write_u64::<LittleEndian>(specs.len() as u64)?;
    w.write_all(&specs)?;
    for layer in net.layers() {
        match &layer.params {
            LayerParams::Kron(f) => write_factor(w, f)?,
            LayerParams::Dense(m) => write_matrix(w, m)?,
        }
    }
    Ok(())
}

pub fn read_network<R: Read>(r: &mut R) -> Result<Network> {
    read_header(r, NETWORK_TAG)?;
    let len = read_dim(r)?;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(eof("layer specs"))?;
    let specs: Vec<LayerSpec> = serde_json::from_slice(&buf)?;
    let mut layers = Vec::with_capacity(specs.len());
    for (l, spec) in specs.iter().enumerate() {
        let params = match spec.kind {
            LayerKind::Kron { shape } => {
                let f = read_factor(r)?;
                if *f.shape() != shape {
                    return Err(Error::Format(format!(
                        "layer {l}: stored factor {:?} disagrees with spec {:?}",
                        f.shape(),
                        shape
                    )));
                }
                LayerParams::Kron(f)
            }
            LayerKind::Dense { m, n } => {
                let w = read_matrix(r)?;
                if w.shape() != (m, n) {
                    return Err(Error::shape("checkpoint layer", format!("{m}x{n}"), format!("{:?}", w.shape())));
                }
                LayerParams::Dense(w)
            }
        };
        layers.push(Layer {
            params,
            activation: spec.activation,
        });
    }
    Network::new(layers)
}

pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

/// Reads a `KMAT` file, or JSON: either a serialized [`Matrix`] object or a
/// plain array of equal-length rows.
pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(&MATRIX_TAG) {
        return read_matrix(&mut bytes.as_slice());
    }
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| Error::Format(format!("{}: neither KMAT nor JSON", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(text)?;
    if value.is_array() {
        let rows: Vec<Vec<f64>> = serde_json::from_value(value)?;
        Matrix::from_rows(&rows)
    } else {
        let m: Matrix = serde_json::from_value(value)?;
        Matrix::new(m.rows(), m.cols(), m.into_data())
    }
}

pub fn save_factor(path: &Path, f: &KronFactor) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_factor(&mut w, f)?;
    w.flush()?;
    Ok(())
}

pub fn load_factor(path: &Path) -> Result<KronFactor> {
    read_factor(&mut BufReader::new(fs::File::open(path)?))
}

pub fn save_network(path: &Path, net: &Network) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_network(&mut w, net)?;
    w.flush()?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    read_network(&mut BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn factor_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = KronFactor::init(KronShape::new(2, 3, 4, 1, 2).unwrap(), &mut rng);
        let mut buf = Vec::new();
        write_factor(&mut buf, &f).unwrap();
        assert_eq!(buf.len(), 8 + 5 * 8 + 8 * (6 + 2 * 6 + 2 * 4));
        let back = read_factor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn wrong_tag_and_truncation() {
        let mut buf = Vec::new();
        write_matrix(&mut buf, &Matrix::ones(2, 2)).unwrap();
        assert!(matches!(read_factor(&mut buf.as_slice()), Err(Error::BadMagic { .. })));
        buf.pop();
        assert!(matches!(read_matrix(&mut buf.as_slice()), Err(Error::Truncated(_))));
    }
}
