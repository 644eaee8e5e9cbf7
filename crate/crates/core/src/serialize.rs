//! Binary network dump.
//!
//! All integers and floats are little-endian; matrices are row-major.
//!
//! ```text
//! magic       8 bytes   "VPNET001"
//! depth       u32       L
//! widths      u64 x (L+1)
//! scheme      u8        0 = kaiming, 1 = scale, 2 = scale_bias
//! batchnorm   u8        0 or 1
//! bn_epsilon  f64
//! seed        u64
//! layers      for l = 1..=L: weight f64 x (n^l * n^{l-1}), then bias f64 x n^l
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::network::{DenseLayer, DenseNet, InitScheme, NetworkSpec};

pub const MAGIC: &[u8; 8] = b"VPNET001";

fn io_err(e: std::io::Error) -> Error {
    Error::Format(format!("network stream: {e}"))
}

pub fn write_net<W: Write>(net: &DenseNet, mut out: W) -> Result<()> {
    let spec = net.spec();
    out.write_all(MAGIC).map_err(io_err)?;
    out.write_all(&(spec.depth() as u32).to_le_bytes())
        .map_err(io_err)?;
    for &w in &spec.widths {
        out.write_all(&(w as u64).to_le_bytes()).map_err(io_err)?;
    }
    out.write_all(&[spec.init_scheme.code(), spec.batchnorm as u8])
        .map_err(io_err)?;
    out.write_all(&spec.bn_epsilon.to_le_bytes())
        .map_err(io_err)?;
    out.write_all(&spec.seed.to_le_bytes()).map_err(io_err)?;
    for layer in net.layers() {
        for &v in layer.weight.iter().chain(layer.bias.iter()) {
            out.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(io_err)?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    // No up-front reservation: a corrupt header must not trigger a huge allocation.
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

pub fn read_net<R: Read>(input: R) -> Result<DenseNet> {
    let mut cur = Cursor { inner: input };
    if &cur.bytes::<8>()? != MAGIC {
        return Err(Error::Format(
            "bad magic; not a varprop network dump".into(),
        ));
    }
    let depth = u32::from_le_bytes(cur.bytes()?) as usize;
    let mut widths = Vec::new();
    for _ in 0..=depth {
        widths.push(cur.u64()? as usize);
    }
    let [scheme, bn] = cur.bytes::<2>()?;
    let init_scheme = InitScheme::from_code(scheme)
        .ok_or_else(|| Error::Format(format!("unknown scheme code {scheme}")))?;
    let spec = NetworkSpec {
        widths,
        init_scheme,
        batchnorm: match bn {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("bad batchnorm flag {other}"))),
        },
        bn_epsilon: cur.f64()?,
        seed: cur.u64()?,
    };
    spec.validate()?;
    let mut layers = Vec::with_capacity(depth);
    for w in spec.widths.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        let count = n_out
            .checked_mul(n_in)
            .ok_or_else(|| Error::Format(format!("layer shape {n_out} x {n_in} overflows")))?;
        let weight = Array2::from_shape_vec((n_out, n_in), cur.f64s(count)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let bias = Array1::from(cur.f64s(n_out)?);
        layers.push(DenseLayer { weight, bias });
    }
    let mut probe = [0u8; 1];
    if cur.inner.read(&mut probe).map_err(io_err)? != 0 {
        return Err(Error::Format("trailing bytes after the last layer".into()));
    }
    DenseNet::from_layers(spec, layers)
}

pub fn save(net: &DenseNet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_net(net, BufWriter::new(file))
}

pub fn load(path: &Path) -> Result<DenseNet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_net(BufReader::new(file))
}
