//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "XMHCKPT\0"
//! version      u32      1
//! init_seed    u64
//! config_len   u32
//! config       config_len bytes, UTF-8 JSON of the training config
//! tensor_count u32
//! tensor_count times:
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   rows       u32
//!   cols       u32
//!   values     rows * cols f64, row-major
//! ```
//!
//! Tensors appear in the fixed order produced by [`tensor_names`].

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::{BatchNormState, Mode, Param};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::{Dense, DiscriminatorNet, HashNetwork, ModelBundle};

pub const MAGIC: &[u8; 8] = b"XMHCKPT\0";
pub const VERSION: u32 = 1;

const HASH_PARTS: [&str; 11] = [
    "layer1.weight",
    "layer1.bias",
    "layer2.weight",
    "layer2.bias",
    "bn.gamma",
    "bn.beta",
    "bn.running_mean",
    "bn.running_var",
    "bn.hyper",
    "layer3.weight",
    "layer3.bias",
];
const DISC_PARTS: [&str; 4] = [
    "layer1.weight",
    "layer1.bias",
    "layer2.weight",
    "layer2.bias",
];

/// Tensor names in file order.
pub fn tensor_names() -> Vec<String> {
    let mut names = Vec::new();
    for net in ["f", "g"] {
        names.extend(HASH_PARTS.iter().map(|p| format!("{net}.{p}")));
    }
    names.extend(DISC_PARTS.iter().map(|p| format!("d.{p}")));
    names
}

fn hash_tensors(net: &HashNetwork) -> Vec<Matrix> {
    let row = |v: &[f64]| Matrix::from_rows(&[v]);
    vec![
        net.layer1.weight.value.clone(),
        net.layer1.bias.value.clone(),
        net.layer2.weight.value.clone(),
        net.layer2.bias.value.clone(),
        net.bn.gamma.value.clone(),
        net.bn.beta.value.clone(),
        row(&net.bn.running_mean),
        row(&net.bn.running_var),
        row(&[net.bn.momentum, net.bn.epsilon]),
        net.layer3.weight.value.clone(),
        net.layer3.bias.value.clone(),
    ]
}

/// Serializes a bundle and the JSON config that produced it.
pub fn encode_checkpoint(bundle: &ModelBundle, config_json: &str) -> Vec<u8> {
    let mut tensors = hash_tensors(&bundle.f);
    tensors.extend(hash_tensors(&bundle.g));
    tensors.extend(bundle.d.params().iter().map(|p| p.value.clone()));

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&bundle.init_seed.to_le_bytes());
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_json.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensor_names().iter().zip(&tensors) {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(path: &Path, bundle: &ModelBundle, config_json: &str) -> Result<()> {
    let bytes = encode_checkpoint(bundle, config_json);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("checkpoint", "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint, returning the bundle and its embedded config JSON.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelBundle, String)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: VERSION.to_string(),
        });
    }
    let init_seed = r.u64()?;
    let len = r.u32()? as usize;
    let config = String::from_utf8(r.take(len)?.to_vec())
        .map_err(|_| Error::format("checkpoint", "config is not UTF-8"))?;
    let count = r.u32()? as usize;
    let names = tensor_names();
    if count != names.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{count} tensors, expected {}", names.len()),
        ));
    }
    let mut tensors = Vec::with_capacity(count);
    for want in &names {
        let n = r.u16()? as usize;
        let name = r.take(n)?;
        if name != want.as_bytes() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "expected tensor {want}, found {}",
                    String::from_utf8_lossy(name)
                ),
            ));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Matrix::from_vec(rows, cols, values)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }

    let mut it = tensors.into_iter();
    let f = hash_from(&mut it)?;
    let g = hash_from(&mut it)?;
    let mut next = || Param::new(it.next().unwrap());
    let d = DiscriminatorNet {
        layer1: Dense {
            weight: next(),
            bias: next(),
        },
        layer2: Dense {
            weight: next(),
            bias: next(),
        },
    };
    let bundle = ModelBundle { f, g, d, init_seed };
    check_shapes(&bundle)?;
    Ok((bundle, config))
}

fn hash_from(it: &mut impl Iterator<Item = Matrix>) -> Result<HashNetwork> {
    let mut next = || it.next().unwrap();
    let layer1 = Dense {
        weight: Param::new(next()),
        bias: Param::new(next()),
    };
    let layer2 = Dense {
        weight: Param::new(next()),
        bias: Param::new(next()),
    };
    let gamma = Param::new(next());
    let beta = Param::new(next());
    let running_mean = next().into_vec();
    let running_var = next().into_vec();
    let hyper = next().into_vec();
    if hyper.len() != 2 {
        return Err(Error::format("checkpoint", "bn.hyper must hold 2 values"));
    }
    let layer3 = Dense {
        weight: Param::new(next()),
        bias: Param::new(next()),
    };
    Ok(HashNetwork {
        layer1,
        layer2,
        bn: BatchNormState {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: hyper[0],
            epsilon: hyper[1],
            mode: Mode::Eval,
        },
        layer3,
    })
}

fn check_shapes(b: &ModelBundle) -> Result<()> {
    let bad = |what: &str| {
        Err(Error::format(
            "checkpoint",
            format!("inconsistent shapes: {what}"),
        ))
    };
    for (name, net) in [("f", &b.f), ("g", &b.g)] {
        let h = net.hidden_dim();
        if net.layer1.bias.shape() != (1, h)
            || net.layer2.weight.shape() != (h, h)
            || net.layer2.bias.shape() != (1, h)
            || net.bn.gamma.shape() != (1, h)
            || net.bn.beta.shape() != (1, h)
            || net.bn.running_mean.len() != h
            || net.bn.running_var.len() != h
            || net.layer3.weight.value.rows() != h
            || net.layer3.bias.shape() != (1, net.code_bits())
        {
            return bad(name);
        }
    }
    if b.f.code_bits() != b.g.code_bits()
        || b.d.in_dim() != b.f.code_bits()
        || b.d.layer1.bias.shape() != (1, b.d.hidden_dim())
        || b.d.layer2.weight.shape() != (b.d.hidden_dim(), 1)
        || b.d.layer2.bias.shape() != (1, 1)
    {
        return bad("code length");
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, String)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
