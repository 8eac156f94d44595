use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"FMCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter tensors of a network, in insertion order.
///
/// Cloning is a deep copy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same names, same shapes.
    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    /// Serialize in the FMCK checkpoint layout.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid("rank exceeds 255"))?;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
                w.write_all(&d.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(8 * t.numel());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an FMCK checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; 8 * n];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        ModelParams::read_checkpoint(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parameters recorded as leaves of a [`Graph`].
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Record every parameter; `trainable` decides whether gradients flow into them.
    pub fn bind(graph: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), graph.leaf(t.clone(), trainable)))
            .collect();
        BoundParams { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Leaves in parameter order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }
}
