use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Tensor4};
use crate::error::{CoralError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor4<T>,
    /// Buffers (running statistics) are saved but never receive gradients.
    pub trainable: bool,
}

/// Named, ordered collection of network parameters and buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor4<T> {
        &self.params[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(k, p)| (ParamId(k), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies every parameter whose name exists in `other` with an equal shape.
    /// Returns the number of tensors copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut() {
            if let Some(id) = other.id(&p.name) {
                let src = other.get(id);
                if src.dims() == p.value.dims() {
                    p.value = src.clone();
                    n += 1;
                }
            }
        }
        n
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Checkpoint: `CKPT`, version `u32`, count `u32`, then per tensor:
    /// name length `u32`, UTF-8 name, rank `u32`, dims `u32` x rank, `f32` data.
    /// All integers and floats little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| CoralError::io(path, e))
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&4u32.to_le_bytes());
            for d in p.value.dims() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        buf
    }

    /// Loads tensor values by name into this store. Every stored parameter
    /// must be present in the file with a matching shape.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| CoralError::io(path, e))?;
        let entries = parse_checkpoint(&bytes).map_err(|msg| CoralError::format(path, msg))?;
        let by_name: HashMap<&str, &(Vec<usize>, Vec<f32>)> =
            entries.iter().map(|(n, v)| (n.as_str(), v)).collect();
        for p in self.params.iter_mut() {
            let (dims, data) = by_name
                .get(p.name.as_str())
                .ok_or_else(|| CoralError::format(path, format!("missing tensor {}", p.name)))?;
            if dims.as_slice() != p.value.dims().as_slice() {
                return Err(CoralError::format(
                    path,
                    format!("tensor {} has shape {:?}, expected {:?}", p.name, dims, p.value.dims()),
                ));
            }
            for (dst, &src) in p.value.data_mut().iter_mut().zip(data.iter()) {
                *dst = T::lit(src as f64);
            }
        }
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const CKPT_VERSION: u32 = 1;

type CheckpointEntry = (String, (Vec<usize>, Vec<f32>));

pub fn parse_checkpoint(bytes: &[u8]) -> std::result::Result<Vec<CheckpointEntry>, String> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| "truncated checkpoint".to_string())?;
        pos += n;
        Ok(s)
    };
    if take(4)? != CKPT_MAGIC {
        return Err("missing CKPT magic".into());
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != CKPT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = u32_at(take(4)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(nlen)?.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
        let rank = u32_at(take(4)?) as usize;
        let dims: Vec<usize> = (0..rank)
            .map(|_| take(4).map(|s| u32_at(s) as usize))
            .collect::<std::result::Result<_, _>>()?;
        let n: usize = dims.iter().product();
        let raw = take(4 * n)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, (dims, data)));
    }
    Ok(out)
}

/// Kaiming-normal initialisation for a `[out, in, kh, kw]` weight: std `sqrt(2 / fan_in)`.
pub fn kaiming<T: Real>(dims: [usize; 4], rng: &mut impl Rng) -> Tensor4<T> {
    let fan_in = (dims[1] * dims[2] * dims[3]).max(1);
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let data = (0..dims.iter().product::<usize>())
        .map(|_| T::lit(normal.sample(rng)))
        .collect();
    Tensor4::from_vec(dims, data).unwrap()
}

pub fn uniform<T: Real>(dims: [usize; 4], bound: f64, rng: &mut impl Rng) -> Tensor4<T> {
    let data = (0..dims.iter().product::<usize>())
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor4::from_vec(dims, data).unwrap()
}
