//! Binary checkpoints: magic `SURD`, u32 version, u32 tensor count, then per
//! tensor a u32 name length, the name, u32 rank, u32 dims and the
//! little-endian f32 payload. All integers are little-endian. The model
//! configuration is echoed as `config.*` tensors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hts::SparsifySchedule;
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::vit::{ModelConfig, PatchConfig, Vit};

pub const MAGIC: &[u8; 4] = b"SURD";
pub const VERSION: u32 = 1;
const CONFIG_PREFIX: &str = "config.";

/// Named tensor table as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn truncated(what: &str) -> Error {
    Error::Checkpoint {
        expected: what.to_string(),
        found: "end of file".into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint {
                expected: format!("magic {:?}", String::from_utf8_lossy(MAGIC)),
                found: format!("{:?}", String::from_utf8_lossy(magic)),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint {
                expected: format!("version {VERSION}"),
                found: format!("version {version}"),
            });
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "tensor name")?.to_vec()).map_err(|_| Error::Checkpoint {
                expected: "utf-8 tensor name".into(),
                found: "invalid bytes".into(),
            })?;
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| truncated("payload"))?, "tensor payload")?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint {
                expected: format!("valid tensor {name}"),
                found: e.to_string(),
            })?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint {
                expected: "end of file".into(),
                found: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn scalar(&self, key: &str) -> Result<f64> {
        let name = format!("{CONFIG_PREFIX}{key}");
        self.get(&name)
            .map(|t| f64::from(t.data()[0]))
            .ok_or_else(|| Error::Checkpoint {
                expected: name,
                found: "missing".into(),
            })
    }

    fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.scalar(key)? as usize)
    }

    pub fn from_model(model: &Vit<f32>) -> Self {
        let (p, c) = (&model.patch, &model.config);
        let mut tensors: Vec<(String, Tensor<f32>)> = [
            ("image_height", p.height),
            ("image_width", p.width),
            ("channels", p.channels),
            ("patch", p.patch),
            ("embed_dim", c.embed_dim),
            ("depth", c.depth),
            ("heads", c.heads),
            ("mlp_ratio", c.mlp_ratio),
            ("num_classes", c.num_classes),
            ("bn_neck", usize::from(c.bn_neck)),
        ]
        .into_iter()
        .map(|(k, v)| (format!("{CONFIG_PREFIX}{k}"), Tensor::scalar(v as f32)))
        .collect();
        if let Some(s) = &c.sparsify {
            tensors.push((format!("{CONFIG_PREFIX}keep_ratio"), Tensor::scalar(s.base_ratio() as f32)));
            let layers: Vec<f32> = s.stage_layers().iter().map(|&l| l as f32).collect();
            tensors.push((format!("{CONFIG_PREFIX}stage_layers"), Tensor::new(vec![layers.len()], layers).expect("non-empty")));
        }
        tensors.extend(model.params.iter().map(|(n, e)| (n.to_string(), e.tensor.clone())));
        Self { tensors }
    }

    /// Rebuilds the model; every parameter the configuration implies must
    /// be present with its exact shape.
    pub fn to_model(&self) -> Result<Vit<f32>> {
        let patch = PatchConfig::new(self.usize("image_height")?, self.usize("image_width")?, self.usize("channels")?, self.usize("patch")?)?;
        let sparsify = match self.get("config.stage_layers") {
            Some(layers) => {
                // stored at f32; six decimals recover the configured ratio
                let ratio = (self.scalar("keep_ratio")? * 1e6).round() / 1e6;
                Some(SparsifySchedule::new(layers.data().iter().map(|&l| l as usize).collect(), ratio)?)
            }
            None => None,
        };
        let config = ModelConfig {
            embed_dim: self.usize("embed_dim")?,
            depth: self.usize("depth")?,
            heads: self.usize("heads")?,
            mlp_ratio: self.usize("mlp_ratio")?,
            num_classes: self.usize("num_classes")?,
            sparsify,
            bn_neck: self.scalar("bn_neck")? != 0.0,
        };
        let mut model = Vit::new(patch, config, 0)?;
        let mut extra: ParamStore<f32> = ParamStore::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| !n.starts_with(CONFIG_PREFIX)) {
            match model.params.get_mut(name) {
                Ok(slot) if slot.shape() == t.shape() => *slot = t.clone(),
                Ok(slot) => {
                    return Err(Error::Checkpoint {
                        expected: format!("{name} with shape {:?}", slot.shape()),
                        found: format!("{:?}", t.shape()),
                    })
                }
                // optional extras such as the alignment projection
                Err(_) => extra.insert(name.clone(), t.clone()),
            }
        }
        for (name, _) in model.params.iter() {
            if self.get(name).is_none() {
                return Err(Error::Checkpoint {
                    expected: format!("tensor {name}"),
                    found: "missing".into(),
                });
            }
        }
        for (name, e) in extra.iter() {
            model.params.insert(name, e.tensor.clone());
        }
        Ok(model)
    }
}

pub fn save_model(model: &Vit<f32>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_model(path: &Path) -> Result<Vit<f32>> {
    Checkpoint::load(path)?.to_model()
}
