use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, PlateauScheduler};
use super::{TrainConfig, TrainError};
use crate::autodiff::{RunningStats, Tensor};
use crate::cunet::{BnEntry, CUNetConfig, CUNetModel, Parameter};

const FORMAT: &str = "shiftgrid-checkpoint-1";
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";

/// Complete training state at an epoch or step boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: CUNetConfig,
    pub train_config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub params: Vec<Parameter>,
    pub bn: Vec<BnEntry>,
    pub adam: Adam<f32>,
    pub scheduler: PlateauScheduler,
    pub rng: ChaCha8Rng,
    pub best_val: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// Decimal string; JSON numbers cannot carry 128 bits portably.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct AdamState {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    model_config: CUNetConfig,
    train_config: TrainConfig,
    epoch: usize,
    step: u64,
    best_val: Option<f64>,
    scheduler: PlateauScheduler,
    adam: AdamState,
    rng: RngState,
    parameters: Vec<String>,
    batchnorm: Vec<String>,
    arrays: Vec<ArrayEntry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Checkpoint {
    pub fn model(&self) -> Result<CUNetModel, TrainError> {
        Ok(CUNetModel::from_parts(self.model_config.clone(), self.params.clone(), self.bn.clone())?)
    }

    fn arrays(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out: Vec<(String, &Tensor<f32>)> = Vec::new();
        for p in &self.params {
            out.push((format!("param/{}", p.name), &p.value));
        }
        for (p, (m, v)) in self.params.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            out.push((format!("adam.m/{}", p.name), m));
            out.push((format!("adam.v/{}", p.name), v));
        }
        out
    }

    /// Serializes to `(manifest.json, weights.bin)` bytes.
    pub fn to_bytes(&self) -> Result<(Vec<u8>, Vec<u8>), TrainError> {
        let mut weights = Vec::new();
        let mut entries = Vec::new();
        let mut offset = 0;
        let bn_tensors: Vec<(String, Tensor<f32>)> = self
            .bn
            .iter()
            .flat_map(|e| {
                let c = e.stats.channels();
                [
                    (format!("bn/{}/mean", e.name), Tensor::new(&[c], e.stats.mean.clone()).expect("len")),
                    (format!("bn/{}/var", e.name), Tensor::new(&[c], e.stats.var.clone()).expect("len")),
                ]
            })
            .collect();
        let all = self
            .arrays()
            .into_iter()
            .chain(bn_tensors.iter().map(|(n, t)| (n.clone(), t)));
        for (name, t) in all {
            for v in t.data() {
                weights.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ArrayEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            step: self.step,
            best_val: self.best_val,
            scheduler: self.scheduler.clone(),
            adam: AdamState {
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
                t: self.adam.t,
            },
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            parameters: self.params.iter().map(|p| p.name.clone()).collect(),
            batchnorm: self.bn.iter().map(|e| e.name.clone()).collect(),
            arrays: entries,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        Ok((json, weights))
    }

    pub fn from_bytes(manifest: &[u8], weights: &[u8]) -> Result<Self, TrainError> {
        let m: Manifest = serde_json::from_slice(manifest)?;
        if m.format != FORMAT {
            return Err(TrainError::Checkpoint(format!("unknown format `{}`", m.format)));
        }
        if weights.len() % 4 != 0 {
            return Err(TrainError::Checkpoint("weights.bin length is not a multiple of 4".into()));
        }
        let floats: Vec<f32> = weights
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut by_name = std::collections::HashMap::new();
        for e in &m.arrays {
            let len: usize = e.shape.iter().product();
            let data = floats
                .get(e.offset..e.offset + len)
                .ok_or_else(|| TrainError::Checkpoint(format!("array {} runs past weights.bin", e.name)))?;
            by_name.insert(e.name.as_str(), Tensor::new(&e.shape, data.to_vec())?);
        }
        let mut take = |name: String| {
            by_name
                .remove(name.as_str())
                .ok_or_else(|| TrainError::Checkpoint(format!("missing array {name}")))
        };
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for name in &m.parameters {
            params.push(Parameter {
                name: name.clone(),
                value: take(format!("param/{name}"))?,
            });
            adam_m.push(take(format!("adam.m/{name}"))?);
            adam_v.push(take(format!("adam.v/{name}"))?);
        }
        let mut bn = Vec::new();
        for name in &m.batchnorm {
            let mean = take(format!("bn/{name}/mean"))?.into_data();
            let var = take(format!("bn/{name}/var"))?.into_data();
            bn.push(BnEntry {
                name: name.clone(),
                stats: RunningStats { mean, var },
            });
        }
        let word_pos: u128 = m
            .rng
            .word_pos
            .parse()
            .map_err(|_| TrainError::Checkpoint("bad rng word_pos".into()))?;
        let mut rng = ChaCha8Rng::from_seed(m.rng.seed);
        rng.set_stream(m.rng.stream);
        rng.set_word_pos(word_pos);
        let ckpt = Self {
            model_config: m.model_config,
            train_config: m.train_config,
            epoch: m.epoch,
            step: m.step,
            params,
            bn,
            adam: Adam {
                beta1: m.adam.beta1,
                beta2: m.adam.beta2,
                eps: m.adam.eps,
                t: m.adam.t,
                m: adam_m,
                v: adam_v,
            },
            scheduler: m.scheduler,
            rng,
            best_val: m.best_val,
        };
        // the parameter set must match what the config builds
        let reference = CUNetModel::build(ckpt.model_config.clone())?;
        let same = reference.parameters().len() == ckpt.params.len()
            && reference
                .parameters()
                .iter()
                .zip(&ckpt.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !same {
            return Err(TrainError::Checkpoint("parameters do not match the model config".into()));
        }
        Ok(ckpt)
    }

    /// Writes `manifest.json` and `weights.bin` into `dir`, replacing it as a
    /// whole: files go to a sibling temporary directory that is then renamed.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        let (manifest, weights) = self.to_bytes()?;
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(io(parent))?;
        let name = dir
            .file_name()
            .ok_or_else(|| TrainError::Checkpoint(format!("{} has no file name", dir.display())))?;
        let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
        }
        fs::create_dir(&tmp).map_err(io(&tmp))?;
        fs::write(tmp.join(MANIFEST), manifest).map_err(io(&tmp))?;
        fs::write(tmp.join(WEIGHTS), weights).map_err(io(&tmp))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(io(dir))?;
        }
        fs::rename(&tmp, dir).map_err(io(dir))
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let mp = dir.join(MANIFEST);
        let wp = dir.join(WEIGHTS);
        let manifest = fs::read(&mp).map_err(io(&mp))?;
        let weights = fs::read(&wp).map_err(io(&wp))?;
        Self::from_bytes(&manifest, &weights)
    }
}
