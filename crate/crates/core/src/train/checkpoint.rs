//! Checkpoint directory layout:
//!
//! ```text
//! header.toml                         model config, dtype, epoch, optimizer settings and step
//! params.manifest + params.bin        parameters and batch-norm running statistics
//! optimizer.manifest + optimizer.bin  optimizer moments, named `<param>.first` / `<param>.second`
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerSettings};
use crate::error::{Error, Result};
use crate::model::{DaTransUnet, ModelConfig};
use crate::nn::Module;
use crate::tensor::serialize::{read_files, write_files, NamedTensor};
use crate::tensor::Scalar;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub dtype: String,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub optimizer: OptimizerSettings,
    pub model: ModelConfig,
}

pub struct Checkpoint<F: Scalar> {
    pub model: DaTransUnet<F>,
    pub optimizer: Optimizer<F>,
    pub epoch: usize,
}

pub fn save_checkpoint<F: Scalar>(
    dir: &Path,
    model: &DaTransUnet<F>,
    optimizer: &Optimizer<F>,
    epoch: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = CheckpointHeader {
        format: FORMAT_VERSION,
        dtype: F::DTYPE.to_string(),
        epoch,
        step: optimizer.step,
        optimizer: optimizer.settings,
        model: model.config().clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(format!("encoding checkpoint header: {e}")))?;
    let path = dir.join("header.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    let (params, buffers) = model.state();
    let mut state: Vec<NamedTensor<F>> = params
        .iter()
        .map(|p| NamedTensor { name: p.name().to_string(), shape: p.shape().to_vec(), data: p.data().to_vec() })
        .collect();
    state.extend(buffers.iter().map(|b| NamedTensor {
        name: b.name().to_string(),
        shape: b.shape().to_vec(),
        data: b.get(),
    }));
    write_files(&dir.join("params.manifest"), &dir.join("params.bin"), &state)?;

    let mut moments = Vec::new();
    for (i, p) in params.iter().enumerate() {
        let slots = [("first", &optimizer.first), ("second", &optimizer.second)];
        for (suffix, store) in slots {
            if let Some(values) = store.get(i) {
                moments.push(NamedTensor {
                    name: format!("{}.{suffix}", p.name()),
                    shape: p.shape().to_vec(),
                    data: values.clone(),
                });
            }
        }
    }
    write_files(&dir.join("optimizer.manifest"), &dir.join("optimizer.bin"), &moments)?;
    Ok(())
}

/// The first top-level field where two configs differ, with both values.
fn config_difference(found: &ModelConfig, expected: &ModelConfig) -> Option<(String, String)> {
    let a = toml::Table::try_from(found).ok()?;
    let b = toml::Table::try_from(expected).ok()?;
    b.iter().find_map(|(k, v)| {
        let other = a.get(k);
        (other != Some(v)).then(|| {
            let shown = other.map_or("nothing".to_string(), |o| o.to_string());
            (k.clone(), format!("checkpoint has {shown}, expected {v}"))
        })
    })
}

pub fn read_header(dir: &Path) -> Result<CheckpointHeader> {
    let path = dir.join("header.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Restores a model and optimizer. With `expected`, the stored model config must equal it.
pub fn load_checkpoint<F: Scalar>(dir: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<F>> {
    let header = read_header(dir)?;
    if header.format != FORMAT_VERSION {
        return Err(Error::Incompatible {
            field: "format".into(),
            detail: format!("version {} not supported", header.format),
        });
    }
    if header.dtype != F::DTYPE.to_string() {
        return Err(Error::Incompatible {
            field: "dtype".into(),
            detail: format!("checkpoint stores {}, requested {}", header.dtype, F::DTYPE),
        });
    }
    if let Some(cfg) = expected {
        if let Some((field, detail)) = config_difference(&header.model, cfg) {
            return Err(Error::Incompatible { field: format!("model.{field}"), detail });
        }
    }
    let mut model = DaTransUnet::<F>::new(&header.model)?;
    let stored: HashMap<String, NamedTensor<F>> =
        read_files::<F>(&dir.join("params.manifest"), &dir.join("params.bin"))?
            .into_iter()
            .map(|t| (t.name.clone(), t))
            .collect();
    let fetch = |name: &str, shape: &[usize]| -> Result<Vec<F>> {
        let t = stored
            .get(name)
            .ok_or_else(|| Error::Incompatible { field: name.into(), detail: "missing from checkpoint".into() })?;
        if t.shape != shape {
            return Err(Error::Incompatible {
                field: name.into(),
                detail: format!("shape {:?}, expected {:?}", t.shape, shape),
            });
        }
        Ok(t.data.clone())
    };
    for b in model.buffer_list() {
        b.set(fetch(b.name(), b.shape())?);
    }
    for p in model.param_list_mut() {
        let data = fetch(p.name(), p.shape())?;
        p.set_data(data);
    }

    let moments: HashMap<String, NamedTensor<F>> =
        read_files::<F>(&dir.join("optimizer.manifest"), &dir.join("optimizer.bin"))?
            .into_iter()
            .map(|t| (t.name.clone(), t))
            .collect();
    let mut optimizer = Optimizer::new(header.optimizer, &model.param_list());
    optimizer.step = header.step;
    for (i, p) in model.param_list().iter().enumerate() {
        let slots = [("first", &mut optimizer.first), ("second", &mut optimizer.second)];
        for (suffix, store) in slots {
            if let Some(slot) = store.get_mut(i) {
                let name = format!("{}.{suffix}", p.name());
                let t = moments.get(&name).ok_or_else(|| Error::Incompatible {
                    field: name.clone(),
                    detail: "missing optimizer state".into(),
                })?;
                if t.data.len() != slot.len() {
                    return Err(Error::Incompatible { field: name, detail: "optimizer state size differs".into() });
                }
                slot.clone_from(&t.data);
            }
        }
    }
    Ok(Checkpoint { model, optimizer, epoch: header.epoch })
}
