//! Checkpoint directories: `checkpoint.json` naming every parameter, plus one
//! DTEN file per parameter. Round trips are bit-exact.

use std::collections::HashSet;
use std::path::Path;

use enas_unet_core::controller::{Controller, ControllerConfig};
use enas_unet_core::params::{ParamKind, ParamStore};
use enas_unet_core::search::{init_model, Architecture};
use enas_unet_core::search_space::SearchSpaceSpec;
use enas_unet_core::supernet::{BlockFamily, Network, SupernetSpec};
use enas_unet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::dten;
use crate::error::{Error, IoContext, Result};
use crate::fsutil::{read_json, write_json};

pub const MANIFEST: &str = "checkpoint.json";
const FORMAT: &str = "enas-unet-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// A retrained child or baseline network.
    Model,
    /// Shared weights of every candidate.
    Supernet,
    Controller,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub buffer: bool,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerMeta {
    pub space: SearchSpaceSpec,
    pub config: ControllerConfig,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SupernetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerMeta>,
    /// Free-form record of how the weights were produced.
    #[serde(default)]
    pub provenance: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

fn write_store(dir: &Path, store: &ParamStore<f32>) -> Result<Vec<ParamRecord>> {
    store
        .entries()
        .iter()
        .map(|e| {
            let file = format!("{}.dten", e.name);
            dten::write(&dir.join(&file), &e.value)?;
            Ok(ParamRecord {
                name: e.name.clone(),
                buffer: e.kind == ParamKind::Buffer,
                shape: e.value.shape().to_vec(),
                file,
            })
        })
        .collect()
}

fn read_tensor(dir: &Path, r: &ParamRecord) -> Result<Tensor<f32>> {
    if r.file.contains(['/', '\\']) || r.file.starts_with('.') {
        return Err(Error::format(&dir.join(MANIFEST), format!("parameter file name `{}` is not local", r.file)));
    }
    let path = dir.join(&r.file);
    let t = dten::read(&path)?;
    if t.shape() != r.shape {
        return Err(Error::format(&path, format!("shape {:?}, manifest says {:?}", t.shape(), r.shape)));
    }
    Ok(t)
}

fn save(dir: &Path, mut m: CheckpointManifest, store: &ParamStore<f32>) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    m.params = write_store(dir, store)?;
    write_json(&dir.join(MANIFEST), &m)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::format(dir, "not a checkpoint directory (no checkpoint.json)"));
    }
    let m: CheckpointManifest = read_json(&path)?;
    if m.format != FORMAT || m.version != 1 {
        return Err(Error::format(&path, format!("unsupported format {} v{}", m.format, m.version)));
    }
    Ok(m)
}

/// Saves a retrained model (`Some(arch)`) or a supernet (`None`) into `dir`,
/// creating it if needed.
pub fn save_network(
    dir: &Path,
    net: &Network,
    architecture: Option<&Architecture>,
    provenance: serde_json::Value,
) -> Result<()> {
    let kind = match architecture {
        Some(_) => CheckpointKind::Model,
        None if net.family == BlockFamily::Searchable => CheckpointKind::Supernet,
        None => return Err(Error::Usage("a baseline network checkpoint needs its architecture".into())),
    };
    let m = CheckpointManifest {
        format: FORMAT.into(),
        version: 1,
        kind,
        seed: net.seed,
        spec: Some(net.spec),
        architecture: architecture.cloned(),
        controller: None,
        provenance,
        params: Vec::new(),
    };
    save(dir, m, &net.store)
}

/// Rebuilds the network skeleton from the manifest and fills in every
/// parameter. Names and shapes must match the skeleton exactly.
pub fn load_network(dir: &Path) -> Result<(Network, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    let path = dir.join(MANIFEST);
    let spec = m.spec.ok_or_else(|| Error::format(&path, "network checkpoint without spec"))?;
    let mut net = match (m.kind, &m.architecture) {
        (CheckpointKind::Model, Some(arch)) => init_model(spec, arch, m.seed)?,
        (CheckpointKind::Supernet, None) => Network::supernet(spec, m.seed)?,
        _ => return Err(Error::format(&path, format!("{:?} checkpoint is not a network", m.kind))),
    };
    fill(dir, &m, &mut net.store)?;
    Ok((net, m))
}

fn fill(dir: &Path, m: &CheckpointManifest, store: &mut ParamStore<f32>) -> Result<()> {
    let path = dir.join(MANIFEST);
    let expected: HashSet<&str> = store.entries().iter().map(|e| e.name.as_str()).collect();
    let listed: HashSet<&str> = m.params.iter().map(|r| r.name.as_str()).collect();
    if expected != listed || listed.len() != m.params.len() {
        let missing: Vec<_> = expected.difference(&listed).take(3).collect();
        let extra: Vec<_> = listed.difference(&expected).take(3).collect();
        return Err(Error::format(
            &path,
            format!("parameter names do not match the architecture (missing {missing:?}, unexpected {extra:?})"),
        ));
    }
    for r in &m.params {
        let id = store.find(&r.name).expect("name checked above");
        let t = read_tensor(dir, r)?;
        if t.shape() != store.value(id).shape() {
            return Err(Error::format(
                &dir.join(&r.file),
                format!("shape {:?} does not fit {:?}", t.shape(), store.value(id).shape()),
            ));
        }
        *store.value_mut(id) = t;
    }
    Ok(())
}

pub fn save_controller(
    dir: &Path,
    ctrl: &Controller<f32>,
    seed: u64,
    provenance: serde_json::Value,
) -> Result<()> {
    let m = CheckpointManifest {
        format: FORMAT.into(),
        version: 1,
        kind: CheckpointKind::Controller,
        seed,
        spec: None,
        architecture: None,
        controller: Some(ControllerMeta {
            space: ctrl.space(),
            config: ctrl.config(),
            baseline: ctrl.baseline(),
        }),
        provenance,
        params: Vec::new(),
    };
    save(dir, m, ctrl.store())
}

/// Restores a controller; optimizer moments restart from zero.
pub fn load_controller(dir: &Path) -> Result<(Controller<f32>, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    let path = dir.join(MANIFEST);
    let meta = match (m.kind, &m.controller) {
        (CheckpointKind::Controller, Some(c)) => c.clone(),
        _ => return Err(Error::format(&path, "not a controller checkpoint")),
    };
    let mut ctrl = Controller::<f32>::new(meta.space, meta.config, m.seed)?;
    let mut store = ParamStore::new();
    for r in &m.params {
        let kind = if r.buffer { ParamKind::Buffer } else { ParamKind::Trainable };
        store.add(r.name.clone(), kind, read_tensor(dir, r)?);
    }
    ctrl.restore(store, meta.baseline).map_err(|e| Error::Core {
        context: path.display().to_string(),
        source: e,
    })?;
    Ok((ctrl, m))
}
