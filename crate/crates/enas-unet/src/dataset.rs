//! Dataset directories: `dataset.json` plus one directory per volume under
//! each split, holding `intensity.dten`, `labels.dten` and `meta.json`.

use std::path::{Path, PathBuf};

use enas_unet_core::datagen::{generate, Boundaries, Dataset, GenConfig, Split, Volume};
use serde::{Deserialize, Serialize};

use crate::dten;
use crate::error::{Error, IoContext, Result};
use crate::fsutil::{read_json, write_json};

pub const MANIFEST: &str = "dataset.json";
const FORMAT: &str = "enas-unet-dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub generator: GenConfig,
    pub rank: usize,
    /// Volume count per split, in train/reward/val/test order.
    pub counts: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeMeta {
    pub split: Split,
    pub index: usize,
    /// Generator index of the B-scan this volume is or was cut from.
    pub scan: usize,
    /// Column within that B-scan for A-scans.
    pub column: Option<usize>,
    pub seed: u64,
    pub boundaries: Option<Boundaries>,
}

fn volume_dir(root: &Path, split: Split, index: usize) -> PathBuf {
    root.join(split.name()).join(format!("{index:05}"))
}

/// Generates a dataset and writes it into `dir`.
pub fn generate_to(dir: &Path, cfg: &GenConfig) -> Result<(DatasetManifest, Dataset)> {
    let data = generate(cfg)?;
    let per_scan = if cfg.rank == 1 { cfg.width } else { 1 };
    let mut scan_base = 0;
    for s in Split::ALL {
        for (i, v) in data.split(s).iter().enumerate() {
            let meta = VolumeMeta {
                split: s,
                index: i,
                scan: scan_base + i / per_scan,
                column: (cfg.rank == 1).then_some(i % per_scan),
                seed: cfg.seed,
                boundaries: v.boundaries.clone(),
            };
            write_volume(&volume_dir(dir, s, i), v, &meta)?;
        }
        scan_base += data.split(s).len() / per_scan;
    }
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        version: 1,
        generator: *cfg,
        rank: cfg.rank,
        counts: Split::ALL.map(|s| data.split(s).len()),
    };
    // written last: a directory with a manifest is complete
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok((manifest, data))
}

pub fn write_volume(dir: &Path, v: &Volume, meta: &VolumeMeta) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    dten::write(&dir.join("intensity.dten"), &v.intensity)?;
    dten::write_labels(&dir.join("labels.dten"), &v.intensity.shape()[2..], &v.labels)?;
    write_json(&dir.join("meta.json"), meta)
}

pub fn read_volume(dir: &Path) -> Result<(Volume, VolumeMeta)> {
    let intensity = dten::read(&dir.join("intensity.dten"))?;
    let labels_path = dir.join("labels.dten");
    let (shape, labels) = dten::read_labels(&labels_path)?;
    if intensity.shape().get(2..) != Some(&shape[..]) {
        return Err(Error::format(
            &labels_path,
            format!("label shape {shape:?} does not match intensity shape {:?}", intensity.shape()),
        ));
    }
    let meta: VolumeMeta = read_json(&dir.join("meta.json"))?;
    let v = Volume::new(intensity, labels, meta.boundaries.clone()).map_err(|e| Error::Core {
        context: dir.display().to_string(),
        source: e,
    })?;
    Ok((v, meta))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::format(dir, "not a dataset directory (no dataset.json)"));
    }
    let m: DatasetManifest = read_json(&path)?;
    if m.format != FORMAT || m.version != 1 {
        return Err(Error::format(&path, format!("unsupported format {} v{}", m.format, m.version)));
    }
    Ok(m)
}

/// Loads every split listed in the manifest.
pub fn load(dir: &Path) -> Result<(DatasetManifest, Dataset)> {
    let m = read_manifest(dir)?;
    let mut data = Dataset::default();
    for (s, &n) in Split::ALL.iter().zip(&m.counts) {
        let vols = data.split_mut(*s);
        for i in 0..n {
            let vdir = volume_dir(dir, *s, i);
            let (v, meta) = read_volume(&vdir)?;
            if v.rank() != m.rank || meta.split != *s || meta.index != i {
                return Err(Error::format(&vdir, "volume does not match its place in the dataset"));
            }
            vols.push(v);
        }
        let extra = volume_dir(dir, *s, n);
        if extra.exists() {
            return Err(Error::format(&extra, "more volumes on disk than dataset.json lists"));
        }
    }
    Ok((m, data))
}
