//! On-disk parameter checkpoints: one tensor container per learnable plus a
//! JSON manifest.

use super::params::{BasisSet, Branch, CbbParams, SampleQueries};
use crate::error::{CbbError, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "cbb-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub channels: usize,
    pub basis_count: usize,
    pub sample_queries: usize,
    pub ridge: f64,
    pub seed: u64,
    pub share_branches: bool,
    /// Parameter name to file name, relative to the checkpoint directory.
    pub tensors: BTreeMap<String, String>,
}

pub fn save_checkpoint(params: &CbbParams, dir: &Path) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    for (name, t) in params
        .learnable_names()
        .into_iter()
        .zip(params.learnables())
    {
        let file = format!("{name}.cbtn");
        let mut w = BufWriter::new(File::create(dir.join(&file))?);
        write_tensor(&mut w, t)?;
        w.flush()?;
        tensors.insert(name.to_string(), file);
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: 1,
        channels: params.channels(),
        basis_count: params.k(),
        sample_queries: params.s(),
        ridge: params.ridge(),
        seed: params.seed(),
        share_branches: params.shares_branches(),
        tensors,
    };
    let mut w = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<CbbParams> {
    let manifest: CheckpointManifest =
        serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(CbbError::Format(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let load = |name: &str| -> Result<Tensor> {
        let file = manifest
            .tensors
            .get(name)
            .ok_or_else(|| CbbError::Format(format!("checkpoint lacks `{name}`")))?;
        read_tensor(BufReader::new(File::open(dir.join(file))?))
    };
    let branch = |prefix: &str| -> Result<Branch> {
        Branch::new(
            BasisSet::new(load(&format!("{prefix}_bases"))?, manifest.ridge)?,
            SampleQueries::new(load(&format!("{prefix}_queries"))?)?,
        )
    };
    let x = branch("x")?;
    let m = if manifest.share_branches {
        None
    } else {
        Some(branch("m")?)
    };
    let params = CbbParams::new(x, m, load("conv_w")?, manifest.seed)?;
    if params.channels() != manifest.channels
        || params.k() != manifest.basis_count
        || params.s() != manifest.sample_queries
    {
        return Err(CbbError::Format(
            "checkpoint tensors disagree with manifest dimensions".into(),
        ));
    }
    Ok(params)
}
