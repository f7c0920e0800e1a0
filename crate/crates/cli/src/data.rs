use std::fs;
use std::path::{Path, PathBuf};

use bronchus_core::brongraph::BronchialGraph;
use bronchus_core::io;
use bronchus_core::pipeline::case_graph;
use bronchus_core::skeleton::SegmentOptions;
use bronchus_core::synthgen::{read_case, CaseSpec, SynthParams};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST: &str = "split.json";

/// Written by `synth` next to the case directories.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub master_seed: u64,
    pub k: usize,
    pub params: SynthParams,
    pub train: Vec<CaseSpec>,
    pub test: Vec<CaseSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
}

pub struct Dataset {
    pub names: Vec<String>,
    pub graphs: Vec<BronchialGraph>,
}

fn graph_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads either the `part` cases of a `synth` output directory (graphs
/// are rebuilt from the case volumes) or every graph JSON file in `dir`.
pub fn load(dir: &Path, part: Part) -> Result<Dataset, CliError> {
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.is_file() {
        let manifest: SplitManifest = io::read_json(&manifest_path)?;
        let specs = match part {
            Part::Train => &manifest.train,
            Part::Test => &manifest.test,
        };
        let mut names = Vec::with_capacity(specs.len());
        let mut graphs = Vec::with_capacity(specs.len());
        for spec in specs {
            let case = read_case(&dir.join(spec.name()))?;
            graphs.push(case_graph(&case, manifest.k, SegmentOptions::default())?);
            names.push(spec.name());
        }
        return Ok(Dataset { names, graphs });
    }
    let files = graph_files(dir)?;
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "{} holds neither {MANIFEST} nor graph JSON files",
            dir.display()
        )));
    }
    let mut names = Vec::with_capacity(files.len());
    let mut graphs = Vec::with_capacity(files.len());
    for f in files {
        graphs.push(BronchialGraph::read(&f)?);
        names.push(
            f.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
    }
    Ok(Dataset { names, graphs })
}
