//! File formats: environment JSON, dataset JSON-lines, success sets,
//! policies, and versioned CSV.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use rce_core::mdp::MdpFile;
use rce_core::{EnvSpec, Policy, SuccessExampleSet, TabularMdp, TransitionDataset};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// First line of every CSV the harness writes.
pub const CSV_SCHEMA_LINE: &str = "# schema=1";

#[derive(Serialize, Deserialize)]
struct EnvFile {
    spec: Option<EnvSpec>,
    mdp: MdpFile,
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| HarnessError::io(display(path), e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(display(dir), e))?;
    }
    fs::write(path, text).map_err(|e| HarnessError::io(display(path), e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: display(path),
        source,
    })
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    text
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_pretty(value))
}

pub fn env_json(spec: Option<&EnvSpec>, mdp: &TabularMdp) -> String {
    to_json_pretty(&EnvFile {
        spec: spec.cloned(),
        mdp: mdp.to_file(),
    })
}

pub fn read_env(path: &Path) -> Result<(Option<EnvSpec>, TabularMdp)> {
    let file: EnvFile = read_json(path)?;
    Ok((file.spec, TabularMdp::from_file(file.mdp)?))
}

pub fn read_dataset(path: &Path) -> Result<TransitionDataset> {
    let file = fs::File::open(path).map_err(|e| HarnessError::io(display(path), e))?;
    Ok(TransitionDataset::read_jsonl(BufReader::new(file))?)
}

pub fn write_dataset(path: &Path, data: &TransitionDataset) -> Result<()> {
    write_text(path, &data.to_jsonl_string())
}

pub fn read_successes(path: &Path) -> Result<SuccessExampleSet> {
    let set: SuccessExampleSet = read_json(path)?;
    set.validate()?;
    Ok(set)
}

pub fn read_policy(path: &Path) -> Result<Policy> {
    read_json(path)
}

/// Checks that a loaded artifact matches the environment's shape.
pub fn check_shape(what: &str, got: (usize, usize), mdp: &TabularMdp) -> Result<()> {
    let want = (mdp.num_states(), mdp.num_actions());
    if got != want {
        return Err(HarnessError::input(
            format!("{what} matches the environment shape"),
            format!("{what} is {}x{}, environment is {}x{}", got.0, got.1, want.0, want.1),
        ));
    }
    Ok(())
}
