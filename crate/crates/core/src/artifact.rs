//! On-disk artifacts: JSON-lines datasets, JSON documents, content hashes and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocation::{BudgetSpec, Parity};
use crate::criteria::{Criterion, ImportanceScores, PruningOrder};
use crate::error::{Error, Result};
use crate::fitness::{dataset_hash, SearchSample};
use crate::model::{MoEModel, ModelSpec};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_bytes(path)?)))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Pretty JSON with a trailing newline; identical values always give identical bytes.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads either a bare model spec or a [`ModelArtifact`], verifying the artifact's hashes.
pub fn load_model_spec(path: &Path) -> Result<ModelSpec> {
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|_| Error::validation("model spec", format!("{} is not UTF-8", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if value.get("spec").is_some() {
        let artifact: ModelArtifact =
            serde_json::from_value(value).map_err(|e| Error::json(path.display().to_string(), e))?;
        return artifact.verify();
    }
    ModelSpec::from_json(&text)
}

/// A validated spec together with its hash and the checksum of the weights it generates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    pub model_spec_hash: String,
    pub weight_sha256: String,
    pub spec: ModelSpec,
}

impl ModelArtifact {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let model = MoEModel::build(&spec)?;
        Ok(Self {
            model_spec_hash: spec.hash(),
            weight_sha256: model.checksum(),
            spec,
        })
    }

    /// Re-validates the spec and checks the recorded spec hash.
    pub fn verify(self) -> Result<ModelSpec> {
        self.spec.validate()?;
        let actual = self.spec.hash();
        if actual != self.model_spec_hash {
            return Err(Error::Staleness(format!(
                "model artifact records spec hash {}, contents hash to {actual}",
                self.model_spec_hash
            )));
        }
        Ok(self.spec)
    }
}

/// Parses `{prompt: [...], answer: [...]}` lines, validating each against `spec`.
///
/// Blank lines are skipped; errors carry the 1-based line number.
pub fn parse_dataset(text: &str, spec: &ModelSpec) -> Result<Vec<SearchSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: Error| Error::AtLine {
            line: i + 1,
            source: Box::new(e),
        };
        let sample: SearchSample = serde_json::from_str(line).map_err(|e| at(Error::json("dataset", e)))?;
        sample.validate(spec).map_err(at)?;
        out.push(sample);
    }
    if out.is_empty() {
        return Err(Error::Data("dataset has no samples".into()));
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, spec: &ModelSpec) -> Result<Vec<SearchSample>> {
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|_| Error::validation("dataset", format!("{} is not UTF-8", path.display())))?;
    parse_dataset(&text, spec)
}

pub fn dataset_to_jsonl(samples: &[SearchSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("samples serialize"));
        out.push('\n');
    }
    out
}

/// Hashes of the inputs an artifact was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_spec_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
}

impl Provenance {
    pub fn new(spec: &ModelSpec, dataset: Option<&[SearchSample]>) -> Self {
        Self {
            model_spec_hash: spec.hash(),
            dataset_hash: dataset.map(dataset_hash),
        }
    }

    /// Refuses artifacts derived from a different model spec.
    pub fn check_model(&self, spec: &ModelSpec, what: &str) -> Result<()> {
        let actual = spec.hash();
        if self.model_spec_hash != actual {
            return Err(Error::Staleness(format!(
                "{what} was derived from model spec {}, not {actual}",
                self.model_spec_hash
            )));
        }
        Ok(())
    }
}

/// Importance scores with the hashes of the model and calibration data behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresArtifact {
    pub provenance: Provenance,
    pub scores: ImportanceScores,
}

/// A pruning order with the hashes of the model and calibration data behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderArtifact {
    pub provenance: Provenance,
    pub criterion: Criterion,
    pub pi: Vec<Vec<usize>>,
}

impl OrderArtifact {
    /// The order, after checking it was built for `spec`.
    pub fn order_for(&self, spec: &ModelSpec) -> Result<PruningOrder> {
        self.provenance.check_model(spec, "pruning order")?;
        let order = PruningOrder::new(self.pi.clone())?;
        order.check_against(spec)?;
        Ok(order)
    }
}

/// Budget file: caps default to the model's `n - k` and must match them when given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetFile {
    pub budget: usize,
    #[serde(default)]
    pub parity: Parity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caps: Option<Vec<usize>>,
}

impl BudgetFile {
    pub fn resolve(&self, spec: &ModelSpec) -> Result<BudgetSpec> {
        if let Some(caps) = &self.caps {
            if *caps != spec.caps() {
                return Err(Error::validation(
                    "caps",
                    format!("{caps:?} differ from the model's n - k {:?}", spec.caps()),
                ));
            }
        }
        BudgetSpec::for_model(spec, self.budget, self.parity)
    }
}

/// Everything a search or brute-force run needs, with content hashes of each input file.
///
/// Relative paths resolve against the manifest's own directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub model_spec: PathBuf,
    pub dataset: PathBuf,
    pub criterion: Criterion,
    pub order: PathBuf,
    pub budget: PathBuf,
    pub search_config: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    /// SHA-256 of each input file, keyed by field name.
    pub hashes: BTreeMap<String, String>,
    #[serde(skip)]
    base: PathBuf,
}

impl RunManifest {
    #[allow(clippy::too_many_arguments)]
    /// Builds a manifest and records the current hash of every input. Paths are kept as given.
    pub fn create(
        base: &Path,
        model_spec: PathBuf,
        dataset: PathBuf,
        criterion: Criterion,
        order: PathBuf,
        budget: PathBuf,
        search_config: PathBuf,
        output_dir: PathBuf,
        cache: Option<PathBuf>,
    ) -> Result<Self> {
        let mut m = Self {
            model_spec,
            dataset,
            criterion,
            order,
            budget,
            search_config,
            output_dir,
            cache,
            hashes: BTreeMap::new(),
            base: base.to_path_buf(),
        };
        for (name, path) in m.inputs() {
            let h = file_hash(&m.resolve(&path))?;
            m.hashes.insert(name.to_string(), h);
        }
        Ok(m)
    }

    /// Reads a manifest and verifies that every input exists and still matches its hash.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: RunManifest = read_json(path)?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.verify()?;
        Ok(m)
    }

    fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        let mut v = vec![
            ("model_spec", self.model_spec.clone()),
            ("dataset", self.dataset.clone()),
            ("order", self.order.clone()),
            ("budget", self.budget.clone()),
            ("search_config", self.search_config.clone()),
        ];
        if let Some(c) = &self.cache {
            v.push(("cache", c.clone()));
        }
        v
    }

    pub fn verify(&self) -> Result<()> {
        for (name, path) in self.inputs() {
            let expected = self
                .hashes
                .get(name)
                .ok_or_else(|| Error::validation("hashes", format!("no hash recorded for {name}")))?;
            let actual = file_hash(&self.resolve(&path))?;
            if &actual != expected {
                return Err(Error::Staleness(format!(
                    "{name} ({}) changed since the manifest was written",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec::uniform(1, 2, 1, 4, 4, 10, 6, 0, 0.5)
    }

    #[test]
    fn dataset_lines_parse_and_report_line_numbers() {
        let text = "{\"prompt\":[1,2],\"answer\":[3]}\n\n{\"prompt\":[4],\"answer\":[5,6]}\n";
        let ds = parse_dataset(text, &spec()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(dataset_to_jsonl(&ds), text.replace("\n\n", "\n"));

        let long = "{\"prompt\":[1],\"answer\":[1]}\n{\"prompt\":[1,2,3,4],\"answer\":[5,6,7]}\n";
        match parse_dataset(long, &spec()) {
            Err(Error::AtLine { line: 2, source }) => assert!(matches!(*source, Error::Length { len: 7, max: 6 })),
            other => panic!("expected a line-2 length error, got {other:?}"),
        }
        assert!(matches!(parse_dataset("\n", &spec()), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_detects_changed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let names = ["spec.json", "data.jsonl", "order.json", "budget.json", "config.json"];
        for n in names {
            std::fs::write(dir.path().join(n), n).unwrap();
        }
        let m = RunManifest::create(
            dir.path(),
            names[0].into(),
            names[1].into(),
            Criterion::Reap,
            names[2].into(),
            names[3].into(),
            names[4].into(),
            "out".into(),
            None,
        )
        .unwrap();
        let path = dir.path().join("manifest.json");
        write_json(&path, &m).unwrap();
        assert!(RunManifest::load(&path).is_ok());
        std::fs::write(dir.path().join("order.json"), "changed").unwrap();
        assert!(matches!(RunManifest::load(&path), Err(Error::Staleness(_))));
        std::fs::remove_file(dir.path().join("order.json")).unwrap();
        assert!(matches!(RunManifest::load(&path), Err(Error::Io { .. })));
    }
}
