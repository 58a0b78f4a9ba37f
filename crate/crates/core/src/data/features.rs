use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// Dense vectors for one modality, keyed by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatures {
    pub name: String,
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

/// Precomputed per-item feature vectors for every modality. An item is
/// present in a modality iff it has a vector there.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModalityFeatureTable {
    modalities: Vec<ModalityFeatures>,
}

impl ModalityFeatureTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn modalities(&self) -> &[ModalityFeatures] {
        &self.modalities
    }

    pub fn modality(&self, name: &str) -> Option<&ModalityFeatures> {
        self.modalities.iter().find(|m| m.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.modalities.iter().map(|m| m.name.as_str()).collect()
    }

    pub fn is_present(&self, modality: &str, item: &str) -> bool {
        self.modality(modality).is_some_and(|m| m.vectors.contains_key(item))
    }

    /// Adds one vector. Dimension is fixed by the first vector of a modality.
    pub fn insert(&mut self, modality: &str, item: &str, vector: Vec<f64>) -> Result<()> {
        let pos = match self.modalities.iter().position(|m| m.name == modality) {
            Some(p) => p,
            None => {
                if vector.is_empty() {
                    return Err(Error::Format(format!(
                        "empty feature vector for item `{item}` in `{modality}`"
                    )));
                }
                self.modalities.push(ModalityFeatures {
                    name: modality.to_owned(),
                    dim: vector.len(),
                    vectors: BTreeMap::new(),
                });
                self.modalities.len() - 1
            }
        };
        let m = &mut self.modalities[pos];
        if vector.len() != m.dim {
            return Err(Error::Format(format!(
                "item `{item}` in `{modality}` has dimension {}, expected {}",
                vector.len(),
                m.dim
            )));
        }
        if let Some(v) = vector.iter().find(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite value {v} for item `{item}` in `{modality}`"
            )));
        }
        if m.vectors.insert(item.to_owned(), vector).is_some() {
            return Err(Error::Format(format!("item `{item}` listed twice in `{modality}`")));
        }
        Ok(())
    }

    /// Every item id with at least one present modality, sorted.
    pub fn item_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self
            .modalities
            .iter()
            .flat_map(|m| m.vectors.keys().map(String::as_str))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Reads `item<TAB>v1,v2,...,vd` lines into `table` under `modality`.
/// Returns the number of vectors read.
pub fn load_features(table: &mut ModalityFeatureTable, path: impl AsRef<Path>, modality: &str) -> Result<usize> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_owned(),
        line,
        msg,
    };
    let mut count = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (item, values) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(lineno + 1, "expected `item<TAB>values`".into()))?;
        let vector = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(lineno + 1, format!("non-numeric value `{v}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        table.insert(modality, item.trim(), vector).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}:{}: {msg}", path.display(), lineno + 1)),
            other => other,
        })?;
        count += 1;
    }
    Ok(count)
}

pub fn save_features(table: &ModalityFeatureTable, modality: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let m = table
        .modality(modality)
        .ok_or_else(|| Error::Data(format!("no modality `{modality}` to save")))?;
    let mut out = Vec::new();
    for (item, v) in &m.vectors {
        // `{}` prints the shortest representation that parses back exactly.
        let joined: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
        writeln!(out, "{item}\t{}", joined.join(",")).expect("writing to a Vec cannot fail");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
