use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::features::{load_features, save_features, ModalityFeatureTable};
use super::interactions::{load_interactions, save_interactions, InteractionSet, Partition};
use super::split::{cold_start_split, SplitRatios};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
}

/// Interactions plus features aligned to dense item indices.
///
/// Construction canonicalizes ids (users and items in sorted order), so a
/// dataset built in memory and the same dataset reloaded from disk index
/// identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub interactions: InteractionSet,
    modalities: Vec<ModalitySpec>,
    /// `features[m][item]`
    features: Vec<Vec<Option<Vec<f64>>>>,
}

impl Dataset {
    pub fn new(interactions: &InteractionSet, table: &ModalityFeatureTable) -> Result<Self> {
        if table.modalities().is_empty() {
            return Err(Error::Data("dataset has no modality features".into()));
        }
        let mut merged = interactions.clone();
        for id in table.item_ids() {
            merged.intern_item(id);
        }
        let interactions = merged.canonical();
        let modalities = table
            .modalities()
            .iter()
            .map(|m| ModalitySpec {
                name: m.name.clone(),
                dim: m.dim,
            })
            .collect();
        let features: Vec<Vec<Option<Vec<f64>>>> = table
            .modalities()
            .iter()
            .map(|m| {
                interactions
                    .items()
                    .names()
                    .iter()
                    .map(|id| m.vectors.get(id).cloned())
                    .collect()
            })
            .collect();
        let ds = Dataset {
            interactions,
            modalities,
            features,
        };
        let bare = (0..ds.num_items()).filter(|&i| !ds.has_features(i)).count();
        if bare > 0 {
            log::warn!("{bare} item(s) have no modality features");
        }
        Ok(ds)
    }

    pub fn with_split(mut self, ratios: SplitRatios, seed: u64) -> Result<Self> {
        self.interactions = cold_start_split(&self.interactions, ratios, seed)?;
        Ok(self)
    }

    pub fn modalities(&self) -> &[ModalitySpec] {
        &self.modalities
    }

    pub fn num_items(&self) -> usize {
        self.interactions.num_items()
    }

    pub fn num_users(&self) -> usize {
        self.interactions.num_users()
    }

    /// Per-modality feature slices for `item`; `None` where absent.
    pub fn item_features(&self, item: usize) -> Vec<Option<&[f64]>> {
        self.features.iter().map(|m| m[item].as_deref()).collect()
    }

    pub fn has_features(&self, item: usize) -> bool {
        self.features.iter().any(|m| m[item].is_some())
    }

    /// Items of a partition; errors if the dataset has not been split.
    pub fn partition_items(&self, partition: Partition) -> Result<Vec<usize>> {
        let split = self
            .interactions
            .split()
            .ok_or_else(|| Error::Protocol("dataset has not been split".into()))?;
        Ok(split.items(partition))
    }

    /// Rebuilds the feature table (inverse of [`Dataset::new`] on features).
    pub fn feature_table(&self) -> ModalityFeatureTable {
        let mut t = ModalityFeatureTable::new();
        for (spec, column) in self.modalities.iter().zip(&self.features) {
            for (item, v) in column.iter().enumerate() {
                if let Some(v) = v {
                    t.insert(&spec.name, self.interactions.items().name(item), v.clone())
                        .expect("dataset features are consistent");
                }
            }
        }
        t
    }
}

/// Parsed `manifest.txt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataManifest {
    pub interactions: String,
    pub modalities: Vec<(ModalitySpec, String)>,
}

impl DataManifest {
    pub fn render(&self) -> String {
        let mut out = String::from("# mamex dataset manifest\n");
        out.push_str(&format!("interactions={}\n", self.interactions));
        for (spec, file) in &self.modalities {
            out.push_str(&format!("modality={}\ndim={}\nfile={}\n", spec.name, spec.dim, file));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut interactions = None;
        let mut modalities: Vec<(String, Option<usize>, Option<String>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_owned(),
                line: lineno + 1,
                msg,
            };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key=value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "interactions" => interactions = Some(value.to_owned()),
                "modality" => modalities.push((value.to_owned(), None, None)),
                "dim" | "file" => {
                    let last = modalities
                        .last_mut()
                        .ok_or_else(|| err(format!("`{key}` before any `modality`")))?;
                    if key == "dim" {
                        last.1 = Some(value.parse().map_err(|_| err(format!("bad dim `{value}`")))?);
                    } else {
                        last.2 = Some(value.to_owned());
                    }
                }
                other => return Err(err(format!("unknown manifest key `{other}`"))),
            }
        }
        let modalities = modalities
            .into_iter()
            .map(|(name, dim, file)| {
                let dim = dim.ok_or_else(|| Error::Format(format!("modality `{name}` has no dim")))?;
                let file = file.unwrap_or_else(|| format!("{name}.tsv"));
                Ok((ModalitySpec { name, dim }, file))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DataManifest {
            interactions: interactions.unwrap_or_else(|| INTERACTIONS_FILE.to_owned()),
            modalities,
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }

    fn check_feature_files(&self, dir: &Path) -> Result<()> {
        for (spec, file) in &self.modalities {
            let path = dir.join(file);
            if !path.exists() {
                return Err(Error::Data(format!(
                    "feature file for modality `{}` not found: {}",
                    spec.name,
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// Files covered by the data hash, in manifest order.
    pub fn files(&self, dir: &Path) -> Vec<PathBuf> {
        let mut files = vec![dir.join(MANIFEST_FILE), dir.join(&self.interactions)];
        files.extend(self.modalities.iter().map(|(_, f)| dir.join(f)));
        files
    }
}

/// Writes interactions, one feature file per modality, and the manifest.
pub fn save_dataset(dir: impl AsRef<Path>, interactions: &InteractionSet, table: &ModalityFeatureTable) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_interactions(interactions, dir.join(INTERACTIONS_FILE))?;
    let mut manifest = DataManifest {
        interactions: INTERACTIONS_FILE.to_owned(),
        modalities: Vec::new(),
    };
    for m in table.modalities() {
        let file = format!("{}.tsv", m.name);
        save_features(table, &m.name, dir.join(&file))?;
        manifest.modalities.push((
            ModalitySpec {
                name: m.name.clone(),
                dim: m.dim,
            },
            file,
        ));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.render()).map_err(|e| Error::io(path, e))
}

/// Loads a dataset directory described by `manifest.txt`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = DataManifest::read(dir)?;
    manifest.check_feature_files(dir)?;
    let interactions = load_interactions(dir.join(&manifest.interactions))?;
    let mut table = ModalityFeatureTable::new();
    for (spec, file) in &manifest.modalities {
        let path = dir.join(file);
        load_features(&mut table, &path, &spec.name)?;
        let got = table.modality(&spec.name).map(|m| m.dim);
        if got != Some(spec.dim) {
            return Err(Error::Format(format!(
                "modality `{}`: manifest declares dim {} but file has {}",
                spec.name,
                spec.dim,
                got.map_or("no vectors".to_owned(), |d| d.to_string())
            )));
        }
    }
    Dataset::new(&interactions, &table)
}

/// SHA-256 over the manifest and every file it references, hex encoded.
pub fn data_hash(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let manifest = DataManifest::read(dir)?;
    manifest.check_feature_files(dir)?;
    let mut hasher = Sha256::new();
    for path in manifest.files(dir) {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticSpec};

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            n_users: 15,
            n_items: 40,
            dim: 4,
            interactions_per_user: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn save_reload_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let (set, table) = generate_synthetic(&spec()).unwrap();
        save_dataset(dir.path(), &set, &table).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let direct = Dataset::new(&set, &table).unwrap();
        assert_eq!(loaded, direct);
        // Feature-only items survive the round trip.
        assert_eq!(loaded.num_items(), 40);
        assert_eq!(loaded.feature_table(), table);
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (set, table) = generate_synthetic(&spec()).unwrap();
        save_dataset(a.path(), &set, &table).unwrap();
        save_dataset(b.path(), &set, &table).unwrap();
        assert_eq!(data_hash(a.path()).unwrap(), data_hash(b.path()).unwrap());
        fs::write(b.path().join("interactions.tsv"), "u\ti\n").unwrap();
        assert_ne!(data_hash(a.path()).unwrap(), data_hash(b.path()).unwrap());
    }

    #[test]
    fn missing_feature_file_names_modality() {
        let dir = tempfile::tempdir().unwrap();
        let (set, table) = generate_synthetic(&spec()).unwrap();
        save_dataset(dir.path(), &set, &table).unwrap();
        fs::remove_file(dir.path().join("image.tsv")).unwrap();
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("`image`"), "{msg}");
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let m = DataManifest {
            interactions: "x.tsv".into(),
            modalities: vec![(
                ModalitySpec {
                    name: "image".into(),
                    dim: 512,
                },
                "img.tsv".into(),
            )],
        };
        let p = Path::new("manifest.txt");
        assert_eq!(DataManifest::parse(&m.render(), p).unwrap(), m);
        assert!(DataManifest::parse("dim=3\n", p).is_err());
        assert!(DataManifest::parse("colour=blue\n", p).is_err());
    }
}
