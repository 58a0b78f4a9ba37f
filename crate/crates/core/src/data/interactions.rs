use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// String id ↔ dense index mapping, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn sorted(names: impl IntoIterator<Item = String>) -> Self {
        let mut names: Vec<String> = names.into_iter().collect();
        names.sort();
        names.dedup();
        let index = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Interner { names, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    ValidCold,
    TestCold,
}

impl Partition {
    pub fn label(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::ValidCold => "valid",
            Partition::TestCold => "test",
        }
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "valid" | "valid-cold" => Ok(Partition::ValidCold),
            "test" | "test-cold" => Ok(Partition::TestCold),
            other => Err(Error::Parameter(format!(
                "unknown partition `{other}` (expected train, valid or test)"
            ))),
        }
    }
}

/// Item-level cold-start partition of an [`InteractionSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColdStartSplit {
    pub(crate) labels: Vec<Partition>,
    pub(crate) train: Vec<Interaction>,
    pub(crate) valid: Vec<Interaction>,
    pub(crate) test: Vec<Interaction>,
}

impl ColdStartSplit {
    pub fn label(&self, item: usize) -> Partition {
        self.labels[item]
    }

    pub fn items(&self, partition: Partition) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == partition)
            .collect()
    }

    /// Records of a partition: training records, or held-out ground truth.
    pub fn records(&self, partition: Partition) -> &[Interaction] {
        match partition {
            Partition::Train => &self.train,
            Partition::ValidCold => &self.valid,
            Partition::TestCold => &self.test,
        }
    }
}

/// Binary implicit-feedback records over interned users and items.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionSet {
    pub(crate) users: Interner,
    pub(crate) items: Interner,
    pub(crate) records: Vec<Interaction>,
    pub(crate) split: Option<ColdStartSplit>,
}

impl InteractionSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a record; returns false for a duplicate.
    pub fn insert(&mut self, user: &str, item: &str, seen: &mut HashSet<Interaction>) -> bool {
        let rec = Interaction {
            user: self.users.intern(user),
            item: self.items.intern(item),
        };
        if seen.insert(rec) {
            self.records.push(rec);
            true
        } else {
            false
        }
    }

    /// Registers an item with no interactions (feature-only cold items).
    pub fn intern_item(&mut self, item: &str) -> usize {
        self.items.intern(item)
    }

    pub fn intern_user(&mut self, user: &str) -> usize {
        self.users.intern(user)
    }

    pub fn users(&self) -> &Interner {
        &self.users
    }

    pub fn items(&self) -> &Interner {
        &self.items
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// All records, before any cold-start removal.
    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn split(&self) -> Option<&ColdStartSplit> {
        self.split.as_ref()
    }

    /// Records usable for training: the train partition after a split, or
    /// every record otherwise.
    pub fn train_records(&self) -> &[Interaction] {
        match &self.split {
            Some(s) => &s.train,
            None => &self.records,
        }
    }

    pub fn train_items(&self) -> Vec<usize> {
        match &self.split {
            Some(s) => s.items(Partition::Train),
            None => (0..self.num_items()).collect(),
        }
    }

    /// Same content with users and items re-indexed in sorted id order and
    /// records sorted. Any split is dropped.
    pub fn canonical(&self) -> Self {
        let users = Interner::sorted(self.users.names.iter().cloned());
        let items = Interner::sorted(self.items.names.iter().cloned());
        let mut records: Vec<Interaction> = self
            .records
            .iter()
            .map(|r| Interaction {
                user: users.get(self.users.name(r.user)).unwrap(),
                item: items.get(self.items.name(r.item)).unwrap(),
            })
            .collect();
        records.sort_unstable();
        InteractionSet {
            users,
            items,
            records,
            split: None,
        }
    }
}

/// Reads a `user<TAB>item` file, deduplicating records.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut set = InteractionSet::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: lineno + 1,
                msg: format!("expected `user<TAB>item`, found {} field(s)", fields.len()),
            });
        }
        if !set.insert(fields[0].trim(), fields[1].trim(), &mut seen) {
            log::debug!("{}:{}: duplicate record dropped", path.display(), lineno + 1);
        }
    }
    if set.records.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} contains no interactions",
            path.display()
        )));
    }
    Ok(set)
}

pub fn save_interactions(set: &InteractionSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in &set.records {
        writeln!(out, "{}\t{}", set.users.name(r.user), set.items.name(r.item)).expect("writing to a Vec cannot fail");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
