//! Unified landmark protocol.
//!
//! The four datasets annotate overlapping but different landmark sets. A
//! [`ProtocolTable`] records, for every dataset, which unified landmark each
//! local index corresponds to (the forward map), the inverse relation, the
//! number of datasets annotating each unified landmark, and the per-dataset
//! index permutation applied when an image is mirrored horizontally.
//!
//! Tables are loaded from a small line-oriented mapping file:
//!
//! ```text
//! # comment
//! dataset WFLW 98
//! map WFLW 0 0
//! flip WFLW 0 32
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Number of unified landmarks across the four datasets.
pub const NUM_UNIFIED: usize = 124;

/// Total number of (dataset, local landmark) pairs: 19 + 98 + 29 + 68.
pub const TOTAL_ANNOTATIONS: usize = 214;

/// The default mapping shipped with the library.
pub const DEFAULT_MAPPING: &str = include_str!("../data/unified_124.map");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DatasetId {
    Aflw,
    Wflw,
    Cofw,
    W300,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] = [DatasetId::Aflw, DatasetId::Wflw, DatasetId::Cofw, DatasetId::W300];

    /// Landmark count of the published annotation scheme.
    pub const fn num_landmarks(self) -> usize {
        match self {
            DatasetId::Aflw => 19,
            DatasetId::Wflw => 98,
            DatasetId::Cofw => 29,
            DatasetId::W300 => 68,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            DatasetId::Aflw => "AFLW",
            DatasetId::Wflw => "WFLW",
            DatasetId::Cofw => "COFW",
            DatasetId::W300 => "300W",
        }
    }

    /// Position in [`DatasetId::ALL`].
    pub const fn index(self) -> usize {
        match self {
            DatasetId::Aflw => 0,
            DatasetId::Wflw => 1,
            DatasetId::Cofw => 2,
            DatasetId::W300 => 3,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown dataset `{0}` (expected AFLW, WFLW, COFW or 300W)")]
pub struct UnknownDataset(pub String);

impl FromStr for DatasetId {
    type Err = UnknownDataset;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "AFLW" => Ok(DatasetId::Aflw),
            "WFLW" => Ok(DatasetId::Wflw),
            "COFW" => Ok(DatasetId::Cofw),
            "300W" | "T300W" | "W300" => Ok(DatasetId::W300),
            _ => Err(UnknownDataset(s.to_string())),
        }
    }
}

/// Index into the unified landmark set, always below [`NUM_UNIFIED`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnifiedLandmarkId(u16);

impl UnifiedLandmarkId {
    pub fn new(index: usize) -> Result<Self, ProtocolError> {
        if index < NUM_UNIFIED {
            Ok(Self(index as u16))
        } else {
            Err(ProtocolError::InvalidUnified(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for UnifiedLandmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: duplicate mapping for {dataset} local index {local}")]
    DuplicateLocal { line: usize, dataset: DatasetId, local: usize },
    #[error("line {line}: {dataset} local index {local} already maps to unified id {existing}; forward map must be injective")]
    NotInjective { line: usize, dataset: DatasetId, local: usize, existing: usize },
    #[error("line {line}: unified index {index} out of range [0, {NUM_UNIFIED})")]
    UnifiedOutOfRange { line: usize, index: usize },
    #[error("line {line}: {dataset} local index {local} out of range (dataset declares {size} landmarks)")]
    LocalOutOfRange { line: usize, dataset: DatasetId, local: usize, size: usize },
    #[error("line {line}: dataset {dataset} is not declared")]
    UndeclaredDataset { line: usize, dataset: DatasetId },
    #[error("line {line}: flip entry for {dataset} index {local} conflicts with an earlier pairing")]
    FlipConflict { line: usize, dataset: DatasetId, local: usize },
    #[error("line {line}: {msg} (distinct-id/total-count mismatch)")]
    Aggregate { line: usize, msg: String },
    #[error("distinct-id/total-count mismatch: {0}")]
    Totals(String),
    #[error("invalid unified landmark id {0}")]
    InvalidUnified(usize),
    #[error("{dataset} local index {local} out of range (dataset has {size} landmarks)")]
    InvalidLocal { dataset: DatasetId, local: usize, size: usize },
    #[error("dataset {0} is not part of this protocol")]
    MissingDataset(DatasetId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct DatasetEntry {
    id: DatasetId,
    forward: Vec<UnifiedLandmarkId>,
    flip: Vec<usize>,
}

/// Immutable correspondence between dataset-local and unified landmarks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolTable {
    datasets: Vec<DatasetEntry>,
    reverse: Vec<Vec<(DatasetId, usize)>>,
}

impl ProtocolTable {
    /// The shipped 124-point protocol.
    pub fn default_table() -> Self {
        Self::load(DEFAULT_MAPPING).expect("shipped mapping file is valid")
    }

    /// Parse a mapping file and check the full four-dataset aggregates
    /// (published landmark counts, 124 distinct unified ids, 214 annotations).
    pub fn load(text: &str) -> Result<Self, ProtocolError> {
        let (table, decl_lines) = Self::parse_inner(text)?;
        for id in DatasetId::ALL {
            let Some(pos) = table.datasets.iter().position(|d| d.id == id) else {
                return Err(ProtocolError::Totals(format!("dataset {id} is not declared")));
            };
            let size = table.datasets[pos].forward.len();
            if size != id.num_landmarks() {
                return Err(ProtocolError::Aggregate {
                    line: decl_lines[pos],
                    msg: format!("dataset {id} declares {size} landmarks, expected {}", id.num_landmarks()),
                });
            }
        }
        let total = table.total_annotations();
        let distinct = table.num_unified();
        if total != TOTAL_ANNOTATIONS || distinct != NUM_UNIFIED {
            return Err(ProtocolError::Totals(format!(
                "{distinct} distinct unified ids and {total} annotations, expected {NUM_UNIFIED} and {TOTAL_ANNOTATIONS}"
            )));
        }
        Ok(table)
    }

    /// Parse a mapping file with structural validation only. Datasets may
    /// declare any size; unified ids must be dense starting from 0.
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        Self::parse_inner(text).map(|(t, _)| t)
    }

    fn parse_inner(text: &str) -> Result<(Self, Vec<usize>), ProtocolError> {
        let mut datasets: Vec<DatasetEntry> = Vec::new();
        let mut decl_lines: Vec<usize> = Vec::new();
        let mut forward: Vec<Vec<Option<(UnifiedLandmarkId, usize)>>> = Vec::new();
        let mut flip_set: Vec<Vec<Option<usize>>> = Vec::new();

        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let syntax = |msg: &str| ProtocolError::Syntax { line, msg: msg.to_string() };
            let dataset = |s: &str| -> Result<DatasetId, ProtocolError> {
                s.parse().map_err(|e: UnknownDataset| ProtocolError::Syntax { line, msg: e.to_string() })
            };
            let integer = |s: &str| -> Result<usize, ProtocolError> {
                s.parse::<usize>()
                    .map_err(|_| ProtocolError::Syntax { line, msg: format!("expected a non-negative integer, got `{s}`") })
            };
            match fields[0] {
                "dataset" => {
                    if fields.len() != 3 {
                        return Err(syntax("expected `dataset <NAME> <SIZE>`"));
                    }
                    let id = dataset(fields[1])?;
                    let size = integer(fields[2])?;
                    if datasets.iter().any(|d| d.id == id) {
                        return Err(syntax(&format!("dataset {id} declared twice")));
                    }
                    if size == 0 {
                        return Err(syntax("dataset size must be positive"));
                    }
                    datasets.push(DatasetEntry { id, forward: Vec::new(), flip: (0..size).collect() });
                    decl_lines.push(line);
                    forward.push(vec![None; size]);
                    flip_set.push(vec![None; size]);
                }
                "map" | "flip" => {
                    if fields.len() != 4 {
                        return Err(syntax(&format!("expected `{} <NAME> <a> <b>`", fields[0])));
                    }
                    let id = dataset(fields[1])?;
                    let Some(pos) = datasets.iter().position(|d| d.id == id) else {
                        return Err(ProtocolError::UndeclaredDataset { line, dataset: id });
                    };
                    let size = forward[pos].len();
                    let a = integer(fields[2])?;
                    let b = integer(fields[3])?;
                    if a >= size {
                        return Err(ProtocolError::LocalOutOfRange { line, dataset: id, local: a, size });
                    }
                    if fields[0] == "map" {
                        if b >= NUM_UNIFIED {
                            return Err(ProtocolError::UnifiedOutOfRange { line, index: b });
                        }
                        if forward[pos][a].is_some() {
                            return Err(ProtocolError::DuplicateLocal { line, dataset: id, local: a });
                        }
                        if let Some(other) = forward[pos].iter().position(|e| matches!(e, Some((u, _)) if u.index() == b)) {
                            return Err(ProtocolError::NotInjective { line, dataset: id, local: other, existing: b });
                        }
                        forward[pos][a] = Some((UnifiedLandmarkId(b as u16), line));
                    } else {
                        if b >= size {
                            return Err(ProtocolError::LocalOutOfRange { line, dataset: id, local: b, size });
                        }
                        let slots = &mut flip_set[pos];
                        for (x, y) in [(a, b), (b, a)] {
                            match slots[x] {
                                Some(prev) if prev != y => {
                                    return Err(ProtocolError::FlipConflict { line, dataset: id, local: x })
                                }
                                _ => slots[x] = Some(y),
                            }
                        }
                    }
                }
                other => return Err(syntax(&format!("unknown directive `{other}`"))),
            }
        }

        for (pos, entry) in datasets.iter_mut().enumerate() {
            let mapped = forward[pos].iter().filter(|e| e.is_some()).count();
            if mapped != forward[pos].len() {
                return Err(ProtocolError::Aggregate {
                    line: decl_lines[pos],
                    msg: format!(
                        "dataset {} declares {} landmarks but {} are mapped",
                        entry.id,
                        forward[pos].len(),
                        mapped
                    ),
                });
            }
            entry.forward = forward[pos].iter().map(|e| e.expect("checked above").0).collect();
            for (i, partner) in flip_set[pos].iter().enumerate() {
                if let Some(p) = partner {
                    entry.flip[i] = *p;
                }
            }
        }

        let mut reverse: Vec<Vec<(DatasetId, usize)>> = vec![Vec::new(); NUM_UNIFIED];
        for entry in &datasets {
            for (local, u) in entry.forward.iter().enumerate() {
                reverse[u.index()].push((entry.id, local));
            }
        }
        let used = reverse.iter().rposition(|r| !r.is_empty()).map_or(0, |p| p + 1);
        if let Some(gap) = reverse[..used].iter().position(|r| r.is_empty()) {
            return Err(ProtocolError::Totals(format!(
                "unified ids must be dense: id {gap} is unused but {} is mapped",
                used - 1
            )));
        }
        reverse.truncate(used);
        Ok((Self { datasets, reverse }, decl_lines))
    }

    fn entry(&self, ds: DatasetId) -> Result<&DatasetEntry, ProtocolError> {
        self.datasets.iter().find(|d| d.id == ds).ok_or(ProtocolError::MissingDataset(ds))
    }

    /// Datasets in declaration order.
    pub fn datasets(&self) -> impl Iterator<Item = DatasetId> + '_ {
        self.datasets.iter().map(|d| d.id)
    }

    pub fn contains(&self, ds: DatasetId) -> bool {
        self.datasets.iter().any(|d| d.id == ds)
    }

    pub fn dataset_size(&self, ds: DatasetId) -> Result<usize, ProtocolError> {
        self.entry(ds).map(|e| e.forward.len())
    }

    /// Number of distinct unified ids in use.
    pub fn num_unified(&self) -> usize {
        self.reverse.len()
    }

    pub fn total_annotations(&self) -> usize {
        self.datasets.iter().map(|d| d.forward.len()).sum()
    }

    pub fn map_forward(&self, ds: DatasetId, local: usize) -> Result<UnifiedLandmarkId, ProtocolError> {
        let entry = self.entry(ds)?;
        entry
            .forward
            .get(local)
            .copied()
            .ok_or(ProtocolError::InvalidLocal { dataset: ds, local, size: entry.forward.len() })
    }

    /// Full forward map of one dataset, indexed by local landmark.
    pub fn forward(&self, ds: DatasetId) -> Result<&[UnifiedLandmarkId], ProtocolError> {
        self.entry(ds).map(|e| e.forward.as_slice())
    }

    pub fn map_reverse(&self, p: UnifiedLandmarkId) -> Result<&[(DatasetId, usize)], ProtocolError> {
        self.reverse.get(p.index()).map(Vec::as_slice).ok_or(ProtocolError::InvalidUnified(p.index()))
    }

    /// Number of datasets annotating `p`.
    pub fn count(&self, p: UnifiedLandmarkId) -> Result<usize, ProtocolError> {
        self.map_reverse(p).map(<[_]>::len)
    }

    /// Whether dataset `ds` annotates unified landmark `p`.
    pub fn indicator(&self, ds: DatasetId, p: UnifiedLandmarkId) -> bool {
        self.reverse.get(p.index()).is_some_and(|r| r.iter().any(|(d, _)| *d == ds))
    }

    pub fn counts(&self) -> Vec<usize> {
        self.reverse.iter().map(Vec::len).collect()
    }

    /// Local index permutation for horizontal mirroring.
    pub fn flip_permutation(&self, ds: DatasetId) -> Result<&[usize], ProtocolError> {
        self.entry(ds).map(|e| e.flip.as_slice())
    }

    /// Serialize in the mapping-file format; `parse` of the output yields an equal table.
    pub fn to_config_string(&self) -> String {
        let mut out = String::from("# unified landmark protocol\n");
        for d in &self.datasets {
            out.push_str(&format!("dataset {} {}\n", d.id, d.forward.len()));
        }
        for d in &self.datasets {
            for (local, u) in d.forward.iter().enumerate() {
                out.push_str(&format!("map {} {} {}\n", d.id, local, u));
            }
        }
        for d in &self.datasets {
            for (a, &b) in d.flip.iter().enumerate() {
                if a < b {
                    out.push_str(&format!("flip {} {} {}\n", d.id, a, b));
                }
            }
        }
        out
    }
}
