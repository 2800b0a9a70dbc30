//! Dataset schema, CSV ingestion, seeded splits and a binary cache.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Binclass,
    Multiclass { n_classes: usize },
}

impl TaskKind {
    /// Width of the model output layer.
    pub fn output_dim(self) -> usize {
        match self {
            TaskKind::Regression | TaskKind::Binclass => 1,
            TaskKind::Multiclass { n_classes } => n_classes,
        }
    }

    pub fn is_classification(self) -> bool {
        !matches!(self, TaskKind::Regression)
    }

    pub fn n_classes(self) -> Option<usize> {
        match self {
            TaskKind::Regression => None,
            TaskKind::Binclass => Some(2),
            TaskKind::Multiclass { n_classes } => Some(n_classes),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numerical,
    Categorical,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub columns: Vec<ColumnSpec>,
    pub task: TaskKind,
    /// Map categories unseen by the dictionary to a reserved trailing index
    /// instead of failing.
    #[serde(default)]
    pub allow_unknown_categories: bool,
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<()> {
        let targets = self.columns.iter().filter(|c| c.kind == ColumnKind::Target).count();
        if targets != 1 {
            return Err(Error::config("dataset.columns", format!("expected exactly one target column, found {targets}")));
        }
        if let TaskKind::Multiclass { n_classes } = self.task {
            if n_classes < 2 {
                return Err(Error::config("dataset.task", "class count must be at least 2"));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.columns {
            if !seen.insert(&c.name) {
                return Err(Error::config("dataset.columns", format!("duplicate column `{}`", c.name)));
            }
        }
        Ok(())
    }

    fn names(&self, kind: ColumnKind) -> Vec<String> {
        self.columns.iter().filter(|c| c.kind == kind).map(|c| c.name.clone()).collect()
    }
}

/// Dictionary encoder for one categorical column, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDictionary {
    pub values: Vec<String>,
}

impl CategoryDictionary {
    fn index(&self) -> HashMap<&str, usize> {
        self.values.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect()
    }

    pub fn encode_growing(&mut self, col: &[String]) -> Vec<usize> {
        let mut map: HashMap<String, usize> =
            self.values.iter().enumerate().map(|(i, v)| (v.clone(), i)).collect();
        col.iter()
            .map(|v| {
                *map.entry(v.clone()).or_insert_with(|| {
                    self.values.push(v.clone());
                    self.values.len() - 1
                })
            })
            .collect()
    }

    pub fn decode(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.values.get(i).cloned().unwrap_or_else(|| "<unknown>".into())).collect()
    }
}

/// A fully parsed, not yet split table.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub num_names: Vec<String>,
    pub cat_names: Vec<String>,
    pub task: TaskKind,
    pub n_rows: usize,
    /// Row-major `n_rows × k_num`.
    pub x_num: Vec<f64>,
    /// Row-major `n_rows × k_cat`.
    pub x_cat: Vec<usize>,
    pub cardinalities: Vec<usize>,
    pub dictionaries: Vec<CategoryDictionary>,
    pub y: Vec<f64>,
}

/// Load a headered UTF-8 CSV. Categorical columns are dictionary-encoded in
/// first-appearance order.
pub fn load_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<RawTable> {
    load_csv_impl(path.as_ref(), schema, None)
}

/// Load a CSV reusing dictionaries from an earlier table. Unseen categories
/// are an error unless the schema opts into the reserved index.
pub fn load_csv_with_dictionaries(
    path: impl AsRef<Path>,
    schema: &DatasetSchema,
    dictionaries: &[CategoryDictionary],
) -> Result<RawTable> {
    load_csv_impl(path.as_ref(), schema, Some(dictionaries))
}

fn load_csv_impl(path: &Path, schema: &DatasetSchema, dicts: Option<&[CategoryDictionary]>) -> Result<RawTable> {
    schema.validate()?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse { row: 0, column: String::new(), reason: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    let position = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 0,
            column: name.to_string(),
            reason: "column missing from header".into(),
        })
    };
    let num_names = schema.names(ColumnKind::Numerical);
    let cat_names = schema.names(ColumnKind::Categorical);
    let target_name = schema.names(ColumnKind::Target).remove(0);
    let num_pos: Vec<usize> = num_names.iter().map(|n| position(n)).collect::<Result<_>>()?;
    let cat_pos: Vec<usize> = cat_names.iter().map(|n| position(n)).collect::<Result<_>>()?;
    let target_pos = position(&target_name)?;

    let mut x_num = Vec::new();
    let mut cat_cols: Vec<Vec<String>> = vec![Vec::new(); cat_names.len()];
    let mut y = Vec::new();
    let mut n_rows = 0;
    for (r, rec) in reader.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Parse { row, column: String::new(), reason: e.to_string() })?;
        for (&p, name) in num_pos.iter().zip(&num_names) {
            let cell = rec.get(p).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: name.clone(),
                reason: format!("`{cell}` is not a number"),
            })?;
            x_num.push(v);
        }
        for (c, &p) in cat_pos.iter().enumerate() {
            cat_cols[c].push(rec.get(p).unwrap_or("").to_string());
        }
        let cell = rec.get(target_pos).unwrap_or("");
        let label = parse_target(cell, schema.task).map_err(|reason| Error::Parse {
            row,
            column: target_name.clone(),
            reason,
        })?;
        y.push(label);
        n_rows += 1;
    }

    let mut dictionaries = Vec::with_capacity(cat_names.len());
    let mut encoded = Vec::with_capacity(cat_names.len());
    let mut cardinalities = Vec::with_capacity(cat_names.len());
    for (c, col) in cat_cols.iter().enumerate() {
        match dicts {
            None => {
                let mut d = CategoryDictionary::default();
                encoded.push(d.encode_growing(col));
                cardinalities.push(d.values.len());
                dictionaries.push(d);
            }
            Some(ds) => {
                let d = ds.get(c).ok_or_else(|| Error::Data("dictionary count does not match schema".into()))?;
                let index = d.index();
                let reserved = d.values.len();
                let mut out = Vec::with_capacity(col.len());
                for (r, v) in col.iter().enumerate() {
                    match index.get(v.as_str()) {
                        Some(&i) => out.push(i),
                        None if schema.allow_unknown_categories => out.push(reserved),
                        None => {
                            return Err(Error::Parse {
                                row: r + 1,
                                column: cat_names[c].clone(),
                                reason: format!("unknown category `{v}`"),
                            })
                        }
                    }
                }
                encoded.push(out);
                cardinalities.push(reserved + usize::from(schema.allow_unknown_categories));
                dictionaries.push(d.clone());
            }
        }
    }
    let k_cat = cat_names.len();
    let mut x_cat = vec![0usize; n_rows * k_cat];
    for (c, col) in encoded.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            x_cat[r * k_cat + c] = v;
        }
    }
    Ok(RawTable {
        num_names,
        cat_names,
        task: schema.task,
        n_rows,
        x_num,
        x_cat,
        cardinalities,
        dictionaries,
        y,
    })
}

fn parse_target(cell: &str, task: TaskKind) -> std::result::Result<f64, String> {
    let cell = cell.trim();
    match task.n_classes() {
        None => cell.parse::<f64>().map_err(|_| format!("`{cell}` is not a number")),
        Some(c) => {
            let v: usize = cell
                .parse::<usize>()
                .or_else(|_| cell.parse::<f64>().ok().filter(|f| f.fract() == 0.0 && *f >= 0.0).map(|f| f as usize).ok_or(()))
                .map_err(|_| format!("`{cell}` is not a class index"))?;
            if v >= c {
                return Err(format!("class {v} outside [0, {c})"));
            }
            Ok(v as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffled partition of `0..n` with sizes `floor(n·r_train)`,
/// `floor(n·r_val)` and the remainder for test.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("dataset.split", format!("ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let n_train = ((n as f64) * ratios[0] + 1e-9).floor() as usize;
    let n_val = ((n as f64) * ratios[1] + 1e-9).floor() as usize;
    let n_test = n.saturating_sub(n_train + n_val);
    for (name, size) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if size == 0 {
            return Err(Error::config("dataset.split", format!("{name} split would be empty for {n} rows with ratios {ratios:?}")));
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, rng::streams::SPLIT));
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(SplitIndices { train: idx, val, test })
}

/// One split's rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub n: usize,
    pub x_num: Vec<f64>,
    pub x_cat: Vec<usize>,
    pub y: Vec<f64>,
}

impl Split {
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Gather the given rows.
    pub fn select(&self, rows: &[usize], k_num: usize, k_cat: usize) -> Split {
        let mut s = Split { n: rows.len(), ..Default::default() };
        s.x_num.reserve(rows.len() * k_num);
        s.x_cat.reserve(rows.len() * k_cat);
        for &r in rows {
            s.x_num.extend_from_slice(&self.x_num[r * k_num..(r + 1) * k_num]);
            s.x_cat.extend_from_slice(&self.x_cat[r * k_cat..(r + 1) * k_cat]);
            s.y.push(self.y[r]);
        }
        s
    }

    pub fn num_column(&self, j: usize, k_num: usize) -> Vec<f64> {
        (0..self.n).map(|r| self.x_num[r * k_num + j]).collect()
    }

    pub fn class_labels(&self) -> Vec<usize> {
        self.y.iter().map(|&v| v as usize).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// Train/val/test data with a feature layout. Reads of the test split go
/// through [`TabularDataset::test`], which is counted.
#[derive(Debug)]
pub struct TabularDataset {
    pub num_names: Vec<String>,
    pub cat_names: Vec<String>,
    pub cardinalities: Vec<usize>,
    pub task: TaskKind,
    pub train: Split,
    pub val: Split,
    test: Split,
    test_reads: AtomicUsize,
}

impl Clone for TabularDataset {
    fn clone(&self) -> Self {
        TabularDataset {
            num_names: self.num_names.clone(),
            cat_names: self.cat_names.clone(),
            cardinalities: self.cardinalities.clone(),
            task: self.task,
            train: self.train.clone(),
            val: self.val.clone(),
            test: self.test.clone(),
            test_reads: AtomicUsize::new(0),
        }
    }
}

impl TabularDataset {
    pub fn new(
        num_names: Vec<String>,
        cat_names: Vec<String>,
        cardinalities: Vec<usize>,
        task: TaskKind,
        train: Split,
        val: Split,
        test: Split,
    ) -> Result<Self> {
        let ds = TabularDataset {
            num_names,
            cat_names,
            cardinalities,
            task,
            train,
            val,
            test,
            test_reads: AtomicUsize::new(0),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_table(table: &RawTable, split: &SplitIndices) -> Result<Self> {
        let mut seen = vec![false; table.n_rows];
        for &i in split.train.iter().chain(&split.val).chain(&split.test) {
            if i >= table.n_rows || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("split index {i} duplicated or out of range")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("splits do not cover every row".into()));
        }
        let full = Split {
            n: table.n_rows,
            x_num: table.x_num.clone(),
            x_cat: table.x_cat.clone(),
            y: table.y.clone(),
        };
        let (kn, kc) = (table.num_names.len(), table.cat_names.len());
        Self::new(
            table.num_names.clone(),
            table.cat_names.clone(),
            table.cardinalities.clone(),
            table.task,
            full.select(&split.train, kn, kc),
            full.select(&split.val, kn, kc),
            full.select(&split.test, kn, kc),
        )
    }

    fn validate(&self) -> Result<()> {
        let (kn, kc) = (self.k_num(), self.k_cat());
        if self.cardinalities.len() != kc {
            return Err(Error::Data("one cardinality per categorical feature required".into()));
        }
        for (name, s) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if s.x_num.len() != s.n * kn || s.x_cat.len() != s.n * kc || s.y.len() != s.n {
                return Err(Error::Data(format!("{name} split arrays do not match its row count")));
            }
            for (i, &c) in s.x_cat.iter().enumerate() {
                if c >= self.cardinalities[i % kc] {
                    return Err(Error::Data(format!("{name}: category {c} outside [0, {})", self.cardinalities[i % kc])));
                }
            }
            if let Some(nc) = self.task.n_classes() {
                if s.y.iter().any(|&y| y < 0.0 || y.fract() != 0.0 || y as usize >= nc) {
                    return Err(Error::Data(format!("{name}: labels must be class indices below {nc}")));
                }
            }
        }
        Ok(())
    }

    pub fn k_num(&self) -> usize {
        self.num_names.len()
    }

    pub fn k_cat(&self) -> usize {
        self.cat_names.len()
    }

    pub fn n_features(&self) -> usize {
        self.k_num() + self.k_cat()
    }

    /// The test split. Every call is recorded; see [`TabularDataset::test_reads`].
    pub fn test(&self) -> &Split {
        self.test_reads.fetch_add(1, Ordering::Relaxed);
        &self.test
    }

    pub fn test_reads(&self) -> usize {
        self.test_reads.load(Ordering::Relaxed)
    }

    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => self.test(),
        }
    }

    /// Apply a row-wise transform to every split without auditing a test read.
    pub(crate) fn for_each_split_mut(&mut self, mut f: impl FnMut(&mut Split)) {
        f(&mut self.train);
        f(&mut self.val);
        f(&mut self.test);
    }

    pub fn save_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = CacheHeader {
            num_names: self.num_names.clone(),
            cat_names: self.cat_names.clone(),
            cardinalities: self.cardinalities.clone(),
            task: self.task,
            sizes: [self.train.n, self.val.n, self.test.n],
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(CACHE_MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for s in [&self.train, &self.val, &self.test] {
            for v in &s.x_num {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            for v in &s.x_cat {
                w.write_all(&(*v as u64).to_le_bytes()).map_err(io)?;
            }
            for v in &s.y {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Data(format!("{} is not a dataset cache", path.display())));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(io)?;
        let h: CacheHeader = serde_json::from_slice(&json).map_err(|e| Error::Data(e.to_string()))?;
        let (kn, kc) = (h.num_names.len(), h.cat_names.len());
        let mut read_split = |n: usize| -> Result<Split> {
            let mut buf = [0u8; 8];
            let mut f64s = |count: usize, r: &mut BufReader<File>| -> Result<Vec<f64>> {
                (0..count)
                    .map(|_| {
                        r.read_exact(&mut buf).map_err(io)?;
                        Ok(f64::from_le_bytes(buf))
                    })
                    .collect()
            };
            let x_num = f64s(n * kn, &mut r)?;
            let x_cat = (0..n * kc)
                .map(|_| {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b).map_err(io)?;
                    Ok(u64::from_le_bytes(b) as usize)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut buf2 = [0u8; 8];
            let y = (0..n)
                .map(|_| {
                    r.read_exact(&mut buf2).map_err(io)?;
                    Ok(f64::from_le_bytes(buf2))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Split { n, x_num, x_cat, y })
        };
        let train = read_split(h.sizes[0])?;
        let val = read_split(h.sizes[1])?;
        let test = read_split(h.sizes[2])?;
        Self::new(h.num_names, h.cat_names, h.cardinalities, h.task, train, val, test)
    }
}

const CACHE_MAGIC: &[u8; 8] = b"TABDLDS1";

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    num_names: Vec<String>,
    cat_names: Vec<String>,
    cardinalities: Vec<usize>,
    task: TaskKind,
    sizes: [usize; 3],
}
