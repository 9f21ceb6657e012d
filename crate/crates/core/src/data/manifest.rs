use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const REQUIRED_COLUMNS: [&str; 2] = ["image_path", "mos"];
pub const OPTIONAL_COLUMNS: [&str; 3] = ["group_id", "method", "scale"];

/// Label assigned to every record when all MOS values coincide.
pub const DEGENERATE_LABEL: f64 = 0.5;

/// Minimum record count for a three-way split.
pub const MIN_SPLIT_RECORDS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// `image_path` exactly as written in the manifest; used as the record id.
    pub id: String,
    /// `id` resolved against the manifest's directory.
    pub image_path: PathBuf,
    pub mos: f64,
    pub mos_normalized: f64,
    pub group_id: Option<String>,
    pub method_tag: Option<String>,
    pub scale_tag: Option<String>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, image_path: impl Into<PathBuf>, mos: f64) -> Self {
        SampleRecord {
            id: id.into(),
            image_path: image_path.into(),
            mos,
            mos_normalized: 0.0,
            group_id: None,
            method_tag: None,
            scale_tag: None,
        }
    }

    /// Group key for group-aware splitting; ungrouped records stand alone.
    fn group_key(&self) -> &str {
        self.group_id.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub dataset_min: f64,
    pub dataset_max: f64,
    /// Set when every MOS is equal and labels fell back to [`DEGENERATE_LABEL`].
    pub degenerate_labels: bool,
    pub split_seed: Option<u64>,
    /// One entry per record once split.
    pub splits: Option<Vec<Split>>,
}

impl Manifest {
    /// Build from records, computing the dataset range and normalized labels.
    pub fn from_records(mut records: Vec<SampleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("manifest has no records".into()));
        }
        for (i, r) in records.iter().enumerate() {
            if !r.mos.is_finite() {
                return Err(Error::Row {
                    row: i + 1,
                    message: format!("non-finite MOS {}", r.mos),
                });
            }
        }
        let lo = records.iter().map(|r| r.mos).fold(f64::INFINITY, f64::min);
        let hi = records.iter().map(|r| r.mos).fold(f64::NEG_INFINITY, f64::max);
        let degenerate = hi <= lo;
        if degenerate {
            log::warn!(
                "all {} records share MOS {lo}; normalized labels set to {DEGENERATE_LABEL}",
                records.len()
            );
        }
        for r in &mut records {
            r.mos_normalized = if degenerate {
                DEGENERATE_LABEL
            } else {
                (r.mos - lo) / (hi - lo)
            };
        }
        Ok(Manifest {
            records,
            dataset_min: lo,
            dataset_max: hi,
            degenerate_labels: degenerate,
            split_seed: None,
            splits: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_of(&self, index: usize) -> Option<Split> {
        self.splits.as_ref().map(|s| s[index])
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        match &self.splits {
            Some(s) => (0..s.len()).filter(|&i| s[i] == split).collect(),
            None => Vec::new(),
        }
    }

    /// Records of one split; labels keep the full dataset's normalization.
    pub fn subset(&self, split: Split) -> Result<Manifest> {
        if self.splits.is_none() {
            return Err(Error::Data("manifest has not been split".into()));
        }
        let records: Vec<_> = self
            .indices(split)
            .into_iter()
            .map(|i| self.records[i].clone())
            .collect();
        if records.is_empty() {
            return Err(Error::Data(format!("{split} split is empty")));
        }
        let n = records.len();
        Ok(Manifest {
            records,
            splits: Some(vec![split; n]),
            ..self.clone()
        })
    }

    /// Write `image_path,mos,group_id,method,scale[,split]` using record ids as paths.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["image_path", "mos", "group_id", "method", "scale"];
        if self.splits.is_some() {
            header.push("split");
        }
        w.write_record(&header)?;
        for (i, r) in self.records.iter().enumerate() {
            let mut row = vec![
                r.id.clone(),
                format_mos(r.mos),
                r.group_id.clone().unwrap_or_default(),
                r.method_tag.clone().unwrap_or_default(),
                r.scale_tag.clone().unwrap_or_default(),
            ];
            if let Some(s) = self.split_of(i) {
                row.push(s.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn format_mos(v: f64) -> String {
    // Shortest representation that parses back to the same value.
    format!("{v:?}")
}

/// Parse a manifest CSV. Paths are resolved relative to the CSV's directory
/// and must exist. Row numbers in errors count data rows from 1 (the header
/// is not counted). An optional `split` column restores a saved split.
pub fn load_manifest(csv_path: &Path) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::file(csv_path, io),
            other => Error::Data(format!("{}: {other:?}", csv_path.display())),
        })?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing: Vec<&str> = REQUIRED_COLUMNS.iter().copied().filter(|c| col(c).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{}: missing column(s) {}",
            csv_path.display(),
            missing.join(", ")
        )));
    }
    for h in headers.iter() {
        if !REQUIRED_COLUMNS.contains(&h) && !OPTIONAL_COLUMNS.contains(&h) && h != "split" {
            return Err(Error::Data(format!("{}: unknown column {h:?}", csv_path.display())));
        }
    }
    let (path_col, mos_col) = (col("image_path").unwrap(), col("mos").unwrap());
    let base = csv_path.parent().unwrap_or(Path::new("."));

    let mut records = Vec::new();
    let mut splits = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::Row {
            row: row_no,
            message: e.to_string(),
        })?;
        let field = |c: Option<usize>| c.and_then(|c| row.get(c)).filter(|s| !s.is_empty()).map(str::to_string);
        let id = field(Some(path_col)).ok_or_else(|| Error::Row {
            row: row_no,
            message: "empty image_path".into(),
        })?;
        let raw_mos = row.get(mos_col).unwrap_or("");
        let mos: f64 = raw_mos.parse().map_err(|_| Error::Row {
            row: row_no,
            message: format!("unparsable MOS {raw_mos:?}"),
        })?;
        let image_path = base.join(&id);
        if !image_path.is_file() {
            return Err(Error::Row {
                row: row_no,
                message: format!("image file {} does not exist", image_path.display()),
            });
        }
        let mut rec = SampleRecord::new(id, image_path, mos);
        rec.group_id = field(col("group_id"));
        rec.method_tag = field(col("method"));
        rec.scale_tag = field(col("scale"));
        if let Some(c) = col("split") {
            let split = match row.get(c).unwrap_or("") {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => {
                    return Err(Error::Row {
                        row: row_no,
                        message: format!("unknown split {other:?}"),
                    })
                }
            };
            splits.push(split);
        }
        records.push(rec);
    }
    let mut m = Manifest::from_records(records)?;
    if col("split").is_some() {
        m.splits = Some(splits);
    }
    Ok(m)
}

/// Target counts for `n` records: 20% validation, 20% test, the rest training.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let val = n / 5;
    let test = n / 5;
    (n - val - test, val, test)
}

/// Seeded 60/20/20 split. With `group_aware`, records sharing a `group_id`
/// always land in the same split and whole groups are dealt to whichever
/// split is furthest below its target.
pub fn split_manifest(m: &Manifest, seed: u64, group_aware: bool) -> Result<Manifest> {
    let n = m.len();
    if n < MIN_SPLIT_RECORDS {
        return Err(Error::Data(format!(
            "need at least {MIN_SPLIT_RECORDS} records to split, got {n}"
        )));
    }
    let mut rng = seed::substream(seed, "split", 0);
    let (n_train, n_val, n_test) = split_counts(n);
    let mut assignment = vec![Split::Train; n];

    if !group_aware {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in &order[n_train..n_train + n_val] {
            assignment[i] = Split::Val;
        }
        for &i in &order[n_train + n_val..] {
            assignment[i] = Split::Test;
        }
    } else {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in m.records.iter().enumerate() {
            groups.entry(r.group_key()).or_default().push(i);
        }
        if groups.len() < 3 {
            return Err(Error::Data(format!(
                "group-aware split needs at least 3 groups, got {}",
                groups.len()
            )));
        }
        let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
        groups.shuffle(&mut rng);
        let targets = [
            (Split::Train, n_train),
            (Split::Val, n_val.max(1)),
            (Split::Test, n_test.max(1)),
        ];
        let mut filled: HashMap<Split, usize> = HashMap::new();
        // Seed val and test with one group each so neither ends up empty.
        for (g, split) in groups.iter().zip([Split::Val, Split::Test, Split::Train]) {
            for &i in g {
                assignment[i] = split;
            }
            *filled.entry(split).or_default() += g.len();
        }
        for g in &groups[3..] {
            let split = targets
                .iter()
                .map(|&(s, t)| (s, t as f64 - *filled.get(&s).unwrap_or(&0) as f64))
                .fold((Split::Train, f64::NEG_INFINITY), |best, cur| {
                    if cur.1 > best.1 {
                        cur
                    } else {
                        best
                    }
                })
                .0;
            for &i in g {
                assignment[i] = split;
            }
            *filled.entry(split).or_default() += g.len();
        }
    }

    Ok(Manifest {
        split_seed: Some(seed),
        splits: Some(assignment),
        ..m.clone()
    })
}
