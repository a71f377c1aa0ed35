use super::{problem_with_lengths, render_scratchpad, AdditionProblem};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_max: usize,
    pub n_examples: usize,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub a: String,
    pub b: String,
    pub prompt: String,
    pub text: String,
}

impl DatasetRecord {
    pub fn problem(&self) -> Option<AdditionProblem> {
        AdditionProblem::parse(&self.a, &self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub len_a: usize,
    pub len_b: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_max: usize,
    pub n_examples: usize,
    pub split: Split,
    pub class_counts: Vec<ClassCount>,
}

pub fn manifest_path(data_path: &Path) -> PathBuf {
    let mut s = data_path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Stratified generation: example `i` belongs to length class `i mod n_max²`,
/// then the order is shuffled. Every class count is within one of uniform.
pub fn generate_records(spec: &DatasetSpec) -> Vec<DatasetRecord> {
    let n = spec.n_max;
    let mut rng = rng_from(derive_seed(spec.seed, &format!("dataset/{}", spec.split.as_str())));
    let mut classes: Vec<(usize, usize)> = (0..spec.n_examples)
        .map(|i| {
            let c = i % (n * n);
            (c / n + 1, c % n + 1)
        })
        .collect();
    classes.shuffle(&mut rng);
    classes
        .into_iter()
        .map(|(la, lb)| {
            let doc = render_scratchpad(&problem_with_lengths(la, lb, &mut rng));
            DatasetRecord {
                a: doc.problem.a.to_string(),
                b: doc.problem.b.to_string(),
                prompt: doc.prompt_text,
                text: doc.full_text,
            }
        })
        .collect()
}

/// Writes newline-delimited JSON records to `out` and the manifest next to it.
pub fn build_dataset(spec: &DatasetSpec, out: &Path) -> Result<DatasetManifest> {
    if spec.n_max == 0 {
        return Err(Error::Config("n_max must be at least 1".into()));
    }
    let records = generate_records(spec);
    let n = spec.n_max;
    let mut counts = vec![0usize; n * n];
    for r in &records {
        counts[(r.a.len() - 1) * n + (r.b.len() - 1)] += 1;
    }
    let manifest = DatasetManifest {
        seed: spec.seed,
        n_max: n,
        n_examples: records.len(),
        split: spec.split,
        class_counts: counts
            .iter()
            .enumerate()
            .map(|(i, &count)| ClassCount {
                len_a: i / n + 1,
                len_b: i % n + 1,
                count,
            })
            .collect(),
    };

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(out, e))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;

    let mpath = manifest_path(out);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_owned(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
