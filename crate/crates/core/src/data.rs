use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DasError, Result};
use crate::tensor::Tensor;

/// Labelled classification inputs, one row per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (rows, _) = inputs.dims2("dataset")?;
        crate::tensor::check_labels(rows, classes, &labels)?;
        Ok(Dataset {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.inputs.gather_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// First `k` rows (or all of them).
    pub fn head(&self, k: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..k.min(self.len())).collect();
        let (x, y) = self.batch(&idx)?;
        Dataset::new(x, y, self.classes)
    }

    /// CSV with columns `x0..x{k-1},label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| DasError::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let wrap = |e: csv::Error| DasError::io(path, std::io::Error::other(e));
        let mut header: Vec<String> = (0..self.input_dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(wrap)?;
        for (i, &label) in self.labels.iter().enumerate() {
            let mut rec: Vec<String> = self.inputs.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec).map_err(wrap)?;
        }
        w.flush().map_err(|e| DasError::io(path, e))
    }

    pub fn read_csv(path: &Path, classes: usize) -> Result<Dataset> {
        let parse_err = |msg: String| DasError::Parse {
            path: path.to_path_buf(),
            message: msg,
        };
        let file = File::open(path).map_err(|e| DasError::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let cols = r.headers().map_err(|e| parse_err(e.to_string()))?.len();
        if cols < 2 {
            return Err(parse_err("need at least one input column and a label".into()));
        }
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            for j in 0..cols - 1 {
                let v: f64 = rec[j]
                    .parse()
                    .map_err(|_| parse_err(format!("row {line}, column x{j}: {:?}", &rec[j])))?;
                values.push(v);
            }
            let label: usize = rec[cols - 1]
                .parse()
                .map_err(|_| parse_err(format!("row {line}, label: {:?}", &rec[cols - 1])))?;
            labels.push(label);
        }
        if labels.is_empty() {
            return Err(parse_err("no rows".into()));
        }
        let inputs = Tensor::matrix(labels.len(), cols - 1, values)?;
        Dataset::new(inputs, labels, classes)
    }
}

/// Disjoint train / validation / test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Sidecar describing a data directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataInfo {
    pub input_dim: usize,
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Splits {
    pub fn info(&self) -> DataInfo {
        DataInfo {
            input_dim: self.train.input_dim(),
            classes: self.train.classes,
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.train.write_csv(&dir.join("train.csv"))?;
        self.val.write_csv(&dir.join("val.csv"))?;
        self.test.write_csv(&dir.join("test.csv"))?;
        let info = serde_json::to_string_pretty(&self.info()).expect("plain struct") + "\n";
        let p = dir.join("data.json");
        std::fs::write(&p, info).map_err(|e| DasError::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Splits> {
        let p = dir.join("data.json");
        let text = std::fs::read_to_string(&p).map_err(|e| DasError::io(&p, e))?;
        let info: DataInfo = serde_json::from_str(&text).map_err(|e| DasError::Parse {
            path: p.clone(),
            message: e.to_string(),
        })?;
        let splits = Splits {
            train: Dataset::read_csv(&dir.join("train.csv"), info.classes)?,
            val: Dataset::read_csv(&dir.join("val.csv"), info.classes)?,
            test: Dataset::read_csv(&dir.join("test.csv"), info.classes)?,
        };
        if splits.info() != info {
            return Err(DasError::validation(format!(
                "{} does not match the CSV files in {}",
                p.display(),
                dir.display()
            )));
        }
        Ok(splits)
    }
}

/// Endless shuffled minibatches: each pass over the data is a fresh permutation,
/// the trailing partial batch is dropped.
#[derive(Clone, Debug)]
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchStream {
    pub fn new(len: usize, batch: usize) -> Result<Self> {
        if batch == 0 || batch > len {
            return Err(DasError::validation(format!(
                "batch size {batch} does not fit a split of {len} examples"
            )));
        }
        Ok(BatchStream {
            order: (0..len).collect(),
            pos: len,
            batch,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch
    }

    pub fn next_indices(&mut self, rng: &mut impl Rng) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        out
    }
}
