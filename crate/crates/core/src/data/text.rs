//! Plain-text interchange forms, for bringing in features and weights
//! produced elsewhere.
//!
//! Dataset (JSON lines). The first line is a header, every further line one
//! sample. Regions and words are lists of column vectors:
//!
//! ```text
//! {"format":"csca-dataset-text-v1","d_v":2048,"n_v":36,"d_w":300,"n_w":14,"n_c":3129,"answer_labels":["yes","no",...]}
//! {"regions":[[...d_v numbers...], ...n_v...],"words":[[...d_w...], ...n_w...],"answer":17,"category":"yes/no"}
//! {"regions":...,"words":...,"target":[...n_c numbers...],"category":"other"}
//! ```
//!
//! A sample gives either `answer` (a class index, expanded to one-hot) or a
//! full `target` distribution.
//!
//! Checkpoint (one JSON document), arrays in canonical order:
//!
//! ```text
//! {"format":"csca-checkpoint-text-v1","config":{...CscaConfig...},
//!  "weights":[{"name":"proj.image","shape":[512,2048],"data":[...]}, ...]}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, Dataset, DatasetDims};
use crate::error::{Error, Result};
use crate::model::{CscaConfig, CscaParams, VqaSample};
use crate::optim::TrainConfig;
use crate::tensor::Tensor;

pub const DATASET_TEXT_FORMAT: &str = "csca-dataset-text-v1";
pub const CHECKPOINT_TEXT_FORMAT: &str = "csca-checkpoint-text-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    d_v: usize,
    n_v: usize,
    d_w: usize,
    n_w: usize,
    n_c: usize,
    answer_labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    regions: Vec<Vec<f64>>,
    words: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<Vec<f64>>,
    category: String,
}

fn format_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("line {line}: {msg}"))
}

fn columns_to_tensor(cols: &[Vec<f64>], rows: usize, what: &str, line: usize) -> Result<Tensor> {
    if cols.is_empty() || cols.iter().any(|c| c.len() != rows) {
        return Err(format_err(line, format!("{what} must be nonempty columns of length {rows}")));
    }
    let n = cols.len();
    Ok(Tensor::from_fn([rows, n], |k| cols[k % n][k / n]))
}

fn tensor_to_columns(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.cols()).map(|j| t.column(j)).collect()
}

pub fn write_dataset_text(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    let d = ds.dims;
    let header = Header {
        format: DATASET_TEXT_FORMAT.into(),
        d_v: d.d_v,
        n_v: d.n_v,
        d_w: d.d_w,
        n_w: d.n_w,
        n_c: d.n_c,
        answer_labels: ds.answer_labels.clone(),
    };
    let json = |e: serde_json::Error| Error::Format(e.to_string());
    writeln!(w, "{}", serde_json::to_string(&header).map_err(json)?)?;
    for s in &ds.samples {
        let line = SampleLine {
            regions: tensor_to_columns(&s.regions),
            words: tensor_to_columns(&s.words),
            answer: None,
            target: Some(s.target.data().to_vec()),
            category: s.category.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line).map_err(json)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_text(path: impl AsRef<Path>) -> Result<Dataset> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut lines = r.lines().enumerate().filter(|(_, l)| match l {
        Ok(s) => !s.trim().is_empty(),
        Err(_) => true,
    });
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Truncated("dataset text has no header line".into()))?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| format_err(1, e))?;
    if header.format != DATASET_TEXT_FORMAT {
        return Err(Error::BadMagic {
            expected: DATASET_TEXT_FORMAT.into(),
            found: header.format,
        });
    }
    let dims = DatasetDims {
        d_v: header.d_v,
        n_v: header.n_v,
        d_w: header.d_w,
        n_w: header.n_w,
        n_c: header.n_c,
    };
    let mut samples = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let s: SampleLine = serde_json::from_str(&line?).map_err(|e| format_err(n, e))?;
        let target = match (s.answer, s.target) {
            (Some(a), None) if a < dims.n_c => {
                let mut t = vec![0.0; dims.n_c];
                t[a] = 1.0;
                t
            }
            (Some(a), None) => return Err(format_err(n, format!("answer {a} out of {} classes", dims.n_c))),
            (None, Some(t)) => t,
            _ => return Err(format_err(n, "give exactly one of answer and target")),
        };
        if s.regions.len() != dims.n_v || s.words.len() != dims.n_w {
            return Err(format_err(
                n,
                format!(
                    "{} regions and {} words, header says {} and {}",
                    s.regions.len(),
                    s.words.len(),
                    dims.n_v,
                    dims.n_w
                ),
            ));
        }
        samples.push(VqaSample {
            regions: columns_to_tensor(&s.regions, dims.d_v, "regions", n)?,
            words: columns_to_tensor(&s.words, dims.d_w, "words", n)?,
            target: Tensor::new([target.len()], target).map_err(|e| format_err(n, e))?,
            category: s.category,
        });
    }
    let ds = Dataset {
        dims,
        answer_labels: header.answer_labels,
        samples,
    };
    ds.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format: String,
    config: CscaConfig,
    weights: Vec<WeightEntry>,
}

/// Writes the weights only; training state is not part of the text form.
pub fn write_checkpoint_text(path: impl AsRef<Path>, params: &CscaParams) -> Result<()> {
    let doc = CheckpointDoc {
        format: CHECKPOINT_TEXT_FORMAT.into(),
        config: params.config.clone(),
        weights: params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(n, t)| WeightEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(w, &doc).map_err(|e| Error::Format(e.to_string()))
}

/// Reads weights into a checkpoint with fresh training state. Entry names
/// must follow the canonical order.
pub fn read_checkpoint_text(path: impl AsRef<Path>, train: TrainConfig) -> Result<Checkpoint> {
    let r = BufReader::new(fs::File::open(path)?);
    let doc: CheckpointDoc = serde_json::from_reader(r).map_err(|e| Error::Format(e.to_string()))?;
    if doc.format != CHECKPOINT_TEXT_FORMAT {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_TEXT_FORMAT.into(),
            found: doc.format,
        });
    }
    let template = CscaParams::init(&doc.config, 0)?;
    if doc.weights.len() != template.names.len() {
        return Err(Error::Format(format!(
            "{} weight arrays, config needs {}",
            doc.weights.len(),
            template.names.len()
        )));
    }
    let mut tensors = Vec::with_capacity(doc.weights.len());
    for (entry, want) in doc.weights.into_iter().zip(&template.names) {
        if &entry.name != want {
            return Err(Error::Format(format!("expected weight {want}, found {}", entry.name)));
        }
        let t = Tensor::new(entry.shape, entry.data)
            .map_err(|e| Error::Format(format!("{want}: {e}")))?;
        tensors.push(t);
    }
    let params = CscaParams::from_tensors(&doc.config, tensors)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(Checkpoint::fresh(params, train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    #[test]
    fn dataset_text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let ds = generate_synthetic(&SyntheticConfig {
            num_samples: 7,
            seed: 1,
            ..SyntheticConfig::default()
        })
        .unwrap();
        write_dataset_text(&path, &ds).unwrap();
        assert_eq!(read_dataset_text(&path).unwrap(), ds);
    }

    #[test]
    fn answer_index_expands_to_one_hot() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let text = format!(
            "{{\"format\":\"{DATASET_TEXT_FORMAT}\",\"d_v\":2,\"n_v\":1,\"d_w\":1,\"n_w\":2,\"n_c\":3,\"answer_labels\":[\"a\",\"b\",\"c\"]}}\n\
             {{\"regions\":[[1.0,2.0]],\"words\":[[0.5],[0.25]],\"answer\":2,\"category\":\"x\"}}\n"
        );
        fs::write(&path, text).unwrap();
        let ds = read_dataset_text(&path).unwrap();
        assert_eq!(ds.samples[0].target.data(), &[0.0, 0.0, 1.0]);
        assert_eq!(ds.samples[0].regions.shape(), &[2, 1]);
        assert_eq!(ds.samples[0].words.data(), &[0.5, 0.25]);
    }

    #[test]
    fn ambiguous_ground_truth_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let text = format!(
            "{{\"format\":\"{DATASET_TEXT_FORMAT}\",\"d_v\":1,\"n_v\":1,\"d_w\":1,\"n_w\":1,\"n_c\":2,\"answer_labels\":[\"a\",\"b\"]}}\n\
             {{\"regions\":[[1.0]],\"words\":[[0.5]],\"answer\":1,\"target\":[0.0,1.0],\"category\":\"x\"}}\n"
        );
        fs::write(&path, text).unwrap();
        assert!(matches!(read_dataset_text(&path), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let p = CscaParams::init(&CscaConfig::tiny(), 5).unwrap();
        write_checkpoint_text(&path, &p).unwrap();
        let ck = read_checkpoint_text(&path, TrainConfig::default()).unwrap();
        assert_eq!(ck.params, p);
    }
}
