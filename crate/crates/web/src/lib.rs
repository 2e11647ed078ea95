use serde::Serialize;
use wasm_bindgen::prelude::*;
use xder::buffer::{MemoryEntry, RehearsalBuffer};
use xder::metrics::{faa, ff};
use xder::partitions::{future_past_indices, LogitPartition};
use xder::stream::{generate_blob_stream, BlobStreamSpec};
use xder::trainer::{run_sequence, Method, TrainConfig};
use xder::Matrix;

#[derive(Debug, Serialize)]
pub struct PartitionView {
    /// Role of each logit: past, present, future or future-past.
    pub roles: Vec<&'static str>,
    pub past: [usize; 2],
    pub present: [usize; 2],
    pub future: [usize; 2],
}

/// Logit roles at task `current`, marking the future-past heads of an entry
/// stored during task `insertion`.
pub fn partition_view(current: usize, tasks: usize, classes_per_task: usize, insertion: usize) -> Result<PartitionView, String> {
    let p = LogitPartition::new(current, tasks, classes_per_task).map_err(|e| e.to_string())?;
    let mut roles = vec!["future"; p.total()];
    for k in p.past() {
        roles[k] = "past";
    }
    for k in p.present() {
        roles[k] = "present";
    }
    for j in insertion + 1..=current {
        if let Ok(r) = future_past_indices(j, insertion, current, classes_per_task) {
            for k in r {
                roles[k] = "future-past";
            }
        }
    }
    let span = |r: std::ops::Range<usize>| [r.start, r.end];
    Ok(PartitionView { roles, past: span(p.past()), present: span(p.present()), future: span(p.future()) })
}

#[derive(Debug, Serialize)]
pub struct ImplantView {
    pub logits: Vec<f64>,
    pub updated: bool,
    pub cap: f64,
}

/// Implants the future-past logits of `fresh` into `stored` as the buffer
/// does at task `current`.
pub fn implant(
    stored: &[f64],
    fresh: &[f64],
    label: usize,
    insertion: usize,
    current: usize,
    classes_per_task: usize,
    gamma: f64,
) -> Result<ImplantView, String> {
    if stored.len() != fresh.len() {
        return Err(format!("stored has {} logits, fresh has {}", stored.len(), fresh.len()));
    }
    if label >= stored.len() {
        return Err(format!("label {label} outside {} logits", stored.len()));
    }
    let entry = MemoryEntry { features: vec![0.0], label, logits: stored.to_vec(), task: insertion };
    let mut buf = RehearsalBuffer::from_entries(1, vec![entry]).map_err(|e| e.to_string())?;
    let m = Matrix::from_vec(1, fresh.len(), fresh.to_vec()).map_err(|e| e.to_string())?;
    let stats = buf.implant_future_past(&[0], &m, current, classes_per_task, gamma).map_err(|e| e.to_string())?;
    Ok(ImplantView { logits: buf.entries()[0].logits.clone(), updated: stats.updated > 0, cap: gamma * stored[label] })
}

#[derive(Debug, Serialize)]
pub struct TrainView {
    pub method: String,
    /// `matrix[i][t]`: accuracy on task i after task t; null above the diagonal.
    pub matrix: Vec<Vec<Option<f64>>>,
    pub faa: f64,
    pub ff: Option<f64>,
}

/// A short run on a small blob stream.
pub fn train(method: &str, tasks: usize, epochs: usize, seed: u64) -> Result<TrainView, String> {
    let method: Method = method.parse().map_err(|e: xder::Error| e.to_string())?;
    if !(2..=6).contains(&tasks) || !(1..=20).contains(&epochs) {
        return Err("tasks must be in 2..=6 and epochs in 1..=20".into());
    }
    let stream = generate_blob_stream(&BlobStreamSpec::new(tasks, 2, 100, 8, 2.0, seed)).map_err(|e| e.to_string())?;
    let mut c = TrainConfig::new(method);
    c.epochs = epochs;
    c.lr = 0.05;
    c.seed = seed;
    if method.is_xder() {
        c.weights.alpha = 0.5;
        c.weights.eta = 1.0;
    }
    let r = run_sequence(&stream, &c).map_err(|e| e.to_string())?;
    let matrix = (0..tasks).map(|i| (0..tasks).map(|t| r.matrix.get(i, t)).collect()).collect();
    Ok(TrainView {
        method: method.to_string(),
        matrix,
        faa: faa(&r.matrix).map_err(|e| e.to_string())?,
        ff: ff(&r.matrix).ok(),
    })
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = partitionView)]
pub fn partition_view_js(current: usize, tasks: usize, classes_per_task: usize, insertion: usize) -> Result<String, JsError> {
    json(partition_view(current, tasks, classes_per_task, insertion))
}

#[wasm_bindgen(js_name = implant)]
pub fn implant_js(
    stored: Vec<f64>,
    fresh: Vec<f64>,
    label: usize,
    insertion: usize,
    current: usize,
    classes_per_task: usize,
    gamma: f64,
) -> Result<String, JsError> {
    json(implant(&stored, &fresh, label, insertion, current, classes_per_task, gamma))
}

#[wasm_bindgen(js_name = train)]
pub fn train_js(method: &str, tasks: usize, epochs: usize, seed: u64) -> Result<String, JsError> {
    json(train(method, tasks, epochs, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_cover_every_logit() {
        let v = partition_view(2, 4, 2, 0).unwrap();
        assert_eq!(
            v.roles,
            ["past", "past", "future-past", "future-past", "future-past", "future-past", "future", "future"]
        );
        assert_eq!(v.present, [4, 6]);
    }
}
