//! Plain-text artifact formats shared by the pipeline stages.
//!
//! * loss history CSV: `iteration,loss`
//! * embeddings CSV: `source_id,class_label,e_1..e_L`
//! * 2-D points CSV: `source_id,x,y`
//! * cluster JSON: `{ source_id: { "cluster": id, "role": "core"|"border"|"noise" } }`,
//!   with clusters numbered from 1 and `cluster` 0 for noise
//!
//! Floats are written in shortest round-trip form so that reading an
//! artifact back reproduces the in-memory values exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::reduce::{ClusterAssignment, KlRecord, PointRole};

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(file))
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        context: path.display().to_string(),
        message: message.into(),
    }
}

pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iteration", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let rec = rec?;
        let v = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, "bad loss row"))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_embeddings_csv(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.embedding.len());
    let mut w = writer(path)?;
    let mut header = vec!["source_id".to_owned(), "class_label".to_owned()];
    header.extend((1..=dim).map(|i| format!("e_{i}")));
    w.write_record(&header)?;
    for r in records {
        if r.embedding.len() != dim {
            return Err(Error::config("embeddings of mixed dimension"));
        }
        let mut row = vec![r.source_id.clone(), r.class_label.to_string()];
        row.extend(r.embedding.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings_csv(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(parse_err(path, "embedding row too short"));
        }
        let label = rec[1].parse().map_err(|_| parse_err(path, "bad class label"))?;
        let e = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(path, format!("bad value `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRecord::new(&rec[0], label, e));
    }
    Ok(out)
}

pub fn write_points_csv(path: &Path, ids: &[String], points: &[[f64; 2]]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["source_id", "x", "y"])?;
    for (id, p) in ids.iter().zip(points) {
        w.write_record([id.clone(), p[0].to_string(), p[1].to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_points_csv(path: &Path) -> Result<(Vec<String>, Vec<[f64; 2]>)> {
    let mut ids = Vec::new();
    let mut pts = Vec::new();
    for rec in reader(path)?.records() {
        let rec = rec?;
        let coord = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(path, "bad point row"))
        };
        pts.push([coord(1)?, coord(2)?]);
        ids.push(rec[0].to_owned());
    }
    Ok((ids, pts))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterEntry {
    /// Cluster id from 1; 0 for noise.
    pub cluster: usize,
    pub role: PointRole,
}

pub fn clusters_to_json(ids: &[String], assignment: &ClusterAssignment) -> BTreeMap<String, ClusterEntry> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            (
                id.clone(),
                ClusterEntry {
                    cluster: assignment.labels[i].map_or(0, |c| c + 1),
                    role: assignment.roles[i],
                },
            )
        })
        .collect()
}

/// Rebuild labels and roles from cluster JSON, in `ids` order. Neighbour
/// counts are not stored and come back as 0.
pub fn clusters_from_json(ids: &[String], map: &BTreeMap<String, ClusterEntry>) -> Result<ClusterAssignment> {
    let mut labels = Vec::with_capacity(ids.len());
    let mut roles = Vec::with_capacity(ids.len());
    for id in ids {
        let entry = map.get(id).ok_or_else(|| Error::Parse {
            context: "cluster JSON".into(),
            message: format!("no entry for `{id}`"),
        })?;
        if (entry.cluster == 0) != (entry.role == PointRole::Noise) {
            return Err(Error::Parse {
                context: "cluster JSON".into(),
                message: format!("`{id}` has cluster {} with role {:?}", entry.cluster, entry.role),
            });
        }
        labels.push(entry.cluster.checked_sub(1));
        roles.push(entry.role);
    }
    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    Ok(ClusterAssignment {
        labels,
        roles,
        neighbor_counts: vec![0; ids.len()],
        n_clusters,
    })
}

pub fn write_kl_csv(path: &Path, trace: &[KlRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iteration", "kl"])?;
    for r in trace {
        w.write_record([r.iteration.to_string(), r.kl.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let recs = vec![
            EmbeddingRecord::new("a/1.png", 0, vec![0.1, -2.5e-17, 3.0f32 as f64 / 7.0]),
            EmbeddingRecord::new("b,\"odd\".png", 2, vec![1.0, 0.0, -0.0]),
        ];
        write_embeddings_csv(&path, &recs).unwrap();
        assert_eq!(read_embeddings_csv(&path).unwrap(), recs);
    }

    #[test]
    fn points_and_losses_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let ids = vec!["x".to_owned(), "y".to_owned()];
        let pts = vec![[1.5, -2.25], [1e-300, 7.0]];
        write_points_csv(&p, &ids, &pts).unwrap();
        assert_eq!(read_points_csv(&p).unwrap(), (ids, pts));
        let l = dir.path().join("l.csv");
        write_loss_csv(&l, &[1.9, 0.5]).unwrap();
        assert_eq!(read_loss_csv(&l).unwrap(), vec![1.9, 0.5]);
    }

    #[test]
    fn clusters_round_trip_with_noise_as_zero() {
        let a = ClusterAssignment {
            labels: vec![Some(1), None, Some(0)],
            roles: vec![PointRole::Core, PointRole::Noise, PointRole::Border],
            neighbor_counts: vec![0; 3],
            n_clusters: 2,
        };
        let ids: Vec<String> = ["p", "q", "r"].iter().map(|s| s.to_string()).collect();
        let map = clusters_to_json(&ids, &a);
        assert_eq!(map["p"].cluster, 2);
        assert_eq!(map["q"].cluster, 0);
        assert_eq!(clusters_from_json(&ids, &map).unwrap(), a);
        let mut bad = map.clone();
        bad.get_mut("q").unwrap().cluster = 1;
        assert!(clusters_from_json(&ids, &bad).is_err());
    }
}
