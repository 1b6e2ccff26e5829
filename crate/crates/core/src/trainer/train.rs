use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::random_erasing;
use super::config::TrainConfig;
use super::dataset::{DatasetIndex, Split};
use crate::contrastive::{batch_loss, sample_mnpair_sets, EmbeddingRecord, MnPairSet};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{AdamState, Checkpoint, Network, NetworkSpec, Tape};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint<f32>,
    /// Mean MN-pair loss of every iteration, in order.
    pub losses: Vec<f64>,
}

/// Independent per-iteration seed derived from the run seed (splitmix64).
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One step's images: unique members of the drawn sets, and the sets remapped to batch rows.
fn gather(sets: &[MnPairSet]) -> (Vec<usize>, Vec<MnPairSet>) {
    let mut rows: Vec<usize> = Vec::new();
    let mut row_of = std::collections::HashMap::new();
    let mut remap = |i: usize| -> usize {
        *row_of.entry(i).or_insert_with(|| {
            rows.push(i);
            rows.len() - 1
        })
    };
    let remapped = sets
        .iter()
        .map(|s| MnPairSet {
            anchor: remap(s.anchor),
            positives: s.positives.iter().map(|&i| remap(i)).collect(),
            negatives: s.negatives.iter().map(|&i| remap(i)).collect(),
        })
        .collect();
    (rows, remapped)
}

/// Train the embedding network on the training split of `dataset`.
///
/// `images[i]` is the decoded image of `dataset.entries[i]`. When `out_dir`
/// is given the final checkpoint and the loss history are written there, plus
/// `checkpoint_<iter>.bin` every `checkpoint_every` iterations. A non-finite
/// loss aborts the run after saving the parameters of the last finite step.
pub fn train(
    dataset: &DatasetIndex,
    images: &[Tensor<f32>],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if images.len() != dataset.entries.len() {
        return Err(Error::config("one decoded image per dataset entry required"));
    }
    let train_idx = dataset.indices(Split::Train);
    let labels: Vec<usize> = train_idx.iter().map(|&i| dataset.entries[i].class_label).collect();
    let classes = dataset.class_names.len();
    let m = config.m.unwrap_or(classes);
    let n = config.n.unwrap_or(classes);
    let sets_per_step = config.sets_per_step(m, n);
    // Validate sampling preconditions up front.
    sample_mnpair_sets(&labels, &dataset.class_names, m, n, 1, config.seed)?;

    let spec = NetworkSpec::damage_embedding(config.input_size, config.embed_dim);
    let mut network: Network<f32> = Network::new(spec, config.seed)?;
    let sizes: Vec<usize> = network.params().slices().iter().map(|s| s.len()).collect();
    let mut adam = AdamState::<f32>::new(config.adam, &sizes);
    let mut losses = Vec::with_capacity(config.iterations);
    let mut tape = Tape::default();
    log::info!(
        "training: {} images, {} classes, M={m} N={n}, {sets_per_step} sets/step, {} iterations",
        train_idx.len(),
        classes,
        config.iterations
    );

    for iter in 0..config.iterations {
        let step_seed = derive_seed(config.seed, iter as u64);
        let sets = sample_mnpair_sets(&labels, &dataset.class_names, m, n, sets_per_step, step_seed)?;
        let (rows, sets) = gather(&sets);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(step_seed, 1));
        let batch_images: Vec<Tensor<f32>> = rows
            .iter()
            .map(|&r| {
                let mut img = images[train_idx[r]].clone();
                random_erasing(&mut img, &config.erasing, &mut aug_rng);
                img
            })
            .collect();
        let refs: Vec<&Tensor<f32>> = batch_images.iter().collect();
        let batch = Tensor::stack(&refs)?;

        let step = (|| -> Result<_> {
            let emb = network.forward_recorded_into(&batch, &mut tape)?;
            let loss = batch_loss(&emb, &sets, &config.loss)?;
            if !loss.loss.is_finite() {
                return Err(Error::NonFinite { layer: "loss".into() });
            }
            let grads = network.backward(&tape, &loss.grad)?;
            Ok((loss.loss, grads))
        })();
        let (loss, grads) = match step {
            Ok(v) => v,
            Err(Error::NonFinite { layer }) => {
                log::error!("non-finite value in `{layer}` at iteration {}", iter + 1);
                let path = match out_dir {
                    Some(dir) => {
                        let path = dir.join("checkpoint_last_good.bin");
                        Checkpoint { network: network.clone(), seed: config.seed, step: iter as u64 }.save(&path)?;
                        io::write_loss_csv(&dir.join(LOSS_FILE), &losses)?;
                        Some(path)
                    }
                    None => None,
                };
                return Err(Error::TrainingDiverged { iteration: iter + 1, checkpoint: path });
            }
            Err(e) => return Err(e),
        };
        {
            let g = grads.slices();
            let mut p = network.params_mut().slices_mut();
            adam.step(&mut p, &g);
        }
        losses.push(loss);
        if (iter + 1) % 50 == 0 || iter == 0 {
            log::info!("iteration {:>5}: loss {:.5}", iter + 1, loss);
        }
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && (iter + 1) % config.checkpoint_every == 0 && iter + 1 < config.iterations {
                let ck = Checkpoint { network: network.clone(), seed: config.seed, step: iter as u64 + 1 };
                ck.save(&dir.join(format!("checkpoint_{:06}.bin", iter + 1)))?;
            }
        }
    }

    let checkpoint = Checkpoint {
        network,
        seed: config.seed,
        step: config.iterations as u64,
    };
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        io::write_loss_csv(&dir.join(LOSS_FILE), &losses)?;
    }
    Ok(TrainOutcome { checkpoint, losses })
}

/// Paths written by [`train`] into `dir`.
pub fn train_artifacts(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(CHECKPOINT_FILE), dir.join(LOSS_FILE))
}

/// Embed every dataset entry, in dataset order.
pub fn extract_embeddings(
    network: &Network<f32>,
    dataset: &DatasetIndex,
    images: &[Tensor<f32>],
) -> Result<Vec<EmbeddingRecord>> {
    const CHUNK: usize = 32;
    if images.len() != dataset.entries.len() {
        return Err(Error::config("one decoded image per dataset entry required"));
    }
    let mut out = Vec::with_capacity(images.len());
    for (c, chunk) in images.chunks(CHUNK).enumerate() {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        let emb = network.forward(&Tensor::stack(&refs)?)?;
        for j in 0..chunk.len() {
            let i = c * CHUNK + j;
            let e: Vec<f64> = emb.item(j).iter().map(|&v| v as f64).collect();
            out.push(EmbeddingRecord::new(dataset.source_id(i), dataset.entries[i].class_label, e));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_dedupes_and_remaps() {
        let sets = vec![
            MnPairSet { anchor: 10, positives: vec![11], negatives: vec![20] },
            MnPairSet { anchor: 20, positives: vec![21], negatives: vec![10] },
        ];
        let (rows, remapped) = gather(&sets);
        assert_eq!(rows, vec![10, 11, 20, 21]);
        assert_eq!(remapped[1], MnPairSet { anchor: 2, positives: vec![3], negatives: vec![0] });
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 0));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }
}
