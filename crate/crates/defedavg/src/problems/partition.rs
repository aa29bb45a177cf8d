//! Splitting a dataset into per-client shards.

use super::Dataset;
use crate::numerics::RngStream;
use crate::{Error, Result};

/// How samples are assigned to clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    /// Shuffle all samples, split into near-equal contiguous shards.
    Iid,
    /// Label-skewed: each client holds samples of exactly two classes,
    /// assigned round-robin over a shuffled class list.
    TwoClass,
}

/// Index shards, one per client, into the originating dataset.
#[derive(Debug, Clone)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub scheme: PartitionScheme,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }
}

/// Splits `dataset` into `n_clients` shards under `scheme`.
///
/// Shards are disjoint and cover the dataset. Errors if any client would
/// end up with an empty shard, or (under [`PartitionScheme::TwoClass`])
/// without samples of exactly two distinct labels.
pub fn partition(
    dataset: &Dataset,
    scheme: PartitionScheme,
    n_clients: usize,
    stream: &mut RngStream,
) -> Result<Partition> {
    if n_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if dataset.len() < n_clients {
        return Err(Error::Partition(format!(
            "{} samples cannot fill {} clients",
            dataset.len(),
            n_clients
        )));
    }
    let shards = match scheme {
        PartitionScheme::Iid => iid_shards(dataset, n_clients, stream),
        PartitionScheme::TwoClass => two_class_shards(dataset, n_clients, stream)?,
    };
    for (i, shard) in shards.iter().enumerate() {
        if shard.is_empty() {
            return Err(Error::Partition(format!("client {i} received an empty shard")));
        }
        if scheme == PartitionScheme::TwoClass && dataset.num_classes() >= 2 {
            let mut labels: Vec<usize> = shard.iter().map(|&s| dataset.label(s)).collect();
            labels.sort_unstable();
            labels.dedup();
            if labels.len() != 2 {
                return Err(Error::Partition(format!(
                    "client {i} holds {} distinct labels instead of 2; \
                     a class ran out of samples for its holders",
                    labels.len()
                )));
            }
        }
    }
    Ok(Partition { shards, scheme })
}

fn iid_shards(dataset: &Dataset, n_clients: usize, stream: &mut RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    stream.shuffle(&mut order);
    // Near-equal contiguous split: client i takes [i*M/N, (i+1)*M/N).
    let m = dataset.len();
    (0..n_clients)
        .map(|i| order[i * m / n_clients..(i + 1) * m / n_clients].to_vec())
        .collect()
}

fn two_class_shards(
    dataset: &Dataset,
    n_clients: usize,
    stream: &mut RngStream,
) -> Result<Vec<Vec<usize>>> {
    let c = dataset.num_classes();
    if c < 2 {
        return Err(Error::Partition(
            "two-class partitioning needs at least 2 classes".into(),
        ));
    }
    if 2 * n_clients < c {
        return Err(Error::Partition(format!(
            "{n_clients} clients x 2 classes each cannot cover {c} classes"
        )));
    }
    let mut class_order: Vec<usize> = (0..c).collect();
    stream.shuffle(&mut class_order);
    // Client i holds the classes at positions 2i and 2i+1 (mod C) of the
    // shuffled list; consecutive positions are distinct whenever C >= 2.
    let held: Vec<[usize; 2]> = (0..n_clients)
        .map(|i| [class_order[(2 * i) % c], class_order[(2 * i + 1) % c]])
        .collect();
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (client, classes) in held.iter().enumerate() {
        for &cl in classes {
            holders[cl].push(client);
        }
    }
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for (class, hs) in holders.iter().enumerate() {
        let mut samples: Vec<usize> = (0..dataset.len())
            .filter(|&s| dataset.label(s) == class)
            .collect();
        stream.shuffle(&mut samples);
        if hs.is_empty() {
            continue; // unreachable given 2N >= C, kept for safety
        }
        // Deal the class's samples round-robin over its holders.
        for (k, s) in samples.into_iter().enumerate() {
            shards[hs[k % hs.len()]].push(s);
        }
    }
    Ok(shards)
}
