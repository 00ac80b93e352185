use std::collections::{HashMap, HashSet, VecDeque};

use rand::seq::{index::sample, IndexedRandom, SliceRandom};

use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, stream};

/// Attempts to replace a single-label batch before giving up.
pub const MAX_RESAMPLES: usize = 10;

fn distinct(labels: &[usize], batch: &[usize]) -> usize {
    batch.iter().map(|&i| labels[i]).collect::<HashSet<_>>().len()
}

/// Batches of positions for one epoch.
///
/// Positions are shuffled, then dealt cluster by cluster (in order of first
/// appearance) taking up to two members per cluster per round (one when the
/// batch is under four), so most batches hold several pseudo-classes with
/// more than one member each. A trailing batch of one is merged into the
/// previous batch. A batch with a single pseudo-label is redrawn uniformly,
/// with its last slot swapped for an image labelled differently from its
/// first, at most [`MAX_RESAMPLES`] times.
///
/// When every label is unique the deal is exactly the shuffled order.
pub fn epoch_batches(labels: &[usize], batch: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if batch < 2 {
        return Err(invalid("contrastive batch size must be ≥ 2"));
    }
    if n < 2 {
        return Err(invalid("contrastive pretraining needs at least two images"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "pretrain.shuffle", epoch as u64));

    let mut queues: Vec<VecDeque<usize>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for &i in &order {
        let q = *slot.entry(labels[i]).or_insert_with(|| {
            queues.push(VecDeque::new());
            queues.len() - 1
        });
        queues[q].push_back(i);
    }
    let per_round = if batch >= 4 { 2 } else { 1 };
    let mut dealt = Vec::with_capacity(n);
    while dealt.len() < n {
        for q in queues.iter_mut() {
            for _ in 0..per_round {
                if let Some(i) = q.pop_front() {
                    dealt.push(i);
                }
            }
        }
    }

    let mut batches: Vec<Vec<usize>> = dealt.chunks(batch).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    for (bi, b) in batches.iter_mut().enumerate() {
        let mut attempt = 0;
        while distinct(labels, b) < 2 {
            if attempt == MAX_RESAMPLES {
                return Err(Error::DegenerateBatch("single pseudo-label after repeated resampling"));
            }
            let consumer = derive_seed(epoch as u64, "batch", bi as u64) ^ attempt as u64;
            let mut rng = stream(seed, "pretrain.resample", consumer);
            *b = sample(&mut rng, n, b.len()).into_vec();
            let others: Vec<usize> = (0..n).filter(|&i| labels[i] != labels[b[0]]).collect();
            if let Some(&j) = others.choose(&mut rng) {
                if !b.contains(&j) {
                    *b.last_mut().unwrap() = j;
                }
            }
            attempt += 1;
        }
    }
    Ok(batches)
}
