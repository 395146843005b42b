use rand::Rng as _;

use crate::distsuite::{Dataset, LabeledView};
use crate::error::{Error, Result};
use crate::graphgrad::Tensor;
use crate::rng::Rng;

/// Draws k uniformly from `1..=max_offset`.
pub fn sample_offset(rng: &mut Rng, max_offset: usize) -> Result<usize> {
    if max_offset < 1 {
        return Err(Error::OutOfRange("max offset K must be >= 1".into()));
    }
    Ok(rng.random_range(1..=max_offset))
}

/// One unlabeled training batch. `actions` and `distractor` are the
/// diagnostic side channel for probes; no loss reads them.
#[derive(Debug, Clone)]
pub struct LamBatch {
    pub obs_t: Tensor,
    pub obs_tk: Tensor,
    pub offsets: Vec<usize>,
    pub index: Vec<(usize, usize)>,
    pub actions: Tensor,
    pub distractor: Tensor,
}

/// Supervision batch drawn from the labeled view only.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub obs_t: Tensor,
    pub obs_tk: Tensor,
    pub actions: Tensor,
}

fn check_offset(ds: &Dataset, pool: &[usize], max_offset: usize) -> Result<()> {
    let shortest = pool.iter().map(|&i| ds.trajectories()[i].horizon()).min().unwrap_or(0);
    if max_offset > shortest {
        return Err(Error::OutOfRange(format!(
            "max offset {max_offset} exceeds the shortest trajectory ({shortest} steps)"
        )));
    }
    Ok(())
}

/// Returns `(traj, t, k)` with `t + k <= horizon` of that trajectory.
fn draw_triplet(
    ds: &Dataset,
    pool: &[usize],
    max_offset: usize,
    rng: &mut Rng,
) -> Result<(usize, usize, usize)> {
    let k = sample_offset(rng, max_offset)?;
    let traj = pool[rng.random_range(0..pool.len())];
    let h = ds.trajectories()[traj].horizon();
    if k > h {
        return Err(Error::OutOfRange(format!("offset {k} exceeds horizon {h}")));
    }
    let t = rng.random_range(0..=h - k);
    Ok((traj, t, k))
}

fn stacked_rows(ds: &Dataset, rows: impl Iterator<Item = (usize, usize)>, n: usize) -> Result<Tensor> {
    let d = ds.meta().stacked_dim();
    let mut data = Vec::with_capacity(n * d);
    for (traj, t) in rows {
        ds.stacked_into(traj, t, &mut data);
    }
    Tensor::matrix(n, d, data)
}

pub fn sample_batch(ds: &Dataset, max_offset: usize, batch_size: usize, rng: &mut Rng) -> Result<LamBatch> {
    if ds.is_empty() || batch_size == 0 {
        return Err(Error::Config("cannot sample from an empty dataset".into()));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    check_offset(ds, &all, max_offset)?;
    let picks = (0..batch_size)
        .map(|_| draw_triplet(ds, &all, max_offset, rng))
        .collect::<Result<Vec<_>>>()?;
    let diag = ds.diagnostics();
    let dd = ds.meta().distractor_dim();
    let mut actions = Vec::with_capacity(batch_size * 2);
    let mut distractor = Vec::with_capacity(batch_size * dd);
    for &(traj, t, _) in &picks {
        actions.extend_from_slice(&diag.action(traj, t));
        distractor.extend_from_slice(diag.distractor(traj, t));
    }
    Ok(LamBatch {
        obs_t: stacked_rows(ds, picks.iter().map(|&(i, t, _)| (i, t)), batch_size)?,
        obs_tk: stacked_rows(ds, picks.iter().map(|&(i, t, k)| (i, t + k)), batch_size)?,
        offsets: picks.iter().map(|p| p.2).collect(),
        index: picks.iter().map(|&(i, t, _)| (i, t)).collect(),
        actions: Tensor::matrix(batch_size, 2, actions)?,
        distractor: Tensor::matrix(batch_size, dd, distractor)?,
    })
}

pub fn sample_labeled_batch(
    view: &LabeledView<'_>,
    max_offset: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<LabeledBatch> {
    if view.budget() == 0 {
        return Err(Error::Config("a labeled batch needs a nonzero label budget".into()));
    }
    let ds = view.dataset();
    check_offset(ds, view.trajectories(), max_offset)?;
    let picks = (0..batch_size)
        .map(|_| draw_triplet(ds, view.trajectories(), max_offset, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut actions = Vec::with_capacity(batch_size * 2);
    for &(traj, t, _) in &picks {
        actions.extend_from_slice(&view.action(traj, t)?);
    }
    Ok(LabeledBatch {
        obs_t: stacked_rows(ds, picks.iter().map(|&(i, t, _)| (i, t)), batch_size)?,
        obs_tk: stacked_rows(ds, picks.iter().map(|&(i, t, k)| (i, t + k)), batch_size)?,
        actions: Tensor::matrix(batch_size, 2, actions)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distsuite::{collect_dataset, CollectConfig};
    use crate::rng;

    #[test]
    fn offset_frequencies_are_uniform() {
        let mut r = rng::stream(0, &[]);
        assert!((0..100).all(|_| sample_offset(&mut r, 1).unwrap() == 1));
        assert!(sample_offset(&mut r, 0).is_err());
        let mut counts = [0usize; 10];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_offset(&mut r, 10).unwrap() - 1] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.1).abs() <= 0.01, "{f}");
        }
    }

    #[test]
    fn offsets_stay_inside_trajectories() {
        let ds = collect_dataset(&CollectConfig { n_traj: 4, horizon: 12, label_budget: 2, ..Default::default() })
            .unwrap();
        let mut r = rng::stream(1, &[]);
        for _ in 0..50 {
            let b = sample_batch(&ds, 10, 16, &mut r).unwrap();
            for (&(traj, t), &k) in b.index.iter().zip(&b.offsets) {
                assert!(t + k <= ds.trajectories()[traj].horizon());
                assert!((1..=10).contains(&k));
            }
            assert_eq!(b.obs_t.shape(), [16, ds.meta().stacked_dim()]);
        }
        assert!(sample_batch(&ds, 13, 4, &mut r).is_err());
    }

    #[test]
    fn labeled_batches_use_labeled_trajectories_only() {
        let ds = collect_dataset(&CollectConfig { n_traj: 10, horizon: 8, label_budget: 2, ..Default::default() })
            .unwrap();
        let view = ds.labeled_view(2, 3).unwrap();
        let mut r = rng::stream(2, &[]);
        let b = sample_labeled_batch(&view, 3, 64, &mut r).unwrap();
        let allowed: Vec<[f64; 2]> = view
            .trajectories()
            .iter()
            .flat_map(|&i| (0..8).map(move |t| (i, t)))
            .map(|(i, t)| view.action(i, t).unwrap())
            .collect();
        for row in 0..64 {
            let a = [b.actions.row(row)[0], b.actions.row(row)[1]];
            assert!(allowed.contains(&a));
        }
        assert!(sample_labeled_batch(&ds.labeled_view(0, 3).unwrap(), 3, 4, &mut r).is_err());
    }
}
