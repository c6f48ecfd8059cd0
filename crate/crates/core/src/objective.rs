//! K-Means quantization error, its per-sample update and evaluation metrics.
//!
//! The per-sample update returned by [`point_update`] is `x - w_k` on the row
//! of the nearest prototype and zero elsewhere. That is the *negative*
//! gradient of the quantization error, so K-Means descent moves a center by
//! `w += eps * update`. Solvers that use the generic `w -= eps * grad` form
//! negate it first.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{sq_dist, ModelState, UpdateVector};

/// File magic for datasets ("KMD").
pub const DATASET_MAGIC: u64 = 0x4B4D44;
/// File magic for ground-truth centers ("KMC").
pub const TRUTH_MAGIC: u64 = 0x4B4D43;

/// `m` points of dimension `n`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    m: usize,
    n: usize,
    points: Vec<f64>,
}

impl Dataset {
    pub fn new(m: usize, n: usize, points: Vec<f64>) -> Result<Self> {
        if m == 0 {
            return Err(Error::EmptyDataset);
        }
        if n == 0 {
            return Err(Error::invalid("n", "must be >= 1"));
        }
        if points.len() != m * n {
            return Err(Error::dim(m * n, points.len()));
        }
        if let Some(index) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { m, n, points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        let mut points = Vec::with_capacity(rows.len() * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::dim(n, r.len()));
            }
            points.extend_from_slice(r);
        }
        Self::new(rows.len(), n, points)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.n..(i + 1) * self.n]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.points.chunks_exact(self.n)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    /// The first `count` points (or all of them).
    pub fn head(&self, count: usize) -> Dataset {
        let m = count.clamp(1, self.m);
        Dataset {
            m,
            n: self.n,
            points: self.points[..m * self.n].to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let mut points = Vec::with_capacity(indices.len() * self.n);
        for &i in indices {
            points.extend_from_slice(self.point(i));
        }
        Dataset::new(indices.len(), self.n, points)
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix(path.as_ref(), DATASET_MAGIC, self.m, self.n, &self.points)
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let (m, n, points) = read_matrix(path.as_ref(), DATASET_MAGIC, "dataset file")?;
        Dataset::new(m, n, points)
    }
}

/// The generating centers of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub true_centers: ModelState,
}

impl GroundTruth {
    pub fn new(true_centers: ModelState) -> Self {
        Self { true_centers }
    }

    pub fn k(&self) -> usize {
        self.true_centers.k()
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let c = &self.true_centers;
        write_matrix(path.as_ref(), TRUTH_MAGIC, c.k(), c.n(), c.as_slice())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let (k, n, data) = read_matrix(path.as_ref(), TRUTH_MAGIC, "ground-truth file")?;
        Ok(Self::new(ModelState::new(k, n, data)?))
    }
}

fn write_matrix(path: &Path, magic: u64, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for header in [magic, rows as u64, cols as u64] {
        w.write_all(&header.to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path, magic: u64, what: &'static str) -> Result<(usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_matrix(&bytes, magic, what)
}

pub(crate) fn decode_matrix(
    bytes: &[u8],
    magic: u64,
    what: &'static str,
) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |reason: String| Error::Format { what, reason };
    if bytes.len() < 24 {
        return Err(bad("shorter than the 24-byte header".into()));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
    if word(0) != magic {
        return Err(bad(format!("magic {:#x}, expected {:#x}", word(0), magic)));
    }
    let (rows, cols) = (word(1) as usize, word(2) as usize);
    let body = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| bad(format!("shape {rows}x{cols} overflows")))?;
    if bytes.len() != 24 + body {
        return Err(bad(format!(
            "shape {rows}x{cols} needs {} bytes, file has {}",
            24 + body,
            bytes.len()
        )));
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

/// Index of the closest prototype; ties go to the lowest index.
pub fn assign(x: &[f64], w: &ModelState) -> Result<usize> {
    if x.len() != w.n() {
        return Err(Error::dim(w.n(), x.len()));
    }
    Ok(nearest(x, w))
}

#[inline]
pub(crate) fn nearest(x: &[f64], w: &ModelState) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in w.rows().enumerate() {
        let d = sq_dist(x, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// `sum_i 0.5 * |x_i - w_{s_i(w)}|^2`.
pub fn quantization_error(data: &Dataset, w: &ModelState) -> Result<f64> {
    if data.n() != w.n() {
        return Err(Error::dim(w.n(), data.n()));
    }
    Ok(data
        .iter()
        .map(|x| 0.5 * sq_dist(x, w.row(nearest(x, w))))
        .sum())
}

/// Single-sample K-Means update: `x - w_k` on the nearest row, zero elsewhere.
pub fn point_update(x: &[f64], w: &ModelState) -> Result<UpdateVector> {
    let k = assign(x, w)?;
    let mut out = ModelState::zeros(w.k(), w.n());
    for ((o, xi), wi) in out.row_mut(k).iter_mut().zip(x).zip(w.row(k)) {
        *o = xi - wi;
    }
    Ok(out)
}

/// Sum of [`point_update`] over the batch, every point assigned against the same `w`.
pub fn minibatch_update<'a, I>(batch: I, w: &ModelState) -> Result<UpdateVector>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut out = ModelState::zeros(w.k(), w.n());
    let mut count = 0usize;
    for x in batch {
        if x.len() != w.n() {
            return Err(Error::dim(w.n(), x.len()));
        }
        accumulate_point(x, w, &mut out);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(out)
}

/// Adds the update of dataset rows `indices` into `out` (not cleared first).
///
/// Hot path of every solver; shapes are checked once by the caller.
pub(crate) fn accumulate_indices(data: &Dataset, indices: &[usize], w: &ModelState, out: &mut ModelState) {
    for &i in indices {
        accumulate_point(data.point(i), w, out);
    }
}

#[inline]
fn accumulate_point(x: &[f64], w: &ModelState, out: &mut ModelState) {
    let k = nearest(x, w);
    for ((o, xi), wi) in out.row_mut(k).iter_mut().zip(x).zip(w.row(k)) {
        *o += xi - wi;
    }
}

/// Mean squared distance between `w` and the true centers under the
/// optimal one-to-one matching of rows.
pub fn ground_truth_error(w: &ModelState, gt: &GroundTruth) -> Result<f64> {
    let truth = &gt.true_centers;
    w.ensure_same_shape(truth)?;
    let k = w.k();
    let mut cost = vec![0.0; k * k];
    for (i, a) in w.rows().enumerate() {
        for (j, b) in truth.rows().enumerate() {
            cost[i * k + j] = sq_dist(a, b);
        }
    }
    let matching = min_cost_assignment(&cost, k);
    let total: f64 = matching
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * k + j])
        .sum();
    Ok(total / k as f64)
}

/// Hungarian method (shortest augmenting paths with potentials), O(k^3).
///
/// `cost` is a row-major `k x k` matrix; returns the column assigned to each row.
pub fn min_cost_assignment(cost: &[f64], k: usize) -> Vec<usize> {
    assert_eq!(cost.len(), k * k);
    // 1-based internally; column 0 is the virtual root.
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut owner = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for row in 1..=k {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut next = 0;
            for col in 1..=k {
                if used[col] {
                    continue;
                }
                let cur = cost[(r - 1) * k + (col - 1)] - u[r] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    next = col;
                }
            }
            for col in 0..=k {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = next;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; k];
    for col in 1..=k {
        assignment[owner[col] - 1] = col - 1;
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(rows: &[&[f64]]) -> ModelState {
        ModelState::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, k: usize, n: usize) -> ModelState {
        ModelState::new(k, n, (0..k * n).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap()
    }

    #[test]
    fn assign_examples() {
        let w = state(&[&[0.0, 0.0], &[5.0, 5.0]]);
        assert_eq!(assign(&[0.0, 0.0], &w).unwrap(), 0);
        assert_eq!(assign(&[5.0, 5.0], &w).unwrap(), 1);
        let tie = state(&[&[0.0, 0.0], &[2.0, 0.0]]);
        assert_eq!(assign(&[1.0, 0.0], &tie).unwrap(), 0);
        assert!(assign(&[1.0], &tie).is_err());
    }

    #[test]
    fn quantization_error_examples() {
        let w = state(&[&[0.0, 0.0]]);
        let one = Dataset::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(quantization_error(&one, &w).unwrap(), 0.5);
        let two = Dataset::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(quantization_error(&two, &w).unwrap(), 1.0);
    }

    #[test]
    fn quantization_error_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, n, k) = (20, 3, 4);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let data = Dataset::from_rows(&rows).unwrap();
        let w = random_state(&mut rng, k, n);
        let mut oracle = 0.0;
        for x in &rows {
            let mut best = f64::INFINITY;
            for c in 0..k {
                let mut d = 0.0;
                for j in 0..n {
                    d += (x[j] - w.row(c)[j]).powi(2);
                }
                best = best.min(d);
            }
            oracle += 0.5 * best;
        }
        let got = quantization_error(&data, &w).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
    }

    #[test]
    fn point_update_examples() {
        let w = state(&[&[0.0, 0.0], &[10.0, 10.0]]);
        let u = point_update(&[2.0, 0.0], &w).unwrap();
        assert_eq!(u.as_slice(), &[2.0, 0.0, 0.0, 0.0]);
        let fixed = point_update(&[10.0, 10.0], &w).unwrap();
        assert!(fixed.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn point_update_is_negative_gradient() {
        // Central differences of the single-sample objective, h = 1e-6.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let n = rng.random_range(1..=5);
            let k = rng.random_range(1..=4);
            let w = random_state(&mut rng, k, n);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            // Skip near-ties where the objective is not differentiable.
            let mut d: Vec<f64> = w.rows().map(|c| sq_dist(&x, c)).collect();
            d.sort_by(f64::total_cmp);
            if k > 1 && d[1] - d[0] < 1e-3 {
                continue;
            }
            let single = Dataset::new(1, n, x.clone()).unwrap();
            let upd = point_update(&x, &w).unwrap();
            for idx in 0..k * n {
                let mut plus = w.clone();
                plus.as_mut_slice()[idx] += h;
                let mut minus = w.clone();
                minus.as_mut_slice()[idx] -= h;
                let fd = (quantization_error(&single, &plus).unwrap()
                    - quantization_error(&single, &minus).unwrap())
                    / (2.0 * h);
                let expected = -fd;
                let got = upd.as_slice()[idx];
                let scale = expected.abs().max(got.abs()).max(1e-3);
                assert!(
                    (got - expected).abs() / scale < 1e-5,
                    "component {idx}: {got} vs {expected}"
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn minibatch_examples() {
        let w = state(&[&[0.0, 0.0], &[10.0, 10.0]]);
        let x = [3.0, 1.0];
        let single = minibatch_update([&x[..]], &w).unwrap();
        assert_eq!(single, point_update(&x, &w).unwrap());
        let double = minibatch_update([&x[..], &x[..]], &w).unwrap();
        let mut twice = point_update(&x, &w).unwrap();
        for v in twice.as_mut_slice() {
            *v *= 2.0;
        }
        assert_eq!(double, twice);
        let empty: [&[f64]; 0] = [];
        assert!(matches!(minibatch_update(empty, &w), Err(Error::EmptyBatch)));
    }

    #[test]
    fn minibatch_matches_sequential_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_state(&mut rng, 4, 3);
        let batch: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let mut oracle = vec![0.0; 12];
        for x in &batch {
            let u = point_update(x, &w).unwrap();
            for (o, v) in oracle.iter_mut().zip(u.as_slice()) {
                *o += v;
            }
        }
        let got = minibatch_update(batch.iter().map(Vec::as_slice), &w).unwrap();
        for (a, b) in got.as_slice().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force_gt(w: &ModelState, gt: &ModelState) -> f64 {
        let k = w.k();
        permutations(k)
            .into_iter()
            .map(|p| (0..k).map(|i| sq_dist(w.row(i), gt.row(p[i]))).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            / k as f64
    }

    #[test]
    fn ground_truth_error_examples() {
        let gt = GroundTruth::new(state(&[&[0.0, 0.0], &[4.0, 1.0]]));
        assert_eq!(ground_truth_error(&gt.true_centers, &gt).unwrap(), 0.0);
        let swapped = state(&[&[4.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(ground_truth_error(&swapped, &gt).unwrap(), 0.0);
        assert!(ground_truth_error(&ModelState::zeros(3, 2), &gt).is_err());
    }

    #[test]
    fn ground_truth_error_matches_permutation_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [3, 4, 5] {
            for _ in 0..50 {
                let truth = random_state(&mut rng, k, 2);
                let w = random_state(&mut rng, k, 2);
                let got = ground_truth_error(&w, &GroundTruth::new(truth.clone())).unwrap();
                let oracle = brute_force_gt(&w, &truth);
                assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
            }
        }
    }

    #[test]
    fn lloyd_step_never_increases_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..40)
                .map(|_| (0..2).map(|_| rng.random_range(-5.0..5.0)).collect())
                .collect();
            let data = Dataset::from_rows(&rows).unwrap();
            let w = ModelState::from_rows(&rows[..3]).unwrap();
            let mut sums = ModelState::zeros(3, 2);
            let mut counts = [0usize; 3];
            for x in data.iter() {
                let c = nearest(x, &w);
                counts[c] += 1;
                for (s, v) in sums.row_mut(c).iter_mut().zip(x) {
                    *s += v;
                }
            }
            if counts.contains(&0) {
                continue;
            }
            for (c, &count) in counts.iter().enumerate() {
                for s in sums.row_mut(c) {
                    *s /= count as f64;
                }
            }
            let before = quantization_error(&data, &w).unwrap();
            let after = quantization_error(&data, &sums).unwrap();
            assert!(after <= before + 1e-12);
        }
    }

    #[test]
    fn files_round_trip_and_check_magic() {
        let dir = tempfile::tempdir().unwrap();
        let data = Dataset::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.5]]).unwrap();
        let p = dir.path().join("d.kmd");
        data.write_to(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 24 + 4 * 8);
        assert_eq!(&bytes[0..8], &DATASET_MAGIC.to_le_bytes());
        assert_eq!(Dataset::read_from(&p).unwrap(), data);
        // A dataset file is not a ground-truth file.
        assert!(matches!(GroundTruth::read_from(&p), Err(Error::Format { .. })));

        let gt = GroundTruth::new(state(&[&[1.0], &[2.0]]));
        let q = dir.path().join("t.kmc");
        gt.write_to(&q).unwrap();
        assert_eq!(&std::fs::read(&q).unwrap()[0..8], &TRUTH_MAGIC.to_le_bytes());
        assert_eq!(GroundTruth::read_from(&q).unwrap(), gt);
    }

    proptest! {
        #[test]
        fn gt_error_is_permutation_invariant(
            vals in prop::collection::vec(-10.0f64..10.0, 12),
            truth in prop::collection::vec(-10.0f64..10.0, 12),
            perm_seed in any::<u64>(),
        ) {
            let w = ModelState::new(4, 3, vals).unwrap();
            let gt = GroundTruth::new(ModelState::new(4, 3, truth).unwrap());
            let mut order: Vec<usize> = (0..4).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..4).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| w.row(i).to_vec()).collect();
            let permuted = ModelState::from_rows(&rows).unwrap();
            let a = ground_truth_error(&w, &gt).unwrap();
            let b = ground_truth_error(&permuted, &gt).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn assign_is_translation_invariant(
            vals in prop::collection::vec(-10i32..10, 6),
            x in prop::collection::vec(-10i32..10, 2),
            shift in prop::collection::vec(-100i32..100, 2),
        ) {
            // Integer-valued inputs keep the shifted distances exact.
            let w = ModelState::new(3, 2, vals.iter().map(|&v| v as f64).collect()).unwrap();
            let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let mut shifted = w.clone();
            for r in 0..3 {
                for (j, v) in shifted.row_mut(r).iter_mut().enumerate() {
                    *v += shift[j] as f64;
                }
            }
            let xs: Vec<f64> = xf.iter().zip(&shift).map(|(a, s)| a + *s as f64).collect();
            prop_assert_eq!(assign(&xf, &w).unwrap(), assign(&xs, &shifted).unwrap());
        }
    }
}
