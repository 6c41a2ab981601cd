//! The prototype memory: softmax read, hard-assignment update, and the
//! error-gated test-time update.
//!
//! Items are unit vectors. A query map of `K` unit-norm queries reads the
//! bank through matching probabilities (softmax over items of the dot
//! products) and receives the probability-weighted average of the items.
//! Updating moves each item towards the queries that chose it as their
//! nearest item, weighting them by a softmax over queries renormalized so
//! the closest assigned query has weight one, and re-projects the item onto
//! the unit sphere. Updates are state changes, never gradient steps.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `M` unit-norm prototype items of dimension `C`, stored as `[M, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    items: Tensor<T>,
}

fn normalize_in_place<T: Scalar>(v: &mut [T]) -> Option<()> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if !(norm > T::zero()) || !norm.is_finite() {
        return None;
    }
    for x in v {
        *x /= norm;
    }
    Some(())
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// Index of the largest value; ties go to the lowest index.
fn argmax<T: Scalar>(values: impl Iterator<Item = T>, skip: Option<usize>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.enumerate() {
        if Some(i) == skip {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i).expect("argmax over an empty set")
}

impl<T: Scalar> MemoryBank<T> {
    /// Builds a bank from `[M, C]` rows, projecting each onto the unit sphere.
    pub fn new(items: Tensor<T>) -> Result<Self> {
        if items.rank() != 2 {
            return Err(Error::shape("memory bank", format!("items must be [M, C], got {:?}", items.shape())));
        }
        let mut items = items;
        for m in 0..items.shape()[0] {
            normalize_in_place(items.row_mut(m))
                .ok_or_else(|| Error::NonFinite(format!("memory item {m} has zero or non-finite norm")))?;
        }
        Ok(MemoryBank { items })
    }

    /// Wraps items that are already unit norm (within `1e-5`) without
    /// touching their bits.
    pub fn from_unit_items(items: Tensor<T>) -> Result<Self> {
        if items.rank() != 2 {
            return Err(Error::shape("memory bank", format!("items must be [M, C], got {:?}", items.shape())));
        }
        for m in 0..items.shape()[0] {
            let norm = items.row(m).iter().map(|&x| x * x).sum::<T>().sqrt().as_f64();
            if !((norm - 1.0).abs() <= 1e-5) {
                return Err(Error::NonFinite(format!("memory item {m} has norm {norm}, expected 1")));
            }
        }
        Ok(MemoryBank { items })
    }

    /// `m` items drawn uniformly on the unit sphere in `R^c`.
    pub fn random(m: usize, c: usize, rng: &mut Rng) -> Result<Self> {
        if m == 0 || c == 0 {
            return Err(Error::config(format!("memory needs M >= 1 and C >= 1, got M={m}, C={c}")));
        }
        loop {
            let data: Vec<T> = (0..m * c)
                .map(|_| T::from_f64(StandardNormal.sample(rng)))
                .collect();
            if let Ok(bank) = Self::new(Tensor::new(vec![m, c], data)?) {
                return Ok(bank);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.items.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.items.shape()[1]
    }

    pub fn items(&self) -> &Tensor<T> {
        &self.items
    }

    pub fn item(&self, m: usize) -> &[T] {
        self.items.row(m)
    }

    pub fn cast<U: Scalar>(&self) -> MemoryBank<U> {
        MemoryBank {
            items: self.items.cast(),
        }
    }

    /// Smallest Euclidean distance between two distinct items.
    pub fn min_pairwise_distance(&self) -> Option<f64> {
        let m = self.len();
        let mut best: Option<f64> = None;
        for i in 0..m {
            for j in i + 1..m {
                let d = distance(self.item(i), self.item(j)).as_f64();
                best = Some(best.map_or(d, |b: f64| b.min(d)));
            }
        }
        best
    }

    /// Replaces the items after an out-of-band change (e.g. an optimizer
    /// step when items are trained), re-projecting onto the sphere.
    pub fn set_items(&mut self, items: Tensor<T>) -> Result<()> {
        if items.shape() != self.items.shape() {
            return Err(Error::shape(
                "memory bank",
                format!("cannot replace {:?} items with {:?}", self.items.shape(), items.shape()),
            ));
        }
        *self = Self::new(items)?;
        Ok(())
    }
}

/// `H x W` grid of `C`-dimensional queries, stored as `[K, C]` rows in
/// row-major spatial order (`k = y * W + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryMap<T> {
    pub height: usize,
    pub width: usize,
    pub queries: Tensor<T>,
}

impl<T: Scalar> QueryMap<T> {
    pub fn new(height: usize, width: usize, queries: Tensor<T>) -> Result<Self> {
        if queries.rank() != 2 || queries.shape()[0] != height * width {
            return Err(Error::shape(
                "query map",
                format!("{height}x{width} grid needs [{}, C] queries, got {:?}", height * width, queries.shape()),
            ));
        }
        Ok(QueryMap { height, width, queries })
    }

    /// `K = H * W`.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.queries.shape()[1]
    }

    pub fn query(&self, k: usize) -> &[T] {
        self.queries.row(k)
    }
}

/// Aggregated item features for each query, `[K, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadMap<T> {
    pub height: usize,
    pub width: usize,
    pub features: Tensor<T>,
}

/// Read probabilities stored `[K, M]`: row `k` is the distribution over
/// items for query `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchWeights<T> {
    pub probs: Tensor<T>,
}

impl<T: Scalar> MatchWeights<T> {
    pub fn queries(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn items(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn weight(&self, k: usize, m: usize) -> T {
        self.probs.row(k)[m]
    }
}

/// Nearest (`p`) and second-nearest (`n`) items per query and the
/// per-item assignment sets `U^m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub nearest: Vec<usize>,
    pub second: Vec<usize>,
    pub sets: Vec<Vec<usize>>,
}

/// Update weights, both `[K, M]`: `v` is the softmax over queries for each
/// item; `renormalized` holds `v'` on assigned pairs and zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateWeights<T> {
    pub v: Tensor<T>,
    pub renormalized: Tensor<T>,
}

/// Records the read on a tape. `queries: [N, C]`, `items: [M, C]`; returns
/// `(read: [N, C], weights: [N, M])`.
pub fn read_on_tape<T: Scalar>(tape: &mut Tape<T>, queries: Var, items: Var) -> Result<(Var, Var)> {
    let (qs, ps) = (tape.shape(queries).to_vec(), tape.shape(items).to_vec());
    if qs.len() != 2 || ps.len() != 2 || qs[1] != ps[1] {
        return Err(Error::shape(
            "memory read",
            format!("queries {qs:?} and items {ps:?} must share the feature dimension"),
        ));
    }
    let scores = tape.matmul_nt(queries, items)?;
    let weights = tape.softmax(scores, 1)?;
    let read = tape.matmul(weights, items)?;
    Ok((read, weights))
}

pub fn read<T: Scalar>(query_map: &QueryMap<T>, bank: &MemoryBank<T>) -> Result<(ReadMap<T>, MatchWeights<T>)> {
    let mut tape = Tape::new();
    let q = tape.constant(query_map.queries.clone());
    let p = tape.constant(bank.items.clone());
    let (r, w) = read_on_tape(&mut tape, q, p)?;
    Ok((
        ReadMap {
            height: query_map.height,
            width: query_map.width,
            features: tape.value(r).clone(),
        },
        MatchWeights {
            probs: tape.value(w).clone(),
        },
    ))
}

/// Nearest item per query (`argmax_m w`), lowest index on ties.
pub fn nearest<T: Scalar>(weights: &MatchWeights<T>) -> Vec<usize> {
    (0..weights.queries())
        .map(|k| argmax(weights.probs.row(k).iter().copied(), None))
        .collect()
}

pub fn assign<T: Scalar>(weights: &MatchWeights<T>) -> Result<Assignment> {
    let m = weights.items();
    if m < 2 {
        return Err(Error::config(format!("assignment needs at least two memory items, got {m}")));
    }
    let nearest = nearest(weights);
    let second = nearest
        .iter()
        .enumerate()
        .map(|(k, &p)| argmax(weights.probs.row(k).iter().copied(), Some(p)))
        .collect();
    let mut sets = vec![Vec::new(); m];
    for (k, &p) in nearest.iter().enumerate() {
        sets[p].push(k);
    }
    Ok(Assignment { nearest, second, sets })
}

fn check_dims<T: Scalar>(op: &'static str, queries: &Tensor<T>, bank: &MemoryBank<T>) -> Result<()> {
    if queries.rank() != 2 || queries.shape()[1] != bank.dim() {
        return Err(Error::shape(
            op,
            format!("queries {:?} against {}-dimensional items", queries.shape(), bank.dim()),
        ));
    }
    Ok(())
}

/// Dot products `[N, M]` between query rows and items.
fn scores<T: Scalar>(queries: &Tensor<T>, bank: &MemoryBank<T>) -> Tensor<T> {
    let (n, m) = (queries.shape()[0], bank.len());
    Tensor::from_fn(&[n, m], |i| dot(queries.row(i / m), bank.item(i % m)))
}

/// Nearest item per query row by raw dot product.
pub fn nearest_by_dot<T: Scalar>(queries: &Tensor<T>, bank: &MemoryBank<T>) -> Result<Vec<usize>> {
    check_dims("nearest item", queries, bank)?;
    let s = scores(queries, bank);
    Ok((0..queries.shape()[0]).map(|k| argmax(s.row(k).iter().copied(), None)).collect())
}

/// Computes `v` and `v'` for query rows `[N, C]` given their nearest items.
pub fn update_weights<T: Scalar>(queries: &Tensor<T>, bank: &MemoryBank<T>, nearest: &[usize]) -> Result<UpdateWeights<T>> {
    check_dims("update weights", queries, bank)?;
    let (n, m) = (queries.shape()[0], bank.len());
    if nearest.len() != n {
        return Err(Error::shape("update weights", format!("{} assignments for {n} queries", nearest.len())));
    }
    let s = scores(queries, bank);
    let mut v = Tensor::zeros(&[n, m]);
    for item in 0..m {
        let max = (0..n).map(|k| s.row(k)[item]).fold(T::neg_infinity(), T::max);
        let total: T = (0..n).map(|k| (s.row(k)[item] - max).exp()).sum();
        for k in 0..n {
            v.row_mut(k)[item] = (s.row(k)[item] - max).exp() / total;
        }
    }
    let mut renormalized = Tensor::zeros(&[n, m]);
    for item in 0..m {
        let members = (0..n).filter(|&k| nearest[k] == item);
        let Some(peak) = members.clone().map(|k| v.row(k)[item]).reduce(T::max) else {
            continue;
        };
        for k in members {
            renormalized.row_mut(k)[item] = v.row(k)[item] / peak;
        }
    }
    Ok(UpdateWeights { v, renormalized })
}

/// Applies the item update with query rows `[N, C]`; rows from several
/// query maps may be stacked.
pub fn update_rows<T: Scalar>(bank: &MemoryBank<T>, queries: &Tensor<T>) -> Result<MemoryBank<T>> {
    let nearest = nearest_by_dot(queries, bank)?;
    let weights = update_weights(queries, bank, &nearest)?;
    let mut items = bank.items.clone();
    let c = bank.dim();
    for (k, &p) in nearest.iter().enumerate() {
        let w = weights.renormalized.row(k)[p];
        let q = queries.row(k);
        let row = items.row_mut(p);
        for i in 0..c {
            row[i] += w * q[i];
        }
    }
    let mut moved = vec![false; bank.len()];
    for &p in &nearest {
        moved[p] = true;
    }
    // Items nobody chose are left bit-for-bit untouched.
    for item in (0..bank.len()).filter(|&i| moved[i]) {
        if normalize_in_place(items.row_mut(item)).is_none() {
            return Err(Error::NonFinite(format!("memory item {item} degenerated during update")));
        }
    }
    Ok(MemoryBank { items })
}

pub fn update<T: Scalar>(bank: &MemoryBank<T>, query_map: &QueryMap<T>) -> Result<MemoryBank<T>> {
    update_rows(bank, &query_map.queries)
}

/// Weighted reconstruction error of `recon` against `frame` (same shape,
/// `[C, H, W]`), on whatever intensity scale the frames are given in.
///
/// The per-pixel error is the L2 norm over channels; pixels are weighted by
/// `1 - exp(-e)` normalized to sum to one. Identical frames score 0.
pub fn regular_score<T: Scalar>(frame: &Tensor<T>, recon: &Tensor<T>) -> Result<f64> {
    if frame.shape() != recon.shape() || frame.rank() != 3 {
        return Err(Error::shape(
            "regular score",
            format!("frame {:?} vs reconstruction {:?}", frame.shape(), recon.shape()),
        ));
    }
    let (c, plane) = (frame.shape()[0], frame.shape()[1] * frame.shape()[2]);
    let (a, b) = (frame.data(), recon.data());
    let errors: Vec<f64> = (0..plane)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let d = a[ch * plane + i].as_f64() - b[ch * plane + i].as_f64();
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let total: f64 = errors.iter().map(|&e| 1.0 - (-e).exp()).sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok(errors.iter().map(|&e| (1.0 - (-e).exp()) / total * e).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Updated,
    /// The frame's regular score exceeded the threshold; the bank was kept.
    AbnormalSkipped,
    /// The model runs without memory.
    NoMemory,
}

impl GateDecision {
    pub fn as_str(self) -> &'static str {
        match self {
            GateDecision::Updated => "updated",
            GateDecision::AbnormalSkipped => "abnormal-skipped",
            GateDecision::NoMemory => "no-memory",
        }
    }
}

/// Training always updates. At test time the bank is updated only when
/// `regular_score <= gamma`; `gamma = +inf` disables the gate.
pub fn gated_update<T: Scalar>(
    bank: &MemoryBank<T>,
    query_map: &QueryMap<T>,
    regular_score: f64,
    gamma: f64,
    phase: Phase,
) -> Result<(MemoryBank<T>, GateDecision)> {
    if !(gamma > 0.0) {
        return Err(Error::config(format!("gate threshold must be positive, got {gamma}")));
    }
    if phase == Phase::Test && !(regular_score <= gamma) {
        return Ok((bank.clone(), GateDecision::AbnormalSkipped));
    }
    Ok((update(bank, query_map)?, GateDecision::Updated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn bank(rows: &[&[f64]]) -> MemoryBank<f64> {
        let c = rows[0].len();
        MemoryBank::new(Tensor::new(vec![rows.len(), c], rows.concat()).unwrap()).unwrap()
    }

    fn qmap(rows: &[&[f64]]) -> QueryMap<f64> {
        let c = rows[0].len();
        QueryMap::new(1, rows.len(), Tensor::new(vec![rows.len(), c], rows.concat()).unwrap()).unwrap()
    }

    fn random_unit_rows(n: usize, c: usize, rng: &mut super::Rng) -> Tensor<f64> {
        MemoryBank::<f64>::random(n, c, rng).unwrap().items
    }

    #[test]
    fn single_item_reads_itself() {
        let b = bank(&[&[0.6, 0.8]]);
        let q = qmap(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (r, w) = read(&q, &b).unwrap();
        assert_eq!(w.probs.data(), &[1.0, 1.0]);
        assert!(r.features.max_abs_diff(&Tensor::from_f64(&[2, 2], &[0.6, 0.8, 0.6, 0.8]).unwrap()) < 1e-15);
    }

    #[test]
    fn read_of_axis_query() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (r, w) = read(&qmap(&[&[1.0, 0.0]]), &b).unwrap();
        let e = std::f64::consts::E;
        let expect = [e / (e + 1.0), 1.0 / (e + 1.0)];
        for i in 0..2 {
            assert!((w.probs.data()[i] - expect[i]).abs() < 1e-12);
            assert!((r.features.data()[i] - expect[i]).abs() < 1e-12);
        }
        assert!((expect[0] - 0.7311).abs() < 1e-4);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let (r, w) = read(&qmap(&[&[h, h]]), &b).unwrap();
        assert!((w.probs.data()[0] - 0.5).abs() < 1e-15 && (r.features.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn read_rejects_dimension_mismatch() {
        let b = bank(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert!(matches!(read(&qmap(&[&[1.0, 0.0]]), &b), Err(Error::Shape { .. })));
    }

    fn weights(rows: &[&[f64]]) -> MatchWeights<f64> {
        MatchWeights {
            probs: Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap(),
        }
    }

    #[test]
    fn assignment_examples() {
        let a = assign(&weights(&[&[0.7, 0.3]])).unwrap();
        assert_eq!((a.nearest[0], a.second[0]), (0, 1));
        let a = assign(&weights(&[&[0.5, 0.5]])).unwrap();
        assert_eq!((a.nearest[0], a.second[0]), (0, 1));
        let a = assign(&weights(&[&[0.2, 0.8], &[0.1, 0.9], &[0.4, 0.6]])).unwrap();
        assert_eq!(a.sets, vec![vec![], vec![0, 1, 2]]);
        assert!(assign(&weights(&[&[1.0]])).is_err());
    }

    #[test]
    fn unassigned_item_is_unchanged() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let nb = update(&b, &qmap(&[&[0.8, 0.6]])).unwrap();
        assert_eq!(nb.item(1), b.item(1));
    }

    #[test]
    fn single_assigned_query_update() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let nb = update(&b, &qmap(&[&[0.8, 0.6]])).unwrap();
        let norm = (1.8f64 * 1.8 + 0.6 * 0.6).sqrt();
        assert!((nb.item(0)[0] - 1.8 / norm).abs() < 1e-12);
        assert!((nb.item(0)[1] - 0.6 / norm).abs() < 1e-12);
        assert!((nb.item(0)[0] - 0.9487).abs() < 1e-4 && (nb.item(0)[1] - 0.3162).abs() < 1e-4);
    }

    #[test]
    fn duplicated_query_counts_twice() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let q = qmap(&[&[0.8, 0.6], &[0.8, 0.6]]);
        let w = update_weights(&q.queries, &b, &[0, 0]).unwrap();
        assert_eq!(w.renormalized.row(0)[0], 1.0);
        assert_eq!(w.renormalized.row(1)[0], 1.0);
        let nb = update(&b, &q).unwrap();
        let (x, y) = (1.0 + 1.6, 1.2);
        let norm = f64::hypot(x, y);
        assert!((nb.item(0)[0] - x / norm).abs() < 1e-12 && (nb.item(0)[1] - y / norm).abs() < 1e-12);
    }

    #[test]
    fn regular_score_examples() {
        let f = Tensor::<f64>::zeros(&[1, 2, 2]);
        assert_eq!(regular_score(&f, &f).unwrap(), 0.0);
        let r = Tensor::full(&[1, 2, 2], 0.3);
        assert!((regular_score(&f, &r).unwrap() - 0.3).abs() < 1e-15);
        let r = Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((regular_score(&f, &r).unwrap() - 1.0).abs() < 1e-15);
        assert!(regular_score(&f, &Tensor::zeros(&[1, 2, 3])).is_err());
    }

    #[test]
    fn gate_behaviour() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let q = qmap(&[&[0.8, 0.6]]);
        let (nb, flag) = gated_update(&b, &q, 0.0, 0.01, Phase::Test).unwrap();
        assert_eq!(flag, GateDecision::Updated);
        assert_ne!(nb, b);
        let (nb, flag) = gated_update(&b, &q, 0.5, 0.01, Phase::Test).unwrap();
        assert_eq!((flag, &nb), (GateDecision::AbnormalSkipped, &b));
        assert_eq!(flag.as_str(), "abnormal-skipped");
        let (_, flag) = gated_update(&b, &q, 0.5, 0.01, Phase::Train).unwrap();
        assert_eq!(flag, GateDecision::Updated);
        let (_, flag) = gated_update(&b, &q, 1e9, f64::INFINITY, Phase::Test).unwrap();
        assert_eq!(flag, GateDecision::Updated);
        assert!(gated_update(&b, &q, 0.0, 0.0, Phase::Test).is_err());
    }

    #[test]
    fn repeated_updates_converge_to_the_query() {
        let b = bank(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        let q = qmap(&[&[0.6, 0.8, 0.0]]);
        let mut current = b;
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let d = distance(current.item(0), q.query(0));
            assert!(d <= last + 1e-15);
            last = d;
            current = update(&current, &q).unwrap();
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn thousand_updates_keep_unit_norm() {
        let mut r = rng::seeded(3);
        let mut b = MemoryBank::<f64>::random(6, 8, &mut r).unwrap();
        for _ in 0..1000 {
            let n = r.random_range(1..20);
            b = update_rows(&b, &random_unit_rows(n, 8, &mut r)).unwrap();
        }
        for m in 0..6 {
            let norm = b.item(m).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn read_is_invariant_to_item_order(seed in 0u64..1000, m in 2usize..6, k in 1usize..10, c in 2usize..6) {
            let mut r = rng::seeded(seed);
            let b = MemoryBank::<f64>::random(m, c, &mut r).unwrap();
            let q = QueryMap::new(1, k, random_unit_rows(k, c, &mut r)).unwrap();
            let perm: Vec<usize> = (0..m).rev().collect();
            let pb = MemoryBank::new(Tensor::from_fn(&[m, c], |i| b.item(perm[i / c])[i % c])).unwrap();
            let (r1, w1) = read(&q, &b).unwrap();
            let (r2, w2) = read(&q, &pb).unwrap();
            prop_assert!(r1.features.max_abs_diff(&r2.features) < 1e-12);
            for kk in 0..k {
                for mm in 0..m {
                    prop_assert!((w1.weight(kk, perm[mm]) - w2.weight(kk, mm)).abs() < 1e-12);
                }
            }
            let u1 = update_weights(&q.queries, &b, &nearest(&w1)).unwrap();
            let u2 = update_weights(&q.queries, &pb, &nearest(&w2)).unwrap();
            for kk in 0..k {
                for mm in 0..m {
                    prop_assert!((u1.v.row(kk)[perm[mm]] - u2.v.row(kk)[mm]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn weight_normalization(seed in 0u64..1000, m in 2usize..6, k in 1usize..16) {
            let mut r = rng::seeded(seed);
            let b = MemoryBank::<f64>::random(m, 4, &mut r).unwrap();
            let q = QueryMap::new(1, k, random_unit_rows(k, 4, &mut r)).unwrap();
            let (read_map, w) = read(&q, &b).unwrap();
            for kk in 0..k {
                let s: f64 = (0..m).map(|mm| w.weight(kk, mm)).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                let norm = read_map.features.row(kk).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(norm <= 1.0 + 1e-12);
            }
            let near = nearest(&w);
            prop_assert_eq!(&near, &nearest_by_dot(&q.queries, &b).unwrap());
            let u = update_weights(&q.queries, &b, &near).unwrap();
            for mm in 0..m {
                let s: f64 = (0..k).map(|kk| u.v.row(kk)[mm]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                let assigned: Vec<f64> = (0..k).filter(|&kk| near[kk] == mm).map(|kk| u.renormalized.row(kk)[mm]).collect();
                if !assigned.is_empty() {
                    prop_assert_eq!(assigned.iter().cloned().fold(0.0, f64::max), 1.0);
                }
            }
        }
    }
}
