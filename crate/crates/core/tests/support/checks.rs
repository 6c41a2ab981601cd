//! Library-versus-oracle comparisons shared by the integration and
//! acceptance suites.

#![allow(dead_code)]

use mnad::memory::{self, MemoryBank, QueryMap};
use mnad::rng;
use mnad::scoring;
use mnad::tensor::Tensor;
use rand::Rng;

use super::oracle::{self, Rows};

fn tensor(rows: &Rows) -> Tensor<f64> {
    Tensor::new(vec![rows.len(), rows[0].len()], oracle::flatten(rows)).unwrap()
}

fn bank(rows: &Rows) -> MemoryBank<f64> {
    MemoryBank::from_unit_items(tensor(rows)).unwrap()
}

fn qmap(rows: &Rows) -> QueryMap<f64> {
    QueryMap::new(1, rows.len(), tensor(rows)).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest absolute deviation from the oracle for each quantity over
/// `instances` seeded random problems.
pub fn oracle_deviations(instances: u64) -> Vec<(&'static str, f64)> {
    let mut worst = [0.0f64; 7];
    for seed in 0..instances {
        let mut r = rng::seeded(1000 + seed);
        let (k, m, c) = (r.random_range(1..40), r.random_range(2..12), r.random_range(1..24));
        let queries = oracle::random_unit_rows(&mut r, k, c);
        let items = oracle::random_unit_rows(&mut r, m, c);

        let (lib_read, lib_w) = memory::read(&qmap(&queries), &bank(&items)).unwrap();
        let (o_read, o_w) = oracle::read(&queries, &items);
        worst[0] = worst[0]
            .max(max_diff(lib_read.features.data(), &oracle::flatten(&o_read)))
            .max(max_diff(lib_w.probs.data(), &oracle::flatten(&o_w)));

        let lib_up = memory::update(&bank(&items), &qmap(&queries)).unwrap();
        worst[1] = worst[1].max(max_diff(lib_up.items().data(), &oracle::flatten(&oracle::update(&items, &queries))));

        let ch = r.random_range(1..4);
        let n = ch * r.random_range(4..200);
        let frame: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let recon: Vec<f64> = frame.iter().map(|&v| (v + r.random_range(-0.3..0.3)).clamp(0.0, 1.0)).collect();
        let shape = vec![ch, 1, n / ch];
        let ft = Tensor::new(shape.clone(), frame.clone()).unwrap();
        let rt = Tensor::new(shape, recon.clone()).unwrap();
        worst[2] = worst[2].max((memory::regular_score(&ft, &rt).unwrap() - oracle::regular_score(&frame, &recon, ch)).abs());
        worst[3] = worst[3].max((scoring::psnr(&rt, &ft).unwrap().db - oracle::psnr(&recon, &frame)).abs());

        let d = scoring::distance_score(&qmap(&queries), &bank(&items)).unwrap();
        worst[4] = worst[4].max((d - oracle::distance_score(&queries, &items)).abs());

        let len = r.random_range(1..60);
        let p: Vec<f64> = (0..len).map(|_| r.random_range(10.0..40.0)).collect();
        let dist: Vec<f64> = (0..len).map(|_| r.random_range(0.0..2.0)).collect();
        let lambda = r.random_range(0.0..=1.0);
        let s = scoring::abnormality_score(&p, &dist, lambda).unwrap().score;
        worst[5] = worst[5].max(max_diff(&s, &oracle::abnormality(&p, &dist, lambda)));

        let len = r.random_range(2..120);
        let mut labels: Vec<u8> = (0..len).map(|_| r.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse values so ties occur.
        let scores: Vec<f64> = (0..len).map(|_| r.random_range(0..12) as f64 / 11.0).collect();
        worst[6] = worst[6].max((scoring::roc_auc(&scores, &labels).unwrap() - oracle::auc(&scores, &labels)).abs());
    }
    ["read", "update", "E_t", "PSNR", "D", "S_t", "AUC"].into_iter().zip(worst).collect()
}

/// Largest deviation from 1 of a read-weight row sum or an update-weight
/// column sum, single precision.
pub fn softmax_row_error(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut r = rng::seeded(5000 + seed);
        let (k, m, c) = (r.random_range(1..64), r.random_range(2..16), r.random_range(1..32));
        let q = tensor(&oracle::random_unit_rows(&mut r, k, c)).cast::<f32>();
        let p = tensor(&oracle::random_unit_rows(&mut r, m, c)).cast::<f32>();
        let b = MemoryBank::new(p).unwrap();
        let (_, w) = memory::read(&QueryMap::new(1, k, q.clone()).unwrap(), &b).unwrap();
        for row in 0..k {
            let s: f64 = w.probs.row(row).iter().map(|&v| v as f64).sum();
            worst = worst.max((s - 1.0).abs());
        }
        // Update weights are a softmax over queries: columns sum to one.
        let near = memory::nearest_by_dot(&q, &b).unwrap();
        let u = memory::update_weights(&q, &b, &near).unwrap();
        for col in 0..m {
            let s: f64 = (0..k).map(|row| u.v.row(row)[col] as f64).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}

/// Largest `| ||p_m|| - 1 |` after `steps` single-precision updates.
pub fn unit_norm_drift(steps: usize) -> f64 {
    let mut r = rng::seeded(77);
    let mut b = MemoryBank::<f32>::random(10, 32, &mut r).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..steps {
        let q = tensor(&oracle::random_unit_rows(&mut r, 16, 32)).cast::<f32>();
        b = memory::update_rows(&b, &q).unwrap();
        for m in 0..b.len() {
            let n: f64 = b.item(m).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            worst = worst.max((n - 1.0).abs());
        }
    }
    worst
}

/// Whether items that no query chose, and banks updated with no queries at
/// all, come back bit-identical.
pub fn empty_assignment_is_identity(instances: u64) -> bool {
    (0..instances).all(|seed| {
        let mut r = rng::seeded(9000 + seed);
        let (m, c) = (r.random_range(3..12), r.random_range(2..16));
        let items = oracle::random_unit_rows(&mut r, m, c);
        let b = bank(&items);
        let none = memory::update_rows(&b, &Tensor::zeros(&[0, c])).unwrap();
        // All queries sit on item 0, so every other item is unassigned.
        let queries: Rows = (0..5).map(|_| items[0].clone()).collect();
        let one = memory::update_rows(&b, &tensor(&queries)).unwrap();
        none == b && (1..m).all(|i| one.item(i) == b.item(i))
    })
}

/// Whether AUC survives strictly increasing transforms of the scores.
pub fn auc_monotone_invariant(instances: u64) -> bool {
    (0..instances).all(|seed| {
        let mut r = rng::seeded(13000 + seed);
        let len = r.random_range(2..80);
        let mut labels: Vec<u8> = (0..len).map(|_| r.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let s: Vec<f64> = (0..len).map(|_| r.random_range(0..20) as f64 / 19.0).collect();
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + v.powi(3)).collect();
        scoring::roc_auc(&s, &labels).unwrap() == scoring::roc_auc(&t, &labels).unwrap()
    })
}

/// Whether every fused score lies in `[0, 1]`.
pub fn scores_in_unit_interval(instances: u64) -> bool {
    (0..instances).all(|seed| {
        let mut r = rng::seeded(17000 + seed);
        let len = r.random_range(1..50);
        let p: Vec<f64> = (0..len).map(|_| r.random_range(5.0..100.0)).collect();
        let d: Vec<f64> = (0..len).map(|_| r.random_range(0.0..2.0)).collect();
        let s = scoring::abnormality_score(&p, &d, r.random_range(0.0..=1.0)).unwrap().score;
        s.iter().all(|v| (0.0..=1.0).contains(v))
    })
}

/// Whether the separateness term vanishes exactly when every query is at
/// least `alpha` closer to its nearest item than to its second nearest.
pub fn hinge_zero_condition(instances: u64) -> bool {
    use mnad::autodiff::Tape;
    use mnad::losses::separateness_loss;
    (0..instances).all(|seed| {
        let mut r = rng::seeded(21000 + seed);
        let (k, m, c) = (r.random_range(1..6), r.random_range(2..6), r.random_range(2..6));
        let queries = oracle::random_unit_rows(&mut r, k, c);
        let items = oracle::random_unit_rows(&mut r, m, c);
        let alpha = r.random_range(0.0..0.5);
        let (_, w) = memory::read(&qmap(&queries), &bank(&items)).unwrap();
        let a = memory::assign(&w).unwrap();
        let mut tape = Tape::<f64>::new();
        let qv = tape.constant(tensor(&queries));
        let pv = tape.constant(tensor(&items));
        let loss = separateness_loss(&mut tape, qv, pv, &a, alpha, 1).unwrap();
        let zero = tape.value(loss).item() == 0.0;
        let dist = |x: &[f64], y: &[f64]| oracle::norm(&x.iter().zip(y).map(|(p, q)| p - q).collect::<Vec<_>>());
        let mut sorted_ok = true;
        let mut margin_ok = true;
        for (kq, q) in queries.iter().enumerate() {
            let mut d: Vec<f64> = items.iter().map(|p| dist(q, p)).collect();
            let (dp, dn) = (d[a.nearest[kq]], d[a.second[kq]]);
            d.sort_by(f64::total_cmp);
            sorted_ok &= (dp - d[0]).abs() < 1e-12 && (dn - d[1]).abs() < 1e-12;
            margin_ok &= dn - dp >= alpha;
        }
        sorted_ok && zero == margin_ok
    })
}
