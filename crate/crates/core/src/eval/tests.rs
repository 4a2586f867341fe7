use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::Tensor;
use crate::par::Exec;

fn meta(identity: usize, camera: usize) -> Meta {
    Meta { identity, camera }
}

#[test]
fn single_correct_entry() {
    let d = Tensor::<f64>::from_f64(vec![1, 1], &[0.3]).unwrap();
    let c = cmc_map(&d, &[meta(0, 0)], &[meta(0, 1)], 10, Exec::Sequential).unwrap();
    assert_eq!(c.rank(1), 1.0);
    assert_eq!(c.map, 1.0);
}

#[test]
fn worked_average_precision() {
    // positives at ranks 1, 3 and 5 among five valid entries
    let gallery = [meta(0, 1), meta(1, 1), meta(0, 2), meta(2, 1), meta(0, 1)];
    let d = Tensor::<f64>::from_f64(vec![1, 5], &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
    let c = cmc_map(&d, &[meta(0, 0)], &gallery, 5, Exec::Sequential).unwrap();
    let expected = (1.0 / 1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
    assert!((c.map - expected).abs() < 1e-15);
    assert!((c.map - 0.7556).abs() < 1e-4);
    assert_eq!(c.curve, vec![1.0; 5]);
}

#[test]
fn same_camera_matches_are_excluded() {
    let gallery = [meta(0, 0), meta(1, 1), meta(0, 1)];
    let d = Tensor::<f64>::from_f64(vec![2, 3], &[0.0, 0.5, 0.9, 0.0, 0.5, 0.9]).unwrap();
    let c = cmc_map(&d, &[meta(0, 0), meta(3, 0)], &gallery, 3, Exec::Sequential).unwrap();
    assert_eq!(c.valid_queries, 1);
    assert_eq!(c.skipped_queries, 1);
    assert_eq!(c.curve, vec![0.0, 1.0, 1.0]);
    assert_eq!(c.map, 0.5);
}

#[test]
fn ranking_only_dependence() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (nq, ng) = (rng.gen_range(1..10), rng.gen_range(2..30));
        let q: Vec<Meta> = (0..nq).map(|_| meta(rng.gen_range(0..4), rng.gen_range(0..2))).collect();
        let g: Vec<Meta> = (0..ng).map(|_| meta(rng.gen_range(0..4), rng.gen_range(0..3))).collect();
        let d: Tensor<f64> = Tensor::uniform(vec![nq, ng], 0.0, 4.0, &mut rng);
        let base = cmc_map(&d, &q, &g, 10, Exec::Sequential).unwrap();

        let squashed = d.map(|v| (v * 3.0).exp() - 1.0);
        assert_eq!(cmc_map(&squashed, &q, &g, 10, Exec::Sequential).unwrap(), base);

        let mut perm: Vec<usize> = (0..ng).collect();
        perm.shuffle(&mut rng);
        let gp: Vec<Meta> = perm.iter().map(|&i| g[i]).collect();
        let dp = Tensor::from_fn(vec![nq, ng], |k| d.data()[(k / ng) * ng + perm[k % ng]]);
        let shuffled = cmc_map(&dp, &q, &gp, 10, Exec::Parallel).unwrap();
        assert_eq!(shuffled.curve, base.curve);
        assert!((shuffled.map - base.map).abs() < 1e-12);
        assert!(base.curve.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn distances() {
    let x = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let d = distance_matrix(&x, &x, Exec::Sequential).unwrap();
    assert_eq!(d.data(), &[0.0, 2.0, 2.0, 0.0]);
    let n = l2_normalize(&Tensor::<f64>::from_f64(vec![1, 2], &[3.0, 4.0]).unwrap());
    assert_eq!(n.data(), &[0.6, 0.8]);
    assert!(distance_matrix(&x, &Tensor::zeros(vec![2, 3]), Exec::Sequential).is_err());
}

#[test]
fn report_formats() {
    let r = EvalReport {
        ranks: [0.5, 0.75, 0.8, 1.0],
        map: 0.6,
        queries: 4,
        gallery: 20,
        skipped_queries: 0,
        keep_ratio: 0.7,
        throughput: 123.456,
    };
    assert_eq!(r.csv_row(), "0.500000,0.750000,0.800000,1.000000,0.600000,4,20,0,0.7,123.46");
    assert_eq!(EvalReport::CSV_HEADER.split(',').count(), r.csv_row().split(',').count());
    let table = r.to_string();
    assert!(table.contains("Rank-1") && table.contains("50.00%") && table.contains("mAP"));
}
