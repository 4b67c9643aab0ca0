use super::*;
use crate::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn emb(v: &[f64]) -> Embedding {
    Embedding {
        values: Tensor::vector(v.to_vec()),
        source: String::new(),
    }
}

fn label(identity: usize, camera: usize) -> Label {
    Label { identity, camera }
}

fn matrix(values: Vec<f64>, rows: usize, q: Vec<Label>, g: Vec<Label>) -> DistanceMatrix {
    DistanceMatrix {
        rows,
        cols: values.len() / rows,
        values,
        query_labels: q,
        gallery_labels: g,
    }
}

#[test]
fn distance_examples() {
    let d = distance_matrix(&[emb(&[1.0, 0.0])], &[emb(&[1.0, 0.0]), emb(&[0.0, 1.0])]).unwrap();
    assert_eq!(d.get(0, 0), 0.0);
    assert_eq!(d.get(0, 1), 2f64.sqrt());
}

#[test]
fn distance_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mk = |rng: &mut ChaCha8Rng| emb(&(0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
    let q: Vec<Embedding> = (0..5).map(|_| mk(&mut rng)).collect();
    let g: Vec<Embedding> = (0..7).map(|_| mk(&mut rng)).collect();
    let d = distance_matrix(&q, &g).unwrap();
    for i in 0..5 {
        for j in 0..7 {
            let mut s = 0.0;
            for k in 0..6 {
                let t = q[i].values.data()[k] - g[j].values.data()[k];
                s += t * t;
            }
            assert!((d.get(i, j) - s.sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn dimension_mismatch() {
    let r = distance_matrix(&[emb(&[1.0, 0.0])], &[emb(&[1.0])]);
    assert!(matches!(r, Err(Error::Dimension(_))));
    let d = distance_matrix(&[emb(&[1.0])], &[emb(&[1.0])]).unwrap();
    assert!(matches!(d.with_labels(vec![], vec![]), Err(Error::Dimension(_))));
}

#[test]
fn self_retrieval_ranks_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e: Vec<Embedding> = (0..6)
        .map(|_| emb(&(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
        .collect();
    let labels: Vec<Label> = (0..6).map(|i| label(i / 2, 0)).collect();
    let r = evaluate_embeddings(&e, labels.clone(), &e, labels, CmcSetting::FirstMatch).unwrap();
    assert_eq!(r.rank1, 1.0);
    assert!(r.map > 0.5 && r.map <= 1.0);
}

#[test]
fn hand_case_curve() {
    // query 0 matches first, query 1 matches second
    let d = matrix(
        vec![0.1, 0.9, 0.2, 0.8],
        2,
        vec![label(0, 0), label(1, 0)],
        vec![label(0, 1), label(1, 1)],
    );
    let c = cmc(&d, CmcSetting::standard(0)).unwrap();
    assert_eq!(c.accuracy_at_rank, vec![0.5, 1.0]);
    assert_eq!(cmc(&d, CmcSetting::FirstMatch).unwrap(), c);
    assert_eq!(c.rank(20), 1.0);
}

#[test]
fn ties_go_to_lower_gallery_index() {
    let q = vec![label(1, 0)];
    let first = matrix(vec![0.5, 0.5], 1, q.clone(), vec![label(1, 1), label(0, 1)]);
    assert_eq!(cmc(&first, CmcSetting::FirstMatch).unwrap().accuracy_at_rank, vec![1.0, 1.0]);
    let second = matrix(vec![0.5, 0.5], 1, q, vec![label(0, 1), label(1, 1)]);
    assert_eq!(cmc(&second, CmcSetting::FirstMatch).unwrap().accuracy_at_rank, vec![0.0, 1.0]);
}

#[test]
fn missing_identity_is_protocol_error() {
    let d = matrix(vec![0.1], 1, vec![label(4, 0)], vec![label(2, 1)]);
    let err = cmc(&d, CmcSetting::standard(0)).unwrap_err();
    assert!(matches!(&err, Error::Protocol(m) if m.contains('4')));
    let unlabelled = distance_matrix(&[emb(&[1.0])], &[emb(&[1.0])]).unwrap();
    assert!(matches!(cmc(&unlabelled, CmcSetting::FirstMatch), Err(Error::Protocol(_))));
}

#[test]
fn ap_examples() {
    let gallery: Vec<Label> = (0..5).map(|j| label(if j == 1 { 0 } else { j + 10 }, 1)).collect();
    let d = matrix(vec![0.1, 0.2, 0.3, 0.4, 0.5], 1, vec![label(0, 0)], gallery);
    assert_eq!(mean_average_precision(&d).unwrap(), 0.5);
    let mixed = matrix(
        vec![0.1, 0.2, 0.9, 0.3, 0.4, 0.8],
        2,
        vec![label(0, 0), label(1, 0)],
        vec![label(0, 1), label(0, 1), label(1, 1)],
    );
    assert_eq!(mean_average_precision(&mixed).unwrap(), (1.0 + 1.0 / 3.0) / 2.0);
    let perfect = matrix(
        vec![0.1, 0.2, 0.9, 0.9, 0.8, 0.3],
        2,
        vec![label(0, 0), label(1, 0)],
        vec![label(0, 1), label(0, 1), label(1, 1)],
    );
    assert_eq!(mean_average_precision(&perfect).unwrap(), 1.0);
}

#[test]
fn same_camera_matches_are_excluded() {
    // the same-camera duplicate at distance 0 neither counts nor pushes the true match down
    let d = matrix(
        vec![0.0, 0.3, 0.2],
        1,
        vec![label(0, 0)],
        vec![label(0, 0), label(0, 1), label(5, 1)],
    );
    assert_eq!(mean_average_precision(&d).unwrap(), 0.5);
    assert!((mean_average_precision_all(&d).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    let only_same = matrix(vec![0.0, 0.2], 1, vec![label(0, 0)], vec![label(0, 0), label(5, 1)]);
    assert!(matches!(mean_average_precision(&only_same), Err(Error::Protocol(_))));
}

// Brute-force oracles: materialise every sorted list explicitly.

fn sorted_gallery(row: &[f64], subset: &[usize]) -> Vec<usize> {
    let mut order = subset.to_vec();
    order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
    order
}

fn oracle_single_shot(d: &DistanceMatrix, repeats: usize, seed: u64) -> Vec<f64> {
    let mut ids: Vec<usize> = d.gallery_labels.iter().map(|g| g.identity).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut total = vec![0.0; ids.len()];
    for r in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut subset = Vec::new();
        for id in &ids {
            let members: Vec<usize> = (0..d.cols).filter(|&j| d.gallery_labels[j].identity == *id).collect();
            subset.push(members[rng.gen_range(0..members.len())]);
        }
        subset.sort_unstable();
        let mut hit_at = vec![0usize; ids.len()];
        for i in 0..d.rows {
            let order = sorted_gallery(d.row(i), &subset);
            let pos = order
                .iter()
                .position(|&j| d.gallery_labels[j].identity == d.query_labels[i].identity)
                .unwrap();
            for h in hit_at.iter_mut().skip(pos) {
                *h += 1;
            }
        }
        for (t, h) in total.iter_mut().zip(hit_at) {
            *t += h as f64 / d.rows as f64;
        }
    }
    total.into_iter().map(|t| t / repeats as f64).collect()
}

fn oracle_map(d: &DistanceMatrix) -> f64 {
    let mut total = 0.0;
    for i in 0..d.rows {
        let q = d.query_labels[i];
        let subset: Vec<usize> = (0..d.cols)
            .filter(|&j| !(d.gallery_labels[j] == q))
            .collect();
        let order = sorted_gallery(d.row(i), &subset);
        let mut precisions = Vec::new();
        for r in 1..=order.len() {
            if d.gallery_labels[order[r - 1]].identity == q.identity {
                let hits = order[..r].iter().filter(|&&j| d.gallery_labels[j].identity == q.identity).count();
                precisions.push(hits as f64 / r as f64);
            }
        }
        total += precisions.iter().sum::<f64>() / precisions.len() as f64;
    }
    total / d.rows as f64
}

fn random_instance(rng: &mut ChaCha8Rng, max_q: usize, max_g: usize, quantize: bool) -> DistanceMatrix {
    let ids = rng.gen_range(1..=max_q.min(max_g));
    let mut gallery: Vec<Label> = (0..ids).map(|id| label(id, 1)).collect();
    let extra = rng.gen_range(0..=max_g - ids);
    for _ in 0..extra {
        gallery.push(label(rng.gen_range(0..ids + 3), rng.gen_range(0..2)));
    }
    let rows = rng.gen_range(1..=max_q);
    let queries: Vec<Label> = (0..rows).map(|_| label(rng.gen_range(0..ids), 0)).collect();
    let values = (0..rows * gallery.len())
        .map(|_| {
            let v: f64 = rng.gen_range(0.0..2.0);
            if quantize { (v * 4.0).round() / 4.0 } else { v }
        })
        .collect();
    matrix(values, rows, queries, gallery)
}

#[test]
fn cmc_and_map_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..200 {
        let d = random_instance(&mut rng, 20, 50, case % 2 == 0);
        let c = cmc(&d, CmcSetting::SingleShot { repeats: 3, seed: case }).unwrap();
        assert_eq!(c.accuracy_at_rank, oracle_single_shot(&d, 3, case));
        assert!(c.accuracy_at_rank.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*c.accuracy_at_rank.last().unwrap(), 1.0);
        let m = mean_average_precision(&d).unwrap();
        assert!((m - oracle_map(&d)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&m));
    }
}

#[test]
fn ten_by_ten_single_shot_matches_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gallery: Vec<Label> = (0..10).map(|j| label(j, 1)).collect();
    let queries: Vec<Label> = (0..10).map(|i| label(i, 0)).collect();
    let values = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
    let d = matrix(values, 10, queries, gallery);
    let c = cmc(&d, CmcSetting::standard(7)).unwrap();
    assert_eq!(c.accuracy_at_rank, oracle_single_shot(&d, 10, 7));
}

#[test]
fn map_is_one_iff_matches_lead() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let mut d = random_instance(&mut rng, 8, 20, false);
        for i in 0..d.rows {
            let q = d.query_labels[i];
            for j in 0..d.cols {
                let g = d.gallery_labels[j];
                let v = &mut d.values[i * d.cols + j];
                *v = if g.identity == q.identity { *v * 0.1 } else { 1.0 + *v };
            }
        }
        assert_eq!(mean_average_precision(&d).unwrap(), 1.0);
    }
}

fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn orthogonal_transform_preserves_distances(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 5;
        let mk = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let q: Vec<Vec<f64>> = (0..4).map(|_| mk(&mut rng)).collect();
        let g: Vec<Vec<f64>> = (0..6).map(|_| mk(&mut rng)).collect();
        let m = orthogonal(dim, &mut rng);
        let rot = |v: &Vec<f64>| emb(&m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect::<Vec<f64>>());
        let d0 = distance_matrix(&q.iter().map(|v| emb(v)).collect::<Vec<_>>(), &g.iter().map(|v| emb(v)).collect::<Vec<_>>()).unwrap();
        let d1 = distance_matrix(&q.iter().map(rot).collect::<Vec<_>>(), &g.iter().map(rot).collect::<Vec<_>>()).unwrap();
        for (a, b) in d0.values.iter().zip(&d1.values) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gallery_permutation_invariance(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_instance(&mut rng, 6, 12, false);
        let mut perm: Vec<usize> = (0..d.cols).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permuted = DistanceMatrix {
            values: (0..d.rows).flat_map(|i| perm.iter().map(move |&j| (i, j))).map(|(i, j)| d.get(i, j)).collect(),
            gallery_labels: perm.iter().map(|&j| d.gallery_labels[j]).collect(),
            ..d.clone()
        };
        prop_assert_eq!(cmc(&d, CmcSetting::FirstMatch).unwrap(), cmc(&permuted, CmcSetting::FirstMatch).unwrap());
        prop_assert!((mean_average_precision(&d).unwrap() - mean_average_precision(&permuted).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn report_csv_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = matrix(vec![0.1, 0.9, 0.2, 0.8], 2, vec![label(0, 0), label(1, 0)], vec![label(0, 1), label(1, 1)]);
    let curve = cmc(&d, CmcSetting::FirstMatch).unwrap();
    let report = EvalReport::from_parts(&d, curve.clone(), 0.75);
    write_report_csv(&dir.path().join("r.csv"), &[("can".into(), report)]).unwrap();
    write_curve_csv(&dir.path().join("c.csv"), &curve).unwrap();
    let r = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(r.lines().nth(1).unwrap(), "can,0.5,1,1,1,0.75,2,2");
    let c = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
    assert_eq!(c, "rank,accuracy\n1,0.5\n2,1\n");
}
