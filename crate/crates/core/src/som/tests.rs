use super::*;
use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, Strategy};
use rand_distr::{Distribution, Normal};

fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<FeatureVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| FeatureVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect()
}

/// Seven well-separated Gaussian blobs with their labels.
fn blobs(per_class: usize, dim: usize, seed: u64) -> (Vec<FeatureVector>, Vec<Emotion>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..Emotion::COUNT)
        .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..per_class {
        for (c, center) in centers.iter().enumerate() {
            feats.push(FeatureVector::new(center.iter().map(|m| m + noise.sample(&mut rng)).collect()));
            labels.push(Emotion::from_code(c).unwrap());
        }
    }
    (feats, labels)
}

fn brute_force_bmu(som: &SomModel, v: &FeatureVector) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_d = f64::INFINITY;
    for r in 0..som.rows() {
        for c in 0..som.cols() {
            let p = som.prototype(r * som.cols() + c);
            let d = p.iter().zip(v.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if d < best_d {
                best_d = d;
                best = (r, c);
            }
        }
    }
    best
}

fn small_config(iterations: usize) -> SomConfig {
    SomConfig {
        rows: 8,
        cols: 8,
        iterations,
        lr0: 0.5,
        radius0: 4.0,
        seed: 3,
    }
}

#[test]
fn bmu_matches_brute_force() {
    let data = random_vectors(200, 16, 1);
    let som = train_som(&data, &small_config(300)).unwrap();
    for v in random_vectors(1000, 16, 2) {
        let b = som.best_matching_unit(&v).unwrap();
        assert_eq!((b.row, b.col), brute_force_bmu(&som, &v));
    }
}

#[test]
fn bmu_ties_go_to_lowest_row_then_col() {
    let protos = vec![vec![5.0], vec![1.0], vec![1.0], vec![1.0]];
    let som = SomModel::from_prototypes(2, 2, protos).unwrap();
    let b = som.best_matching_unit(&FeatureVector::new(vec![1.0])).unwrap();
    assert_eq!((b.row, b.col), (0, 1));
    let protos = vec![vec![5.0], vec![9.0], vec![1.0], vec![1.0]];
    let som = SomModel::from_prototypes(2, 2, protos).unwrap();
    let b = som.best_matching_unit(&FeatureVector::new(vec![1.0])).unwrap();
    assert_eq!((b.row, b.col), (1, 0));
}

#[test]
fn schedules_hit_their_endpoints() {
    let data = random_vectors(10, 4, 0);
    let som = SomModel::initialize(&data, &small_config(100)).unwrap();
    let m = som.meta();
    assert_eq!(m.learning_rate_at(0), 0.5);
    assert_eq!(m.radius_at(0), 4.0);
    assert!((m.final_learning_rate() - 0.005).abs() < 1e-12);
    assert!((m.final_radius() - 1.0).abs() < 1e-12);
    for t in 1..100 {
        assert!(m.learning_rate_at(t) < m.learning_rate_at(t - 1));
        assert!(m.radius_at(t) < m.radius_at(t - 1));
    }
}

#[test]
fn initialization_stays_inside_data_bounds() {
    let data = random_vectors(50, 6, 4);
    let som = SomModel::initialize(&data, &small_config(10)).unwrap();
    for j in 0..6 {
        let lo = data.iter().map(|f| f.as_slice()[j]).fold(f64::INFINITY, f64::min);
        let hi = data.iter().map(|f| f.as_slice()[j]).fold(f64::NEG_INFINITY, f64::max);
        for u in 0..som.units() {
            let v = som.prototype(u)[j];
            assert!(v >= lo && v <= hi);
        }
    }
}

#[test]
fn training_organizes_clusters() {
    let (feats, labels) = blobs(30, 10, 5);
    let init = SomModel::initialize(&feats, &small_config(1500)).unwrap();
    let qe0 = init.quantization_error(&feats).unwrap();
    let som = train_som(&feats, &small_config(1500)).unwrap();
    let qe = som.quantization_error(&feats).unwrap();
    assert!(qe < qe0 * 0.5, "{qe} vs {qe0}");
    let map = som.label_map(&feats, &labels).unwrap();
    assert!(map.purity >= 0.95, "purity {}", map.purity);
    assert_eq!(map.units.len(), 64);
    let ascii = map.render_ascii();
    assert_eq!(ascii.lines().count(), 8);
    assert!(ascii.chars().all(|c| c == '\n' || "ADFHSUN".contains(c)));
    assert!(som.prototypes_finite());
}

#[test]
fn training_is_deterministic() {
    let data = random_vectors(40, 8, 6);
    let a = train_som(&data, &small_config(200)).unwrap();
    let b = train_som(&data, &small_config(200)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_matches_uninterrupted_training() {
    let data = random_vectors(40, 8, 7);
    let full = train_som(&data, &small_config(200)).unwrap();
    let mut part = SomModel::initialize(&data, &small_config(200)).unwrap();
    part.train_steps(&data, 120).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("som.ckpt");
    part.save(&path).unwrap();
    let mut resumed = SomModel::load(&path).unwrap();
    assert_eq!(resumed, part);
    resumed.train_steps(&data, 80).unwrap();
    assert_eq!(resumed, full);
}

#[test]
fn checkpoint_round_trip_preserves_bmus() {
    let data = random_vectors(30, 5, 8);
    let som = train_som(&data, &small_config(50)).unwrap();
    let back = SomModel::from_section(&som.to_section()).unwrap();
    for v in &data {
        assert_eq!(som.best_matching_unit(v).unwrap(), back.best_matching_unit(v).unwrap());
    }
}

#[test]
fn rejects_bad_inputs() {
    assert!(train_som(&[], &small_config(10)).is_err());
    let ragged = vec![FeatureVector::new(vec![0.0; 3]), FeatureVector::new(vec![0.0; 4])];
    assert!(train_som(&ragged, &small_config(10)).is_err());
    let data = random_vectors(5, 3, 0);
    assert!(train_som(&data, &small_config(0)).is_err());
    let som = train_som(&data, &small_config(5)).unwrap();
    assert!(matches!(
        som.best_matching_unit(&FeatureVector::new(vec![0.0; 4])),
        Err(Error::Shape { .. })
    ));
    let a = BmuPosition::new(0, 0, 20, 20).unwrap();
    let b = BmuPosition::new(0, 0, 10, 10).unwrap();
    assert!(normalized_bmu_distance(&a, &b).is_err());
    assert!(BmuPosition::new(20, 0, 20, 20).is_err());
}

#[test]
fn corner_to_corner_distance_is_one() {
    let a = BmuPosition::new(0, 0, 20, 20).unwrap();
    let b = BmuPosition::new(19, 19, 20, 20).unwrap();
    assert!((normalized_bmu_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    let c = BmuPosition::new(0, 19, 20, 20).unwrap();
    assert!((normalized_bmu_distance(&a, &c).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
}

fn position(rows: usize, cols: usize) -> impl Strategy<Value = BmuPosition> {
    (0..rows, 0..cols).prop_map(move |(r, c)| BmuPosition::new(r, c, rows, cols).unwrap())
}

proptest! {
    #[test]
    fn normalized_distance_is_a_bounded_metric(
        (a, b, c) in (1usize..25, 1usize..25).prop_flat_map(|(r, k)| (position(r, k), position(r, k), position(r, k)))
    ) {
        let ab = normalized_bmu_distance(&a, &b).unwrap();
        let ba = normalized_bmu_distance(&b, &a).unwrap();
        let ac = normalized_bmu_distance(&a, &c).unwrap();
        let bc = normalized_bmu_distance(&b, &c).unwrap();
        prop_assert!((0.0..=1.0 + 1e-15).contains(&ab));
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(ab == 0.0, a == b);
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn bmu_is_a_nearest_prototype(seed in any::<u64>(), probe in prop::collection::vec(-2.0f64..2.0, 4)) {
        let data = random_vectors(20, 4, seed);
        let som = SomModel::initialize(&data, &small_config(10)).unwrap();
        let v = FeatureVector::new(probe);
        let b = som.best_matching_unit(&v).unwrap();
        let dist = |u: usize| som.prototype(u).iter().zip(v.as_slice()).map(|(a, x)| (a - x).powi(2)).sum::<f64>();
        let db = dist(b.unit_index());
        for u in 0..som.units() {
            prop_assert!(db <= dist(u));
            if dist(u) == db {
                prop_assert!(u >= b.unit_index());
            }
        }
    }
}

#[test]
fn identical_prototypes_pick_origin() {
    let som = SomModel::from_prototypes(3, 3, vec![vec![0.5, 0.5]; 9]).unwrap();
    let b = som.best_matching_unit(&FeatureVector::new(vec![9.0, -9.0])).unwrap();
    assert_eq!((b.row, b.col), (0, 0));
}

#[test]
fn prototype_equal_to_input_is_its_bmu_and_zero_error() {
    let protos: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, -(i as f64)]).collect();
    let som = SomModel::from_prototypes(2, 3, protos.clone()).unwrap();
    let feats: Vec<FeatureVector> = protos.into_iter().map(FeatureVector::new).collect();
    for (u, f) in feats.iter().enumerate() {
        assert_eq!(som.best_matching_unit(f).unwrap().unit_index(), u);
    }
    assert_eq!(som.quantization_error(&feats).unwrap(), 0.0);
}

#[test]
fn single_vector_pulls_its_bmu_monotonically() {
    let target = FeatureVector::new(vec![0.3, -0.7, 1.1]);
    let seedset = random_vectors(10, 3, 9);
    let mut som = SomModel::initialize(&seedset, &small_config(400)).unwrap();
    let data = vec![target.clone()];
    let mut prev = f64::INFINITY;
    for _ in 0..8 {
        som.train_steps(&data, 50).unwrap();
        let qe = som.quantization_error(&data).unwrap();
        assert!(qe <= prev);
        prev = qe;
    }
    assert!(prev < 1e-3, "{prev}");
}

#[test]
fn one_class_gives_uniform_map() {
    let data = random_vectors(30, 4, 10);
    let labels = vec![Emotion::Fear; 30];
    let som = train_som(&data, &small_config(100)).unwrap();
    let map = som.label_map(&data, &labels).unwrap();
    assert!(map.units.iter().all(|&e| e == Emotion::Fear));
    assert_eq!(map.purity, 1.0);
    assert!(som.label_map(&[], &[]).is_err());
    assert!(som.label_map(&data, &labels[..3]).is_err());
}
