use metatta_core::data::{
    apply_corruption, build_test_stream, generate_synthetic_glyphs, load_stream, save_stream, CorruptionKind, DomainSet,
    DomainSpec, Role, StreamSchedule,
};
use metatta_core::model::{ConvNet, ConvNetSpec, Group, ParamBundle};
use metatta_core::{seed, Tape};
use rand::seq::SliceRandom;

fn targets() -> DomainSet {
    use CorruptionKind::*;
    DomainSet::new(
        Role::Target,
        vec![DomainSpec::new(GaussianNoise, 5), DomainSpec::new(Contrast, 4), DomainSpec::new(ElasticWarp, 3)],
    )
    .unwrap()
}

#[test]
fn periodic_streams_follow_the_period_formula() {
    let ds = generate_synthetic_glyphs(100, 5, 1, 16, 3).unwrap();
    let order = vec![2, 0, 1];
    for period in [1, 10, 100, 1000] {
        let len = 3 * period + 7;
        let sched = StreamSchedule::periodic(period, order.clone(), len).unwrap();
        let s = build_test_stream(&targets(), &sched, &ds, &mut seed::rng(period as u64)).unwrap();
        assert_eq!(s.len(), len);
        for (t, sample) in s.samples.iter().enumerate() {
            assert_eq!(sample.domain_index, order[(t / period) % order.len()], "T_p={period} t={t}");
        }
        assert!(s.matches_schedule());
    }
}

#[test]
fn randomized_occupancy_is_uniform() {
    let n = 10_000usize;
    let k = 3usize;
    let sched = StreamSchedule::randomized(1, k, n, &mut seed::rng(42)).unwrap();
    let mut counts = vec![0usize; k];
    for t in 0..n {
        counts[sched.domain_at(t)] += 1;
    }
    let p = 1.0 / k as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "count {c}");
    }
}

#[test]
fn stream_files_round_trip_and_corruptions_are_seeded() {
    let ds = generate_synthetic_glyphs(60, 5, 3, 16, 9).unwrap();
    let sched = StreamSchedule::periodic(4, vec![0, 1, 2], 30).unwrap();
    let s = build_test_stream(&targets(), &sched, &ds, &mut seed::rng(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = save_stream(&dir.path().join("s"), &s).unwrap();
    assert_eq!(load_stream(&path).unwrap(), s);
    let again = build_test_stream(&targets(), &sched, &ds, &mut seed::rng(5)).unwrap();
    assert_eq!(again, s);
    let sample = &s.samples[0];
    let spec = targets().domains[sample.domain_index];
    let x = apply_corruption(ds.image(sample.source_id), 3, &spec, sample.corruption_seed).unwrap();
    assert_eq!(x, sample.x);
}

/// Plain supervised training on clean glyphs reaches high held-out accuracy
/// within five epochs, so the task is learnable at this scale.
#[test]
fn glyphs_are_learnable() {
    let spec = ConvNetSpec {
        in_channels: 3,
        image_size: 16,
        width: 16,
        kernel: 5,
        hidden: 32,
        num_classes: 5,
        gn_groups: 4,
        gn_eps: 1e-5,
    };
    let net = ConvNet::new(spec).unwrap();
    let train = generate_synthetic_glyphs(2000, 5, 3, 16, 1).unwrap();
    let val = generate_synthetic_glyphs(500, 5, 3, 16, 2).unwrap();
    let mut p: ParamBundle<f32> = net.init(&mut seed::rng(0));
    let groups = [Group::Omega, Group::PhiSup];
    let mut velocity = vec![0f32; groups.iter().map(|&g| p.group_numel(g)).sum()];
    let mut rng = seed::rng(3);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = 0.0;
    for _epoch in 0..5 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(32) {
            let (x, y) = train.batch(chunk).unwrap();
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, &groups).unwrap();
            let loss = net.sup_loss(&mut tape, &b, &x, &y).unwrap();
            let grads = tape.backward(loss).unwrap();
            let g = p.collect_grads(&b, &grads, &groups).unwrap();
            for (v, gi) in velocity.iter_mut().zip(&g) {
                *v = 0.9 * *v + gi;
            }
            p.axpy(&groups, 0.01, &velocity).unwrap();
        }
        let idx: Vec<usize> = (0..val.len()).collect();
        let (x, y) = val.batch(&idx).unwrap();
        let pred = net.predict(&p, &x).unwrap();
        let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        best = f64::max(best, acc);
        if best >= 0.95 {
            break;
        }
    }
    assert!(best >= 0.95, "validation accuracy {best}");
}

mod properties {
    use metatta_core::data::{apply_corruption, CorruptionKind, DomainSpec, StreamSchedule};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn schedule_formula_holds(period in 1usize..50, order in proptest::collection::vec(0usize..4, 1..6), t in 0usize..5000) {
            let s = StreamSchedule::periodic(period, order.clone(), 5000).unwrap();
            prop_assert_eq!(s.domain_at(t), order[(t / period) % order.len()]);
        }

        #[test]
        fn corruptions_stay_in_range_and_replay(kind in 0usize..8, severity in 1u8..=5, seed in any::<u64>(), px in proptest::collection::vec(0f32..=1.0, 256)) {
            let spec = DomainSpec { seed: 3, ..DomainSpec::new(CorruptionKind::PARAMETRIC[kind], severity) };
            let a = apply_corruption(&px, 1, &spec, seed).unwrap();
            prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(a, apply_corruption(&px, 1, &spec, seed).unwrap());
        }
    }
}
