//! Test-only oracles, independent of the tape's backward rules.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central finite differences `(f(x+h e_i) − f(x−h e_i)) / 2h`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn uniform(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Prints one acceptance line and returns whether it passed.
pub fn report(id: &str, what: &str, pass: bool, detail: &str) -> bool {
    println!("[{}] criterion {id}: {what}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

pub mod gradcheck;

pub mod fixtures {
    use metatta_core::data::{
        build_support_set, build_training_stream, CorruptionKind, Dataset, DomainSet, Role, Stream, SupportSet,
    };
    use metatta_core::model::{ConvNet, ConvNetSpec, ParamBundle};
    use metatta_core::seed;

    /// 77 parameters: one channel in, width 1, 8×8 inputs.
    pub fn micro_spec() -> ConvNetSpec {
        ConvNetSpec {
            in_channels: 1,
            image_size: 8,
            width: 1,
            kernel: 3,
            hidden: 2,
            num_classes: 3,
            gn_groups: 1,
            gn_eps: 1e-5,
        }
    }

    pub fn noise_dataset(n: usize, channels: usize, size: usize, classes: usize, s: u64) -> Dataset {
        let px = super::uniform(s, n * channels * size * size, 0.0, 1.0).into_iter().map(|v| v as f32).collect();
        let labels = (0..n).map(|i| (i % classes) as u8).collect();
        Dataset::new(channels, size, classes, px, labels).unwrap()
    }

    pub fn small_source() -> DomainSet {
        DomainSet::grid(
            Role::Source,
            &[CorruptionKind::GaussianNoise, CorruptionKind::Contrast, CorruptionKind::Brightness],
            &[1, 3],
            1,
        )
        .unwrap()
    }

    /// Micro model, an inner stream of `d·k` samples and a support set with `d_extra` extras.
    pub fn micro_setup(s: u64, d: usize, k: usize, d_extra: usize) -> (ConvNet, ParamBundle<f64>, Stream, SupportSet) {
        let net = ConvNet::new(micro_spec()).unwrap();
        let p = net.init(&mut seed::rng(s));
        let ds = noise_dataset(24, 1, 8, 3, s + 100);
        let src = small_source();
        let mut rng = seed::rng(s + 200);
        let inner = build_training_stream(&src, &ds, d, k, &mut rng).unwrap();
        let sup = build_support_set(&src, &inner, d_extra, k, &ds, &mut rng).unwrap();
        (net, p, inner, sup)
    }
}

pub mod glyph {
    use metatta_core::harness::{Experiment, RunConfig};
    use metatta_core::meta::Objective;
    use metatta_core::model::ParamBundle;

    /// A small glyph run: 3×16×16 inputs, width 8, short streams.
    pub fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seeds = vec![0];
        cfg.data.train_size = 600;
        cfg.data.test_size = 200;
        cfg.model.width = 8;
        cfg.model.kernel = 3;
        cfg.stream.length = 120;
        cfg.meta.iterations_per_epoch = Some(20);
        cfg
    }

    /// One jointly trained checkpoint shared by every test in a binary.
    pub fn shared() -> &'static (Experiment, ParamBundle<f32>) {
        static CELL: std::sync::OnceLock<(Experiment, ParamBundle<f32>)> = std::sync::OnceLock::new();
        CELL.get_or_init(|| trained(&small_config(), 0))
    }

    /// A jointly trained checkpoint on the small run.
    pub fn trained(cfg: &RunConfig, s: u64) -> (Experiment, ParamBundle<f32>) {
        let exp = Experiment::new(cfg, s).unwrap();
        let (p, _) = exp.train(Objective::Joint, &exp.meta_config()).unwrap();
        (exp, p)
    }
}
