//! Shared fixtures for the benchmarks.

use metatta_core::data::{build_training_stream, generate_synthetic_glyphs, DomainSet, Stream};
use metatta_core::model::{ConvNet, ConvNetSpec, ParamBundle};
use metatta_core::seed;

/// The desk-scale network on 3×16×16 glyphs with five classes.
pub fn desk_spec() -> ConvNetSpec {
    ConvNetSpec {
        in_channels: 3,
        image_size: 16,
        width: 16,
        kernel: 5,
        hidden: 32,
        num_classes: 5,
        gn_groups: 4,
        gn_eps: 1e-5,
    }
}

pub fn desk_model() -> (ConvNet, ParamBundle<f32>) {
    let net = ConvNet::new(desk_spec()).expect("valid spec");
    let params = net.init(&mut seed::rng(0));
    (net, params)
}

/// A D=3, K=5 inner-loop stream drawn from the full source grid.
pub fn inner_stream() -> Stream {
    let ds = generate_synthetic_glyphs(200, 5, 3, 16, 1).expect("glyphs");
    build_training_stream(&DomainSet::default_source(), &ds, 3, 5, &mut seed::rng(2)).expect("stream")
}
