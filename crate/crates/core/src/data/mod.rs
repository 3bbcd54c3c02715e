//! Multi-domain datasets, corruption family, schedules and streams.

mod corruption;
mod dataset;
mod domains;
mod glyphs;
mod stream;
mod stream_io;

pub use corruption::{apply_corruption, CorruptionKind, DomainSpec};
pub use dataset::{read_binary, write_binary, BinaryManifest, Dataset};
pub use domains::{validate_disjoint, DomainSet, Role};
pub use glyphs::{generate_synthetic_glyphs, MAX_CLASSES, MIN_IMAGE_SIZE};
pub use stream::{
    build_support_set, build_test_stream, build_training_stream, Sample, ScheduleKind, Stream, StreamSchedule,
    SupportSet,
};
pub use stream_io::{decode_stream, encode_stream, load_stream, save_stream, StreamManifest};
