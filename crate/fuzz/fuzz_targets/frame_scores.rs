#![no_main]
use depstream::geom::AlignmentMode;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = depstream::evalfuse::read_frame_scores(data, AlignmentMode::PoseIndependent);
    let _ = depstream::evalfuse::read_frame_scores(data, AlignmentMode::PoseDependent);
});
