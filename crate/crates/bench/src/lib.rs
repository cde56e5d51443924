//! Fixtures shared by the benchmarks.

use linecalib::pipeline::{extract_candidates, PipelineConfig};
use linecalib::simulate::{simulate, SimConfig, SimOutput};
use linecalib::{match_lines, LineMatch, Segment2D};

/// Default simulated session for `seed`.
pub fn session(seed: u64) -> SimOutput {
    simulate(&SimConfig::default().with_seed(seed)).expect("default config simulates")
}

/// Line matches of every observation under the ground-truth extrinsic.
pub fn matches(sim: &SimOutput) -> Vec<LineMatch> {
    let config = PipelineConfig::default();
    sim.observations
        .iter()
        .flat_map(|obs| {
            let candidates = extract_candidates(&obs.cloud, &config.lines);
            let segments: Vec<Segment2D> = obs.segments.iter().map(|s| s.segment).collect();
            match_lines(
                &candidates,
                &segments,
                sim.ground_truth(),
                sim.intrinsics(),
                &config.matching,
                obs.pose_index,
            )
        })
        .collect()
}
