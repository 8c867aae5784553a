//! Fixtures shared by the benchmarks.

use spanel::montecarlo::{prepare, McConfig, PreparedReplication};
use spanel::McDesign;

/// One simulated replication with its moments built, at `lambda = .5`, `delta = .3`.
pub fn fixture(n: usize, seed: u64) -> (McDesign, McConfig, PreparedReplication) {
    let design = McDesign::new(n, 0.5, 0.3, 1, seed);
    let config = McConfig::default();
    let prep = prepare(&design, 0, &config).expect("fixture simulates");
    (design, config, prep)
}
