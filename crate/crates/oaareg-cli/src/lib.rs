//! Library surface of the command-line harness: configuration, point cloud
//! file I/O, and the pipeline drivers used by the `oaareg` binary and the
//! test suites.

pub mod config;
pub mod io;
pub mod pipeline;

pub use config::{EstimatorChoice, OverlapSource, RunConfig};
pub use io::{load_cloud, write_cloud, IoError, PlyFormat};
pub use pipeline::{run_benchmark, run_register, BenchmarkCell, RunOutcome};

/// Caps the global thread pool when `OAAREG_THREADS` is set. Call once at
/// startup; later calls are ignored by rayon.
pub fn init_threads_from_env() {
    if let Ok(value) = std::env::var("OAAREG_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}
