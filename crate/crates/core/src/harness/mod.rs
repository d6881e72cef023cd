//! Randomized verification and benchmarking drivers shared by the command
//! line tool and the test suites.

mod bench;
mod equiv;
mod grad;
mod random;

pub use bench::{
    alpha_sweep, bench, bench_reports_csv, heldout_seed, sweep_csv, BenchOptions, BenchReport, SweepOptions, SweepRow,
    TaskOptions,
};
pub use equiv::{equivcheck, replay_instance, EquivInstance, EquivOptions, EquivReport, EQUIV_TOLERANCE};
pub use grad::{gradcheck, GradScope, GradcheckEntry, GradcheckReport, MODEL_TOLERANCE};
pub use random::{random_connected_graph, random_map, random_matrix};
