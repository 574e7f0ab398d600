//! Post-processing: percentiles, the power-law tail fit and QoE reports.

mod report;
mod stats;
mod tail;

pub use report::{format_table, qoe_report, QoeReport, ReportParams, Table, FRAME_COLUMNS, NET_COLUMNS};
pub use stats::{mean, percentile, psnr_proxy, spearman, std_dev};
pub use tail::{empirical_ccdf, fit_power_tail, tail_mass, tail_slash, TailFit};
