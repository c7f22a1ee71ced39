//! `prlab histogram`: renders stage IoU histogram CSVs written by
//! `simulate` as a text table.

use std::fmt::Write as _;
use std::path::Path;

use prlab_core::cascade::StageHistogram;

use crate::error::{CliError, CliResult};

pub fn load(path: &Path) -> CliResult<StageHistogram> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    StageHistogram::from_csv(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// One row per snapshot: positives, share with IoU >= 0.75 and per-bin bars
/// scaled to the largest bin of the file. Row `s` holds the RoIs fed to
/// cascade stage `s + 1`; the last row is the final output.
pub fn render(hist: &StageHistogram, width: usize) -> String {
    let mut s = String::new();
    let max = hist
        .stages
        .iter()
        .flat_map(|st| st.counts.iter().copied())
        .max()
        .unwrap_or(0)
        .max(1);
    let last = hist.stages.len().saturating_sub(1);
    for st in &hist.stages {
        let label = if st.stage == last {
            format!("output of stage {}", st.stage)
        } else {
            format!("input of stage {}", st.stage + 1)
        };
        let _ = writeln!(
            s,
            "{label}: {} positive RoIs (IoU >= 0.4), {:.1}% with IoU >= 0.75",
            st.total,
            100.0 * st.share_ge_075
        );
        for (i, &c) in st.counts.iter().enumerate() {
            if c == 0 && hist.edges[i + 1] <= 0.4 + 1e-12 {
                continue;
            }
            let bar = "#".repeat((c * width).div_ceil(max));
            let _ = writeln!(s, "  [{:.2}, {:.2}) {:>7} {bar}", hist.edges[i], hist.edges[i + 1], c);
        }
    }
    s
}
