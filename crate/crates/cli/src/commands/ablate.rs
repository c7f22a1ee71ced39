//! `prlab ablate`: the gamma_rpn x refinement x K grid over several seeds.

use std::fmt::Write as _;
use std::path::Path;

use prlab_core::protocol::{run_ablation, AblationTable};

use crate::commands::write_file;
use crate::config::ExperimentConfig;
use crate::error::CliResult;

/// Runs the configured grid and writes `ablation.csv`, `ablation.json` and
/// `config.resolved.json` into `out`.
pub fn ablate(cfg: &ExperimentConfig, out: &Path) -> CliResult<AblationTable> {
    cfg.validate()?;
    let table = run_ablation(&cfg.protocol, &cfg.ablation.grid(), &cfg.ablation.seeds)?;
    std::fs::create_dir_all(out)?;
    write_file(out, "config.resolved.json", &cfg.to_resolved_json())?;
    write_file(out, "ablation.csv", &table.to_csv())?;
    let mut json = serde_json::to_string_pretty(&table).expect("table serializes");
    json.push('\n');
    write_file(out, "ablation.json", &json)?;
    Ok(table)
}

/// One line per grid cell with mean ± std over seeds; `stages` is the
/// length of the configured cascade.
pub fn summary(table: &AblationTable, stages: usize) -> String {
    let f = |s: &prlab_core::protocol::Stat| match (s.mean, s.std) {
        (Some(m), Some(d)) => format!("{m:.4} ± {d:.4}"),
        _ => "-".to_string(),
    };
    let mut s = format!(
        "{:>6} {:>10} {:>4} {:>18} {:>18} {:>18}\n",
        "gamma", "refinement", "K", "novel AP50", "novel AP[.5:1]", "novel recall"
    );
    for a in &table.aggregates {
        let _ = writeln!(
            s,
            "{:>6} {:>10} {:>4} {:>18} {:>18} {:>18}",
            a.gamma_rpn,
            format!("T={}", if a.refinement { stages } else { 1 }),
            a.k,
            f(&a.novel_ap50),
            f(&a.novel_range_ap),
            f(&a.novel_recall)
        );
    }
    s
}
