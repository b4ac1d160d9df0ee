//! `report`: merge evaluation outputs into one machine-readable report
//! plus an aligned human-readable table.

use histopipe_core::metrics::ExperimentReport;

use super::{require_input, CliError, CmdResult, Ctx};

pub fn run(ctx: &Ctx) -> CmdResult {
    let mut block = ctx.config.section("report")?;
    let inputs_raw = block
        .take("inputs")
        .unwrap_or_else(|| "evaluation.txt".to_string());
    let out_path = ctx.artifact(block.take("out"), "report.txt");
    block.finish()?;

    let mut merged = ExperimentReport::default();
    for name in inputs_raw.split(',') {
        let path = ctx.artifact(Some(name.trim().to_string()), "evaluation.txt");
        require_input(&path)?;
        let part = ExperimentReport::read(&path)?;
        merged.rows.extend(part.rows);
    }
    merged.check_consistency().map_err(CliError::Process)?;
    merged.write(&out_path)?;
    print!("{}", merged.to_table());
    println!("report: {}", out_path.display());
    ctx.write_run_record("report")
}
