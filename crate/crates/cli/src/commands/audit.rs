use super::{input, load_qa, parse_dataset, record_input, Ctx};
use crate::args::{AuditExportArgs, AuditImportArgs, AuditSampleArgs, ServeArgs};
use crate::error::{config, CliError};
use crate::manifest::{beside, sibling};
use anyhow::Context;
use cbqa_core::audit::{export_audit, import_audit, surface_candidates, AuditStore, BaseScore};
use cbqa_core::eval::EvalReport;
use serde::Deserialize;
use serde_json::json;

/// The part of an `evaluate` report file the sampler needs.
#[derive(Deserialize)]
struct ReportFile {
    report: EvalReport,
}

pub fn sample(ctx: &Ctx, a: AuditSampleArgs) -> Result<(), CliError> {
    let mut s = ctx.settings("audit-sample")?;
    let sample_size: usize = s.get("sample_size", a.sample_size, 150)?;
    let seed: u64 = s.get("seed", a.seed, 0)?;
    s.finish()?;
    if sample_size == 0 {
        return Err(config("--sample-size must be positive"));
    }
    let dataset = parse_dataset(&a.dataset_name)?;
    let report_path = input(&a.report)?;
    let data_path = input(&a.dataset)?;
    if a.journal.exists() {
        return Err(config(format!("journal {} already exists", a.journal.display())));
    }

    let mut m = ctx.manifest("audit sample", Some(seed), json!({ "sample_size": sample_size, "dataset": dataset }))?;
    record_input(&mut m, &a.report, &report_path)?;
    record_input(&mut m, &a.dataset, &data_path)?;
    m.artifact(&a.journal);
    m.write(&beside(&a.journal))?;

    let text = std::fs::read_to_string(&report_path).with_context(|| format!("reading {}", report_path.display()))?;
    let file: ReportFile =
        serde_json::from_str(&text).with_context(|| format!("parsing report {}", report_path.display()))?;
    let examples = load_qa(&data_path, dataset)?;
    let records = surface_candidates(&file.report, &examples, sample_size, seed).context("sampling")?;
    let agg = &file.report.aggregate;
    let base = BaseScore { correct: agg.matched, total: agg.evaluated };
    let store = AuditStore::create(&a.journal, base, records).context("creating journal")?;
    println!("{}", json!({ "records": store.records().len(), "base": base }));
    Ok(())
}

pub fn export(ctx: &Ctx, a: AuditExportArgs) -> Result<(), CliError> {
    ctx.settings("audit-export")?.finish()?;
    let journal = input(&a.journal)?;
    let mut m = ctx.manifest("audit export", None, json!({}))?;
    record_input(&mut m, &a.journal, &journal)?;
    m.artifact(&a.out);
    m.write(&beside(&a.out))?;

    let store = AuditStore::open(&journal).context("opening journal")?;
    let file = std::fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    export_audit(&store, std::io::BufWriter::new(file)).context("exporting")?;
    println!("{}", json!({ "records": store.records().len(), "revision": store.revision() }));
    Ok(())
}

pub fn import(ctx: &Ctx, a: AuditImportArgs) -> Result<(), CliError> {
    ctx.settings("audit-import")?.finish()?;
    if a.base_correct >= a.base_total {
        return Err(config(format!(
            "base score {} of {} is invalid",
            a.base_correct, a.base_total
        )));
    }
    let tsv = input(&a.tsv)?;
    if a.journal.exists() {
        return Err(config(format!("journal {} already exists", a.journal.display())));
    }
    let base = BaseScore { correct: a.base_correct, total: a.base_total };
    let mut m = ctx.manifest("audit import", None, json!({ "base": base }))?;
    record_input(&mut m, &a.tsv, &tsv)?;
    m.artifact(&a.journal);
    m.write(&beside(&a.journal))?;

    let file = std::fs::File::open(&tsv).with_context(|| format!("opening {}", tsv.display()))?;
    let records = import_audit(file).context("importing")?;
    let store = AuditStore::create(&a.journal, base, records).context("creating journal")?;
    println!("{}", json!({ "records": store.records().len() }));
    Ok(())
}

pub fn serve(ctx: &Ctx, a: ServeArgs) -> Result<(), CliError> {
    ctx.settings("serve")?.finish()?;
    let journal = input(&a.journal)?;
    let mut m = ctx.manifest("serve", None, json!({ "addr": a.addr }))?;
    record_input(&mut m, &a.journal, &journal)?;
    m.artifact(&a.journal);
    m.write(&sibling(&a.journal, ".serve.manifest.json"))?;

    let store = AuditStore::open(&journal).context("opening journal")?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(ctx.threads)
        .enable_all()
        .build()
        .context("starting runtime")?;
    eprintln!("{}", json!({ "listening": a.addr }));
    runtime.block_on(cbqa_server::serve(store, a.addr)).context("serving")?;
    Ok(())
}
