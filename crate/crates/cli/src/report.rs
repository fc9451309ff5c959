//! `report`: merge run directories into one comparison table.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::cdcl::{CdclResults, CDCL_FILE};
use crate::error::CliError;
use crate::fixtures::{bundled, transfer_table};
use crate::manifest::{read_manifest, RunDir};
use crate::sweep::SWEEP_FILE;
use crate::table::{Record, Table};
use crate::train::{Metrics, METRICS_FILE};
use crate::{emit, Format, ReportArgs};

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, String> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| format!("{}: {e}", path.display())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(format!("{}: {e}", path.display())),
    }
}

/// Rows contributed by one run directory.
pub fn load_run(dir: &Path) -> Result<Vec<Record>, String> {
    let manifest = read_manifest(dir)?;
    let run = dir.display().to_string();
    let mut rows = vec![];
    if let Some(m) = read_json::<Metrics>(&dir.join(METRICS_FILE))? {
        let mut r = vec![
            kv("run", &run),
            kv("command", &manifest.command),
            kv("mode", m.mode),
            kv("seed", m.seed),
            kv("final_average_accuracy", opt(m.final_average_accuracy)),
        ];
        for (t, a) in m.average_accuracy.iter().enumerate() {
            r.push(kv(&format!("avg_after_task_{}", t + 1), a));
        }
        r.push(kv("prompt_coherence", opt(m.prompt_coherence)));
        rows.push(r);
    }
    if let Some(c) = read_json::<CdclResults>(&dir.join(CDCL_FILE))? {
        for rep in &c.reports {
            rows.push(vec![
                kv("run", &run),
                kv("command", &manifest.command),
                kv("mode", &rep.mode),
                kv("seed", c.seed),
                kv("Memory", rep.memory),
                kv("scratch_a", rep.acc_scratch_a),
                kv("transferred_a", rep.acc_a2b_on_a),
                kv("BT", rep.bt),
                kv("scratch_b", rep.acc_scratch_b),
                kv("transferred_b", rep.acc_a2b_on_b),
                kv("FT", rep.ft),
                kv("joint", rep.acc_joint),
            ]);
        }
    }
    let sweep = dir.join(SWEEP_FILE);
    if sweep.exists() {
        let text = fs::read_to_string(&sweep).map_err(|e| format!("{}: {e}", sweep.display()))?;
        let axis = manifest.config.get("axis").and_then(|a| a.as_str()).unwrap_or("").to_string();
        for line in text.lines().skip(1) {
            let mut cells = line.splitn(3, ',');
            let value = cells.next().unwrap_or("");
            let acc = cells.next().unwrap_or("");
            let status = cells.next().unwrap_or("").trim_matches('"');
            rows.push(vec![
                kv("run", &run),
                kv("command", &manifest.command),
                kv("axis", &axis),
                kv("value", value),
                kv("final_average_accuracy", acc),
                kv("status", status),
            ]);
        }
    }
    if rows.is_empty() {
        rows.push(vec![kv("run", &run), kv("command", &manifest.command), kv("status", &manifest.status)]);
    }
    Ok(rows)
}

pub fn cmd_report(args: &ReportArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let table = if args.fixtures {
        transfer_table(&bundled())
    } else {
        let mut records = vec![];
        let mut loaded = 0;
        for dir in &args.runs {
            match load_run(dir) {
                Ok(rows) => {
                    loaded += 1;
                    records.extend(rows);
                }
                Err(e) => {
                    let _ = writeln!(err, "warning: skipping {}: {e}", dir.display());
                }
            }
        }
        if loaded == 0 {
            return Err(CliError::Data("no run directory could be loaded".into()));
        }
        Table::from_records(&records)
    };
    if let Some(dir) = &args.out {
        let mut d = RunDir::create(dir)?;
        d.write("report.csv", table.to_csv().as_bytes())?;
        d.write("report.txt", table.to_text().as_bytes())?;
    }
    let text = match args.format {
        Some(Format::Json) => serde_json::to_string_pretty(&table.to_json()).expect("table serializes") + "\n",
        Some(Format::Csv) => table.to_csv(),
        None => table.to_text(),
    };
    emit(out, &text)
}
