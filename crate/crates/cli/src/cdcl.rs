//! `cdcl`: train on stream A then stream B and tabulate transfer.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use attribank::encoders::FrozenEncoders;
use attribank::eval::{run_cdcl, CdclReport};
use attribank::trainer::Mode;

use crate::config::{config_dir, load_config, resolve_encoder, CdclConfig, PairSource};
use crate::error::CliError;
use crate::manifest::{InputLog, RunDir};
use crate::table::Table;
use crate::{emit, CdclArgs, Format};

pub const CDCL_FILE: &str = "cdcl.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdclResults {
    pub seed: u64,
    pub stream_a: String,
    pub stream_b: String,
    pub reports: Vec<CdclReport>,
}

/// FT and BT rows shaped like the published cross-dataset tables.
pub fn transfer_table(reports: &[CdclReport]) -> Table {
    let mut t = Table::new(&["Method", "Memory", "Transfer", "scratch", "transferred", "FT/BT"]);
    for r in reports {
        t.push(vec![
            r.mode.clone(),
            r.memory.to_string(),
            "FT".into(),
            format!("{:.2}", r.acc_scratch_b),
            format!("{:.2}", r.acc_a2b_on_b),
            format!("{:.2}", r.ft),
        ]);
    }
    for r in reports {
        t.push(vec![
            r.mode.clone(),
            r.memory.to_string(),
            "BT".into(),
            format!("{:.2}", r.acc_scratch_a),
            format!("{:.2}", r.acc_a2b_on_a),
            format!("{:.2}", r.bt),
        ]);
    }
    t
}

pub fn joint_table(reports: &[CdclReport]) -> Table {
    let mut t = Table::new(&["Method", "Memory", "joint"]);
    for r in reports {
        t.push(vec![r.mode.clone(), r.memory.to_string(), format!("{:.2}", r.acc_joint)]);
    }
    t
}

pub fn cmd_cdcl(args: &CdclArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut inputs = InputLog::default();
    let mut cfg: CdclConfig = load_config(&args.config, &mut inputs)?;
    if let Some(seed) = args.seed {
        cfg.apply_seed(seed);
    }
    cfg.train.validate()?;
    let (a, b) = cfg.streams.build(&config_dir(&args.config), &mut inputs)?;
    let encoder = resolve_encoder(cfg.encoder.as_ref(), &cfg.train, &a)?;
    let enc = Arc::new(FrozenEncoders::from_spec(&encoder).map_err(|e| CliError::Config(e.to_string()))?);
    let modes: Vec<Mode> = match args.mode {
        Some(m) => vec![m],
        None => Mode::ALL.to_vec(),
    };

    let mut dir = RunDir::create(&args.out)?;
    let mut reports = vec![];
    let mut failure = None;
    for mode in modes {
        match run_cdcl(&a, &b, enc.clone(), &cfg.train, mode) {
            Ok(r) => reports.push(r),
            Err(e) => {
                failure = Some(CliError::from(e));
                break;
            }
        }
    }
    let results = CdclResults {
        seed: cfg.train.seed,
        stream_a: a.name.clone(),
        stream_b: b.name.clone(),
        reports,
    };
    dir.write_json(CDCL_FILE, &results)?;
    let transfer = transfer_table(&results.reports);
    let joint = joint_table(&results.reports);
    dir.write("cdcl.csv", transfer.to_csv().as_bytes())?;
    dir.write("joint.csv", joint.to_csv().as_bytes())?;

    let mut seeds = BTreeMap::from([("train".to_string(), cfg.train.seed), ("encoder".to_string(), encoder.seed)]);
    if let PairSource::SyntheticPair { a, b, .. } = &cfg.streams {
        seeds.insert("data_a".into(), a.seed);
        seeds.insert("data_b".into(), b.seed);
    }
    let status = failure.as_ref().map_or_else(|| "ok".to_string(), |e| format!("failed: {e}"));
    #[derive(Serialize)]
    struct Snapshot<'a> {
        #[serde(flatten)]
        config: &'a CdclConfig,
        resolved_encoder: &'a attribank::encoders::EncoderSpec,
    }
    let snapshot = Snapshot {
        config: &cfg,
        resolved_encoder: &encoder,
    };
    dir.finish("cdcl", &snapshot, seeds, inputs, &status)?;
    if let Some(e) = failure {
        return Err(e);
    }

    let text = match args.format {
        Some(Format::Json) => serde_json::to_string_pretty(&results).expect("results serialize") + "\n",
        Some(Format::Csv) => transfer.to_csv(),
        None => format!("{}\n{}", transfer.to_text(), joint.to_text()),
    };
    emit(out, &text)
}
