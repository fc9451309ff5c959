//! `sweep`: one run per value of a single hyperparameter on shared seeds.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use attribank::encoders::FrozenEncoders;
use attribank::objective::DistanceVariant;
use attribank::trainer::{Learner, TrainConfig};

use crate::config::{config_dir, load_config, resolve_encoder, RunConfig};
use crate::error::CliError;
use crate::manifest::{InputLog, RunDir};
use crate::table::Table;
use crate::train::{data_seed, run_sequence_into};
use crate::{emit, Axis, Format, SweepArgs};

pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisValue {
    Count(usize),
    Weight(f64),
    Distance(DistanceVariant),
}

/// Type-level parse of one sweep value; range checks happen per run.
pub fn parse_value(axis: Axis, raw: &str) -> Result<AxisValue, CliError> {
    let s = raw.trim();
    let bad = |why: String| CliError::Config(format!("invalid value `{raw}` for axis {}: {why}", axis.name()));
    match axis {
        Axis::M | Axis::N | Axis::C => s.parse().map(AxisValue::Count).map_err(|e| bad(e.to_string())),
        Axis::LambdaK | Axis::LambdaP => s
            .parse::<f64>()
            .map_err(|e| bad(e.to_string()))
            .and_then(|v| if v.is_finite() { Ok(AxisValue::Weight(v)) } else { Err(bad("not finite".into())) }),
        Axis::Distance => s.parse().map(AxisValue::Distance).map_err(bad),
    }
}

pub fn apply(config: &mut TrainConfig, axis: Axis, value: AxisValue) {
    match (axis, value) {
        (Axis::M, AxisValue::Count(v)) => config.m = v,
        (Axis::N, AxisValue::Count(v)) => config.n = v,
        (Axis::C, AxisValue::Count(v)) => config.c = v,
        (Axis::LambdaK, AxisValue::Weight(v)) => config.lambda_k = v,
        (Axis::LambdaP, AxisValue::Weight(v)) => config.lambda_p = v,
        (Axis::Distance, AxisValue::Distance(v)) => config.distance = v,
        _ => unreachable!("value parsed for a different axis"),
    }
}

fn dir_name(axis: Axis, raw: &str) -> String {
    let safe: String = raw
        .trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("runs/{}-{safe}", axis.name())
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let values = args
        .values
        .iter()
        .map(|raw| parse_value(args.axis, raw).map(|v| (raw.trim().to_string(), v)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut inputs = InputLog::default();
    let mut cfg: RunConfig = load_config(&args.config, &mut inputs)?;
    if let Some(seed) = args.seed {
        cfg.apply_seed(seed);
    }
    let mode = args.mode.or(cfg.mode).unwrap_or_default();
    let stream = cfg.data.build("stream", &config_dir(&args.config), &mut inputs)?;

    let mut root = RunDir::create(&args.out)?;
    let mut table = Table::new(&["value", "final_average_accuracy", "status"]);
    let mut first_error = None;
    let mut successes = 0;
    for (raw, value) in &values {
        let mut train = cfg.train.clone();
        apply(&mut train, args.axis, *value);
        let rel = dir_name(args.axis, raw);
        let outcome = (|| -> Result<f64, CliError> {
            train.validate()?;
            let encoder = resolve_encoder(cfg.encoder.as_ref(), &train, &stream)?;
            let enc = FrozenEncoders::from_spec(&encoder).map_err(|e| CliError::Config(e.to_string()))?;
            let mut learner = Learner::new(Arc::new(enc), train.clone(), mode)?;
            let mut run = RunDir::create(&root.root.join(&rel))?;
            let result = run_sequence_into(&mut run, &mut learner, &encoder, &stream, None, false);
            let seeds = BTreeMap::from([("train".to_string(), train.seed), ("encoder".to_string(), encoder.seed)]);
            let status = result.as_ref().map_or_else(|e| format!("failed: {e}"), |_| "ok".into());
            let mut run_cfg = cfg.clone();
            run_cfg.train = train.clone();
            run_cfg.mode = Some(mode);
            run.finish("train", &run_cfg, seeds, inputs.clone(), &status)?;
            Ok(result?.final_average().unwrap_or(f64::NAN))
        })();
        match outcome {
            Ok(acc) => {
                successes += 1;
                table.push(vec![raw.clone(), format!("{acc:.4}"), "ok".into()]);
            }
            Err(e) => {
                let _ = writeln!(err, "warning: {} = {raw}: {e}", args.axis.name());
                table.push(vec![raw.clone(), String::new(), format!("error: {e}")]);
                first_error.get_or_insert(e);
            }
        }
    }
    root.write(SWEEP_FILE, table.to_csv().as_bytes())?;
    let mut seeds = BTreeMap::from([("train".to_string(), cfg.train.seed)]);
    if let Some(d) = data_seed(&cfg) {
        seeds.insert("data".into(), d);
    }
    #[derive(serde::Serialize)]
    struct Snapshot<'a> {
        #[serde(flatten)]
        config: &'a RunConfig,
        axis: &'static str,
        values: Vec<&'a str>,
    }
    let snapshot = Snapshot {
        config: &cfg,
        axis: args.axis.name(),
        values: values.iter().map(|(r, _)| r.as_str()).collect(),
    };
    let status = format!("{successes} of {} runs succeeded", values.len());
    root.finish("sweep", &snapshot, seeds, inputs, &status)?;

    let text = match args.format {
        Some(Format::Json) => serde_json::to_string_pretty(&table.to_json()).expect("table serializes") + "\n",
        Some(Format::Csv) => table.to_csv(),
        None => table.to_text(),
    };
    emit(out, &text)?;
    match (successes, first_error) {
        (0, Some(e)) => Err(e),
        _ => Ok(()),
    }
}
