//! `gradcheck`: analytic vs central-difference gradients.

use std::io::Write;

use attribank::gradcheck::{run_gradcheck, Corruption, GradcheckSizes};

use crate::error::CliError;
use crate::{emit, Format, GradcheckArgs};

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let sizes = GradcheckSizes {
        n: args.n,
        m: args.m,
        d: args.d,
        k: args.k,
        batch: args.batch,
    };
    sizes.validate()?;
    let corruption = if args.corrupt_gradient {
        Corruption::KeyGradient
    } else {
        Corruption::None
    };
    let report = run_gradcheck(args.seed, sizes, corruption)?;
    let text = match args.format {
        Some(Format::Json) => serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
        _ => {
            let mut s = format!(
                "gradcheck seed={} N={} M={} D={} K={} batch={} tolerance={:e}\n",
                report.seed, sizes.n, sizes.m, sizes.d, sizes.k, sizes.batch, report.tolerance
            );
            for g in &report.groups {
                s.push_str(&format!(
                    "{:<14} max relative error {:.3e} over {} coordinates (worst {}) {}\n",
                    g.group,
                    g.max_rel_error,
                    g.coordinates,
                    g.worst,
                    if g.passed() { "ok" } else { "FAIL" }
                ));
            }
            s
        }
    };
    emit(out, &text)?;
    if let Some(g) = report.groups.iter().find(|g| !g.passed()) {
        return Err(CliError::Numeric(format!(
            "{} gradient disagrees at {}: analytic {:e}, numeric {:e}, relative error {:.3e}",
            g.group, g.worst, g.analytic, g.numeric, g.max_rel_error
        )));
    }
    Ok(())
}
