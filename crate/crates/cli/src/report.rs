use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use cyclegan::training::LOSS_CSV_HEADER;

use crate::ReportArgs;

/// Display order of the four losses.
const COLUMNS: [(&str, &str); 4] = [
    ("photo_gen_loss", "photo generator"),
    ("monet_gen_loss", "monet generator"),
    ("photo_disc_loss", "photo discriminator"),
    ("monet_disc_loss", "monet discriminator"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMean {
    pub epoch: usize,
    pub steps: usize,
    /// In [`COLUMNS`] order.
    pub losses: [f64; 4],
}

pub fn read_losses(path: &Path) -> anyhow::Result<Vec<EpochMean>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = reader
        .headers()
        .with_context(|| format!("{}: line 1", path.display()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != LOSS_CSV_HEADER {
        bail!("{}: line 1: expected header `{LOSS_CSV_HEADER}`, found `{}`", path.display(), header.join(","));
    }
    let index = |name: &str| header.iter().position(|h| h == name).expect("header checked");
    let cols = COLUMNS.map(|(name, _)| index(name));

    let mut sums: BTreeMap<usize, (usize, [f64; 4])> = BTreeMap::new();
    for record in reader.records() {
        let line = |r: &csv::StringRecord| r.position().map_or(0, |p| p.line());
        let record = record.map_err(|e| {
            let at = e.position().map_or(0, |p| p.line());
            anyhow::anyhow!("{}: line {at}: {e}", path.display())
        })?;
        let bad = |what: &str| anyhow::anyhow!("{}: line {}: {what}", path.display(), line(&record));
        let epoch: usize = record[0].trim().parse().map_err(|_| bad(&format!("bad epoch `{}`", &record[0])))?;
        let entry = sums.entry(epoch).or_insert((0, [0.0; 4]));
        entry.0 += 1;
        for (slot, &c) in entry.1.iter_mut().zip(&cols) {
            let v: f64 = record[c].trim().parse().map_err(|_| bad(&format!("bad value `{}`", &record[c])))?;
            if !v.is_finite() {
                return Err(bad(&format!("non-finite value `{}`", &record[c])));
            }
            *slot += v;
        }
    }
    if sums.is_empty() {
        bail!("{}: no loss rows after the header", path.display());
    }
    Ok(sums
        .into_iter()
        .map(|(epoch, (steps, s))| EpochMean { epoch, steps, losses: s.map(|v| v / steps as f64) })
        .collect())
}

pub fn epoch_table(means: &[EpochMean]) -> String {
    let mut out = format!("{:>6} {:>6}", "epoch", "steps");
    for (name, _) in COLUMNS {
        write!(out, " {name:>16}").unwrap();
    }
    out.push('\n');
    for m in means {
        write!(out, "{:>6} {:>6}", m.epoch, m.steps).unwrap();
        for v in m.losses {
            write!(out, " {v:>16.4}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Final-epoch means of `current` minus those of `baseline`.
pub fn delta_table(baseline: &EpochMean, current: &EpochMean) -> String {
    let mut out = format!("{:<20} {:>10} {:>10} {:>10}\n", "loss", "baseline", "current", "delta");
    for (i, (_, label)) in COLUMNS.iter().enumerate() {
        let (b, c) = (baseline.losses[i], current.losses[i]);
        writeln!(out, "{label:<20} {b:>10.4} {c:>10.4} {:>+10.4}", c - b).unwrap();
    }
    out
}

pub fn run(args: &ReportArgs) -> anyhow::Result<()> {
    let current = read_losses(&args.losses)?;
    print!("{}", epoch_table(&current));
    if let Some(path) = &args.baseline {
        let baseline = read_losses(path)?;
        println!();
        print!("{}", delta_table(baseline.last().expect("non-empty"), current.last().expect("non-empty")));
    }
    Ok(())
}
