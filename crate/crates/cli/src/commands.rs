//! Bodies of the subcommands that are not a full experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hysteg::cnn::checkpoint;
use hysteg::image::{load_pgm, save_pgm};
use hysteg::{Algorithm, MetricKind, Role};
use rayon::prelude::*;

use crate::corpus::{embed_one, load_manifest};
use crate::experiment::{curves_for, hybrid_row, recheck, run_one, epochs_csv, prepare, Needs, HYBRID_HEADER};
use crate::ledger::RunLedger;
use crate::metrics::ImageMetrics;
use crate::{write_file, CliError, ExperimentConfig};

/// Metric table over the covers of a corpus.
pub fn metrics_table(corpus: &Path, payload: f64, sigma: f64, hill_cutoff: f64) -> Result<String, CliError> {
    let manifest = load_manifest(corpus)?;
    let covers: Vec<_> = manifest.entries().iter().filter(|e| e.role == Role::Cover).collect();
    let rows: Vec<String> = covers
        .par_iter()
        .map(|e| -> Result<String, CliError> {
            let img = load_pgm(corpus.join(&e.path))?;
            let m = ImageMetrics::with(&img, payload, sigma, hill_cutoff)?;
            Ok(format!("{},{}", e.pair_id, m.csv_fields()))
        })
        .collect::<Result<_, _>>()?;
    let mut out = format!("image_id,{}\n", ImageMetrics::CSV_HEADER);
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    Ok(out)
}

pub struct EmbedSummary {
    pub lambda: f64,
    pub achieved_payload: f64,
    pub change_count: usize,
}

/// Embeds one cover and writes the stego plus a `.tsv` sidecar next to it.
pub fn embed_file(
    input: &Path,
    output: &Path,
    algorithm: Algorithm,
    payload: f64,
    seed: u64,
) -> Result<EmbedSummary, CliError> {
    let cover = load_pgm(input)?;
    let (stego, lambda, bits, changes) = embed_one(&cover, algorithm, payload, seed)?;
    save_pgm(&stego, output)?;
    let bpp = bits / (cover.width() * cover.height()) as f64;
    let sidecar = sidecar_path(output);
    write_file(
        &sidecar,
        format!("lambda\tachieved_payload\tchange_count\n{lambda}\t{bpp}\t{changes}\n"),
    )?;
    Ok(EmbedSummary {
        lambda,
        achieved_payload: bpp,
        change_count: changes,
    })
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".tsv");
    PathBuf::from(s)
}

/// Trains one CNN on a single split; returns the test error of its
/// snapshot vote.
pub fn train_cnn(cfg: &ExperimentConfig) -> Result<(f64, PathBuf), CliError> {
    let needs = Needs { cnn: true, ec: false };
    let prep = prepare(cfg, needs)?;
    let r = run_one(cfg, &prep, 0, needs)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| crate::io_err(&cfg.output_dir, e))?;
    let seed = cfg.train_seeds[0];
    let ckpt = cfg.output_dir.join(format!("cnn_seed{seed}.ckpt"));
    checkpoint::save(&ckpt, r.model.as_ref().expect("cnn trained"), None)?;
    write_file(&cfg.output_dir.join(format!("epochs_seed{seed}.csv")), epochs_csv(&r.stats))?;
    Ok((r.record.cnn_test_error, ckpt))
}

pub fn train_ec(cfg: &ExperimentConfig) -> Result<f64, CliError> {
    let needs = Needs { cnn: false, ec: true };
    let prep = prepare(cfg, needs)?;
    let r = run_one(cfg, &prep, 0, needs)?;
    Ok(r.record.srm_test_error)
}

/// Rebuilds both error curves of a ledger against any metric.
pub fn curves(ledger: &RunLedger, metric: MetricKind, n_bins: usize, out: &Path) -> Result<[PathBuf; 2], CliError> {
    let preds: Vec<_> = ledger.predictions.iter().collect();
    let (cnn, srm) = curves_for(&preds, metric, n_bins)?;
    std::fs::create_dir_all(out).map_err(|e| crate::io_err(out, e))?;
    let short = &ledger.config_hash[..12];
    let name = metric.column_name();
    let paths = [
        out.join(format!("curve_cnn_{short}_{name}.csv")),
        out.join(format!("curve_srm_{short}_{name}.csv")),
    ];
    write_file(&paths[0], cnn.to_csv())?;
    write_file(&paths[1], srm.to_csv())?;
    Ok(paths)
}

/// Detection-error table pooled over runs plus one hybrid row per ledger.
/// Every hybrid row is recomputed from the ledger's per-image records.
pub fn report(ledgers: &[RunLedger]) -> Result<String, CliError> {
    if ledgers.is_empty() {
        return Err(CliError::Data("no ledgers to report on".into()));
    }
    // (detector, context) -> (sum of errors, runs)
    let mut pooled: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for l in ledgers {
        for r in &l.runs {
            for (name, e) in [("CNN", r.cnn_test_error), ("SRM+EC", r.srm_test_error)] {
                let slot = pooled.entry((name.to_string(), l.context.clone())).or_default();
                slot.0 += e;
                slot.1 += 1;
            }
        }
    }
    let mut out = String::from("detector,context,mean_error,runs\n");
    for ((det, ctx), (sum, n)) in &pooled {
        let _ = writeln!(out, "{det},{ctx},{:.6},{n}", sum / *n as f64);
    }
    out.push('\n');
    out.push_str(HYBRID_HEADER);
    out.push('\n');
    for l in ledgers {
        let r = recheck(l)?;
        let _ = writeln!(out, "{}", hybrid_row(&l.context, &l.threshold, &r));
    }
    Ok(out)
}
