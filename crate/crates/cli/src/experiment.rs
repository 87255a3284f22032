//! Multi-run experiment: train both detectors per run, aggregate votes per
//! image, estimate the threshold and evaluate the hybrid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hysteg::cnn::train::{train, EpochStats};
use hysteg::cnn::{aggregate_over_cnns, checkpoint, vote_snapshot, CnnModel};
use hysteg::ensemble::{cache, default_subspace, extract_all, predict_ensemble, train_ensemble, FeatureVector};
use hysteg::hybrid::{empirical_binning, error_curve, evaluate_hybrid, find_intersection, ErrorRecord, RhoCap};
use hysteg::image::split_pairs;
use hysteg::kernels::residual_hpf;
use hysteg::{Algorithm, BinCurve, CorpusManifest, GrayImage, MetricKind, RealMatrix, Threshold};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{load_manifest, load_pairs};
use crate::ledger::{PredictionRecord, RunLedger, RunRecord};
use crate::metrics::ImageMetrics;
use crate::{write_file, CliError, ExperimentConfig};

/// One image of the corpus with its label.
#[derive(Debug, Clone)]
pub struct Item {
    pub id: String,
    pub pair: String,
    pub label: u8,
    pub image: GrayImage,
}

/// Decoded corpus plus the derived per-image inputs the detectors need.
/// Images are keyed by their manifest path.
pub struct Prepared {
    pub manifest: CorpusManifest,
    pub keys: BTreeMap<(String, Option<Algorithm>), String>,
    pub items: BTreeMap<String, Item>,
    pub residuals: BTreeMap<String, RealMatrix>,
    pub features: BTreeMap<String, FeatureVector>,
}

impl Prepared {
    pub fn key(&self, pair: &str, algorithm: Option<Algorithm>) -> String {
        self.keys[&(pair.to_string(), algorithm)].clone()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Needs {
    pub cnn: bool,
    pub ec: bool,
}

impl Needs {
    pub const BOTH: Needs = Needs { cnn: true, ec: true };
}

pub fn prepare(cfg: &ExperimentConfig, needs: Needs) -> Result<Prepared, CliError> {
    let manifest = load_manifest(&cfg.corpus_root)?;
    let mut algos = vec![cfg.algorithm];
    if cfg.is_blind() {
        algos.push(cfg.test_algorithm());
    }
    let pairs = load_pairs(&cfg.corpus_root, &manifest, &algos, cfg.payload)?;
    let mut keys = BTreeMap::new();
    let mut items = BTreeMap::new();
    let path_of = |e: Option<&hysteg::ManifestEntry>| e.map(|e| e.path.display().to_string()).expect("loaded above");
    for (pair, img) in pairs.covers {
        let id = path_of(manifest.cover(&pair));
        keys.insert((pair.clone(), None), id.clone());
        items.insert(id.clone(), Item { id, pair, label: 0, image: img });
    }
    for ((algo, pair), img) in pairs.stegos {
        let id = path_of(manifest.stego(&pair, algo, cfg.payload));
        keys.insert((pair.clone(), Some(algo)), id.clone());
        items.insert(id.clone(), Item { id, pair, label: 1, image: img });
    }
    let cnn_size = cfg.cnn_config().input_size;
    if needs.cnn {
        if let Some(bad) = items.values().find(|i| i.image.width() != cnn_size || i.image.height() != cnn_size) {
            return Err(CliError::Data(format!(
                "{} is {}x{}, the {:?} network expects {cnn_size}x{cnn_size}",
                bad.id,
                bad.image.width(),
                bad.image.height(),
                cfg.profile
            )));
        }
    }
    let residuals = if needs.cnn {
        let list: Vec<(&String, &Item)> = items.iter().collect();
        list.par_iter()
            .map(|(id, item)| Ok(((*id).clone(), residual_hpf(&item.image)?)))
            .collect::<hysteg::Result<BTreeMap<_, _>>>()?
    } else {
        BTreeMap::new()
    };
    let features = if needs.ec { load_or_extract_features(cfg, &items)? } else { BTreeMap::new() };
    Ok(Prepared { manifest, keys, items, residuals, features })
}

fn feature_cache_path(cfg: &ExperimentConfig) -> PathBuf {
    let mut key = cfg.features.hash();
    key.push_str(&cfg.corpus_root.display().to_string());
    key.push_str(&format!("{:?}{:?}{}", cfg.algorithm, cfg.test_algorithm(), cfg.payload));
    let digest = {
        use sha2::Digest;
        hex::encode(sha2::Sha256::digest(key.as_bytes()))
    };
    cfg.output_dir.join(format!("features_{}.bin", &digest[..12]))
}

fn load_or_extract_features(
    cfg: &ExperimentConfig,
    items: &BTreeMap<String, Item>,
) -> Result<BTreeMap<String, FeatureVector>, CliError> {
    let path = feature_cache_path(cfg);
    if path.exists() {
        if let Ok(cached) = cache::load(&path, &cfg.features) {
            let ids: BTreeSet<&str> = cached.iter().map(|f| f.image_id.as_str()).collect();
            if ids.len() == items.len() && items.keys().all(|k| ids.contains(k.as_str())) {
                return Ok(cached.into_iter().map(|f| (f.image_id.clone(), f)).collect());
            }
        }
    }
    let list: Vec<(String, &GrayImage)> = items.iter().map(|(id, i)| (id.clone(), &i.image)).collect();
    let feats = extract_all(&list, &cfg.features)?;
    if std::fs::create_dir_all(&cfg.output_dir).is_ok() {
        cache::save(&path, &cfg.features, &feats)?;
    }
    Ok(feats.into_iter().map(|f| (f.image_id.clone(), f)).collect())
}

/// Outcome of one run of both detectors.
pub struct RunResult {
    pub record: RunRecord,
    pub stats: Vec<EpochStats>,
    pub model: Option<CnnModel>,
    pub cnn_votes: BTreeMap<String, u8>,
    pub srm_votes: BTreeMap<String, u8>,
}

fn error_rate(votes: &BTreeMap<String, u8>, items: &BTreeMap<String, Item>) -> f64 {
    if votes.is_empty() {
        return f64::NAN;
    }
    let wrong = votes.iter().filter(|(id, v)| items[id.as_str()].label != **v).count();
    wrong as f64 / votes.len() as f64
}

/// Trains the requested detectors on run `i`'s split and answers its test images.
pub fn run_one(cfg: &ExperimentConfig, prep: &Prepared, i: usize, needs: Needs) -> Result<RunResult, CliError> {
    let start = Instant::now();
    let seed = cfg.train_seeds[i];
    let split_seed = cfg.split_seed.wrapping_add(i as u64);
    let split = split_pairs(&prep.manifest, split_seed, cfg.n_train)?;
    let train_ids: Vec<String> = split
        .train
        .iter()
        .flat_map(|p| [prep.key(p, None), prep.key(p, Some(cfg.algorithm))])
        .collect();
    let test_ids: Vec<String> = split
        .test
        .iter()
        .flat_map(|p| [prep.key(p, None), prep.key(p, Some(cfg.test_algorithm()))])
        .collect();
    let labels: Vec<u8> = train_ids.iter().map(|id| prep.items[id].label).collect();

    let mut stats = Vec::new();
    let mut model = None;
    let mut cnn_votes = BTreeMap::new();
    if needs.cnn {
        let samples: Vec<(RealMatrix, u8)> = train_ids
            .iter()
            .zip(&labels)
            .map(|(id, &l)| (prep.residuals[id].clone(), l))
            .collect();
        let outcome = train(&cfg.cnn_config(), &samples, &cfg.train_spec(seed))?;
        let inputs: Vec<&RealMatrix> = test_ids.iter().map(|id| &prep.residuals[id]).collect();
        if !inputs.is_empty() {
            let votes = vote_snapshot(&inputs, &outcome.ring, cfg.vote_rule)?;
            cnn_votes = test_ids.iter().cloned().zip(votes).collect();
        }
        stats = outcome.stats;
        model = Some(outcome.model);
    }

    let mut srm_votes = BTreeMap::new();
    if needs.ec {
        let feats: Vec<FeatureVector> = train_ids.iter().map(|id| prep.features[id].clone()).collect();
        let dim = cfg.features.dimension();
        let d_sub = cfg.d_sub.unwrap_or_else(|| default_subspace(dim));
        let ens = train_ensemble(&feats, &labels, cfg.n_learners, d_sub, seed)?;
        srm_votes = test_ids
            .par_iter()
            .map(|id| Ok((id.clone(), predict_ensemble(&ens, &prep.features[id])?)))
            .collect::<hysteg::Result<BTreeMap<_, _>>>()?;
    }

    let last = stats.last().copied();
    let record = RunRecord {
        run: i,
        split_seed,
        train_seed: seed,
        epochs: stats.len(),
        final_loss: last.map_or(f64::NAN, |s| s.loss),
        final_train_error: last.map_or(f64::NAN, |s| s.train_error),
        cnn_test_error: error_rate(&cnn_votes, &prep.items),
        srm_test_error: error_rate(&srm_votes, &prep.items),
        n_test_images: test_ids.len(),
        checkpoint: PathBuf::new(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunResult { record, stats, model, cnn_votes, srm_votes })
}

pub fn epochs_csv(stats: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,train_error\n");
    for s in stats {
        let _ = writeln!(out, "{},{},{}", s.epoch, s.loss, s.train_error);
    }
    out
}

/// Files written by an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub ledger: RunLedger,
    pub ledger_path: PathBuf,
    pub hybrid_csv: PathBuf,
    pub predictions_csv: PathBuf,
    pub metrics_csv: PathBuf,
    pub curve_csvs: [PathBuf; 2],
    pub epoch_csvs: Vec<PathBuf>,
    pub threshold_json: PathBuf,
}

/// Assigns whole pairs to the calibration half.
fn calibration_pairs(pairs: &BTreeSet<String>, seed: u64) -> BTreeSet<String> {
    let mut ids: Vec<&String> = pairs.iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.into_iter().take(pairs.len().div_ceil(2)).cloned().collect()
}

pub fn curves_for(
    predictions: &[&PredictionRecord],
    metric: MetricKind,
    n_bins: usize,
) -> Result<(BinCurve, BinCurve), CliError> {
    let mut cnn = Vec::new();
    let mut srm = Vec::new();
    for p in predictions {
        if let Some(rho) = p.metrics.get(metric) {
            let rec = |pred: u8| ErrorRecord {
                image_id: p.image_id.clone(),
                rho_bar: rho,
                error: f64::from(u8::from(pred != p.label)),
            };
            cnn.push(rec(p.cnn_pred));
            srm.push(rec(p.srm_pred));
        }
    }
    let binning = empirical_binning(&cnn, n_bins)?;
    Ok((error_curve(&cnn, binning)?, error_curve(&srm, binning)?))
}

pub fn threshold_for(
    predictions: &[&PredictionRecord],
    cfg: &ExperimentConfig,
) -> Result<(BinCurve, BinCurve, Threshold), CliError> {
    let (cnn, srm) = curves_for(predictions, cfg.metric, cfg.n_bins)?;
    let mut th = find_intersection(&cnn, &srm)?;
    th.provenance.algorithm = Some(cfg.test_algorithm());
    th.provenance.payload = Some(cfg.payload);
    th.provenance.metric = cfg.metric;
    Ok((cnn, srm, th))
}

pub fn rho_cap_label(cap: RhoCap) -> String {
    match cap {
        RhoCap::Value(v) => format!("{v:.6}"),
        RhoCap::AlwaysCnn => "always-cnn".into(),
        RhoCap::AlwaysSrm => "always-srm".into(),
    }
}

pub const HYBRID_HEADER: &str =
    "context,srm_subset_error,rho_cap,cnn_subset_error,combined_error,n_below,n_above,pure_cnn_error,pure_srm_error";

pub fn hybrid_row(context: &str, th: &Threshold, r: &hysteg::HybridReport) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
    format!(
        "{context},{},{},{},{:.6},{},{},{:.6},{:.6}",
        f(r.srm_subset_error),
        rho_cap_label(th.rho_cap),
        f(r.cnn_subset_error),
        r.combined_error,
        r.n_below,
        r.n_above,
        r.pure_cnn_error,
        r.pure_srm_error
    )
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, CliError> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| crate::io_err(out, e))?;
    let h = cfg.short_hash();
    let prep = prepare(cfg, Needs::BOTH)?;
    let n_pairs = prep.manifest.pair_ids().len();
    if cfg.n_train >= n_pairs {
        return Err(CliError::Config(format!(
            "n_train {} leaves no test pairs out of {n_pairs}",
            cfg.n_train
        )));
    }

    let results: Vec<RunResult> = (0..cfg.train_seeds.len())
        .into_par_iter()
        .map(|i| run_one(cfg, &prep, i, Needs::BOTH).map_err(|e| e.in_run(i, cfg.train_seeds[i])))
        .collect::<Result<_, _>>()?;

    let mut runs = Vec::new();
    let mut epoch_csvs = Vec::new();
    for r in &results {
        let i = r.record.run;
        let ckpt = out.join(format!("cnn_{h}_run{i}.ckpt"));
        if let Some(m) = &r.model {
            checkpoint::save(&ckpt, m, None)?;
        }
        let ep = out.join(format!("epochs_{h}_run{i}.csv"));
        write_file(&ep, epochs_csv(&r.stats))?;
        epoch_csvs.push(ep);
        let mut rec = r.record.clone();
        rec.checkpoint = ckpt;
        runs.push(rec);
    }

    // Images tested by at least one run, with the runs that tested them.
    let mut membership: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for r in &results {
        for id in r.cnn_votes.keys() {
            membership.entry(id.clone()).or_default().insert(r.record.run);
        }
    }
    let tested_pairs: BTreeSet<String> = membership.keys().map(|id| prep.items[id].pair.clone()).collect();
    let never_tested: Vec<String> = prep
        .manifest
        .pair_ids()
        .into_iter()
        .filter(|p| !tested_pairs.contains(p))
        .collect();
    let calib = calibration_pairs(&tested_pairs, cfg.calibration_seed);

    let ids: Vec<&String> = membership.keys().collect();
    let metrics: Vec<ImageMetrics> = ids
        .par_iter()
        .map(|id| ImageMetrics::compute(&prep.items[id.as_str()].image, cfg))
        .collect::<hysteg::Result<_>>()?;

    let mut predictions = Vec::new();
    for (id, m) in ids.into_iter().zip(metrics) {
        let set = &membership[id];
        let cnn_map: BTreeMap<usize, u8> = results
            .iter()
            .filter_map(|r| r.cnn_votes.get(id).map(|v| (r.record.run, *v)))
            .collect();
        let srm_map: BTreeMap<usize, u8> = results
            .iter()
            .filter_map(|r| r.srm_votes.get(id).map(|v| (r.record.run, *v)))
            .collect();
        let item = &prep.items[id];
        predictions.push(PredictionRecord {
            image_id: id.clone(),
            pair_id: item.pair.clone(),
            label: item.label,
            metrics: m,
            membership: set.iter().copied().collect(),
            cnn_votes: set.iter().map(|r| cnn_map[r]).collect(),
            srm_votes: set.iter().map(|r| srm_map[r]).collect(),
            cnn_pred: aggregate_over_cnns(id, &cnn_map, set)?,
            srm_pred: aggregate_over_cnns(id, &srm_map, set)?,
            calibration: calib.contains(&item.pair),
        });
    }

    let fit_set: Vec<&PredictionRecord> = predictions
        .iter()
        .filter(|p| cfg.optimistic_threshold || p.calibration)
        .collect();
    let (cnn_curve, srm_curve, threshold) = threshold_for(&fit_set, cfg)?;

    let mut ledger = RunLedger {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        context: cfg.context(),
        runs,
        predictions,
        never_tested,
        saturation: crate::ledger::SATURATION_RULE.to_string(),
        threshold: threshold.clone(),
        hybrid: hysteg::HybridReport {
            n_below: 0,
            n_above: 0,
            srm_subset_error: None,
            cnn_subset_error: None,
            combined_error: 0.0,
            pure_cnn_error: 0.0,
            pure_srm_error: 0.0,
            warnings: Vec::new(),
        },
    };
    ledger.hybrid = evaluate_hybrid(&ledger.evaluation_records(), &threshold)?;

    let p = |name: &str| out.join(name.replace("{h}", &h));
    let metrics_csv = p("metrics_{h}.csv");
    let mut text = format!("image_id,{}\n", ImageMetrics::CSV_HEADER);
    for pr in &ledger.predictions {
        let _ = writeln!(text, "{},{}", pr.image_id, pr.metrics.csv_fields());
    }
    write_file(&metrics_csv, text)?;

    let predictions_csv = p("predictions_{h}.csv");
    let mut text = format!("{}\n", PredictionRecord::CSV_HEADER);
    for pr in &ledger.predictions {
        let _ = writeln!(text, "{}", pr.csv_row(cfg.metric));
    }
    write_file(&predictions_csv, text)?;

    let curve_csvs = [p("curve_cnn_{h}.csv"), p("curve_srm_{h}.csv")];
    write_file(&curve_csvs[0], cnn_curve.to_csv())?;
    write_file(&curve_csvs[1], srm_curve.to_csv())?;

    let hybrid_csv = p("hybrid_{h}.csv");
    write_file(
        &hybrid_csv,
        format!("{HYBRID_HEADER}\n{}\n", hybrid_row(&ledger.context, &threshold, &ledger.hybrid)),
    )?;

    let threshold_json = p("threshold_{h}.json");
    write_file(&threshold_json, serde_json::to_string_pretty(&threshold).expect("serializable"))?;
    write_file(&p("config_{h}.toml"), cfg.to_toml())?;
    let ledger_path = p("ledger_{h}.json");
    ledger.save(&ledger_path)?;

    Ok(ExperimentOutput {
        ledger,
        ledger_path,
        hybrid_csv,
        predictions_csv,
        metrics_csv,
        curve_csvs,
        epoch_csvs,
        threshold_json,
    })
}

/// Recomputes the hybrid figures of a ledger from its per-image records.
pub fn recheck(ledger: &RunLedger) -> Result<hysteg::HybridReport, CliError> {
    let report = evaluate_hybrid(&ledger.evaluation_records(), &ledger.threshold)?;
    if report != ledger.hybrid {
        return Err(CliError::Data(format!(
            "ledger {} hybrid figures do not match its records",
            ledger.config_hash
        )));
    }
    Ok(report)
}

pub fn ledger_in(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| crate::io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ledger_") && n.ends_with(".json"))
        })
        .collect();
    out.sort();
    Ok(out)
}
