//! Corpus generation and loading.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hysteg::costs::cost_for;
use hysteg::embed::{probs_from_costs, simulate_embedding, DEFAULT_PAYLOAD_TOLERANCE};
use hysteg::image::{load_pgm, save_pgm};
use hysteg::synth::synth_cover;
use hysteg::{Algorithm, CorpusManifest, GrayImage, ManifestEntry, Role};
use rayon::prelude::*;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub pairs: usize,
    pub size: usize,
    pub seed: u64,
    pub embed_seed: u64,
    pub algorithms: Vec<Algorithm>,
    pub payloads: Vec<f64>,
}

/// Per-image embedding seed derived from the corpus seed.
pub fn stego_seed(embed_seed: u64, pair: usize, algorithm: Algorithm, payload: f64) -> u64 {
    let algo = Algorithm::ALL.iter().position(|a| *a == algorithm).unwrap_or(0) as u64;
    let p = (payload * 1000.0).round() as u64;
    embed_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((pair as u64) << 20)
        .wrapping_add(algo << 12)
        .wrapping_add(p)
}

/// Embeds one stego with the named algorithm. Returns the stego, the
/// multiplier, the achieved bits and the change count.
pub fn embed_one(
    cover: &GrayImage,
    algorithm: Algorithm,
    payload: f64,
    seed: u64,
) -> hysteg::Result<(GrayImage, f64, f64, usize)> {
    let costs = cost_for(algorithm, cover, payload)?;
    let (probs, state) = probs_from_costs(&costs, payload, DEFAULT_PAYLOAD_TOLERANCE)?;
    let stego = simulate_embedding(cover, &probs, seed)?;
    let changes = hysteg::embed::count_changes(cover, &stego);
    Ok((stego, state.lambda, state.achieved_payload, changes))
}

/// Writes covers, stegos and a manifest under `root`.
pub fn synthesize(root: &Path, spec: &SynthSpec) -> Result<CorpusManifest, CliError> {
    let covers_dir = root.join("cover");
    std::fs::create_dir_all(&covers_dir).map_err(|e| CliError::Data(format!("{}: {e}", covers_dir.display())))?;
    let per_pair: Vec<Vec<ManifestEntry>> = (0..spec.pairs)
        .into_par_iter()
        .map(|k| -> Result<Vec<ManifestEntry>, CliError> {
            let pair_id = format!("{:05}", k + 1);
            let cover = synth_cover(spec.size, spec.seed.wrapping_add(k as u64));
            let rel = PathBuf::from("cover").join(format!("{pair_id}.pgm"));
            save_pgm(&cover, root.join(&rel))?;
            let mut entries = vec![ManifestEntry {
                path: rel,
                role: Role::Cover,
                pair_id: pair_id.clone(),
                algorithm: None,
                payload: 0.0,
            }];
            for &algo in &spec.algorithms {
                for &payload in &spec.payloads {
                    let seed = stego_seed(spec.embed_seed, k, algo, payload);
                    let (stego, ..) = embed_one(&cover, algo, payload, seed)?;
                    let rel = PathBuf::from(format!("{}_{payload}", algo.cli_name())).join(format!("{pair_id}.pgm"));
                    let dir = root.join(rel.parent().expect("has parent"));
                    std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
                    save_pgm(&stego, root.join(&rel))?;
                    entries.push(ManifestEntry {
                        path: rel,
                        role: Role::Stego,
                        pair_id: pair_id.clone(),
                        algorithm: Some(algo),
                        payload,
                    });
                }
            }
            Ok(entries)
        })
        .collect::<Result<_, _>>()?;
    let manifest = CorpusManifest::new(per_pair.into_iter().flatten().collect())?;
    manifest.save(root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<CorpusManifest, CliError> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(CliError::Data(format!("missing corpus manifest {}", path.display())));
    }
    Ok(CorpusManifest::load(path)?)
}

/// Cover and stego images of the pairs, keyed by pair id.
pub struct PairImages {
    pub covers: BTreeMap<String, GrayImage>,
    pub stegos: BTreeMap<(Algorithm, String), GrayImage>,
}

pub fn load_pairs(
    root: &Path,
    manifest: &CorpusManifest,
    algorithms: &[Algorithm],
    payload: f64,
) -> Result<PairImages, CliError> {
    let ids: Vec<String> = manifest.pair_ids().into_iter().collect();
    let mut jobs: Vec<(Option<Algorithm>, String, PathBuf)> = Vec::new();
    for id in &ids {
        let cover = manifest
            .cover(id)
            .ok_or_else(|| CliError::Data(format!("pair {id} has no cover")))?;
        jobs.push((None, id.clone(), root.join(&cover.path)));
        for &a in algorithms {
            let s = manifest
                .stego(id, a, payload)
                .ok_or_else(|| CliError::Data(format!("pair {id} has no {a} stego at {payload} bpp")))?;
            jobs.push((Some(a), id.clone(), root.join(&s.path)));
        }
    }
    let loaded: Vec<GrayImage> = jobs
        .par_iter()
        .map(|(_, _, p)| load_pgm(p))
        .collect::<hysteg::Result<_>>()?;
    let mut out = PairImages {
        covers: BTreeMap::new(),
        stegos: BTreeMap::new(),
    };
    for ((algo, id, _), img) in jobs.into_iter().zip(loaded) {
        match algo {
            None => {
                out.covers.insert(id, img);
            }
            Some(a) => {
                out.stegos.insert((a, id), img);
            }
        }
    }
    Ok(out)
}
