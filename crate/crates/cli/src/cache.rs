//! On-disk cache of cell correctors keyed by the SHA-256 of their inputs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use curlhom::cell::{solve_cell_corrector_with, CellCorrector, CellCorrectorData};
use curlhom::galerkin::Discretisation;
use curlhom::spectral::CoefficientField;
use curlhom::PeriodicMeasure;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::output::write_atomic;

#[derive(Serialize)]
struct Key<'a> {
    version: &'a str,
    measure: &'a PeriodicMeasure,
    coefficient: &'a CoefficientField,
    cutoff: usize,
}

pub fn key(mu: &PeriodicMeasure, a: &CoefficientField, cutoff: usize) -> String {
    let k = Key { version: env!("CARGO_PKG_VERSION"), measure: mu, coefficient: a, cutoff };
    hex::encode(Sha256::digest(serde_json::to_vec(&k).expect("key serialises")))
}

fn path_for(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("corrector-{key}.json"))
}

/// Cell corrector for `disc`, read from `dir` when present. The returned value always passes
/// through [`CellCorrectorData`], so cold and warm runs see bit-identical correctors.
pub fn corrector(disc: &Discretisation, a: &CoefficientField, dir: Option<&Path>) -> Result<(CellCorrector, bool)> {
    let k = key(disc.measure(), a, disc.cube().cutoff());
    if let Some(d) = dir {
        let p = path_for(d, &k);
        if p.exists() {
            let text = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
            match serde_json::from_slice::<CellCorrectorData>(&text) {
                Ok(data) => {
                    log::info!("corrector cache hit {}", p.display());
                    return Ok((CellCorrector::from_data(&data)?, true));
                }
                Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", p.display()),
            }
        }
    }
    let data = solve_cell_corrector_with(disc, a)?.to_data();
    if let Some(d) = dir {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        write_atomic(&path_for(d, &k), &serde_json::to_vec(&data)?)?;
    }
    Ok((CellCorrector::from_data(&data)?, false))
}
