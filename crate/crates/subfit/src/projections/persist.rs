//! Projection pairs persist as a directory: `A.sbmx`, `B.sbmx`, `meta.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{read_matrix, write_matrix};

use super::{ProjectionKind, ProjectionMeta, ProjectionPair};

#[derive(Serialize, Deserialize)]
struct MetaFile {
    kind: ProjectionKind,
    rank: usize,
    #[serde(flatten)]
    meta: ProjectionMeta,
}

pub fn save_projection(dir: impl AsRef<Path>, pair: &ProjectionPair) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_matrix(dir.join("A.sbmx"), &pair.a)?;
    write_matrix(dir.join("B.sbmx"), &pair.b)?;
    let meta = MetaFile {
        kind: pair.kind,
        rank: pair.rank,
        meta: pair.meta.clone(),
    };
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(dir.join("meta.json"), json)?;
    Ok(())
}

pub fn load_projection(dir: impl AsRef<Path>) -> Result<ProjectionPair> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: MetaFile = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    let a = read_matrix(dir.join("A.sbmx"))?;
    let b = read_matrix(dir.join("B.sbmx"))?;
    if a.cols() != meta.rank || b.rows() != meta.rank {
        return Err(Error::Format {
            path: meta_path,
            reason: format!(
                "rank {} does not match stored factors A {}x{}, B {}x{}",
                meta.rank,
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            ),
        });
    }
    Ok(ProjectionPair {
        a,
        b,
        kind: meta.kind,
        rank: meta.rank,
        meta: meta.meta,
    })
}
