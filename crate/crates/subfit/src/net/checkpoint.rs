//! Checkpoint directories: `manifest.json` describing the architecture plus
//! one `.sbmx` file per named matrix. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{read_matrix, write_matrix, Matrix};
use crate::projections::{ProjectionKind, ProjectionMeta, ProjectionPair};

use super::{Activation, AdaptedLinear, Layer, Network, PlainLinear};

#[derive(Serialize, Deserialize)]
struct Manifest {
    classes: usize,
    layers: Vec<LayerManifest>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LayerManifest {
    Plain {
        rows: usize,
        cols: usize,
        trainable: bool,
    },
    Activation {
        activation: Activation,
    },
    Adapted {
        rows: usize,
        cols: usize,
        rank: usize,
        scale: f64,
        trainable_ab: bool,
        kind: ProjectionKind,
        #[serde(default)]
        meta: ProjectionMeta,
    },
}

pub fn checkpoint_save(net: &Network, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        match layer {
            Layer::Plain(l) => {
                write_matrix(dir.join(format!("L{i}_W.sbmx")), &l.weight)?;
                write_matrix(dir.join(format!("L{i}_bias.sbmx")), &row_vec(&l.bias))?;
                layers.push(LayerManifest::Plain {
                    rows: l.weight.rows(),
                    cols: l.weight.cols(),
                    trainable: l.trainable,
                });
            }
            Layer::Activation(a) => layers.push(LayerManifest::Activation { activation: *a }),
            Layer::Adapted(l) => {
                write_matrix(dir.join(format!("L{i}_W0.sbmx")), &l.w0)?;
                write_matrix(dir.join(format!("L{i}_A.sbmx")), &l.pair.a)?;
                write_matrix(dir.join(format!("L{i}_B.sbmx")), &l.pair.b)?;
                write_matrix(dir.join(format!("L{i}_R.sbmx")), &l.core)?;
                write_matrix(dir.join(format!("L{i}_bias.sbmx")), &row_vec(&l.bias))?;
                layers.push(LayerManifest::Adapted {
                    rows: l.w0.rows(),
                    cols: l.w0.cols(),
                    rank: l.rank(),
                    scale: l.scale,
                    trainable_ab: l.trainable_ab,
                    kind: l.pair.kind,
                    meta: l.pair.meta.clone(),
                });
            }
        }
    }
    let manifest = Manifest {
        classes: net.classes,
        layers,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn checkpoint_load(dir: impl AsRef<Path>) -> Result<Network> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact {
            phase: "checkpoint_load",
            path: manifest_path,
            hint: "pretrain or train-map",
        });
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let bad = |i: usize, reason: String| Error::Format {
        path: manifest_path.clone(),
        reason: format!("layer {i}: {reason}"),
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, lm) in manifest.layers.iter().enumerate() {
        match lm {
            LayerManifest::Plain { rows, cols, trainable } => {
                let weight = read_matrix(dir.join(format!("L{i}_W.sbmx")))?;
                if weight.rows() != *rows || weight.cols() != *cols {
                    return Err(bad(i, format!(
                        "weight is {}x{}, manifest says {rows}x{cols}",
                        weight.rows(),
                        weight.cols()
                    )));
                }
                let bias = read_bias(dir, i, *cols)?;
                layers.push(Layer::Plain(PlainLinear {
                    weight,
                    bias,
                    trainable: *trainable,
                }));
            }
            LayerManifest::Activation { activation } => {
                layers.push(Layer::Activation(*activation));
            }
            LayerManifest::Adapted {
                rows,
                cols,
                rank,
                scale,
                trainable_ab,
                kind,
                meta,
            } => {
                let w0 = read_matrix(dir.join(format!("L{i}_W0.sbmx")))?;
                let a = read_matrix(dir.join(format!("L{i}_A.sbmx")))?;
                let b = read_matrix(dir.join(format!("L{i}_B.sbmx")))?;
                let core = read_matrix(dir.join(format!("L{i}_R.sbmx")))?;
                if w0.rows() != *rows || w0.cols() != *cols {
                    return Err(bad(i, "W0 shape does not match manifest".into()));
                }
                if a.cols() != *rank || b.rows() != *rank {
                    return Err(bad(i, format!(
                        "rank metadata {rank} does not match factors A {}x{}, B {}x{}",
                        a.rows(),
                        a.cols(),
                        b.rows(),
                        b.cols()
                    )));
                }
                if core.rows() != *rank || core.cols() != *rank {
                    return Err(bad(i, format!(
                        "core is {}x{}, manifest rank is {rank}",
                        core.rows(),
                        core.cols()
                    )));
                }
                if a.rows() != *rows || b.cols() != *cols {
                    return Err(bad(i, "projection factors do not match W0 shape".into()));
                }
                let bias = read_bias(dir, i, *cols)?;
                layers.push(Layer::Adapted(AdaptedLinear {
                    w0,
                    bias,
                    pair: ProjectionPair {
                        a,
                        b,
                        kind: *kind,
                        rank: *rank,
                        meta: meta.clone(),
                    },
                    core,
                    scale: *scale,
                    trainable_ab: *trainable_ab,
                }));
            }
        }
    }
    let net = Network {
        layers,
        classes: manifest.classes,
    };
    net.validate()?;
    Ok(net)
}

fn row_vec(v: &[f64]) -> Matrix {
    Matrix::from_fn(1, v.len(), |_, j| v[j])
}

fn read_bias(dir: &Path, layer: usize, expected: usize) -> Result<Vec<f64>> {
    let path = dir.join(format!("L{layer}_bias.sbmx"));
    let m = read_matrix(&path)?;
    if m.rows() != 1 || m.cols() != expected {
        return Err(Error::Format {
            path,
            reason: format!("bias is {}x{}, expected 1x{expected}", m.rows(), m.cols()),
        });
    }
    Ok(m.into_vec())
}
