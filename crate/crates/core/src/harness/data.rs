//! Dataset synthesis and CIFAR-10 binary ingest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, AuditError, Result};
use crate::model::Example;
use crate::rng::{stream, stream_rng};

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Isotropic Gaussian blobs around random centres in `[0.2, 0.8]^dim`,
    /// clamped to `[0, 1]`.
    SyntheticGaussians {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
    },
    /// Two interleaved half circles, rescaled into the unit square.
    TwoMoons { per_class: usize, noise: f64 },
    /// CIFAR-10 binary batch file(s).
    CifarBinary {
        paths: Vec<PathBuf>,
        /// Mean-pool to `side x side`; must divide 32.
        #[serde(default)]
        downscale: Option<usize>,
        /// Keep only the first `limit` records.
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::SyntheticGaussians {
                classes,
                dim,
                per_class,
                spread,
            } => {
                if *classes < 2 || *dim == 0 || *per_class == 0 {
                    return Err(invalid("dataset", "need >= 2 classes, dim >= 1, per_class >= 1"));
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return Err(invalid("dataset", "spread must be >= 0"));
                }
            }
            DatasetSpec::TwoMoons { per_class, noise } => {
                if *per_class == 0 || !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(invalid("dataset", "need per_class >= 1 and noise >= 0"));
                }
            }
            DatasetSpec::CifarBinary { paths, downscale, .. } => {
                if paths.is_empty() {
                    return Err(invalid("dataset", "no CIFAR files given"));
                }
                if let Some(s) = downscale {
                    if *s == 0 || !CIFAR_SIDE.is_multiple_of(*s) {
                        return Err(invalid("dataset", format!("downscale side {s} must divide 32")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self {
            DatasetSpec::SyntheticGaussians { dim, .. } => *dim,
            DatasetSpec::TwoMoons { .. } => 2,
            DatasetSpec::CifarBinary { downscale, .. } => {
                let s = downscale.unwrap_or(CIFAR_SIDE);
                3 * s * s
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::SyntheticGaussians { classes, .. } => *classes,
            DatasetSpec::TwoMoons { .. } => 2,
            DatasetSpec::CifarBinary { .. } => CIFAR_CLASSES,
        }
    }
}

/// Build or load the dataset. Ids are `0..n` in output order; synthetic
/// data is ordered class-major.
pub fn synth_dataset(spec: &DatasetSpec, seed: u64) -> Result<Vec<Example>> {
    spec.validate()?;
    let data = match spec {
        DatasetSpec::SyntheticGaussians {
            classes,
            dim,
            per_class,
            spread,
        } => {
            let mut rng = stream_rng(seed, stream::DATA, 0);
            let centres: Vec<Vec<f64>> = (0..*classes)
                .map(|_| (0..*dim).map(|_| rng.random_range(0.2..0.8)).collect())
                .collect();
            let mut out = Vec::with_capacity(classes * per_class);
            for (label, centre) in centres.iter().enumerate() {
                for _ in 0..*per_class {
                    let f = centre
                        .iter()
                        .map(|&c| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            (c + spread * z).clamp(0.0, 1.0)
                        })
                        .collect();
                    out.push(Example::new(out.len() as u64, f, label));
                }
            }
            out
        }
        DatasetSpec::TwoMoons { per_class, noise } => {
            let mut rng = stream_rng(seed, stream::DATA, 0);
            let mut out = Vec::with_capacity(2 * per_class);
            for label in 0..2 {
                for i in 0..*per_class {
                    let t = std::f64::consts::PI * i as f64 / (*per_class).max(2).saturating_sub(1) as f64;
                    let (x, y) = if label == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    let zx: f64 = StandardNormal.sample(&mut rng);
                    let zy: f64 = StandardNormal.sample(&mut rng);
                    // raw moons live in [-1, 2] x [-0.5, 1]
                    let fx = ((x + noise * zx + 1.0) / 3.0).clamp(0.0, 1.0);
                    let fy = ((y + noise * zy + 0.5) / 1.5).clamp(0.0, 1.0);
                    out.push(Example::new(out.len() as u64, vec![fx, fy], label));
                }
            }
            out
        }
        DatasetSpec::CifarBinary {
            paths,
            downscale,
            limit,
        } => {
            let mut out = Vec::new();
            for p in paths {
                for mut ex in ingest_cifar_binary(p, *downscale)? {
                    ex.id = out.len() as u64;
                    out.push(ex);
                }
            }
            if let Some(l) = limit {
                out.truncate(*l);
            }
            out
        }
    };
    Ok(data)
}

/// Parse CIFAR-10 binary records (1 label byte + 3072 channel-major pixel
/// bytes each). Pixels are scaled to `[0, 1]`.
pub fn parse_cifar_binary(bytes: &[u8], downscale: Option<usize>) -> Result<Vec<Example>> {
    let side = downscale.unwrap_or(CIFAR_SIDE);
    if side == 0 || !CIFAR_SIDE.is_multiple_of(side) {
        return Err(invalid("downscale", format!("side {side} must divide 32")));
    }
    let tail = bytes.len() % CIFAR_RECORD;
    if tail != 0 {
        return Err(AuditError::Malformed {
            what: "CIFAR-10 file",
            offset: (bytes.len() - tail) as u64,
            reason: format!("trailing partial record of {tail} bytes"),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(AuditError::Malformed {
                    what: "CIFAR-10 file",
                    offset: (i * CIFAR_RECORD) as u64,
                    reason: format!("label {label} out of range"),
                });
            }
            Ok(Example::new(i as u64, pool_pixels(&rec[1..], side), label))
        })
        .collect()
}

pub fn ingest_cifar_binary(path: &Path, downscale: Option<usize>) -> Result<Vec<Example>> {
    parse_cifar_binary(&fs::read(path)?, downscale)
}

fn pool_pixels(px: &[u8], side: usize) -> Vec<f64> {
    let f = CIFAR_SIDE / side;
    let norm = 255.0 * (f * f) as f64;
    let mut out = Vec::with_capacity(3 * side * side);
    for ch in px.chunks_exact(CIFAR_SIDE * CIFAR_SIDE) {
        for by in 0..side {
            for bx in 0..side {
                let mut sum = 0u32;
                for y in by * f..(by + 1) * f {
                    for x in bx * f..(bx + 1) * f {
                        sum += ch[y * CIFAR_SIDE + x] as u32;
                    }
                }
                out.push(sum as f64 / norm);
            }
        }
    }
    out
}

/// Disjoint roles carved out of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    /// Training data `D`.
    pub train: Vec<Example>,
    /// Pool that random and mislabeled canaries are drawn from.
    pub heldout: Vec<Example>,
    /// Disjoint pool for non-private pretraining.
    pub pretrain: Vec<Example>,
    /// Smallest id that is free for canaries.
    pub next_id: u64,
}

/// Shuffle (seeded) and carve off `heldout` then `pretrain` examples; the
/// rest is the training set.
pub fn partition(mut data: Vec<Example>, heldout: usize, pretrain: usize, seed: u64) -> Result<Partition> {
    if heldout + pretrain >= data.len() {
        return Err(invalid(
            "dataset partition",
            format!(
                "{} examples cannot cover {heldout} held out + {pretrain} pretraining + training",
                data.len()
            ),
        ));
    }
    let next_id = data.iter().map(|e| e.id).max().map_or(0, |m| m + 1);
    data.shuffle(&mut stream_rng(seed, stream::DATA, 1));
    let train = data.split_off(heldout + pretrain);
    let pretrain = data.split_off(heldout);
    Ok(Partition {
        train,
        heldout: data,
        pretrain,
        next_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussians(spread: f64) -> DatasetSpec {
        DatasetSpec::SyntheticGaussians {
            classes: 3,
            dim: 5,
            per_class: 20,
            spread,
        }
    }

    #[test]
    fn synthetic_is_balanced_bounded_and_deterministic() {
        for spec in [
            gaussians(0.3),
            DatasetSpec::TwoMoons {
                per_class: 25,
                noise: 0.1,
            },
        ] {
            let a = synth_dataset(&spec, 4).unwrap();
            assert_eq!(a, synth_dataset(&spec, 4).unwrap());
            assert_ne!(a, synth_dataset(&spec, 5).unwrap());
            let k = spec.num_classes();
            let mut counts = vec![0; k];
            for e in &a {
                counts[e.label] += 1;
                assert_eq!(e.features.len(), spec.input_dim());
                assert!(e.features.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            assert!(counts.iter().all(|&c| c == counts[0]));
        }
    }

    #[test]
    fn zero_spread_gives_point_masses() {
        let spec = DatasetSpec::SyntheticGaussians {
            classes: 2,
            dim: 3,
            per_class: 5,
            spread: 0.0,
        };
        let d = synth_dataset(&spec, 1).unwrap();
        for e in &d {
            let first = d.iter().find(|x| x.label == e.label).unwrap();
            assert_eq!(e.features, first.features);
        }
        assert_ne!(d[0].features, d[9].features);
    }

    fn record(label: u8, px: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(px, CIFAR_PIXELS));
        r
    }

    #[test]
    fn cifar_records_parse() {
        let mut bytes = record(3, 255);
        bytes.extend(record(9, 0));
        let d = parse_cifar_binary(&bytes, None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!((d[0].label, d[1].label), (3, 9));
        assert!(d[0].features.iter().all(|&v| v == 1.0));
        assert_eq!(d[0].features.len(), CIFAR_PIXELS);
        let small = parse_cifar_binary(&bytes, Some(8)).unwrap();
        assert_eq!(small[0].features.len(), 3 * 64);
    }

    #[test]
    fn cifar_mean_pool() {
        let mut bytes = vec![0u8];
        // red channel: left half 255, right half 0; others 51
        for c in 0..3 {
            for _y in 0..32 {
                for x in 0..32 {
                    bytes.push(if c == 0 {
                        if x < 16 {
                            255
                        } else {
                            0
                        }
                    } else {
                        51
                    });
                }
            }
        }
        let d = parse_cifar_binary(&bytes, Some(2)).unwrap();
        assert_eq!(
            d[0].features,
            vec![1.0, 0.0, 1.0, 0.0, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2]
        );
        let one = parse_cifar_binary(&bytes, Some(1)).unwrap();
        assert_eq!(one[0].features, vec![0.5, 0.2, 0.2]);
    }

    #[test]
    fn cifar_errors_carry_offsets() {
        let mut bytes = record(1, 7);
        bytes.extend(record(255, 7));
        match parse_cifar_binary(&bytes, None) {
            Err(AuditError::Malformed { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
        let mut bytes = record(1, 7);
        bytes.extend([0u8; 10]);
        match parse_cifar_binary(&bytes, None) {
            Err(AuditError::Malformed { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
        assert!(parse_cifar_binary(&record(0, 0), Some(5)).is_err());
    }

    #[test]
    fn partition_is_disjoint() {
        let d = synth_dataset(&gaussians(0.2), 0).unwrap();
        let p = partition(d.clone(), 10, 5, 3).unwrap();
        assert_eq!((p.heldout.len(), p.pretrain.len(), p.train.len()), (10, 5, 45));
        let mut ids: Vec<u64> = p
            .train
            .iter()
            .chain(&p.heldout)
            .chain(&p.pretrain)
            .map(|e| e.id)
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..60).collect::<Vec<_>>());
        assert_eq!(p.next_id, 60);
        assert!(partition(d, 50, 10, 0).is_err());
    }
}
