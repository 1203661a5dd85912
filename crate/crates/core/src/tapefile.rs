//! Tape container.
//!
//! Header (JSON): `format`, `spec`, `config`, `dtype`, `param_count`,
//! `steps`, `examples`, `checkpoints`. Payload, in order, all little-endian:
//!
//! 1. `examples` x u64 training-example ids
//! 2. `param_count` values of `w_0`
//! 3. per step: u64 noise seed, u32 batch length `b`, `b` x u32 indices
//! 4. `checkpoints` x `param_count` values (`w_1..w_l`, or just `w_l`)
//!
//! Parameter values are f64, or f32 when `dtype` is `f32`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, Payload, TAPE_MAGIC};
use crate::error::{AuditError, Result};
use crate::model::{Dtype, ModelSpec, ParamVector};
use crate::trainer::{DpSgdConfig, StepRecord, TrainingTape};

const FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TapeHeader {
    format: u32,
    spec: ModelSpec,
    config: DpSgdConfig,
    dtype: Dtype,
    param_count: usize,
    steps: usize,
    examples: usize,
    checkpoints: usize,
}

fn put_params(buf: &mut Vec<u8>, p: &ParamVector) {
    for &v in p.values() {
        match p.dtype() {
            Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
}

fn get_params(p: &mut Payload, n: usize, dtype: Dtype) -> Result<ParamVector> {
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        v.push(match dtype {
            Dtype::F64 => p.f64()?,
            Dtype::F32 => p.f32()? as f64,
        });
    }
    ParamVector::new(v, dtype)
}

pub fn write_tape<W: Write>(w: W, tape: &TrainingTape) -> Result<()> {
    let dtype = tape.init_params.dtype();
    let header = TapeHeader {
        format: FORMAT,
        spec: tape.spec,
        config: tape.config.clone(),
        dtype,
        param_count: tape.init_params.len(),
        steps: tape.steps.len(),
        examples: tape.example_ids.len(),
        checkpoints: tape.checkpoints.len(),
    };
    let mut buf = Vec::new();
    for id in &tape.example_ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    put_params(&mut buf, &tape.init_params);
    for s in &tape.steps {
        buf.extend_from_slice(&s.noise_seed.to_le_bytes());
        buf.extend_from_slice(&(s.batch.len() as u32).to_le_bytes());
        for i in &s.batch {
            buf.extend_from_slice(&i.to_le_bytes());
        }
    }
    for c in &tape.checkpoints {
        put_params(&mut buf, c);
    }
    write_container(w, TAPE_MAGIC, &header, &buf)
}

pub fn read_tape<R: Read>(r: R) -> Result<TrainingTape> {
    let (h, mut p): (TapeHeader, Payload) = read_container(r, TAPE_MAGIC, "tape")?;
    if h.format != FORMAT {
        return Err(AuditError::Malformed {
            what: "tape",
            offset: 12,
            reason: format!("unsupported format {}", h.format),
        });
    }
    if h.param_count != h.spec.parameter_count() {
        return Err(AuditError::DimensionMismatch {
            what: "tape parameters",
            expected: h.spec.parameter_count(),
            got: h.param_count,
        });
    }
    let example_ids = (0..h.examples).map(|_| p.u64()).collect::<Result<Vec<_>>>()?;
    let init_params = get_params(&mut p, h.param_count, h.dtype)?;
    let mut steps = Vec::with_capacity(h.steps);
    for _ in 0..h.steps {
        let noise_seed = p.u64()?;
        let len = p.u32()? as usize;
        let batch = (0..len).map(|_| p.u32()).collect::<Result<Vec<_>>>()?;
        steps.push(StepRecord { batch, noise_seed });
    }
    let checkpoints = (0..h.checkpoints)
        .map(|_| get_params(&mut p, h.param_count, h.dtype))
        .collect::<Result<Vec<_>>>()?;
    p.finish()?;
    Ok(TrainingTape {
        spec: h.spec,
        config: h.config,
        init_params,
        example_ids,
        steps,
        checkpoints,
    })
}
