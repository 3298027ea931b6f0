//! Pure tensor adapters applied between channels and models.
//!
//! A transform applies the same kind to every tensor of its input list,
//! mapping input `i` to output `i` and keeping labels.
//!
//! Casts follow Rust `as` semantics: float to integer truncates toward zero
//! and saturates at the target bounds (NaN becomes 0); integer narrowing
//! saturates. `F16Raw` is opaque and can only be reshaped, cropped or
//! passed through.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_arena::{DType, TensorSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    Reshape {
        dims: Vec<usize>,
    },
    /// `y = x * scale[c] + offset[c]` with `c` the index along the last axis.
    /// Single-element vectors broadcast. F32 only.
    NormalizeAffine {
        scale: Vec<f32>,
        offset: Vec<f32>,
    },
    CastDType {
        to: DType,
    },
    /// Crop or zero-pad each axis from the origin to the target dims.
    CropPad {
        dims: Vec<usize>,
    },
}

impl TransformKind {
    pub fn output_spec(&self, input: &TensorSpec) -> Result<TensorSpec> {
        let out = match self {
            TransformKind::Identity => input.clone(),
            TransformKind::Reshape { dims } => {
                let out = TensorSpec {
                    dims: dims.clone(),
                    ..input.clone()
                };
                out.validate()?;
                if out.elements() != input.elements() {
                    return Err(Error::Shape(format!(
                        "{}: reshape {:?} -> {:?} changes element count",
                        input.label, input.dims, dims
                    )));
                }
                out
            }
            TransformKind::NormalizeAffine { scale, offset } => {
                if input.dtype != DType::F32 {
                    return Err(Error::Shape(format!(
                        "{}: normalize needs f32, got {:?}",
                        input.label, input.dtype
                    )));
                }
                let channels = *input.dims.last().unwrap_or(&1);
                for (name, v) in [("scale", scale), ("offset", offset)] {
                    if v.len() != 1 && v.len() != channels {
                        return Err(Error::Shape(format!(
                            "{}: {name} has {} entries for {channels} channels",
                            input.label,
                            v.len()
                        )));
                    }
                }
                input.clone()
            }
            TransformKind::CastDType { to } => {
                if (input.dtype == DType::F16Raw) != (*to == DType::F16Raw) {
                    return Err(Error::Shape(format!(
                        "{}: f16_raw is opaque and cannot be cast",
                        input.label
                    )));
                }
                TensorSpec {
                    dtype: *to,
                    ..input.clone()
                }
            }
            TransformKind::CropPad { dims } => {
                if dims.len() != input.dims.len() {
                    return Err(Error::Shape(format!(
                        "{}: crop/pad must keep rank {}",
                        input.label,
                        input.dims.len()
                    )));
                }
                let out = TensorSpec {
                    dims: dims.clone(),
                    ..input.clone()
                };
                out.validate()?;
                out
            }
        };
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub name: String,
    pub kind: TransformKind,
    pub input_specs: Vec<TensorSpec>,
    pub output_specs: Vec<TensorSpec>,
}

impl Transform {
    pub fn new(name: impl Into<String>, kind: TransformKind, input_specs: Vec<TensorSpec>) -> Result<Self> {
        let output_specs = input_specs
            .iter()
            .map(|s| kind.output_spec(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Transform {
            name: name.into(),
            kind,
            input_specs,
            output_specs,
        })
    }
}

/// Build a chain of transforms starting from `input_specs`.
pub fn build_chain(kinds: &[TransformKind], input_specs: &[TensorSpec]) -> Result<Vec<Transform>> {
    let mut specs = input_specs.to_vec();
    let mut chain = Vec::with_capacity(kinds.len());
    for (i, kind) in kinds.iter().enumerate() {
        let t = Transform::new(format!("stage{i}"), kind.clone(), specs)?;
        specs = t.output_specs.clone();
        chain.push(t);
    }
    Ok(chain)
}

/// Output specs at the end of a chain (the inputs when the chain is empty).
pub fn chain_output(kinds: &[TransformKind], input_specs: &[TensorSpec]) -> Result<Vec<TensorSpec>> {
    let chain = build_chain(kinds, input_specs)?;
    Ok(chain
        .last()
        .map(|t| t.output_specs.clone())
        .unwrap_or_else(|| input_specs.to_vec()))
}

pub fn apply_transform(t: &Transform, inputs: &[&[u8]], outputs: &mut [&mut [u8]]) -> Result<()> {
    if inputs.len() != t.input_specs.len() || outputs.len() != t.output_specs.len() {
        return Err(Error::Shape(format!(
            "{}: expected {} tensors, got {} in / {} out",
            t.name,
            t.input_specs.len(),
            inputs.len(),
            outputs.len()
        )));
    }
    for (i, (input, output)) in inputs.iter().zip(outputs.iter_mut()).enumerate() {
        apply_one(&t.kind, &t.input_specs[i], input, &t.output_specs[i], output)?;
    }
    Ok(())
}

fn apply_one(
    kind: &TransformKind,
    in_spec: &TensorSpec,
    input: &[u8],
    out_spec: &TensorSpec,
    output: &mut [u8],
) -> Result<()> {
    if input.len() != in_spec.byte_size() || output.len() != out_spec.byte_size() {
        return Err(Error::Shape(format!(
            "{}: buffer sizes {} / {} do not match specs",
            in_spec.label,
            input.len(),
            output.len()
        )));
    }
    match kind {
        TransformKind::Identity | TransformKind::Reshape { .. } => output.copy_from_slice(input),
        TransformKind::NormalizeAffine { scale, offset } => {
            let channels = *in_spec.dims.last().unwrap();
            for (i, (src, dst)) in input.chunks_exact(4).zip(output.chunks_exact_mut(4)).enumerate() {
                let c = i % channels;
                let s = if scale.len() == 1 { scale[0] } else { scale[c] };
                let o = if offset.len() == 1 { offset[0] } else { offset[c] };
                let x = f32::from_le_bytes(src.try_into().unwrap());
                dst.copy_from_slice(&(x * s + o).to_le_bytes());
            }
        }
        TransformKind::CastDType { to } => cast(in_spec.dtype, *to, input, output),
        TransformKind::CropPad { dims } => crop_pad(in_spec, dims, input, output),
    }
    Ok(())
}

enum Scalar {
    Float(f64),
    Int(i64),
}

fn read(dtype: DType, b: &[u8]) -> Scalar {
    match dtype {
        DType::F32 => Scalar::Float(f32::from_le_bytes(b.try_into().unwrap()) as f64),
        DType::U8 => Scalar::Int(b[0] as i64),
        DType::I32 => Scalar::Int(i32::from_le_bytes(b.try_into().unwrap()) as i64),
        DType::I64 => Scalar::Int(i64::from_le_bytes(b.try_into().unwrap())),
        DType::F16Raw => Scalar::Int(u16::from_le_bytes(b.try_into().unwrap()) as i64),
    }
}

fn write(dtype: DType, v: Scalar, out: &mut [u8]) {
    match (dtype, v) {
        (DType::F32, Scalar::Float(f)) => out.copy_from_slice(&(f as f32).to_le_bytes()),
        (DType::F32, Scalar::Int(i)) => out.copy_from_slice(&(i as f32).to_le_bytes()),
        (DType::U8, Scalar::Float(f)) => out[0] = f as u8,
        (DType::U8, Scalar::Int(i)) => out[0] = i.clamp(0, u8::MAX as i64) as u8,
        (DType::I32, Scalar::Float(f)) => out.copy_from_slice(&(f as i32).to_le_bytes()),
        (DType::I32, Scalar::Int(i)) => {
            out.copy_from_slice(&(i.clamp(i32::MIN as i64, i32::MAX as i64) as i32).to_le_bytes())
        }
        (DType::I64, Scalar::Float(f)) => out.copy_from_slice(&(f as i64).to_le_bytes()),
        (DType::I64, Scalar::Int(i)) => out.copy_from_slice(&i.to_le_bytes()),
        (DType::F16Raw, Scalar::Int(i)) => out.copy_from_slice(&(i as u16).to_le_bytes()),
        (DType::F16Raw, Scalar::Float(_)) => unreachable!("rejected by output_spec"),
    }
}

fn cast(from: DType, to: DType, input: &[u8], output: &mut [u8]) {
    if from == to {
        output.copy_from_slice(input);
        return;
    }
    for (src, dst) in input.chunks_exact(from.size()).zip(output.chunks_exact_mut(to.size())) {
        write(to, read(from, src), dst);
    }
}

fn crop_pad(in_spec: &TensorSpec, out_dims: &[usize], input: &[u8], output: &mut [u8]) {
    output.fill(0);
    let elem = in_spec.dtype.size();
    let in_dims = &in_spec.dims;
    let rank = in_dims.len();
    let row = in_dims[rank - 1].min(out_dims[rank - 1]) * elem;
    let strides = |dims: &[usize]| -> Vec<usize> {
        let mut s = vec![1; dims.len()];
        for i in (0..dims.len() - 1).rev() {
            s[i] = s[i + 1] * dims[i + 1];
        }
        s
    };
    let in_strides = strides(in_dims);
    let out_strides = strides(out_dims);
    let outer: Vec<usize> = (0..rank - 1).map(|i| in_dims[i].min(out_dims[i])).collect();
    if outer.contains(&0) {
        return;
    }
    let mut idx = vec![0usize; rank - 1];
    loop {
        let src: usize = idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum::<usize>() * elem;
        let dst: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum::<usize>() * elem;
        output[dst..dst + row].copy_from_slice(&input[src..src + row]);
        // Odometer increment over the outer axes.
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < outer[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(dtype: DType, dims: &[usize]) -> TensorSpec {
        TensorSpec::new("t", dtype, dims).unwrap()
    }

    fn run(kind: TransformKind, in_spec: TensorSpec, input: &[u8]) -> Vec<u8> {
        let t = Transform::new("t", kind, vec![in_spec]).unwrap();
        let mut out = vec![0u8; t.output_specs[0].byte_size()];
        apply_transform(&t, &[input], &mut [&mut out]).unwrap();
        out
    }

    fn f32s(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn reshape_preserves_bytes() {
        let data = f32s(&[1., 2., 3., 4., 5., 6.]);
        let out = run(TransformKind::Reshape { dims: vec![6] }, spec(DType::F32, &[2, 3]), &data);
        assert_eq!(out, data);
        let bad = Transform::new("r", TransformKind::Reshape { dims: vec![5] }, vec![spec(DType::F32, &[2, 3])]);
        assert!(matches!(bad, Err(Error::Shape(_))));
    }

    #[test]
    fn unit_normalize_is_identity() {
        let data = f32s(&[0.5, -3.0, 7.25]);
        let kind = TransformKind::NormalizeAffine { scale: vec![1.0], offset: vec![0.0] };
        assert_eq!(run(kind, spec(DType::F32, &[3]), &data), data);
    }

    #[test]
    fn normalize_is_per_last_axis_channel() {
        let data = f32s(&[1., 1., 2., 2.]);
        let kind = TransformKind::NormalizeAffine { scale: vec![2.0, 3.0], offset: vec![0.0, 1.0] };
        assert_eq!(run(kind, spec(DType::F32, &[2, 2]), &data), f32s(&[2., 4., 4., 7.]));
    }

    #[test]
    fn cast_u8_to_f32_elementwise() {
        let data = [0u8, 1, 128, 255];
        let out = run(TransformKind::CastDType { to: DType::F32 }, spec(DType::U8, &[4]), &data);
        // Elementwise oracle: each byte's integer value as an f32.
        let expected: Vec<u8> = data.iter().flat_map(|&b| (b as u32 as f32).to_le_bytes()).collect();
        assert_eq!(out, expected);
        assert_eq!(&out[12..], &255.0f32.to_le_bytes());
    }

    #[test]
    fn cast_saturates() {
        let data = f32s(&[-5.0, 300.7, f32::NAN, 12.9]);
        let out = run(TransformKind::CastDType { to: DType::U8 }, spec(DType::F32, &[4]), &data);
        assert_eq!(out, vec![0, 255, 0, 12]);
        let wide: Vec<u8> = [i64::MAX, -1].iter().flat_map(|v| v.to_le_bytes()).collect();
        let out = run(TransformKind::CastDType { to: DType::I32 }, spec(DType::I64, &[2]), &wide);
        let got: Vec<i32> = out.chunks(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(got, vec![i32::MAX, -1]);
    }

    #[test]
    fn f16_raw_is_not_castable() {
        let t = Transform::new("c", TransformKind::CastDType { to: DType::F32 }, vec![spec(DType::F16Raw, &[2])]);
        assert!(matches!(t, Err(Error::Shape(_))));
        let ok = Transform::new("c", TransformKind::CastDType { to: DType::F16Raw }, vec![spec(DType::F16Raw, &[2])]);
        assert!(ok.is_ok());
    }

    #[test]
    fn crop_pad_2d() {
        // 2x3 -> 3x2: crop columns, pad a zero row.
        let data: Vec<u8> = vec![1, 2, 3, 4, 5, 6];
        let out = run(TransformKind::CropPad { dims: vec![3, 2] }, spec(DType::U8, &[2, 3]), &data);
        assert_eq!(out, vec![1, 2, 4, 5, 0, 0]);
        let out = run(TransformKind::CropPad { dims: vec![4] }, spec(DType::U8, &[2]), &[9, 8]);
        assert_eq!(out, vec![9, 8, 0, 0]);
    }

    #[test]
    fn chain_output_follows_stages() {
        let kinds = vec![
            TransformKind::CropPad { dims: vec![4, 4, 3] },
            TransformKind::CastDType { to: DType::F32 },
            TransformKind::Reshape { dims: vec![48] },
        ];
        let out = chain_output(&kinds, &[spec(DType::U8, &[6, 8, 3])]).unwrap();
        assert_eq!(out, vec![spec(DType::F32, &[48])]);
    }

    fn crop_pad_oracle(in_dims: &[usize], out_dims: &[usize], input: &[u8]) -> Vec<u8> {
        let n: usize = out_dims.iter().product();
        (0..n)
            .map(|flat| {
                let mut rem = flat;
                let mut idx = vec![0; out_dims.len()];
                for a in (0..out_dims.len()).rev() {
                    idx[a] = rem % out_dims[a];
                    rem /= out_dims[a];
                }
                if idx.iter().zip(in_dims).any(|(i, d)| i >= d) {
                    return 0;
                }
                let src = idx.iter().zip(in_dims).fold(0, |acc, (i, d)| acc * d + i);
                input[src]
            })
            .collect()
    }

    proptest! {
        #[test]
        fn identity_is_idempotent(data in proptest::collection::vec(any::<u8>(), 1..64)) {
            let s = spec(DType::U8, &[data.len()]);
            let once = run(TransformKind::Identity, s.clone(), &data);
            let twice = run(TransformKind::Identity, s, &once);
            prop_assert_eq!(&once, &data);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn reshape_roundtrip(a in 1usize..6, b in 1usize..6, seed in any::<u8>()) {
            let data: Vec<u8> = (0..a * b).map(|i| (i as u8).wrapping_mul(seed)).collect();
            let flat = run(TransformKind::Reshape { dims: vec![a * b] }, spec(DType::U8, &[a, b]), &data);
            let back = run(TransformKind::Reshape { dims: vec![a, b] }, spec(DType::U8, &[a * b]), &flat);
            prop_assert_eq!(back, data);
        }

        #[test]
        fn crop_pad_matches_index_oracle(
            in_dims in proptest::collection::vec(1usize..5, 1..4),
            deltas in proptest::collection::vec(-2i32..3, 3),
        ) {
            let out_dims: Vec<usize> = in_dims.iter().zip(&deltas).map(|(&d, &x)| (d as i32 + x).max(1) as usize).collect();
            let n: usize = in_dims.iter().product();
            let data: Vec<u8> = (0..n).map(|i| (i % 250 + 1) as u8).collect();
            let got = run(TransformKind::CropPad { dims: out_dims.clone() }, spec(DType::U8, &in_dims), &data);
            prop_assert_eq!(got, crop_pad_oracle(&in_dims, &out_dims, &data));
        }
    }
}
