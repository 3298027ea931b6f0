//! Pluggable compute backends standing in for model inference.
//!
//! `Synthetic` spends `busy_ms` of thread CPU time spinning (a kernel that
//! saturates its device: concurrent busy backends on one core serialize)
//! and then `idle_ms` sleeping (a kernel that leaves the device idle, so
//! concurrent instances overlap). `MatmulChain` does real arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::thread_cpu_ns;
use crate::error::{Error, Result};
use crate::tensor_arena::{DType, TensorSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendDescriptor {
    Synthetic {
        busy_ms: f64,
        #[serde(default)]
        idle_ms: f64,
        #[serde(default)]
        jitter_pct: f64,
        #[serde(default)]
        seed: u64,
        /// Fail every Nth inference (0 never). Used for fault tests.
        #[serde(default)]
        fail_every: u64,
    },
    MatmulChain {
        n: usize,
        k: usize,
        #[serde(default = "one")]
        threads: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> usize {
    1
}

impl BackendDescriptor {
    pub fn synthetic(busy_ms: f64, idle_ms: f64) -> Self {
        BackendDescriptor::Synthetic {
            busy_ms,
            idle_ms,
            jitter_pct: 0.0,
            seed: 0,
            fail_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BackendDescriptor::Synthetic {
                busy_ms,
                idle_ms,
                jitter_pct,
                ..
            } => {
                let ok = [*busy_ms, *idle_ms].iter().all(|v| v.is_finite() && *v >= 0.0)
                    && (0.0..100.0).contains(jitter_pct);
                if !ok {
                    return Err(Error::Config(format!("invalid synthetic backend {self:?}")));
                }
            }
            BackendDescriptor::MatmulChain { n, k, threads, .. } => {
                if *n == 0 || *k == 0 || *threads == 0 || *n > 4096 {
                    return Err(Error::Config(format!("invalid matmul backend {self:?}")));
                }
            }
        }
        Ok(())
    }

    /// Nominal busy CPU time per inference, in milliseconds.
    pub fn busy_ms(&self) -> f64 {
        match self {
            BackendDescriptor::Synthetic { busy_ms, .. } => *busy_ms,
            BackendDescriptor::MatmulChain { .. } => 0.0,
        }
    }
}

pub trait ComputeBackend: Send {
    /// Read the model inputs and fill every declared output.
    fn infer(&mut self, inputs: &[&[u8]], outputs: &mut [&mut [u8]]) -> Result<()>;
}

pub fn build_backend(
    desc: &BackendDescriptor,
    input_specs: &[TensorSpec],
    output_specs: &[TensorSpec],
) -> Result<Box<dyn ComputeBackend>> {
    desc.validate()?;
    Ok(match desc {
        BackendDescriptor::Synthetic {
            busy_ms,
            idle_ms,
            jitter_pct,
            seed,
            fail_every,
        } => Box::new(SyntheticBackend {
            busy_ns: (busy_ms * 1e6) as u64,
            idle_ns: (idle_ms * 1e6) as u64,
            jitter: jitter_pct / 100.0,
            rng: ChaCha8Rng::seed_from_u64(*seed),
            fail_every: *fail_every,
            calls: 0,
        }),
        BackendDescriptor::MatmulChain { n, k, threads, seed } => Box::new(MatmulChainBackend::new(
            *n,
            *k,
            *threads,
            *seed,
            input_specs,
            output_specs,
        )),
    })
}

pub struct SyntheticBackend {
    busy_ns: u64,
    idle_ns: u64,
    jitter: f64,
    rng: ChaCha8Rng,
    fail_every: u64,
    calls: u64,
}

impl SyntheticBackend {
    fn jittered(&mut self, ns: u64) -> u64 {
        if self.jitter == 0.0 || ns == 0 {
            return ns;
        }
        let f = 1.0 + self.rng.gen_range(-self.jitter..=self.jitter);
        (ns as f64 * f) as u64
    }
}

/// Spin until this thread has consumed `ns` of CPU time.
pub fn spin_cpu(ns: u64) {
    let start = thread_cpu_ns();
    while thread_cpu_ns() - start < ns {
        std::hint::spin_loop();
    }
}

/// Cheap digest of an input tensor (sampled bytes), used to derive outputs.
fn digest(data: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let step = (data.len() / 256).max(1);
    for b in data.iter().step_by(step).chain(data.iter().rev().take(64)) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ data.len() as u64
}

/// Fill `out` with a repeating 8-byte pattern.
pub fn fill_pattern(out: &mut [u8], word: u64) {
    let bytes = word.to_le_bytes();
    let mut chunks = out.chunks_exact_mut(8);
    for c in &mut chunks {
        c.copy_from_slice(&bytes);
    }
    let rest = chunks.into_remainder();
    let n = rest.len();
    rest.copy_from_slice(&bytes[..n]);
}

impl ComputeBackend for SyntheticBackend {
    fn infer(&mut self, inputs: &[&[u8]], outputs: &mut [&mut [u8]]) -> Result<()> {
        self.calls += 1;
        if self.fail_every > 0 && self.calls % self.fail_every == 0 {
            return Err(Error::Backend(format!("synthetic failure on call {}", self.calls)));
        }
        let busy = self.jittered(self.busy_ns);
        let idle = self.jittered(self.idle_ns);
        spin_cpu(busy);
        if idle > 0 {
            std::thread::sleep(std::time::Duration::from_nanos(idle));
        }
        let seed = inputs.iter().fold(0u64, |acc, i| acc.rotate_left(7) ^ digest(i));
        for (i, out) in outputs.iter_mut().enumerate() {
            fill_pattern(out, seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        }
        Ok(())
    }
}

/// `Y = X · M1 · … · Mk` over rows of the first input, with seeded matrices.
pub struct MatmulChainBackend {
    n: usize,
    threads: usize,
    matrices: Vec<Vec<f32>>,
    input_dtype: DType,
    output_dtypes: Vec<DType>,
    rows: Vec<f32>,
    result: Vec<f32>,
}

impl MatmulChainBackend {
    pub fn new(
        n: usize,
        k: usize,
        threads: usize,
        seed: u64,
        input_specs: &[TensorSpec],
        output_specs: &[TensorSpec],
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (n as f32).sqrt();
        let matrices = (0..k)
            .map(|_| (0..n * n).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect())
            .collect();
        MatmulChainBackend {
            n,
            threads,
            matrices,
            input_dtype: input_specs.first().map(|s| s.dtype).unwrap_or(DType::U8),
            output_dtypes: output_specs.iter().map(|s| s.dtype).collect(),
            rows: Vec::new(),
            result: Vec::new(),
        }
    }

    fn load_rows(&mut self, input: &[u8]) {
        self.rows.clear();
        match self.input_dtype {
            DType::F32 => self
                .rows
                .extend(input.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()))),
            _ => self.rows.extend(input.iter().map(|&b| b as f32 / 255.0)),
        }
        let padded = self.rows.len().div_ceil(self.n).max(1) * self.n;
        self.rows.resize(padded, 0.0);
    }

    fn multiply(&mut self) {
        let n = self.n;
        let matrices = &self.matrices;
        let row_count = self.rows.len() / n;
        self.result.resize(self.rows.len(), 0.0);
        let per_thread = row_count.div_ceil(self.threads).max(1) * n;
        let rows = &self.rows;
        std::thread::scope(|scope| {
            for (chunk_in, chunk_out) in rows.chunks(per_thread).zip(self.result.chunks_mut(per_thread)) {
                scope.spawn(move || {
                    let mut cur = vec![0f32; n];
                    let mut next = vec![0f32; n];
                    for (row_in, row_out) in chunk_in.chunks(n).zip(chunk_out.chunks_mut(n)) {
                        cur.copy_from_slice(row_in);
                        for m in matrices {
                            next.fill(0.0);
                            for (i, &x) in cur.iter().enumerate() {
                                let mrow = &m[i * n..(i + 1) * n];
                                for (acc, &w) in next.iter_mut().zip(mrow) {
                                    *acc += x * w;
                                }
                            }
                            std::mem::swap(&mut cur, &mut next);
                        }
                        row_out.copy_from_slice(&cur);
                    }
                });
            }
        });
    }
}

impl ComputeBackend for MatmulChainBackend {
    fn infer(&mut self, inputs: &[&[u8]], outputs: &mut [&mut [u8]]) -> Result<()> {
        let input = inputs
            .first()
            .ok_or_else(|| Error::Backend("matmul backend needs an input".into()))?;
        self.load_rows(input);
        self.multiply();
        for (out, dtype) in outputs.iter_mut().zip(&self.output_dtypes) {
            let mut values = self.result.iter().cycle();
            for chunk in out.chunks_exact_mut(dtype.size()) {
                let v = *values.next().unwrap();
                match dtype {
                    DType::F32 => chunk.copy_from_slice(&v.to_le_bytes()),
                    DType::U8 => chunk[0] = (v * 255.0) as u8,
                    DType::I32 => chunk.copy_from_slice(&(v as i32).to_le_bytes()),
                    DType::I64 => chunk.copy_from_slice(&(v as i64).to_le_bytes()),
                    DType::F16Raw => chunk.copy_from_slice(&((v.to_bits() >> 16) as u16).to_le_bytes()),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    fn f32_spec(label: &str, dims: &[usize]) -> TensorSpec {
        TensorSpec::new(label, DType::F32, dims).unwrap()
    }

    fn run(desc: &BackendDescriptor, input: &[u8], out_len: usize) -> Vec<u8> {
        let ins = [f32_spec("x", &[input.len() / 4])];
        let outs = [f32_spec("y", &[out_len / 4])];
        let mut b = build_backend(desc, &ins, &outs).unwrap();
        let mut out = vec![0u8; out_len];
        b.infer(&[input], &mut [&mut out]).unwrap();
        out
    }

    #[test]
    fn matmul_is_deterministic_across_thread_counts() {
        let input: Vec<u8> = (0..256u32).flat_map(|i| (i as f32 * 0.01).to_le_bytes()).collect();
        let d1 = BackendDescriptor::MatmulChain { n: 16, k: 3, threads: 1, seed: 7 };
        let d4 = BackendDescriptor::MatmulChain { n: 16, k: 3, threads: 4, seed: 7 };
        let a = run(&d1, &input, 512);
        assert_eq!(a, run(&d1, &input, 512));
        assert_eq!(a, run(&d4, &input, 512));
        let other = BackendDescriptor::MatmulChain { n: 16, k: 3, threads: 1, seed: 8 };
        assert_ne!(a, run(&other, &input, 512));
    }

    #[test]
    fn matmul_matches_naive_product() {
        // One row, n = 2, k = 1: y = x · M computed by hand from the seeded matrix.
        let desc = BackendDescriptor::MatmulChain { n: 2, k: 1, threads: 1, seed: 3 };
        let ins = [f32_spec("x", &[2])];
        let outs = [f32_spec("y", &[2])];
        let mut b = MatmulChainBackend::new(2, 1, 1, 3, &ins, &outs);
        let m = b.matrices[0].clone();
        let x = [0.5f32, -2.0];
        let input: Vec<u8> = x.iter().flat_map(|v| v.to_le_bytes()).collect();
        let mut out = vec![0u8; 8];
        b.infer(&[&input], &mut [&mut out]).unwrap();
        let y: Vec<f32> = out.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(y[0], x[0] * m[0] + x[1] * m[2]);
        assert_eq!(y[1], x[0] * m[1] + x[1] * m[3]);
        assert_eq!(run(&desc, &input, 8), out);
    }

    #[test]
    fn synthetic_fills_outputs_deterministically() {
        let desc = BackendDescriptor::synthetic(0.0, 0.0);
        let a = run(&desc, &[1, 2, 3, 4], 12);
        assert_eq!(a, run(&desc, &[1, 2, 3, 4], 12));
        assert_ne!(a, run(&desc, &[1, 2, 3, 5], 12));
    }

    #[test]
    fn synthetic_timing() {
        let mut b = build_backend(&BackendDescriptor::synthetic(5.0, 10.0), &[], &[]).unwrap();
        let cpu = thread_cpu_ns();
        let t = Instant::now();
        b.infer(&[], &mut []).unwrap();
        assert!(thread_cpu_ns() - cpu >= 5_000_000);
        assert!(t.elapsed().as_secs_f64() >= 0.015);
    }

    #[test]
    fn synthetic_failure_injection() {
        let desc = BackendDescriptor::Synthetic {
            busy_ms: 0.0,
            idle_ms: 0.0,
            jitter_pct: 0.0,
            seed: 0,
            fail_every: 2,
        };
        let mut b = build_backend(&desc, &[], &[]).unwrap();
        assert!(b.infer(&[], &mut []).is_ok());
        assert!(matches!(b.infer(&[], &mut []), Err(Error::Backend(_))));
    }

    #[test]
    fn descriptor_serde_and_validation() {
        let d: BackendDescriptor =
            serde_json::from_str(r#"{"kind":"synthetic","busy_ms":20.0}"#).unwrap();
        assert_eq!(d, BackendDescriptor::synthetic(20.0, 0.0));
        assert!(BackendDescriptor::synthetic(-1.0, 0.0).validate().is_err());
        assert!(BackendDescriptor::MatmulChain { n: 0, k: 1, threads: 1, seed: 0 }.validate().is_err());
    }
}
