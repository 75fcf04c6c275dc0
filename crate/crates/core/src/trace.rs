//! Binary Q/K/V trace format and synthetic trace generation.
//!
//! A trace is a directory: `manifest.json` plus one raw little-endian f32
//! blob per layer and tensor kind (`q_layer{i}.bin`, `k_layer{i}.bin`,
//! `v_layer{i}.bin`), row-major `[token, head, dim]`. Solver math runs in
//! f64; f32 is the interchange precision.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subspace::QuerySubspace;

/// Shapes and encoding of a trace directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub layers: usize,
    pub kv_heads: usize,
    pub query_heads: usize,
    pub head_dim: usize,
    pub tokens: usize,
    pub prompt_len: usize,
    pub dtype: String,
    pub layout: String,
    pub endianness: String,
}

impl TraceManifest {
    pub fn new(
        layers: usize,
        kv_heads: usize,
        query_heads: usize,
        head_dim: usize,
        tokens: usize,
        prompt_len: usize,
    ) -> Self {
        Self {
            layers,
            kv_heads,
            query_heads,
            head_dim,
            tokens,
            prompt_len,
            dtype: "f32".into(),
            layout: "row-major".into(),
            endianness: "little".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.kv_heads == 0 || self.query_heads == 0 || self.head_dim == 0 {
            return Err(Error::Manifest(
                "layers, heads and head_dim must be positive".into(),
            ));
        }
        if self.query_heads % self.kv_heads != 0 {
            return Err(Error::Manifest(format!(
                "query_heads {} not a multiple of kv_heads {}",
                self.query_heads, self.kv_heads
            )));
        }
        if self.prompt_len > self.tokens {
            return Err(Error::Manifest(format!(
                "prompt_len {} exceeds tokens {}",
                self.prompt_len, self.tokens
            )));
        }
        if self.dtype != "f32" {
            return Err(Error::Manifest(format!("unsupported dtype {}", self.dtype)));
        }
        if self.layout != "row-major" {
            return Err(Error::Manifest(format!(
                "unsupported layout {}",
                self.layout
            )));
        }
        if self.endianness != "little" {
            return Err(Error::Manifest(format!(
                "unsupported endianness {}",
                self.endianness
            )));
        }
        Ok(())
    }

    /// Query heads served by one KV head.
    pub fn gqa_group(&self) -> usize {
        self.query_heads / self.kv_heads
    }
}

/// A full trace in memory: `[layer][head]` matrices of shape `tokens × head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceData {
    pub manifest: TraceManifest,
    pub queries: Vec<Vec<DMatrix<f64>>>,
    pub keys: Vec<Vec<DMatrix<f64>>>,
    pub values: Vec<Vec<DMatrix<f64>>>,
}

impl TraceData {
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let m = &self.manifest;
        let check = |grid: &Vec<Vec<DMatrix<f64>>>, heads: usize, what: &str| -> Result<()> {
            if grid.len() != m.layers {
                return Err(Error::Manifest(format!("{what}: wrong layer count")));
            }
            for per_layer in grid {
                if per_layer.len() != heads {
                    return Err(Error::Manifest(format!("{what}: wrong head count")));
                }
                for mat in per_layer {
                    if mat.nrows() != m.tokens || mat.ncols() != m.head_dim {
                        return Err(Error::Manifest(format!(
                            "{what}: tensor shape {}x{} does not match manifest {}x{}",
                            mat.nrows(),
                            mat.ncols(),
                            m.tokens,
                            m.head_dim
                        )));
                    }
                }
            }
            Ok(())
        };
        check(&self.queries, m.query_heads, "queries")?;
        check(&self.keys, m.kv_heads, "keys")?;
        check(&self.values, m.kv_heads, "values")
    }
}

/// Parameters of the synthetic trace generator. Queries are drawn from an
/// exact rank-`true_rank` factorization plus Gaussian noise; keys and values
/// are i.i.d. Gaussian scaled to unit RMS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub tokens: usize,
    pub dim: usize,
    pub true_rank: usize,
    pub noise_level: f64,
    pub seed: u64,
    pub layers: usize,
    pub kv_heads: usize,
    pub query_heads: usize,
    pub prompt_len: usize,
    pub normalize_queries: bool,
}

impl SyntheticSpec {
    pub fn new(tokens: usize, dim: usize, true_rank: usize, noise_level: f64, seed: u64) -> Self {
        Self {
            tokens,
            dim,
            true_rank,
            noise_level,
            seed,
            layers: 1,
            kv_heads: 1,
            query_heads: 1,
            prompt_len: tokens / 2,
            normalize_queries: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.true_rank == 0 || self.true_rank > self.dim {
            return Err(Error::Manifest(format!(
                "true_rank {} outside 1..={}",
                self.true_rank, self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return Err(Error::Manifest(format!(
                "noise_level {} outside [0, 1)",
                self.noise_level
            )));
        }
        if self.tokens == 0 {
            return Err(Error::Manifest("tokens must be positive".into()));
        }
        TraceManifest::new(
            self.layers,
            self.kv_heads,
            self.query_heads,
            self.dim,
            self.tokens,
            self.prompt_len,
        )
        .validate()
    }
}

fn round_to_f32(m: &mut DMatrix<f64>) {
    for x in m.iter_mut() {
        *x = *x as f32 as f64;
    }
}

fn rms(m: &DMatrix<f64>) -> f64 {
    let n = (m.nrows() * m.ncols()) as f64;
    (m.iter().map(|x| x * x).sum::<f64>() / n).sqrt()
}

fn unit_rms(m: &mut DMatrix<f64>) {
    let scale = rms(m);
    if scale > 0.0 {
        for x in m.iter_mut() {
            *x /= scale;
        }
    }
}

/// Generate a deterministic synthetic trace from `spec`.
///
/// All values are rounded through f32 so an in-memory trace is bit-identical
/// to one written to disk and read back. The generator is a fixed, portable
/// stream cipher RNG (ChaCha8), so a seed reproduces across platforms.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<TraceData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, d, r) = (spec.tokens, spec.dim, spec.true_rank);

    let gaussian = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    };

    let mut queries = Vec::with_capacity(spec.layers);
    let mut keys = Vec::with_capacity(spec.layers);
    let mut values = Vec::with_capacity(spec.layers);
    for _ in 0..spec.layers {
        let mut q_heads = Vec::with_capacity(spec.query_heads);
        for _ in 0..spec.query_heads {
            // The factor product is left unnormalized: its leading singular
            // values grow with the prompt, which is the regime the solver's
            // regularization is tuned for. Noise is relative to the signal.
            let left = gaussian(n, r, &mut rng);
            let right = gaussian(r, d, &mut rng);
            let signal = &left * &right;
            let noise = gaussian(n, d, &mut rng);
            let noise_scale = spec.noise_level * rms(&signal).max(f64::MIN_POSITIVE);
            let mut q = signal + noise * noise_scale;
            if spec.normalize_queries {
                for i in 0..n {
                    let norm = q.row(i).norm();
                    if norm > 0.0 {
                        let mut row = q.row_mut(i);
                        row /= norm;
                    }
                }
            }
            round_to_f32(&mut q);
            q_heads.push(q);
        }
        queries.push(q_heads);

        let mut k_heads = Vec::with_capacity(spec.kv_heads);
        let mut v_heads = Vec::with_capacity(spec.kv_heads);
        for _ in 0..spec.kv_heads {
            let mut k = gaussian(n, d, &mut rng);
            unit_rms(&mut k);
            round_to_f32(&mut k);
            k_heads.push(k);
        }
        for _ in 0..spec.kv_heads {
            let mut v = gaussian(n, d, &mut rng);
            unit_rms(&mut v);
            round_to_f32(&mut v);
            v_heads.push(v);
        }
        keys.push(k_heads);
        values.push(v_heads);
    }

    let trace = TraceData {
        manifest: TraceManifest::new(
            spec.layers,
            spec.kv_heads,
            spec.query_heads,
            spec.dim,
            spec.tokens,
            spec.prompt_len,
        ),
        queries,
        keys,
        values,
    };
    trace.validate()?;
    Ok(trace)
}

/// Serialize `[layer][head]` matrices into one `[token, head, dim]` f32 blob.
fn encode_layer(per_head: &[DMatrix<f64>], tokens: usize, dim: usize) -> Vec<u8> {
    let heads = per_head.len();
    let mut bytes = Vec::with_capacity(tokens * heads * dim * 4);
    for token in 0..tokens {
        for mat in per_head {
            for c in 0..dim {
                bytes.extend_from_slice(&(mat[(token, c)] as f32).to_le_bytes());
            }
        }
    }
    bytes
}

fn decode_layer(
    bytes: &[u8],
    tokens: usize,
    heads: usize,
    dim: usize,
    path: &str,
) -> Result<Vec<DMatrix<f64>>> {
    let expected = (tokens * heads * dim * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::BlobSize {
            path: path.to_string(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut out = vec![DMatrix::zeros(tokens, dim); heads];
    let mut offset = 0;
    for token in 0..tokens {
        for mat in out.iter_mut() {
            for c in 0..dim {
                let raw = [
                    bytes[offset],
                    bytes[offset + 1],
                    bytes[offset + 2],
                    bytes[offset + 3],
                ];
                mat[(token, c)] = f32::from_le_bytes(raw) as f64;
                offset += 4;
            }
        }
    }
    Ok(out)
}

/// Write a trace directory (manifest sidecar plus per-layer blobs).
pub fn write_trace(trace: &TraceData, dir: &Path) -> Result<()> {
    trace.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&trace.manifest)?;
    fs::write(dir.join("manifest.json"), manifest)?;
    let m = &trace.manifest;
    for layer in 0..m.layers {
        let mut q = fs::File::create(dir.join(format!("q_layer{layer}.bin")))?;
        q.write_all(&encode_layer(&trace.queries[layer], m.tokens, m.head_dim))?;
        let mut k = fs::File::create(dir.join(format!("k_layer{layer}.bin")))?;
        k.write_all(&encode_layer(&trace.keys[layer], m.tokens, m.head_dim))?;
        let mut v = fs::File::create(dir.join(format!("v_layer{layer}.bin")))?;
        v.write_all(&encode_layer(&trace.values[layer], m.tokens, m.head_dim))?;
    }
    Ok(())
}

/// Read a trace directory back. Fails with the offending blob name and byte
/// counts when a blob does not match the manifest.
pub fn read_trace(dir: &Path) -> Result<TraceData> {
    let manifest: TraceManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest.validate()?;
    let mut queries = Vec::with_capacity(manifest.layers);
    let mut keys = Vec::with_capacity(manifest.layers);
    let mut values = Vec::with_capacity(manifest.layers);
    for layer in 0..manifest.layers {
        for (name, heads, grid) in [
            (format!("q_layer{layer}.bin"), manifest.query_heads, &mut queries),
            (format!("k_layer{layer}.bin"), manifest.kv_heads, &mut keys),
            (format!("v_layer{layer}.bin"), manifest.kv_heads, &mut values),
        ] {
            let bytes = fs::read(dir.join(&name))?;
            grid.push(decode_layer(
                &bytes,
                manifest.tokens,
                heads,
                manifest.head_dim,
                &name,
            )?);
        }
    }
    let trace = TraceData {
        manifest,
        queries,
        keys,
        values,
    };
    trace.validate()?;
    Ok(trace)
}

#[derive(Debug, Serialize, Deserialize)]
struct SubspaceManifest {
    rows: usize,
    dim: usize,
    rank: usize,
    dtype: String,
    layout: String,
    endianness: String,
}

fn encode_f64_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(m.nrows() * m.ncols() * 8);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    bytes
}

fn decode_f64_matrix(bytes: &[u8], rows: usize, cols: usize, path: &str) -> Result<DMatrix<f64>> {
    let expected = (rows * cols * 8) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::BlobSize {
            path: path.to_string(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut m = DMatrix::zeros(rows, cols);
    let mut offset = 0;
    for i in 0..rows {
        for j in 0..cols {
            let mut raw = [0u8; 8];
            raw.copy_from_slice(&bytes[offset..offset + 8]);
            m[(i, j)] = f64::from_le_bytes(raw);
            offset += 8;
        }
    }
    Ok(m)
}

/// Persist a subspace with the same manifest-plus-blob convention as traces
/// (f64 blobs, so reuse across runs is lossless).
pub fn write_subspace(sub: &QuerySubspace, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = SubspaceManifest {
        rows: sub.requested_rank(),
        dim: sub.dim(),
        rank: sub.rank(),
        dtype: "f64".into(),
        layout: "row-major".into(),
        endianness: "little".into(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    fs::write(dir.join("basis.bin"), encode_f64_matrix(sub.basis()))?;
    fs::write(
        dir.join("orthonormal.bin"),
        encode_f64_matrix(sub.orthonormal_basis()),
    )?;
    let mut sv = Vec::with_capacity(sub.singular_values().len() * 8);
    for &s in sub.singular_values() {
        sv.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(dir.join("singular_values.bin"), sv)?;
    Ok(())
}

pub fn read_subspace(dir: &Path) -> Result<QuerySubspace> {
    let manifest: SubspaceManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.dtype != "f64" {
        return Err(Error::Manifest(format!(
            "unsupported subspace dtype {}",
            manifest.dtype
        )));
    }
    let basis = decode_f64_matrix(
        &fs::read(dir.join("basis.bin"))?,
        manifest.rows,
        manifest.dim,
        "basis.bin",
    )?;
    let orthonormal = decode_f64_matrix(
        &fs::read(dir.join("orthonormal.bin"))?,
        manifest.rows,
        manifest.dim,
        "orthonormal.bin",
    )?;
    let sv_bytes = fs::read(dir.join("singular_values.bin"))?;
    if sv_bytes.len() != manifest.rows * 8 {
        return Err(Error::BlobSize {
            path: "singular_values.bin".into(),
            expected: (manifest.rows * 8) as u64,
            actual: sv_bytes.len() as u64,
        });
    }
    let singular_values = sv_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    QuerySubspace::from_parts(basis, orthonormal, singular_values, manifest.rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::{build_subspace, mean_deviation_curve};
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn synthetic_trace_is_deterministic() {
        let spec = SyntheticSpec::new(32, 16, 3, 0.05, 9);
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_trace_has_exact_rank() {
        let spec = SyntheticSpec::new(64, 24, 3, 0.0, 3);
        let trace = gen_synthetic(&spec).unwrap();
        let q = &trace.queries[0][0];
        let svd = q.clone().svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sv[3] / sv[0] <= 1e-7, "sigma4/sigma1 = {}", sv[3] / sv[0]);
    }

    #[test]
    fn deviation_curve_drops_then_flattens_at_true_rank() {
        let spec = SyntheticSpec::new(128, 32, 5, 0.05, 11);
        let trace = gen_synthetic(&spec).unwrap();
        let curve = mean_deviation_curve(&trace.queries[0][0], 12).unwrap();
        for w in curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        let drop_to_rank = curve[0] - curve[4];
        let flat_after_rank = curve[4] - curve[9];
        assert!(
            flat_after_rank < 0.2 * drop_to_rank,
            "curve not flattening: drop {drop_to_rank}, tail {flat_after_rank}"
        );
        assert!(curve[4] < 0.25, "deviation at true rank is {}", curve[4]);
    }

    #[test]
    fn trace_roundtrip_is_bit_identical() {
        let mut spec = SyntheticSpec::new(20, 8, 2, 0.1, 5);
        spec.layers = 2;
        spec.kv_heads = 2;
        spec.query_heads = 4;
        let trace = gen_synthetic(&spec).unwrap();
        let dir = tempdir().unwrap();
        write_trace(&trace, dir.path()).unwrap();
        let back = read_trace(dir.path()).unwrap();
        assert_eq!(trace, back);
    }

    #[test]
    fn empty_trace_roundtrips() {
        let trace = TraceData {
            manifest: TraceManifest::new(1, 1, 1, 8, 0, 0),
            queries: vec![vec![DMatrix::zeros(0, 8)]],
            keys: vec![vec![DMatrix::zeros(0, 8)]],
            values: vec![vec![DMatrix::zeros(0, 8)]],
        };
        let dir = tempdir().unwrap();
        write_trace(&trace, dir.path()).unwrap();
        assert_eq!(
            std::fs::metadata(dir.path().join("k_layer0.bin"))
                .unwrap()
                .len(),
            0
        );
        let back = read_trace(dir.path()).unwrap();
        assert_eq!(trace, back);
    }

    #[test]
    fn corrupt_manifest_token_count_names_the_blob() {
        let trace = gen_synthetic(&SyntheticSpec::new(16, 8, 2, 0.0, 1)).unwrap();
        let dir = tempdir().unwrap();
        write_trace(&trace, dir.path()).unwrap();
        let mut tampered = trace.manifest.clone();
        tampered.tokens = 24;
        std::fs::write(
            dir.path().join("manifest.json"),
            serde_json::to_string(&tampered).unwrap(),
        )
        .unwrap();
        match read_trace(dir.path()) {
            Err(Error::BlobSize {
                path,
                expected,
                actual,
            }) => {
                assert_eq!(path, "q_layer0.bin");
                assert_eq!(expected, 24 * 8 * 4);
                assert_eq!(actual, 16 * 8 * 4);
            }
            other => panic!("expected blob size error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_reports_offsets() {
        let trace = gen_synthetic(&SyntheticSpec::new(16, 8, 2, 0.0, 2)).unwrap();
        let dir = tempdir().unwrap();
        write_trace(&trace, dir.path()).unwrap();
        let blob = dir.path().join("v_layer0.bin");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 5]).unwrap();
        match read_trace(dir.path()) {
            Err(Error::BlobSize { path, expected, actual }) => {
                assert_eq!(path, "v_layer0.bin");
                assert_eq!(expected - actual, 5);
            }
            other => panic!("expected blob size error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_validation_catches_gqa_mismatch() {
        let mut manifest = TraceManifest::new(1, 3, 4, 8, 10, 5);
        assert!(manifest.validate().is_err());
        manifest.kv_heads = 2;
        assert!(manifest.validate().is_ok());
        manifest.prompt_len = 11;
        assert!(manifest.validate().is_err());
    }

    #[test]
    fn subspace_roundtrip_is_lossless() {
        let trace = gen_synthetic(&SyntheticSpec::new(40, 16, 4, 0.1, 7)).unwrap();
        let sub = build_subspace(&trace.queries[0][0], 6).unwrap();
        let dir = tempdir().unwrap();
        write_subspace(&sub, dir.path()).unwrap();
        let back = read_subspace(dir.path()).unwrap();
        assert_eq!(sub, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn roundtrip_losslessness_fuzz(
            layers in 1usize..3,
            kv_heads in 1usize..3,
            gqa in 1usize..3,
            head_dim in 1usize..12,
            tokens in 0usize..24,
            seed in 0u64..10_000,
        ) {
            let manifest = TraceManifest::new(
                layers, kv_heads, kv_heads * gqa, head_dim, tokens,
                tokens / 2,
            );
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut grid = |heads: usize| -> Vec<Vec<DMatrix<f64>>> {
                (0..layers)
                    .map(|_| {
                        (0..heads)
                            .map(|_| {
                                DMatrix::from_fn(tokens, head_dim, |_, _| {
                                    let x: f64 = StandardNormal.sample(&mut rng);
                                    x as f32 as f64
                                })
                            })
                            .collect()
                    })
                    .collect()
            };
            let trace = TraceData {
                queries: grid(manifest.query_heads),
                keys: grid(manifest.kv_heads),
                values: grid(manifest.kv_heads),
                manifest,
            };
            let dir = tempdir().unwrap();
            write_trace(&trace, dir.path()).unwrap();
            let back = read_trace(dir.path()).unwrap();
            prop_assert_eq!(trace, back);
        }
    }
}
