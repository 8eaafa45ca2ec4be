//! On-disk formats: the `FCGT` binary tensor container, dataset and
//! checkpoint directory layouts, and the CSV writers for convergence
//! records and training curves.
//!
//! Tensor container: magic bytes `FCGT`, `u32` version (= 1), `u32` rank,
//! `rank x u64` dimensions, then the little-endian row-major payload.
//! Float tensors carry `f64` entries; index tensors carry `u64` entries
//! (the reader picks the element type, `meta.json` records it per file).

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krylov::ConvergenceRecord;
use crate::problems::{GridDescriptor, ProblemInstance, ProblemKind, ScalarField};
use crate::sparse::CsrMatrix;
use crate::spectral::sno::{Linear, SpectralLayer};
use crate::training::{CurvePoint, KrylovSample, SamplingKind, TrainConfig};
use crate::{Real, SnoParams};

const MAGIC: &[u8; 4] = b"FCGT";
const VERSION: u32 = 1;

fn write_header(w: &mut impl Write, dims: &[u64]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<Vec<u64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidData(format!("{}: bad magic", path.display())));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::InvalidData(format!(
            "{}: unsupported tensor version {version}",
            path.display()
        )));
    }
    r.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut dword = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut dword)?;
        dims.push(u64::from_le_bytes(dword));
    }
    Ok(dims)
}

pub fn write_f64_tensor(path: &Path, dims: &[u64], data: &[f64]) -> Result<()> {
    let expect: u64 = dims.iter().product();
    if expect != data.len() as u64 {
        return Err(Error::InvalidData(format!(
            "tensor {} payload {} != dims product {expect}",
            path.display(),
            data.len()
        )));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_header(&mut w, dims)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_f64_tensor(path: &Path) -> Result<(Vec<u64>, Vec<f64>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let dims = read_header(&mut r, path)?;
    let count: u64 = dims.iter().product();
    let mut data = Vec::with_capacity(count as usize);
    let mut word = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    Ok((dims, data))
}

pub fn write_u64_tensor(path: &Path, dims: &[u64], data: &[u64]) -> Result<()> {
    let expect: u64 = dims.iter().product();
    if expect != data.len() as u64 {
        return Err(Error::InvalidData(format!(
            "tensor {} payload {} != dims product {expect}",
            path.display(),
            data.len()
        )));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_header(&mut w, dims)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_u64_tensor(path: &Path) -> Result<(Vec<u64>, Vec<u64>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let dims = read_header(&mut r, path)?;
    let count: u64 = dims.iter().product();
    let mut data = Vec::with_capacity(count as usize);
    let mut word = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut word)?;
        data.push(u64::from_le_bytes(word));
    }
    Ok((dims, data))
}

// ---------------------------------------------------------------------------
// Dataset directory
// ---------------------------------------------------------------------------

/// Per-file dtype note in dataset metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub dtype: String,
    pub dims: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: ProblemKind,
    pub grid: usize,
    pub n_problems: usize,
    pub samples_per_problem: usize,
    pub sampling: SamplingKind,
    pub seed: u64,
    pub field_spec: FieldSpecMeta,
    pub problems: Vec<ProblemFiles>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSpecMeta {
    pub n1: usize,
    pub n2: usize,
    pub alpha: f64,
    pub diffusion_offset: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFiles {
    pub dir: String,
    pub files: Vec<TensorEntry>,
}

fn entry(file: &str, dtype: &str, dims: &[u64]) -> TensorEntry {
    TensorEntry { file: file.into(), dtype: dtype.into(), dims: dims.to_vec() }
}

/// Persist problems and their samples under `dir` in the documented layout:
/// `meta.json` plus one subdirectory per problem holding the fields, the
/// CSR triplet, and the stacked residual/error tensors.
pub fn save_dataset(
    dir: &Path,
    kind: ProblemKind,
    sampling: SamplingKind,
    seed: u64,
    problems: &[ProblemInstance<Real>],
    samples: &[KrylovSample<Real>],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = problems[0].grid.n;
    let nn = (n * n) as u64;
    let per = samples.len() / problems.len();
    let mut meta_problems = Vec::new();
    for (j, p) in problems.iter().enumerate() {
        let pdir = dir.join(format!("problem_{j:03}"));
        fs::create_dir_all(&pdir)?;
        let mut files = Vec::new();

        write_f64_tensor(&pdir.join("a.fcgt"), &[n as u64, n as u64], &p.a.values)?;
        files.push(entry("a.fcgt", "f64", &[n as u64, n as u64]));
        write_f64_tensor(&pdir.join("f.fcgt"), &[n as u64, n as u64], &p.f.values)?;
        files.push(entry("f.fcgt", "f64", &[n as u64, n as u64]));

        let row_ptr: Vec<u64> = p.matrix.row_ptr.iter().map(|&v| v as u64).collect();
        let col_idx: Vec<u64> = p.matrix.col_idx.iter().map(|&v| v as u64).collect();
        write_u64_tensor(&pdir.join("csr_row_ptr.fcgt"), &[row_ptr.len() as u64], &row_ptr)?;
        files.push(entry("csr_row_ptr.fcgt", "u64", &[row_ptr.len() as u64]));
        write_u64_tensor(&pdir.join("csr_col_idx.fcgt"), &[col_idx.len() as u64], &col_idx)?;
        files.push(entry("csr_col_idx.fcgt", "u64", &[col_idx.len() as u64]));
        write_f64_tensor(&pdir.join("csr_vals.fcgt"), &[p.matrix.vals.len() as u64], &p.matrix.vals)?;
        files.push(entry("csr_vals.fcgt", "f64", &[p.matrix.vals.len() as u64]));

        let mine: Vec<&KrylovSample<Real>> =
            samples.iter().filter(|s| s.problem_index == j).collect();
        let mut residuals = Vec::with_capacity(mine.len() * nn as usize);
        let mut errors = Vec::with_capacity(mine.len() * nn as usize);
        let mut iters = Vec::with_capacity(mine.len());
        for s in &mine {
            residuals.extend_from_slice(&s.r);
            errors.extend_from_slice(&s.e);
            iters.push(s.source_iteration as u64);
        }
        let dims = [mine.len() as u64, nn];
        write_f64_tensor(&pdir.join("residuals.fcgt"), &dims, &residuals)?;
        files.push(entry("residuals.fcgt", "f64", &dims));
        write_f64_tensor(&pdir.join("errors.fcgt"), &dims, &errors)?;
        files.push(entry("errors.fcgt", "f64", &dims));
        write_u64_tensor(&pdir.join("iterations.fcgt"), &[mine.len() as u64], &iters)?;
        files.push(entry("iterations.fcgt", "u64", &[mine.len() as u64]));

        meta_problems.push(ProblemFiles { dir: format!("problem_{j:03}"), files });
    }
    let meta = DatasetMeta {
        kind,
        grid: n,
        n_problems: problems.len(),
        samples_per_problem: per,
        sampling,
        seed,
        field_spec: FieldSpecMeta {
            n1: crate::problems::FIELD_N1,
            n2: crate::problems::FIELD_N2,
            alpha: crate::problems::FIELD_ALPHA,
            diffusion_offset: crate::problems::DIFFUSION_OFFSET,
        },
        problems: meta_problems,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(
    dir: &Path,
) -> Result<(DatasetMeta, Vec<ProblemInstance<Real>>, Vec<KrylovSample<Real>>)> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let mut problems = Vec::with_capacity(meta.n_problems);
    let mut samples = Vec::new();
    for (j, pf) in meta.problems.iter().enumerate() {
        let pdir = dir.join(&pf.dir);
        let (adims, avals) = read_f64_tensor(&pdir.join("a.fcgt"))?;
        let n = adims[0] as usize;
        let (_, fvals) = read_f64_tensor(&pdir.join("f.fcgt"))?;
        let (_, row_ptr) = read_u64_tensor(&pdir.join("csr_row_ptr.fcgt"))?;
        let (_, col_idx) = read_u64_tensor(&pdir.join("csr_col_idx.fcgt"))?;
        let (_, vals) = read_f64_tensor(&pdir.join("csr_vals.fcgt"))?;
        let matrix = CsrMatrix::from_csr(
            n * n,
            n * n,
            row_ptr.into_iter().map(|v| v as usize).collect(),
            col_idx.into_iter().map(|v| v as usize).collect(),
            vals,
        )?;
        problems.push(ProblemInstance {
            grid: GridDescriptor::new(n)?,
            a: ScalarField { n, values: avals },
            f: ScalarField { n, values: fvals },
            matrix,
        });

        let (rdims, residuals) = read_f64_tensor(&pdir.join("residuals.fcgt"))?;
        let (_, errors) = read_f64_tensor(&pdir.join("errors.fcgt"))?;
        let (_, iters) = read_u64_tensor(&pdir.join("iterations.fcgt"))?;
        let count = rdims[0] as usize;
        let nn = rdims[1] as usize;
        for i in 0..count {
            samples.push(KrylovSample {
                problem_index: j,
                r: residuals[i * nn..(i + 1) * nn].to_vec(),
                e: errors[i * nn..(i + 1) * nn].to_vec(),
                source_iteration: iters[i] as usize,
            });
        }
    }
    Ok((meta, problems, samples))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub width: usize,
    pub modes: usize,
    pub layers: usize,
    pub in_channels: usize,
    pub grid: usize,
    pub dataset_kind: ProblemKind,
    pub train_config: TrainConfig,
}

/// Write parameters plus metadata. Complex mixing tensors are stored with a
/// trailing dimension of 2 (re, im) and dims `[width, width, K, K, 2]` in
/// (out, in, mode, mode) order.
pub fn save_checkpoint(dir: &Path, params: &SnoParams, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)?)?;
    let w = params.width as u64;
    let k = params.modes as u64;
    write_f64_tensor(
        &dir.join("encoder_weight.fcgt"),
        &[w, params.in_ch as u64],
        &params.encoder.weight,
    )?;
    write_f64_tensor(&dir.join("encoder_bias.fcgt"), &[w], &params.encoder.bias)?;
    for (i, layer) in params.layers.iter().enumerate() {
        // In-memory layout is [slot][in][out] split; disk layout is
        // [out][in][k1][k2][2] interleaved.
        let (wu, ku) = (params.width, params.modes);
        let mut disk = vec![0.0f64; wu * wu * ku * ku * 2];
        for slot in 0..ku * ku {
            for c_in in 0..wu {
                for o in 0..wu {
                    let src = (slot * wu + c_in) * wu + o;
                    let dst = (((o * wu + c_in) * ku * ku) + slot) * 2;
                    disk[dst] = layer.mix_re[src];
                    disk[dst + 1] = layer.mix_im[src];
                }
            }
        }
        write_f64_tensor(&dir.join(format!("layer{i}_mix.fcgt")), &[w, w, k, k, 2], &disk)?;
        write_f64_tensor(
            &dir.join(format!("layer{i}_bypass_weight.fcgt")),
            &[w, w],
            &layer.bypass.weight,
        )?;
        write_f64_tensor(
            &dir.join(format!("layer{i}_bypass_bias.fcgt")),
            &[w],
            &layer.bypass.bias,
        )?;
    }
    write_f64_tensor(&dir.join("decoder_weight.fcgt"), &[1, w], &params.decoder.weight)?;
    write_f64_tensor(&dir.join("decoder_bias.fcgt"), &[1], &params.decoder.bias)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointMeta, SnoParams)> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let (wu, ku) = (meta.width, meta.modes);
    let (_, enc_w) = read_f64_tensor(&dir.join("encoder_weight.fcgt"))?;
    let (_, enc_b) = read_f64_tensor(&dir.join("encoder_bias.fcgt"))?;
    let mut layers = Vec::with_capacity(meta.layers);
    for i in 0..meta.layers {
        let (dims, disk) = read_f64_tensor(&dir.join(format!("layer{i}_mix.fcgt")))?;
        if dims != vec![wu as u64, wu as u64, ku as u64, ku as u64, 2] {
            return Err(Error::InvalidData(format!("layer{i}_mix.fcgt has dims {dims:?}")));
        }
        let mut mix_re = vec![0.0f64; ku * ku * wu * wu];
        let mut mix_im = vec![0.0f64; ku * ku * wu * wu];
        for slot in 0..ku * ku {
            for c_in in 0..wu {
                for o in 0..wu {
                    let dst = (slot * wu + c_in) * wu + o;
                    let src = (((o * wu + c_in) * ku * ku) + slot) * 2;
                    mix_re[dst] = disk[src];
                    mix_im[dst] = disk[src + 1];
                }
            }
        }
        let (_, bw) = read_f64_tensor(&dir.join(format!("layer{i}_bypass_weight.fcgt")))?;
        let (_, bb) = read_f64_tensor(&dir.join(format!("layer{i}_bypass_bias.fcgt")))?;
        layers.push(SpectralLayer {
            mix_re,
            mix_im,
            bypass: Linear { weight: bw, bias: bb, out_ch: wu, in_ch: wu },
        });
    }
    let (_, dec_w) = read_f64_tensor(&dir.join("decoder_weight.fcgt"))?;
    let (_, dec_b) = read_f64_tensor(&dir.join("decoder_bias.fcgt"))?;
    let params = SnoParams {
        in_ch: meta.in_channels,
        width: wu,
        modes: ku,
        encoder: Linear { weight: enc_w, bias: enc_b, out_ch: wu, in_ch: meta.in_channels },
        layers,
        decoder: Linear { weight: dec_w, bias: dec_b, out_ch: 1, in_ch: wu },
    };
    if !params.all_finite() {
        return Err(Error::InvalidData("checkpoint holds non-finite values".into()));
    }
    Ok((meta, params))
}

// ---------------------------------------------------------------------------
// CSV outputs
// ---------------------------------------------------------------------------

pub fn write_record_csv(path: &Path, record: &ConvergenceRecord) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, record.to_csv())?;
    Ok(())
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = String::from("epoch,mean_loss,lr\n");
    for c in curve {
        out.push_str(&format!("{},{:e},{:e}\n", c.epoch, c.mean_loss, c.lr));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Stable 64-bit content hash (FNV-1a), used to tag run directories.
pub fn content_hash(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// `<base>/<UTC timestamp>_<config hash>` creation for one run.
pub fn make_run_dir(base: &Path, config_text: &str) -> Result<PathBuf> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let dir = base.join(format!("run_{stamp}_{:08x}", content_hash(config_text) as u32));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::make_poisson_instance;
    use crate::training::generate_krylov_dataset;

    #[test]
    fn tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fcgt");
        let data = vec![1.5f64, -2.25, 0.0, 3.0e-12, 1.0e100, -0.5];
        write_f64_tensor(&path, &[2, 3], &data).unwrap();
        let (dims, got) = read_f64_tensor(&path).unwrap();
        assert_eq!(dims, vec![2, 3]);
        assert_eq!(got, data);

        let idx = vec![0u64, 5, 10, u64::MAX];
        let ipath = dir.path().join("i.fcgt");
        write_u64_tensor(&ipath, &[4], &idx).unwrap();
        let (_, got) = read_u64_tensor(&ipath).unwrap();
        assert_eq!(got, idx);
    }

    #[test]
    fn tensor_header_layout_is_pinned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fcgt");
        write_f64_tensor(&path, &[1, 2], &[1.0, 2.0]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"FCGT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 28 + 16);
        assert_eq!(f64::from_le_bytes(bytes[28..36].try_into().unwrap()), 1.0);
    }

    #[test]
    fn tensor_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fcgt");
        fs::write(&path, b"NOPE....").unwrap();
        assert!(read_f64_tensor(&path).is_err());
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridDescriptor::new(7).unwrap();
        let problems: Vec<_> = (0..2)
            .map(|j| make_poisson_instance::<f64>(&grid, j).unwrap())
            .collect();
        let samples = generate_krylov_dataset(&problems, 3, 5).unwrap();
        save_dataset(
            dir.path(),
            ProblemKind::Poisson,
            SamplingKind::Krylov,
            5,
            &problems,
            &samples,
        )
        .unwrap();
        let (meta, p2, s2) = load_dataset(dir.path()).unwrap();
        assert_eq!(meta.grid, 7);
        assert_eq!(meta.samples_per_problem, 3);
        assert_eq!(p2.len(), 2);
        assert_eq!(s2.len(), samples.len());
        for (a, b) in problems.iter().zip(&p2) {
            assert_eq!(a.f.values, b.f.values);
            assert_eq!(a.matrix.vals, b.matrix.vals);
        }
        for (a, b) in samples.iter().zip(&s2) {
            assert_eq!(a.r, b.r);
            assert_eq!(a.e, b.e);
            assert_eq!(a.source_iteration, b.source_iteration);
        }
        // Re-saving produces byte-identical tensor files (determinism).
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(
            dir2.path(),
            ProblemKind::Poisson,
            SamplingKind::Krylov,
            5,
            &problems,
            &samples,
        )
        .unwrap();
        let f1 = fs::read(dir.path().join("problem_000/residuals.fcgt")).unwrap();
        let f2 = fs::read(dir2.path().join("problem_000/residuals.fcgt")).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = SnoParams::init(2, 4, 3, 2, 77);
        let meta = CheckpointMeta {
            width: 4,
            modes: 3,
            layers: 2,
            in_channels: 2,
            grid: 7,
            dataset_kind: ProblemKind::Poisson,
            train_config: TrainConfig::recipe(ProblemKind::Poisson, 7),
        };
        save_checkpoint(dir.path(), &params, &meta).unwrap();
        let (meta2, params2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta2.width, 4);
        assert_eq!(params, params2);
    }

    #[test]
    fn content_hash_is_stable() {
        assert_eq!(content_hash("abc"), content_hash("abc"));
        assert_ne!(content_hash("abc"), content_hash("abd"));
    }
}
