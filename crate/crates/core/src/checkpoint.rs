//! Binary checkpoints: magic, version, a length-prefixed JSON header and raw
//! little-endian tensor blobs in the order the header lists them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DerfError, Result};
use crate::field::{AdamState, ArchitectureDescriptor, DerfModel, HeadParams, Parameters, SiteParams};
use crate::geometry::{NormalizationTransform, Vec3};
use crate::train::{Phase, TrainConfig, TrainState};
use crate::voronoi::VoronoiDecomposition;

pub const MAGIC: [u8; 8] = *b"DERFCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub name: String,
    pub dtype: Dtype,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    descriptor: ArchitectureDescriptor,
    normalization: NormalizationTransform,
    beta: f64,
    n_heads: usize,
    iter: u64,
    phase: Phase,
    config: TrainConfig,
    coarse_adam: AdamState<f32>,
    site_adam: AdamState<f64>,
    head_adam: AdamState<f32>,
    blobs: Vec<BlobInfo>,
}

enum Blob {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Blob {
    fn dtype(&self) -> Dtype {
        match self {
            Blob::F32(_) => Dtype::F32,
            Blob::F64(_) => Dtype::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            Blob::F32(v) => v.len(),
            Blob::F64(v) => v.len(),
        }
    }
}

fn flatten<T: Copy, P: Parameters<T> + ?Sized>(p: &P) -> Vec<T> {
    p.tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
}

fn fill<T: Copy, P: Parameters<T> + ?Sized>(p: &mut P, data: &[T]) {
    let mut offset = 0;
    for (_, t) in p.tensors_mut() {
        t.copy_from_slice(&data[offset..offset + t.len()]);
        offset += t.len();
    }
}

fn unflatten_moments<T: Copy>(shapes: &[usize], data: &[T]) -> Vec<Vec<T>> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|&n| {
            let v = data[offset..offset + n].to_vec();
            offset += n;
            v
        })
        .collect()
}

fn concat<T: Copy>(v: &[Vec<T>]) -> Vec<T> {
    v.iter().flatten().copied().collect()
}

fn blobs_of(state: &TrainState) -> Vec<(String, Blob)> {
    let sites = SiteParams(state.model.decomposition.sites().to_vec());
    vec![
        ("sites".into(), Blob::F64(flatten(&sites))),
        ("coarse".into(), Blob::F32(flatten(&state.model.coarse))),
        ("heads".into(), Blob::F32(flatten(&state.model.heads))),
        ("coarse_adam.m".into(), Blob::F32(concat(&state.coarse_adam.m))),
        ("coarse_adam.v".into(), Blob::F32(concat(&state.coarse_adam.v))),
        ("site_adam.m".into(), Blob::F64(concat(&state.site_adam.m))),
        ("site_adam.v".into(), Blob::F64(concat(&state.site_adam.v))),
        ("head_adam.m".into(), Blob::F32(concat(&state.head_adam.m))),
        ("head_adam.v".into(), Blob::F32(concat(&state.head_adam.v))),
    ]
}

pub fn checkpoint_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let blobs = blobs_of(state);
    let header = Header {
        descriptor: state.model.descriptor,
        normalization: state.model.normalization,
        beta: state.model.decomposition.beta(),
        n_heads: state.model.n_heads(),
        iter: state.iter,
        phase: state.phase,
        config: state.config.clone(),
        coarse_adam: state.coarse_adam.clone(),
        site_adam: state.site_adam.clone(),
        head_adam: state.head_adam.clone(),
        blobs: blobs
            .iter()
            .map(|(name, b)| BlobInfo {
                name: name.clone(),
                dtype: b.dtype(),
                len: b.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 20);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, blob) in &blobs {
        match blob {
            Blob::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Blob::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(state)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DerfError::Truncated { what: what.to_string() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 8] = r.take(8, "magic")?.try_into().expect("8 bytes");
    if magic != MAGIC {
        return Err(DerfError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(DerfError::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| DerfError::Truncated {
        what: "header".to_string(),
    })?;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)?;

    let desc = header.descriptor;
    desc.validate()?;
    let mut coarse = HeadParams::<f32>::zeros(desc);
    let mut heads = vec![HeadParams::<f32>::zeros(desc); header.n_heads];
    let mut sites = SiteParams(vec![Vec3::zeros(); header.n_heads]);
    let head_shapes = coarse.shapes();
    let heads_shapes = heads.shapes();
    let site_shapes = sites.shapes();
    let expected: [(&str, Dtype, usize); 9] = [
        ("sites", Dtype::F64, 3 * header.n_heads),
        ("coarse", Dtype::F32, coarse.param_count()),
        ("heads", Dtype::F32, header.n_heads * coarse.param_count()),
        ("coarse_adam.m", Dtype::F32, coarse.param_count()),
        ("coarse_adam.v", Dtype::F32, coarse.param_count()),
        ("site_adam.m", Dtype::F64, 3 * header.n_heads),
        ("site_adam.v", Dtype::F64, 3 * header.n_heads),
        ("head_adam.m", Dtype::F32, header.n_heads * coarse.param_count()),
        ("head_adam.v", Dtype::F32, header.n_heads * coarse.param_count()),
    ];
    if header.blobs.len() != expected.len() {
        return Err(DerfError::Checkpoint(format!(
            "expected {} blobs, header lists {}",
            expected.len(),
            header.blobs.len()
        )));
    }
    let mut f32s: Vec<Vec<f32>> = Vec::new();
    let mut f64s: Vec<Vec<f64>> = Vec::new();
    for (info, (name, dtype, len)) in header.blobs.iter().zip(expected) {
        if info.name != name || info.dtype != dtype || info.len != len {
            return Err(DerfError::Checkpoint(format!(
                "blob `{}` ({:?}, {}) does not match the expected `{name}` ({dtype:?}, {len})",
                info.name, info.dtype, info.len
            )));
        }
        let raw = r.take(len * dtype.size(), name)?;
        match dtype {
            Dtype::F32 => f32s.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            Dtype::F64 => f64s.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        }
    }
    if r.pos != bytes.len() {
        return Err(DerfError::Checkpoint(format!(
            "{} trailing bytes after the last blob",
            bytes.len() - r.pos
        )));
    }

    // f64 blobs: sites, site m, site v. f32 blobs: coarse, heads, then moments.
    fill(&mut sites, &f64s[0]);
    fill(&mut coarse, &f32s[0]);
    fill(&mut heads, &f32s[1]);
    let mut coarse_adam = header.coarse_adam;
    coarse_adam.m = unflatten_moments(&head_shapes, &f32s[2]);
    coarse_adam.v = unflatten_moments(&head_shapes, &f32s[3]);
    let mut site_adam = header.site_adam;
    site_adam.m = unflatten_moments(&site_shapes, &f64s[1]);
    site_adam.v = unflatten_moments(&site_shapes, &f64s[2]);
    let mut head_adam = header.head_adam;
    head_adam.m = unflatten_moments(&heads_shapes, &f32s[4]);
    head_adam.v = unflatten_moments(&heads_shapes, &f32s[5]);

    let decomposition = VoronoiDecomposition::new(sites.0, header.beta)?;
    let model = DerfModel::new(decomposition, heads, coarse, desc, header.normalization)?;
    Ok(TrainState {
        config: header.config,
        model,
        phase: header.phase,
        iter: header.iter,
        coarse_adam,
        site_adam,
        head_adam,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    checkpoint_from_bytes(&fs::read(path)?)
}
