//! Balanced patch datasets for both cascade stages.

use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::cascade::{lesion_scores, FeatureCache};
use crate::error::{Error, Result};
use crate::nn::container::{field, parse, read_header};
use crate::nn::{Model, PATCH_LEN, PATCH_SIZE};
use crate::ops::Dims3;
use crate::tensor::Tensor;
use crate::volume::Case;

/// Probability at or above which a non-lesion voxel counts as a stage-1 false positive.
pub const FP_THRESHOLD: f32 = 0.5;

const HALF: usize = PATCH_SIZE / 2;
const CACHE_MAGIC: &str = "MSSEG-PATCHES";
const CACHE_VERSION: u32 = 1;
// keeps resampling streams apart from the initial draw
const RESAMPLE_SALT: u64 = 0x7265_7361_6d70_6c65;

/// Why a patch is in the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PatchSource {
    Lesion,
    RandomNegative,
    FpNegative,
}

impl PatchSource {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lesion => "lesion",
            Self::RandomNegative => "random-negative",
            Self::FpNegative => "fp-negative",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "lesion" => Ok(Self::Lesion),
            "random-negative" => Ok(Self::RandomNegative),
            "fp-negative" => Ok(Self::FpNegative),
            _ => Err(Error::Format(format!("unknown patch source {s:?}"))),
        }
    }
}

/// Origin of one patch: case index into [`PatchDataset::case_ids`] and flat center voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub case: usize,
    pub center: usize,
    pub source: PatchSource,
}

/// Candidate center for a negative patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Candidate {
    pub case: usize,
    pub center: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    patches: Tensor<f32>,
    labels: Vec<u8>,
    provenance: Vec<Provenance>,
    validation: Vec<bool>,
    split: bool,
    negative_pool: Vec<Candidate>,
    pool_source: PatchSource,
    fallback_pool: Vec<Candidate>,
    case_ids: Vec<String>,
    seed: u64,
}

/// Copies the 11^3 neighborhood of `center` for both modalities into `out`
/// (FLAIR first), zero outside the volume.
fn write_patch(case: &Case, center: usize, out: &mut [f32]) {
    let dims = case.dims();
    let (cz, cy, cx) = dims.coords(center);
    out.fill(0.0);
    let s = PATCH_SIZE;
    let lo = |c: usize| c as isize - HALF as isize;
    let (x0, x1) = (lo(cx).max(0) as usize, (cx + HALF + 1).min(dims.w));
    let px0 = (x0 as isize - lo(cx)) as usize;
    for (ch, vol) in [&case.flair, &case.t1].into_iter().enumerate() {
        let data = vol.data();
        for pz in 0..s {
            let z = lo(cz) + pz as isize;
            if z < 0 || z >= dims.d as isize {
                continue;
            }
            for py in 0..s {
                let y = lo(cy) + py as isize;
                if y < 0 || y >= dims.h as isize {
                    continue;
                }
                let src = dims.index(z as usize, y as usize, x0);
                let dst = ((ch * s + pz) * s + py) * s + px0;
                out[dst..dst + (x1 - x0)].copy_from_slice(&data[src..src + (x1 - x0)]);
            }
        }
    }
}

/// The `[2, 11, 11, 11]` patch centered on voxel `(z, y, x)`.
pub fn extract_patch(case: &Case, center: [usize; 3]) -> Result<Tensor<f32>> {
    let dims = case.dims();
    let [z, y, x] = center;
    if z >= dims.d || y >= dims.h || x >= dims.w {
        return Err(Error::InvalidArgument(format!(
            "patch center {center:?} outside volume {:?}",
            dims.as_array()
        )));
    }
    let mut out = vec![0.0; PATCH_LEN];
    write_patch(case, dims.index(z, y, x), &mut out);
    Tensor::from_vec(&crate::nn::patch_shape(), out)
}

/// Extracts patches for `(case, center)` pairs into a sample-major buffer.
pub fn extract_patches(cases: &[Case], centers: &[Candidate]) -> Vec<f32> {
    let mut out = vec![0.0; centers.len() * PATCH_LEN];
    out.par_chunks_mut(PATCH_LEN)
        .zip(centers)
        .for_each(|(dst, c)| write_patch(&cases[c.case], c.center, dst));
    out
}

fn lesion_mask(case: &Case) -> Result<&crate::volume::Mask> {
    case.lesion_mask
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("case {} has no lesion annotation", case.id)))
}

fn positives(cases: &[Case]) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        let lesion = lesion_mask(case)?;
        out.extend(
            lesion
                .indices()
                .filter(|&v| case.brain_mask.get(v))
                .map(|center| Candidate { case: ci, center }),
        );
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(
            "no lesion voxels in the training cases".into(),
        ));
    }
    Ok(out)
}

/// Brain voxels outside the lesion mask, in case then raster order.
pub fn negative_candidates(cases: &[Case]) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        let lesion = lesion_mask(case)?;
        out.extend(
            case.brain_mask
                .indices()
                .filter(|&v| !lesion.get(v))
                .map(|center| Candidate { case: ci, center }),
        );
    }
    Ok(out)
}

/// Draws `k` distinct candidates, preferring `preferred` and filling any
/// shortfall from `fallback`. Returns the picks with their class source.
fn draw_negatives(
    k: usize,
    preferred: &[Candidate],
    preferred_source: PatchSource,
    fallback: &[Candidate],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Candidate, PatchSource)>> {
    if preferred.len() >= k {
        let mut idx = sample(rng, preferred.len(), k).into_vec();
        idx.sort_unstable();
        return Ok(idx
            .into_iter()
            .map(|i| (preferred[i], preferred_source))
            .collect());
    }
    let short = k - preferred.len();
    if fallback.len() < short {
        return Err(Error::EmptyDataset(format!(
            "{k} negatives needed but only {} candidates available",
            preferred.len() + fallback.len()
        )));
    }
    let mut idx = sample(rng, fallback.len(), short).into_vec();
    idx.sort_unstable();
    let mut out: Vec<_> = preferred.iter().map(|&c| (c, preferred_source)).collect();
    out.extend(
        idx.into_iter()
            .map(|i| (fallback[i], PatchSource::RandomNegative)),
    );
    Ok(out)
}

impl PatchDataset {
    fn assemble(
        cases: &[Case],
        pos: Vec<Candidate>,
        negative_pool: Vec<Candidate>,
        pool_source: PatchSource,
        fallback_pool: Vec<Candidate>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let neg = draw_negatives(
            pos.len(),
            &negative_pool,
            pool_source,
            &fallback_pool,
            &mut rng,
        )?;
        let mut provenance: Vec<Provenance> = pos
            .iter()
            .map(|c| Provenance {
                case: c.case,
                center: c.center,
                source: PatchSource::Lesion,
            })
            .collect();
        provenance.extend(neg.iter().map(|(c, s)| Provenance {
            case: c.case,
            center: c.center,
            source: *s,
        }));
        let centers: Vec<Candidate> = provenance
            .iter()
            .map(|p| Candidate {
                case: p.case,
                center: p.center,
            })
            .collect();
        let n = centers.len();
        let patches = Tensor::from_vec(
            &[n, 2, PATCH_SIZE, PATCH_SIZE, PATCH_SIZE],
            extract_patches(cases, &centers),
        )?;
        let labels = provenance
            .iter()
            .map(|p| u8::from(p.source == PatchSource::Lesion))
            .collect();
        Ok(Self {
            patches,
            labels,
            provenance,
            validation: vec![false; n],
            split: false,
            negative_pool,
            pool_source,
            fallback_pool,
            case_ids: cases.iter().map(|c| c.id.clone()).collect(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[n, 2, 11, 11, 11]`
    pub fn patches(&self) -> &Tensor<f32> {
        &self.patches
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        &self.patches.data()[i * PATCH_LEN..(i + 1) * PATCH_LEN]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn case_ids(&self) -> &[String] {
        &self.case_ids
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn negative_pool(&self) -> &[Candidate] {
        &self.negative_pool
    }

    pub fn fallback_pool(&self) -> &[Candidate] {
        &self.fallback_pool
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn is_split(&self) -> bool {
        self.split
    }

    pub fn is_validation(&self, i: usize) -> bool {
        self.validation[i]
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.validation[i]).collect()
    }

    pub fn validation_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.validation[i]).collect()
    }

    /// Copies the selected patches into a new `[k, 2, 11, 11, 11]` tensor with labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<u8>) {
        let mut data = Vec::with_capacity(indices.len() * PATCH_LEN);
        for &i in indices {
            data.extend_from_slice(self.patch(i));
        }
        let t = Tensor::from_vec(
            &[indices.len(), 2, PATCH_SIZE, PATCH_SIZE, PATCH_SIZE],
            data,
        )
        .expect("patch batch");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Stratified train/validation split. In each class `round(n_c * fraction)`
    /// patches (at least one, at most `n_c - 1`) go to validation.
    pub fn split_validation(&mut self, fraction: f64, seed: u64) -> Result<()> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction {fraction} outside (0, 1)"
            )));
        }
        if self.len() < 8 {
            return Err(Error::EmptyDataset(format!(
                "{} patches are too few to split (need 8)",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.validation.fill(false);
        for class in [1u8, 0] {
            let mut idx: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] == class)
                .collect();
            if idx.len() < 2 {
                return Err(Error::EmptyDataset(format!(
                    "class {class} has {} patches, need 2 to split",
                    idx.len()
                )));
            }
            let k = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
            idx.shuffle(&mut rng);
            for &i in &idx[..k] {
                self.validation[i] = true;
            }
        }
        self.split = true;
        Ok(())
    }

    /// At epochs that are positive multiples of `period`, redraws the training
    /// negatives from the stored pools; validation patches and their centers are
    /// left alone. Returns the indices whose patches changed.
    pub fn resample_negatives(
        &mut self,
        cases: &[Case],
        epoch: usize,
        period: usize,
    ) -> Result<Vec<usize>> {
        if period == 0 || epoch == 0 || epoch % period != 0 {
            return Ok(Vec::new());
        }
        self.check_cases(cases)?;
        let slots: Vec<usize> = (0..self.len())
            .filter(|&i| self.labels[i] == 0 && !self.validation[i])
            .collect();
        if slots.is_empty() {
            return Ok(Vec::new());
        }
        let held: std::collections::HashSet<Candidate> = (0..self.len())
            .filter(|&i| self.labels[i] == 0 && self.validation[i])
            .map(|i| Candidate {
                case: self.provenance[i].case,
                center: self.provenance[i].center,
            })
            .collect();
        let keep = |pool: &[Candidate]| -> Vec<Candidate> {
            pool.iter().copied().filter(|c| !held.contains(c)).collect()
        };
        let preferred = keep(&self.negative_pool);
        let fallback = keep(&self.fallback_pool);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ RESAMPLE_SALT);
        rng.set_stream(epoch as u64);
        let drawn = draw_negatives(
            slots.len(),
            &preferred,
            self.pool_source,
            &fallback,
            &mut rng,
        )?;
        let centers: Vec<Candidate> = drawn.iter().map(|(c, _)| *c).collect();
        let fresh = extract_patches(cases, &centers);
        let data = self.patches.data_mut();
        for ((&slot, (c, source)), patch) in
            slots.iter().zip(&drawn).zip(fresh.chunks_exact(PATCH_LEN))
        {
            data[slot * PATCH_LEN..(slot + 1) * PATCH_LEN].copy_from_slice(patch);
            self.provenance[slot] = Provenance {
                case: c.case,
                center: c.center,
                source: *source,
            };
        }
        Ok(slots)
    }

    fn check_cases(&self, cases: &[Case]) -> Result<()> {
        if cases.len() != self.case_ids.len()
            || cases.iter().zip(&self.case_ids).any(|(c, id)| &c.id != id)
        {
            return Err(Error::InvalidArgument(
                "cases passed for resampling differ from the ones the dataset was built from"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Serializes the dataset: text header with counts, seed, case ids,
    /// provenance and pools, then the patch payload and its SHA-256 digest.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut h = format!(
            "{CACHE_MAGIC}\nversion {CACHE_VERSION}\nseed {}\n",
            self.seed
        );
        h += &format!(
            "split {}\ncases {}\n",
            u8::from(self.split),
            self.case_ids.len()
        );
        for id in &self.case_ids {
            if id.is_empty() || id.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!(
                    "case id {id:?} cannot be stored in a dataset cache"
                )));
            }
            h += &format!("case {id}\n");
        }
        h += &format!("patches {}\n", self.len());
        for (p, &v) in self.provenance.iter().zip(&self.validation) {
            h += &format!(
                "patch {} {} {} {}\n",
                p.case,
                p.center,
                p.source.name(),
                u8::from(v)
            );
        }
        h += &format!(
            "pool {} {}\n",
            self.pool_source.name(),
            self.negative_pool.len()
        );
        for c in &self.negative_pool {
            h += &format!("{} {}\n", c.case, c.center);
        }
        h += &format!("fallback {}\n", self.fallback_pool.len());
        for c in &self.fallback_pool {
            h += &format!("{} {}\n", c.case, c.center);
        }
        let payload: Vec<u8> = self
            .patches
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        h += &format!("payload_bytes {}\nend\n", payload.len());
        let io = |e| Error::io("<dataset stream>", e);
        w.write_all(h.as_bytes()).map_err(io)?;
        w.write_all(&payload).map_err(io)?;
        w.write_all(&Sha256::digest(&payload)).map_err(io)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let lines = read_header(&mut r, "dataset")?;
        let mut it = lines.iter().map(String::as_str);
        let mut next = || {
            it.next()
                .ok_or_else(|| Error::Format("truncated dataset header".into()))
        };
        if next()? != CACHE_MAGIC {
            return Err(Error::Format("not a patch dataset cache".into()));
        }
        let version: u32 = parse(field(next()?, "version")?, "version")?;
        if version != CACHE_VERSION {
            return Err(Error::Version {
                expected: CACHE_VERSION,
                found: version,
            });
        }
        let seed: u64 = parse(field(next()?, "seed")?, "seed")?;
        let split = field(next()?, "split")? == "1";
        let n_cases: usize = parse(field(next()?, "cases")?, "case count")?;
        let case_ids = (0..n_cases)
            .map(|_| Ok(field(next()?, "case")?.to_string()))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = parse(field(next()?, "patches")?, "patch count")?;
        let mut provenance = Vec::with_capacity(n);
        let mut validation = Vec::with_capacity(n);
        for _ in 0..n {
            let rec: Vec<&str> = field(next()?, "patch")?.split(' ').collect();
            let [case, center, source, val] = rec[..] else {
                return Err(Error::Format(format!("bad patch record {rec:?}")));
            };
            let case: usize = parse(case, "case index")?;
            if case >= n_cases {
                return Err(Error::Format(format!("case index {case} out of range")));
            }
            provenance.push(Provenance {
                case,
                center: parse(center, "center")?,
                source: PatchSource::parse(source)?,
            });
            validation.push(val == "1");
        }
        let mut pool = |key: &str| -> Result<(String, Vec<Candidate>)> {
            let rec = field(next()?, key)?;
            let (tag, count) = rec.rsplit_once(' ').unwrap_or(("", rec));
            let count: usize = parse(count, "pool size")?;
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let line = next()?;
                let (a, b) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::Format(format!("bad candidate {line:?}")))?;
                out.push(Candidate {
                    case: parse(a, "case index")?,
                    center: parse(b, "center")?,
                });
            }
            Ok((tag.to_string(), out))
        };
        let (tag, negative_pool) = pool("pool")?;
        let (_, fallback_pool) = pool("fallback")?;
        let payload_len: usize = parse(field(next()?, "payload_bytes")?, "payload size")?;
        if payload_len != n * PATCH_LEN * 4 {
            return Err(Error::Format(format!(
                "payload size {payload_len} disagrees with {n} patches"
            )));
        }
        let mut payload = vec![0u8; payload_len];
        let mut digest = [0u8; 32];
        r.read_exact(&mut payload)
            .and_then(|_| r.read_exact(&mut digest))
            .map_err(|_| Error::Format("truncated dataset payload".into()))?;
        if Sha256::digest(&payload).as_slice() != digest {
            return Err(Error::Checksum("dataset payload".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let labels = provenance
            .iter()
            .map(|p| u8::from(p.source == PatchSource::Lesion))
            .collect();
        Ok(Self {
            patches: Tensor::from_vec(&[n, 2, PATCH_SIZE, PATCH_SIZE, PATCH_SIZE], data)?,
            labels,
            provenance,
            validation,
            split,
            negative_pool,
            pool_source: PatchSource::parse(&tag)?,
            fallback_pool,
            case_ids,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file)
    }
}

/// Every lesion voxel as a positive plus as many negatives drawn uniformly
/// without replacement from brain voxels outside the lesions.
pub fn build_stage1_dataset(cases: &[Case], seed: u64) -> Result<PatchDataset> {
    let pos = positives(cases)?;
    let pool = negative_candidates(cases)?;
    PatchDataset::assemble(
        cases,
        pos,
        pool,
        PatchSource::RandomNegative,
        Vec::new(),
        seed,
    )
}

/// Stage-1 lesion probability for every brain voxel of `case` (0 elsewhere).
pub fn brain_probabilities(
    model: &Model<f32>,
    case: &Case,
    cache: Option<&FeatureCache>,
) -> Vec<f32> {
    let mut out = vec![0.0; case.dims().len()];
    let brain: Vec<usize> = case.brain_mask.indices().collect();
    for chunk in brain.chunks(crate::cascade::INFER_BATCH) {
        for (&v, p) in chunk.iter().zip(lesion_scores(model, case, chunk, cache)) {
            out[v] = p;
        }
    }
    out
}

/// Stage-2 dataset: negatives are the stage-1 false positives of the training
/// cases, topped up with random brain negatives when there are too few.
pub fn build_stage2_dataset(
    cases: &[Case],
    stage1: &Model<f32>,
    seed: u64,
    cache: Option<&FeatureCache>,
) -> Result<PatchDataset> {
    let probs: Vec<Vec<f32>> = cases
        .iter()
        .map(|c| brain_probabilities(stage1, c, cache))
        .collect();
    build_stage2_dataset_from_probabilities(cases, &probs, seed)
}

/// As [`build_stage2_dataset`] with precomputed stage-1 probability maps.
pub fn build_stage2_dataset_from_probabilities(
    cases: &[Case],
    probs: &[Vec<f32>],
    seed: u64,
) -> Result<PatchDataset> {
    if probs.len() != cases.len()
        || cases
            .iter()
            .zip(probs)
            .any(|(c, p)| p.len() != c.dims().len())
    {
        return Err(Error::InvalidArgument(
            "one probability map per case and voxel is required".into(),
        ));
    }
    let pos = positives(cases)?;
    let (fp, rest): (Vec<Candidate>, Vec<Candidate>) = negative_candidates(cases)?
        .into_iter()
        .partition(|c| probs[c.case][c.center] >= FP_THRESHOLD);
    if fp.len() < pos.len() {
        log::info!(
            "{} stage-1 false positives for {} lesion voxels; filling with random negatives",
            fp.len(),
            pos.len()
        );
    }
    PatchDataset::assemble(cases, pos, fp, PatchSource::FpNegative, rest, seed)
}

/// Number of voxels in a patch window that fall outside a volume of `dims` for
/// a center at `(z, y, x)`.
pub fn padded_voxels(dims: Dims3, center: [usize; 3]) -> usize {
    let inside = |c: usize, n: usize| (c + HALF + 1).min(n) - c.saturating_sub(HALF);
    let [z, y, x] = center;
    PATCH_SIZE.pow(3) - inside(z, dims.d) * inside(y, dims.h) * inside(x, dims.w)
}
