//! Two-network cascade: training, gated inference and postprocessing.
//!
//! Container layout: a text manifest (`key value` lines, terminated by `end`)
//! holding the postprocessing parameters, the stage-1 gate, provenance entries
//! and the byte lengths of the two model containers that follow it.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Mutex;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{connected_components, Connectivity};
use crate::nn::container::{field, parse, read_header};
use crate::nn::{self, Model, TrainConfig, TrainHistory, PATCH_LEN};
use crate::patches::{self, Candidate};
use crate::volume::{Case, Mask, Volume};

/// Brain voxels scored per inference batch.
pub const INFER_BATCH: usize = 8192;
/// Net-1 probability below which a voxel is discarded before net 2.
pub const STAGE1_THRESHOLD: f32 = 0.5;

const MAGIC: &str = "MSSEG-CASCADE";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostprocessConfig {
    pub t_bin: f32,
    /// Components with fewer voxels are removed.
    pub l_min: usize,
    pub connectivity: Connectivity,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            t_bin: 0.5,
            l_min: 10,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_bin > 0.0 && self.t_bin < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "t_bin {} outside (0, 1)",
                self.t_bin
            )));
        }
        if self.l_min < 1 {
            return Err(Error::InvalidArgument("l_min must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    pub train: TrainConfig,
    pub post: PostprocessConfig,
    pub stage1_threshold: f32,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            post: PostprocessConfig::default(),
            stage1_threshold: STAGE1_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel {
    pub net1: Model<f32>,
    pub net2: Model<f32>,
    pub post: PostprocessConfig,
    pub stage1_threshold: f32,
    /// Free-form training metadata (source cases, seeds, configuration).
    pub provenance: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeHistory {
    pub stage1: TrainHistory,
    pub stage2: TrainHistory,
}

/// Independent sub-seed `stream` of `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

pub(crate) fn describe_train(cfg: &TrainConfig, out: &mut BTreeMap<String, String>, prefix: &str) {
    let mut put = |k: &str, v: String| {
        out.insert(format!("{prefix}{k}"), v);
    };
    put("max_epochs", cfg.max_epochs.to_string());
    put("patience", cfg.patience.to_string());
    put("batch_size", cfg.batch_size.to_string());
    put("validation_fraction", cfg.validation_fraction.to_string());
    put(
        "negative_resample_period",
        cfg.negative_resample_period.to_string(),
    );
    put("rho", cfg.rho.to_string());
    put("epsilon", cfg.epsilon.to_string());
    put("seed", cfg.seed.to_string());
}

/// Trains net 1 on lesion voxels against random brain voxels, then net 2 on
/// lesion voxels against the false positives of net 1 on the same cases.
pub fn train_cascade(
    cases: &[Case],
    config: &CascadeConfig,
) -> Result<(CascadeModel, CascadeHistory)> {
    config.post.validate()?;
    if cases.is_empty() {
        return Err(Error::EmptyDataset("no training cases".into()));
    }
    let seed = config.train.seed;
    let stage_cfg = |stage: u64| TrainConfig {
        seed: derive_seed(seed, 10 + stage),
        ..config.train.clone()
    };

    let mut net1 = Model::canonical(derive_seed(seed, 1));
    let mut d1 = patches::build_stage1_dataset(cases, derive_seed(seed, 3))?;
    log::info!("stage 1: {} patches from {} cases", d1.len(), cases.len());
    let h1 = nn::train(&mut net1, &mut d1, Some(cases), &stage_cfg(1))?;
    drop(d1);

    let mut net2 = Model::canonical(derive_seed(seed, 2));
    let mut d2 = patches::build_stage2_dataset(cases, &net1, derive_seed(seed, 4), None)?;
    log::info!(
        "stage 2: {} patches, {} false-positive candidates",
        d2.len(),
        d2.negative_pool().len()
    );
    let h2 = nn::train(&mut net2, &mut d2, Some(cases), &stage_cfg(2))?;

    let mut provenance = BTreeMap::new();
    provenance.insert("procedure".into(), "train_cascade".into());
    provenance.insert(
        "cases".into(),
        cases
            .iter()
            .map(|c| c.id.as_str())
            .collect::<Vec<_>>()
            .join(","),
    );
    describe_train(&config.train, &mut provenance, "train.");
    let model = CascadeModel {
        net1,
        net2,
        post: config.post,
        stage1_threshold: config.stage1_threshold,
        provenance,
    };
    Ok((
        model,
        CascadeHistory {
            stage1: h1,
            stage2: h2,
        },
    ))
}

/// Per-voxel probabilities of both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    pub stage1: Volume,
    pub probability: Volume,
}

impl CascadeModel {
    /// Scores every brain voxel with net 1; voxels reaching the stage-1
    /// threshold are rescored by net 2, all others (and non-brain voxels) get 0.
    pub fn infer_detailed(&self, case: &Case) -> Result<CascadeOutput> {
        self.infer_batched(case, INFER_BATCH)
    }

    pub fn infer_batched(&self, case: &Case, batch: usize) -> Result<CascadeOutput> {
        self.run_inference(case, batch, None)
    }

    /// As [`Self::infer_detailed`], reusing convolutional features from `cache`.
    pub fn infer_cached(&self, case: &Case, cache: &FeatureCache) -> Result<CascadeOutput> {
        self.run_inference(case, INFER_BATCH, Some(cache))
    }

    fn run_inference(
        &self,
        case: &Case,
        batch: usize,
        cache: Option<&FeatureCache>,
    ) -> Result<CascadeOutput> {
        if batch == 0 {
            return Err(Error::InvalidArgument(
                "inference batch must be positive".into(),
            ));
        }
        let dims = case.dims();
        let mut p1 = vec![0.0f32; dims.len()];
        let mut p2 = vec![0.0f32; dims.len()];
        let brain: Vec<usize> = case.brain_mask.indices().collect();
        for chunk in brain.chunks(batch) {
            let probs = lesion_scores(&self.net1, case, chunk, cache);
            let mut keep = Vec::new();
            for (&v, &p) in chunk.iter().zip(&probs) {
                p1[v] = p;
                if p >= self.stage1_threshold {
                    keep.push(v);
                }
            }
            if keep.is_empty() {
                continue;
            }
            for (&v, p) in keep
                .iter()
                .zip(lesion_scores(&self.net2, case, &keep, cache))
            {
                p2[v] = p;
            }
        }
        let spacing = case.flair.spacing();
        Ok(CascadeOutput {
            stage1: Volume::new(dims, p1, spacing)?.with_origin(case.flair.origin()),
            probability: Volume::new(dims, p2, spacing)?.with_origin(case.flair.origin()),
        })
    }

    /// Segmentation through a feature cache.
    pub fn segment_cached(&self, case: &Case, cache: &FeatureCache) -> Result<Mask> {
        postprocess(&self.infer_cached(case, cache)?.probability, &self.post)
    }

    /// Final lesion probability map.
    pub fn infer(&self, case: &Case) -> Result<Volume> {
        Ok(self.infer_detailed(case)?.probability)
    }

    /// Binary segmentation: inference followed by postprocessing.
    pub fn segment(&self, case: &Case) -> Result<Mask> {
        postprocess(&self.infer(case)?, &self.post)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        nn::write_model(&self.net1, &mut a)?;
        nn::write_model(&self.net2, &mut b)?;
        let mut h = format!("{MAGIC}\nversion {VERSION}\n");
        h += &format!(
            "t_bin {}\nl_min {}\nconnectivity {}\n",
            self.post.t_bin, self.post.l_min, self.post.connectivity
        );
        h += &format!("stage1_threshold {}\n", self.stage1_threshold);
        for (k, v) in &self.provenance {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::InvalidArgument(format!(
                    "provenance entry {k:?} cannot be stored"
                )));
            }
            h += &format!("meta {k} {v}\n");
        }
        h += &format!("net1_bytes {}\nnet2_bytes {}\nend\n", a.len(), b.len());
        let io = |e| Error::io("<cascade stream>", e);
        w.write_all(h.as_bytes()).map_err(io)?;
        w.write_all(&a).map_err(io)?;
        w.write_all(&b).map_err(io)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let lines = read_header(&mut r, "cascade")?;
        let mut it = lines.iter().map(String::as_str).peekable();
        if it.next() != Some(MAGIC) {
            return Err(Error::Format("not a cascade container".into()));
        }
        let mut next = || {
            it.next()
                .ok_or_else(|| Error::Format("truncated cascade manifest".into()))
        };
        let version: u32 = parse(field(next()?, "version")?, "version")?;
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: version,
            });
        }
        let t_bin: f32 = parse(field(next()?, "t_bin")?, "t_bin")?;
        let l_min: usize = parse(field(next()?, "l_min")?, "l_min")?;
        let connectivity: Connectivity = field(next()?, "connectivity")?.parse()?;
        let stage1_threshold: f32 = parse(field(next()?, "stage1_threshold")?, "stage1_threshold")?;
        let mut provenance = BTreeMap::new();
        let mut line = next()?;
        while let Ok(rec) = field(line, "meta") {
            let (k, v) = rec.split_once(' ').unwrap_or((rec, ""));
            provenance.insert(k.to_string(), v.to_string());
            line = next()?;
        }
        let n1: usize = parse(field(line, "net1_bytes")?, "net1 size")?;
        let n2: usize = parse(field(next()?, "net2_bytes")?, "net2 size")?;
        let mut a = vec![0u8; n1];
        let mut b = vec![0u8; n2];
        r.read_exact(&mut a)
            .and_then(|_| r.read_exact(&mut b))
            .map_err(|_| Error::Format("truncated cascade payload".into()))?;
        if !r
            .fill_buf()
            .map_err(|e| Error::io("<cascade stream>", e))?
            .is_empty()
        {
            return Err(Error::Format("trailing bytes after cascade payload".into()));
        }
        let post = PostprocessConfig {
            t_bin,
            l_min,
            connectivity,
        };
        post.validate()?;
        Ok(Self {
            net1: nn::read_model(a.as_slice())?,
            net2: nn::read_model(b.as_slice())?,
            post,
            stage1_threshold,
            provenance,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file)
    }
}

type Digest32 = [u8; 32];

/// Convolutional features keyed by the convolutional weights that produced
/// them, the case contents and the patch center.
///
/// Models adapted from a common source share their convolutional stage, so
/// evaluating several of them on one case set only runs the convolutions once.
#[derive(Debug, Default)]
pub struct FeatureCache {
    entries: Mutex<HashMap<(Digest32, Digest32), HashMap<usize, Vec<f32>>>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of cached feature vectors.
    pub fn len(&self) -> usize {
        self.entries
            .lock()
            .expect("cache lock")
            .values()
            .map(HashMap::len)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Features `[centers.len()][feature_len]` of `model` for `case`.
    pub fn features(&self, model: &Model<f32>, case: &Case, centers: &[usize]) -> Vec<f32> {
        let key = (conv_digest(model), case_digest(case));
        let missing: Vec<usize> = {
            let entries = self.entries.lock().expect("cache lock");
            let known = entries.get(&key);
            let mut m: Vec<usize> = centers
                .iter()
                .copied()
                .filter(|c| known.map_or(true, |k| !k.contains_key(c)))
                .collect();
            m.sort_unstable();
            m.dedup();
            m
        };
        let len = model.feature_len();
        if !missing.is_empty() {
            let fresh = conv_features(model, case, &missing);
            let mut entries = self.entries.lock().expect("cache lock");
            let slot = entries.entry(key).or_default();
            for (&c, row) in missing.iter().zip(fresh.chunks_exact(len)) {
                slot.insert(c, row.to_vec());
            }
        }
        let entries = self.entries.lock().expect("cache lock");
        let slot = &entries[&key];
        let mut out = Vec::with_capacity(centers.len() * len);
        for c in centers {
            out.extend_from_slice(&slot[c]);
        }
        out
    }
}

fn conv_digest(model: &Model<f32>) -> Digest32 {
    let mut h = Sha256::new();
    for layer in 0..model.feature_boundary() {
        h.update(format!("{:?}", model.layers()[layer]).as_bytes());
        for t in model.params(layer) {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().into()
}

fn case_digest(case: &Case) -> Digest32 {
    let mut h = Sha256::new();
    for d in case.dims().as_array() {
        h.update((d as u64).to_le_bytes());
    }
    for v in case.flair.data().iter().chain(case.t1.data()) {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

fn conv_features(model: &Model<f32>, case: &Case, centers: &[usize]) -> Vec<f32> {
    let cands: Vec<Candidate> = centers
        .iter()
        .map(|&center| Candidate { case: 0, center })
        .collect();
    model.features_raw(
        &patches::extract_patches(std::slice::from_ref(case), &cands),
        centers.len(),
    )
}

/// Lesion probability of `model` at each voxel index in `centers`.
pub(crate) fn lesion_scores(
    model: &Model<f32>,
    case: &Case,
    centers: &[usize],
    cache: Option<&FeatureCache>,
) -> Vec<f32> {
    let logits = match cache {
        Some(cache) => {
            let f = cache.features(model, case, centers);
            model.infer_from(
                model.feature_boundary(),
                &f,
                centers.len(),
                model.feature_len(),
            )
        }
        None => {
            let cands: Vec<Candidate> = centers
                .iter()
                .map(|&center| Candidate { case: 0, center })
                .collect();
            let x = patches::extract_patches(std::slice::from_ref(case), &cands);
            model.infer_from(0, &x, centers.len(), PATCH_LEN)
        }
    };
    nn::lesion_probabilities(&logits)
}

/// Thresholds at `>= t_bin` and removes connected components smaller than `l_min`.
pub fn postprocess(prob: &Volume, config: &PostprocessConfig) -> Result<Mask> {
    config.validate()?;
    let binary = prob.threshold(config.t_bin);
    let lab = connected_components(&binary, config.connectivity);
    let mut out = binary;
    for (v, &l) in out.voxels_mut().iter_mut().zip(&lab.labels) {
        if l != 0 && lab.sizes[l as usize - 1] < config.l_min {
            *v = false;
        }
    }
    Ok(out)
}
