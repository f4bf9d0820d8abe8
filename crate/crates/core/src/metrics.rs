//! Voxel overlap and lesion-detection metrics, connected components and reports.
//!
//! Scores are fractions in `[0, 1]`. A region counts as detected when it
//! overlaps the other mask in at least one voxel (see [`MatchRule`]); this
//! matching criterion is an assumption, as is the convention that empty
//! references score 1.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::cascade::{CascadeModel, FeatureCache};
use crate::error::{Error, Result};
use crate::ops::Dims3;
use crate::volume::{Case, Mask};

/// Voxel neighborhood used to join regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn value(self) -> u8 {
        match self {
            Self::Six => 6,
            Self::Eighteen => 18,
            Self::TwentySix => 26,
        }
    }

    pub fn from_value(v: u32) -> Result<Self> {
        match v {
            6 => Ok(Self::Six),
            18 => Ok(Self::Eighteen),
            26 => Ok(Self::TwentySix),
            _ => Err(Error::InvalidArgument(format!(
                "connectivity must be 6, 18 or 26, got {v}"
            ))),
        }
    }

    /// Neighbor offsets `(dz, dy, dx)`.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Self::Six => 1,
            Self::Eighteen => 2,
            Self::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let nz = [dz, dy, dx].iter().filter(|&&v| v != 0).count();
                    if nz > 0 && nz <= max_nonzero {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

impl FromStr for Connectivity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let v = s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad connectivity {s:?}")))?;
        Self::from_value(v)
    }
}

/// Component labels (0 = background, regions numbered 1..=k in raster order of
/// their first voxel) and region sizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionLabeling {
    pub dims: Dims3,
    pub labels: Vec<u32>,
    /// `sizes[r - 1]` is the voxel count of region `r`.
    pub sizes: Vec<usize>,
    pub connectivity: Connectivity,
}

impl RegionLabeling {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> RegionLabeling {
    let dims = mask.dims();
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; dims.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..dims.len() {
        if !mask.get(start) || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(v) = queue.pop_front() {
            size += 1;
            let (z, y, x) = dims.coords(v);
            for [dz, dy, dx] in &offsets {
                let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                if nz < 0
                    || ny < 0
                    || nx < 0
                    || nz >= dims.d as isize
                    || ny >= dims.h as isize
                    || nx >= dims.w as isize
                {
                    continue;
                }
                let n = dims.index(nz as usize, ny as usize, nx as usize);
                if mask.get(n) && labels[n] == 0 {
                    labels[n] = label;
                    queue.push_back(n);
                }
            }
        }
        sizes.push(size);
    }
    RegionLabeling {
        dims,
        labels,
        sizes,
        connectivity,
    }
}

/// When a region counts as detected by the other mask.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum MatchRule {
    /// At least one overlapping voxel.
    #[default]
    AnyOverlap,
    /// At least this fraction of the region's voxels overlap.
    Fraction(f64),
}

impl MatchRule {
    fn matches(self, overlap: usize, size: usize) -> bool {
        match self {
            Self::AnyOverlap => overlap >= 1,
            Self::Fraction(f) => overlap >= 1 && overlap as f64 >= f * size as f64,
        }
    }
}

/// Voxel and region tallies between a reference and a segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Tallies {
    pub tp_s: usize,
    pub fp_s: usize,
    pub fn_s: usize,
    /// Reference regions detected by the segmentation.
    pub tp_d_ref: usize,
    pub fn_d: usize,
    /// Segmented regions touching the reference.
    pub tp_d_seg: usize,
    pub fp_d: usize,
}

fn same_grid(gt: &Mask, seg: &Mask) -> Result<()> {
    if gt.dims() != seg.dims() {
        return Err(Error::shape(
            "metric masks",
            &gt.dims().as_array(),
            &seg.dims().as_array(),
        ));
    }
    Ok(())
}

/// Regions of `a` detected by `b`: `(matched, total)`.
fn detected(a: &Mask, b: &Mask, connectivity: Connectivity, rule: MatchRule) -> (usize, usize) {
    let lab = connected_components(a, connectivity);
    let mut overlap = vec![0usize; lab.count()];
    for (i, &l) in lab.labels.iter().enumerate() {
        if l != 0 && b.get(i) {
            overlap[l as usize - 1] += 1;
        }
    }
    let matched = overlap
        .iter()
        .zip(&lab.sizes)
        .filter(|(&o, &s)| rule.matches(o, s))
        .count();
    (matched, lab.count())
}

pub fn tallies(
    gt: &Mask,
    seg: &Mask,
    connectivity: Connectivity,
    rule: MatchRule,
) -> Result<Tallies> {
    same_grid(gt, seg)?;
    let mut t = Tallies::default();
    for (&g, &s) in gt.voxels().iter().zip(seg.voxels()) {
        match (g, s) {
            (true, true) => t.tp_s += 1,
            (false, true) => t.fp_s += 1,
            (true, false) => t.fn_s += 1,
            _ => {}
        }
    }
    let (tp, n) = detected(gt, seg, connectivity, rule);
    t.tp_d_ref = tp;
    t.fn_d = n - tp;
    let (tp, n) = detected(seg, gt, connectivity, rule);
    t.tp_d_seg = tp;
    t.fp_d = n - tp;
    Ok(t)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Tallies {
    pub fn dsc(&self) -> f64 {
        ratio(2 * self.tp_s, self.fn_s + self.fp_s + 2 * self.tp_s)
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp_d_ref, self.tp_d_ref + self.fn_d)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp_d_seg, self.tp_d_seg + self.fp_d)
    }
}

/// `2 TP / (FN + FP + 2 TP)`; 1 when both masks are empty.
pub fn dsc(gt: &Mask, seg: &Mask) -> Result<f64> {
    same_grid(gt, seg)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&g, &s) in gt.voxels().iter().zip(seg.voxels()) {
        tp += usize::from(g && s);
        fp += usize::from(!g && s);
        fn_ += usize::from(g && !s);
    }
    Ok(ratio(2 * tp, fn_ + fp + 2 * tp))
}

/// Fraction of reference regions hit by the segmentation; 1 for an empty reference.
pub fn lesion_sensitivity(gt: &Mask, seg: &Mask, connectivity: Connectivity) -> Result<f64> {
    same_grid(gt, seg)?;
    let (tp, n) = detected(gt, seg, connectivity, MatchRule::AnyOverlap);
    Ok(ratio(tp, n))
}

/// Fraction of segmented regions touching the reference; 1 for an empty segmentation.
pub fn lesion_precision(gt: &Mask, seg: &Mask, connectivity: Connectivity) -> Result<f64> {
    same_grid(gt, seg)?;
    let (tp, n) = detected(seg, gt, connectivity, MatchRule::AnyOverlap);
    Ok(ratio(tp, n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub id: String,
    pub dsc: f64,
    pub sensitivity: f64,
    pub precision: f64,
    pub tallies: Tallies,
}

impl CaseMetrics {
    pub fn compare(
        id: impl Into<String>,
        gt: &Mask,
        seg: &Mask,
        connectivity: Connectivity,
        rule: MatchRule,
    ) -> Result<Self> {
        let t = tallies(gt, seg, connectivity, rule)?;
        Ok(Self {
            id: id.into(),
            dsc: t.dsc(),
            sensitivity: t.sensitivity(),
            precision: t.precision(),
            tallies: t,
        })
    }
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

impl fmt::Display for Summary {
    /// `mean (std)` with two decimals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ({:.2})", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
}

const COLUMNS: [&str; 11] = [
    "case",
    "dsc",
    "sensitivity",
    "precision",
    "tp_s",
    "fp_s",
    "fn_s",
    "tp_d_ref",
    "fn_d",
    "tp_d_seg",
    "fp_d",
];

impl MetricsReport {
    pub fn dsc(&self) -> Summary {
        Summary::of(&self.cases.iter().map(|c| c.dsc).collect::<Vec<_>>())
    }

    pub fn sensitivity(&self) -> Summary {
        Summary::of(&self.cases.iter().map(|c| c.sensitivity).collect::<Vec<_>>())
    }

    pub fn precision(&self) -> Summary {
        Summary::of(&self.cases.iter().map(|c| c.precision).collect::<Vec<_>>())
    }

    /// Per-case rows followed by `mean` and `std` rows.
    pub fn to_dsv(&self, delimiter: char) -> String {
        let d = delimiter.to_string();
        let mut out = COLUMNS.join(&d) + "\n";
        for c in &self.cases {
            let t = &c.tallies;
            let row = [
                c.id.clone(),
                format!("{:.6}", c.dsc),
                format!("{:.6}", c.sensitivity),
                format!("{:.6}", c.precision),
                t.tp_s.to_string(),
                t.fp_s.to_string(),
                t.fn_s.to_string(),
                t.tp_d_ref.to_string(),
                t.fn_d.to_string(),
                t.tp_d_seg.to_string(),
                t.fp_d.to_string(),
            ];
            out += &(row.join(&d) + "\n");
        }
        let (a, b, c) = (self.dsc(), self.sensitivity(), self.precision());
        for (name, pick) in [("mean", 0), ("std", 1)] {
            let v = |s: Summary| format!("{:.6}", if pick == 0 { s.mean } else { s.std });
            let mut row = vec![name.to_string(), v(a), v(b), v(c)];
            row.resize(COLUMNS.len(), String::new());
            out += &(row.join(&d) + "\n");
        }
        out
    }

    /// Aligned human-readable table ending in a `mean (std)` row.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 4]> =
            vec![["case", "DSC", "sensitivity", "precision"].map(String::from)];
        for c in &self.cases {
            rows.push([
                c.id.clone(),
                format!("{:.2}", c.dsc),
                format!("{:.2}", c.sensitivity),
                format!("{:.2}", c.precision),
            ]);
        }
        rows.push([
            "mean (std)".into(),
            self.dsc().to_string(),
            self.sensitivity().to_string(),
            self.precision().to_string(),
        ]);
        let widths: Vec<usize> = (0..4)
            .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
            .collect();
        rows.iter()
            .map(|r| {
                let cells: Vec<String> = r
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect();
                cells.join("  ").trim_end().to_string() + "\n"
            })
            .collect()
    }
}

/// Reference masks for [`evaluate`].
#[derive(Clone, Copy, Debug)]
pub enum Reference<'a> {
    /// The lesion annotation carried by each case.
    Expert,
    /// Externally produced masks, one per case in order (for example the
    /// segmentations of another model).
    Silver(&'a [Mask]),
}

/// Segments every case with `model` and scores it against `reference`, using
/// the model's postprocessing connectivity and the any-overlap region rule.
pub fn evaluate(
    model: &CascadeModel,
    cases: &[Case],
    reference: Reference<'_>,
) -> Result<MetricsReport> {
    evaluate_inner(model, cases, reference, None)
}

/// As [`evaluate`], reusing convolutional features through `cache`.
pub fn evaluate_cached(
    model: &CascadeModel,
    cases: &[Case],
    reference: Reference<'_>,
    cache: &FeatureCache,
) -> Result<MetricsReport> {
    evaluate_inner(model, cases, reference, Some(cache))
}

fn evaluate_inner(
    model: &CascadeModel,
    cases: &[Case],
    reference: Reference<'_>,
    cache: Option<&FeatureCache>,
) -> Result<MetricsReport> {
    let refs: Vec<&Mask> = match reference {
        Reference::Expert => cases
            .iter()
            .map(|c| {
                c.lesion_mask.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("case {} has no lesion annotation", c.id))
                })
            })
            .collect::<Result<_>>()?,
        Reference::Silver(masks) => {
            if masks.len() != cases.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} silver masks for {} cases",
                    masks.len(),
                    cases.len()
                )));
            }
            masks.iter().collect()
        }
    };
    let connectivity = model.post.connectivity;
    let rows = cases
        .par_iter()
        .zip(refs)
        .map(|(case, gt)| {
            let seg = match cache {
                Some(c) => model.segment_cached(case, c)?,
                None => model.segment(case)?,
            };
            CaseMetrics::compare(
                case.id.clone(),
                gt,
                &seg,
                connectivity,
                MatchRule::AnyOverlap,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport { cases: rows })
}
