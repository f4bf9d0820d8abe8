//! Synthetic two-modality brain phantoms with ellipsoidal lesions.
//!
//! A phantom is a brain ellipsoid holding a white-matter core, a grey-matter
//! shell and a central ventricle. Lesions are non-touching ellipsoids inside
//! the white matter, hyperintense on FLAIR and hypointense on T1-w. A
//! [`DomainSpec`] turns the tissue map into intensities, so the same phantom
//! seed rendered in two domains shares its ground truth exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::cascade::derive_seed;
use crate::error::{Error, Result};
use crate::ops::Dims3;
use crate::volume::{Case, Mask, RawCase, Volume};

/// Tissue classes, in the order used by [`Contrast::tissues`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tissue {
    Background = 0,
    Csf = 1,
    GreyMatter = 2,
    WhiteMatter = 3,
    Lesion = 4,
}

impl Tissue {
    pub const ALL: [Tissue; 5] = [
        Tissue::Background,
        Tissue::Csf,
        Tissue::GreyMatter,
        Tissue::WhiteMatter,
        Tissue::Lesion,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intensity {
    pub mean: f32,
    /// Per-voxel variation within the class.
    pub std: f32,
}

impl Intensity {
    pub const fn new(mean: f32, std: f32) -> Self {
        Self { mean, std }
    }
}

/// One modality of a domain: per-tissue intensities and a global affine remap.
#[derive(Clone, Debug, PartialEq)]
pub struct Contrast {
    /// Indexed by [`Tissue`].
    pub tissues: [Intensity; 5],
    pub gain: f32,
    pub offset: f32,
}

impl Contrast {
    fn validate(&self, what: &str) -> Result<()> {
        if !(self.gain > 0.0 && self.gain.is_finite()) || !self.offset.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{what}: gain must be positive and finite"
            )));
        }
        if self
            .tissues
            .iter()
            .any(|t| !t.mean.is_finite() || !(t.std >= 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "{what}: tissue means must be finite, stds non-negative"
            )));
        }
        Ok(())
    }
}

/// Acquisition characteristics of one imaging domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: String,
    pub flair: Contrast,
    pub t1: Contrast,
    /// Standard deviation of additive Gaussian noise, before the affine remap.
    pub noise_std: f32,
    /// Radius of a box filter applied to the noiseless image; 0 disables it.
    pub smoothing: usize,
}

impl DomainSpec {
    /// Reference domain: high lesion contrast, low noise.
    pub fn reference() -> Self {
        let t = Intensity::new;
        Self {
            id: "source".into(),
            flair: Contrast {
                tissues: [
                    t(0.0, 0.0),
                    t(0.3, 0.02),
                    t(1.3, 0.03),
                    t(1.0, 0.03),
                    t(2.2, 0.05),
                ],
                gain: 1.0,
                offset: 0.0,
            },
            t1: Contrast {
                tissues: [
                    t(0.0, 0.0),
                    t(0.25, 0.02),
                    t(0.65, 0.03),
                    t(1.0, 0.03),
                    t(0.45, 0.03),
                ],
                gain: 1.0,
                offset: 0.0,
            },
            noise_std: 0.05,
            smoothing: 0,
        }
    }

    /// Shifted domain: lesions barely brighter than grey matter on FLAIR and
    /// slightly more noise. The raw intensity scale differs as well.
    pub fn shifted() -> Self {
        let t = Intensity::new;
        Self {
            id: "target".into(),
            flair: Contrast {
                tissues: [
                    t(0.0, 0.0),
                    t(0.5, 0.03),
                    t(1.45, 0.04),
                    t(1.0, 0.04),
                    t(1.6, 0.06),
                ],
                gain: 800.0,
                offset: 100.0,
            },
            t1: Contrast {
                tissues: [
                    t(0.0, 0.0),
                    t(0.35, 0.03),
                    t(0.75, 0.04),
                    t(1.0, 0.04),
                    t(0.5, 0.04),
                ],
                gain: 1200.0,
                offset: 40.0,
            },
            noise_std: 0.07,
            smoothing: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flair.validate("FLAIR contrast")?;
        self.t1.validate("T1 contrast")?;
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise std {} must be non-negative",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Geometry of a phantom family.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims3,
    /// Voxel size in mm, `[z, y, x]`.
    pub spacing: [f32; 3],
    /// Brain semi-axes as fractions of the half-extents.
    pub brain_radii: [f64; 3],
    /// White-matter semi-axes as fractions of the brain semi-axes.
    pub white_matter: f64,
    /// Ventricle semi-axes as fractions of the brain semi-axes.
    pub ventricle: f64,
    /// Inclusive range of the lesion count.
    pub lesion_count: (usize, usize),
    /// Inclusive range of lesion semi-axes in voxels.
    pub lesion_radius: (f64, f64),
    /// Inclusive range of the total lesion load in ml.
    pub lesion_volume_ml: (f64, f64),
    /// Default master seed for case sets.
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: Dims3::cube(64),
            spacing: [1.0; 3],
            brain_radii: [0.8, 0.88, 0.8],
            white_matter: 0.72,
            ventricle: 0.18,
            lesion_count: (2, 12),
            lesion_radius: (1.5, 4.0),
            lesion_volume_ml: (0.5, 18.0),
            seed: 0,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 20_000;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dims.is_empty() {
            return bad("phantom volume is empty".into());
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        if self.brain_radii.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return bad(format!(
                "brain radii {:?} must lie in (0, 1]",
                self.brain_radii
            ));
        }
        if !(self.ventricle >= 0.0 && self.ventricle < self.white_matter && self.white_matter < 1.0)
        {
            return bad("need 0 <= ventricle < white_matter < 1".into());
        }
        let (c0, c1) = self.lesion_count;
        let (r0, r1) = self.lesion_radius;
        let (v0, v1) = self.lesion_volume_ml;
        if c0 > c1 {
            return bad(format!("lesion count range {c0}..={c1} is empty"));
        }
        if !(r0 > 0.0 && r0 <= r1) {
            return bad(format!("lesion radius range {r0}..={r1} is invalid"));
        }
        if !(v0 >= 0.0 && v0 <= v1) {
            return bad(format!("lesion volume range {v0}..={v1} ml is invalid"));
        }
        Ok(())
    }

    fn voxel_ml(&self) -> f64 {
        self.spacing.iter().map(|&s| s as f64).product::<f64>() / 1000.0
    }

    fn center(&self) -> [f64; 3] {
        let a = self.dims.as_array();
        [0, 1, 2].map(|k| (a[k] as f64 - 1.0) / 2.0)
    }

    fn semi_axes(&self, fraction: f64) -> [f64; 3] {
        let a = self.dims.as_array();
        [0, 1, 2].map(|k| a[k] as f64 / 2.0 * self.brain_radii[k] * fraction)
    }
}

fn inside(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|k| ((p[k] - c[k]) / r[k]).powi(2)).sum::<f64>() <= 1.0
}

/// Tissue labels of one phantom instance.
fn tissue_map(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Tissue>> {
    let dims = spec.dims;
    let c = spec.center();
    let (brain, wm, ventricle) = (
        spec.semi_axes(1.0),
        spec.semi_axes(spec.white_matter),
        spec.semi_axes(spec.ventricle),
    );
    let mut map: Vec<Tissue> = (0..dims.len())
        .map(|i| {
            let (z, y, x) = dims.coords(i);
            let p = [z as f64, y as f64, x as f64];
            if spec.ventricle > 0.0 && inside(p, c, ventricle) {
                Tissue::Csf
            } else if inside(p, c, wm) {
                Tissue::WhiteMatter
            } else if inside(p, c, brain) {
                Tissue::GreyMatter
            } else {
                Tissue::Background
            }
        })
        .collect();

    let (c0, c1) = spec.lesion_count;
    if c1 == 0 {
        return Ok(map);
    }
    let (v0, v1) = spec.lesion_volume_ml;
    let ml = spec.voxel_ml();
    let (lo, hi) = ((v0 / ml).ceil() as usize, (v1 / ml).floor() as usize);
    if lo > hi {
        return Err(Error::InvalidArgument(format!(
            "lesion volume range {v0}..={v1} ml holds no whole voxel count"
        )));
    }
    let target = rng.gen_range(lo..=hi);
    let wm_voxels: Vec<usize> = (0..dims.len())
        .filter(|&i| map[i] == Tissue::WhiteMatter)
        .collect();
    if wm_voxels.is_empty() {
        return Err(Error::Degenerate(
            "phantom has no white matter to hold lesions".into(),
        ));
    }
    // voxels a new lesion may not touch: existing lesions and their 26-neighbourhood
    let mut blocked = vec![false; dims.len()];
    let (mut count, mut total) = (0usize, 0usize);
    let (r0, r1) = spec.lesion_radius;
    for _ in 0..PLACEMENT_ATTEMPTS {
        if count >= c0 && total >= target || count == c1 {
            break;
        }
        let anchor = dims.coords(wm_voxels[rng.gen_range(0..wm_voxels.len())]);
        let lc = [anchor.0 as f64, anchor.1 as f64, anchor.2 as f64]
            .map(|v| v + rng.gen_range(-0.5..0.5));
        let lr = [0; 3].map(|_| rng.gen_range(r0..=r1));
        let voxels = ellipsoid_voxels(dims, lc, lr);
        if voxels.is_empty() || total + voxels.len() > hi {
            continue;
        }
        if voxels
            .iter()
            .any(|&i| map[i] != Tissue::WhiteMatter || blocked[i])
        {
            continue;
        }
        for &i in &voxels {
            map[i] = Tissue::Lesion;
            let (z, y, x) = dims.coords(i);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        if nz >= 0
                            && ny >= 0
                            && nx >= 0
                            && (nz as usize) < dims.d
                            && (ny as usize) < dims.h
                            && (nx as usize) < dims.w
                        {
                            blocked[dims.index(nz as usize, ny as usize, nx as usize)] = true;
                        }
                    }
                }
            }
        }
        count += 1;
        total += voxels.len();
    }
    if count < c0 || total < lo {
        return Err(Error::Degenerate(format!(
            "placed {count} lesions ({total} voxels) after {PLACEMENT_ATTEMPTS} attempts; need at least {c0} lesions and {lo} voxels"
        )));
    }
    Ok(map)
}

fn ellipsoid_voxels(dims: Dims3, c: [f64; 3], r: [f64; 3]) -> Vec<usize> {
    let lo = |k: usize| (c[k] - r[k]).ceil().max(0.0) as usize;
    let hi = |k: usize, n: usize| ((c[k] + r[k]).floor() as i64).min(n as i64 - 1);
    let mut out = Vec::new();
    for z in lo(0)..=hi(0, dims.d).max(-1) as usize {
        for y in lo(1)..=hi(1, dims.h).max(-1) as usize {
            for x in lo(2)..=hi(2, dims.w).max(-1) as usize {
                if inside([z as f64, y as f64, x as f64], c, r) {
                    out.push(dims.index(z, y, x));
                }
            }
        }
    }
    out
}

fn box_blur(values: &[f32], dims: Dims3, radius: usize) -> Vec<f32> {
    let mut cur = values.to_vec();
    let axes = [(dims.d, dims.h * dims.w), (dims.h, dims.w), (dims.w, 1)];
    for (n, stride) in axes {
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / stride) % n;
            let (a, b) = (pos.saturating_sub(radius), (pos + radius).min(n - 1));
            let base = i - pos * stride;
            *out = (a..=b).map(|p| cur[base + p * stride]).sum::<f32>() / (b - a + 1) as f32;
        }
        cur = next;
    }
    cur
}

fn render(
    map: &[Tissue],
    dims: Dims3,
    contrast: &Contrast,
    domain: &DomainSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let mut v: Vec<f32> = map
        .iter()
        .map(|&t| {
            let i = contrast.tissues[t as usize];
            let z: f32 = StandardNormal.sample(rng);
            i.mean + i.std * z
        })
        .collect();
    if domain.smoothing > 0 {
        v = box_blur(&v, dims, domain.smoothing);
    }
    for x in &mut v {
        let z: f32 = StandardNormal.sample(rng);
        *x = contrast.gain * (*x + domain.noise_std * z) + contrast.offset;
    }
    v
}

/// Renders one phantom case. Geometry depends only on `phantom` and `seed`, so
/// two domains rendered with the same seed share brain and lesion masks.
pub fn generate_case(phantom: &PhantomSpec, domain: &DomainSpec, seed: u64) -> Result<Case> {
    generate_raw_case(phantom, domain, seed)?.normalize()
}

/// [`generate_case`] before intensity normalization.
pub fn generate_raw_case(phantom: &PhantomSpec, domain: &DomainSpec, seed: u64) -> Result<RawCase> {
    generate_named(phantom, domain, seed, format!("{}-{seed:016x}", domain.id))
}

fn generate_named(
    phantom: &PhantomSpec,
    domain: &DomainSpec,
    seed: u64,
    id: String,
) -> Result<RawCase> {
    phantom.validate()?;
    domain.validate()?;
    let mut geo_rng = ChaCha8Rng::seed_from_u64(seed);
    let map = tissue_map(phantom, &mut geo_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let dims = phantom.dims;
    let flair = render(&map, dims, &domain.flair, domain, &mut rng);
    let t1 = render(&map, dims, &domain.t1, domain, &mut rng);
    let spacing = phantom.spacing;
    let brain = Mask::new(
        dims,
        map.iter().map(|&t| t != Tissue::Background).collect(),
        spacing,
    )?;
    let lesion = Mask::new(
        dims,
        map.iter().map(|&t| t == Tissue::Lesion).collect(),
        spacing,
    )?;
    Ok(RawCase {
        id,
        flair: Volume::new(dims, flair, spacing)?,
        t1: Volume::new(dims, t1, spacing)?,
        lesion_mask: Some(lesion),
        brain_mask: brain,
    })
}

/// `n` independent cases with ids `<domain>-000`, `<domain>-001`, ...; case `i`
/// uses seed `derive_seed(master_seed, i)`.
pub fn generate_domain_set(
    phantom: &PhantomSpec,
    domain: &DomainSpec,
    n: usize,
    master_seed: u64,
) -> Result<Vec<Case>> {
    generate_raw_set(phantom, domain, n, master_seed)?
        .into_iter()
        .map(RawCase::normalize)
        .collect()
}

/// [`generate_domain_set`] before intensity normalization.
pub fn generate_raw_set(
    phantom: &PhantomSpec,
    domain: &DomainSpec,
    n: usize,
    master_seed: u64,
) -> Result<Vec<RawCase>> {
    phantom.validate()?;
    domain.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            generate_named(
                phantom,
                domain,
                derive_seed(master_seed, i as u64),
                format!("{}-{i:03}", domain.id),
            )
        })
        .collect()
}

/// Best single FLAIR threshold inside the brain against the lesion mask.
/// Returns `(threshold, dsc)`; voxels with FLAIR `>= threshold` are lesion.
pub fn threshold_oracle(case: &Case) -> Result<(f32, f64)> {
    let lesion = case
        .lesion_mask
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("case {} has no lesion mask", case.id)))?;
    let total = lesion.count();
    let mut v: Vec<(f32, bool)> = case
        .brain_mask
        .indices()
        .map(|i| (case.flair.data()[i], lesion.get(i)))
        .collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut best, mut best_t, mut tp) =
        (if total == 0 { 1.0 } else { 0.0 }, f32::INFINITY, 0usize);
    for k in 0..v.len() {
        tp += v[k].1 as usize;
        // only cut between distinct values
        if k + 1 < v.len() && v[k + 1].0 == v[k].0 {
            continue;
        }
        let d = 2.0 * tp as f64 / (k + 1 + total) as f64;
        if d > best {
            (best, best_t) = (d, v[k].0);
        }
    }
    Ok((best_t, best))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec {
            dims: Dims3::cube(24),
            lesion_count: (2, 5),
            lesion_radius: (1.2, 2.2),
            lesion_volume_ml: (0.03, 0.12),
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn zero_lesions_give_empty_mask() {
        let spec = PhantomSpec {
            lesion_count: (0, 0),
            ..small()
        };
        let case = generate_case(&spec, &DomainSpec::reference(), 3).unwrap();
        assert_eq!(case.lesion_voxels(), 0);
        assert!(case.brain_mask.count() > 0);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_case(&small(), &DomainSpec::reference(), 9).unwrap();
        let b = generate_case(&small(), &DomainSpec::reference(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn domains_share_ground_truth() {
        let a = generate_case(&small(), &DomainSpec::reference(), 5).unwrap();
        let b = generate_case(&small(), &DomainSpec::shifted(), 5).unwrap();
        assert_eq!(a.lesion_mask, b.lesion_mask);
        assert_eq!(a.brain_mask, b.brain_mask);
        assert_ne!(a.flair, b.flair);
    }

    #[test]
    fn lesions_lie_in_white_matter_and_loads_in_range() {
        let spec = small();
        let cases = generate_domain_set(&spec, &DomainSpec::reference(), 6, 1).unwrap();
        let ids: std::collections::BTreeSet<_> = cases.iter().map(|c| c.id.clone()).collect();
        assert_eq!(ids.len(), 6);
        for c in &cases {
            let ml = c.lesion_voxels() as f64 / 1000.0;
            assert!(
                ml >= spec.lesion_volume_ml.0 - 1e-12 && ml <= spec.lesion_volume_ml.1 + 1e-12,
                "{ml}"
            );
            assert!(c.lesion_mask.as_ref().unwrap().is_subset_of(&c.brain_mask));
        }
        assert!(generate_domain_set(&spec, &DomainSpec::reference(), 0, 1)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn lesions_are_separate_components() {
        use crate::metrics::{connected_components, Connectivity};
        let spec = PhantomSpec {
            lesion_count: (4, 4),
            lesion_volume_ml: (0.0, 1.0),
            ..small()
        };
        let c = generate_case(&spec, &DomainSpec::reference(), 2).unwrap();
        assert_eq!(
            connected_components(c.lesion_mask.as_ref().unwrap(), Connectivity::TwentySix).count(),
            4
        );
    }

    #[test]
    fn threshold_oracle_on_reference_domain() {
        for c in generate_domain_set(&small(), &DomainSpec::reference(), 4, 7).unwrap() {
            let (_, d) = threshold_oracle(&c).unwrap();
            assert!(d >= 0.9, "{}: {d}", c.id);
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let spec = PhantomSpec {
            lesion_count: (50, 60),
            lesion_radius: (3.0, 3.0),
            ..small()
        };
        assert!(matches!(
            generate_case(&spec, &DomainSpec::reference(), 1),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn invalid_domain_rejected() {
        let mut d = DomainSpec::reference();
        d.flair.gain = 0.0;
        assert!(generate_case(&small(), &d, 1).is_err());
        let mut d = DomainSpec::reference();
        d.noise_std = -1.0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn box_blur_preserves_constants() {
        let dims = Dims3::new(3, 4, 5);
        let out = box_blur(&vec![2.5; dims.len()], dims, 1);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }
}
