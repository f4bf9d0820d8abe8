//! Volumes, binary masks and two-modality cases.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nifti;
use crate::ops::Dims3;

/// A 3D scalar image. Axis-ordered arrays (`spacing`, `origin`) follow the data
/// layout `[d, h, w]`, i.e. NIfTI `(z, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims3,
    data: Vec<f32>,
    spacing: [f32; 3],
    origin: [f32; 3],
}

impl Volume {
    pub fn new(dims: Dims3, data: Vec<f32>, spacing: [f32; 3]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "volume extents must be >= 1, got {:?}",
                dims.as_array()
            )));
        }
        if data.len() != dims.len() {
            return Err(Error::shape("volume data", &dims.as_array(), &[data.len()]));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Self {
            dims,
            data,
            spacing,
            origin: [0.0; 3],
        })
    }

    pub fn zeros(dims: Dims3, spacing: [f32; 3]) -> Self {
        Self::new(dims, vec![0.0; dims.len()], spacing).expect("valid zero volume")
    }

    pub fn with_origin(mut self, origin: [f32; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    /// Volume of one voxel in mm^3.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().map(|&s| s as f64).product()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.dims.index(z, y, x)]
    }

    /// Voxels with value `>= threshold`.
    pub fn threshold(&self, threshold: f32) -> Mask {
        Mask {
            dims: self.dims,
            spacing: self.spacing,
            voxels: self.data.iter().map(|&v| v >= threshold).collect(),
        }
    }

    fn same_grid(&self, dims: Dims3, spacing: [f32; 3]) -> bool {
        self.dims == dims && self.spacing == spacing
    }
}

/// Binary volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    dims: Dims3,
    spacing: [f32; 3],
    voxels: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims3, voxels: Vec<bool>, spacing: [f32; 3]) -> Result<Self> {
        Volume::new(dims, vec![0.0; voxels.len()], spacing)?;
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    pub fn empty(dims: Dims3, spacing: [f32; 3]) -> Self {
        Self {
            dims,
            spacing,
            voxels: vec![false; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [bool] {
        &mut self.voxels
    }

    pub fn get(&self, i: usize) -> bool {
        self.voxels[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.voxels[i] = v;
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.voxels.iter().any(|&v| v)
    }

    /// Flat indices of set voxels in raster order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.voxels
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
    }

    /// Set volume in mm^3.
    pub fn volume_mm3(&self) -> f64 {
        self.count() as f64 * self.spacing.iter().map(|&s| s as f64).product::<f64>()
    }

    pub fn to_volume(&self) -> Volume {
        let data = self
            .voxels
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect();
        Volume::new(self.dims, data, self.spacing).expect("mask grid is valid")
    }

    /// Voxels strictly above `threshold`.
    pub fn from_volume(v: &Volume, threshold: f32) -> Self {
        Self {
            dims: v.dims,
            spacing: v.spacing,
            voxels: v.data.iter().map(|&x| x > threshold).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.voxels
            .iter()
            .zip(&other.voxels)
            .all(|(&a, &b)| !a || b)
    }
}

/// Co-registered FLAIR and T1-w volumes with masks, intensity-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub flair: Volume,
    pub t1: Volume,
    pub lesion_mask: Option<Mask>,
    pub brain_mask: Mask,
}

impl Case {
    /// Builds a case from raw intensities: checks the grids agree, restricts the
    /// lesion mask to the brain mask and z-scores both modalities inside the brain.
    pub fn from_raw(
        id: impl Into<String>,
        flair: Volume,
        t1: Volume,
        lesion: Option<Mask>,
        brain: Mask,
    ) -> Result<Self> {
        let id = id.into();
        let (dims, spacing) = (flair.dims(), flair.spacing());
        if !t1.same_grid(dims, spacing) {
            return Err(Error::shape(
                "T1 grid vs FLAIR",
                &dims.as_array(),
                &t1.dims().as_array(),
            ));
        }
        if brain.dims != dims {
            return Err(Error::shape(
                "brain mask grid vs FLAIR",
                &dims.as_array(),
                &brain.dims.as_array(),
            ));
        }
        let lesion = match lesion {
            Some(mut l) => {
                if l.dims != dims {
                    return Err(Error::shape(
                        "lesion mask grid vs FLAIR",
                        &dims.as_array(),
                        &l.dims.as_array(),
                    ));
                }
                if !l.is_subset_of(&brain) {
                    log::warn!("case {id}: lesion voxels outside the brain mask were dropped");
                    for (v, &b) in l.voxels.iter_mut().zip(&brain.voxels) {
                        *v &= b;
                    }
                }
                Some(l)
            }
            None => None,
        };
        Ok(Self {
            flair: zscore_normalize(&flair, &brain)?,
            t1: zscore_normalize(&t1, &brain)?,
            id,
            lesion_mask: lesion,
            brain_mask: brain,
        })
    }

    pub fn dims(&self) -> Dims3 {
        self.flair.dims()
    }

    pub fn lesion_voxels(&self) -> usize {
        self.lesion_mask.as_ref().map_or(0, Mask::count)
    }
}

/// Raw intensities and masks of a case, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCase {
    pub id: String,
    pub flair: Volume,
    pub t1: Volume,
    pub lesion_mask: Option<Mask>,
    pub brain_mask: Mask,
}

impl RawCase {
    pub fn normalize(self) -> Result<Case> {
        Case::from_raw(self.id, self.flair, self.t1, self.lesion_mask, self.brain_mask)
    }

    /// Writes `root/<id>/{flair,t1,brain,lesion}.nii` and returns the case
    /// directory. `lesion.nii` is skipped for unannotated cases.
    pub fn save(&self, root: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = root.as_ref().join(&self.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        nifti::save_nifti(&self.flair, dir.join("flair.nii"), nifti::Datatype::F32)?;
        nifti::save_nifti(&self.t1, dir.join("t1.nii"), nifti::Datatype::F32)?;
        nifti::save_mask(&self.brain_mask, dir.join("brain.nii"))?;
        if let Some(l) = &self.lesion_mask {
            nifti::save_mask(l, dir.join("lesion.nii"))?;
        }
        Ok(dir)
    }
}

/// `dir/<stem>.nii`, falling back to `dir/<stem>.nii.gz`.
fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    [format!("{stem}.nii"), format!("{stem}.nii.gz")]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
}

/// Loads a case directory written by [`RawCase::save`]. `flair` and `t1` are
/// required; `lesion` and `brain` are optional. The id is the directory name.
pub fn load_case_dir(dir: impl AsRef<Path>) -> Result<Case> {
    let dir = dir.as_ref();
    let required = |stem: &str| {
        find_image(dir, stem).ok_or_else(|| {
            Error::InvalidArgument(format!("{}: missing {stem}.nii or {stem}.nii.gz", dir.display()))
        })
    };
    let (flair, t1) = (required("flair")?, required("t1")?);
    let lesion = find_image(dir, "lesion");
    let brain = find_image(dir, "brain");
    load_case(flair, t1, lesion.as_deref(), brain.as_deref())
}

/// Loads every case directory under `root`, in name order.
pub fn load_case_set(root: impl AsRef<Path>) -> Result<Vec<Case>> {
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyDataset(format!("no case directories in {}", root.display())));
    }
    dirs.iter().map(load_case_dir).collect()
}

/// Zero mean, unit standard deviation over the masked voxels; everything else is 0.
pub fn zscore_normalize(volume: &Volume, brain_mask: &Mask) -> Result<Volume> {
    if brain_mask.dims != volume.dims {
        return Err(Error::shape(
            "normalization mask",
            &volume.dims.as_array(),
            &brain_mask.dims.as_array(),
        ));
    }
    let n = brain_mask.count();
    if n == 0 {
        return Err(Error::Degenerate("empty brain mask".into()));
    }
    let inside = || {
        volume
            .data
            .iter()
            .zip(&brain_mask.voxels)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v as f64)
    };
    let mean = inside().sum::<f64>() / n as f64;
    let var = inside().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::Degenerate(
            "constant intensities inside the brain mask".into(),
        ));
    }
    let data = volume
        .data
        .iter()
        .zip(&brain_mask.voxels)
        .map(|(&v, &m)| {
            if m {
                ((v as f64 - mean) / std) as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok(Volume {
        data,
        ..volume.clone()
    })
}

/// Loads and normalizes a case. Without a brain mask file the mask is the
/// support of the raw FLAIR image; lesion masks are binarized at `> 0.5`.
pub fn load_case(
    flair_path: impl AsRef<Path>,
    t1_path: impl AsRef<Path>,
    lesion_path: Option<&Path>,
    brain_mask_path: Option<&Path>,
) -> Result<Case> {
    let flair_path = flair_path.as_ref();
    let t1_path = t1_path.as_ref();
    let flair = nifti::load_nifti(flair_path)?;
    let check = |v: &Volume, path: &Path| -> Result<()> {
        if v.dims() != flair.dims() {
            return Err(Error::InvalidArgument(format!(
                "{}: shape {:?} differs from FLAIR shape {:?}",
                path.display(),
                v.dims().as_array(),
                flair.dims().as_array()
            )));
        }
        Ok(())
    };
    let mut t1 = nifti::load_nifti(t1_path)?;
    check(&t1, t1_path)?;
    // spacing differences below float noise are not a reason to reject a case
    t1.spacing = flair.spacing;
    let lesion = match lesion_path {
        Some(p) => {
            let v = nifti::load_nifti(p)?;
            check(&v, p)?;
            Some(Mask {
                spacing: flair.spacing,
                ..Mask::from_volume(&v, 0.5)
            })
        }
        None => None,
    };
    let brain = match brain_mask_path {
        Some(p) => {
            let v = nifti::load_nifti(p)?;
            check(&v, p)?;
            Mask {
                spacing: flair.spacing,
                ..Mask::from_volume(&v, 0.5)
            }
        }
        None => Mask {
            dims: flair.dims(),
            spacing: flair.spacing,
            voxels: flair.data.iter().map(|&v| v != 0.0).collect(),
        },
    };
    let id = flair_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    Case::from_raw(id, flair, t1, lesion, brain)
}
