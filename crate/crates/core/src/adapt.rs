//! Supervised domain adaptation by retraining fully connected layer groups of
//! both cascade networks on annotated target-domain cases.

use std::collections::BTreeSet;

use crate::cascade::{derive_seed, describe_train, CascadeHistory, CascadeModel, FeatureCache};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_cached, MetricsReport, Reference, Summary};
use crate::nn::{self, FreezeConfig, FreezeMode, ParamCounts, TrainConfig};
use crate::patches;
use crate::volume::Case;

/// Lesion load (mm³) from which retraining all three FC layers is advised.
pub const FULL_FC_THRESHOLD_MM3: f64 = 3000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationReport {
    pub freeze: FreezeConfig,
    /// Parameter counts of net 1 and net 2 after the freeze was applied.
    pub counts: [ParamCounts; 2],
    pub history: CascadeHistory,
    pub target_cases: Vec<String>,
    pub lesion_volume_mm3: f64,
}

fn check_targets(targets: &[Case]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::EmptyDataset("no target cases".into()));
    }
    for c in targets {
        if c.lesion_voxels() == 0 {
            return Err(Error::InvalidArgument(format!(
                "target case {} has no annotated lesion voxels; adaptation needs at least one lesion",
                c.id
            )));
        }
    }
    Ok(())
}

fn lesion_volume_mm3(cases: &[Case]) -> f64 {
    cases
        .iter()
        .map(|c| c.lesion_voxels() as f64 * c.flair.voxel_volume())
        .sum()
}

/// Copies `source`, freezes both networks per `freeze` and retrains them on
/// `targets`: net 1 on the target stage-1 dataset, then net 2 on false
/// positives of the adapted net 1. The source is left untouched.
pub fn adapt(
    source: &CascadeModel,
    targets: &[Case],
    freeze: &FreezeConfig,
    train: &TrainConfig,
) -> Result<(CascadeModel, AdaptationReport)> {
    adapt_cached(source, targets, freeze, train, None)
}

/// As [`adapt`]; `cache` serves the frozen convolutional features.
pub fn adapt_cached(
    source: &CascadeModel,
    targets: &[Case],
    freeze: &FreezeConfig,
    train: &TrainConfig,
    cache: Option<&FeatureCache>,
) -> Result<(CascadeModel, AdaptationReport)> {
    if freeze.mode == FreezeMode::None {
        return Err(Error::InvalidArgument(
            "adaptation needs a freeze mode; retraining every layer is train_cascade".into(),
        ));
    }
    check_targets(targets)?;
    train.validate()?;
    let seed = train.seed;
    let stage_cfg = |stage: u64| TrainConfig {
        seed: derive_seed(seed, 10 + stage),
        ..train.clone()
    };

    let mut model = source.clone();
    model.net1.set_trainable(freeze);
    model.net2.set_trainable(freeze);

    let mut d1 = patches::build_stage1_dataset(targets, derive_seed(seed, 3))?;
    log::info!(
        "adapting net 1 ({}) on {} patches from {} cases",
        freeze.mode,
        d1.len(),
        targets.len()
    );
    let h1 = nn::train(&mut model.net1, &mut d1, Some(targets), &stage_cfg(1))?;
    drop(d1);

    let mut d2 = patches::build_stage2_dataset(targets, &model.net1, derive_seed(seed, 4), cache)?;
    log::info!("adapting net 2 ({}) on {} patches", freeze.mode, d2.len());
    let h2 = nn::train(&mut model.net2, &mut d2, Some(targets), &stage_cfg(2))?;

    let ids: Vec<String> = targets.iter().map(|c| c.id.clone()).collect();
    let volume = lesion_volume_mm3(targets);
    let p = &mut model.provenance;
    p.insert("adapt.freeze".into(), freeze.mode.to_string());
    p.insert("adapt.retrain_head".into(), freeze.retrain_head.to_string());
    p.insert(
        "adapt.frozen_bn_batch_stats".into(),
        freeze.frozen_bn_batch_stats.to_string(),
    );
    p.insert("adapt.cases".into(), ids.join(","));
    p.insert("adapt.lesion_volume_mm3".into(), format!("{volume}"));
    describe_train(train, p, "adapt.train.");

    let counts = [
        model.net1.count_params(Some(freeze.mode)),
        model.net2.count_params(Some(freeze.mode)),
    ];
    for (k, c) in counts.iter().enumerate() {
        log::info!(
            "net {}: {} parameters, {} trainable ({} including the output layer)",
            k + 1,
            c.total,
            c.trainable_table,
            c.trainable_actual
        );
    }
    let report = AdaptationReport {
        freeze: *freeze,
        counts,
        history: CascadeHistory {
            stage1: h1,
            stage2: h2,
        },
        target_cases: ids,
        lesion_volume_mm3: volume,
    };
    Ok((model, report))
}

/// Freeze depth advised for a target lesion load: all three FC layers from
/// 3000 mm³ up, only the last one below.
pub fn recommend_freeze(total_lesion_voxels: usize, voxel_volume_mm3: f64) -> FreezeConfig {
    recommend_freeze_volume(total_lesion_voxels as f64 * voxel_volume_mm3)
}

/// [`recommend_freeze`] for the combined lesion load of `cases`.
pub fn recommend_freeze_for(cases: &[Case]) -> FreezeConfig {
    recommend_freeze_volume(lesion_volume_mm3(cases))
}

fn recommend_freeze_volume(volume_mm3: f64) -> FreezeConfig {
    let mode = if volume_mm3 >= FULL_FC_THRESHOLD_MM3 {
        FreezeMode::Fc1Fc2Fc3
    } else {
        FreezeMode::Fc3
    };
    FreezeConfig::new(mode)
}

/// Freeze modes crossed with training-set sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub modes: Vec<FreezeMode>,
    pub sizes: Vec<usize>,
    pub train: TrainConfig,
    /// Cell `k` trains with seed `derive_seed(seed, k)`.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub mode: FreezeMode,
    pub n_images: usize,
    pub lesion_volume_ml: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
}

impl GridReport {
    /// One row per cell with `mean (std)` of each metric.
    pub fn to_dsv(&self, delimiter: char) -> String {
        let d = delimiter.to_string();
        let mut out = [
            "freeze",
            "n_images",
            "lesion_ml",
            "dsc",
            "sensitivity",
            "precision",
        ]
        .join(&d)
            + "\n";
        for c in &self.cells {
            let row = [
                c.mode.to_string(),
                c.n_images.to_string(),
                format!("{:.3}", c.lesion_volume_ml),
                c.report.dsc().to_string(),
                c.report.sensitivity().to_string(),
                c.report.precision().to_string(),
            ];
            out += &(row.join(&d) + "\n");
        }
        out
    }

    pub fn mean_dsc(&self, mode: FreezeMode, n_images: usize) -> Option<Summary> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.n_images == n_images)
            .map(|c| c.report.dsc())
    }
}

/// Adapts a fresh copy of `source` for every grid cell on the first `n`
/// training cases and evaluates it on the test cases.
pub fn run_adaptation_grid(
    source: &CascadeModel,
    train_cases: &[Case],
    test_cases: &[Case],
    grid: &GridSpec,
) -> Result<GridReport> {
    let train_ids: BTreeSet<&str> = train_cases.iter().map(|c| c.id.as_str()).collect();
    if let Some(c) = test_cases
        .iter()
        .find(|c| train_ids.contains(c.id.as_str()))
    {
        return Err(Error::InvalidArgument(format!(
            "case {} is in both the training and the test set",
            c.id
        )));
    }
    if let Some(&n) = grid
        .sizes
        .iter()
        .find(|&&n| n == 0 || n > train_cases.len())
    {
        return Err(Error::InvalidArgument(format!(
            "subset size {n} outside 1..={} available training cases",
            train_cases.len()
        )));
    }
    let cache = FeatureCache::new();
    let mut cells = Vec::new();
    let mut k = 0u64;
    for &mode in &grid.modes {
        for &n in &grid.sizes {
            let subset = &train_cases[..n];
            let train = TrainConfig {
                seed: derive_seed(grid.seed, k),
                ..grid.train.clone()
            };
            k += 1;
            let (model, _) = adapt_cached(
                source,
                subset,
                &FreezeConfig::new(mode),
                &train,
                Some(&cache),
            )?;
            let report = evaluate_cached(&model, test_cases, Reference::Expert, &cache)?;
            log::info!("grid {mode} x {n}: DSC {}", report.dsc());
            cells.push(GridCell {
                mode,
                n_images: n,
                lesion_volume_ml: lesion_volume_mm3(subset) / 1000.0,
                report,
            });
        }
    }
    Ok(GridReport { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_rule_of_thumb() {
        assert_eq!(recommend_freeze(26800, 1.0).mode, FreezeMode::Fc1Fc2Fc3);
        assert_eq!(recommend_freeze(500, 1.0).mode, FreezeMode::Fc3);
        assert_eq!(recommend_freeze(3000, 1.0).mode, FreezeMode::Fc1Fc2Fc3);
        assert_eq!(recommend_freeze(2999, 1.0).mode, FreezeMode::Fc3);
        assert_eq!(recommend_freeze(2300, 1.0).mode, FreezeMode::Fc3);
        assert_eq!(recommend_freeze(400, 8.0).mode, FreezeMode::Fc1Fc2Fc3);
        assert_eq!(recommend_freeze(0, 1.0).mode, FreezeMode::Fc3);
    }
}
