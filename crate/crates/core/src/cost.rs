//! Closed-form attention-map memory and FLOP accounting.
//!
//! Conventions: one multiply-add is 2 FLOPs; row softmax costs 3 operations
//! per map entry (exp, accumulate, normalize). Map building and aggregation
//! are the two matrix products of each block; their multiply-add counts match
//! what [`crate::flops`] records when the blocks run (without embeddings).

use std::fmt::Write as _;

use serde::Serialize;

use crate::attention::SliceAxis;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    NonLocal,
    Sa(SliceAxis),
    Rsa,
}

impl BlockKind {
    pub fn label(self) -> String {
        match self {
            BlockKind::NonLocal => "nonlocal".to_string(),
            BlockKind::Sa(axis) => format!("sa-{}", axis.name()),
            BlockKind::Rsa => "rsa".to_string(),
        }
    }
}

/// Feature-map shape `(C, D, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FeatureShape {
    pub c: u64,
    pub d: u64,
    pub h: u64,
    pub w: u64,
}

impl FeatureShape {
    pub fn new(c: u64, d: u64, h: u64, w: u64) -> Self {
        Self { c, d, h, w }
    }

    pub fn voxels(&self) -> u128 {
        self.d as u128 * self.h as u128 * self.w as u128
    }

    fn axis_extent(&self, axis: SliceAxis) -> u64 {
        match axis {
            SliceAxis::Axial => self.d,
            SliceAxis::Coronal => self.h,
            SliceAxis::Sagittal => self.w,
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.c, self.d, self.h, self.w].contains(&0) {
            return Err(Error::ZeroExtent);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub block_kind: BlockKind,
    pub shape: FeatureShape,
    pub element_bytes: u64,
    /// Side of each attention map the block materializes.
    pub map_sides: Vec<u128>,
    pub map_entries: u128,
    pub map_bytes: u128,
    /// FLOPs of the products that build the maps (`M₂·M₁`).
    pub build_flops: u128,
    pub softmax_ops: u128,
    /// FLOPs of the products that aggregate with the maps (`A·M₃`).
    pub aggregate_flops: u128,
    /// `build_flops + softmax_ops + aggregate_flops`.
    pub map_flops: u128,
}

impl CostReport {
    /// Multiply-adds of the two matrix products.
    pub fn mul_adds(&self) -> u128 {
        (self.build_flops + self.aggregate_flops) / 2
    }

    /// Matrix-product FLOPs, the quantity compared by [`cost_ratio`].
    pub fn product_flops(&self) -> u128 {
        self.build_flops + self.aggregate_flops
    }

    pub const CSV_HEADER: &'static str = "block_kind,C,D,H,W,map_entries,map_bytes,map_flops";

    pub fn csv_row(&self) -> String {
        let s = &self.shape;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.block_kind.label(),
            s.c,
            s.d,
            s.h,
            s.w,
            self.map_entries,
            self.map_bytes,
            self.map_flops
        )
    }
}

/// Analytical cost of one block's attention maps for a `(C, D, H, W)` input.
pub fn attention_cost(
    shape: FeatureShape,
    kind: BlockKind,
    element_bytes: u64,
) -> Result<CostReport> {
    shape.validate()?;
    if element_bytes == 0 {
        return Err(Error::ZeroExtent);
    }
    let c = shape.c as u128;
    let voxels = shape.voxels();
    // (map side, feature width of each flattened row)
    let maps: Vec<(u128, u128)> = match kind {
        BlockKind::NonLocal => vec![(voxels, c)],
        BlockKind::Sa(axis) => {
            let side = shape.axis_extent(axis) as u128;
            vec![(side, c * voxels / side)]
        }
        BlockKind::Rsa => SliceAxis::RECURRENT_ORDER
            .iter()
            .map(|&axis| {
                let side = shape.axis_extent(axis) as u128;
                (side, c * voxels / side)
            })
            .collect(),
    };
    let map_entries: u128 = maps.iter().map(|(side, _)| side * side).sum();
    let build_flops: u128 = maps
        .iter()
        .map(|(side, width)| 2 * width * side * side)
        .sum();
    let aggregate_flops = build_flops;
    let softmax_ops = 3 * map_entries;
    Ok(CostReport {
        block_kind: kind,
        shape,
        element_bytes,
        map_sides: maps.iter().map(|(side, _)| *side).collect(),
        map_entries,
        map_bytes: map_entries * element_bytes as u128,
        build_flops,
        softmax_ops,
        aggregate_flops,
        map_flops: build_flops + softmax_ops + aggregate_flops,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostRatio {
    /// Non-local map bytes over RSA map bytes.
    pub memory: f64,
    /// Non-local matrix-product FLOPs over RSA matrix-product FLOPs.
    pub flops: f64,
}

pub fn cost_ratio(shape: FeatureShape) -> Result<CostRatio> {
    let nonlocal = attention_cost(shape, BlockKind::NonLocal, 4)?;
    let rsa = attention_cost(shape, BlockKind::Rsa, 4)?;
    Ok(CostRatio {
        memory: nonlocal.map_bytes as f64 / rsa.map_bytes as f64,
        flops: nonlocal.product_flops() as f64 / rsa.product_flops() as f64,
    })
}

/// Reports for the non-local block, each single SA axis and the RSA block.
pub fn all_block_costs(shape: FeatureShape, element_bytes: u64) -> Result<Vec<CostReport>> {
    let mut kinds = vec![BlockKind::NonLocal];
    kinds.extend(SliceAxis::ALL.iter().map(|&a| BlockKind::Sa(a)));
    kinds.push(BlockKind::Rsa);
    kinds
        .into_iter()
        .map(|k| attention_cost(shape, k, element_bytes))
        .collect()
}

pub const MIN_MEMORY_RATIO: f64 = 28.0;
pub const MIN_FLOP_RATIO: f64 = 100.0;
/// Smallest spatial extent at which the ratio bounds are asserted.
pub const BOUND_MIN_EXTENT: u64 = 18;

const SWEEP_EXTENTS: [u64; 12] = [1, 2, 4, 8, 16, 18, 24, 32, 64, 128, 256, 512];
const SWEEP_CHANNELS: [u64; 3] = [1, 16, 64];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub shape: FeatureShape,
    pub ratio: CostRatio,
    /// Whether the bounds apply (`min(D, H, W) ≥ 18`).
    pub checked: bool,
    pub passed: bool,
}

/// Evaluates [`cost_ratio`] over the built-in shape grid.
pub fn sweep() -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &c in &SWEEP_CHANNELS {
        for &d in &SWEEP_EXTENTS {
            for &h in &SWEEP_EXTENTS {
                for &w in &SWEEP_EXTENTS {
                    let shape = FeatureShape::new(c, d, h, w);
                    let ratio = cost_ratio(shape).expect("grid extents are positive");
                    let checked = d.min(h).min(w) >= BOUND_MIN_EXTENT;
                    let passed = !checked
                        || (ratio.memory >= MIN_MEMORY_RATIO && ratio.flops >= MIN_FLOP_RATIO);
                    rows.push(SweepRow {
                        shape,
                        ratio,
                        checked,
                        passed,
                    });
                }
            }
        }
    }
    rows
}

pub fn render_table(reports: &[CostReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>24} {:>32} {:>32} {:>34}",
        "block", "map side(s)", "map entries", "map bytes", "map flops"
    );
    for r in reports {
        let sides = r
            .map_sides
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join("+");
        let _ = writeln!(
            out,
            "{:<14} {:>24} {:>32} {:>32} {:>34}",
            r.block_kind.label(),
            sides,
            r.map_entries,
            r.map_bytes,
            r.map_flops
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonlocal_side_for_large_volume() {
        let r =
            attention_cost(FeatureShape::new(1, 512, 512, 256), BlockKind::NonLocal, 4).unwrap();
        assert_eq!(r.map_sides, vec![67_108_864]);
        assert_eq!(r.map_entries, 67_108_864u128 * 67_108_864);
    }

    #[test]
    fn degenerate_unit_volume() {
        let shape = FeatureShape::new(5, 1, 1, 1);
        assert_eq!(
            attention_cost(shape, BlockKind::NonLocal, 4)
                .unwrap()
                .map_entries,
            1
        );
        assert_eq!(
            attention_cost(shape, BlockKind::Rsa, 4)
                .unwrap()
                .map_entries,
            3
        );
        let ratio = cost_ratio(shape).unwrap();
        assert!((ratio.memory - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cube_32() {
        let shape = FeatureShape::new(7, 32, 32, 32);
        assert_eq!(
            attention_cost(shape, BlockKind::NonLocal, 4)
                .unwrap()
                .map_entries,
            1_073_741_824
        );
        assert_eq!(
            attention_cost(shape, BlockKind::Rsa, 4)
                .unwrap()
                .map_entries,
            3_072
        );
        let ratio = cost_ratio(shape).unwrap();
        // (32³)² / (3·32²) and 32² / 3
        assert!((ratio.memory - 349_525.333_333).abs() < 1e-3);
        assert!((ratio.flops - 341.333_333).abs() < 1e-3);
    }

    #[test]
    fn flop_ratio_independent_of_channels() {
        let a = cost_ratio(FeatureShape::new(1, 20, 30, 40)).unwrap();
        let b = cost_ratio(FeatureShape::new(64, 20, 30, 40)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            attention_cost(FeatureShape::new(1, 0, 2, 2), BlockKind::Rsa, 4),
            Err(Error::ZeroExtent)
        ));
        assert!(matches!(
            cost_ratio(FeatureShape::new(0, 2, 2, 2)),
            Err(Error::ZeroExtent)
        ));
    }

    #[test]
    fn sweep_bounds_hold() {
        let rows = sweep();
        assert!(rows.iter().any(|r| r.checked));
        assert!(rows.iter().all(|r| r.passed));
    }
}
