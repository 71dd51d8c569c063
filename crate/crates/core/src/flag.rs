//! Non-fatal warnings attached to fits and estimates.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// A smoother was evaluated outside the training support of Z.
    Extrapolation,
    /// Gram matrix condition number is above 1e8 but still solvable.
    NearSingular,
    /// Some leave-one-out terms had no off-diagonal weight and were skipped.
    SaturatedLoo,
    /// Projected first-stage design is nearly rank deficient.
    WeakInstrument,
    /// Tiny negative variance diagonals were clamped to zero.
    ClampedVariance,
    /// Duplicate quantile breakpoints were collapsed.
    CollapsedBreakpoints,
    /// Cells below the minimum count were merged into neighbours.
    MergedCells,
    /// Empty cells were dropped.
    EmptyCellsRemoved,
    /// The optimizer stopped on the boundary of the search box.
    Boundary,
    /// Multi-start minima disagree.
    Multimodal,
    /// Estimated conditional error density at zero fell below 1e-6.
    DensityNearZero,
}

/// Pushes `flag` if absent, keeping the list sorted.
pub fn raise(flags: &mut Vec<Flag>, flag: Flag) {
    if let Err(pos) = flags.binary_search(&flag) {
        flags.insert(pos, flag);
    }
}

pub fn merge(flags: &mut Vec<Flag>, other: &[Flag]) {
    for &f in other {
        raise(flags, f);
    }
}
