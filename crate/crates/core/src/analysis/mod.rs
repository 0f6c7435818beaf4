//! Parameter-space landscapes of actor checkpoints and normalized regret
//! tables.

mod landscape;
mod regret_table;

pub use landscape::{
    export_checkpoint_matrix, interpolate_eval, parse_checkpoint_matrix, plane_basis, plane_grid_eval,
    checkpoint_matrix_csv, CurvePoint, PlaneBasis, PlaneGrid, DEFAULT_GRID_RANGE, DEFAULT_GRID_RESOLUTION,
};
pub use regret_table::{aggregate_normalized_regret, parse_regret_cells, PairAverage, RegretCell, RegretTable, RegretTableRow};
