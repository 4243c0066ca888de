//! Default constants shared by the library and the command-line tool.

/// Huber threshold.
pub const DELTA: f64 = 0.1;
/// Matching displacement range `d`; displacements span `-d..d`.
pub const RANGE: usize = 96;
/// Pyramid levels.
pub const LEVELS: usize = 3;
/// FISTA iterations per pyramid level, coarsest first.
pub const LEVEL_ITERS: [usize; 3] = [2000, 2000, 4000];
/// Weight of the robust fitting term in the matching loss.
pub const LOSS_ALPHA: f64 = 0.1;
/// Huber threshold of the fitting term in the matching loss.
pub const LOSS_EPS: f64 = 0.01;
/// Edge sensitivity of the image-based diffusion tensor.
pub const EDGE_GAMMA: f64 = 5.0;
/// TGV second-order weight.
pub const TGV_BETA: f64 = 1.0;
