pub mod eval;
pub mod extract;
pub mod features;
pub mod heatmap;
pub mod loss;
pub mod model;
pub mod nn;
pub mod plugin;
pub mod raster;
pub mod retrieval;
pub mod scene;
pub mod synth;
pub mod train;
pub mod util;
pub mod warp;
