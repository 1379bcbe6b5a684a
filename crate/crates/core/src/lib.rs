pub mod attribution;
pub mod classes;
pub mod classifier;
pub mod climb;
pub mod geometry;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod polygon;
pub mod postproc;
pub mod proposer;
pub mod raster;
pub mod rle;
pub mod synth;
pub mod weakset;
