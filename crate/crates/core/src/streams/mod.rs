//! Synthetic token streams, threshold calibration, and clip/codebook files.

mod io;
mod synth;

pub use io::{read_clip, read_codebook, write_clip, write_codebook, CLIP_MAGIC, CODEBOOK_MAGIC, FORMAT_VERSION};
pub use synth::{change_rate_distribution, gen_clip, gen_clips, percentile_threshold, DynamicsConfig};
