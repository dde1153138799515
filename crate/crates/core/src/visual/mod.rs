mod encoder;
mod epa;
mod volume;

pub use encoder::{blank_volume, StageInput, VisualConfig, VisualEncoder, VisualPrompting, VisualStage};
pub use epa::{cwa, epa_prompt_forward, swa, EpaBlock, GlobalPromptTransform, GlobalTransformKind, VisualPromptSet};
pub use volume::{decode_volume, merge_index, parse_volume_header, patch_grid, patchify, Volume, MAX_VOXELS, VOLUME_FORMAT};
