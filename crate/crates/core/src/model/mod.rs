pub mod checkpoint;
pub mod config;
pub mod net;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::SdmambaConfig;
pub use net::{
    attention_fusion, center_features, classify, sdspam_forward, sdspam_with_selection,
    sdspem_forward, spatial_selection, stem_forward_eval, stem_forward_train, BoundModel,
    ForwardOutput, ForwardStats, FusionOutput, FusionParams, FusionVars, HeadParams, HeadVars,
    Mode, Prediction, SdmambaModel, StemParams, StemVars,
};
