//! The shared-weight adaptive network.

mod arch;
mod bank;
mod bundle;
mod net;

pub use arch::{ArchSpec, BitWidthSet, LayerSpec, SwapMask};
pub use bank::{BankSharing, BnState, PrecisionBank, BN_MOMENTUM};
pub use bundle::{
    export_bundle, load_bundle, read_bundle, write_bundle, BundleSummary, BUNDLE_MAGIC,
    BUNDLE_VERSION,
};
pub(crate) use bundle::{read_banks, read_header, write_banks, write_header};
pub use net::{
    AdaptiveNet, BnMode, BnObservation, ExecPlan, ForwardCtx, LayerParams, ParamId, WeightStore,
};
