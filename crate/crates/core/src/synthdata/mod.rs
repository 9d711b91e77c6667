//! Synthetic profile/frontal pairs with exact ground-truth correspondence
//! fields and texture maps.

mod dataset;
mod identity;
mod render;

pub use dataset::{
    build_dataset, generate_pair, load_dataset, parse_yaws, save_dataset, Dataset, SampleRecord,
    Split, FORMAT_VERSION, MANIFEST_FILE, PAYLOAD_FILE,
};
pub use identity::{
    make_identity, render_ground_truth_texture, Blob, IdentitySpec, Stripe, StripeAxis,
    TextureParams,
};
pub use render::{background_gray, render_view, View};
