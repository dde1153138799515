//! Clinical attribute schema, tabular input and the prompted attribute encoder.

mod encoder;
mod schema;
mod table;

pub use encoder::{tab_prompt_layer_forward, AttributeEncoder, TabularConfig};
pub(crate) use encoder::init_prompt;
pub use schema::{
    AttributeDescriptor, AttributeKind, AttributeRecord, AttributeSchema, AttributeValue, EncodedRecord,
    EncodedValue, ATTRIBUTE_COUNT,
};
pub use table::{parse_tabular_csv, write_tabular_csv, TabularRow};
