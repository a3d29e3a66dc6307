//! Tokens, insertion orders and their priors, relative positions, and the
//! growing canvas.

mod canvas;
mod order;
mod relpos;
mod vocab;

pub use canvas::{canvas_insert, Canvas, Insertion};
pub use order::{
    all_orders, apply_order, bbt_center, bbt_generations, bbt_slot_targets, order_bbt, order_l2r,
    order_log_prob, sample_order, InsertionOrder, InsertionTrace, Prior,
};
pub use relpos::{relpos_matrix, RelativePositionMatrix};
pub use vocab::{
    is_reserved, TokenId, TokenSequence, Vocabulary, BLANK, END_OF_SLOT, FIRST_CONTENT, PAD,
};
