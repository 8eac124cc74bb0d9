//! Relative-transformer streams: joint and relay node updates over the
//! spatial skeleton graph and the temporal frame ring.

pub mod attention;
pub mod drop;
pub mod export;
pub mod oracle;
pub mod relpos;
pub mod stream;

pub use attention::{
    attend, attention_scores, relay_init, sju_update, sru_update, tju_update, tru_update, MultiHeadAttention, Slots,
};
pub use drop::drop_attention;
pub use export::{AttentionRecord, Block, Stream};
pub use relpos::{rel_pos_score, RelPosBias, RelPosParams};
pub use stream::{ffn_apply, s_rtr_forward, t_rtr_forward, FeedForward, RtrLayer, RtrStream, StreamKind, UpdateUnit};
