//! Group key management over a shared key tree.
//!
//! The crate is split along the life of a rekey:
//!
//! * [`keytree`] holds the degree-`k` tree with closed-form node numbering,
//!   member placement and the vacancy/split insertion policy.
//! * [`symcrypto`] models keys as symbolic terms (fresh seeds, hash iterates,
//!   halves of a length-doubling function, XOR combinations) so secrecy can be
//!   decided exactly. A concrete byte mode exists for sizing only.
//! * [`schemes`] turns a join or leave into an ordered [`schemes::RekeyPlan`]
//!   for each supported scheme and replays plans on the member side.
//! * [`batch`] processes a window of joins and leaves at once.
//! * [`sim`] drives scenarios, accounts costs against closed-form
//!   predictions and audits forward/backward secrecy with an attacker
//!   knowledge closure.

pub mod batch;
pub mod error;
pub mod keytree;
pub mod schemes;
pub mod sim;
pub mod symcrypto;

pub use error::{Error, Result};
pub use keytree::{KeyTree, MemberId, NodeId};
pub use symcrypto::KeyTerm;
