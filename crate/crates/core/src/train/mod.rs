//! Target matching, multibox loss, optimization and the training stages.

mod loops;
mod loss;
mod matching;
mod optim;

pub use loops::{
    finetune_e2e, finetune_grads, train_detector, train_sr, EpochLog, LossParts, Stage, TrainOptions, TrainOutcome,
};
pub use loss::{multibox_loss, multibox_terms, smooth_l1, MultiboxTerms, NEG_POS_RATIO};
pub use matching::{match_priors, MatchResult};
pub use optim::{Adam, StepSchedule};
