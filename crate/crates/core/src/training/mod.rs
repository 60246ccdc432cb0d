//! Training stages: masked-LM pretraining and target fine-tuning, causal LMs,
//! offline training-set construction, editor training and discriminators.

mod data;
mod disc;
mod editor;
mod lm;

pub use data::{build_training_set, load_training_set, save_training_set, TrainSample};
pub use disc::{disc_loss, train_discriminator, DiscTrainConfig};
pub use editor::{
    editor_train_step, mean_disparity, rollout, train_editor, weighted_nll, weighted_nll_and_grad, EditorTrainConfig, EditorTrainReport,
    IterationRecord, Rollout, StepDiagnostics, StepRecord,
};
pub use lm::{finetune_scorer, pretrain_mlm, train_causal, train_mlm, LmTrainConfig, LossCurve};
