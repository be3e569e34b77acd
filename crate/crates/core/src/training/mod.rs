//! Training objectives with analytic gradients, finite-difference checks and
//! a toy router trainer.

pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod toy;

pub use gradcheck::{check_problem, random_problem, relative_error, run_gradient_checks, GradCheckReport, GradProblem, ProblemBounds};
pub use losses::{
    contrastive_loss, contrastive_loss_grad, l1_loss, load_balance_grad, load_balance_loss, log_sum_exp,
    router_contrastive_loss, router_contrastive_loss_grad, softmax, LoadBalance, RouterContrastiveGrad,
};
pub use model::{
    total_loss, Gradients, LinearRouter, LossEvaluation, LossTerms, LossWeights, RoutingLimits, TokenMatrix,
    TrainingBatch,
};
pub use toy::{routing_summary, toy_corpus, toy_train, write_trace, ToyTrainConfig, ToyTrainResult, TraceRecord};
