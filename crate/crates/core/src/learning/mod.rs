//! Small classifiers, synthetic multi-domain data, local SGD, and the
//! unprotected baseline aggregators.

mod aggregate;
mod data;
mod model;
mod train;

pub use aggregate::{fedadam_round, fedavg, scaffold_round, FedAdamState, ScaffoldClient, ScaffoldState};
pub use data::{synth_base, synth_domains, Dataset, DomainData, DomainSpec};
pub use model::{
    accuracy, cross_domain_matrix, evaluate, loss, loss_and_grad, predict, ModelKind, ModelShape,
    ParamVector,
};
pub use train::{local_train, TrainerConfig};
