use std::cell::RefCell;

use l2tww_autodiff::{Graph, Tensor, Var};

use crate::error::Result;
use crate::params::Bound;
use crate::transfer::{total_loss, TransferBatchReport, TransferModel};

/// The two losses of the inner problem on one fixed batch.
pub trait Objective {
    /// `L_org(θ)`.
    fn org(&self, graph: &Graph, theta: &Bound) -> Result<Var>;
    /// `L_wfm(θ, φ)`.
    fn wfm(&self, graph: &Graph, theta: &Bound, phi: &Bound) -> Result<Var>;
    fn beta(&self) -> f64;
    /// `L_org(θ) + β·L_wfm(θ, φ)`.
    fn total(&self, graph: &Graph, theta: &Bound, phi: &Bound) -> Result<Var> {
        total_loss(&self.org(graph, theta)?, &self.wfm(graph, theta, phi)?, self.beta())
    }
}

/// A transfer model on one batch, with cached source features.
pub struct TransferProblem<'a> {
    pub model: &'a TransferModel,
    pub x: &'a Tensor,
    pub y: &'a [usize],
    pub source: &'a [Vec<Tensor>],
    last: RefCell<Option<TransferBatchReport>>,
}

impl<'a> TransferProblem<'a> {
    pub fn new(model: &'a TransferModel, x: &'a Tensor, y: &'a [usize], source: &'a [Vec<Tensor>]) -> Self {
        Self {
            model,
            x,
            y,
            source,
            last: RefCell::new(None),
        }
    }

    /// Statistics of the most recent [`Objective::total`] evaluation.
    pub fn take_report(&self) -> Option<TransferBatchReport> {
        self.last.borrow_mut().take()
    }
}

impl Objective for TransferProblem<'_> {
    fn org(&self, graph: &Graph, theta: &Bound) -> Result<Var> {
        let feats = self.model.target.forward(theta, &graph.constant(self.x.clone()))?;
        Ok(feats.logits.cross_entropy(self.y)?)
    }

    fn wfm(&self, graph: &Graph, theta: &Bound, phi: &Bound) -> Result<Var> {
        let src = TransferModel::bind_sources(graph, self.source);
        let fwd = self
            .model
            .forward(graph, theta, phi, &graph.constant(self.x.clone()), &src)?;
        Ok(fwd.wfm)
    }

    fn beta(&self) -> f64 {
        self.model.beta()
    }

    fn total(&self, graph: &Graph, theta: &Bound, phi: &Bound) -> Result<Var> {
        let src = TransferModel::bind_sources(graph, self.source);
        let fwd = self
            .model
            .forward(graph, theta, phi, &graph.constant(self.x.clone()), &src)?;
        let org = fwd.logits.cross_entropy(self.y)?;
        let total = total_loss(&org, &fwd.wfm, self.beta())?;
        *self.last.borrow_mut() = Some(TransferBatchReport::new(&fwd.terms, &org, &fwd.wfm, &total));
        Ok(total)
    }
}
