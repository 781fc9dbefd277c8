//! One optimizer step over a minibatch of independently recorded tapes.

use crate::error::{Error, Result};

use super::optim::Optimizer;
use super::params::ParamStore;
use super::tape::{Tape, Var};

/// Records `graph` for every sample, averages loss and gradients over the
/// batch, then applies `optimizer`. Samples are processed in order, so the
/// result is bit-reproducible.
///
/// Returns the mean loss before the update. A non-finite loss aborts before
/// any parameter is touched.
pub fn minibatch_step<S>(
    params: &mut ParamStore,
    optimizer: &Optimizer,
    batch: &[S],
    mut graph: impl FnMut(&ParamStore, &mut Tape, &S) -> Result<Var>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    params.zero_grads();
    let weight = 1.0 / batch.len() as f32;
    let mut total = 0.0;
    for sample in batch {
        let mut tape = Tape::new();
        let loss = graph(params, &mut tape, sample)?;
        let value = tape.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: params.step_count() as usize,
                loss: value,
            });
        }
        total += value;
        let grads = tape.backward(loss)?;
        params.accumulate(&grads, weight)?;
    }
    optimizer.step(params);
    Ok(total / batch.len() as f64)
}
