use super::params::{Init, ParamSpec};
use super::Result;
use crate::tensor::{AggregateMode, Tape, Var};

pub(crate) fn layer_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.theta.weight"), &[dim, dim], Init::FanIn),
        ParamSpec::new(format!("{prefix}.theta.bias"), &[dim], Init::Zeros),
    ]
}

/// Message passing over `N(i) ∪ {i}`: aggregate with `mode`, apply `θ`, then GELU.
/// `neighbourhoods[i]` must already contain `i`.
pub fn mpgnn_layer_forward(
    tape: &mut Tape,
    h: Var,
    neighbourhoods: &[Vec<usize>],
    weight: Var,
    bias: Var,
    mode: AggregateMode,
) -> Result<Var> {
    let agg = tape.aggregate(h, neighbourhoods, mode)?;
    let lin = tape.matmul(agg, weight)?;
    let lin = tape.add_row(lin, bias)?;
    Ok(tape.gelu(lin)?)
}
