//! Analytic velocity fields for oracle tests.
#![allow(dead_code)]

use anchorflow::flow::{ParamSet, VelocityModel};
use anchorflow::tensor::{Graph, Tensor, Var};
use anchorflow::Result;

/// What an [`Analytic`] model returns for every row.
#[derive(Clone, Copy, Debug)]
pub enum Field {
    /// `v` everywhere.
    Constant(f64),
    /// `T / N`, independent of the state.
    Index,
    /// `-x`.
    Decay,
}

#[derive(Clone, Debug)]
pub struct Analytic {
    pub field: Field,
    pub shape: Vec<usize>,
    pub grid: usize,
    params: ParamSet,
}

impl Analytic {
    pub fn new(field: Field, shape: &[usize], grid: usize) -> Self {
        Analytic { field, shape: shape.to_vec(), grid, params: ParamSet::new() }
    }
}

impl VelocityModel for Analytic {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn state_shape(&self) -> &[usize] {
        &self.shape
    }

    fn grid(&self) -> usize {
        self.grid
    }

    fn forward(&self, g: &mut Graph, _p: &[Var], x: Var, t: &[usize], _dt: &[usize], _c: Option<&Tensor>) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let row: usize = shape[1..].iter().product();
        match self.field {
            Field::Constant(v) => Ok(g.constant(Tensor::full(shape, v))),
            Field::Index => {
                let data = t
                    .iter()
                    .flat_map(|&ti| std::iter::repeat_n(ti as f64 / self.grid as f64, row))
                    .collect();
                Ok(g.constant(Tensor::new(shape, data)?))
            }
            Field::Decay => g.scale(x, -1.0),
        }
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
