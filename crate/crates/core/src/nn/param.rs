use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::hash::derive_seed;
use crate::tensor::{Init, Tensor};

/// A named, trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    name: String,
    value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value: value.with_requires_grad(),
        }
    }

    pub fn init(name: impl Into<String>, shape: &[usize], init: Init) -> Result<Self> {
        Ok(Param::new(name, Tensor::create(shape, init)?))
    }

    /// Seeded normal init; the per-parameter seed is derived from `name`.
    pub fn normal(name: impl Into<String>, shape: &[usize], seed: u64, std: f64) -> Result<Self> {
        let name = name.into();
        let s = derive_seed(seed, &name);
        Param::init(name, shape, Init::Normal { seed: s, std })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Result<Self> {
        Param::init(name, shape, Init::Zeros)
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Result<Self> {
        Param::init(name, shape, Init::Ones)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn trainable(&self) -> bool {
        self.value.requires_grad()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.value.set_requires_grad(on);
    }

    pub fn fill(&mut self, v: f64) {
        self.value.data_mut().iter_mut().for_each(|x| *x = v);
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value().numel());
        n
    }

    /// Sets every parameter to `v`. Mostly useful for ablation fixtures.
    fn fill(&mut self, v: f64) {
        self.visit_mut(&mut |p| p.fill(v));
    }
}

impl Module for Param {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(self)
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.iter().for_each(|m| m.visit(f))
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.iter_mut().for_each(|m| m.visit_mut(f))
    }
}

impl<M: Module> Module for Option<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        if let Some(m) = self {
            m.visit(f)
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(m) = self {
            m.visit_mut(f)
        }
    }
}

/// Implements [`Module`] by visiting the listed fields in order.
macro_rules! impl_module {
    ($ty:ty => $($field:ident),+ $(,)?) => {
        impl $crate::nn::Module for $ty {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a $crate::nn::Param)) {
                $( $crate::nn::Module::visit(&self.$field, f); )+
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut $crate::nn::Param)) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, f); )+
            }
        }
    };
}
pub(crate) use impl_module;
