use crate::autodiff::{Gradients, Value, Var};
use crate::error::{Error, Result};

/// Gradients of named parameters, in the order the parameters were declared.
/// Every entry has the shape of its primal; parameters the loss ignores get
/// exact zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    names: Vec<String>,
    grads: Vec<Value>,
}

impl GradBundle {
    /// Collects `(name, var, primal)` triples out of a reverse pass.
    pub fn collect<'a, I>(grads: &Gradients, params: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, Var, &'a Value)>,
    {
        let (names, grads) = params
            .into_iter()
            .map(|(name, var, primal)| (name.to_string(), grads.get_or_zero(var, primal)))
            .unzip();
        Self { names, grads }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.names.iter().position(|n| n == name).map(|i| &self.grads[i])
    }

    pub fn at(&self, index: usize) -> &Value {
        &self.grads[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.names.iter().map(String::as_str).zip(&self.grads)
    }

    /// All gradients flattened in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| g.as_slice().iter().copied()).collect()
    }

    /// First parameter with a non-finite gradient entry.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter()
            .find(|(_, g)| g.as_slice().iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    /// Elementwise sum of two bundles over the same parameters.
    pub fn add(&self, other: &GradBundle) -> Result<GradBundle> {
        if self.names != other.names {
            return Err(Error::arg("gradient bundles cover different parameters"));
        }
        let grads = self
            .grads
            .iter()
            .zip(&other.grads)
            .map(|(a, b)| {
                if !a.same_shape(b) {
                    return Err(Error::dim("GradBundle::add", a.describe(), b.describe()));
                }
                let mut out = a.clone();
                for (o, v) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
                    *o += v;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            names: self.names.clone(),
            grads,
        })
    }
}
