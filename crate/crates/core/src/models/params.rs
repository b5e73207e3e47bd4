use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::stochastic::RngStream;

/// Which parameter family a tensor belongs to: body `θ` or halting heads `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamTag {
    Body,
    Head,
}

impl ParamTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamTag::Body => "body",
            ParamTag::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "body" => Ok(ParamTag::Body),
            "head" => Ok(ParamTag::Head),
            other => Err(Error::Checkpoint(format!("unknown parameter tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tag: ParamTag,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered, named parameter tensors of one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Fan-in of a weight tensor: every extent but the first.
fn fan_in(shape: &[usize]) -> usize {
    shape.iter().skip(1).product::<usize>().max(1)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tag: ParamTag, shape: &[usize], values: Vec<f64>) -> usize {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.params.push(Param {
            name: name.into(),
            tag,
            shape: shape.to_vec(),
            values,
        });
        self.params.len() - 1
    }

    /// Normal weights with variance `gain / fan_in`.
    pub fn push_scaled(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        gain: f64,
        rng: &mut RngStream,
    ) -> usize {
        let std = (gain / fan_in(shape) as f64).sqrt();
        let n = shape.iter().product();
        let values = (0..n).map(|_| std * rng.normal()).collect();
        self.push(name, ParamTag::Body, shape, values)
    }

    pub fn push_constant(&mut self, name: impl Into<String>, tag: ParamTag, shape: &[usize], value: f64) -> usize {
        let n = shape.iter().product();
        self.push(name, tag, shape, vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn scalar_count_tagged(&self, tag: ParamTag) -> usize {
        self.params.iter().filter(|p| p.tag == tag).map(|p| p.values.len()).sum()
    }

    /// Records every tensor as a leaf on `tape`, in store order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<Vec<Var<'t>>> {
        self.params.iter().map(|p| tape.leaf(p.values.clone(), &p.shape)).collect()
    }

    /// Adjoints of bound leaves, one vector per tensor (zeros when unused).
    pub fn gradients(&self, grads: &Gradients, bound: &[Var<'_>]) -> Vec<Vec<f64>> {
        bound.iter().map(|v| grads.wrt(*v)).collect()
    }

    /// Zero-filled buffers shaped like the store.
    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.values.len()]).collect()
    }

    /// Overwrites the values of `other`'s tensors by name, checking tags and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array `{}`", p.name)))?;
            if src.shape != p.shape || src.tag != p.tag {
                return Err(Error::Checkpoint(format!(
                    "array `{}` is {:?} {:?}, expected {:?} {:?}",
                    p.name, src.tag, src.shape, p.tag, p.shape
                )));
            }
            p.values.clone_from(&src.values);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_by_tag() {
        let mut s = ParamStore::new();
        s.push_constant("w", ParamTag::Body, &[2, 3], 0.0);
        s.push_constant("h", ParamTag::Head, &[1], -3.0);
        assert_eq!(s.scalar_count(), 7);
        assert_eq!(s.scalar_count_tagged(ParamTag::Head), 1);
        assert_eq!(s.find("h"), Some(1));
    }

    #[test]
    fn scaled_init_variance() {
        let mut s = ParamStore::new();
        let mut rng = RngStream::new(0, 0);
        let i = s.push_scaled("w", &[200, 50], 2.0, &mut rng);
        let v = &s.get(i).values;
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.004, "{var}");
    }

    #[test]
    fn load_checks_shapes() {
        let mut a = ParamStore::new();
        a.push_constant("w", ParamTag::Body, &[2], 1.0);
        let mut b = ParamStore::new();
        b.push_constant("w", ParamTag::Body, &[3], 1.0);
        assert!(a.load_from(&b).is_err());
    }
}
