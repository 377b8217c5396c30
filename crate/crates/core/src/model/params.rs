use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{io, Scalar, Tensor};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

/// One named tensor of the model: a trainable weight or a buffer such as a
/// batch-norm running statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Ordered collection of named model tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index_of(name).map(move |i| &mut self.params[i].value)
    }

    pub fn by_index(&self, i: usize) -> &Param<S> {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param<S> {
        &mut self.params[i]
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor on `graph`. Trainable tensors become gradient
    /// leaves when `with_grad` is set; everything else is a constant.
    pub fn bind<'g>(&self, graph: &'g Graph<S>, with_grad: bool) -> Bound<'g, S> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let v = if with_grad && p.trainable {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                };
                v.named(p.name.clone())
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Wraps caller-recorded variables, one per tensor in store order.
    pub fn bind_vars<'g>(&self, vars: &[Var<'g, S>]) -> Result<Bound<'g, S>> {
        if vars.len() != self.params.len() {
            return Err(Error::config(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        for (v, p) in vars.iter().zip(&self.params) {
            if v.shape() != p.value.shape() {
                return Err(Error::config(format!(
                    "variable for `{}` has shape {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Bound {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }

    /// Writes one `<name>.vist` file per tensor into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for p in &self.params {
            io::save(&p.value, dir.join(format!("{}.vist", p.name)))?;
        }
        Ok(())
    }

    /// Replaces every tensor from `<name>.vist` files in `dir`. Missing,
    /// extra or reshaped tensors are format errors.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        let mut on_disk: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                e.file_name()
                    .to_str()
                    .and_then(|n| n.strip_suffix(".vist"))
                    .map(str::to_string)
            })
            .collect();
        on_disk.sort();
        if let Some(extra) = on_disk.iter().find(|n| !self.index.contains_key(*n)) {
            return Err(Error::format(extra.clone(), "unexpected parameter in checkpoint"));
        }
        for p in &mut self.params {
            if on_disk.binary_search(&p.name).is_err() {
                return Err(Error::format(p.name.clone(), "parameter missing from checkpoint"));
            }
            let t = io::load::<S>(dir.join(format!("{}.vist", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::format(
                    p.name.clone(),
                    format!("shape {:?}, expected {:?}", t.shape(), p.value.shape()),
                ));
            }
            p.value = t;
        }
        Ok(())
    }
}

/// The store's tensors recorded on one graph.
pub struct Bound<'g, S: Scalar> {
    vars: Vec<Var<'g, S>>,
    index: HashMap<String, usize>,
}

impl<'g, S: Scalar> Bound<'g, S> {
    pub fn var(&self, name: &str) -> Var<'g, S> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var<'g, S>] {
        &self.vars
    }
}
