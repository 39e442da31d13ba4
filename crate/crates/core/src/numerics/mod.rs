//! Dense tensors, the reverse-mode tape, named parameter storage and a
//! finite-difference gradient audit.

mod tape;
mod tensor;

use std::collections::BTreeMap;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, log_softmax, log_sum_exp, sigmoid, softmax, Tensor};

use crate::error::{Result, SsnnError};

/// Named tensors with deterministic (lexicographic) iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.slots.contains_key(name) {
            return Err(SsnnError::contract(format!("parameter {name} registered twice")));
        }
        self.slots.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name)
    }

    /// Looks up a slot that the caller knows to exist.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.slots
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Replaces the value of an existing slot; the shape may not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.slots.get_mut(name) {
            None => Err(SsnnError::contract(format!("unknown parameter {name}"))),
            Some(slot) if slot.shape() != value.shape() => Err(SsnnError::contract(format!(
                "parameter {name} has shape {:?}, new value {:?}",
                slot.shape(),
                value.shape()
            ))),
            Some(slot) => {
                *slot = value;
                Ok(())
            }
        }
    }

    /// Mutable view of a slot's entries (shape stays fixed).
    pub fn entries_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.slots.get_mut(name).map(|t| t.data_mut())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.slots.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.slots.keys()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_entries(&self) -> usize {
        self.slots.values().map(Tensor::len).sum()
    }

    /// Moves every slot of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, t) in other.slots {
            self.register(&name, t)?;
        }
        Ok(())
    }

    /// The slots whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            slots: self
                .slots
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Worst entry as (parameter, flat index).
    pub worst: Option<(String, usize)>,
    pub per_param: BTreeMap<String, f64>,
    pub entries_checked: usize,
}

/// Compares tape gradients of `loss_fn` against central differences.
///
/// `loss_fn` builds a scalar loss on a fresh tape from the given parameter
/// values. Only parameters accepted by `filter` are perturbed. The error per
/// entry is `|analytic − fd| / max(1, |fd|)`.
pub fn grad_check<F>(
    params: &ParamStore,
    step: f64,
    filter: impl Fn(&str) -> bool,
    loss_fn: F,
) -> Result<GradCheck>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(SsnnError::contract(format!("grad_check step must be > 0, got {step}")));
    }
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let v = loss_fn(p, &mut tape)?;
        Ok(tape.scalar(v))
    };

    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    let first = tape.scalar(loss);
    let analytic = tape.backward(loss)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(SsnnError::NonDeterministic { first, second });
    }

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        per_param: BTreeMap::new(),
        entries_checked: 0,
    };
    let mut probe = params.clone();
    for (name, value) in params.iter() {
        if !filter(name) {
            continue;
        }
        let grad = analytic.get(name).ok_or_else(|| {
            SsnnError::Diagnostic(format!("parameter {name} was not bound on the tape"))
        })?;
        let mut worst_here: f64 = 0.0;
        for j in 0..value.len() {
            let orig = value.data()[j];
            probe.entries_mut(name).unwrap()[j] = orig + step;
            let plus = eval(&probe)?;
            probe.entries_mut(name).unwrap()[j] = orig - step;
            let minus = eval(&probe)?;
            probe.entries_mut(name).unwrap()[j] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let err = (grad.data()[j] - fd).abs() / fd.abs().max(1.0);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), j));
            }
            worst_here = worst_here.max(err);
            report.entries_checked += 1;
        }
        report.per_param.insert(name.clone(), worst_here);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_grad_check() {
        let mut store = ParamStore::new();
        store
            .register("w", Tensor::vector(vec![0.5, -1.5, 2.0]))
            .unwrap();
        let report = grad_check(&store, 1e-5, |_| true, |p, t| {
            let w = t.param("w", p.expect("w"));
            let sq = t.mul(w, w);
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
    }

    #[test]
    fn ignored_param_has_exact_zero_gradient() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        store.register("b", Tensor::vector(vec![3.0])).unwrap();
        let mut t = Tape::new();
        let vars = t.bind_store(&store);
        let loss = t.sum(vars["a"]);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get("b").unwrap().data(), &[0.0]);
    }

    #[test]
    fn nondeterministic_loss_is_detected() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::scalar(1.0)).unwrap();
        let counter = std::cell::Cell::new(0.0);
        let res = grad_check(&store, 1e-5, |_| true, |p, t| {
            counter.set(counter.get() + 1.0);
            let a = t.param("a", p.expect("a"));
            Ok(t.affine(a, 1.0, counter.get()))
        });
        assert!(matches!(res, Err(SsnnError::NonDeterministic { .. })));
    }

    #[test]
    fn bad_step_is_rejected() {
        let store = ParamStore::new();
        let res = grad_check(&store, 0.0, |_| true, |_, t| Ok(t.constant(Tensor::scalar(0.0))));
        assert!(res.is_err());
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::scalar(1.0)).unwrap();
        assert!(store.register("a", Tensor::scalar(2.0)).is_err());
        assert!(store.set("a", Tensor::vector(vec![1.0, 2.0])).is_err());
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn three_layer_tanh_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let dims = [4, 5, 5, 3];
        for l in 0..3 {
            store
                .register(&format!("w{l}"), random_tensor(&mut rng, &[dims[l + 1], dims[l]], 0.8))
                .unwrap();
            store
                .register(&format!("b{l}"), random_tensor(&mut rng, &[dims[l + 1]], 0.3))
                .unwrap();
        }
        let input: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = grad_check(&store, 1e-5, |_| true, |p, t| {
            let vars = t.bind_store(p);
            let mut h = t.constant_vec(&input);
            for l in 0..3 {
                let a = t.matvec(vars[&format!("w{l}")], h);
                let a = t.add(a, vars[&format!("b{l}")]);
                h = t.tanh(a);
            }
            Ok(t.log_sum_exp(h))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
