//! Fixtures shared by the subproblem benchmarks.

use aqn::oracle::{make_logistic, Dataset};
use aqn::{DirectionMemory, MemorySnapshot, Oracle, UpdateRule, Vector};

/// Preprocessed synthetic logistic regression with `d + 1` unknowns.
pub fn logistic_oracle(n: usize, d: usize, seed: u64) -> Oracle {
    let mut data = Dataset::synthetic(n, d, seed);
    data.preprocess();
    make_logistic(&data, 1e-3).expect("synthetic labels are ±1")
}

/// Point, gradient and a memory filled by `k` updates along a short path of
/// normalized gradient steps from the origin.
pub struct Fixture {
    pub oracle: Oracle,
    pub x: Vector,
    pub grad: Vector,
    pub memory: DirectionMemory,
}

impl Fixture {
    pub fn new(oracle: Oracle, rule: UpdateRule, k: usize, seed: u64) -> Self {
        let dim = oracle.dim();
        let mut memory = DirectionMemory::new(rule, k, dim, 1e-6, seed).expect("valid memory size");
        let mut x = Vector::zeros(dim);
        let mut grad = oracle.gradient(&x);
        for _ in 0..k {
            memory.update(&oracle, &x, &grad).expect("memory update");
            x -= &grad * (0.1 / grad.norm());
            grad = oracle.gradient(&x);
        }
        Self { oracle, x, grad, memory }
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        self.memory.snapshot(&self.x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_fills_memory() {
        let f = Fixture::new(logistic_oracle(400, 80, 1), UpdateRule::ForwardEstimate, 10, 0);
        assert_eq!(f.memory.len(), 10);
        assert_eq!(f.snapshot().k(), 10);
        let mut m = f.memory.clone();
        assert_eq!(m.update(&f.oracle, &f.x, &f.grad).unwrap().added, 1);
    }
}
