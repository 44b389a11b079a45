use parisi_core::cascade::{mc_psi, CascadeBudget};
use parisi_core::paths::StepPath;
use parisi_core::spin::SpinMeasure;

fn main() {
    let mu = SpinMeasure::ising();
    let q = StepPath::scalar(vec![0.0, 0.5], vec![0.2, 0.6]).unwrap();
    for pairs in [1usize, 4, 16] {
        let b = CascadeBudget { reps: 400, truncation: 1000, leaf_budget: 1_000_000, field_pairs: pairs, seed: 17 };
        let e = mc_psi(&mu, &q, &b).unwrap();
        println!("pairs {pairs:3}: mean {:.6} se {:.6}", e.mean, e.se);
    }
    // K=2 with moderate top level
    let q2 = StepPath::scalar(vec![0.0, 0.3, 0.6], vec![0.15, 0.4, 0.6]).unwrap();
    for (m, lb) in [(1000usize, 400_000usize), (2000, 1_600_000)] {
        let b = CascadeBudget { reps: 400, truncation: m, leaf_budget: lb, field_pairs: 2, seed: 29 };
        let e = mc_psi(&mu, &q2, &b).unwrap();
        println!("K2 M {m}: mean {:.6} se {:.6}", e.mean, e.se);
    }
}
