use parisi_core::cascade::{mc_psi, sample_cascade, CascadeBudget};
use parisi_core::paths::StepPath;
use parisi_core::pde::{psi_value, GridSpec};
use parisi_core::spin::SpinMeasure;

fn main() {
    let mu = SpinMeasure::ising();
    let q2 = StepPath::scalar(vec![0.0, 0.3, 0.6], vec![0.15, 0.4, 0.6]).unwrap();
    let truth = psi_value(&mu, &q2, &GridSpec::default_for_dim(1)).unwrap();
    println!("pde truth: {truth:.6}");
    for (m, lb) in [(1000usize, 250_000usize), (4000, 1_000_000)] {
        let mut acc = 0.0;
        let n = 40;
        for rep in 0..n {
            let s = sample_cascade(&q2, m, lb, 1000 + rep).unwrap();
            acc += s.weights.iter().map(|w| w * w).sum::<f64>();
        }
        println!("M {m} leaf {lb}: widths {:?} E sum w^2 = {:.4} (want 0.4)",
            sample_cascade(&q2, m, lb, 1).unwrap().widths, acc / n as f64);
    }
    for (m, lb, reps) in [(1000usize, 250_000usize, 200usize), (1000, 1_000_000, 100), (4000, 2_000_000, 60)] {
        let b = CascadeBudget { reps, truncation: m, leaf_budget: lb, field_pairs: 6, seed: 77 };
        let e = mc_psi(&mu, &q2, &b).unwrap();
        println!("M {m} leaf {lb} reps {reps}: mean {:.6} se {:.6}  (pde {truth:.6})", e.mean, e.se);
    }
}
