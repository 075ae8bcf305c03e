// scratch: SE scaling under dataset duplication
use fastjm::em::{em_fit, EmConfig};
use fastjm::inference::standard_errors;
use fastjm::model::Dataset;
use fastjm::simulate::{simulate_dataset, SimConfig};

fn main() {
    let ds = simulate_dataset(&SimConfig { n: 150, seed: 101, ..SimConfig::default() }).unwrap();
    let mut doubled = ds.subjects().to_vec();
    for s in ds.subjects() {
        let mut s2 = s.clone();
        s2.id = format!("{}dup", s.id);
        doubled.push(s2);
    }
    let ds2 = Dataset::new(doubled, 2, 3, 2, 2).unwrap();
    let cfg = EmConfig { tol: 1e-8, max_iter: 8000, ..EmConfig::default() };
    let fit1 = em_fit(&ds, &cfg).unwrap();
    let fit2 = em_fit(&ds2, &cfg).unwrap();
    println!("iters {} vs {}; conv {} {}", fit1.iterations, fit2.iterations, fit1.converged, fit2.converged);
    println!("beta1 {:?}", fit1.params.beta.as_slice());
    println!("beta2 {:?}", fit2.params.beta.as_slice());
    println!("nu1_1 {:?}  nu2_1 {:?}", fit1.params.causes[0].nu.as_slice(), fit2.params.causes[0].nu.as_slice());
    let (layout, se1) = standard_errors(&ds, &fit1).unwrap();
    let (_, se2) = standard_errors(&ds2, &fit2).unwrap();
    for j in 0..se1.len() {
        println!("{:22} se1 {:.6} se2 {:.6} ratio {:.4}", layout.names()[j], se1[j], se2[j], se2[j]/se1[j]);
    }
}
