use nalgebra::DVector;
use resonance_core::continuation::{ContinuationProblem, ContinuationSettings};
use resonance_core::hbm::HarmonicGrid;
use resonance_core::model::build_duffing;
use resonance_core::workflows::{correct_forced, linear_response, ForcedHbmProblem};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let f: f64 = args[0].parse().unwrap();
    let wlo: f64 = args[1].parse().unwrap();
    let whi: f64 = args[2].parse().unwrap();
    let n: usize = args[3].parse().unwrap();
    let nu: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3);
    let n_h = 8 * nu;
    let model = build_duffing(1.0, 0.01, 1.0, 1.0, f).unwrap();
    let settings = ContinuationSettings::default();
    let problem = ForcedHbmProblem::new(&model, nu, n_h).unwrap();
    let mut prev_sign = 0.0f64;
    for i in 0..=n {
        let omega = wlo + (whi - wlo) * i as f64 / n as f64;
        let grid = HarmonicGrid::new(n_h, nu, omega).unwrap();
        let lin = linear_response(&model, &grid).unwrap();
        let Ok((x, _, _)) = correct_forced(&model, f, &lin, omega, &settings) else {
            println!("omega={omega:.4} driven correction failed");
            continue;
        };
        let u = problem.pack(&x, omega);
        let ext = problem.eval(&u).unwrap();
        let jac = ext.jacobian.view((0, 0), (problem.coeff_len(), problem.coeff_len())).clone_owned();
        let det = jac.lu().determinant();
        let sign = det.signum();
        let marker = if prev_sign != 0.0 && sign != prev_sign { "  <-- SIGN CHANGE" } else { "" };
        println!("omega={omega:.4} A_drv={:.3} det={det:.3e}{marker}", x.amplitude_phase(0, nu).amplitude);
        prev_sign = sign;
    }
}
