//! Dev scratch: locate seeds for the k:nu resonances and test PRNM traces.
use resonance_core::continuation::ContinuationSettings;
use resonance_core::hbm::HarmonicGrid;
use resonance_core::model::build_duffing;
use resonance_core::oracle::{self, IcGrid, SweepOptions};
use resonance_core::prnm::{self, ResonanceSpec};
use resonance_core::workflows::{self, NfrcOptions};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args[0].as_str() {
        "sweep" => {
            // sweep f omega_lo omega_hi n k nu [gridpts extent]
            let f: f64 = args[1].parse().unwrap();
            let lo: f64 = args[2].parse().unwrap();
            let hi: f64 = args[3].parse().unwrap();
            let n: usize = args[4].parse().unwrap();
            let k: usize = args[5].parse().unwrap();
            let nu: usize = args[6].parse().unwrap();
            let pts: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(5);
            let extent: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(2.5);
            let model = build_duffing(1.0, 0.01, 1.0, 1.0, f).unwrap();
            let sweep = SweepOptions {
                steady_tol: 1e-5,
                max_periods: 3000,
                ..SweepOptions::for_subharmonic(nu)
            };
            for i in 0..n {
                let omega = lo + (hi - lo) * i as f64 / (n.max(2) - 1) as f64;
                let grid = IcGrid::centered(extent, pts);
                match oracle::seed_isola(&model, f, omega, nu, &grid, &sweep) {
                    Ok(res) => {
                        let mut desc: Vec<String> = Vec::new();
                        for a in &res.attractors {
                            let ak = a.coeffs.amplitude_phase(0, k).amplitude;
                            desc.push(format!(
                                "pf={} A_k={:.3e} A_nu={:.3e}",
                                a.period_factor,
                                ak,
                                a.coeffs.amplitude_phase(0, nu).amplitude
                            ));
                        }
                        println!("omega={omega:.3} attractors={} [{}]", res.attractors.len(), desc.join(" | "));
                    }
                    Err(e) => println!("omega={omega:.3} error: {e}"),
                }
            }
        }
        "prnm" => {
            // prnm f omega k nu [pts extent wlo whi]
            let f: f64 = args[1].parse().unwrap();
            let omega: f64 = args[2].parse().unwrap();
            let k: usize = args[3].parse().unwrap();
            let nu: usize = args[4].parse().unwrap();
            let pts: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(5);
            let extent: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(2.5);
            let wlo: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(omega * 0.5);
            let whi: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(omega * 2.0);
            let model = build_duffing(1.0, 0.01, 1.0, 1.0, f).unwrap();
            let spec = ResonanceSpec::new(k, nu, 0).unwrap();
            let settings = ContinuationSettings::default();
            let sweep = SweepOptions {
                steady_tol: 1e-5,
                max_periods: 3000,
                ..SweepOptions::for_subharmonic(nu)
            };
            let grid = IcGrid::centered(extent, pts);
            let seed_x = workflows::seed_from_sweep(&model, f, omega, &spec, &grid, &sweep, &settings)
                .expect("sweep seed");
            println!("seed found: A_k = {:.4e}", seed_x.amplitude_phase(0, k).amplitude);
            let opts = prnm::PrnmTraceOptions { omega_bounds: Some((wlo, whi)), bidirectional: true };
            let mut nopts = NfrcOptions::primary((wlo, whi));
            nopts.nu = nu;
            let branch = workflows::prnm_via_forced_branch(&model, &spec, &seed_x, omega, f, &nopts, &settings, &opts)
                .expect("prnm trace");
            println!(
                "branch: {} points, termination {:?}, turning points: {}",
                branch.points.len(),
                branch.termination,
                branch.turning_points.len()
            );
            let first = branch.points.first().unwrap();
            let last = branch.points.last().unwrap();
            println!(
                "omega range [{:.4}, {:.4}] f_eq range [{:.4e}, {:.4e}]",
                first.omega, last.omega, first.f_eq, last.f_eq
            );
            let mut worst = 0.0f64;
            for p in &branch.points {
                let grid = HarmonicGrid::new(p.coeffs.n_h, nu, p.omega).unwrap();
                let phi = prnm::retrieve_phase_lag(&p.coeffs, &spec, &grid).unwrap();
                worst = worst.max((phi - spec.target_phase()).abs());
            }
            println!("max |phi - target| = {worst:.3e}");
            println!("crossings of f_eq = {f}: {}", branch.level_crossings(f));
            let mins: Vec<f64> = branch.points.iter().map(|p| p.f_eq).collect();
            println!("f_eq min {:.4e} max {:.4e}", mins.iter().cloned().fold(f64::INFINITY, f64::min), mins.iter().cloned().fold(0.0, f64::max));
        }
        "prnmnfrc" => {
            // prnmnfrc f lo hi k [wlo whi]
            let f: f64 = args[1].parse().unwrap();
            let lo: f64 = args[2].parse().unwrap();
            let hi: f64 = args[3].parse().unwrap();
            let k: usize = args[4].parse().unwrap();
            let wlo: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(lo * 0.5);
            let whi: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(hi * 3.0);
            let model = build_duffing(1.0, 0.01, 1.0, 1.0, f).unwrap();
            let spec = ResonanceSpec::new(k, 1, 0).unwrap();
            let mut options = NfrcOptions::primary((lo, hi));
            options.spec = Some(spec);
            let settings = ContinuationSettings { max_points: 4000, ..Default::default() };
            let branch = workflows::nfrc_sweep(&model, f, &options, &settings).unwrap();
            println!("nfrc points {} termination {:?}", branch.points.len(), branch.termination);
            let seed = workflows::prnm_seed_from_nfrc(&branch, &spec, f).expect("nfrc seed");
            println!("seed omega {:.4} gain {:.4e}", seed.omega, seed.gain);
            let opts = prnm::PrnmTraceOptions { omega_bounds: Some((wlo, whi)), bidirectional: true };
            let pbranch = prnm::continue_prnm(&model, &spec, &seed, &settings, &opts).expect("prnm");
            println!(
                "prnm branch: {} points, termination {:?}, turning: {}",
                pbranch.points.len(),
                pbranch.termination,
                pbranch.turning_points.len()
            );
            let first = pbranch.points.first().unwrap();
            let last = pbranch.points.last().unwrap();
            println!(
                "omega range [{:.4}, {:.4}] f_eq range [{:.4e}, {:.4e}] gain range [{:.4e}, {:.4e}]",
                first.omega, last.omega, first.f_eq, last.f_eq, first.gain, last.gain
            );
            let mut worst = 0.0f64;
            for p in &pbranch.points {
                let grid = HarmonicGrid::new(p.coeffs.n_h, 1, p.omega).unwrap();
                let phi = prnm::retrieve_phase_lag(&p.coeffs, &spec, &grid).unwrap();
                worst = worst.max((phi - spec.target_phase()).abs());
            }
            println!("max |phi - target| = {worst:.3e}");
            // low-amplitude end diagnostics
            let min_amp = pbranch
                .points
                .iter()
                .min_by(|a, b| {
                    let aa = a.coeffs.amplitude_phase(0, k).amplitude;
                    let bb = b.coeffs.amplitude_phase(0, k).amplitude;
                    aa.partial_cmp(&bb).unwrap()
                })
                .unwrap();
            println!(
                "min-amplitude point: A_k={:.3e} omega={:.6} gain={:.6e}",
                min_amp.coeffs.amplitude_phase(0, k).amplitude,
                min_amp.omega,
                min_amp.gain
            );
        }
        "prnmscan" => {
            // prnmscan f omega k nu wlo whi : phase-scan seed then prnm
            let f: f64 = args[1].parse().unwrap();
            let omega: f64 = args[2].parse().unwrap();
            let k: usize = args[3].parse().unwrap();
            let nu: usize = args[4].parse().unwrap();
            let wlo: f64 = args[5].parse().unwrap();
            let whi: f64 = args[6].parse().unwrap();
            let model = build_duffing(1.0, 0.01, 1.0, 1.0, f).unwrap();
            let spec = ResonanceSpec::new(k, nu, 0).unwrap();
            let settings = ContinuationSettings { max_points: 2500, ..Default::default() };
            let seed_x = workflows::seed_by_phase_scan(&model, &spec, f, omega, 8 * nu, &settings)
                .expect("phase-scan seed");
            println!("seed found: A_k = {:.4e}", seed_x.amplitude_phase(0, k).amplitude);
            let opts = prnm::PrnmTraceOptions { omega_bounds: Some((wlo, whi)), bidirectional: true };
            let mut nopts = NfrcOptions::primary((wlo, whi));
            nopts.nu = nu;
            let branch = workflows::prnm_via_forced_branch(&model, &spec, &seed_x, omega, f, &nopts, &settings, &opts)
                .expect("prnm trace");
            println!(
                "branch: {} points, termination {:?}, turning points: {}",
                branch.points.len(),
                branch.termination,
                branch.turning_points.len()
            );
            let first = branch.points.first().unwrap();
            let last = branch.points.last().unwrap();
            println!(
                "omega range [{:.4}, {:.4}] f_eq range [{:.4e}, {:.4e}]",
                first.omega, last.omega, first.f_eq, last.f_eq
            );
            let mut worst = 0.0f64;
            for p in &branch.points {
                let grid = HarmonicGrid::new(p.coeffs.n_h, nu, p.omega).unwrap();
                let phi = prnm::retrieve_phase_lag(&p.coeffs, &spec, &grid).unwrap();
                worst = worst.max((phi - spec.target_phase()).abs());
            }
            println!("max |phi - target| = {worst:.3e}");
            println!("crossings of f_eq = {f}: {}", branch.level_crossings(f));
            let feqs: Vec<f64> = branch.points.iter().map(|p| p.f_eq).collect();
            println!("f_eq min {:.4e} max {:.4e}", feqs.iter().cloned().fold(f64::INFINITY, f64::min), feqs.iter().cloned().fold(0.0, f64::max));
        }
        "scan23" => {
            // scan23 k nu f wlo whi n : phase-scan seeding across omega
            let k: usize = args[1].parse().unwrap();
            let nu: usize = args[2].parse().unwrap();
            let f: f64 = args[3].parse().unwrap();
            let wlo: f64 = args[4].parse().unwrap();
            let whi: f64 = args[5].parse().unwrap();
            let n: usize = args[6].parse().unwrap();
            let model = build_duffing(1.0, 0.01, 1.0, 1.0, f).unwrap();
            let spec = ResonanceSpec::new(k, nu, 0).unwrap();
            let settings = ContinuationSettings::default();
            for i in 0..n {
                let omega = wlo + (whi - wlo) * i as f64 / (n.max(2) - 1) as f64;
                match workflows::seed_by_phase_scan(&model, &spec, f, omega, 8 * nu, &settings) {
                    Ok(x) => {
                        let a = x.amplitude_phase(0, k);
                        println!("omega={omega:.3} HIT A_k={:.4e} phi={:.4}", a.amplitude, a.phase);
                    }
                    Err(_) => println!("omega={omega:.3} none"),
                }
            }
        }
        "forced" => {
            // forced f omega k nu [pts extent wlo whi] : trace forced k:nu branch from sweep seed
            let f: f64 = args[1].parse().unwrap();
            let omega: f64 = args[2].parse().unwrap();
            let k: usize = args[3].parse().unwrap();
            let nu: usize = args[4].parse().unwrap();
            let pts: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(7);
            let extent: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(3.5);
            let wlo: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(omega * 0.6);
            let whi: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(omega * 1.6);
            let model = build_duffing(1.0, 0.01, 1.0, 1.0, f).unwrap();
            let spec = ResonanceSpec::new(k, nu, 0).unwrap();
            let settings = ContinuationSettings { max_points: 3000, ..Default::default() };
            let sweep = SweepOptions {
                steady_tol: 1e-5,
                max_periods: 3000,
                ..SweepOptions::for_subharmonic(nu)
            };
            let grid = IcGrid::centered(extent, pts);
            let seed_x = workflows::seed_from_sweep(&model, f, omega, &spec, &grid, &sweep, &settings)
                .expect("sweep seed");
            let seed_x = workflows::canonicalize_family(&seed_x, &spec);
            let pol = seed_x.amplitude_phase(0, k);
            println!("seed A_k={:.4e} phi_k={:.4} target={:.4}", pol.amplitude, pol.phase, spec.target_phase());
            for j in 1..=seed_x.n_h {
                let p = seed_x.amplitude_phase(0, j);
                if p.amplitude > 1e-4 {
                    println!("  slot {j}: A={:.4e} phi={:.4}", p.amplitude, p.phase);
                }
            }
            let mut options = NfrcOptions::primary((wlo, whi));
            options.nu = nu;
            options.spec = Some(spec);
            let branch = workflows::nfrc_from_seed(&model, f, &seed_x, omega, &options, &settings)
                .expect("nfrc trace");
            println!("points {} termination {:?} stalled {}", branch.points.len(), branch.termination, branch.stalled);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut philo = f64::INFINITY;
            let mut phihi = f64::NEG_INFINITY;
            for p in &branch.points {
                lo = lo.min(p.omega);
                hi = hi.max(p.omega);
                let pol = p.coeffs.amplitude_phase(0, k);
                if pol.amplitude > 1e-6 {
                    philo = philo.min(pol.phase);
                    phihi = phihi.max(pol.phase);
                }
            }
            println!("omega in [{lo:.4}, {hi:.4}], phi_k in [{philo:.4}, {phihi:.4}]");
            for e in &branch.events {
                println!("{:?} omega={:.6} refined={}", e.kind, e.point.omega, e.refined);
            }
        }
        "nfrc" => {
            // nfrc f lo hi  (duffing primary sweep with events)
            let f: f64 = args[1].parse().unwrap();
            let lo: f64 = args[2].parse().unwrap();
            let hi: f64 = args[3].parse().unwrap();
            let k: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1);
            let model = build_duffing(1.0, 0.01, 1.0, 1.0, f).unwrap();
            let mut options = NfrcOptions::primary((lo, hi));
            options.spec = Some(ResonanceSpec::new(k, 1, 0).unwrap());
            let settings = ContinuationSettings { max_points: 4000, ..Default::default() };
            let branch = workflows::nfrc_sweep(&model, f, &options, &settings).unwrap();
            println!("points {} termination {:?}", branch.points.len(), branch.termination);
            for e in &branch.events {
                println!(
                    "{:?} omega={:.6} A_k={:.4e} refined={}",
                    e.kind,
                    e.point.omega,
                    e.point.coeffs.amplitude_phase(0, k).amplitude,
                    e.refined
                );
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
