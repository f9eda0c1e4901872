use dcls_core::snn::experiment::{run_experiment, AblationMode, SnnExperimentConfig};
use dcls_core::toy2d::{run_toy2d, Toy2dConfig};

fn main() {
    let arg = std::env::args().nth(1).unwrap_or_default();
    if arg == "toy" {
        for seed in [0u64, 1, 2] {
            let mut accs = Vec::new();
            for size in [1usize, 3, 7] {
                let cfg = Toy2dConfig::desk_scale(size, seed);
                let t0 = std::time::Instant::now();
                let r = run_toy2d::<f32>(&cfg).unwrap();
                accs.push((size, r.final_accuracy, t0.elapsed().as_secs_f32()));
            }
            println!("seed {seed}: {accs:?}");
            // frozen-positions control at size 7, sparse kernel count
            let mut cfg = Toy2dConfig::desk_scale(7, seed);
            cfg.position_lr_scale = 0.0;
            let r = run_toy2d::<f32>(&cfg).unwrap();
            println!("  frozen positions size7: {:.3}", r.final_accuracy);
        }
    } else if arg == "snn" {
        for seed in [0u64] {
            for (label, sparse) in [("sparse", Some(2usize)), ("fc", None)] {
                for mode in [AblationMode::LearnDelays, AblationMode::FixedRandomDelays] {
                    let mut cfg = SnnExperimentConfig::desk_scale(mode, seed);
                    cfg.connections_per_neuron = sparse;
                    let t0 = std::time::Instant::now();
                    let r = run_experiment::<f32>(&cfg).unwrap();
                    println!(
                        "{label} {:?} seed {seed}: cont {:.3} disc {:.3} sparsity {:.3} last-epoch acc {:.3} ({:.1}s)",
                        mode,
                        r.final_continuous,
                        r.final_discrete,
                        r.sparsity,
                        r.rows.last().unwrap().accuracy,
                        t0.elapsed().as_secs_f32()
                    );
                }
            }
        }
    } else if arg == "snn-modes" {
        for mode in [
            AblationMode::NoDelays,
            AblationMode::FixedWeights,
            AblationMode::ConstantSigma,
        ] {
            let mut cfg = SnnExperimentConfig::desk_scale(mode, 0);
            cfg.connections_per_neuron = Some(2);
            let r = run_experiment::<f32>(&cfg).unwrap();
            println!(
                "sparse {:?}: cont {:.3} disc {:.3}",
                mode, r.final_continuous, r.final_discrete
            );
        }
    }
}
