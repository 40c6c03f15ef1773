//! Scratch diagnostics, run by hand with --ignored. Not part of the suite.

use lagdyna::agent::PolicyNet;
use lagdyna::envs::{wrap_angle, PendulumEnv, PendulumParams};
use lagdyna::nn::ScalarNetwork;

#[test]
#[ignore]
fn inspect_probe_policy() {
    let dir = std::env::var("PROBE_DIR").expect("set PROBE_DIR");
    let policy = PolicyNet::load_checkpoint(
        std::path::Path::new(&dir).join("policy.net").as_path(),
        2.0,
    )
    .unwrap();
    let (critic, _) =
        ScalarNetwork::load_checkpoint(std::path::Path::new(&dir).join("critic.net").as_path())
            .unwrap();
    println!("log_std = {:.3}", policy.log_std());

    let params = PendulumParams::default();
    let mut env = PendulumEnv::new(params.clone(), 12345).unwrap();
    env.set_state(std::f64::consts::PI, 0.0);
    let mut total = 0.0;
    let mut max_speed = 0.0f64;
    let mut upright_steps = 0usize;
    println!("t     q(wrapped)  qdot     action   reward");
    for t in 0..200 {
        let s = env.state();
        let a = policy.deterministic_action(&s).unwrap();
        let tr = env.step(a).unwrap();
        total += tr.reward;
        let qw = wrap_angle(s.q[0]);
        max_speed = max_speed.max(s.qdot[0].abs());
        if qw.abs() < 0.3 {
            upright_steps += 1;
        }
        if t % 10 == 0 || (qw.abs() < 0.5 && t < 120) {
            println!(
                "{t:<5} {qw:>9.3} {:>8.3} {a:>8.3} {:>8.3}",
                s.qdot[0], tr.reward
            );
        }
        if tr.done {
            break;
        }
    }
    println!("return {total:.1}, max|qdot| {max_speed:.2}, upright steps {upright_steps}");

    // Critic's view at the hanging state and near-upright state.
    for (q, qd) in [(std::f64::consts::PI, 0.0), (0.2, -0.5), (0.0, 0.0)] {
        let mut line = format!("Q(q={q:.2},qd={qd:.2}; a): ");
        for a in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let v = critic.forward(&[q.cos(), q.sin(), qd, a]).unwrap();
            line.push_str(&format!("{a:+.0}:{v:>8.1}  "));
        }
        println!("{line}");
    }
}

#[test]
#[ignore]
fn offline_model_training_probe() {
    use lagdyna::envs::accel_targets;
    use lagdyna::lnn::{
        data_loss, init_calibrated_lagrangian, probe_grid, GeneralizedState, CALIBRATED_CURVATURE,
    };
    use lagdyna::nn::{Activation, NetworkArch};
    use lagdyna::optim::{
        ekf_train_epochs, gradient_train_epochs, AdamParams, GaussianWeightBelief,
        GradientOptimizer,
    };
    use rand::{Rng, SeedableRng};

    let params = PendulumParams::default();
    let arch = NetworkArch::mlp(2, &[32], Activation::Softplus).unwrap();
    let probes = probe_grid(std::f64::consts::PI, params.speed_limit, 5);

    for seed in [0u64, 1, 2] {
        // Collect 5k random-torque transitions.
        let mut env = PendulumEnv::new(params.clone(), seed).unwrap();
        env.reset();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(77));
        let mut transitions = Vec::with_capacity(5000);
        for _ in 0..5000 {
            let a = rng.random_range(-params.torque_limit..params.torque_limit);
            let tr = env.step(a).unwrap();
            let done = tr.done;
            transitions.push(tr);
            if done {
                env.reset();
            }
        }
        let mut samples = accel_targets(&transitions, &params).unwrap();
        for s in &mut samples {
            s.state = GeneralizedState::new(
                s.state.q.iter().map(|&q| wrap_angle(q)).collect(),
                s.state.qdot.clone(),
            );
        }
        let split = samples.len() * 4 / 5;
        let (train, held) = samples.split_at(split);
        let mean =
            held.iter().flat_map(|s| s.target.iter()).sum::<f64>() / held.len() as f64;
        let std = (held
            .iter()
            .flat_map(|s| s.target.iter())
            .map(|y| (y - mean) * (y - mean))
            .sum::<f64>()
            / held.len() as f64)
            .sqrt();

        for hidden in [[32usize].as_slice(), &[32, 32]] {
            let arch = NetworkArch::mlp(2, hidden, Activation::Softplus).unwrap();
            let mut init_rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(178));
            let net0 = init_calibrated_lagrangian(
                &arch, &probes, CALIBRATED_CURVATURE, 8, &mut init_rng,
            )
            .unwrap();

            for lr in [1e-3, 3e-3] {
                let mut net = net0.clone();
                let mut opt = GradientOptimizer::adam(
                    net.param_count(),
                    AdamParams { lr, ..AdamParams::default() },
                );
                let mut line = format!("seed {seed} h{hidden:?} adam lr{lr:.0e} rmse/std:");
                for pass in 1..=60 {
                    let mut pass_rng =
                        rand_chacha::ChaCha8Rng::seed_from_u64(seed * 100 + pass);
                    gradient_train_epochs(&mut net, train, 1, 64, &mut opt, &mut pass_rng)
                        .unwrap();
                    if pass % 10 == 0 || pass <= 3 {
                        let rmse = data_loss(&net, held).unwrap().sqrt();
                        line.push_str(&format!(" p{pass}:{:.3}", rmse / std));
                    }
                }
                println!("{line}");
            }

            for (prior, r_meas) in [(0.1, 0.5), (0.1, 5.0), (0.01, 0.5), (0.01, 5.0)] {
                let mut net = net0.clone();
                let mut belief =
                    GaussianWeightBelief::new(net.weights(), prior, 1e-6, r_meas).unwrap();
                let mut line =
                    format!("seed {seed} h{hidden:?} ekf p{prior} r{r_meas} rmse/std:");
                for pass in 1..=8 {
                    let mut pass_rng =
                        rand_chacha::ChaCha8Rng::seed_from_u64(seed * 100 + pass);
                    match ekf_train_epochs(&mut net, &mut belief, train, 1, &mut pass_rng) {
                        Ok(_) => {
                            let rmse = data_loss(&net, held).unwrap().sqrt();
                            line.push_str(&format!(" p{pass}:{:.3}", rmse / std));
                        }
                        Err(e) => {
                            line.push_str(&format!(" p{pass}:ERR({e})"));
                            break;
                        }
                    }
                }
                println!("{line}");
            }
        }
    }
}
