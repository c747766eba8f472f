use adinfohrl::buffers::Transition;
use adinfohrl::envsim::EnvSpec;
use adinfohrl::hpolicy::assign_options;
use adinfohrl::optionnet::{train_on_batch, OptionNet, WeightedBatch};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn spec() -> EnvSpec {
    EnvSpec {
        state_dim: 1,
        action_dim: 1,
        action_low: vec![-1.0],
        action_high: vec![1.0],
        max_episode_steps: 1,
    }
}

fn blobs(centers: &[(f64, f64)], per_blob: usize, rng: &mut ChaCha8Rng) -> (Vec<Transition>, Vec<usize>) {
    let jitter = Normal::new(0.0, 0.05).unwrap();
    let mut transitions = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..per_blob {
        for (label, &(s, a)) in centers.iter().enumerate() {
            let s = s + jitter.sample(rng);
            transitions.push(Transition {
                state: vec![s],
                action: vec![(a + jitter.sample(rng)).clamp(-1.0, 1.0)],
                reward: 0.0,
                next_state: vec![s],
                terminal: true,
                behavior_log_density: 0.0,
                option_id: 0,
            });
            labels.push(label);
        }
    }
    (transitions, labels)
}

fn column(ts: &[Transition], f: impl Fn(&Transition) -> f64) -> Array2<f64> {
    Array2::from_shape_fn((ts.len(), 1), |(i, _)| f(&ts[i]))
}

/// Fraction of samples whose option agrees with its blob's majority option.
fn purity(assignments: &[usize], labels: &[usize], blobs: usize, options: usize) -> f64 {
    let mut counts = vec![vec![0usize; options]; blobs];
    for (&o, &l) in assignments.iter().zip(labels) {
        counts[l][o] += 1;
    }
    counts.iter().map(|c| *c.iter().max().unwrap()).sum::<usize>() as f64 / labels.len() as f64
}

fn trained_purity(centers: &[(f64, f64)], options: usize, seed: u64) -> (f64, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (transitions, labels) = blobs(centers, 100, &mut rng);
    let mut net = OptionNet::new(&spec(), options, &[32, 32], 1e-3, 0.1, 0.04, seed).unwrap();
    net.fit_input_scaling(&transitions).unwrap();
    let batch = WeightedBatch::uniform(net.transition_inputs(&transitions));
    let report = train_on_batch(&mut net, &batch, 40, 50, &mut rng).unwrap();
    assert!(report.final_terms.mutual_information() > 0.5);
    let assignments = assign_options(
        &net,
        column(&transitions, |t| t.state[0]).view(),
        column(&transitions, |t| t.action[0]).view(),
    );
    (purity(&assignments, &labels, centers.len(), options), assignments)
}

#[test]
fn two_blobs_get_separate_options() {
    let (p, assignments) = trained_purity(&[(-0.5, -0.5), (0.5, 0.5)], 2, 7);
    assert!(p >= 0.95, "purity {p}");
    assert!(assignments.contains(&0) && assignments.contains(&1));
}

#[test]
fn four_blobs_are_clustered_cleanly() {
    let centers = [(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)];
    let (p, _) = trained_purity(&centers, 4, 3);
    assert!(p >= 0.95, "purity {p}");
}

#[test]
fn input_scaling_standardizes_the_buffer() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (transitions, _) = blobs(&[(2.0, 0.3), (4.0, -0.3)], 50, &mut rng);
    let mut net = OptionNet::new(&spec(), 2, &[8], 1e-3, 0.1, 0.04, 1).unwrap();
    net.fit_input_scaling(&transitions).unwrap();
    let x = net.transition_inputs(&transitions);
    for col in x.columns() {
        let mean = col.mean().unwrap();
        let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10, "{mean} {var}");
    }
}
