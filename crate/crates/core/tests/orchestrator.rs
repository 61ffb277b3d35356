use fedbac::data::{partition_two_level, synth_mixture, Dataset, Partition, PartitionConfig};
use fedbac::model::{AdditiveLearner, AdditiveModel, LearnerConfig, SgdHyperparams};
use fedbac::orchestrator::{run_experiment, Experiment, InitAssignment, MethodConfig};
use fedbac::RngStream;

const DIM: usize = 6;
const CLASSES: usize = 4;

fn hp() -> SgdHyperparams {
    SgdHyperparams {
        lr: 0.05,
        local_epochs: 2,
        batch_size: 16,
        ..Default::default()
    }
}

fn learner() -> LearnerConfig {
    LearnerConfig::mlp(DIM, &[12], CLASSES)
}

fn dirichlet_partition(servers: usize, clients: usize, alpha: f64, seed: u64) -> Partition {
    let root = RngStream::root(seed);
    let pool = synth_mixture(CLASSES, DIM, 60, 3.0, &mut root.child("pool")).unwrap();
    let cfg = PartitionConfig {
        num_servers: servers,
        clients_per_server: clients,
        alpha_server: alpha,
        alpha_client: 0.5,
        test_fraction: 0.2,
    };
    partition_two_level(&pool, &cfg, &mut root.child("split")).unwrap()
}

/// `per_server[m]` lists the classes server `m` holds; each server gets
/// `clients` equal shards plus a test set, all drawn from one mixture.
fn label_partition(per_server: &[&[usize]], clients: usize, seed: u64) -> Partition {
    let pool = synth_mixture(CLASSES, DIM, 400, 4.0, &mut RngStream::root(seed).child("pool")).unwrap();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CLASSES];
    for i in 0..pool.len() {
        by_class[pool.label(i)].push(i);
    }
    let mut cursor = [0; CLASSES];
    let mut take = |c: usize, n: usize| -> Vec<usize> {
        let start = cursor[c];
        cursor[c] += n;
        by_class[c][start..start + n].to_vec()
    };
    let servers = per_server
        .iter()
        .map(|classes| {
            let shards = (0..clients)
                .map(|_| pool.subset(&classes.iter().flat_map(|&c| take(c, 20)).collect::<Vec<_>>()))
                .collect();
            let test = pool.subset(&classes.iter().flat_map(|&c| take(c, 15)).collect::<Vec<_>>());
            (shards, test)
        })
        .collect();
    Partition::from_datasets(CLASSES, servers).unwrap()
}

#[test]
fn same_seed_same_trace_different_seed_differs() {
    let part = dirichlet_partition(3, 3, 0.5, 1);
    let m = MethodConfig { reassign_period: 4, ..MethodConfig::fedbac(3) };
    let a = run_experiment(&m, &part, &learner(), &hp(), 8, 11).unwrap();
    let b = run_experiment(&m, &part, &learner(), &hp(), 8, 11).unwrap();
    let c = run_experiment(&m, &part, &learner(), &hp(), 8, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn hierfavg_and_single_cluster_ifca_coincide() {
    let part = dirichlet_partition(3, 2, 0.3, 2);
    let h = run_experiment(&MethodConfig::hierfavg(), &part, &learner(), &hp(), 6, 5).unwrap();
    let i = run_experiment(&MethodConfig { reassign_period: 2, ..MethodConfig::ifca(1) }, &part, &learner(), &hp(), 6, 5)
        .unwrap();
    assert_eq!(h, i);
}

#[test]
fn single_cluster_fedbac_is_additive_hierfavg() {
    let part = dirichlet_partition(3, 2, 0.3, 3);
    let fedbac = MethodConfig {
        k_max: 1,
        participation: 1.0,
        reassign_period: 100,
        ..MethodConfig::fedbac(3)
    };
    let additive = MethodConfig { additive_baseline: true, ..MethodConfig::hierfavg() };
    let a = run_experiment(&fedbac, &part, &learner(), &hp(), 6, 8).unwrap();
    let b = run_experiment(&additive, &part, &learner(), &hp(), 6, 8).unwrap();
    assert_eq!(a, b);
    // A single cluster leaves nothing to move to even when reassignment runs.
    let frequent = MethodConfig { reassign_period: 2, ..fedbac };
    let c = run_experiment(&frequent, &part, &learner(), &hp(), 6, 8).unwrap();
    assert_eq!(a, c);
}

#[test]
fn identical_client_data_matches_centralized_step() {
    let pool = synth_mixture(CLASSES, DIM, 10, 3.0, &mut RngStream::root(4).child("pool")).unwrap();
    let servers = (0..3).map(|_| (vec![pool.clone(), pool.clone()], pool.clone())).collect();
    let part = Partition::from_datasets(CLASSES, servers).unwrap();
    // One full batch per epoch so the sample order cannot matter.
    let hp = SgdHyperparams { batch_size: pool.len(), ..hp() };
    let mut exp = Experiment::new(MethodConfig::hierfavg(), &part, &learner(), hp.clone(), 1, 6).unwrap();
    let start = exp.state().server_model(0);
    exp.step().unwrap();
    let central = AdditiveLearner::single(learner())
        .unwrap()
        .local_sgd(&start, &pool, &hp, 0, &mut RngStream::root(99))
        .unwrap();
    let fed = exp.state().global.clone().unwrap();
    let worst = central.global.iter().zip(fed.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12, "max deviation {worst}");
}

#[test]
fn widened_learner_changes_only_capacity() {
    let part = dirichlet_partition(2, 2, 0.5, 5);
    let wide = learner().widened(2);
    assert_eq!(wide.hidden_dims, vec![24]);
    let log = run_experiment(&MethodConfig::hierfavg(), &part, &wide, &hp(), 2, 1).unwrap();
    let narrow = run_experiment(&MethodConfig::hierfavg(), &part, &learner(), &hp(), 2, 1).unwrap();
    assert!(log[0].comm_bytes_client_edge > narrow[0].comm_bytes_client_edge);
}

#[test]
fn global_step_uses_every_server_with_empty_clusters() {
    // Three servers, five clusters: two clusters stay empty yet the shared
    // network still averages all three servers.
    let part = dirichlet_partition(3, 2, 0.5, 6);
    let m = MethodConfig { k_max: 3, reassign_period: 100, init_assignment: InitAssignment::Uniform, ..MethodConfig::fedbac(3) };
    let mut exp = Experiment::new(m, &part, &learner(), hp(), 2, 3).unwrap();
    let before = exp.state().clusters.clone();
    let rec = exp.step().unwrap();
    assert_eq!(rec.active_clusters, 1);
    // untouched clusters keep their initial parameters bit for bit
    assert!(exp.state().clusters[1].bits_eq(&before[1]));
    assert!(exp.state().clusters[2].bits_eq(&before[2]));
    assert!(!exp.state().clusters[0].bits_eq(&before[0]));
}

#[test]
fn invariants_hold_over_a_long_run() {
    let part = dirichlet_partition(5, 3, 0.1, 7);
    let m = MethodConfig { reassign_period: 3, ..MethodConfig::fedbac(5) };
    let mut exp = Experiment::new(m, &part, &learner(), hp(), 24, 4).unwrap();
    let mut prev = exp.state().assignment.clone();
    let mut cum = 0;
    while !exp.is_done() {
        let rec = exp.step().unwrap();
        let a = &exp.state().assignment;
        assert_eq!(a.pi.len(), 5);
        assert!(a.pi.iter().all(|&k| k < 5));
        let moved = (0..5).filter(|&m| a.pi[m] != prev.pi[m]).count();
        if !rec.round.is_multiple_of(3) {
            assert_eq!(moved, 0);
        }
        for m in 0..5 {
            let expect = if a.pi[m] != prev.pi[m] { 0 } else { prev.tenure[m] + 1 };
            assert_eq!(a.tenure[m], expect);
        }
        cum += moved;
        assert_eq!(rec.cumulative_reassignments, cum);
        assert_eq!(rec.active_clusters, a.active_clusters());
        assert!(rec.active_clusters >= 1 && rec.active_clusters <= 5);
        assert_eq!(rec.selected_counts, vec![2; 5]);
        assert!(exp.state().is_finite());
        prev = a.clone();
    }
}

#[test]
fn disjoint_label_servers_end_up_apart() {
    let mut apart = 0;
    for seed in 0..10 {
        let part = label_partition(&[&[0, 1], &[2, 3]], 2, seed);
        let m = MethodConfig {
            k_max: 2,
            participation: 1.0,
            reassign_period: 5,
            ..MethodConfig::fedbac(2)
        };
        let log = run_experiment(&m, &part, &learner(), &hp(), 15, seed).unwrap();
        // after any of the first three reassignment events
        if log.iter().filter(|r| r.round % 5 == 0).any(|r| r.assignment[0] != r.assignment[1]) {
            apart += 1;
        }
    }
    assert!(apart >= 8, "distinct clusters in {apart}/10 seeds");
}

#[test]
fn ifca_keeps_separated_populations_split() {
    let mut stable = 0;
    for seed in 0..10 {
        let part = label_partition(&[&[0, 1], &[2, 3], &[0, 1], &[2, 3]], 2, seed);
        let m = MethodConfig { reassign_period: 4, ..MethodConfig::ifca(2) };
        let log = run_experiment(&m, &part, &learner(), &hp(), 16, seed).unwrap();
        let split = |pi: &[usize]| pi[0] == pi[2] && pi[1] == pi[3] && pi[0] != pi[1];
        if log[3..].iter().all(|r| split(&r.assignment)) {
            stable += 1;
        }
    }
    assert!(stable >= 8, "stable split in {stable}/10 seeds");
}

#[test]
fn zero_step_size_broadcast_survives_rounds() {
    let part = dirichlet_partition(2, 3, 0.5, 8);
    let hp = SgdHyperparams { lr: 0.0, ..hp() };
    let m = MethodConfig { participation: 1.0, ..MethodConfig::fedbac(2) };
    let mut exp = Experiment::new(m, &part, &learner(), hp, 3, 2).unwrap();
    let start: Vec<AdditiveModel> = (0..2).map(|m| exp.state().server_model(m)).collect();
    exp.step().unwrap();
    exp.step().unwrap();
    for (m, s) in start.iter().enumerate() {
        assert!(exp.state().server_model(m).bits_eq(s));
    }
}

#[test]
fn dataset_helper_rejects_bad_input() {
    let d = Dataset::from_parts(2, vec![0.0, 1.0], vec![0]).unwrap();
    assert!(Partition::from_datasets(2, vec![]).is_err());
    assert!(Partition::from_datasets(2, vec![(vec![], d.clone())]).is_err());
    let bad = Dataset::from_parts(2, vec![0.0, 1.0], vec![5]).unwrap();
    assert!(Partition::from_datasets(2, vec![(vec![bad], d.clone())]).is_err());
    assert!(Partition::from_datasets(2, vec![(vec![d.clone()], d)]).is_ok());
}

