mod common;

use excite_lens::excitation::excitation_backprop;

#[test]
fn excitation_matches_path_enumeration() {
    for seed in 100..160 {
        let net = common::toy_net(seed);
        let trace = common::run(&net);
        let hops = common::hops(&net, &trace);
        for class in 0..net.model.num_classes() {
            let maps = excitation_backprop(&net.model, &trace, class, &net.target).unwrap();
            let (want, lost) = common::path_marginals(&hops, class);
            assert_eq!(maps.data.len(), want.len());
            for (k, (a, b)) in maps.data.iter().zip(&want).enumerate() {
                assert!((*a as f64 - b).abs() <= 1e-6, "seed {seed} class {class} neuron {k}: {a} vs {b}");
            }
            assert!((maps.discarded_mass - lost).abs() <= 1e-6);
        }
    }
}

#[test]
fn toy_networks_stay_small() {
    for seed in 0..40 {
        let net = common::toy_net(seed);
        let weighted = net.model.layers().iter().filter(|l| l.weight_ref.is_some()).count();
        assert!(weighted <= 3);
        let neurons: usize = (1..net.model.layers().len())
            .filter(|&i| net.model.layers()[i].weight_ref.is_some())
            .map(|i| net.model.output_shape(i).numel())
            .sum();
        assert!(neurons <= 64, "seed {seed}: {neurons}");
    }
}
