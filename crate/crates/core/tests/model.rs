use satnet_core::dam::DamConfig;
use satnet_core::dirm::LEVELS;
use satnet_core::model::{EfficiencyFactor, ModelConfig, Satnet, Stage};
use satnet_core::ops::tally_macs;
use satnet_core::{ParamStore, Shape, Tensor};

fn model(size: usize) -> Satnet {
    Satnet::new(ModelConfig {
        input_size: size,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn inputs(n: usize, size: usize) -> (Tensor<f32>, Tensor<f32>) {
    let rgb = Tensor::from_fn(Shape::new([n, 3, size, size]).unwrap(), |_, c, y, x| {
        ((c * 7 + y * 3 + x * 5) % 255) as f32 / 255.0
    });
    let depth = Tensor::from_fn(Shape::new([n, 1, size, size]).unwrap(), |_, _, y, x| {
        ((y * y + x) % 97) as f32 / 96.0
    });
    (rgb, depth)
}

#[test]
fn cost_report_is_consistent_with_the_store() {
    let m = model(256);
    let report = m.cost();
    let sum: u64 = report.stages.iter().map(|r| r.cost.params).sum();
    assert_eq!(sum, report.total.params);
    assert_eq!(report.total.params, m.layout().learnable_count());
    assert_eq!(report.total.params, m.init_params().learnable_count());
    assert_eq!(report.stage(Stage::Encoder).params, 2 * 2_223_872);
    assert_eq!(report.total.flops, 2 * report.total.macs);
}

#[test]
fn heatmap_kernel_changes_ten_convolutions() {
    let count = |k| {
        Satnet::new(ModelConfig {
            dam: DamConfig {
                heatmap_kernel: k,
                ..DamConfig::default()
            },
            ..ModelConfig::default()
        })
        .unwrap()
        .cost()
        .total
        .params
    };
    // Two modalities per level, five levels, 49 - 9 weights each.
    assert_eq!(count(7) - count(3), 2 * 5 * 40);
}

#[test]
fn flops_grow_with_efficiency_factor() {
    let flops: Vec<u64> = EfficiencyFactor::ALLOWED
        .iter()
        .map(|&ef| {
            Satnet::new(ModelConfig {
                ef: EfficiencyFactor::new(ef).unwrap(),
                ..ModelConfig::default()
            })
            .unwrap()
            .cost()
            .total
            .flops
        })
        .collect();
    assert!(flops.windows(2).all(|w| w[0] < w[1]), "{flops:?}");
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(EfficiencyFactor::new(48).is_err());
    assert!(Satnet::new(ModelConfig {
        input_size: 250,
        ..ModelConfig::default()
    })
    .is_err());
    let m = model(64);
    let p = m.init_params();
    let (rgb, _) = inputs(1, 64);
    let err = m.forward(&p, &rgb, &rgb).unwrap_err();
    assert!(err.to_string().contains("depth"), "{err}");
}

#[test]
fn zero_parameters_give_uniform_half_maps() {
    let m = model(64);
    let p = m.zero_params();
    let (rgb, depth) = inputs(1, 64);
    let out = m.forward(&p, &rgb, &depth).unwrap();
    for t in [&out.s, &out.s_p, &out.t_p, &out.p_gs, &out.p_lt] {
        assert!(t.data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn shapes_and_ranges_at_default_size() {
    let m = model(256);
    let p = m.init_params();
    let (rgb, depth) = inputs(1, 256);
    let (out, macs) = tally_macs(|| m.forward(&p, &rgb, &depth).unwrap());
    assert_eq!(macs, m.cost().total.macs);
    for i in 0..LEVELS {
        let s = 256 >> (i + 1);
        assert_eq!(out.t[i].dims(), [1, 32, s, s]);
        assert_eq!(out.s_levels[i].dims(), [1, 32, s, s]);
    }
    for t in [&out.s, &out.s_p, &out.t_p] {
        assert_eq!(t.dims(), [1, 1, 256, 256]);
        assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn batch_items_are_independent() {
    let m = model(64);
    let p = m.init_params();
    let (rgb, depth) = inputs(2, 64);
    let out = m.forward(&p, &rgb, &depth).unwrap();
    assert_eq!(out.s.batch_item(0), out.s.batch_item(1));
    let (rgb1, depth1) = inputs(1, 64);
    assert_eq!(m.forward(&p, &rgb1, &depth1).unwrap().s, out.s.batch_item(0));
}

#[test]
fn outputs_are_independent_of_thread_count_and_seeded() {
    let m = model(64);
    let p = m.init_params();
    let (rgb, depth) = inputs(1, 64);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| m.forward(&p, &rgb, &depth).unwrap().s)
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(1));

    let again: ParamStore<f32> = model(64).init_params();
    assert_eq!(again.to_bytes().unwrap(), p.to_bytes().unwrap());
    let other = Satnet::new(ModelConfig {
        input_size: 64,
        seed: 1,
        ..ModelConfig::default()
    })
    .unwrap()
    .init_params();
    assert_ne!(other.to_bytes().unwrap(), p.to_bytes().unwrap());
}

