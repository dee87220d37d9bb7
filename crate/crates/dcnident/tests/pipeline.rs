//! End-to-end pipeline checks on small networks.

use dcnident::lpm::{run_lpm, LpmSettings};
use dcnident::netmodel::{dcn_to_components, default_open_threshold, rlc_to_dcn};
use dcnident::networks::seven_node_network;
use dcnident::signalgen::{generate_excitation, select_band, synth_frequency_data, ExperimentConfig};
use dcnident::smle::{smle_refine, GnSettings};
use dcnident::structest::{build_constraints, sk_identify, ParamLayout, SkSettings};
use dcnident::subnet::{
    identify_immersed, kron_reduce, recover_subnet, subnet_components, subnet_constraints,
    ImmersedOrders, Partition, SubnetLayout,
};

#[test]
fn seven_node_noiseless_end_to_end() {
    let start = std::time::Instant::now();
    let net = seven_node_network();
    let model = rlc_to_dcn(&net).unwrap();
    let cfg = ExperimentConfig {
        n_samples: 20_000,
        fs_hz: 20_000.0,
        sigma_r2: 1.0,
        sigma_e2: 0.0,
        band_hz: (500.0, 4000.0),
        seed: 1,
        transient_scale: 0.0,
    };
    let exc = generate_excitation(&cfg, &net.excitation_nodes).unwrap();
    let full = synth_frequency_data(&model, &cfg, &exc.dft).unwrap();
    let ds = select_band(&full, cfg.band_hz).unwrap();
    let np = run_lpm(&ds, &LpmSettings::auto(7, 1)).unwrap();
    let layout = ParamLayout::from_model(&model);
    let con = build_constraints(&layout, &model, &[]).unwrap();
    let sk = sk_identify(&ds, &np, &layout, &con, &SkSettings::default()).unwrap();
    let pins = con.as_pins().unwrap();
    let mut mask = vec![true; layout.dim()];
    for (idx, _) in pins {
        mask[idx] = false;
    }
    let refined = smle_refine(&sk.theta, &mask, &ds, &np, &layout, &GnSettings::default()).unwrap();
    let (a, b, c) = layout.unpack(&refined.theta);
    let est_model = dcnident::netmodel::DCNModel {
        a,
        b,
        c,
        f: model.f.clone(),
        topology: model.topology.clone(),
        node_count: 7,
        excitation_count: 1,
        n_a: 2,
        n_b: 1,
        n_c: 1,
    };
    let thr = default_open_threshold(&model, &net);
    let est = dcn_to_components(&est_model, &net, &thr).unwrap();
    let truth = dcn_to_components(&model, &net, &thr).unwrap();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (e, t) in est.iter().zip(&truth) {
        assert_eq!(e.name, t.name);
        let rel = (e.coefficient - t.coefficient).abs() / t.coefficient.abs().max(1e-30);
        if rel > max_rel {
            max_rel = rel;
            worst = e.name.clone();
        }
    }
    eprintln!("max component error {max_rel} at {worst}; elapsed {:?}", start.elapsed());
    assert!(max_rel < 1e-4, "max relative component error {max_rel} ({worst})");
    assert!(start.elapsed().as_secs() < 30);
}

#[test]
fn seven_node_noiseless_subnet_recovery() {
    let start = std::time::Instant::now();
    let net = seven_node_network();
    let model = rlc_to_dcn(&net).unwrap();
    let part = Partition {
        j: vec![0, 1],
        d: vec![2, 4],
        i: vec![3, 5, 6],
    };
    let cfg = ExperimentConfig {
        n_samples: 20_000,
        fs_hz: 20_000.0,
        sigma_r2: 1.0,
        sigma_e2: 0.0,
        band_hz: (500.0, 6000.0),
        seed: 7,
        transient_scale: 0.0,
    };
    let exc = generate_excitation(&cfg, &net.excitation_nodes).unwrap();
    let full = synth_frequency_data(&model, &cfg, &exc.dft).unwrap();
    let ds = select_band(&full, cfg.band_hz).unwrap();
    let ds_m = ds.restrict_nodes(&part.measured());

    let template = kron_reduce(&model, &part).unwrap();
    let orders = ImmersedOrders {
        n_a_im: 3,
        n_b_im: 2,
        n_c_im: 1,
    };
    let im = identify_immersed(
        &ds_m,
        &template,
        &model,
        &part,
        0,
        orders,
        &SkSettings::default(),
        &GnSettings::default(),
    )
    .unwrap();

    let layout1 = SubnetLayout {
        l_j: part.j.len(),
        l_d: part.d.len(),
        k: 1,
        n_a: 2,
        n_b: 1,
    };
    let con1 = subnet_constraints(&layout1, &model, &part).unwrap();
    let grid: Vec<f64> = (0..ds_m.freq_count()).map(|k| ds_m.omega(k).im).collect();
    let est = recover_subnet(&im, part.j.len(), &grid, &layout1, &con1).unwrap();
    let comps = subnet_components(&est, &part, &model, &net);
    assert!(!comps.is_empty());

    // expected truth for the recovered slots
    let thr = default_open_threshold(&model, &net);
    let truth = dcn_to_components(&model, &net, &thr).unwrap();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for e in &comps {
        let t = truth.iter().find(|t| t.name == e.name).unwrap();
        let rel = (e.coefficient - t.coefficient).abs() / t.coefficient.abs().max(1e-30);
        if rel > max_rel {
            max_rel = rel;
            worst = e.name.clone();
        }
    }
    eprintln!(
        "subnet: {} components, max error {max_rel} at {worst}; elapsed {:?}",
        comps.len(),
        start.elapsed()
    );
    assert!(max_rel < 1e-4, "max relative subnet error {max_rel} ({worst})");
    assert!(start.elapsed().as_secs() < 120);
}
