//! Reference RLC networks used by the experiments, examples, and tests.

use crate::netmodel::{Edge, GroundedComponents, RLCNetwork};

fn standard_ground() -> GroundedComponents {
    GroundedComponents {
        c_farad: Some(2e-6),
        r_ohm: Some(500.0),
        l_henry: Some(18e-3),
    }
}

fn edge(a: usize, b: usize, r: Option<f64>, l: Option<f64>) -> Edge {
    Edge {
        a: a - 1,
        b: b - 1,
        c_farad: None,
        r_ohm: r,
        l_henry: l,
    }
}

/// One grounded RLC node with a single excitation.
pub fn single_node_network() -> RLCNetwork {
    RLCNetwork {
        node_count: 1,
        grounded: vec![standard_ground()],
        edges: vec![],
        excitation_nodes: vec![0],
    }
}

/// A small two-node network for statistical calibration tests.
pub fn two_node_network() -> RLCNetwork {
    RLCNetwork {
        node_count: 2,
        grounded: vec![standard_ground(); 2],
        edges: vec![edge(1, 2, Some(100.0), Some(5e-3))],
        excitation_nodes: vec![0],
    }
}

/// The 7-node RLC circuit (excitation at node 1).
pub fn seven_node_network() -> RLCNetwork {
    RLCNetwork {
        node_count: 7,
        grounded: vec![standard_ground(); 7],
        edges: vec![
            edge(1, 2, None, Some(5e-3)),
            edge(1, 3, Some(100.0), None),
            edge(2, 3, Some(200.0), Some(10e-3)),
            edge(2, 5, None, Some(15e-3)),
            edge(3, 4, Some(150.0), Some(12e-3)),
            edge(3, 6, Some(180.0), None),
            edge(4, 5, None, Some(20e-3)),
            edge(5, 6, Some(160.0), Some(13e-3)),
            edge(5, 7, Some(120.0), None),
        ],
        excitation_nodes: vec![0],
    }
}

/// The 7-node circuit with target-subnetwork defects: L_12 drifted to 10 mH,
/// R_10 drifted to 200 ohm, grounded R_20 open.
pub fn seven_node_defect_network() -> RLCNetwork {
    let mut net = seven_node_network();
    net.edges[0].l_henry = Some(10e-3);
    net.grounded[0].r_ohm = Some(200.0);
    net.grounded[1].r_ohm = None;
    net
}

fn ten_node_edges(
    r13: Option<f64>,
    r36: Option<f64>,
    r45: Option<f64>,
    r89: Option<f64>,
    l25: Option<f64>,
    l56: Option<f64>,
) -> Vec<Edge> {
    vec![
        edge(1, 3, r13, None),
        edge(2, 3, Some(200.0), Some(10e-3)),
        edge(3, 4, Some(150.0), Some(12e-3)),
        edge(3, 6, r36, None),
        edge(4, 5, r45, Some(20e-3)),
        edge(3, 8, Some(180.0), None),
        edge(5, 6, Some(160.0), l56),
        edge(5, 7, Some(120.0), None),
        edge(8, 9, r89, Some(13e-3)),
        edge(9, 10, Some(120.0), None),
        edge(1, 9, None, Some(5e-3)),
        edge(2, 9, None, Some(3e-3)),
        edge(2, 5, None, l25),
    ]
}

/// The 10-node RLC circuit with healthy component values (excitation at
/// node 3).
pub fn ten_node_network() -> RLCNetwork {
    RLCNetwork {
        node_count: 10,
        grounded: vec![standard_ground(); 10],
        edges: ten_node_edges(
            Some(100.0),
            Some(180.0),
            Some(350.0),
            Some(160.0),
            Some(15e-3),
            Some(13e-3),
        ),
        excitation_nodes: vec![2],
    }
}

/// The 10-node circuit with the defect set: R_13 -> 200, R_36 -> 500,
/// R_45 open, R_89 -> 500, L_25 -> 1 mH, L_56 open.
pub fn ten_node_defect_network() -> RLCNetwork {
    RLCNetwork {
        node_count: 10,
        grounded: vec![standard_ground(); 10],
        edges: ten_node_edges(
            Some(200.0),
            Some(500.0),
            None,
            Some(500.0),
            Some(1e-3),
            None,
        ),
        excitation_nodes: vec![2],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_networks_are_valid() {
        for net in [
            single_node_network(),
            two_node_network(),
            seven_node_network(),
            seven_node_defect_network(),
            ten_node_network(),
            ten_node_defect_network(),
        ] {
            net.validate().unwrap();
        }
    }

    #[test]
    fn defect_networks_share_nominal_structure_support() {
        // every defect edge slot exists in the nominal network too
        let nominal = ten_node_network();
        let defect = ten_node_defect_network();
        assert_eq!(nominal.edges.len(), defect.edges.len());
        for (n, d) in nominal.edges.iter().zip(&defect.edges) {
            assert_eq!((n.a, n.b), (d.a, d.b));
        }
    }
}
